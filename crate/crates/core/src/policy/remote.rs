use serde::{Deserialize, Serialize};

use super::{Policy, ProbDist};
use crate::error::{Error, Result};
use crate::http::JsonClient;
use crate::vocab::TokenId;

#[derive(Serialize)]
struct NextTokenRequest<'a> {
    prefix: &'a [TokenId],
    vocab_size: usize,
}

#[derive(Deserialize)]
struct NextTokenResponse {
    logprobs: Vec<f64>,
}

/// A policy served over HTTP: `POST /v1/next_token` with the prefix ids,
/// answered with one log-probability per vocabulary entry.
#[derive(Debug, Clone)]
pub struct RemotePolicyClient {
    http: JsonClient,
    vocab_size: usize,
}

impl RemotePolicyClient {
    pub fn new(endpoint: &str, vocab_size: usize, timeout_ms: u64, retries: u32) -> Result<Self> {
        Ok(RemotePolicyClient {
            http: JsonClient::new(endpoint, timeout_ms, retries)?,
            vocab_size,
        })
    }
}

impl Policy for RemotePolicyClient {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn raw_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let body = self.http.post(
            "/v1/next_token",
            &NextTokenRequest {
                prefix,
                vocab_size: self.vocab_size,
            },
        )?;
        let response: NextTokenResponse = serde_json::from_value(body)
            .map_err(|e| Error::Protocol(format!("bad next_token payload: {e}")))?;
        if response.logprobs.len() != self.vocab_size {
            return Err(Error::Protocol(format!(
                "expected {} logprobs, got {}",
                self.vocab_size,
                response.logprobs.len()
            )));
        }
        let dist = ProbDist::from_logprobs(&response.logprobs)
            .map_err(|e| Error::Protocol(e.to_string()))?;
        Ok(dist.probs().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::MockServer;
    use crate::vocab::SequenceState;
    use approx::assert_abs_diff_eq;

    #[test]
    fn renormalizes_logprobs() {
        let server = MockServer::start(|path, body| {
            assert_eq!(path, "/v1/next_token");
            let req: serde_json::Value = serde_json::from_str(body).unwrap();
            assert_eq!(req["vocab_size"], 4);
            assert_eq!(req["prefix"], serde_json::json!([0]));
            Some((200, r#"{"logprobs":[-1.0,-1.5,-0.5,-3.0]}"#.into()))
        });
        let client = RemotePolicyClient::new(&server.url(), 4, 2000, 0).unwrap();
        let d = client.next_dist(&SequenceState::root()).unwrap();
        assert_abs_diff_eq!(d.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_eq!(d.probs()[0], 0.0);
        let w = [(-1.5f64).exp(), (-0.5f64).exp(), (-3.0f64).exp()];
        let z: f64 = w.iter().sum();
        assert_abs_diff_eq!(d.probs()[2], w[1] / z, epsilon = 1e-12);
        assert_eq!(server.requests(), 1);
    }

    #[test]
    fn wrong_length_is_protocol_error() {
        let server = MockServer::start(|_, _| Some((200, r#"{"logprobs":[0,0,0]}"#.into())));
        let client = RemotePolicyClient::new(&server.url(), 4, 2000, 3).unwrap();
        let err = client.next_dist(&SequenceState::root()).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
        assert_eq!(server.requests(), 1);
    }

    #[test]
    fn malformed_and_non_200() {
        let server = MockServer::start(|_, _| Some((200, "not json".into())));
        let client = RemotePolicyClient::new(&server.url(), 2, 2000, 0).unwrap();
        assert!(matches!(client.raw_probs(&[0]), Err(Error::Protocol(_))));
        let server = MockServer::start(|_, _| Some((503, "{}".into())));
        let client = RemotePolicyClient::new(&server.url(), 2, 2000, 0).unwrap();
        assert!(matches!(client.raw_probs(&[0]), Err(Error::Protocol(_))));
        let server = MockServer::start(|_, _| Some((200, r#"{"probs":[0,0]}"#.into())));
        let client = RemotePolicyClient::new(&server.url(), 2, 2000, 0).unwrap();
        assert!(matches!(client.raw_probs(&[0]), Err(Error::Protocol(_))));
    }

    #[test]
    fn unreachable_endpoint_retries() {
        let url = crate::testutil::dead_endpoint();
        let client = RemotePolicyClient::new(&url, 4, 300, 2).unwrap();
        match client.raw_probs(&[0]) {
            Err(Error::RemoteUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected RemoteUnavailable, got {other:?}"),
        }
    }

    #[test]
    fn zero_timeout_rejected() {
        assert!(RemotePolicyClient::new("http://127.0.0.1:1", 4, 0, 0).is_err());
    }
}
