//! Chat-completion style HTTP client for a remote multimodal model.

use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::time::Duration;

use serde_json::{json, Value};

use super::{
    activity_or_default, normalize_groups, AnnotationPayload, EstimateSource, EstimationError, GroupEstimate,
    GroupEstimator,
};
use crate::world::SocialGroup;

pub const PROMPT_V1: &str = include_str!("../../assets/group_prompt_v1.txt");

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
    pub key: String,
    pub timeout: Duration,
}

impl RemoteConfig {
    /// Reads `GSON_LLM_URL`, `GSON_LLM_MODEL` and `GSON_LLM_KEY`.
    pub fn from_env() -> Result<Self, EstimationError> {
        let get = |k: &str| std::env::var(k).map_err(|_| EstimationError::MissingConfig(k.to_string()));
        Ok(RemoteConfig {
            url: get("GSON_LLM_URL")?,
            model: get("GSON_LLM_MODEL")?,
            key: get("GSON_LLM_KEY")?,
            timeout: Duration::from_secs(10),
        })
    }
}

pub fn build_request(payload: &AnnotationPayload, model: &str) -> Value {
    let people: Vec<Value> = payload
        .entries
        .iter()
        .map(|e| {
            json!({
                "id": e.track_id,
                "x": e.position.x,
                "y": e.position.y,
                "vx": e.velocity.x,
                "vy": e.velocity.y,
            })
        })
        .collect();
    let user = json!({ "timestamp": payload.timestamp, "people": people }).to_string();
    json!({
        "model": model,
        "messages": [
            { "role": "system", "content": payload.instructions },
            { "role": "user", "content": user },
        ],
    })
}

fn strip_fences(s: &str) -> &str {
    let t = s.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.trim_start_matches(|c: char| c.is_ascii_alphanumeric());
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

/// Accepts either a chat envelope (`choices[0].message.content`) or the bare
/// answer object. Unknown ids and repeated memberships are dropped.
pub fn parse_reply(text: &str, payload: &AnnotationPayload) -> Result<Vec<SocialGroup>, EstimationError> {
    let perr = |m: String| EstimationError::Parse(m);
    let outer: Value = serde_json::from_str(strip_fences(text)).map_err(|e| perr(e.to_string()))?;
    let answer = match outer.pointer("/choices/0/message/content") {
        Some(Value::String(content)) => {
            serde_json::from_str::<Value>(strip_fences(content)).map_err(|e| perr(format!("content: {e}")))?
        }
        Some(_) => return Err(perr("message content is not a string".into())),
        None => outer,
    };
    let groups = answer
        .get("groups")
        .and_then(Value::as_array)
        .ok_or_else(|| perr("missing \"groups\" array".into()))?;
    let activities = answer.get("activities").and_then(Value::as_array);
    let mut out = Vec::with_capacity(groups.len());
    for (k, g) in groups.iter().enumerate() {
        let members = g.as_array().ok_or_else(|| perr(format!("group {k} is not an array")))?;
        let ids = members
            .iter()
            .filter_map(Value::as_u64)
            .filter_map(|v| u32::try_from(v).ok());
        let label = activities.and_then(|a| a.get(k)).and_then(Value::as_str);
        out.push(SocialGroup::new(k as u32, ids, activity_or_default(label)));
    }
    Ok(normalize_groups(out, &payload.ids()))
}

#[derive(Debug, Clone)]
pub struct RemoteEstimator {
    config: RemoteConfig,
}

impl RemoteEstimator {
    pub fn new(config: RemoteConfig) -> Self {
        RemoteEstimator { config }
    }

    /// Blocking round trip.
    pub fn query(&self, payload: &AnnotationPayload) -> Result<GroupEstimate, EstimationError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.config.timeout))
            .build()
            .into();
        let body = build_request(payload, &self.config.model);
        let mut resp = agent
            .post(&self.config.url)
            .header("Authorization", &format!("Bearer {}", self.config.key))
            .send_json(&body)
            .map_err(map_err)?;
        let text = resp.body_mut().read_to_string().map_err(map_err)?;
        Ok(GroupEstimate {
            groups: parse_reply(&text, payload)?,
            source: EstimateSource::Remote,
            issued_at: payload.timestamp,
        })
    }

    /// Runs the query on a worker thread.
    pub fn spawn(&self, payload: AnnotationPayload) -> PendingEstimate {
        let (tx, rx) = mpsc::channel();
        let me = self.clone();
        std::thread::spawn(move || {
            let _ = tx.send(me.query(&payload));
        });
        PendingEstimate { rx }
    }
}

fn map_err(e: ureq::Error) -> EstimationError {
    match e {
        ureq::Error::Timeout(_) => EstimationError::Timeout,
        other => EstimationError::Transport(other.to_string()),
    }
}

impl GroupEstimator for RemoteEstimator {
    fn source(&self) -> EstimateSource {
        EstimateSource::Remote
    }

    fn estimate(&mut self, payload: &AnnotationPayload, _truth: &[SocialGroup]) -> Result<GroupEstimate, EstimationError> {
        self.query(payload)
    }
}

/// An in-flight remote query, polled at tick boundaries.
#[derive(Debug)]
pub struct PendingEstimate {
    rx: Receiver<Result<GroupEstimate, EstimationError>>,
}

impl PendingEstimate {
    /// `None` while the query is still running.
    pub fn try_take(&self) -> Option<Result<GroupEstimate, EstimationError>> {
        match self.rx.try_recv() {
            Ok(r) => Some(r),
            Err(TryRecvError::Empty) => None,
            Err(TryRecvError::Disconnected) => Some(Err(EstimationError::Transport("worker exited".into()))),
        }
    }

    pub fn wait(self) -> Result<GroupEstimate, EstimationError> {
        self.rx
            .recv()
            .unwrap_or_else(|_| Err(EstimationError::Transport("worker exited".into())))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::world::Activity;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn ids(g: &SocialGroup) -> Vec<u32> {
        g.member_ids.iter().copied().collect()
    }

    #[test]
    fn direct_reply() {
        let g = parse_reply(r#"{"groups": [[1,2]], "activities": ["conversation"]}"#, &payload(&[1, 2, 3])).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(ids(&g[0]), vec![1, 2]);
        assert_eq!(g[0].activity, Activity::Conversation);
    }

    #[test]
    fn unknown_ids_dropped() {
        let g = parse_reply(r#"{"groups": [[1,99,2]], "activities": ["queue"]}"#, &payload(&[1, 2])).unwrap();
        assert_eq!(ids(&g[0]), vec![1, 2]);
        assert_eq!(g[0].activity, Activity::Queue);
        let none = parse_reply(r#"{"groups": [[99]]}"#, &payload(&[1])).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn malformed_reply_is_error() {
        let p = payload(&[1, 2]);
        assert!(matches!(parse_reply(r#"{"groups": [[1,2"#, &p), Err(EstimationError::Parse(_))));
        assert!(parse_reply(r#"{"activities": []}"#, &p).is_err());
        assert!(parse_reply(r#"{"groups": [3]}"#, &p).is_err());
    }

    #[test]
    fn envelope_and_fences() {
        let content = "```json\n{\"groups\": [[2,3],[3,4]], \"activities\": [\"walking\", \"dancing\"]}\n```";
        let env = json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string();
        let g = parse_reply(&env, &payload(&[2, 3, 4])).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(ids(&g[1]), vec![4]);
        assert_eq!(g[0].activity, Activity::Walking);
        assert_eq!(g[1].activity, Activity::Conversation);
    }

    #[test]
    fn request_shape() {
        let mut p = payload(&[5]);
        p.instructions = PROMPT_V1.to_string();
        let r = build_request(&p, "m1");
        assert_eq!(r["model"], "m1");
        assert_eq!(r["messages"][0]["role"], "system");
        let user: Value = serde_json::from_str(r["messages"][1]["content"].as_str().unwrap()).unwrap();
        assert_eq!(user["people"][0]["id"], 5);
        assert!(PROMPT_V1.contains("\"groups\""));
    }

    /// One-shot HTTP server answering with `body`; returns the URL and a
    /// handle yielding the raw request.
    fn serve_once(status: &str, body: String) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
        let status = status.to_string();
        let h = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut buf = vec![0u8; len];
            reader.read_exact(&mut buf).unwrap();
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            head + &String::from_utf8(buf).unwrap()
        });
        (url, h)
    }

    fn config(url: String) -> RemoteConfig {
        RemoteConfig {
            url,
            model: "test-model".into(),
            key: "secret".into(),
            timeout: Duration::from_secs(5),
        }
    }

    #[test]
    fn round_trip_against_local_server() {
        let reply = json!({"choices": [{"message": {"content": "{\"groups\": [[1,2]], \"activities\": [\"queue\"]}"}}]});
        let (url, h) = serve_once("200 OK", reply.to_string());
        let est = RemoteEstimator::new(config(url));
        let out = est.spawn(payload(&[1, 2, 3])).wait().unwrap();
        assert_eq!(out.source, EstimateSource::Remote);
        assert_eq!(ids(&out.groups[0]), vec![1, 2]);
        let req = h.join().unwrap();
        assert!(req.starts_with("POST /v1/chat"));
        assert!(req.to_ascii_lowercase().contains("authorization: bearer secret"));
        let body: Value = serde_json::from_str(req.split("\r\n\r\n").nth(1).unwrap()).unwrap();
        assert_eq!(body["model"], "test-model");
        assert!(body["messages"].as_array().is_some_and(|m| m.len() == 2));
    }

    #[test]
    fn server_error_and_garbage_surface_as_errors() {
        let (url, h) = serve_once("500 Internal Server Error", "{}".into());
        let mut est = RemoteEstimator::new(config(url));
        assert!(matches!(est.estimate(&payload(&[1]), &[]), Err(EstimationError::Transport(_))));
        h.join().unwrap();
        let (url, h) = serve_once("200 OK", "{\"groups\": [[1".into());
        let est = RemoteEstimator::new(config(url));
        assert!(matches!(est.query(&payload(&[1])), Err(EstimationError::Parse(_))));
        h.join().unwrap();
    }

    #[test]
    fn unreachable_endpoint_is_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let est = RemoteEstimator::new(config(format!("http://127.0.0.1:{port}/")));
        assert!(est.query(&payload(&[1])).is_err());
    }
}
