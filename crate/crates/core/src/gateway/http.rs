use std::time::Duration;

use serde_json::{json, Value};
use ureq::Agent;

use super::{ChatRequest, Completion, Transport, TransportError};

/// OpenAI-compatible `/chat/completions` and `/embeddings` client.
pub struct HttpTransport {
    agent: Agent,
    base_url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(base_url: String, api_key: String, timeout: Duration) -> Self {
        Self {
            agent: build_agent(timeout),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        let url = format!("{}/{}", self.base_url, path);
        let mut resp = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_ureq_error)?;
        check_status(status, &text)?;
        serde_json::from_str(&text).map_err(|e| TransportError::Fatal(format!("invalid JSON body: {e}")))
    }
}

pub(crate) fn build_agent(timeout: Duration) -> Agent {
    Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

pub(crate) fn check_status(status: u16, body: &str) -> Result<(), TransportError> {
    match status {
        200..=299 => Ok(()),
        401 | 403 => Err(TransportError::Auth(status)),
        408 | 429 | 500..=599 => Err(TransportError::Transient(format!("HTTP {status}"))),
        _ => {
            let snippet: String = body.chars().take(200).collect();
            Err(TransportError::Fatal(format!("HTTP {status}: {snippet}")))
        }
    }
}

pub(crate) fn map_ureq_error(err: ureq::Error) -> TransportError {
    match err {
        ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            TransportError::Transient(err.to_string())
        }
        other => TransportError::Fatal(other.to_string()),
    }
}

impl Transport for HttpTransport {
    fn chat(&self, request: &ChatRequest, model: &str) -> Result<Completion, TransportError> {
        let mut body = json!({
            "model": model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "stream": false,
        });
        if let Some(seed) = request.seed_hint {
            body["seed"] = json!(seed);
        }
        let value = self.post("chat/completions", &body)?;
        Ok(parse_chat_response(&value))
    }

    fn embed(&self, texts: &[String], model: &str) -> Result<Vec<Vec<f64>>, TransportError> {
        let value = self.post("embeddings", &json!({"model": model, "input": texts}))?;
        parse_embedding_response(&value)
    }
}

pub(crate) fn parse_chat_response(value: &Value) -> Completion {
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string);
    let usage = |field: &str| {
        value
            .pointer(&format!("/usage/{field}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Completion {
        text,
        input_tokens: usage("prompt_tokens"),
        output_tokens: usage("completion_tokens"),
    }
}

pub(crate) fn parse_embedding_response(value: &Value) -> Result<Vec<Vec<f64>>, TransportError> {
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| TransportError::Fatal("embedding response has no data array".into()))?;
    let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
    for (pos, item) in data.iter().enumerate() {
        let index = item.get("index").and_then(Value::as_u64).unwrap_or(pos as u64);
        let vector = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| TransportError::Fatal("embedding item missing vector".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| TransportError::Fatal("non-numeric embedding".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push((index, vector));
    }
    rows.sort_by_key(|(i, _)| *i);
    Ok(rows.into_iter().map(|(_, v)| v).collect())
}
