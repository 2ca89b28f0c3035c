//! Chat-completion client used to propose co-occurring categories.

use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Environment variable holding the optional bearer token.
pub const TOKEN_ENV: &str = "CMP_LLM_TOKEN";

/// Builds the question sent to the language model for `class_name`.
pub fn co_occurrence_prompt(class_name: &str) -> String {
    format!("For an image containing {class_name}, what other objects might co-exist?")
}

#[derive(Clone, Debug)]
pub struct LlmClient {
    endpoint: String,
    model: String,
    token: Option<String>,
    timeout: Duration,
}

impl LlmClient {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            timeout: Duration::from_secs(20),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn request_body(&self, class_name: &str) -> Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": co_occurrence_prompt(class_name) }],
        })
    }

    /// Sends the co-occurrence question and returns the raw answer text.
    pub fn ask(&self, class_name: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut req = agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(tok) = &self.token {
            req = req.header("Authorization", &format!("Bearer {tok}"));
        }
        let fail = |reason: String| Error::Expansion { target: class_name.to_string(), reason };
        let mut resp = req.send_json(self.request_body(class_name)).map_err(|e| fail(format!("llm request: {e}")))?;
        let body: Value = resp.body_mut().read_json().map_err(|e| fail(format!("llm response: {e}")))?;
        extract_content(&body).ok_or_else(|| fail("llm response has no choices[0].message.content".into()))
    }
}

fn extract_content(body: &Value) -> Option<String> {
    body.get("choices")?.get(0)?.get("message")?.get("content")?.as_str().map(str::to_string)
}

/// Splits an answer on commas, semicolons and newlines, stripping list markers.
pub fn parse_answer(text: &str) -> Vec<String> {
    text.split([',', '\n', ';'])
        .map(|item| {
            let item = item.trim();
            let item = item.trim_start_matches(['-', '*', '•']).trim_start();
            let digits = item.chars().take_while(char::is_ascii_digit).count();
            let item = if digits > 0 && item[digits..].starts_with(['.', ')']) { item[digits + 1..].trim_start() } else { item };
            let item = item.strip_prefix("and ").unwrap_or(item);
            item.trim_end_matches('.').trim().to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_substitutes_class_name() {
        assert_eq!(co_occurrence_prompt("dog"), "For an image containing dog, what other objects might co-exist?");
    }

    #[test]
    fn parses_mixed_lists() {
        assert_eq!(parse_answer("grass, person,  fence."), vec!["grass", "person", "fence"]);
        assert_eq!(parse_answer("1. grass\n2) a leash\n- person\n\n"), vec!["grass", "a leash", "person"]);
        assert_eq!(parse_answer("trees, cars and people"), vec!["trees", "cars and people"]);
        assert_eq!(parse_answer("trees, and cars"), vec!["trees", "cars"]);
    }

    #[test]
    fn content_extraction() {
        let v = json!({"choices": [{"message": {"role": "assistant", "content": "a, b"}}]});
        assert_eq!(extract_content(&v).as_deref(), Some("a, b"));
        assert!(extract_content(&json!({"error": "x"})).is_none());
    }
}
