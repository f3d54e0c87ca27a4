//! Optional chat-completion adapter for relation extraction.

use std::collections::BTreeSet;
use std::time::Duration;

use serde_json::json;

use super::canon::{canonicalize_entity, DEFAULT_THRESHOLD};
use super::{ExtractionResult, ExtractionSource};
use crate::error::{Error, Result};
use crate::scene::{CategoryPair, SoftRelationalLabel, Vocabulary};

pub const PROMPT_PREFIX: &str = "Find all of the binary relationships between entities in the input";
const FORMAT_HINT: &str = "Answer only with a parenthesised, comma-separated list of entity pairs joined by hyphens, e.g. (pillow-couch, couch-shelves).";

pub const ENV_BASE_URL: &str = "B2N_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "B2N_LLM_API_KEY";
pub const ENV_MODEL: &str = "B2N_LLM_MODEL";

/// Anything that turns a prompt into a completion. Implementations must be
/// callable from several workers at once.
pub trait CompletionEndpoint: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub fn build_prompt(description: &str) -> String {
    format!("{PROMPT_PREFIX} {}\n{FORMAT_HINT}", description.trim())
}

/// OpenAI-style `POST {base}/chat/completions` client.
pub struct HttpCompletionClient {
    base_url: String,
    api_key: String,
    model: String,
    agent: ureq::Agent,
}

impl HttpCompletionClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            model: model.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
        }
    }

    pub fn from_env() -> Result<Self> {
        let get = |k: &str| std::env::var(k).map_err(|_| Error::Config(format!("environment variable {k} is not set")));
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4o-mini".to_string());
        Ok(Self::new(get(ENV_BASE_URL)?, get(ENV_API_KEY)?, model))
    }
}

impl CompletionEndpoint for HttpCompletionClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let resp = self
            .agent
            .post(&format!("{}/chat/completions", self.base_url))
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| Error::Extraction(format!("transport: {e}")))?;
        let value: serde_json::Value =
            resp.into_json().map_err(|e| Error::Extraction(format!("unreadable response: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Extraction("response has no choices[0].message.content".into()))
    }
}

/// Parses a `(a-b, c-d)` reply, canonicalizing every name. Pairs with an
/// unresolvable name are dropped and the name is listed as unresolved.
pub fn parse_llm_reply(reply: &str, vocab: &Vocabulary, threshold: f64) -> Result<ExtractionResult> {
    let trimmed = reply.trim();
    let inner = match (trimmed.find('('), trimmed.rfind(')')) {
        (Some(a), Some(b)) if a < b => &trimmed[a + 1..b],
        (None, None) => trimmed,
        _ => return Err(Error::Extraction(format!("malformed reply {reply:?}"))),
    };
    let items: Vec<&str> = inner.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Extraction("empty pair set".into()));
    }
    let mut pairs = BTreeSet::new();
    let mut unresolved = Vec::new();
    let mut well_formed = 0;
    for item in items {
        let Some((a, b)) = item.split_once('-') else { continue };
        let (a, b) = (a.trim(), b.trim());
        if a.is_empty() || b.is_empty() {
            continue;
        }
        well_formed += 1;
        let ca = canonicalize_entity(a, vocab, threshold);
        let cb = canonicalize_entity(b, vocab, threshold);
        match (ca.category(), cb.category()) {
            (Some(x), Some(y)) => {
                pairs.insert(CategoryPair::new(x, y));
            }
            _ => {
                for (raw, c) in [(a, &ca), (b, &cb)] {
                    if c.category().is_none() && !unresolved.iter().any(|u| u == raw) {
                        unresolved.push(raw.to_string());
                    }
                }
            }
        }
    }
    if well_formed == 0 {
        return Err(Error::Extraction(format!("malformed reply {reply:?}")));
    }
    Ok(ExtractionResult { pairs: SoftRelationalLabel { pairs }, unresolved, source: ExtractionSource::Llm })
}

pub fn llm_extract_relations(
    text: &str,
    client: &dyn CompletionEndpoint,
    vocab: &Vocabulary,
) -> Result<ExtractionResult> {
    let reply = client.complete(&build_prompt(text))?;
    let result = parse_llm_reply(&reply, vocab, DEFAULT_THRESHOLD)?;
    if result.pairs.is_empty() {
        return Err(Error::Extraction("empty pair set after canonicalization".into()));
    }
    Ok(result)
}
