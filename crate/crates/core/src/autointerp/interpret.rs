// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretation requests over top-activating contexts.

use serde::{Deserialize, Serialize};

use super::client::{complete_with_retries, ChatClient, EndpointConfig, RetryPolicy};
use super::retrieval::ScoredContext;
use crate::error::{Error, Result};

pub const INTERPRETER_SYSTEM_PROMPT: &str = include_str!("../../assets/interpreter_system_prompt.txt");
pub const INTERPRETATION_TAG: &str = "[interpretation]:";
pub const NONE_FOUND: &str = "no valid interpretation found";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Interpretation {
    Text(String),
    NoneFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub signal: String,
    pub layer: usize,
    pub head: usize,
    pub text: Option<String>,
    pub none_found: bool,
    pub model: String,
    pub raw: String,
}

/// Numbered example list sent as the user message.
pub fn interpretation_user_prompt(contexts: &[ScoredContext]) -> String {
    let mut out = String::from("Text examples:\n");
    for (i, c) in contexts.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, c.text));
    }
    out
}

/// Reads the conclusion from the last non-empty line.
pub fn parse_interpretation(raw: &str) -> Result<Interpretation> {
    let last = raw.lines().rev().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let lower = last.to_lowercase();
    if let Some(rest) = lower.strip_prefix(INTERPRETATION_TAG) {
        let body = last[last.len() - rest.len()..].trim().trim_matches('"').trim();
        if body.to_lowercase().contains(NONE_FOUND) {
            return Ok(Interpretation::NoneFound);
        }
        if body.is_empty() {
            return Err(Error::Parse("empty interpretation".into()));
        }
        return Ok(Interpretation::Text(body.to_string()));
    }
    if raw.to_lowercase().contains(NONE_FOUND) {
        return Ok(Interpretation::NoneFound);
    }
    Err(Error::Parse(format!("final line lacks {INTERPRETATION_TAG:?}")))
}

pub fn request_interpretation(
    client: &dyn ChatClient,
    endpoint: &EndpointConfig,
    policy: RetryPolicy,
    signal: &str,
    layer: usize,
    head: usize,
    contexts: &[ScoredContext],
) -> Result<InterpretationRecord> {
    if contexts.is_empty() {
        return Err(Error::EmptyInput("no contexts to interpret".into()));
    }
    let req = endpoint.request(INTERPRETER_SYSTEM_PROMPT, &interpretation_user_prompt(contexts));
    let (parsed, raw) = complete_with_retries(client, &req, policy, parse_interpretation)?;
    let (text, none_found) = match parsed {
        Interpretation::Text(t) => (Some(t), false),
        Interpretation::NoneFound => (None, true),
    };
    Ok(InterpretationRecord {
        signal: signal.to_string(),
        layer,
        head,
        text,
        none_found,
        model: endpoint.model.clone(),
        raw,
    })
}
