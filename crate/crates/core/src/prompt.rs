//! Robot prompt rendering and response parsing.
//!
//! Prompts are wrapped in the chat template and end with an output trigger
//! that selects the response style. Responses are sequences of registered
//! special tokens, lexed by maximal munch and checked against a small
//! grammar.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::DEFAULT_VOCAB;
use crate::depth::{DEPTH_CODES, GRID_CELLS};
use crate::state::STATE_BINS;

pub const ACTION_TOKENS: usize = DEFAULT_VOCAB;
pub const STATE_TOKENS: usize = STATE_BINS;
pub const DEPTH_TOKENS: usize = DEPTH_CODES as usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("invalid prompt: {0}")]
    Invalid(String),
    #[error("token error: {0}")]
    Token(String),
    #[error("lex error at byte {offset}: {message}")]
    Lex { offset: usize, message: String },
    #[error("grammar error at byte {offset}: {message}")]
    Grammar { offset: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Marker {
    ImStart,
    ImEnd,
    SetupStart,
    SetupEnd,
    ControlStart,
    ControlEnd,
    StateStart,
    StateEnd,
    ActionOutput,
    DepthOutput,
    DepthStart,
    DepthEnd,
}

impl Marker {
    pub const ALL: [Marker; 12] = [
        Marker::ImStart,
        Marker::ImEnd,
        Marker::SetupStart,
        Marker::SetupEnd,
        Marker::ControlStart,
        Marker::ControlEnd,
        Marker::StateStart,
        Marker::StateEnd,
        Marker::ActionOutput,
        Marker::DepthOutput,
        Marker::DepthStart,
        Marker::DepthEnd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Marker::ImStart => "<|im_start|>",
            Marker::ImEnd => "<|im_end|>",
            Marker::SetupStart => "<setup_start>",
            Marker::SetupEnd => "<setup_end>",
            Marker::ControlStart => "<control_start>",
            Marker::ControlEnd => "<control_end>",
            Marker::StateStart => "<state_start>",
            Marker::StateEnd => "<state_end>",
            Marker::ActionOutput => "<action_output>",
            Marker::DepthOutput => "<depth_output>",
            Marker::DepthStart => "<depth_start>",
            Marker::DepthEnd => "<depth_end>",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Marker(Marker),
    Action(u32),
    State(u32),
    Depth(u32),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Marker(m) => f.write_str(m.as_str()),
            Token::Action(i) => write!(f, "<action_{i}>"),
            Token::State(i) => write!(f, "<state_{i}>"),
            Token::Depth(i) => write!(f, "<depth_{i}>"),
        }
    }
}

/// Every added token string, mapped both ways.
#[derive(Debug, Clone)]
pub struct SpecialTokenRegistry {
    by_text: HashMap<String, Token>,
    max_len: usize,
}

impl Default for SpecialTokenRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl SpecialTokenRegistry {
    pub fn new() -> Self {
        let tokens = Marker::ALL
            .into_iter()
            .map(Token::Marker)
            .chain((0..ACTION_TOKENS as u32).map(Token::Action))
            .chain((0..STATE_TOKENS as u32).map(Token::State))
            .chain((0..DEPTH_TOKENS as u32).map(Token::Depth));
        let by_text: HashMap<String, Token> = tokens.map(|t| (t.to_string(), t)).collect();
        let max_len = by_text.keys().map(String::len).max().unwrap_or(0);
        Self { by_text, max_len }
    }

    pub fn len(&self) -> usize {
        self.by_text.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_text.is_empty()
    }

    pub fn lookup(&self, text: &str) -> Option<Token> {
        self.by_text.get(text).copied()
    }

    pub fn strings(&self) -> impl Iterator<Item = &str> {
        self.by_text.keys().map(String::as_str)
    }

    /// Splits `text` into registered tokens, longest match first. Returns
    /// each token with its byte offset.
    pub fn lex(&self, text: &str) -> Result<Vec<(usize, Token)>, PromptError> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let longest = (1..=self.max_len.min(rest.len()))
                .rev()
                .filter(|&n| rest.is_char_boundary(n))
                .find_map(|n| self.lookup(&rest[..n]).map(|t| (n, t)));
            match longest {
                Some((n, t)) => {
                    out.push((pos, t));
                    pos += n;
                }
                None => {
                    let snippet: String = rest.chars().take(16).collect();
                    return Err(PromptError::Lex {
                        offset: pos,
                        message: format!("no registered token matches {snippet:?}"),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    #[default]
    Action,
    Depth,
    #[serde(alias = "depth_then_action")]
    DepthThenAction,
}

impl Style {
    pub fn trigger(self) -> &'static str {
        match self {
            Style::Action => "<action_output>",
            Style::Depth => "<depth_output>",
            Style::DepthThenAction => "<depth_output><action_output>",
        }
    }

    pub fn question(self) -> &'static str {
        match self {
            Style::Action => "Given these, what action should the robot take to complete the task?",
            Style::Depth => "Given these, what is the depth map of the main image?",
            Style::DepthThenAction => {
                "Given these, first predict the depth map of the main image and then predict the action the robot should take to complete the task?"
            }
        }
    }

    fn wants_depth(self) -> bool {
        self != Style::Action
    }

    fn wants_action(self) -> bool {
        self != Style::Depth
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotPrompt {
    pub task: String,
    pub setup: String,
    pub control: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_tokens: Option<Vec<u32>>,
    #[serde(default)]
    pub style: Style,
}

fn check_field(name: &str, value: &str) -> Result<(), PromptError> {
    if value.contains(['<', '>', '\n']) {
        return Err(PromptError::Invalid(format!(
            "{name} must not contain '<', '>' or newlines"
        )));
    }
    Ok(())
}

pub fn render_prompt(p: &RobotPrompt) -> Result<String, PromptError> {
    if p.task.trim().is_empty() {
        return Err(PromptError::Invalid("task must be non-empty".into()));
    }
    check_field("task", &p.task)?;
    check_field("setup", &p.setup)?;
    check_field("control", &p.control)?;
    let mut body = format!(
        "The task is to {}. The setup is <setup_start>{}<setup_end>. ",
        p.task, p.setup
    );
    if let Some(states) = &p.state_tokens {
        body.push_str("The current state of the robot is <state_start>");
        for &s in states {
            if s as usize >= STATE_TOKENS {
                return Err(PromptError::Token(format!(
                    "state token {s} outside [0, {}]",
                    STATE_TOKENS - 1
                )));
            }
            body.push_str(&Token::State(s).to_string());
        }
        body.push_str("<state_end>. ");
    }
    body.push_str(&format!(
        "The expected control mode is <control_start>{}<control_end>. {}",
        p.control,
        p.style.question()
    ));
    Ok(format!(
        "<|im_start|>user\n{body}\n<|im_end|>\n<|im_start|>assistant\n{}",
        p.style.trigger()
    ))
}

/// Canonical task text: whitespace collapsed, trailing punctuation removed,
/// first letter lowercased unless the first word is an acronym.
pub fn normalize_task(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = collapsed.trim_end_matches(['.', '!', '?', ';', ',', ':', ' ']);
    let first_word = trimmed.split(' ').next().unwrap_or("");
    let acronym = first_word.chars().filter(|c| c.is_alphabetic()).count() > 1
        && first_word.chars().all(|c| !c.is_lowercase());
    let mut chars = trimmed.chars();
    match chars.next() {
        Some(c) if !acronym => c.to_lowercase().chain(chars).collect(),
        _ => trimmed.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParsedResponse {
    pub style: Style,
    pub depth_codes: Option<Vec<u8>>,
    pub action_token_ids: Option<Vec<u32>>,
}

/// Renders a response starting with the style trigger.
pub fn render_response(r: &ParsedResponse) -> Result<String, PromptError> {
    let mut out = String::from(r.style.trigger());
    match (r.style.wants_depth(), &r.depth_codes) {
        (true, Some(codes)) => {
            if codes.len() != GRID_CELLS {
                return Err(PromptError::Invalid(format!(
                    "expected {GRID_CELLS} depth codes, got {}",
                    codes.len()
                )));
            }
            out.push_str(Marker::DepthStart.as_str());
            for &c in codes {
                if c as usize >= DEPTH_TOKENS {
                    return Err(PromptError::Token(format!("depth code {c} out of range")));
                }
                out.push_str(&Token::Depth(c as u32).to_string());
            }
            out.push_str(Marker::DepthEnd.as_str());
        }
        (false, None) => {}
        _ => return Err(PromptError::Invalid("depth codes do not match the style".into())),
    }
    match (r.style.wants_action(), &r.action_token_ids) {
        (true, Some(ids)) => {
            for &id in ids {
                if id as usize >= ACTION_TOKENS {
                    return Err(PromptError::Token(format!("action token {id} out of range")));
                }
                out.push_str(&Token::Action(id).to_string());
            }
        }
        (false, None) => {}
        _ => return Err(PromptError::Invalid("action tokens do not match the style".into())),
    }
    Ok(out)
}

/// Parses `trigger response [<|im_end|>]`. The trigger fixes the style:
/// a depth block holds exactly 100 depth codes between its delimiters and
/// action tokens follow `<action_output>`.
pub fn parse_response(
    text: &str,
    registry: &SpecialTokenRegistry,
) -> Result<ParsedResponse, PromptError> {
    let tokens = registry.lex(text)?;
    let mut it = tokens.iter().copied().peekable();
    let grammar = |offset: usize, message: String| PromptError::Grammar { offset, message };
    let end = text.len();

    let style = match it.next() {
        Some((_, Token::Marker(Marker::ActionOutput))) => Style::Action,
        Some((_, Token::Marker(Marker::DepthOutput))) => {
            if let Some(&(_, Token::Marker(Marker::ActionOutput))) = it.peek() {
                it.next();
                Style::DepthThenAction
            } else {
                Style::Depth
            }
        }
        Some((off, t)) => return Err(grammar(off, format!("expected an output trigger, found {t}"))),
        None => return Err(grammar(0, "empty response".into())),
    };

    let depth_codes = if style.wants_depth() {
        match it.next() {
            Some((_, Token::Marker(Marker::DepthStart))) => {}
            Some((off, t)) => return Err(grammar(off, format!("expected <depth_start>, found {t}"))),
            None => return Err(grammar(end, "expected <depth_start>".into())),
        }
        let mut codes = Vec::new();
        while let Some(&(_, Token::Depth(c))) = it.peek() {
            codes.push(c as u8);
            it.next();
        }
        match it.next() {
            Some((off, Token::Marker(Marker::DepthEnd))) => {
                if codes.len() != GRID_CELLS {
                    return Err(grammar(
                        off,
                        format!("depth block: expected {GRID_CELLS}, got {}", codes.len()),
                    ));
                }
            }
            Some((off, t)) => return Err(grammar(off, format!("expected <depth_end>, found {t}"))),
            None => return Err(grammar(end, "unterminated depth block".into())),
        }
        Some(codes)
    } else {
        None
    };

    let action_token_ids = if style.wants_action() {
        let mut ids = Vec::new();
        while let Some(&(_, Token::Action(id))) = it.peek() {
            ids.push(id);
            it.next();
        }
        Some(ids)
    } else {
        None
    };

    if let Some((_, Token::Marker(Marker::ImEnd))) = it.peek() {
        it.next();
    }
    if let Some((off, t)) = it.next() {
        return Err(grammar(off, format!("unexpected {t} after the response")));
    }
    Ok(ParsedResponse {
        style,
        depth_codes,
        action_token_ids,
    })
}
