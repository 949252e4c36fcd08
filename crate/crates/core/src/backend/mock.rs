use std::path::Path;

use regex::Regex;
use serde::Deserialize;

use super::{Backend, ModelRequest, ModelResponse, TokenTable};
use crate::error::{Error, Result};

/// One scripted rule. A rule with no instruction pattern and no image
/// fingerprint matches everything.
#[derive(Debug, Clone)]
pub struct ScriptRule {
    instruction: InstructionPattern,
    image: Option<String>,
    response: String,
}

#[derive(Debug, Clone)]
enum InstructionPattern {
    Any,
    Contains(String),
    Regex(Regex),
}

impl ScriptRule {
    pub fn contains(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            instruction: InstructionPattern::Contains(pattern.into()),
            image: None,
            response: response.into(),
        }
    }

    pub fn regex(pattern: &str, response: impl Into<String>) -> Result<Self> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("bad rule regex {pattern:?}: {e}")))?;
        Ok(Self {
            instruction: InstructionPattern::Regex(re),
            image: None,
            response: response.into(),
        })
    }

    pub fn catch_all(response: impl Into<String>) -> Self {
        Self {
            instruction: InstructionPattern::Any,
            image: None,
            response: response.into(),
        }
    }

    /// Restricts the rule to requests carrying an image with this SHA-256.
    pub fn with_image(mut self, fingerprint: impl Into<String>) -> Self {
        self.image = Some(fingerprint.into().to_ascii_lowercase());
        self
    }

    pub fn is_catch_all(&self) -> bool {
        matches!(self.instruction, InstructionPattern::Any) && self.image.is_none()
    }

    fn matches(&self, request: &ModelRequest) -> bool {
        let text_ok = match &self.instruction {
            InstructionPattern::Any => true,
            InstructionPattern::Contains(s) => request.instruction().contains(s.as_str()),
            InstructionPattern::Regex(re) => re.is_match(request.instruction()),
        };
        text_ok
            && self.image.as_ref().is_none_or(|fp| {
                request.images().iter().any(|img| &img.fingerprint() == fp)
            })
    }
}

/// Ordered rule list; the first matching rule answers.
#[derive(Debug, Clone)]
pub struct ScriptedBehavior {
    rules: Vec<ScriptRule>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BehaviorFile {
    #[serde(default)]
    rule: Vec<RuleEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleEntry {
    instruction_contains: Option<String>,
    instruction_regex: Option<String>,
    image: Option<String>,
    response: String,
}

impl ScriptedBehavior {
    pub fn new(rules: Vec<ScriptRule>) -> Result<Self> {
        if !rules.iter().any(ScriptRule::is_catch_all) {
            return Err(Error::Config(
                "scripted behavior needs a catch-all rule".into(),
            ));
        }
        Ok(Self { rules })
    }

    /// Parses a behavior file:
    ///
    /// ```toml
    /// [[rule]]
    /// instruction_contains = "Which red box"
    /// response = "<box>3</box>"
    ///
    /// [[rule]]
    /// response = "UNKNOWN"
    /// ```
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: BehaviorFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let rules = file
            .rule
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let rule = match (r.instruction_contains, r.instruction_regex) {
                    (Some(_), Some(_)) => {
                        return Err(Error::Config(format!(
                            "rule {}: set instruction_contains or instruction_regex, not both",
                            i + 1
                        )))
                    }
                    (Some(s), None) => ScriptRule::contains(s, r.response),
                    (None, Some(re)) => ScriptRule::regex(&re, r.response)?,
                    (None, None) => ScriptRule::catch_all(r.response),
                };
                Ok(match r.image {
                    Some(fp) => rule.with_image(fp),
                    None => rule,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn respond(&self, request: &ModelRequest) -> &str {
        &self
            .rules
            .iter()
            .find(|r| r.matches(request))
            .expect("catch-all rule present")
            .response
    }
}

/// Deterministic offline backend driven by a [`ScriptedBehavior`].
///
/// Token counts are always estimates from the [`TokenTable`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    behavior: ScriptedBehavior,
    tokens: TokenTable,
}

impl MockBackend {
    pub fn new(behavior: ScriptedBehavior, tokens: TokenTable) -> Self {
        Self { behavior, tokens }
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn invoke(&self, request: &ModelRequest) -> Result<ModelResponse> {
        let text = self.behavior.respond(request).to_owned();
        Ok(ModelResponse {
            prompt_token_count: TokenTable::text_tokens(request.instruction()),
            output_token_count: TokenTable::text_tokens(&text),
            image_token_count: self.tokens.request_image_tokens(request)?,
            text,
            estimated: true,
        })
    }
}
