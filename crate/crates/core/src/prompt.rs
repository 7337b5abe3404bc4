//! Prompt templates and the token sequences built from them.
//!
//! Semantic templates wrap the referring expression (`{T}`). Spatial
//! templates request a box; depending on the variant they carry the raw
//! expression, an injection slot (`{P}`) for the semantic embedding, or both.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::shapeworld::grammar_words;

pub const EXPR_SLOT: &str = "{T}";
pub const SEM_SLOT: &str = "{P}";
/// Placeholder left at injection positions of a spatial prompt.
pub const SEM_TOKEN: &str = "<sem>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const READOUT: &str = "<seg>";
pub const MAX_VOCAB: usize = 128;

const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.json");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template bank: {0}")]
    Config(String),
    #[error("template {id} is a {found:?} template, expected {expected:?}")]
    StageMismatch { id: u32, expected: Stage, found: Stage },
    #[error("template {id} belongs to {found:?}, not {expected:?}")]
    VariantMismatch {
        id: u32,
        expected: PromptVariant,
        found: Option<PromptVariant>,
    },
    #[error("referring expression is empty")]
    EmptyExpression,
    #[error("variant {0:?} needs the referring expression")]
    MissingExpression(PromptVariant),
    #[error("variant {0:?} must not see the referring expression")]
    UnexpectedExpression(PromptVariant),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Semantic,
    Spatial,
}

/// How the spatial prompt is conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Only the semantic embedding.
    Ppcr,
    /// Only the raw expression.
    ReOnly,
    /// Raw expression and semantic embedding.
    RePlusSem,
}

impl PromptVariant {
    pub fn needs_expression(self) -> bool {
        matches!(self, PromptVariant::ReOnly | PromptVariant::RePlusSem)
    }

    pub fn injects_semantic(self) -> bool {
        matches!(self, PromptVariant::Ppcr | PromptVariant::RePlusSem)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: u32,
    pub stage: Stage,
    /// `None` for semantic templates, which every variant shares.
    pub variant: Option<PromptVariant>,
    pub pattern: String,
}

impl PromptTemplate {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.pattern)
    }

    fn slot_counts(&self) -> (usize, usize) {
        let toks = self.tokens();
        let t = toks.iter().filter(|x| *x == EXPR_SLOT).count();
        let p = toks.iter().filter(|x| *x == SEM_SLOT).count();
        (t, p)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let (t, p) = self.slot_counts();
        let bad = |why: &str| Err(PromptError::Config(format!("template {}: {why}", self.id)));
        match (self.stage, self.variant) {
            (Stage::Semantic, None) if t > 0 && p == 0 => Ok(()),
            (Stage::Semantic, _) => bad("semantic templates need {T}, no {P} and no variant"),
            (Stage::Spatial, Some(PromptVariant::Ppcr)) if p > 0 && t == 0 => {
                let grammar = grammar_words();
                match self.tokens().iter().find(|w| grammar.contains(&w.as_str())) {
                    Some(w) => bad(&format!("ppcr template uses expression word {w:?}")),
                    None => Ok(()),
                }
            }
            (Stage::Spatial, Some(PromptVariant::ReOnly)) if t > 0 && p == 0 => Ok(()),
            (Stage::Spatial, Some(PromptVariant::RePlusSem)) if t > 0 && p > 0 => Ok(()),
            (Stage::Spatial, v) => bad(&format!("slots do not fit variant {v:?}")),
        }
    }
}

/// Lowercased whitespace tokens with `? . , !` split off; slots are kept verbatim.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut w = word;
        let mut trailing = Vec::new();
        while let Some(c) = w.chars().last().filter(|c| "?.,!".contains(*c)) {
            trailing.push(c.to_string());
            w = &w[..w.len() - c.len_utf8()];
        }
        if !w.is_empty() {
            if w == EXPR_SLOT || w == SEM_SLOT {
                out.push(w.to_string());
            } else {
                out.push(w.to_lowercase());
            }
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    templates: Vec<PromptTemplate>,
}

impl TemplateBank {
    pub fn new(templates: Vec<PromptTemplate>) -> Result<Self, PromptError> {
        let mut seen = std::collections::HashSet::new();
        for t in &templates {
            if !seen.insert(t.id) {
                return Err(PromptError::Config(format!("duplicate template id {}", t.id)));
            }
            t.validate()?;
        }
        Ok(Self { templates })
    }

    /// The bank shipped in `assets/templates.json`.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_TEMPLATES).expect("builtin template bank is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.templates).expect("templates serialize")
    }

    pub fn templates(&self) -> &[PromptTemplate] {
        &self.templates
    }

    /// Templates applicable to `(stage, variant)`; semantic ones are shared.
    pub fn candidates(&self, stage: Stage, variant: PromptVariant) -> Vec<&PromptTemplate> {
        self.templates
            .iter()
            .filter(|t| t.stage == stage && (stage == Stage::Semantic || t.variant == Some(variant)))
            .collect()
    }

    /// Uniform draw, deterministic in `seed`.
    pub fn sample(&self, stage: Stage, variant: PromptVariant, seed: u64) -> Result<&PromptTemplate, PromptError> {
        let pool = self.candidates(stage, variant);
        if pool.is_empty() {
            return Err(PromptError::Config(format!("no {stage:?} templates for {variant:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(pool[rng.random_range(0..pool.len())])
    }

    /// Every word any template can contribute.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.templates {
            for w in t.tokens() {
                if w != EXPR_SLOT && w != SEM_SLOT && !out.contains(&w) {
                    out.push(w);
                }
            }
        }
        out
    }
}

pub fn sample_template(
    bank: &TemplateBank,
    stage: Stage,
    variant: PromptVariant,
    seed: u64,
) -> Result<&PromptTemplate, PromptError> {
    bank.sample(stage, variant, seed)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticPrompt {
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialPrompt {
    pub variant: PromptVariant,
    pub tokens: Vec<String>,
    /// Positions in `tokens` holding [`SEM_TOKEN`].
    pub sem_slot_positions: Vec<usize>,
}

fn substitute(template: &PromptTemplate, expr: Option<&[String]>) -> Vec<String> {
    let mut out = Vec::new();
    for tok in template.tokens() {
        match (tok.as_str(), expr) {
            (EXPR_SLOT, Some(e)) => out.extend(e.iter().cloned()),
            (SEM_SLOT, _) => out.push(SEM_TOKEN.to_string()),
            _ => out.push(tok),
        }
    }
    out
}

pub fn build_semantic_prompt(expr: &[String], template: &PromptTemplate) -> Result<SemanticPrompt, PromptError> {
    if template.stage != Stage::Semantic {
        return Err(PromptError::StageMismatch {
            id: template.id,
            expected: Stage::Semantic,
            found: template.stage,
        });
    }
    if expr.is_empty() {
        return Err(PromptError::EmptyExpression);
    }
    Ok(SemanticPrompt {
        tokens: substitute(template, Some(expr)),
    })
}

pub fn build_spatial_prompt(
    variant: PromptVariant,
    expr: Option<&[String]>,
    template: &PromptTemplate,
) -> Result<SpatialPrompt, PromptError> {
    if template.stage != Stage::Spatial {
        return Err(PromptError::StageMismatch {
            id: template.id,
            expected: Stage::Spatial,
            found: template.stage,
        });
    }
    if template.variant != Some(variant) {
        return Err(PromptError::VariantMismatch {
            id: template.id,
            expected: variant,
            found: template.variant,
        });
    }
    let expr = match (variant.needs_expression(), expr) {
        (true, None) => return Err(PromptError::MissingExpression(variant)),
        (true, Some([])) => return Err(PromptError::EmptyExpression),
        (true, Some(e)) => Some(e),
        (false, Some(_)) => return Err(PromptError::UnexpectedExpression(variant)),
        (false, None) => None,
    };
    let tokens = substitute(template, expr);
    let sem_slot_positions = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| *t == SEM_TOKEN)
        .map(|(i, _)| i)
        .collect();
    Ok(SpatialPrompt {
        variant,
        tokens,
        sem_slot_positions,
    })
}

/// Closed word-level vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self, PromptError> {
        if words.len() > MAX_VOCAB {
            return Err(PromptError::Config(format!(
                "vocabulary has {} words, limit {MAX_VOCAB}",
                words.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(PromptError::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Specials, grammar words, then template words.
    pub fn from_bank(bank: &TemplateBank) -> Result<Self, PromptError> {
        let mut words: Vec<String> = [BOS, EOS, READOUT, SEM_TOKEN].iter().map(|s| s.to_string()).collect();
        for w in grammar_words().into_iter().map(str::to_owned).chain(bank.words()) {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize, PromptError> {
        if self.index.is_empty() && !self.words.is_empty() {
            // Deserialized without the index.
            return self
                .words
                .iter()
                .position(|w| w == word)
                .ok_or_else(|| PromptError::UnknownToken(word.to_string()));
        }
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| PromptError::UnknownToken(word.to_string()))
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>, PromptError> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}
