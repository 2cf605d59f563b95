//! Prompt decomposition into ordered sub-sentences and sub-sentence
//! embedding.

mod embed;
mod llm;
mod rules;
mod templates;

use serde::{Deserialize, Serialize};

pub use embed::{
    read_embedding_file, tokenize, write_embedding_file, TextEmbedder, TextEmbedding, Vocabulary,
};
pub use llm::{
    decompose_llm, parse_numbered_list, ChatTransport, HttpTransport, LlmConfig, TransportError, SYSTEM_PROMPT,
};
pub use rules::decompose_rules;
pub use templates::{full_text, script_to_ground_truth, template};

use crate::error::{Error, Result};

pub const MAX_PARTS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Llm,
    Rules,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposedPrompt {
    pub full_text: String,
    pub parts: Vec<String>,
    pub source: Source,
}

impl DecomposedPrompt {
    pub fn new(full_text: impl Into<String>, parts: Vec<String>, source: Source) -> Result<Self> {
        let p = Self {
            full_text: full_text.into(),
            parts,
            source,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parts.is_empty() || self.parts.len() > MAX_PARTS {
            return Err(Error::validation(format!(
                "decomposition must have 1..={MAX_PARTS} parts, got {}",
                self.parts.len()
            )));
        }
        if self.parts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::validation("decomposed parts must be non-empty"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}
