use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::error::{Error, Result};

/// Prompt layout. `{context}` and `{instruction}` are substituted; the
/// template applies only when a non-empty context is present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub with_context: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            with_context: "{context}\n\n{instruction}".into(),
        }
    }
}

impl PromptTemplate {
    pub fn render(&self, s: &Sample) -> Result<String> {
        if s.instruction.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {:?} has an empty instruction",
                s.id
            )));
        }
        Ok(match s.context.as_deref() {
            Some(ctx) if !ctx.is_empty() => self
                .with_context
                .replace("{context}", ctx)
                .replace("{instruction}", &s.instruction),
            _ => s.instruction.clone(),
        })
    }
}

/// Context, a blank line, then the instruction; the instruction alone when
/// there is no context. No system prompt is added.
pub fn build_prompt(s: &Sample) -> Result<String> {
    PromptTemplate::default().render(s)
}
