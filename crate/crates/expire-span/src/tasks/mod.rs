//! Deterministic generators for the synthetic memory tasks and the
//! char-level LM loader. Generators are pure functions of (config, seed,
//! index): the same draw replays bit-identically anywhere.

pub mod charlm;
pub mod collision;
pub mod copy;

use crate::error::{Error, Result};

/// One supervised sequence: aligned input/target token streams plus the mask
/// of scored positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub input_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TaskSample {
    pub fn validate(&self) -> Result<()> {
        if self.input_tokens.len() != self.target_tokens.len()
            || self.input_tokens.len() != self.loss_mask.len()
        {
            return Err(Error::Config(format!(
                "sample length mismatch: input {}, target {}, mask {}",
                self.input_tokens.len(),
                self.target_tokens.len(),
                self.loss_mask.len()
            )));
        }
        if !self.loss_mask.iter().any(|&m| m) {
            return Err(Error::Config("sample scores no positions".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.input_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_tokens.is_empty()
    }
}
