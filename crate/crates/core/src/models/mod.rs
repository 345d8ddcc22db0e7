//! Prompt parameterizations, the cosine classifier and its loss.
//!
//! Two parameterizations share one classifier: a cross-attention generator
//! that maps the candidate class tokens to prompt vectors, and a fixed
//! prompt matrix learned directly. Either one round-trips through a flat
//! [`ModelSnapshot`] in a fixed order.

mod generator;
mod head;
mod snapshot;

pub use generator::{PromptGenParams, LAYER_NORM_EPS, QUERY_INIT_STD};
pub use head::{
    argmax, class_cosines, class_probs, kg_penalty, loss_and_grad, loss_value, softmax_scores, Batch,
    PredictConfig, PromptModel,
};
pub use snapshot::{Method, ModelSnapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

use crate::encoders::SurrogateEncoder;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Everything needed to interpret a snapshot for a given method.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub method: Method,
    pub prompt_len: usize,
    pub dim: usize,
    pub heads: usize,
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        if self.method.uses_generator() {
            PromptGenParams::param_count(self.prompt_len, self.dim)
        } else {
            self.prompt_len * self.dim
        }
    }

    /// Initial model: a seeded generator, or the handcrafted prompt for the
    /// fixed-prompt methods.
    pub fn init(&self, enc: &SurrogateEncoder, seed: u64) -> Result<PromptModel> {
        if (enc.prompt_len(), enc.dim()) != (self.prompt_len, self.dim) {
            return Err(Error::shape(
                "model init",
                (self.prompt_len, self.dim),
                (enc.prompt_len(), enc.dim()),
            ));
        }
        if self.method.uses_generator() {
            Ok(PromptModel::Generator(PromptGenParams::init(
                self.prompt_len,
                self.dim,
                self.heads,
                seed,
            )?))
        } else {
            Ok(PromptModel::Fixed(enc.handcrafted_prompts().clone()))
        }
    }

    pub fn unflatten(&self, values: &[f64]) -> Result<PromptModel> {
        if self.method.uses_generator() {
            Ok(PromptModel::Generator(PromptGenParams::unflatten(
                self.prompt_len,
                self.dim,
                self.heads,
                values,
            )?))
        } else {
            if values.len() != self.prompt_len * self.dim {
                return Err(Error::Param(format!(
                    "fixed prompt {}×{} needs {} parameters, got {}",
                    self.prompt_len,
                    self.dim,
                    self.prompt_len * self.dim,
                    values.len()
                )));
            }
            Ok(PromptModel::Fixed(Matrix::new(self.prompt_len, self.dim, values.to_vec())?))
        }
    }

    pub fn from_snapshot(&self, snap: &ModelSnapshot) -> Result<PromptModel> {
        if snap.method != self.method {
            return Err(Error::Data(format!(
                "snapshot was written by {}, expected {}",
                snap.method, self.method
            )));
        }
        self.unflatten(&snap.values)
    }

    pub fn snapshot(&self, model: &PromptModel) -> ModelSnapshot {
        ModelSnapshot::new(self.method, model.flatten())
    }
}
