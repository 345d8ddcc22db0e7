//! The frozen embedding world: class tokens and image embeddings per dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{norm, Matrix};

/// Token norms are checked at `f32` storage precision.
pub const TOKEN_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    New,
}

impl Split {
    pub fn flag(self) -> u8 {
        match self {
            Split::Base => 0,
            Split::New => 1,
        }
    }

    pub fn from_flag(flag: u8) -> Option<Self> {
        match flag {
            0 => Some(Split::Base),
            1 => Some(Split::New),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::New => "new",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecord {
    pub name: String,
    pub split: Split,
    pub token: Vec<f64>,
    pub train: Vec<Vec<f64>>,
    pub eval: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: Vec<ClassRecord>,
}

/// Global class id: position in the dataset-major flattening of all classes.
pub type ClassId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub prompt_len: usize,
    pub encoder_seed: u64,
    pub datasets: Vec<Dataset>,
}

impl EmbeddingStore {
    pub fn num_classes(&self) -> usize {
        self.datasets.iter().map(|d| d.classes.len()).sum()
    }

    pub fn num_images(&self) -> usize {
        self.classes().map(|(_, _, c)| c.train.len() + c.eval.len()).sum()
    }

    /// `(global id, dataset index, class)` in storage order.
    pub fn classes(&self) -> impl Iterator<Item = (ClassId, usize, &ClassRecord)> {
        self.datasets
            .iter()
            .enumerate()
            .flat_map(|(di, d)| d.classes.iter().map(move |c| (di, c)))
            .enumerate()
            .map(|(id, (di, c))| (id, di, c))
    }

    pub fn class(&self, id: ClassId) -> Option<&ClassRecord> {
        self.locate(id).map(|(di, ci)| &self.datasets[di].classes[ci])
    }

    /// `(dataset index, index within dataset)` for a global id.
    pub fn locate(&self, mut id: ClassId) -> Option<(usize, usize)> {
        for (di, d) in self.datasets.iter().enumerate() {
            if id < d.classes.len() {
                return Some((di, id));
            }
            id -= d.classes.len();
        }
        None
    }

    /// Global ids of one dataset's classes with the given split.
    pub fn dataset_class_ids(&self, dataset: usize, split: Option<Split>) -> Vec<ClassId> {
        self.classes()
            .filter(|&(_, di, c)| di == dataset && split.is_none_or(|s| c.split == s))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Token rows for the given classes, in the given order.
    pub fn token_matrix(&self, ids: &[ClassId]) -> Result<Matrix> {
        let rows = ids
            .iter()
            .map(|&id| {
                self.class(id)
                    .map(|c| c.token.as_slice())
                    .ok_or_else(|| Error::Data(format!("unknown class id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.dim));
        }
        Matrix::from_rows(&rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.prompt_len == 0 {
            return Err(Error::Format(format!(
                "store needs d >= 1 and m >= 1, got d={}, m={}",
                self.dim, self.prompt_len
            )));
        }
        for (id, di, c) in self.classes() {
            let ds = &self.datasets[di].name;
            if c.token.len() != self.dim {
                return Err(Error::Format(format!("class {id} ({ds}/{}) token has length {}", c.name, c.token.len())));
            }
            if (norm(&c.token) - 1.0).abs() > TOKEN_NORM_TOL {
                return Err(Error::Format(format!("class {id} ({ds}/{}) token is not unit-norm", c.name)));
            }
            if c.train.is_empty() && c.eval.is_empty() {
                return Err(Error::Format(format!("class {id} ({ds}/{}) has no images", c.name)));
            }
            for v in c.train.iter().chain(&c.eval).chain(std::iter::once(&c.token)) {
                if v.len() != self.dim || !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::Format(format!(
                        "class {id} ({ds}/{}) has a malformed embedding",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }
}
