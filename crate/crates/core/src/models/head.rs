//! Cosine classifier over encoded prompts, its cross-entropy loss, and the
//! handcrafted-prompt anchoring penalty.

use serde::{Deserialize, Serialize};

use super::generator::PromptGenParams;
use crate::encoders::SurrogateEncoder;
use crate::error::{Error, Result};
use crate::tensor::{cosine_rows, GradTape, Matrix, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Softmax temperature `τ` applied to cosine similarities.
    pub temperature: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { temperature: 0.01 }
    }
}

impl PredictConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "predict.temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Learnable prompt parameterizations.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptModel {
    /// Prompts generated from the candidate class tokens.
    Generator(PromptGenParams),
    /// One `m × d` prompt shared by every class.
    Fixed(Matrix),
}

impl PromptModel {
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            PromptModel::Generator(g) => g.flatten(),
            PromptModel::Fixed(p) => p.data().to_vec(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PromptModel::Generator(g) => PromptGenParams::param_count(g.prompt_len(), g.dim()),
            PromptModel::Fixed(p) => p.data().len(),
        }
    }

    /// Prompt vectors used for the candidate classes `tokens`.
    pub fn prompts(&self, tokens: &Matrix) -> Result<Matrix> {
        match self {
            PromptModel::Generator(g) => g.generate(tokens),
            PromptModel::Fixed(p) => Ok(p.clone()),
        }
    }

    fn prompts_on_tape<'a>(&'a self, tape: &mut GradTape<'a>, tokens: &'a Matrix, trainable: bool) -> Result<Var> {
        match self {
            PromptModel::Generator(g) => {
                let vars = g.bind(tape, trainable);
                let t = tape.constant(tokens);
                g.forward_on_tape(tape, &vars, t)
            }
            PromptModel::Fixed(p) if trainable => Ok(tape.param(p.clone())),
            PromptModel::Fixed(p) => Ok(tape.constant(p)),
        }
    }
}

/// `softmax(cosines / τ)` for one row of cosines.
pub fn softmax_scores(cosines: &[f64], temperature: f64) -> Vec<f64> {
    let max = cosines.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = cosines.iter().map(|c| ((c - max) / temperature).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Cosine similarity of every image row to every class text embedding
/// under prompts `p`: an `images × n` matrix.
pub fn class_cosines(p: &Matrix, tokens: &Matrix, images: &Matrix, enc: &SurrogateEncoder) -> Result<Matrix> {
    let texts = enc.encode_classes(p, &enc.class_part(tokens)?)?;
    for (operand, m) in [("image", images), ("text embedding", &texts)] {
        if let Some(row) = (0..m.rows()).find(|&i| is_zero(m.row(i))) {
            return Err(Error::Degenerate { operand, row });
        }
    }
    cosine_rows(images, &texts)
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Class probabilities for one image over the candidate classes `tokens`.
pub fn class_probs(
    p: &Matrix,
    tokens: &Matrix,
    image: &[f64],
    enc: &SurrogateEncoder,
    cfg: &PredictConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if tokens.rows() < 2 {
        return Err(Error::Data(format!("class_probs needs at least 2 classes, got {}", tokens.rows())));
    }
    let cos = class_cosines(p, tokens, &Matrix::row_vector(image.to_vec()), enc)?;
    Ok(softmax_scores(cos.row(0), cfg.temperature))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Labelled image embeddings; labels index the candidate class set.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'b> {
    pub images: &'b Matrix,
    pub labels: &'b [usize],
}

fn objective<'a>(
    tape: &mut GradTape<'a>,
    model: &'a PromptModel,
    trainable: bool,
    batch: Batch<'a>,
    tokens: &'a Matrix,
    enc: &'a SurrogateEncoder,
    cfg: &PredictConfig,
    kg_lambda: Option<f64>,
) -> Result<Var> {
    cfg.validate()?;
    if batch.labels.is_empty() || batch.labels.len() != batch.images.rows() {
        return Err(Error::Data(format!(
            "batch has {} images and {} labels",
            batch.images.rows(),
            batch.labels.len()
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= tokens.rows()) {
        return Err(Error::Data(format!("label {y} out of range for {} classes", tokens.rows())));
    }
    let class_part = enc.class_part(tokens)?;
    let anchor = match kg_lambda {
        Some(_) => Some(enc.encode_classes(enc.handcrafted_prompts(), &class_part)?),
        None => None,
    };
    let p = model.prompts_on_tape(tape, tokens, trainable)?;
    let cp = tape.constant_owned(class_part);
    let texts = enc.encode_on_tape(tape, p, cp)?;
    let images = tape.constant(batch.images);
    let cos = tape.cosine_rows(images, texts)?;
    let loss = tape.softmax_cross_entropy(cos, batch.labels, cfg.temperature)?;
    match (kg_lambda, anchor) {
        (Some(lambda), Some(anchor)) => {
            let anchor = tape.constant_owned(anchor);
            let diff = tape.sub(texts, anchor)?;
            let sq = tape.sum_squares(diff);
            let penalty = tape.scale(sq, lambda / tokens.rows() as f64);
            tape.add(loss, penalty)
        }
        _ => Ok(loss),
    }
}

/// Mean cross-entropy of `batch` over the candidate classes `tokens`, plus
/// `λ · kg_penalty` when `kg_lambda` is set, and its gradient with respect
/// to the flattened model parameters.
pub fn loss_and_grad(
    model: &PromptModel,
    batch: Batch<'_>,
    tokens: &Matrix,
    enc: &SurrogateEncoder,
    cfg: &PredictConfig,
    kg_lambda: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = GradTape::new();
    let loss = objective(&mut tape, model, true, batch, tokens, enc, cfg, kg_lambda)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(model.param_count());
    for g in grads {
        flat.extend(g.into_data());
    }
    Ok((value, flat))
}

/// The objective of [`loss_and_grad`] without the backward pass.
pub fn loss_value(
    model: &PromptModel,
    batch: Batch<'_>,
    tokens: &Matrix,
    enc: &SurrogateEncoder,
    cfg: &PredictConfig,
    kg_lambda: Option<f64>,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let loss = objective(&mut tape, model, false, batch, tokens, enc, cfg, kg_lambda)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean over classes of `‖encode(P, t_j) − encode(P₀, t_j)‖²` and its
/// gradient with respect to `P`.
pub fn kg_penalty(p: &Matrix, p0: &Matrix, tokens: &Matrix, enc: &SurrogateEncoder) -> Result<(f64, Matrix)> {
    if p.shape() != p0.shape() {
        return Err(Error::shape("kg_penalty", p.shape(), p0.shape()));
    }
    if tokens.rows() == 0 {
        return Err(Error::Data("kg_penalty needs at least one class".into()));
    }
    let class_part = enc.class_part(tokens)?;
    let anchor = enc.encode_classes(p0, &class_part)?;
    let mut tape = GradTape::new();
    let pv = tape.param(p.clone());
    let cp = tape.constant(&class_part);
    let texts = enc.encode_on_tape(&mut tape, pv, cp)?;
    let a = tape.constant(&anchor);
    let diff = tape.sub(texts, a)?;
    let sq = tape.sum_squares(diff);
    let penalty = tape.scale(sq, 1.0 / tokens.rows() as f64);
    let value = tape.value(penalty).data()[0];
    let grad = tape.backward(penalty)?.pop().expect("one parameter");
    Ok((value, grad))
}
