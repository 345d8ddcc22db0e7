//! Cross-attention prompt generator.
//!
//! A learnable query `Q` (`m × d`) attends over the candidate class tokens
//! `T` (`n × d`), which act as keys and values:
//!
//! ```text
//! K = T·W_K,  V = T·W_V                      split into h heads of width d/h
//! O_h = softmax(Q_h·K_hᵀ / √(d/h)) · V_h     per head, rows over keys
//! X = LN([O_1 … O_h]·W_O + Q)                single post-attention layer norm
//! P = ReLU(X·W₁ + b₁)·W₂ + b₂                row-wise MLP
//! ```
//!
//! Attention pools over the keys, so `P` does not depend on class order.

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{GradTape, Matrix, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const QUERY_INIT_STD: f64 = 0.02;
const NUM_LEAVES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptGenParams {
    heads: usize,
    pub q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln_gamma: Matrix,
    pub ln_beta: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Tape handles for the ten parameter blocks, in flattening order.
pub(crate) type GenVars = [Var; NUM_LEAVES];

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("d = {dim} is not divisible by heads = {heads}")));
    }
    Ok(())
}

impl PromptGenParams {
    /// `m·d + 5d² + 4d`.
    pub fn param_count(prompt_len: usize, dim: usize) -> usize {
        prompt_len * dim + 5 * dim * dim + 4 * dim
    }

    /// Gaussian weights with std `1/√d`, query std 0.02, zero biases, unit gain.
    pub fn init(prompt_len: usize, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if prompt_len == 0 || dim == 0 {
            return Err(Error::Config(format!("generator needs m, d >= 1, got m={prompt_len}, d={dim}")));
        }
        check_heads(dim, heads)?;
        let mut r = rng::prng(rng::child_seed(&[seed, stream::INIT]));
        let std = 1.0 / (dim as f64).sqrt();
        let mut square = || Matrix::new(dim, dim, rng::gaussian_vec(&mut r, dim * dim, std));
        let (w_k, w_v, w_o, w1, w2) = (square()?, square()?, square()?, square()?, square()?);
        let q = Matrix::new(prompt_len, dim, rng::gaussian_vec(&mut r, prompt_len * dim, QUERY_INIT_STD))?;
        Ok(Self {
            heads,
            q,
            w_k,
            w_v,
            w_o,
            ln_gamma: Matrix::filled(1, dim, 1.0),
            ln_beta: Matrix::zeros(1, dim),
            w1,
            b1: Matrix::zeros(1, dim),
            w2,
            b2: Matrix::zeros(1, dim),
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.q.rows()
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn leaves(&self) -> [&Matrix; NUM_LEAVES] {
        [
            &self.q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln_gamma,
            &self.ln_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    /// Concatenation of `Q, W_K, W_V, W_O, γ, β, W₁, b₁, W₂, b₂`, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(self.prompt_len(), self.dim()));
        for m in self.leaves() {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn unflatten(prompt_len: usize, dim: usize, heads: usize, values: &[f64]) -> Result<Self> {
        check_heads(dim, heads)?;
        let expected = Self::param_count(prompt_len, dim);
        if values.len() != expected {
            return Err(Error::Param(format!(
                "generator with m={prompt_len}, d={dim} has {expected} parameters, got {}",
                values.len()
            )));
        }
        let mut rest = values;
        let mut take = |rows: usize, cols: usize| {
            let (head, tail) = rest.split_at(rows * cols);
            rest = tail;
            Matrix::new(rows, cols, head.to_vec())
        };
        Ok(Self {
            heads,
            q: take(prompt_len, dim)?,
            w_k: take(dim, dim)?,
            w_v: take(dim, dim)?,
            w_o: take(dim, dim)?,
            ln_gamma: take(1, dim)?,
            ln_beta: take(1, dim)?,
            w1: take(dim, dim)?,
            b1: take(1, dim)?,
            w2: take(dim, dim)?,
            b2: take(1, dim)?,
        })
    }

    /// Puts the parameter blocks on the tape, as trainable leaves or as
    /// borrowed constants.
    pub(crate) fn bind<'a>(&'a self, tape: &mut GradTape<'a>, trainable: bool) -> GenVars {
        self.leaves().map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m) })
    }

    pub(crate) fn forward_on_tape(&self, tape: &mut GradTape<'_>, vars: &GenVars, tokens: Var) -> Result<Var> {
        let [q, w_k, w_v, w_o, gamma, beta, w1, b1, w2, b2] = *vars;
        let t = tape.value(tokens);
        if t.rows() == 0 || t.cols() != self.dim() {
            return Err(Error::shape("generate_prompts", t.shape(), (self.dim(), self.dim())));
        }
        let k = tape.matmul(tokens, w_k)?;
        let v = tape.matmul(tokens, w_v)?;
        let hd = self.dim() / self.heads;
        let scale = (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.col_slice(q, h * hd, hd)?;
            let kh = tape.col_slice(k, h * hd, hd)?;
            let vh = tape.col_slice(v, h * hd, hd)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let attn = tape.row_softmax(scores, scale)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let o = tape.hconcat(&outs)?;
        let proj = tape.matmul(o, w_o)?;
        let x = tape.add(proj, q)?;
        let x = tape.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?;
        let h1 = tape.matmul(x, w1)?;
        let h1 = tape.add_row(h1, b1)?;
        let h1 = tape.relu(h1);
        let out = tape.matmul(h1, w2)?;
        tape.add_row(out, b2)
    }

    /// Prompt vectors `m × d` for the candidate token set `tokens` (`n × d`).
    pub fn generate(&self, tokens: &Matrix) -> Result<Matrix> {
        let mut tape = GradTape::new();
        let vars = self.bind(&mut tape, false);
        let t = tape.constant(tokens);
        let out = self.forward_on_tape(&mut tape, &vars, t)?;
        Ok(tape.value(out).clone())
    }
}
