//! Frozen affine text encoder.
//!
//! Maps `[v₁; …; v_m; token]` to `W_e · concat(v₁, …, v_m, token) + b_e`
//! with `W_e ∈ R^{d × (m+1)d}`. The map is affine in the prompt block, so
//! the prompt contribution is shared by every class and the class-token
//! contribution is independent of the prompt. The tape route exploits that
//! split; [`SurrogateEncoder::encode`] evaluates the full product directly.

use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{matmul, normalized, GradTape, Matrix, Var};

#[derive(Clone, Debug)]
pub struct SurrogateEncoder {
    prompt_len: usize,
    dim: usize,
    seed: u64,
    weight: Matrix,
    bias: Matrix,
    /// `W_e[:, ..m·d]ᵀ`, shape `(m·d) × d`.
    prompt_block_t: Matrix,
    /// `W_e[:, m·d..]ᵀ`, shape `d × d`.
    token_block_t: Matrix,
    handcrafted: Matrix,
}

const BIAS_SCALE: f64 = 0.1;

impl SurrogateEncoder {
    /// Regenerates the frozen encoder and the handcrafted prompt from `seed`.
    pub fn from_seed(seed: u64, prompt_len: usize, dim: usize) -> Result<Self> {
        if prompt_len == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "encoder needs m >= 1 and d >= 1, got m={prompt_len}, d={dim}"
            )));
        }
        let width = (prompt_len + 1) * dim;
        let mut r = rng::prng(rng::child_seed(&[seed, stream::ENCODER]));
        // Unit-norm inputs of total squared norm m+1 map to roughly unit outputs.
        let std = 1.0 / (width as f64).sqrt();
        let weight = Matrix::new(dim, width, rng::gaussian_vec(&mut r, dim * width, std))?;
        let bias = Matrix::row_vector(rng::gaussian_vec(&mut r, dim, BIAS_SCALE / (dim as f64).sqrt()));
        let mut handcrafted = Vec::with_capacity(prompt_len * dim);
        for _ in 0..prompt_len {
            let row = rng::gaussian_vec(&mut r, dim, 1.0);
            handcrafted.extend(normalized(&row).expect("gaussian row is nonzero"));
        }
        let handcrafted = Matrix::new(prompt_len, dim, handcrafted)?;
        let wt = weight.transpose();
        let split = prompt_len * dim;
        let prompt_block_t = Matrix::new(split, dim, wt.data()[..split * dim].to_vec())?;
        let token_block_t = Matrix::new(dim, dim, wt.data()[split * dim..].to_vec())?;
        Ok(Self {
            prompt_len,
            dim,
            seed,
            weight,
            bias,
            prompt_block_t,
            token_block_t,
            handcrafted,
        })
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        self.bias.data()
    }

    /// The fixed `m × d` "a photo of a" analog shared by every class.
    pub fn handcrafted_prompts(&self) -> &Matrix {
        &self.handcrafted
    }

    fn check_prompts(&self, p: &Matrix) -> Result<()> {
        if p.shape() != (self.prompt_len, self.dim) {
            return Err(Error::shape("surrogate_encode", p.shape(), (self.prompt_len, self.dim)));
        }
        Ok(())
    }

    /// `W_e · concat(rows of p, token) + b_e`.
    pub fn encode(&self, p: &Matrix, token: &[f64]) -> Result<Vec<f64>> {
        self.check_prompts(p)?;
        if token.len() != self.dim {
            return Err(Error::shape("surrogate_encode", (1, token.len()), (1, self.dim)));
        }
        let input: Vec<f64> = p.data().iter().chain(token).copied().collect();
        Ok((0..self.dim)
            .map(|i| {
                self.weight
                    .row(i)
                    .iter()
                    .zip(&input)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.bias.data()[i]
            })
            .collect())
    }

    /// Class-token contribution `tokens · W_tokᵀ + b_e`, one row per token.
    pub fn class_part(&self, tokens: &Matrix) -> Result<Matrix> {
        matmul(tokens, &self.token_block_t)?.add_row(&self.bias)
    }

    /// Prompt contribution `W_prompt · vec(p)`, as a `1 × d` row.
    pub fn prompt_part(&self, p: &Matrix) -> Result<Matrix> {
        self.check_prompts(p)?;
        matmul(&p.reshape(1, self.prompt_len * self.dim)?, &self.prompt_block_t)
    }

    /// Text embeddings for every class under prompts `p`: row `j` is
    /// `encode(p, token_j)`, given `class_part` from [`Self::class_part`].
    pub fn encode_classes(&self, p: &Matrix, class_part: &Matrix) -> Result<Matrix> {
        class_part.add_row(&self.prompt_part(p)?)
    }

    /// Tape version of [`Self::encode_classes`], differentiable in `p`.
    pub fn encode_on_tape<'a>(&'a self, tape: &mut GradTape<'a>, p: Var, class_part: Var) -> Result<Var> {
        self.check_prompts(tape.value(p))?;
        let flat = tape.reshape(p, 1, self.prompt_len * self.dim)?;
        let w = tape.constant(&self.prompt_block_t);
        let shared = tape.matmul(flat, w)?;
        tape.add_row(class_part, shared)
    }
}
