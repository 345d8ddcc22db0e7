//! Synthetic embedding worlds.
//!
//! Each dataset gets a random context centroid; its class tokens are
//! unit-normalized perturbations of that centroid, so token sets cluster by
//! dataset. Images of a dataset are rendered through that dataset's own
//! prompt, `P₀ + σ·shift·D(centroid)`, where `D` is a fixed random linear map
//! shared by all datasets: the best prompt depends on the context, and a
//! generator that reads the class tokens can recover it. Each image is the
//! normalized clean embedding plus isotropic noise of total scale `σ`.
//! With `σ = 0` every image equals its class's handcrafted text embedding.
//!
//! All stored floats are rounded to `f32` so a saved store reloads bitwise.

use serde::{Deserialize, Serialize};

use super::store::{ClassRecord, Dataset, EmbeddingStore, Split};
use super::surrogate::SurrogateEncoder;
use crate::error::{Error, Result};
use crate::partition::base_count;
use crate::rng::{self, stream, Prng};
use crate::tensor::{matmul, normalized, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub prompt_len: usize,
    pub num_datasets: usize,
    pub classes_per_dataset: usize,
    pub train_shots: usize,
    pub eval_images_per_class: usize,
    pub noise_sigma: f64,
    pub dataset_context_spread: f64,
    pub dataset_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            prompt_len: 4,
            num_datasets: 6,
            classes_per_dataset: 40,
            train_shots: 8,
            eval_images_per_class: 20,
            noise_sigma: 0.3,
            dataset_context_spread: 0.5,
            dataset_shift: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("prompt_len", self.prompt_len),
            ("num_datasets", self.num_datasets),
            ("classes_per_dataset", self.classes_per_dataset),
            ("train_shots", self.train_shots),
            ("eval_images_per_class", self.eval_images_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("world.{name} must be >= 1")));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("dataset_context_spread", self.dataset_context_spread),
            ("dataset_shift", self.dataset_shift),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("world.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn quantize(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

fn unit_gaussian(rng: &mut Prng, dim: usize) -> Vec<f64> {
    loop {
        if let Some(v) = normalized(&rng::gaussian_vec(rng, dim, 1.0)) {
            return v;
        }
    }
}

fn sample_image(clean: &[f64], cfg: &SynthConfig, rng: &mut Prng) -> Vec<f64> {
    let iso = cfg.noise_sigma / (cfg.dim as f64).sqrt();
    let raw: Vec<f64> = clean.iter().map(|&c| c + iso * rng::gaussian(rng)).collect();
    // A zero vector here needs an exact cancellation; fall back to the clean embedding.
    quantize(&normalized(&raw).unwrap_or_else(|| clean.to_vec()))
}

/// The prompt that generated a dataset's images: `P₀ + σ·shift·D(centroid)`,
/// where `D` is a fixed random linear map whose rows have unit norm on
/// average over unit centroids.
fn context_prompt(p0: &Matrix, context_map: &Matrix, centroid: &[f64], cfg: &SynthConfig) -> Result<Matrix> {
    let c = Matrix::new(cfg.dim, 1, centroid.to_vec())?;
    let d = matmul(context_map, &c)?.reshape(cfg.prompt_len, cfg.dim)?;
    p0.add(&d.scale(cfg.noise_sigma * cfg.dataset_shift))
}

pub fn synth_world(cfg: &SynthConfig) -> Result<EmbeddingStore> {
    cfg.validate()?;
    let encoder = SurrogateEncoder::from_seed(cfg.seed, cfg.prompt_len, cfg.dim)?;
    let p0 = encoder.handcrafted_prompts().clone();
    let mut rng = rng::prng(rng::child_seed(&[cfg.seed, stream::WORLD]));
    let md = cfg.prompt_len * cfg.dim;
    let context_map = Matrix::new(md, cfg.dim, rng::gaussian_vec(&mut rng, md * cfg.dim, 1.0 / (cfg.dim as f64).sqrt()))?;
    let spread = cfg.dataset_context_spread / (cfg.dim as f64).sqrt();
    let n_base = base_count(cfg.classes_per_dataset);
    let mut datasets = Vec::with_capacity(cfg.num_datasets);
    for di in 0..cfg.num_datasets {
        let centroid = unit_gaussian(&mut rng, cfg.dim);
        let prompt = context_prompt(&p0, &context_map, &centroid, cfg)?;
        let mut classes = Vec::with_capacity(cfg.classes_per_dataset);
        for ci in 0..cfg.classes_per_dataset {
            let raw: Vec<f64> = centroid.iter().map(|&c| c + spread * rng::gaussian(&mut rng)).collect();
            let token = quantize(&normalized(&raw).unwrap_or_else(|| centroid.clone()));
            let clean = clean_image(&encoder, &prompt, &token)?;
            let train = (0..cfg.train_shots).map(|_| sample_image(&clean, cfg, &mut rng)).collect();
            let eval = (0..cfg.eval_images_per_class)
                .map(|_| sample_image(&clean, cfg, &mut rng))
                .collect();
            classes.push(ClassRecord {
                name: format!("ds{di}_c{ci:03}"),
                split: if ci < n_base { Split::Base } else { Split::New },
                token,
                train,
                eval,
            });
        }
        datasets.push(Dataset {
            name: format!("ds{di}"),
            classes,
        });
    }
    Ok(EmbeddingStore {
        dim: cfg.dim,
        prompt_len: cfg.prompt_len,
        encoder_seed: cfg.seed,
        datasets,
    })
}

fn clean_image(encoder: &SurrogateEncoder, p0: &Matrix, token: &[f64]) -> Result<Vec<f64>> {
    let e = encoder.encode(p0, token)?;
    normalized(&e).ok_or_else(|| Error::Numeric("handcrafted text embedding is zero".into()))
}
