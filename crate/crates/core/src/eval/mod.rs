//! Local, base and new accuracy protocols and their harmonic mean.
//!
//! * local: each client's candidate set is its own classes, scored on those
//!   classes' eval images, averaged over clients;
//! * base / new: per dataset, the candidate set is every base (new) class of
//!   that dataset, averaged over datasets with equal weight;
//! * unseen: datasets withheld from training, candidate set = all of their
//!   classes.
//!
//! Generated prompts are always regenerated from the candidate set's tokens.

mod pca;
mod record;

pub use pca::{jacobi_eigen, pca_project, prompt_points, write_pca_csv, PcaResult, PromptPoint, PCA_HEADER};
pub use record::{write_metrics_csv, MetricsRecord, METRICS_HEADER};

use log::warn;
use rayon::prelude::*;

use crate::encoders::{ClassId, EmbeddingStore, Split, SurrogateEncoder};
use crate::error::{Error, Result};
use crate::models::{argmax, class_cosines, softmax_scores, PredictConfig, PromptModel};
use crate::partition::ClientShard;
use crate::tensor::Matrix;

/// `k / Σ 1/vᵢ`.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("harmonic mean of no values".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("harmonic mean needs positive values, got {v}")));
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// A candidate class set with labelled eval images.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub name: String,
    pub class_ids: Vec<ClassId>,
    pub tokens: Matrix,
    pub images: Matrix,
    pub labels: Vec<usize>,
}

impl EvalTask {
    /// Candidate set `class_ids` scored on their eval images.
    pub fn new(store: &EmbeddingStore, name: impl Into<String>, class_ids: Vec<ClassId>) -> Result<Self> {
        let name = name.into();
        if class_ids.len() < 2 {
            return Err(Error::Data(format!("eval task {name} needs at least 2 candidate classes")));
        }
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut labels = Vec::new();
        for (j, &id) in class_ids.iter().enumerate() {
            let c = store.class(id).ok_or_else(|| Error::Data(format!("unknown class id {id}")))?;
            rows.extend(c.eval.iter().map(Vec::as_slice));
            labels.extend(std::iter::repeat_n(j, c.eval.len()));
        }
        if rows.is_empty() {
            return Err(Error::Data(format!("eval task {name} has no eval images")));
        }
        Ok(Self {
            tokens: store.token_matrix(&class_ids)?,
            images: Matrix::from_rows(&rows)?,
            name,
            class_ids,
            labels,
        })
    }
}

/// Predicted local labels, `argmax` of the class probabilities per image.
pub fn predict(model: &PromptModel, task: &EvalTask, enc: &SurrogateEncoder, cfg: &PredictConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let p = model.prompts(&task.tokens)?;
    let cos = class_cosines(&p, &task.tokens, &task.images, enc)?;
    Ok(cos
        .iter_rows()
        .map(|row| argmax(&softmax_scores(row, cfg.temperature)))
        .collect())
}

pub fn eval_accuracy(model: &PromptModel, task: &EvalTask, enc: &SurrogateEncoder, cfg: &PredictConfig) -> Result<f64> {
    let pred = predict(model, task, enc, cfg)?;
    let correct = pred.iter().zip(&task.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / task.labels.len() as f64)
}

/// Every eval task the protocols need, built once per run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPlan {
    pub local: Vec<EvalTask>,
    pub base: Vec<EvalTask>,
    pub new: Vec<EvalTask>,
    pub unseen: Vec<EvalTask>,
}

impl EvalPlan {
    /// Local tasks from `shards`; base/new tasks from every dataset not in
    /// `withheld`; unseen tasks from the withheld ones.
    pub fn new(store: &EmbeddingStore, shards: &[ClientShard], withheld: &[String]) -> Result<Self> {
        let local = shards
            .iter()
            .map(|s| EvalTask::new(store, format!("client{}", s.client_id), s.class_ids.clone()))
            .collect::<Result<Vec<_>>>()?;
        let (mut base, mut new, mut unseen) = (Vec::new(), Vec::new(), Vec::new());
        for (di, d) in store.datasets.iter().enumerate() {
            if withheld.contains(&d.name) {
                unseen.push(EvalTask::new(store, d.name.clone(), store.dataset_class_ids(di, None))?);
                continue;
            }
            base.push(EvalTask::new(store, format!("{}/base", d.name), store.dataset_class_ids(di, Some(Split::Base)))?);
            new.push(EvalTask::new(store, format!("{}/new", d.name), store.dataset_class_ids(di, Some(Split::New)))?);
        }
        Ok(Self { local, base, new, unseen })
    }
}

/// The model(s) being scored.
#[derive(Clone, Copy, Debug)]
pub enum ModelSet<'m> {
    /// One model for every task.
    Shared(&'m PromptModel),
    /// One model per client, aligned with [`EvalPlan::local`]. Shared tasks
    /// score the mean accuracy over all client models.
    PerClient(&'m [PromptModel]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProtocolScores {
    pub local: f64,
    pub base: f64,
    pub new: f64,
    pub hm: f64,
    /// Mean accuracy over withheld datasets, if any.
    pub unseen: Option<f64>,
}

/// Harmonic mean for reporting: over (local, base, new) with `terms = 3`,
/// over (base, new) with `terms = 2`; 0 if any term is 0.
pub fn protocol_hm(local: f64, base: f64, new: f64, terms: usize) -> Result<f64> {
    let values: &[f64] = match terms {
        3 => &[local, base, new],
        2 => &[base, new],
        _ => return Err(Error::Config(format!("hm terms must be 2 or 3, got {terms}"))),
    };
    if values.iter().any(|&v| v <= 0.0) {
        warn!("an accuracy is 0; reporting hm = 0");
        return Ok(0.0);
    }
    harmonic_mean(values)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn shared_task_mean(
    models: ModelSet<'_>,
    tasks: &[EvalTask],
    enc: &SurrogateEncoder,
    cfg: &PredictConfig,
) -> Result<Option<f64>> {
    if tasks.is_empty() {
        return Ok(None);
    }
    let per_task = tasks
        .par_iter()
        .map(|t| match models {
            ModelSet::Shared(m) => eval_accuracy(m, t, enc, cfg),
            ModelSet::PerClient(ms) => {
                let accs = ms.iter().map(|m| eval_accuracy(m, t, enc, cfg)).collect::<Result<Vec<_>>>()?;
                Ok(mean(&accs))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(mean(&per_task)))
}

pub fn eval_protocol(
    models: ModelSet<'_>,
    plan: &EvalPlan,
    enc: &SurrogateEncoder,
    cfg: &PredictConfig,
    hm_terms: usize,
) -> Result<ProtocolScores> {
    if plan.local.is_empty() || plan.base.is_empty() {
        return Err(Error::Data("eval plan needs at least one client and one dataset".into()));
    }
    if let ModelSet::PerClient(ms) = models {
        if ms.len() != plan.local.len() {
            return Err(Error::Data(format!("{} client models for {} clients", ms.len(), plan.local.len())));
        }
    }
    let local = plan
        .local
        .par_iter()
        .enumerate()
        .map(|(i, t)| match models {
            ModelSet::Shared(m) => eval_accuracy(m, t, enc, cfg),
            ModelSet::PerClient(ms) => eval_accuracy(&ms[i], t, enc, cfg),
        })
        .collect::<Result<Vec<_>>>()?;
    let local = mean(&local);
    let base = shared_task_mean(models, &plan.base, enc, cfg)?.expect("nonempty");
    let new = shared_task_mean(models, &plan.new, enc, cfg)?.expect("same datasets as base");
    let unseen = shared_task_mean(models, &plan.unseen, enc, cfg)?;
    Ok(ProtocolScores {
        local,
        base,
        new,
        hm: protocol_hm(local, base, new, hm_terms)?,
        unseen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{synth_world, SynthConfig};
    use crate::models::{Method, ModelSpec};
    use crate::partition::{build_shards, PartitionConfig};
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn harmonic_mean_reference_rows() {
        let a = harmonic_mean(&[76.72, 70.52, 75.78]).unwrap();
        assert!((a - 74.24).abs() < 0.01, "{a}");
        let b = harmonic_mean(&[83.67, 71.49, 71.15]).unwrap();
        assert!((b - 75.01).abs() < 0.01, "{b}");
        assert!(matches!(harmonic_mean(&[1.0, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(harmonic_mean(&[]), Err(Error::Domain(_))));
    }

    proptest! {
        #[test]
        fn harmonic_below_arithmetic(v in proptest::collection::vec(0.01f64..1.0, 1..6), x in 0.01f64..1.0) {
            let h = harmonic_mean(&v).unwrap();
            prop_assert!(h <= mean(&v) + 1e-12);
            let same = harmonic_mean(&[x, x, x]).unwrap();
            prop_assert!((same - x).abs() < 1e-15);
        }
    }

    #[test]
    fn protocol_hm_variants() {
        assert_eq!(protocol_hm(0.5, 0.0, 0.5, 3).unwrap(), 0.0);
        assert!((protocol_hm(0.1, 0.5, 0.5, 2).unwrap() - 0.5).abs() < 1e-15);
        assert!(protocol_hm(0.5, 0.5, 0.5, 4).is_err());
    }

    fn world(sigma: f64) -> (EmbeddingStore, Vec<ClientShard>, SurrogateEncoder) {
        let cfg = SynthConfig {
            dim: 16,
            prompt_len: 2,
            num_datasets: 3,
            classes_per_dataset: 8,
            noise_sigma: sigma,
            ..Default::default()
        };
        let store = synth_world(&cfg).unwrap();
        let part = build_shards(&store, &PartitionConfig { classes_per_client: 2, shots: 2, ..Default::default() }, 0).unwrap();
        let enc = SurrogateEncoder::from_seed(store.encoder_seed, 2, 16).unwrap();
        (store, part.shards, enc)
    }

    #[test]
    fn zero_noise_zero_shot_is_perfect() {
        let (store, shards, enc) = world(0.0);
        let plan = EvalPlan::new(&store, &shards, &[]).unwrap();
        let zs = PromptModel::Fixed(enc.handcrafted_prompts().clone());
        let s = eval_protocol(ModelSet::Shared(&zs), &plan, &enc, &PredictConfig::default(), 3).unwrap();
        assert_eq!((s.local, s.base, s.new, s.hm), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn random_prompts_are_near_chance() {
        let mut r = rng::prng(5);
        let d = 16;
        let enc = SurrogateEncoder::from_seed(1, 2, d).unwrap();
        let n = 4;
        let tokens = Matrix::new(n, d, rng::gaussian_vec(&mut r, n * d, 1.0)).unwrap();
        let count = 2000;
        let images = Matrix::new(count, d, rng::gaussian_vec(&mut r, count * d, 1.0)).unwrap();
        let labels = (0..count).map(|i| i % n).collect();
        let task = EvalTask { name: "rand".into(), class_ids: (0..n).collect(), tokens, images, labels };
        let acc = eval_accuracy(&PromptModel::Fixed(enc.handcrafted_prompts().clone()), &task, &enc, &PredictConfig::default()).unwrap();
        let p = 1.0 / n as f64;
        let band = 3.0 * (p * (1.0 - p) / count as f64).sqrt();
        assert!((acc - p).abs() < band, "acc {acc}");
    }

    #[test]
    fn per_client_models_and_unseen() {
        let (store, shards, enc) = world(0.3);
        let plan = EvalPlan::new(&store, &shards, &["ds2".to_string()]).unwrap();
        assert_eq!(plan.base.len(), 2);
        assert_eq!(plan.unseen.len(), 1);
        let spec = ModelSpec { method: Method::FedTpg, prompt_len: 2, dim: 16, heads: 2 };
        let g = spec.init(&enc, 0).unwrap();
        let shared = eval_protocol(ModelSet::Shared(&g), &plan, &enc, &PredictConfig::default(), 3).unwrap();
        let copies = vec![g.clone(); shards.len()];
        let per = eval_protocol(ModelSet::PerClient(&copies), &plan, &enc, &PredictConfig::default(), 3).unwrap();
        for (a, b) in [(shared.local, per.local), (shared.base, per.base), (shared.new, per.new), (shared.hm, per.hm)] {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(shared.unseen.is_some());
        assert!(eval_protocol(ModelSet::PerClient(&copies[1..]), &plan, &enc, &PredictConfig::default(), 3).is_err());
    }

    #[test]
    fn base_prompts_come_from_the_full_base_set() {
        let (store, shards, enc) = world(0.3);
        let plan = EvalPlan::new(&store, &shards, &[]).unwrap();
        let spec = ModelSpec { method: Method::FedTpg, prompt_len: 2, dim: 16, heads: 2 };
        let g = spec.init(&enc, 3).unwrap();
        let base_p = g.prompts(&plan.base[0].tokens).unwrap();
        for t in &plan.local {
            assert_ne!(g.prompts(&t.tokens).unwrap(), base_p);
        }
    }

    #[test]
    fn task_errors() {
        let (store, _, _) = world(0.3);
        assert!(EvalTask::new(&store, "one", vec![0]).is_err());
        assert!(EvalTask::new(&store, "bad", vec![0, 10_000]).is_err());
    }
}
