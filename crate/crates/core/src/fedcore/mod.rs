//! Federated rounds: client sampling, local SGD, aggregation, evaluation.
//!
//! Each round samples a client subset, runs `K` local steps on every sampled
//! client from the current global parameters, and replaces the global
//! parameters by the mean of the returned vectors. Clients only see the
//! global vector of their round; local training is a pure function of
//! `(θ, shard, η, client seed)`, so running clients in parallel gives the
//! same result as running them in sequence.

mod aggregate;

pub use aggregate::aggregate;

use std::f64::consts::PI;

use log::{debug, info};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::SurrogateEncoder;
use crate::error::{Error, Result};
use crate::eval::{eval_protocol, EvalPlan, MetricsRecord, ModelSet, ProtocolScores};
use crate::models::{loss_and_grad, loss_value, Batch, Method, ModelSnapshot, ModelSpec, PredictConfig, PromptModel};
use crate::partition::ClientShard;
use crate::rng::{self, stream, Prng};
use crate::tensor::SgdMomentum;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "FTPG_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Communication rounds `R`.
    pub rounds: usize,
    /// Local SGD steps `K` per round.
    pub local_steps: usize,
    pub participation_rate: f64,
    /// Initial learning rate `η⁰`.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Evaluate after every this many rounds; the final round always is.
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            local_steps: 1,
            participation_rate: 1.0,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 32,
            eval_every: 25,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.local_steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "fed.rounds, fed.local_steps, fed.batch_size and fed.eval_every must be >= 1".into(),
            ));
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return Err(Error::Config(format!(
                "fed.participation_rate must be in (0, 1], got {}",
                self.participation_rate
            )));
        }
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("fed.{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Number of clients drawn per round: `round(rate · N)`, at least 1.
pub fn sample_size(num_clients: usize, rate: f64) -> usize {
    ((rate * num_clients as f64).round() as usize).clamp(1, num_clients.max(1))
}

/// Uniform sample without replacement, in ascending client order.
pub fn sample_clients(rng: &mut Prng, client_ids: &[usize], rate: f64) -> Result<Vec<usize>> {
    if client_ids.is_empty() {
        return Err(Error::Config("no clients to sample from".into()));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("participation rate must be in (0, 1], got {rate}")));
    }
    let k = sample_size(client_ids.len(), rate);
    if k == client_ids.len() {
        return Ok(client_ids.to_vec());
    }
    let mut picked = index::sample(rng, client_ids.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| client_ids[i]).collect())
}

/// `η⁰ · ½(1 + cos(π r / R))` for round `r ∈ [0, R)`.
pub fn cosine_lr(round: usize, rounds: usize, lr0: f64) -> Result<f64> {
    if round >= rounds {
        return Err(Error::Range(format!("round {round} outside [0, {rounds})")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * round as f64 / rounds as f64).cos()))
}

/// Seed of client `client_id`'s batch stream in round `round`.
pub fn client_seed(seed: u64, client_id: usize, round: usize) -> u64 {
    rng::child_seed(&[seed, stream::CLIENT, client_id as u64, round as u64])
}

/// Seed of the client-sampling stream in round `round`.
pub fn sampling_seed(seed: u64, round: usize) -> u64 {
    rng::child_seed(&[seed, stream::SAMPLE, round as u64])
}

/// Thread pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))
}

/// Everything a client needs to train locally.
#[derive(Clone, Copy, Debug)]
pub struct LocalTrainer<'a> {
    pub spec: ModelSpec,
    pub enc: &'a SurrogateEncoder,
    pub predict: PredictConfig,
    /// Weight of the handcrafted-prompt penalty, when enabled.
    pub kg_lambda: Option<f64>,
    pub local_steps: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub values: Vec<f64>,
    /// Mean loss over the local steps, before each step.
    pub mean_loss: f64,
}

impl LocalTrainer<'_> {
    /// Runs `K` momentum-SGD steps from `theta` with a fresh velocity; each
    /// step uses the whole shard, or `batch_size` examples drawn without
    /// replacement when the shard is larger.
    pub fn train(&self, theta: &[f64], shard: &ClientShard, lr: f64, rng: &mut Prng) -> Result<LocalUpdate> {
        if shard.num_examples() == 0 {
            return Err(Error::Data(format!("client {} has no training examples", shard.client_id)));
        }
        let opt = SgdMomentum {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        let mut values = theta.to_vec();
        let mut velocity = vec![0.0; values.len()];
        let mut total = 0.0;
        let full = shard.num_examples() <= self.batch_size;
        for _ in 0..self.local_steps {
            let model = self.spec.unflatten(&values)?;
            let (loss, grads) = if full {
                let batch = Batch { images: &shard.images, labels: &shard.labels };
                loss_and_grad(&model, batch, &shard.tokens, self.enc, &self.predict, self.kg_lambda)?
            } else {
                let idx = index::sample(rng, shard.num_examples(), self.batch_size).into_vec();
                let images = shard.images.select_rows(&idx);
                let labels: Vec<usize> = idx.iter().map(|&i| shard.labels[i]).collect();
                let batch = Batch { images: &images, labels: &labels };
                loss_and_grad(&model, batch, &shard.tokens, self.enc, &self.predict, self.kg_lambda)?
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("client {} loss diverged to {loss}", shard.client_id)));
            }
            total += loss;
            opt.step(&mut values, &grads, &mut velocity)?;
        }
        Ok(LocalUpdate {
            values,
            mean_loss: total / self.local_steps as f64,
        })
    }

    /// Loss of `model` on the client's full shard.
    pub fn shard_loss(&self, model: &PromptModel, shard: &ClientShard) -> Result<f64> {
        let batch = Batch { images: &shard.images, labels: &shard.labels };
        loss_value(model, batch, &shard.tokens, self.enc, &self.predict, self.kg_lambda)
    }
}

/// One training run's fixed inputs.
#[derive(Clone, Copy, Debug)]
pub struct FedRun<'a> {
    pub method: Method,
    pub seed: u64,
    pub fed: &'a FederationConfig,
    pub spec: ModelSpec,
    pub predict: PredictConfig,
    /// Penalty weight used by [`Method::FedKgCoop`].
    pub kg_lambda: f64,
    pub hm_terms: usize,
}

impl<'a> FedRun<'a> {
    pub fn trainer(&self, enc: &'a SurrogateEncoder) -> LocalTrainer<'a> {
        LocalTrainer {
            spec: self.spec,
            enc,
            predict: self.predict,
            kg_lambda: (self.method == Method::FedKgCoop).then_some(self.kg_lambda),
            local_steps: self.fed.local_steps,
            batch_size: self.fed.batch_size,
            momentum: self.fed.momentum,
            weight_decay: self.fed.weight_decay,
        }
    }

    fn evaluates_after(&self, round: usize) -> bool {
        round.is_multiple_of(self.fed.eval_every) || round == self.fed.rounds
    }
}

/// Trained parameters: one global model, or one model per client.
#[derive(Clone, Debug, PartialEq)]
pub enum Trained {
    Global(PromptModel),
    PerClient(Vec<PromptModel>),
}

impl Trained {
    pub fn model_set(&self) -> ModelSet<'_> {
        match self {
            Trained::Global(m) => ModelSet::Shared(m),
            Trained::PerClient(ms) => ModelSet::PerClient(ms),
        }
    }

    /// Snapshots in client order; a single one for a global model.
    pub fn snapshots(&self, spec: &ModelSpec) -> Vec<ModelSnapshot> {
        match self {
            Trained::Global(m) => vec![spec.snapshot(m)],
            Trained::PerClient(ms) => ms.iter().map(|m| spec.snapshot(m)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FedOutcome {
    pub trained: Trained,
    pub records: Vec<MetricsRecord>,
    /// Scores of the last evaluation.
    pub final_scores: ProtocolScores,
}

fn record(run: &FedRun<'_>, round: usize, train_loss: f64, s: &ProtocolScores) -> MetricsRecord {
    info!(
        "{} round {round}: loss {train_loss:.4} local {:.4} base {:.4} new {:.4} hm {:.4}",
        run.method, s.local, s.base, s.new, s.hm
    );
    MetricsRecord {
        round,
        method: run.method,
        seed: run.seed,
        train_loss,
        local_acc: s.local,
        base_acc: s.base,
        new_acc: s.new,
        hm: s.hm,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trains `run.method` over `shards` and evaluates with `plan` at the
/// configured cadence. Zero-shot trains nothing and yields one record.
pub fn run_federation(
    run: &FedRun<'_>,
    shards: &[ClientShard],
    plan: &EvalPlan,
    enc: &SurrogateEncoder,
) -> Result<FedOutcome> {
    run.fed.validate()?;
    run.predict.validate()?;
    if shards.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    let pool = thread_pool()?;
    pool.install(|| match run.method {
        Method::ZeroShot => zero_shot(run, shards, plan, enc),
        Method::CoopLocal => local_only(run, shards, plan, enc),
        _ => federated(run, shards, plan, enc),
    })
}

fn zero_shot(run: &FedRun<'_>, shards: &[ClientShard], plan: &EvalPlan, enc: &SurrogateEncoder) -> Result<FedOutcome> {
    let model = PromptModel::Fixed(enc.handcrafted_prompts().clone());
    let trainer = run.trainer(enc);
    let losses = shards
        .par_iter()
        .map(|s| trainer.shard_loss(&model, s))
        .collect::<Result<Vec<_>>>()?;
    let scores = eval_protocol(ModelSet::Shared(&model), plan, enc, &run.predict, run.hm_terms)?;
    Ok(FedOutcome {
        records: vec![record(run, 0, mean(&losses), &scores)],
        trained: Trained::Global(model),
        final_scores: scores,
    })
}

fn federated(run: &FedRun<'_>, shards: &[ClientShard], plan: &EvalPlan, enc: &SurrogateEncoder) -> Result<FedOutcome> {
    let trainer = run.trainer(enc);
    let ids: Vec<usize> = (0..shards.len()).collect();
    let mut global = run.spec.snapshot(&run.spec.init(enc, run.seed)?);
    let mut records = Vec::new();
    let mut last = None;
    for r in 0..run.fed.rounds {
        let lr = cosine_lr(r, run.fed.rounds, run.fed.lr)?;
        let picked = sample_clients(&mut rng::prng(sampling_seed(run.seed, r)), &ids, run.fed.participation_rate)?;
        debug!("round {r}: lr {lr:.6}, clients {picked:?}");
        let theta = &global.values;
        let updates = picked
            .par_iter()
            .map(|&i| {
                let shard = &shards[i];
                let mut crng = rng::prng(client_seed(run.seed, shard.client_id, r));
                trainer.train(theta, shard, lr, &mut crng).map(|u| (shard.client_id, u))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = mean(&updates.iter().map(|(_, u)| u.mean_loss).collect::<Vec<_>>());
        let snaps: Vec<(usize, ModelSnapshot)> = updates
            .into_iter()
            .map(|(id, u)| (id, ModelSnapshot::new(run.method, u.values)))
            .collect();
        global = aggregate(&snaps)?;
        if run.evaluates_after(r + 1) {
            let model = run.spec.from_snapshot(&global)?;
            let s = eval_protocol(ModelSet::Shared(&model), plan, enc, &run.predict, run.hm_terms)?;
            records.push(record(run, r + 1, loss, &s));
            last = Some(s);
        }
    }
    Ok(FedOutcome {
        trained: Trained::Global(run.spec.from_snapshot(&global)?),
        records,
        final_scores: last.expect("final round is evaluated"),
    })
}

/// Every client trains its own prompt from the handcrafted one, with the
/// same round schedule and no communication.
fn local_only(run: &FedRun<'_>, shards: &[ClientShard], plan: &EvalPlan, enc: &SurrogateEncoder) -> Result<FedOutcome> {
    let trainer = run.trainer(enc);
    let init = run.spec.init(enc, run.seed)?.flatten();
    let mut params: Vec<Vec<f64>> = vec![init; shards.len()];
    let mut records = Vec::new();
    let mut last = None;
    for r in 0..run.fed.rounds {
        let lr = cosine_lr(r, run.fed.rounds, run.fed.lr)?;
        let updates = shards
            .par_iter()
            .zip(params.par_iter())
            .map(|(shard, theta)| {
                let mut crng = rng::prng(client_seed(run.seed, shard.client_id, r));
                trainer.train(theta, shard, lr, &mut crng)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = mean(&updates.iter().map(|u| u.mean_loss).collect::<Vec<_>>());
        params = updates.into_iter().map(|u| u.values).collect();
        if run.evaluates_after(r + 1) {
            let models = params.iter().map(|p| run.spec.unflatten(p)).collect::<Result<Vec<_>>>()?;
            let s = eval_protocol(ModelSet::PerClient(&models), plan, enc, &run.predict, run.hm_terms)?;
            records.push(record(run, r + 1, loss, &s));
            last = Some(s);
        }
    }
    let models = params.iter().map(|p| run.spec.unflatten(p)).collect::<Result<Vec<_>>>()?;
    Ok(FedOutcome {
        trained: Trained::PerClient(models),
        records,
        final_scores: last.expect("final round is evaluated"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{synth_world, EmbeddingStore, SynthConfig};
    use crate::partition::{build_shards, PartitionConfig};

    #[test]
    fn sampling_rules() {
        let ids: Vec<usize> = (0..200).collect();
        let mut r = rng::prng(0);
        assert_eq!(sample_clients(&mut r, &ids, 1.0).unwrap(), ids);
        let s = sample_clients(&mut rng::prng(1), &ids, 0.1).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_clients(&mut rng::prng(1), &ids, 0.1).unwrap());
        assert_eq!(sample_clients(&mut r, &ids[..3], 0.01).unwrap().len(), 1);
        assert!(sample_clients(&mut r, &[], 0.5).is_err());
        assert!(sample_clients(&mut r, &ids, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 10, 0.5).unwrap(), 0.5);
        assert!((cosine_lr(5, 10, 0.5).unwrap() - 0.25).abs() < 1e-15);
        let last = cosine_lr(9, 10, 0.5).unwrap();
        assert!((last - 0.5 * 0.5 * (1.0 + (PI * 0.9).cos())).abs() < 1e-15);
        assert!(matches!(cosine_lr(10, 10, 0.5), Err(Error::Range(_))));
        let lrs: Vec<f64> = (0..50).map(|r| cosine_lr(r, 50, 0.1).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    fn setup() -> (EmbeddingStore, Vec<ClientShard>, SurrogateEncoder) {
        let store = synth_world(&SynthConfig {
            dim: 8,
            prompt_len: 2,
            num_datasets: 2,
            classes_per_dataset: 8,
            train_shots: 4,
            eval_images_per_class: 3,
            ..Default::default()
        })
        .unwrap();
        let part = build_shards(&store, &PartitionConfig { classes_per_client: 2, shots: 4, ..Default::default() }, 0).unwrap();
        let enc = SurrogateEncoder::from_seed(store.encoder_seed, 2, 8).unwrap();
        (store, part.shards, enc)
    }

    fn fed(rounds: usize) -> FederationConfig {
        FederationConfig { rounds, lr: 0.01, batch_size: 4, eval_every: 1, ..Default::default() }
    }

    fn run(method: Method, fed: &FederationConfig) -> FedRun<'_> {
        FedRun {
            method,
            seed: 7,
            fed,
            spec: ModelSpec { method, prompt_len: 2, dim: 8, heads: 2 },
            predict: PredictConfig::default(),
            kg_lambda: 8.0,
            hm_terms: 3,
        }
    }

    #[test]
    fn zero_lr_is_a_bitwise_no_op() {
        let (_, shards, enc) = setup();
        let f = fed(1);
        let r = run(Method::FedTpg, &f);
        let theta = r.spec.init(&enc, 0).unwrap().flatten();
        let u = r.trainer(&enc).train(&theta, &shards[0], 0.0, &mut rng::prng(0)).unwrap();
        assert!(u.values.iter().zip(&theta).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn record_counts_and_determinism() {
        let (store, shards, enc) = setup();
        let plan = EvalPlan::new(&store, &shards, &[]).unwrap();
        let f = fed(3);
        for m in [Method::FedTpg, Method::FedCoop, Method::FedKgCoop, Method::CoopLocal] {
            let a = run_federation(&run(m, &f), &shards, &plan, &enc).unwrap();
            assert_eq!(a.records.len(), 3);
            let b = run_federation(&run(m, &f), &shards, &plan, &enc).unwrap();
            assert_eq!(a, b);
        }
        let zs = run_federation(&run(Method::ZeroShot, &f), &shards, &plan, &enc).unwrap();
        assert_eq!(zs.records.len(), 1);
        assert_eq!(zs.records[0].round, 0);
    }

    #[test]
    fn eval_cadence_includes_final_round() {
        let (store, shards, enc) = setup();
        let plan = EvalPlan::new(&store, &shards, &[]).unwrap();
        let f = FederationConfig { eval_every: 2, ..fed(5) };
        let out = run_federation(&run(Method::FedCoop, &f), &shards, &plan, &enc).unwrap();
        let rounds: Vec<usize> = out.records.iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![2, 4, 5]);
    }

    #[test]
    fn identical_shards_match_a_single_client() {
        let (store, shards, enc) = setup();
        let twin: Vec<ClientShard> = (0..3).map(|i| ClientShard { client_id: i, ..shards[0].clone() }).collect();
        let f = FederationConfig { batch_size: 100, ..fed(1) };
        let r = run(Method::FedCoop, &f);
        let plan = EvalPlan::new(&store, &twin, &[]).unwrap();
        let out = run_federation(&r, &twin, &plan, &enc).unwrap();
        let theta = r.spec.init(&enc, r.seed).unwrap().flatten();
        let lr = cosine_lr(0, 1, f.lr).unwrap();
        let one = r.trainer(&enc).train(&theta, &twin[0], lr, &mut rng::prng(0)).unwrap();
        match out.trained {
            Trained::Global(m) => assert_eq!(m.flatten(), one.values),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(FederationConfig::default().validate().is_ok());
        assert!(FederationConfig { rounds: 0, ..Default::default() }.validate().is_err());
        assert!(FederationConfig { participation_rate: 1.5, ..Default::default() }.validate().is_err());
        assert!(FederationConfig { lr: -1.0, ..Default::default() }.validate().is_err());
    }
}
