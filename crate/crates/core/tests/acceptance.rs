//! Acceptance suite: one pass/fail line per criterion.
//!
//! Every criterion runs even when an earlier one fails. The harness fails
//! unless each criterion passes, except the ones in [`KNOWN_FAILING`], which
//! must still fail so a fix is noticed and the list shrinks.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use fedtpg::encoders::SurrogateEncoder;
use fedtpg::eval::{eval_protocol, harmonic_mean, pca_project, predict, prompt_points, ModelSet};
use fedtpg::fedcore::{aggregate, cosine_lr, Trained};
use fedtpg::models::{loss_and_grad, loss_value, Batch, Method, ModelSnapshot, ModelSpec, PredictConfig, PromptModel};
use fedtpg::partition::{build_shards, PartitionConfig};
use fedtpg::rng::{self, Prng};
use fedtpg::runner::{self, prepare, train_in_memory, ExperimentConfig, Preset};
use fedtpg::tensor::{normalized, Matrix};
use rand::seq::SliceRandom;
use rand::RngExt;

/// Criteria whose check runs faithfully but does not hold in this world.
const KNOWN_FAILING: &[usize] = &[9];

const FD_SEEDS: u64 = 100;
const FD_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-6;
const FD_BUDGET_SECS: f64 = 30.0;
const LN_N_TOL: f64 = 1e-9;
const HM_TOL: f64 = 0.01;
const NEW_ORDER_SLACK: f64 = 0.01;
const INVARIANCE_TOL: f64 = 1e-12;
const DESK_BUDGET_SECS: f64 = 300.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk(method: Method, seed: u64) -> ExperimentConfig {
    let mut cfg = Preset::Desk.config();
    cfg.method = method;
    cfg.seed = seed;
    cfg.world.seed = seed;
    cfg
}

fn unit_rows(rng: &mut Prng, rows: usize, dim: usize) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| normalized(&rng::gaussian_vec(rng, dim, 1.0)).expect("nonzero draw"))
        .collect();
    Matrix::from_rows(&data).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// 1
fn gradient_correctness() -> Outcome {
    let (m, d, heads, n) = (2, 8, 2, 3);
    let cfg = PredictConfig::default();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..FD_SEEDS {
        let enc = SurrogateEncoder::from_seed(seed, m, d).unwrap();
        let mut r = rng::prng(seed ^ 0xfd);
        let tokens = unit_rows(&mut r, n, d);
        let images = unit_rows(&mut r, 2 * n, d);
        let labels: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
        let batch = Batch { images: &images, labels: &labels };
        let fixed = PromptModel::Fixed(Matrix::new(m, d, rng::gaussian_vec(&mut r, m * d, 0.5)).unwrap());
        let generator = ModelSpec { method: Method::FedTpg, prompt_len: m, dim: d, heads }.init(&enc, seed).unwrap();
        for (model, kg) in [(&generator, None), (&fixed, None), (&fixed, Some(8.0))] {
            let (_, grad) = loss_and_grad(model, batch, &tokens, &enc, &cfg, kg).unwrap();
            let theta = model.flatten();
            let spec = match model {
                PromptModel::Generator(_) => ModelSpec { method: Method::FedTpg, prompt_len: m, dim: d, heads },
                PromptModel::Fixed(_) => ModelSpec { method: Method::FedCoop, prompt_len: m, dim: d, heads },
            };
            let fd: Vec<f64> = (0..theta.len())
                .map(|i| {
                    let mut t = theta.clone();
                    t[i] = theta[i] + FD_STEP;
                    let up = loss_value(&spec.unflatten(&t).unwrap(), batch, &tokens, &enc, &cfg, kg).unwrap();
                    t[i] = theta[i] - FD_STEP;
                    let down = loss_value(&spec.unflatten(&t).unwrap(), batch, &tokens, &enc, &cfg, kg).unwrap();
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect();
            worst = worst.max(rel_err(&grad, &fd));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < FD_REL_TOL && secs < FD_BUDGET_SECS,
        format!("{FD_SEEDS} seeds, worst rel err {worst:.2e} (< {FD_REL_TOL:e}), {secs:.1}s (< {FD_BUDGET_SECS}s)"),
    )
}

// 2
fn degenerate_loss() -> Outcome {
    let (m, d, heads, n) = (2, 8, 2, 4);
    let enc = SurrogateEncoder::from_seed(7, m, d).unwrap();
    let cfg = PredictConfig::default();
    let mut worst: f64 = 0.0;
    for draw in 0..10u64 {
        let mut r = rng::prng(1000 + draw);
        let token = unit_rows(&mut r, 1, d);
        let tokens = Matrix::from_rows(&vec![token.row(0).to_vec(); n]).unwrap();
        let images = unit_rows(&mut r, 5, d);
        let labels: Vec<usize> = (0..5).map(|i| i % n).collect();
        let batch = Batch { images: &images, labels: &labels };
        for method in [Method::FedTpg, Method::FedCoop] {
            let spec = ModelSpec { method, prompt_len: m, dim: d, heads };
            let params = rng::gaussian_vec(&mut r, spec.param_count(), 0.5);
            let model = spec.unflatten(&params).unwrap();
            let loss = loss_value(&model, batch, &tokens, &enc, &cfg, None).unwrap();
            worst = worst.max((loss - (n as f64).ln()).abs());
        }
    }
    outcome(worst <= LN_N_TOL, format!("10 draws x 2 models, max |loss - ln {n}| = {worst:.1e} (<= {LN_N_TOL:e})"))
}

// 3
fn centralized_equivalence() -> Outcome {
    let mut cfg = desk(Method::FedTpg, 0);
    cfg.world.num_datasets = 1;
    cfg.world.classes_per_dataset = 8;
    cfg.partition.classes_per_client = 4;
    cfg.fed.rounds = 50;
    cfg.fed.eval_every = 1;
    cfg.fed.participation_rate = 1.0;
    cfg.fed.local_steps = 1;
    let world = prepare(&cfg).unwrap();
    if world.partition.shards.len() != 1 {
        return outcome(false, format!("expected one client, got {}", world.partition.shards.len()));
    }
    let shard = &world.partition.shards[0];
    if shard.num_examples() > cfg.fed.batch_size {
        return outcome(false, "shard must fit one batch");
    }
    let fed = train_in_memory(&cfg, &world).unwrap();

    // Standalone full-batch heavy-ball SGD with per-round velocity reset.
    let spec = cfg.model_spec();
    let mut theta = spec.init(&world.encoder, cfg.seed).unwrap().flatten();
    let batch = Batch { images: &shard.images, labels: &shard.labels };
    let mut mismatched = Vec::new();
    for r in 0..cfg.fed.rounds {
        let lr = cfg.fed.lr * 0.5 * (1.0 + (std::f64::consts::PI * r as f64 / cfg.fed.rounds as f64).cos());
        if lr.to_bits() != cosine_lr(r, cfg.fed.rounds, cfg.fed.lr).unwrap().to_bits() {
            mismatched.push(format!("lr@{r}"));
        }
        let model = spec.unflatten(&theta).unwrap();
        let (loss, grad) = loss_and_grad(&model, batch, &shard.tokens, &world.encoder, &cfg.predict, None).unwrap();
        let mut velocity = vec![0.0; theta.len()];
        for ((p, g), v) in theta.iter_mut().zip(&grad).zip(velocity.iter_mut()) {
            let g = g + cfg.fed.weight_decay * *p;
            *v = cfg.fed.momentum * *v + g;
            *p -= lr * *v;
        }
        let model = spec.unflatten(&theta).unwrap();
        let s = eval_protocol(ModelSet::Shared(&model), &world.plan, &world.encoder, &cfg.predict, cfg.eval.hm_terms).unwrap();
        let rec = &fed.records[r];
        let same = rec.round == r + 1
            && rec.train_loss.to_bits() == loss.to_bits()
            && [rec.local_acc, rec.base_acc, rec.new_acc, rec.hm]
                .iter()
                .zip([s.local, s.base, s.new, s.hm])
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatched.push(format!("round {}", r + 1));
        }
    }
    let final_same = match &fed.trained {
        Trained::Global(m) => ModelSnapshot::new(Method::FedTpg, m.flatten()).bitwise_eq(&ModelSnapshot::new(Method::FedTpg, theta)),
        Trained::PerClient(_) => false,
    };
    outcome(
        mismatched.is_empty() && final_same,
        format!("50 rounds, per-round loss/metrics and final parameters bitwise equal: {}", if mismatched.is_empty() && final_same { "yes".to_string() } else { format!("no {mismatched:?}") }),
    )
}

// 4
fn aggregation_laws() -> Outcome {
    let mut r = rng::prng(4);
    let mut failures = 0;
    for trial in 0..1000 {
        let k = r.random_range(1..=9usize);
        let len = r.random_range(1..=16usize);
        let scale = 10f64.powi(r.random_range(-6..=6));
        let ups: Vec<(usize, ModelSnapshot)> = (0..k)
            .map(|i| (i, ModelSnapshot::new(Method::FedTpg, rng::gaussian_vec(&mut r, len, scale))))
            .collect();
        let mean = aggregate(&ups).unwrap();
        let mut shuffled = ups.clone();
        shuffled.shuffle(&mut r);
        let perm_ok = aggregate(&shuffled).unwrap().bitwise_eq(&mean);
        let same: Vec<_> = (0..k).map(|i| (i, ups[0].1.clone())).collect();
        let idem_ok = aggregate(&same).unwrap().bitwise_eq(&ups[0].1);
        let two = aggregate(&ups[..1].iter().cloned().chain([(k, ups[k - 1].1.clone())]).collect::<Vec<_>>()).unwrap();
        let want: Vec<f64> = ups[0].1.values.iter().zip(&ups[k - 1].1.values).map(|(a, b)| (a + b) / 2.0).collect();
        let two_ok = two.bitwise_eq(&ModelSnapshot::new(Method::FedTpg, want));
        if !(perm_ok && idem_ok && two_ok) {
            failures += 1;
            eprintln!("aggregation trial {trial}: perm {perm_ok} idem {idem_ok} two {two_ok}");
        }
    }
    outcome(failures == 0, format!("1000 trials, {failures} violations of permutation/idempotence/mean-of-two"))
}

// 5
fn harmonic_means() -> Outcome {
    let rows = [([76.72, 70.52, 75.78], 74.24), ([83.67, 71.49, 71.15], 75.01)];
    let mut detail = Vec::new();
    let mut pass = true;
    for (v, want) in rows {
        let got = harmonic_mean(&v).unwrap();
        pass &= (got - want).abs() <= HM_TOL;
        detail.push(format!("{v:?} -> {got:.4} (want {want} ± {HM_TOL})"));
    }
    outcome(pass, detail.join("; "))
}

// 6
fn partition_counts() -> Outcome {
    let mut detail = Vec::new();
    let mut pass = true;
    for (datasets, classes, n, want) in [(6, 200, 20, 30), (7, 170, 5, 119)] {
        let mut cfg = Preset::Desk.config();
        cfg.world.dim = 8;
        cfg.world.prompt_len = 2;
        cfg.world.num_datasets = datasets;
        cfg.world.classes_per_dataset = classes;
        cfg.world.train_shots = 1;
        cfg.world.eval_images_per_class = 1;
        let store = runner::load_world(&cfg).unwrap();
        let part = build_shards(&store, &PartitionConfig { classes_per_client: n, shots: 1, ..Default::default() }, 0).unwrap();
        let mut seen = HashSet::new();
        let mut disjoint = true;
        for s in &part.shards {
            disjoint &= s.class_ids.len() == n;
            for &c in &s.class_ids {
                disjoint &= seen.insert(c);
                disjoint &= store.class(c).map(|r| r.split.as_str() == "base").unwrap_or(false);
            }
        }
        for &c in &part.unassigned {
            disjoint &= !seen.contains(&c);
        }
        pass &= part.shards.len() == want && disjoint;
        detail.push(format!("{datasets}x{classes} n={n}: {} clients (want {want}), disjoint {disjoint}", part.shards.len()));
    }
    outcome(pass, detail.join("; "))
}

// 7
fn noiseless_zero_shot() -> Outcome {
    let mut cfg = desk(Method::ZeroShot, 0);
    cfg.world.noise_sigma = 0.0;
    let world = prepare(&cfg).unwrap();
    let out = train_in_memory(&cfg, &world).unwrap();
    let r = &out.records[0];
    outcome(
        r.local_acc == 1.0 && r.base_acc == 1.0 && r.new_acc == 1.0,
        format!("local {} base {} new {}", r.local_acc, r.base_acc, r.new_acc),
    )
}

struct DeskRuns {
    zeroshot_base: f64,
    fedtpg: Vec<(f64, f64)>,
    fedcoop_new: Vec<f64>,
    fedtpg_secs: f64,
    clustering: Vec<(f64, f64)>,
}

fn desk_runs() -> DeskRuns {
    std::env::set_var(fedtpg::fedcore::THREADS_ENV, "1");
    let mut runs = DeskRuns { zeroshot_base: 0.0, fedtpg: vec![], fedcoop_new: vec![], fedtpg_secs: 0.0, clustering: vec![] };
    for seed in 0..3 {
        let cfg = desk(Method::FedTpg, seed);
        let world = prepare(&cfg).unwrap();
        if seed == 0 {
            let zs = train_in_memory(&desk(Method::ZeroShot, 0), &world).unwrap();
            runs.zeroshot_base = zs.final_scores.base;
        }
        let start = Instant::now();
        let tpg = train_in_memory(&cfg, &world).unwrap();
        if seed == 0 {
            runs.fedtpg_secs = start.elapsed().as_secs_f64();
        }
        runs.fedtpg.push((tpg.final_scores.base, tpg.final_scores.new));
        let coop = train_in_memory(&desk(Method::FedCoop, seed), &world).unwrap();
        runs.fedcoop_new.push(coop.final_scores.new);
        let points = prompt_points(Method::FedTpg, tpg.trained.model_set(), &world.store, &world.plan).unwrap();
        runs.clustering.push(cluster_distances(&points));
    }
    std::env::remove_var(fedtpg::fedcore::THREADS_ENV);
    runs
}

/// Mean pairwise distance in 3-component PCA space between points of the
/// same dataset, and between points of different datasets.
fn cluster_distances(points: &[fedtpg::eval::PromptPoint]) -> (f64, f64) {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.vector.clone()).collect();
    let pca = pca_project(&Matrix::from_rows(&rows).unwrap(), 3).unwrap();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let dist = pca.coords.row(i).iter().zip(pca.coords.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if points[i].dataset == points[j].dataset {
                intra += dist;
                ni += 1;
            } else {
                inter += dist;
                nx += 1;
            }
        }
    }
    (intra / ni as f64, inter / nx as f64)
}

fn expected_margin() -> (f64, f64) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("expected/desk_preset.json");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    (v["base_margin"].as_f64().unwrap(), v["margin_tolerance"].as_f64().unwrap())
}

// 8
fn learning_signal(runs: &DeskRuns) -> Outcome {
    let (margin, tol) = expected_margin();
    let got = runs.fedtpg[0].0 - runs.zeroshot_base;
    outcome(
        got > 0.0 && got >= margin - tol && runs.fedtpg_secs < DESK_BUDGET_SECS,
        format!(
            "seed 0 base: fedtpg {:.6} - zeroshot {:.6} = {got:.6} (frozen margin {margin} ± {tol:e}); fedtpg run {:.1}s single-threaded",
            runs.fedtpg[0].0, runs.zeroshot_base, runs.fedtpg_secs
        ),
    )
}

// 9
fn new_class_ordering(runs: &DeskRuns) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (seed, ((_, tpg_new), coop_new)) in runs.fedtpg.iter().zip(&runs.fedcoop_new).enumerate() {
        pass &= *tpg_new >= coop_new - NEW_ORDER_SLACK;
        detail.push(format!("seed {seed}: fedtpg new {tpg_new:.4} vs fedcoop new {coop_new:.4}"));
    }
    outcome(pass, format!("{} (slack {NEW_ORDER_SLACK})", detail.join("; ")))
}

// 10
fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut configs: Vec<ExperimentConfig> = Method::ALL.iter().map(|&m| desk(m, 0)).collect();
    let mut full = Preset::Full.config();
    full.fed.rounds = 2;
    configs.push(full);
    let mut differing = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let mut c = cfg.clone();
            c.out_dir = dir.path().join(format!("{i}_{rep}"));
            runner::train(&c).unwrap();
            let mut files: Vec<_> = fs::read_dir(&c.out_dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "snap"))
                .collect();
            files.sort();
            let named: Vec<(String, Vec<u8>)> = files
                .iter()
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
                .collect();
            outputs.push(named);
        }
        if outputs[0] != outputs[1] {
            differing.push(format!("{} ({})", cfg.method, cfg.world.dim));
        }
    }
    outcome(
        differing.is_empty(),
        format!("desk x 5 methods + full (2 rounds): metrics and snapshots byte-identical; differing {differing:?}"),
    )
}

// 11
fn invariances() -> Outcome {
    let cfg = desk(Method::FedTpg, 0);
    let world = prepare(&cfg).unwrap();
    let trained = train_in_memory(&cfg, &world).unwrap();
    let Trained::Global(model) = &trained.trained else { unreachable!() };
    let mut r = rng::prng(11);
    let mut worst: f64 = 0.0;
    let tasks = world.plan.local.iter().chain(&world.plan.base).chain(&world.plan.new);
    for task in tasks.clone() {
        let p = model.prompts(&task.tokens).unwrap();
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..task.tokens.rows()).collect();
            order.shuffle(&mut r);
            let q = model.prompts(&task.tokens.select_rows(&order)).unwrap();
            worst = worst.max(p.data().iter().zip(q.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    let mut changed = 0usize;
    let mut total = 0usize;
    let fixed = PromptModel::Fixed(world.encoder.handcrafted_prompts().clone());
    for task in tasks {
        for m in [model, &fixed] {
            let base = predict(m, task, &world.encoder, &cfg.predict).unwrap();
            for tau in [1e-4, 1e-3, 0.1, 1.0, 100.0] {
                let other = predict(m, task, &world.encoder, &PredictConfig { temperature: tau }).unwrap();
                changed += base.iter().zip(&other).filter(|(a, b)| a != b).count();
                total += base.len();
            }
        }
    }
    outcome(
        worst <= INVARIANCE_TOL && changed == 0,
        format!("token permutation max |dP| {worst:.1e} (<= {INVARIANCE_TOL:e}); {changed} of {total} predictions changed under tau rescaling"),
    )
}

// 12
fn pca_clustering(runs: &DeskRuns) -> Outcome {
    let pass = runs.clustering.iter().all(|(intra, inter)| intra < inter);
    let detail: Vec<String> = runs
        .clustering
        .iter()
        .enumerate()
        .map(|(s, (a, b))| format!("seed {s}: intra {a:.4} vs inter {b:.4}"))
        .collect();
    outcome(pass, detail.join("; "))
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient correctness", gradient_correctness()),
        (2, "degenerate-loss identity", degenerate_loss()),
        (3, "centralized equivalence", centralized_equivalence()),
        (4, "aggregation laws", aggregation_laws()),
        (5, "harmonic-mean reproduction", harmonic_means()),
        (6, "partition counts", partition_counts()),
        (7, "noiseless zero-shot", noiseless_zero_shot()),
    ];
    let runs = desk_runs();
    results.push((8, "learning signal", learning_signal(&runs)));
    results.push((9, "new-class ordering", new_class_ordering(&runs)));
    results.push((10, "determinism", determinism()));
    results.push((11, "prompt-generation invariances", invariances()));
    results.push((12, "PCA context clustering", pca_clustering(&runs)));
    results.sort_by_key(|(id, _, _)| *id);

    let mut unexpected = Vec::new();
    for (id, name, o) in &results {
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if KNOWN_FAILING.contains(id) { " [known failing]" } else { "" };
        println!("criterion {id:>2} {status} {name}{note}: {}", o.detail);
        if o.pass == KNOWN_FAILING.contains(id) {
            unexpected.push(*id);
        }
    }
    assert!(
        unexpected.is_empty(),
        "criteria {unexpected:?} changed status: fix the failure or update KNOWN_FAILING"
    );
}
