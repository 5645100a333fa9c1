//! The acceptance gate: one test per release criterion, each printing an
//! `ACCEPTANCE PASS` line with the measured numbers once its assertions hold
//! (visible under `cargo test -- --nocapture`).
//!
//! Library-level properties are judged against independent oracles: central
//! finite differences, exhaustive enumeration, closed forms and golden
//! hashes. The end-to-end criteria drive the real `advmv` binary over the
//! synthetic dataset with a configuration whose thresholds were calibrated
//! once against the pinned generator seed and then frozen; the whole
//! pipeline is seeded and deterministic, so the measured numbers are stable
//! across reruns.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use adv_multvae::attack::{attack, extract_latents, RowView};
use adv_multvae::binio::fnv1a64;
use adv_multvae::data::{
    assign_folds, eval_split, fold_split, parse_interactions, parse_labels, InteractionMatrix,
};
use adv_multvae::experiment::{
    cmd_attack, cmd_genseed, cmd_preprocess, cmd_run, cmd_sweep, EvaluationReport,
    ExperimentConfig, ReportFamily,
};
use adv_multvae::gradcheck;
use adv_multvae::metrics::{self, ConfusionCounts, RecallDenominator};
use adv_multvae::model::{self, ModelIds, ModelParameters};
use adv_multvae::rng::{SeedStream, StreamKind};
use adv_multvae::stats::{mcnemar, wilcoxon_signed_rank};
use adv_multvae::tensor::Tensor;
use adv_multvae::{checkpoint, train};
use rand::Rng;

// Finite-difference step and tolerances.
const STEP: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-4;
const COMPOSITE_TOL: f64 = 1e-3;

// End-to-end thresholds, frozen at calibration time.
const MIN_BASE_ATTACK_BACC: f64 = 0.70;
const MIN_ATTACK_DROP: f64 = 0.10;
const MIN_NDCG_RATIO: f64 = 0.90;
const SWEEP_CONSISTENCY_SLACK: f64 = 0.05;

fn pass(line: String) {
    println!("ACCEPTANCE PASS: {line}");
}

// ── deterministic inputs ────────────────────────────────────────────────

/// Pseudo-random tensor in `(-1.5, 1.5)`, keyed by `salt` only.
fn fill(rows: usize, cols: usize, salt: u64) -> Tensor<f64> {
    let mut rng = SeedStream::new(418_652_289).derive(StreamKind::Synthetic, &[salt]);
    let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Same, bounded away from zero (relu kinks, log domains, nonzero rows).
fn fill_away_from_zero(rows: usize, cols: usize, salt: u64) -> Tensor<f64> {
    fill(rows, cols, salt).map(|v| v.signum() * (0.2 + v.abs()))
}

fn tensors_bit_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ── driving the binary ──────────────────────────────────────────────────

fn bin_path() -> &'static str {
    env!("CARGO_BIN_EXE_advmv")
}

/// Run one verb in `dir` against the named configuration; return the exit
/// code and captured standard error.
fn advmv_status(dir: &Path, config: &str, args: &[&str]) -> (i32, String) {
    let out = Command::new(bin_path())
        .current_dir(dir)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("spawn advmv");
    (out.status.code().expect("exit code"), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Run one verb against `dir/exp.toml`, expecting success.
fn advmv_ok(dir: &Path, args: &[&str]) {
    let (code, stderr) = advmv_status(dir, "exp.toml", args);
    assert_eq!(code, 0, "advmv {args:?} failed:\n{stderr}");
}

/// `(relative path, content hash)` of every file under `root`, sorted.
fn tree_digest(root: &Path) -> Vec<(String, u64)> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, u64)>) {
        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fnv1a64(&std::fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

// ── shared end-to-end pipeline ──────────────────────────────────────────

/// The frozen end-to-end configuration. The generator settings are the
/// `genseed` defaults (400 users x 60 items); model and training settings
/// were calibrated once on that dataset and must not drift, because the
/// threshold assertions below were measured under exactly these values.
const E2E_CONFIG: &str = "\
seed = 42
folds = 5
out = \"out\"

[dataset]
name = \"synthetic\"

[model]
enc_hidden = [64]
latent = 16
adv_hidden = [32]
beta = 0.1
lambda = 2.0

[train]
epochs = 300
batch_size = 128
weight_decay = 0.0001
validate_every = 1
selection = \"last-epoch\"

[attack]
epochs = 400

[sweep]
lambdas = [0.0, 0.5, 1.0, 2.0, 4.0]
";

struct Pipeline {
    dir: PathBuf,
    report: EvaluationReport,
}

static PIPELINE: OnceLock<Pipeline> = OnceLock::new();

/// Build the shared synthetic experiment once: every verb of the real
/// binary, in order, in a scratch directory owned by this test target.
fn pipeline() -> &'static Pipeline {
    PIPELINE.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-e2e");
        if dir.exists() {
            std::fs::remove_dir_all(&dir).expect("clear stale pipeline dir");
        }
        std::fs::create_dir_all(&dir).expect("create pipeline dir");
        std::fs::write(dir.join("exp.toml"), E2E_CONFIG).expect("write configuration");
        for verb in ["genseed", "preprocess", "run", "attack", "sweep", "report"] {
            advmv_ok(&dir, &[verb]);
        }
        let report = EvaluationReport::read(&dir.join("out").join("report").join("summary.toml"))
            .expect("structured report");
        Pipeline { dir, report }
    })
}

/// Parse a configuration and point its paths into `dir`.
fn config_in(dir: &Path, body: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml_str(body).expect("valid test configuration");
    cfg.dataset.interactions = dir.join("interactions.dat");
    cfg.dataset.labels = dir.join("users.dat");
    cfg.out = dir.join("out");
    cfg
}

/// Generate a synthetic dataset and preprocess it through the library.
fn synthetic_matrix(dir: &Path, body: &str) -> (ExperimentConfig, InteractionMatrix) {
    let cfg = config_in(dir, body);
    cmd_genseed(&cfg).expect("genseed");
    let inter = std::fs::read_to_string(&cfg.dataset.interactions).unwrap();
    let labels = std::fs::read_to_string(&cfg.dataset.labels).unwrap();
    let interactions = parse_interactions(&inter, &cfg.interaction_format()).unwrap();
    let labels = parse_labels(&labels, &cfg.label_format()).unwrap();
    let matrix = InteractionMatrix::build(
        &interactions,
        &labels,
        cfg.n_classes(),
        &cfg.preprocess_config(),
        &cfg.seeds(),
    )
    .unwrap();
    (cfg, matrix)
}

/// Small, fast experiment for library-level pipeline checks.
const TINY_CONFIG: &str = "\
seed = 7
folds = 3
[preprocess]
min_user_interactions = 2
min_item_interactions = 2
[model]
enc_hidden = [8]
latent = 4
lambda = 1.0
[train]
epochs = 3
batch_size = 64
validate_every = 1
[attack]
n_heads = 2
epochs = 4
[sweep]
lambdas = [1.0]
[synthetic]
users = 40
items = 16
shared_items = 4
";

// ── autodiff against central differences ────────────────────────────────

#[test]
fn autodiff_primitives_match_central_differences() {
    // Each case reduces the op's output to a scalar through a fixed input
    // weighting, so row/column mix-ups cannot cancel. The gradient reversal
    // op is deliberately absent: its backward pass is not the derivative of
    // its forward pass (that is its purpose) and is pinned by its exact
    // `-lambda` relation in its own test below. Stochastic ops re-derive
    // their draws from fixed keys, so every perturbed evaluation sees the
    // same mask and noise.
    let stream = SeedStream::new(52_119);
    let mut worst: (f64, &str) = (0.0, "none");
    let mut run = |name: &'static str, inputs: &[Tensor<f64>], build: &dyn Fn(&mut adv_multvae::tape::Tape<f64>, &[adv_multvae::tape::NodeId]) -> adv_multvae::Result<adv_multvae::tape::NodeId>| {
        let r = gradcheck::check(inputs, STEP, build).unwrap();
        assert!(r.checked > 0, "{name}: nothing checked");
        assert!(r.within(PRIMITIVE_TOL), "{name}: max rel err {} at {:?}", r.max_rel_err, r.worst);
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name);
        }
    };

    run("matmul", &[fill(3, 4, 1), fill(4, 2, 2)], &|t, ids| {
        let c = t.matmul(ids[0], ids[1])?;
        let w = t.input(fill(3, 2, 3));
        let wc = t.mul(c, w)?;
        Ok(t.sum_all(wc))
    });
    for (name, salt) in [("add", 4u64), ("sub", 5), ("mul", 6)] {
        run(name, &[fill(2, 3, salt), fill(2, 3, salt + 10)], &move |t, ids| {
            let c = match name {
                "add" => t.add(ids[0], ids[1])?,
                "sub" => t.sub(ids[0], ids[1])?,
                _ => t.mul(ids[0], ids[1])?,
            };
            let w = t.input(fill(2, 3, salt + 20));
            let wc = t.mul(c, w)?;
            Ok(t.sum_all(wc))
        });
    }
    run("add_row", &[fill(4, 3, 7), fill(1, 3, 8)], &|t, ids| {
        let c = t.add_row(ids[0], ids[1])?;
        let w = t.input(fill(4, 3, 9));
        let wc = t.mul(c, w)?;
        Ok(t.sum_all(wc))
    });
    run("scale+add_scalar", &[fill(2, 4, 10)], &|t, ids| {
        let s = t.scale(ids[0], -1.7);
        let a = t.add_scalar(s, 0.9);
        let w = t.input(fill(2, 4, 11));
        let wa = t.mul(a, w)?;
        Ok(t.sum_all(wa))
    });
    for (name, salt) in [("tanh", 12u64), ("relu", 13), ("exp", 14), ("log", 15)] {
        let x = match name {
            "relu" => fill_away_from_zero(3, 3, salt),
            "log" => fill(3, 3, salt).map(|v| 0.3 + v.abs()),
            _ => fill(3, 3, salt),
        };
        run(name, &[x], &move |t, ids| {
            let y = match name {
                "tanh" => t.tanh(ids[0]),
                "relu" => t.relu(ids[0]),
                "exp" => t.exp(ids[0]),
                _ => t.log(ids[0])?,
            };
            let w = t.input(fill(3, 3, salt + 20));
            let wy = t.mul(y, w)?;
            Ok(t.sum_all(wy))
        });
    }
    let dropout_stream = stream.clone();
    run("dropout", &[fill(3, 5, 16)], &move |t, ids| {
        let mut rng = dropout_stream.derive(StreamKind::Dropout, &[0]);
        let y = t.dropout(ids[0], 0.4, true, &mut rng)?;
        let w = t.input(fill(3, 5, 17));
        let wy = t.mul(y, w)?;
        Ok(t.sum_all(wy))
    });
    run("l2_normalize_rows", &[fill_away_from_zero(3, 4, 18)], &|t, ids| {
        let y = t.l2_normalize_rows(ids[0])?;
        let w = t.input(fill(3, 4, 19));
        let wy = t.mul(y, w)?;
        Ok(t.sum_all(wy))
    });
    for (name, salt) in [("softmax_rows", 20u64), ("log_softmax_rows", 21)] {
        run(name, &[fill(3, 5, salt)], &move |t, ids| {
            let y = if name == "softmax_rows" {
                t.softmax_rows(ids[0])
            } else {
                t.log_softmax_rows(ids[0])
            };
            let w = t.input(fill(3, 5, salt + 20));
            let wy = t.mul(y, w)?;
            Ok(t.sum_all(wy))
        });
    }
    run("slice_cols+sum_all", &[fill(3, 6, 22)], &|t, ids| {
        let left = t.slice_cols(ids[0], 0, 2)?;
        let right = t.slice_cols(ids[0], 2, 6)?;
        let ls = t.sum_all(left);
        let rs = t.sum_all(right);
        let l3 = t.scale(ls, 3.0);
        t.add(l3, rs)
    });
    let noise_stream = stream.clone();
    run(
        "gaussian_sample",
        &[fill(2, 3, 23), fill(2, 3, 24).map(|v| v * 0.5)],
        &move |t, ids| {
            let mut rng = noise_stream.derive(StreamKind::LatentNoise, &[0]);
            let z = t.gaussian_sample(ids[0], ids[1], &mut rng)?;
            let w = t.input(fill(2, 3, 25));
            let wz = t.mul(z, w)?;
            Ok(t.sum_all(wz))
        },
    );

    pass(format!(
        "autodiff primitives match central differences (worst rel err {:.2e} in {}, tol {PRIMITIVE_TOL:.0e})",
        worst.0, worst.1
    ));
}

#[test]
fn composite_objective_matches_central_differences() {
    // A deterministic 0/1 interaction batch: 4 users x 8 items.
    let mut x = Tensor::zeros(4, 8);
    for r in 0..4 {
        for c in 0..8 {
            if (r + 2 * c) % 3 == 0 || c == r {
                x.set(r, c, 1.0);
            }
        }
    }
    let seeds = SeedStream::new(8_391);

    // Plain objective (reconstruction + weighted KL): conservative in every
    // parameter, so finite differences check all of them at once.
    let cfg = ExperimentConfig::from_toml_str(
        "[model]\nenc_hidden = [5]\nlatent = 3\nbeta = 0.3\n",
    )
    .unwrap()
    .model_config(8, false, 0.0);
    let params = ModelParameters::<f64>::init(cfg.clone(), &seeds).unwrap();
    let inputs: Vec<Tensor<f64>> = params.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
    let plain_cfg = cfg.clone();
    let xb = x.clone();
    let r = gradcheck::check(&inputs, STEP, move |tape, ids| {
        let ids = ModelIds::split(&plain_cfg, ids)?;
        Ok(model::total_loss(tape, &ids, &plain_cfg, &xb, None, None)?.total)
    })
    .unwrap();
    assert!(r.within(COMPOSITE_TOL), "plain objective: max rel err {}", r.max_rel_err);
    let plain_err = r.max_rel_err;

    // Adversarial objective: the reversal makes the total non-conservative
    // in the encoder (checked via the exact -lambda relation instead), but
    // the head's own parameters sit above the reversal and must pass plain
    // finite differences, cross-entropy term and all.
    let cfg = ExperimentConfig::from_toml_str(
        "[model]\nenc_hidden = [5]\nlatent = 3\nadv_hidden = [4]\nbeta = 0.3\n",
    )
    .unwrap()
    .model_config(8, true, 0.7);
    let params = ModelParameters::<f64>::init(cfg.clone(), &seeds).unwrap();
    let head_inputs: Vec<Tensor<f64>> =
        params.adversary.iter().flat_map(|l| [l.w.clone(), l.b.clone()]).collect();
    let one_hot = model::one_hot::<f64>(&[0, 1, 0, 1], 2).unwrap();
    let adv_cfg = cfg.clone();
    let frozen = params.clone();
    let xb = x.clone();
    let r = gradcheck::check(&head_inputs, STEP, move |tape, ids| {
        let body = |layers: &[model::Layer<f64>], tape: &mut adv_multvae::tape::Tape<f64>| {
            layers
                .iter()
                .map(|l| (tape.input(l.w.clone()), tape.input(l.b.clone())))
                .collect::<Vec<_>>()
        };
        let ids = ModelIds {
            encoder: body(&frozen.encoder, tape),
            decoder: body(&frozen.decoder, tape),
            adversary: ids.chunks(2).map(|c| (c[0], c[1])).collect(),
        };
        let graph = model::total_loss(tape, &ids, &adv_cfg, &xb, Some(&one_hot), None)?;
        assert!(graph.adv_ce.is_some(), "labeled batch must activate the adversarial term");
        Ok(graph.total)
    })
    .unwrap();
    assert!(r.within(COMPOSITE_TOL), "adversarial head: max rel err {}", r.max_rel_err);

    pass(format!(
        "composite objective matches central differences (plain {:.2e}, adversary head {:.2e}, tol {COMPOSITE_TOL:.0e})",
        plain_err, r.max_rel_err
    ));
}

#[test]
fn gradient_reversal_identity_negation_and_zero_scale_neutrality() {
    use adv_multvae::tape::Tape;

    // Forward pass: bit-identity.
    let x = fill(3, 4, 30);
    let mut tape = Tape::<f64>::new();
    let xi = tape.param(x.clone());
    let y = tape.grl(xi, 1.7).unwrap();
    assert!(tensors_bit_equal(tape.value(y), &x), "reversal must not touch forward values");

    // Backward pass: exactly `-lambda` times the upstream gradient.
    let w = fill(3, 4, 31);
    let wi = tape.input(w.clone());
    let wy = tape.mul(y, wi).unwrap();
    let loss = tape.sum_all(wy);
    tape.backward(loss).unwrap();
    let g = tape.grad(xi).expect("reversal input gradient");
    for (gv, wv) in g.data().iter().zip(w.data()) {
        assert_eq!(gv.to_bits(), (-1.7 * wv).to_bits(), "gradient must be -lambda * upstream");
    }

    // Zero scale: a full adversarial training run must leave the shared
    // parameters bit-identical to the plain model's under the same seed
    // (the head still trains, it just cannot push back).
    let dir = tempfile::tempdir().unwrap();
    let (cfg, matrix) = synthetic_matrix(dir.path(), TINY_CONFIG);
    let folds = assign_folds(matrix.n_users(), cfg.folds, &cfg.seeds()).unwrap();
    let split = fold_split(&matrix, &folds, 0, &cfg.seeds()).unwrap();
    let plain = train::train::<f64>(
        &matrix,
        &split,
        &cfg.model_config(matrix.n_items(), false, 0.0),
        &cfg.train_config(),
        &cfg.seeds(),
    )
    .unwrap();
    let adv = train::train::<f64>(
        &matrix,
        &split,
        &cfg.model_config(matrix.n_items(), true, 0.0),
        &cfg.train_config(),
        &cfg.seeds(),
    )
    .unwrap();
    let shared = plain.last.params.named_tensors().len();
    for ((name, p), (_, a)) in plain
        .last
        .params
        .named_tensors()
        .iter()
        .zip(adv.last.params.named_tensors().iter().take(shared))
    {
        assert!(tensors_bit_equal(p, a), "{name} drifted under a zero reversal scale");
    }
    assert_eq!(plain.last.val_ndcg.to_bits(), adv.last.val_ndcg.to_bits());
    let head_init = ModelParameters::<f64>::init(
        cfg.model_config(matrix.n_items(), true, 0.0),
        &cfg.seeds(),
    )
    .unwrap();
    assert!(
        !tensors_bit_equal(&adv.last.params.adversary[0].w, &head_init.adversary[0].w),
        "the adversary head must keep training at zero scale"
    );

    pass(
        "gradient reversal: forward bit-identity, backward -lambda * upstream, \
         zero scale bit-equals the plain model"
            .into(),
    );
}

// ── losses and metrics against closed forms ─────────────────────────────

#[test]
fn loss_terms_match_closed_forms() {
    use adv_multvae::tape::Tape;
    let value = |build: &dyn Fn(&mut Tape<f64>) -> adv_multvae::tape::NodeId| {
        let mut tape = Tape::<f64>::new();
        let node = build(&mut tape);
        tape.value(node).at(0, 0)
    };

    // KL to the standard normal: zero exactly at the prior, positive
    // everywhere else.
    let at_prior = value(&|t| {
        let mu = t.input(Tensor::zeros(3, 4));
        let lv = t.input(Tensor::zeros(3, 4));
        model::gaussian_kl(t, mu, lv).unwrap()
    });
    assert_eq!(at_prior, 0.0, "KL at the prior must be exactly zero");
    for salt in 40u64..60 {
        let kl = value(&|t| {
            let mu = t.input(fill(3, 4, salt));
            let lv = t.input(fill(3, 4, salt + 100).map(|v| v * 0.5));
            model::gaussian_kl(t, mu, lv).unwrap()
        });
        assert!(kl > 0.0, "KL must be positive away from the prior, got {kl}");
    }

    // Uniform logits, one-hot targets: multinomial NLL is ln(n_items).
    let nll = value(&|t| {
        let logits = t.input(Tensor::full(3, 7, 0.2));
        let targets = t.input(model::one_hot::<f64>(&[0, 3, 6], 7).unwrap());
        model::multinomial_nll(t, logits, targets).unwrap()
    });
    assert!((nll - (7f64).ln()).abs() < 1e-12, "uniform one-hot NLL {nll} != ln 7");

    // Uniform binary logits: cross-entropy is ln 2.
    let ce = value(&|t| {
        let logits = t.input(Tensor::full(4, 2, -0.7));
        let oh = t.input(model::one_hot::<f64>(&[0, 1, 1, 0], 2).unwrap());
        model::softmax_cross_entropy(t, logits, oh).unwrap()
    });
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-12, "uniform binary CE {ce} != ln 2");

    pass(format!(
        "loss closed forms: KL(prior) = 0 and KL > 0 elsewhere, uniform NLL = ln 7 ({nll:.12}), uniform CE = ln 2 ({ce:.12})"
    ));
}

#[test]
fn ranking_metrics_match_brute_force_enumeration() {
    fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let first = rest.remove(i);
            for mut tail in permutations(&rest) {
                let mut perm = vec![first];
                perm.append(&mut tail);
                out.push(perm);
            }
        }
        out
    }
    // Independent formulas, written from the definitions.
    fn naive_ndcg(rec: &[u32], targets: &HashSet<u32>, k: usize) -> f64 {
        let dcg: f64 = rec
            .iter()
            .take(k)
            .enumerate()
            .filter(|(_, i)| targets.contains(i))
            .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..targets.len().min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
        dcg / ideal
    }
    fn naive_recall(rec: &[u32], targets: &HashSet<u32>, k: usize) -> f64 {
        let hits = rec.iter().take(k).filter(|i| targets.contains(i)).count();
        hits as f64 / k.min(targets.len()) as f64
    }

    let mut cases = 0usize;
    for n in 1..=5usize {
        let items: Vec<u32> = (0..n as u32).collect();
        for rec in permutations(&items) {
            for mask in 1u32..(1 << n) {
                let targets: HashSet<u32> =
                    (0..n as u32).filter(|i| mask & (1 << i) != 0).collect();
                for k in 1..=n {
                    let ndcg = metrics::ndcg_at_k(&rec, &targets, k).unwrap();
                    let recall =
                        metrics::recall_at_k(&rec, &targets, k, RecallDenominator::CappedAtK)
                            .unwrap();
                    assert!(
                        (ndcg - naive_ndcg(&rec, &targets, k)).abs() < 1e-12,
                        "ndcg rec {rec:?} targets {targets:?} k {k}"
                    );
                    assert!(
                        (recall - naive_recall(&rec, &targets, k)).abs() < 1e-12,
                        "recall rec {rec:?} targets {targets:?} k {k}"
                    );
                    cases += 1;
                }
            }
        }
    }

    // Balanced accuracy closed forms: mean of per-class recalls.
    let mut c = ConfusionCounts::new(2);
    c.observe_all(&[0, 0, 1, 1], &[0, 0, 1, 0]).unwrap();
    assert_eq!(c.balanced_accuracy().unwrap(), 0.75);
    assert_eq!(c.accuracy().unwrap(), 0.75);
    let mut c = ConfusionCounts::new(3);
    c.observe_all(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
    assert_eq!(c.balanced_accuracy().unwrap(), 1.0);
    let mut c = ConfusionCounts::new(2);
    c.observe_all(&[0, 0, 0, 1], &[1, 1, 1, 0]).unwrap();
    assert_eq!(c.balanced_accuracy().unwrap(), 0.0);
    // Unbalanced classes: accuracy and balanced accuracy split apart.
    let mut c = ConfusionCounts::new(2);
    c.observe_all(&[0, 0, 0, 0, 1], &[0, 0, 0, 0, 0]).unwrap();
    assert_eq!(c.accuracy().unwrap(), 0.8);
    assert_eq!(c.balanced_accuracy().unwrap(), 0.5);

    pass(format!(
        "ranking metrics match brute force on all rankings of <= 5 items ({cases} cases) and balanced accuracy closed forms"
    ));
}

#[test]
fn significance_tests_match_enumeration_oracles() {
    // Wilcoxon: enumerate all 2^n sign assignments over midranks of |d|.
    fn midranks(diffs: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..diffs.len()).collect();
        order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).unwrap());
        let mut ranks = vec![0.0; diffs.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
                j += 1;
            }
            let avg = (i + j + 2) as f64 / 2.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    }
    let wilcoxon_cases: Vec<Vec<f64>> = vec![
        vec![0.2, -0.4, 0.6, 0.6, -0.1, 0.3, 0.9, -0.6, 0.05],
        vec![1.5, 2.5, -2.5, 3.0, 0.5],
        vec![-0.3, -0.2, -0.7],
        vec![0.1, 0.1, 0.1, -0.1, 0.2, -0.2, 0.3, 0.3, -0.3, 0.4],
    ];
    for diffs in &wilcoxon_cases {
        let n = diffs.len();
        let ranks = midranks(diffs);
        let w_obs: f64 =
            diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
        let mut at_most = 0u64;
        let mut at_least = 0u64;
        for mask in 0u32..(1 << n) {
            let w: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            if w <= w_obs + 1e-9 {
                at_most += 1;
            }
            if w >= w_obs - 1e-9 {
                at_least += 1;
            }
        }
        let total = (1u64 << n) as f64;
        let expect = (2.0 * (at_most as f64 / total).min(at_least as f64 / total)).min(1.0);
        let ys = vec![0.0; n];
        let r = wilcoxon_signed_rank(diffs, &ys, 0.05).unwrap();
        assert!(r.exact, "n = {n} must take the exact path");
        assert_eq!(r.n, n);
        assert!((r.p_value - expect).abs() < 1e-9, "p {} vs enumerated {expect}", r.p_value);
    }
    // Zero differences are dropped before ranking.
    let xs = [0.4, 0.7, 0.1, 0.9];
    let ys = [0.4, 0.2, 0.3, 0.4];
    let r = wilcoxon_signed_rank(&xs, &ys, 0.05).unwrap();
    assert_eq!(r.n, 3, "tied pairs must not be ranked");

    // McNemar: exact binomial tail against direct binomial coefficients for
    // every discordant split with b + c <= 12.
    fn binom(n: u64, k: u64) -> u128 {
        (1..=k as u128).fold(1u128, |acc, i| acc * (n as u128 - i + 1) / i)
    }
    let mut checked = 0usize;
    for total in 1u64..=12 {
        for a_only in 0..=total {
            let b_only = total - a_only;
            let mut a = vec![true; a_only as usize];
            let mut b = vec![false; a_only as usize];
            a.extend(vec![false; b_only as usize]);
            b.extend(vec![true; b_only as usize]);
            a.push(true); // one concordant pair keeps the inputs non-empty
            b.push(true);
            let r = mcnemar(&a, &b, 0.05).unwrap();
            assert!(r.exact);
            let m = a_only.min(b_only);
            let tail: u128 = (0..=m).map(|k| binom(total, k)).sum();
            let expect = (2.0 * tail as f64 / (1u128 << total) as f64).min(1.0);
            assert!((r.p_value - expect).abs() < 1e-12, "a {a_only} b {b_only}");
            let swapped = mcnemar(&b, &a, 0.05).unwrap();
            assert_eq!(swapped.p_value, r.p_value, "the test must be symmetric");
            checked += 1;
        }
    }

    pass(format!(
        "significance tests match enumeration ({} Wilcoxon sign enumerations, {checked} McNemar binomial tails)",
        wilcoxon_cases.len()
    ));
}

// ── data pipeline properties ────────────────────────────────────────────

#[test]
fn data_pipeline_splits_masks_and_reruns_hold() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, matrix) = synthetic_matrix(dir.path(), TINY_CONFIG);
    let n = matrix.n_users();
    let seeds = cfg.seeds();

    // Fold assignment: a partition of the users, reproducible under the
    // same seed, different under another.
    let folds = assign_folds(n, cfg.folds, &seeds).unwrap();
    let mut seen = HashSet::new();
    for fold in &folds {
        for &u in fold {
            assert!(u < n && seen.insert(u), "user {u} misplaced or duplicated");
        }
    }
    assert_eq!(seen.len(), n, "folds must cover every user");
    assert_eq!(folds, assign_folds(n, cfg.folds, &seeds).unwrap());
    assert_ne!(folds, assign_folds(n, cfg.folds, &SeedStream::new(cfg.seed + 1)).unwrap());

    for fold in 0..cfg.folds {
        let split = fold_split(&matrix, &folds, fold, &seeds).unwrap();
        // Disjoint roles.
        let val: HashSet<usize> = split.val.iter().copied().collect();
        let test: HashSet<usize> = split.test.iter().copied().collect();
        assert!(val.is_disjoint(&test));
        for &u in &split.train_base {
            assert!(!val.contains(&u) && !test.contains(&u), "train user {u} leaked");
        }
        assert_eq!(split.train_base.len() + val.len() + test.len(), n);
        // Upsampling balances the labeled training classes.
        let mut counts = vec![0usize; matrix.n_classes() as usize];
        for &u in &split.train {
            if let Some(c) = matrix.known_label(u) {
                counts[c as usize] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == counts[0]), "unbalanced after upsampling: {counts:?}");
        // The 80/20 interaction mask: a disjoint cover of the user's items,
        // stable across calls.
        for &u in split.test.iter().chain(&split.val) {
            let s = eval_split(&matrix, u, &seeds).unwrap();
            assert!(!s.input.is_empty() && !s.target.is_empty());
            let input: HashSet<u32> = s.input.iter().copied().collect();
            let target: HashSet<u32> = s.target.iter().copied().collect();
            assert!(input.is_disjoint(&target), "mask sides overlap for user {u}");
            let mut all: Vec<u32> = input.union(&target).copied().collect();
            all.sort_unstable();
            assert_eq!(all, matrix.row(u), "mask must cover the user's items");
            let expect_target =
                (matrix.row(u).len() - (matrix.row(u).len() as f64 * 0.8).ceil() as usize)
                    .clamp(1, matrix.row(u).len() - 1);
            assert_eq!(s.target.len(), expect_target);
            assert_eq!(s, eval_split(&matrix, u, &seeds).unwrap());
        }
    }

    // Preprocessing is a fixpoint: feeding a preprocessed dataset back
    // through the pipeline changes nothing.
    let mut again = Vec::new();
    let mut labels = std::collections::HashMap::new();
    for u in 0..n {
        for &i in matrix.row(u) {
            again.push(adv_multvae::data::Interaction {
                user: matrix.user_ids()[u],
                item: matrix.item_ids()[i as usize],
                weight: 1.0,
            });
        }
        if let Some(c) = matrix.known_label(u) {
            labels.insert(matrix.user_ids()[u], c);
        }
    }
    let rebuilt = InteractionMatrix::build(
        &again,
        &labels,
        matrix.n_classes(),
        &cfg.preprocess_config(),
        &seeds,
    )
    .unwrap();
    assert_eq!(rebuilt.fingerprint(), matrix.fingerprint(), "preprocess must be idempotent");

    // Training is bit-reproducible under the same seed.
    let split = fold_split(&matrix, &folds, 0, &seeds).unwrap();
    let model_cfg = cfg.model_config(matrix.n_items(), false, 0.0);
    let a = train::train::<f64>(&matrix, &split, &model_cfg, &cfg.train_config(), &seeds).unwrap();
    let b = train::train::<f64>(&matrix, &split, &model_cfg, &cfg.train_config(), &seeds).unwrap();
    for ((name, ta), (_, tb)) in a.last.params.named_tensors().iter().zip(b.last.params.named_tensors()) {
        assert!(tensors_bit_equal(ta, tb), "{name} differs between identical runs");
    }

    pass(format!(
        "pipeline properties hold: fold partition, class-balanced upsampling, disjoint 80/20 masks, \
         idempotent preprocessing and bit-reproducible training over {n} users"
    ));
}

// ── synthetic end to end ────────────────────────────────────────────────

#[test]
fn synthetic_attack_recovers_the_attribute_from_plain_latents() {
    let p = pipeline();
    assert_eq!(p.report.family.len(), 3, "three families must be reported");
    for f in &p.report.family {
        assert_eq!(f.fold_ndcg.len(), 5);
        assert_eq!(f.fold_attacker_bacc.len(), 5);
    }
    let best = p.report.family("multvae-best").expect("baseline row");
    let last = p.report.family("multvae-last").expect("last-epoch row");
    assert!(
        best.attacker_bacc >= MIN_BASE_ATTACK_BACC,
        "attacker on plain latents too weak: {:.4}",
        best.attacker_bacc
    );
    assert!(
        last.attacker_bacc >= MIN_BASE_ATTACK_BACC,
        "attacker on last-epoch latents too weak: {:.4}",
        last.attacker_bacc
    );
    pass(format!(
        "plain latents leak the attribute: attacker balanced accuracy {:.4} (best) / {:.4} (last) >= {MIN_BASE_ATTACK_BACC}",
        best.attacker_bacc, last.attacker_bacc
    ));
}

#[test]
fn adversarial_training_cuts_attack_within_ranking_budget() {
    let p = pipeline();
    let best = p.report.family("multvae-best").expect("baseline row");
    let last = p.report.family("multvae-last").expect("last-epoch row");
    let base_attack = best.attacker_bacc;
    let base_val_ndcg = metrics::mean(&last.fold_val_ndcg).unwrap();
    assert!(!p.report.sweep.is_empty(), "report must carry the sweep summary");
    let winner = p
        .report
        .sweep
        .iter()
        .filter(|s| s.lambda > 0.0)
        .map(|s| (s.lambda, base_attack - s.attacker_bacc, s.val_ndcg / base_val_ndcg))
        .find(|&(_, drop, ratio)| drop >= MIN_ATTACK_DROP && ratio >= MIN_NDCG_RATIO);
    let (lambda, drop, ratio) = winner.unwrap_or_else(|| {
        panic!(
            "no reversal scale cut the attack by {MIN_ATTACK_DROP} within the ranking budget; sweep: {:?}",
            p.report
                .sweep
                .iter()
                .map(|s| (s.lambda, base_attack - s.attacker_bacc, s.val_ndcg / base_val_ndcg))
                .collect::<Vec<_>>()
        )
    });
    pass(format!(
        "adversarial training works: at reversal scale {lambda} the attack drops {drop:.4} (>= {MIN_ATTACK_DROP}) \
         while validation ndcg keeps {ratio:.4} of the plain model (>= {MIN_NDCG_RATIO})"
    ));
}

#[test]
fn reversal_scale_sweep_has_the_expected_shape() {
    let p = pipeline();
    let sweep = &p.report.sweep;
    assert!(sweep.len() >= 2, "sweep must cover several scales");
    let at_zero = sweep.iter().find(|s| s.lambda == 0.0).expect("zero-scale row");
    let largest = sweep
        .iter()
        .max_by(|a, b| a.lambda.partial_cmp(&b.lambda).unwrap())
        .expect("largest-scale row");
    assert!(largest.lambda > 0.0);
    assert!(
        largest.adversary_bacc <= at_zero.adversary_bacc,
        "adversary head must end below its unopposed value: {:.4} vs {:.4}",
        largest.adversary_bacc,
        at_zero.adversary_bacc
    );
    for s in sweep {
        assert!(
            s.attacker_bacc >= s.adversary_bacc - SWEEP_CONSISTENCY_SLACK,
            "fresh attacker fell {SWEEP_CONSISTENCY_SLACK} below the trained-in head at scale {}: {:.4} vs {:.4}",
            s.lambda,
            s.attacker_bacc,
            s.adversary_bacc
        );
    }
    pass(format!(
        "sweep shape holds: adversary {:.4} at scale {} <= {:.4} at zero, and the fresh attacker stays within {SWEEP_CONSISTENCY_SLACK} of the head at every scale",
        largest.adversary_bacc, largest.lambda, at_zero.adversary_bacc
    ));
}

#[test]
fn report_artifacts_complete_and_reruns_byte_identical() {
    let p = pipeline();
    let out = p.dir.join("out");
    for f in [
        "report/summary.tsv",
        "report/summary.toml",
        "report/mcnemar.tsv",
        "report/lambda_sweep.tsv",
        "report/epochs_multvae.tsv",
        "report/epochs_adv-multvae.tsv",
        "dataset.cache",
        "manifest.toml",
        "sweep/results.tsv",
    ] {
        assert!(out.join(f).is_file(), "missing artifact {f}");
    }
    // Significance flags must carry the p-values they derive from.
    for f in &p.report.family {
        if let (Some(p_ndcg), Some(sig)) = (f.wilcoxon_ndcg_p, f.ndcg_significant) {
            assert_eq!(sig, p_ndcg < 0.05, "{}: flag contradicts its p-value", f.name);
        }
    }
    assert_eq!(p.report.mcnemar.len(), 3, "three pairwise attacker comparisons");
    let summary = std::fs::read_to_string(out.join("report/summary.tsv")).unwrap();
    assert!(summary.contains("own defaults"), "headers must label the settings as local defaults");

    // Every verb, rerun over the finished directory, must leave each output
    // byte untouched.
    let before = tree_digest(&out);
    for verb in ["genseed", "preprocess", "run", "attack", "sweep", "report"] {
        advmv_ok(&p.dir, &[verb]);
    }
    let after = tree_digest(&out);
    assert_eq!(before, after, "reruns changed artifact bytes");

    pass(format!(
        "report artifacts complete and every verb is byte-idempotent over {} files",
        before.len()
    ));
}

// ── command contracts ───────────────────────────────────────────────────

#[test]
fn genseed_is_pinned_by_golden_hashes_with_exact_class_balance() {
    // Golden values recorded from the generator at these exact settings; any
    // change to the sampling order or file format must show up here.
    const DEFAULT_INTERACTIONS: u64 = 0x0741_5930_cc76_4aa5;
    const DEFAULT_LABELS: u64 = 0xb506_cb87_7143_9155;
    const BIASED_INTERACTIONS: u64 = 0x1e1e_417c_2afb_5be3;

    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), "");
    let out = cmd_genseed(&cfg).unwrap();
    assert_eq!(out.class_counts, vec![200, 200], "classes must split the users exactly in half");
    assert_eq!(out.interactions_hash, DEFAULT_INTERACTIONS, "interaction golden hash");
    assert_eq!(out.labels_hash, DEFAULT_LABELS, "label golden hash");
    // The reported hashes are the file bytes' hashes.
    assert_eq!(fnv1a64(&std::fs::read(&out.interactions_path).unwrap()), out.interactions_hash);
    assert_eq!(fnv1a64(&std::fs::read(&out.labels_path).unwrap()), out.labels_hash);
    // Regeneration is byte-stable.
    let again = cmd_genseed(&cfg).unwrap();
    assert_eq!(again.interactions_hash, out.interactions_hash);
    assert_eq!(again.labels_hash, out.labels_hash);

    let dir2 = tempfile::tempdir().unwrap();
    let biased = config_in(dir2.path(), "[synthetic]\np_own = 0.6\np_other = 0.05\n");
    let out2 = cmd_genseed(&biased).unwrap();
    assert_eq!(out2.interactions_hash, BIASED_INTERACTIONS, "biased interaction golden hash");
    assert_eq!(out2.labels_hash, DEFAULT_LABELS, "labels are independent of the draw rates");
    assert_eq!(out2.class_counts, vec![200, 200]);

    pass(format!(
        "synthetic generator pinned: defaults {:016x}/{:016x}, biased draw {:016x}, classes 200/200",
        out.interactions_hash, out.labels_hash, out2.interactions_hash
    ));
}

#[test]
fn single_scale_sweep_reproduces_run_and_attack_artifacts() {
    // A one-element scale list equal to the configured model scale must
    // produce the same checkpoints and attack exports as the plain
    // run + attack commands, byte for byte.
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = synthetic_matrix(dir.path(), TINY_CONFIG);
    cmd_preprocess(&cfg).unwrap();
    cmd_run(&cfg, Some("adv-multvae".parse().unwrap())).unwrap();
    cmd_attack(&cfg, Some(ReportFamily::AdvMultvae)).unwrap();
    let rows = cmd_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), cfg.folds, "one sweep row per fold");

    let out = cfg.out.clone();
    for fold in 0..cfg.folds {
        let run_ckpt = out.join(format!("runs/adv-multvae/fold{fold}/min-adv-bacc.ckpt"));
        let sweep_ckpt = out.join(format!("sweep/lambda-1.0/fold{fold}/min-adv-bacc.ckpt"));
        assert_eq!(
            std::fs::read(&run_ckpt).unwrap(),
            std::fs::read(&sweep_ckpt).unwrap(),
            "checkpoint bytes differ at fold {fold}"
        );
        for export in ["users", "heads"] {
            let a = out.join(format!("attacks/adv-multvae/fold{fold}_{export}.tsv"));
            let b = out.join(format!("sweep/lambda-1.0/attack/fold{fold}_{export}.tsv"));
            assert_eq!(
                std::fs::read(&a).unwrap(),
                std::fs::read(&b).unwrap(),
                "{export} export differs at fold {fold}"
            );
        }
    }
    pass(format!(
        "a single-scale sweep reproduces run + attack byte for byte over {} folds",
        cfg.folds
    ));
}

#[test]
fn attack_on_an_untrained_model_sits_at_chance() {
    // Equal draw rates for every item block: the labels carry no signal, so
    // any attack on any model's latents must stay at chance level.
    let dir = tempfile::tempdir().unwrap();
    let (cfg, matrix) = synthetic_matrix(
        dir.path(),
        "\
seed = 2026
[model]
enc_hidden = [32]
latent = 16
[synthetic]
users = 1000
items = 60
p_own = 0.3
p_other = 0.3
p_shared = 0.3
",
    );
    let n = matrix.n_users();
    assert!(n >= 990, "degree filtering should keep nearly all of the 1000 users, kept {n}");
    let untrained = ModelParameters::<f64>::init(
        cfg.model_config(matrix.n_items(), false, 0.0),
        &cfg.seeds(),
    )
    .unwrap();
    let users: Vec<usize> = (0..n).collect();
    let latents =
        extract_latents(&untrained, &matrix, &users, RowView::Full, &cfg.seeds()).unwrap();
    let labels: Vec<usize> = matrix.labels().iter().map(|&c| c as usize).collect();
    let cut = 800.min(n - 100);
    let split_rows = |rows: std::ops::Range<usize>| {
        let mut t = Tensor::<f64>::zeros(rows.len(), latents.cols());
        for (i, r) in rows.clone().enumerate() {
            t.row_mut(i).copy_from_slice(latents.row(r));
        }
        (t, labels[rows].to_vec())
    };
    let (train_l, train_y) = split_rows(0..cut);
    let (eval_l, eval_y) = split_rows(cut..n);
    for side in [&train_y, &eval_y] {
        for class in 0..2usize {
            assert!(side.iter().filter(|&&c| c == class).count() >= 50);
        }
    }
    let report =
        attack(&train_l, &train_y, &eval_l, &eval_y, 2, &cfg.attacker_config(0), &cfg.seeds())
            .unwrap();
    let bacc = report.reported_scores().test_balanced_accuracy;
    assert!(
        (bacc - 0.5).abs() <= 0.06,
        "no-signal attack should sit at 0.5 +- 0.06, got {bacc:.4}"
    );
    pass(format!(
        "attack on an untrained model with signal-free labels scores {bacc:.4} (within 0.5 +- 0.06) over {n} users"
    ));
}

#[test]
fn tab_separated_listening_history_ingests() {
    // A listening-log shaped sample: tab-delimited play counts and a
    // lowercase gender column with one unrecognized value.
    let dir = tempfile::tempdir().unwrap();
    let mut log = String::new();
    for u in 1..=9u32 {
        for j in 0..3u32 {
            let artist = 10 + (u + j) % 6;
            log.push_str(&format!("{u}\t{artist}\t{}\n", 1 + (u + j) % 4));
        }
    }
    let mut users = String::new();
    for u in 1..=9u32 {
        let g = if u == 9 {
            "n"
        } else if u % 2 == 1 {
            "m"
        } else {
            "f"
        };
        users.push_str(&format!("{u}\t{g}\n"));
    }
    std::fs::write(dir.path().join("interactions.dat"), log).unwrap();
    std::fs::write(dir.path().join("users.dat"), users).unwrap();
    let cfg = config_in(
        dir.path(),
        "\
[dataset.interaction_format]
delimiter = \"\\t\"
[dataset.label_format]
delimiter = \"\\t\"
classes = [\"m\", \"f\"]
[preprocess]
min_user_interactions = 2
min_item_interactions = 2
",
    );
    let summary = cmd_preprocess(&cfg).unwrap();
    assert_eq!(summary.users, 9);
    assert_eq!(summary.items, 6);
    assert_eq!(summary.unlabeled, 1, "the unrecognized gender value stays as unknown");
    assert_eq!(
        summary.class_counts.iter().map(|(_, n)| *n).collect::<Vec<_>>(),
        vec![4, 4]
    );
    pass(format!(
        "tab-separated listening sample ingests: {} users, {} items, {} plays kept",
        summary.users, summary.items, summary.interactions
    ));
}

#[test]
fn exit_codes_separate_config_data_and_divergence_failures() {
    let dir = tempfile::tempdir().unwrap();

    std::fs::write(dir.path().join("bad.toml"), "folds = 1\n").unwrap();
    let (config_code, stderr) = advmv_status(dir.path(), "bad.toml", &["preprocess"]);
    assert!(stderr.contains("folds"), "diagnostic must land on the error stream: {stderr}");

    // Its own output directory, so the manifest it creates cannot collide
    // with the diverging configuration below.
    std::fs::write(
        dir.path().join("nodata.toml"),
        "out = \"nodata-out\"\n[dataset]\ninteractions = \"absent.dat\"\n",
    )
    .unwrap();
    let (data_code, stderr) = advmv_status(dir.path(), "nodata.toml", &["preprocess"]);
    assert!(stderr.contains("absent.dat"), "diagnostic must name the missing file: {stderr}");

    // An absurd learning rate blows the loss up to a non-finite value.
    std::fs::write(
        dir.path().join("exp.toml"),
        TINY_CONFIG.replace("[train]\n", "[train]\nlearning_rate = 1e12\n"),
    )
    .unwrap();
    let (ok_code, stderr) = advmv_status(dir.path(), "exp.toml", &["genseed"]);
    assert_eq!(ok_code, 0, "genseed should succeed: {stderr}");
    advmv_ok(dir.path(), &["preprocess"]);
    let (diverge_code, stderr) =
        advmv_status(dir.path(), "exp.toml", &["run", "--family", "multvae"]);
    assert!(stderr.contains("diverged"), "divergence diagnostic expected: {stderr}");

    let codes = [ok_code, config_code, data_code, diverge_code];
    assert_eq!(codes, [0, 2, 3, 4], "exit codes must separate the failure classes");
    pass(format!(
        "exit codes separate failure classes: success {ok_code}, configuration {config_code}, data {data_code}, divergence {diverge_code}"
    ));
}

// ── full-scale reproduction (opt-in long job) ───────────────────────────

/// Full-scale check against the published numbers. Ignored by default: it
/// needs the MovieLens-1M files (`ratings.dat`, `users.dat`) in the
/// directory named by `ADVMV_ML1M_DIR` and takes hours of CPU time.
/// Run with: `ADVMV_ML1M_DIR=... cargo test -p adv-multvae-cli --test acceptance -- --ignored`
#[test]
#[ignore]
fn ml1m_reproduction_matches_reported_numbers() {
    let data = std::env::var("ADVMV_ML1M_DIR")
        .expect("set ADVMV_ML1M_DIR to the directory holding ratings.dat and users.dat");
    let data = Path::new(&data);
    for f in ["ratings.dat", "users.dat"] {
        assert!(data.join(f).is_file(), "{} not found under ADVMV_ML1M_DIR", f);
    }
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-ml1m");
    std::fs::create_dir_all(&dir).unwrap();
    let config = format!(
        "\
seed = 42
folds = 5
out = \"out\"

[dataset]
name = \"ml-1m\"
interactions = \"{ratings}\"
labels = \"{users}\"

[preprocess]
min_user_interactions = 1
min_item_interactions = 1

[model]
enc_hidden = [600]
latent = 200
beta = 0.2
lambda = 1.0

[train]
epochs = 100
batch_size = 500
validate_every = 5
selection = \"min-adv-bacc\"

[sweep]
lambdas = []
",
        ratings = data.join("ratings.dat").display(),
        users = data.join("users.dat").display(),
    );
    std::fs::write(dir.join("exp.toml"), config).unwrap();

    advmv_ok(&dir, &["preprocess"]);
    let matrix = InteractionMatrix::read_cache(&dir.join("out/dataset.cache")).unwrap();
    assert_eq!(matrix.n_users(), 6040);
    assert_eq!(matrix.n_items(), 3706);
    assert_eq!(matrix.n_interactions(), 1_000_209);
    pass("ml-1m ingests at its published scale: 6040 users, 3706 items, 1000209 ratings".into());

    advmv_ok(&dir, &["run"]);
    advmv_ok(&dir, &["attack"]);
    advmv_ok(&dir, &["report"]);
    let report = EvaluationReport::read(&dir.join("out/report/summary.toml")).unwrap();
    let best = report.family("multvae-best").unwrap();
    let adv = report.family("adv-multvae").unwrap();
    assert!((best.ndcg - 0.621).abs() <= 0.05, "plain ndcg@10 {:.4} off target", best.ndcg);
    assert!(
        (best.attacker_bacc - 0.707).abs() <= 0.05,
        "plain attacker bacc {:.4} off target",
        best.attacker_bacc
    );
    assert!(adv.attacker_bacc <= 0.62, "adversarial attacker bacc {:.4}", adv.attacker_bacc);
    assert!(adv.ndcg >= 0.55, "adversarial ndcg@10 {:.4}", adv.ndcg);

    // The adversarial model must not rank significantly differently from
    // the plain model's final state, judged per user across all test folds.
    let cfg = ExperimentConfig::load(&dir.join("exp.toml")).unwrap();
    let folds = assign_folds(matrix.n_users(), cfg.folds, &cfg.seeds()).unwrap();
    let mut adv_vals = Vec::new();
    let mut last_vals = Vec::new();
    for fold in 0..cfg.folds {
        let split = fold_split(&matrix, &folds, fold, &cfg.seeds()).unwrap();
        let last_params = checkpoint::load::<f64>(
            &dir.join(format!("out/runs/multvae/fold{fold}/last-epoch.ckpt")),
        )
        .unwrap();
        let adv_params = checkpoint::load::<f64>(
            &dir.join(format!("out/runs/adv-multvae/fold{fold}/min-adv-bacc.ckpt")),
        )
        .unwrap();
        let e1 = train::evaluate_ranking(
            &adv_params,
            &matrix,
            &split.test,
            10,
            RecallDenominator::CappedAtK,
            &cfg.seeds(),
        )
        .unwrap();
        let e2 = train::evaluate_ranking(
            &last_params,
            &matrix,
            &split.test,
            10,
            RecallDenominator::CappedAtK,
            &cfg.seeds(),
        )
        .unwrap();
        adv_vals.extend(e1.per_user_ndcg);
        last_vals.extend(e2.per_user_ndcg);
    }
    let w = wilcoxon_signed_rank(&adv_vals, &last_vals, 0.05).unwrap();
    assert!(
        !w.significant,
        "adversarial vs final plain ranking should not differ significantly, p = {:.4}",
        w.p_value
    );
    pass(format!(
        "ml-1m reproduction: plain ndcg {:.4} / attacker {:.4}, adversarial ndcg {:.4} / attacker {:.4}, ranking difference p = {:.3}",
        best.ndcg, best.attacker_bacc, adv.ndcg, adv.attacker_bacc, w.p_value
    ));
}
