//! The optimizer and the per-fold training loop.
//!
//! Training iterates over the (upsampled) train multiset in seeded shuffled
//! batches, builds one tape per batch, and applies Adam with decoupled
//! weight decay. After every epoch the model is scored on the validation
//! users: ranking quality as NDCG@k over the 80/20 input/target masks, and
//! (for adversarial models) the attribute head's balanced accuracy. Three
//! checkpoints are tracked along the way:
//!
//! * `best_ndcg` — highest validation NDCG, earliest epoch on ties;
//! * `last` — the state after the final epoch;
//! * `min_adv_bacc` — lowest validation adversary balanced accuracy,
//!   latest epoch on ties (only for adversarial models).
//!
//! Every random decision is keyed on (purpose, fold, epoch, batch), so one
//! run is exactly reproducible and two model variants can be made to see
//! identical noise.

use std::collections::HashSet;

use rand::seq::SliceRandom;

use crate::data::{dense_rows_from_items, eval_split, FoldSplit, InteractionMatrix};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts, RecallDenominator};
use crate::model::{
    self, one_hot_masked, rank_top_k, ModelConfig, ModelParameters, TrainNoise,
};
use crate::rng::{SeedStream, StreamKind};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Optimizer and loop hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Decoupled weight decay: parameters shrink by `lr * wd * p` before
    /// each Adam update.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear KL-weight warm-up: the effective beta ramps from 0 to the
    /// model's beta over this many optimizer steps (0 = no warm-up).
    pub beta_warmup_steps: usize,
    /// Validate every N epochs (the final epoch is always validated).
    pub validate_every: usize,
    /// Ranking cutoff used for validation NDCG.
    pub eval_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 500,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            beta_warmup_steps: 0,
            validate_every: 1,
            eval_k: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be positive".into()));
        }
        if self.eval_k == 0 {
            return Err(Error::Config("eval_k must be positive".into()));
        }
        Ok(())
    }

    /// KL weight after `step` completed optimizer steps.
    fn effective_beta(&self, full_beta: f64, step: u64) -> f64 {
        if self.beta_warmup_steps == 0 {
            full_beta
        } else {
            full_beta * ((step + 1) as f64 / self.beta_warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam first/second moment state, aligned with the model's tensor order.
pub struct AdamState<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParameters<S>) -> Self {
        Self::for_shapes(
            &params
                .named_tensors()
                .iter()
                .map(|(_, t)| t.shape())
                .collect::<Vec<_>>(),
        )
    }

    /// Moment buffers for an arbitrary tensor list (attacker heads etc.).
    pub fn for_shapes(shapes: &[(usize, usize)]) -> Self {
        let zeros: Vec<Tensor<S>> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update over all model tensors. `grads` must be in
    /// [`ModelParameters::named_tensors`] order.
    pub fn step(
        &mut self,
        params: &mut ModelParameters<S>,
        grads: &[Tensor<S>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step_tensors(params.tensors_mut(), grads, cfg)
    }

    /// One update over an explicit tensor list (same order as
    /// [`AdamState::for_shapes`]).
    pub fn step_tensors(
        &mut self,
        tensors: Vec<&mut Tensor<S>>,
        grads: &[Tensor<S>],
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} tensors",
                grads.len(),
                tensors.len()
            )));
        }
        self.t += 1;
        let lr = S::of_f64(cfg.learning_rate);
        let wd = S::of_f64(cfg.weight_decay);
        let b1 = S::of_f64(cfg.beta1);
        let b2 = S::of_f64(cfg.beta2);
        let eps = S::of_f64(cfg.epsilon);
        let one = S::one();
        let bc1 = one - S::of_f64(cfg.beta1.powi(self.t as i32));
        let bc2 = one - S::of_f64(cfg.beta2.powi(self.t as i32));
        for ((tensor, grad), (m, v)) in tensors.into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            if tensor.shape() != grad.shape() {
                return Err(Error::Contract("gradient shape mismatch in Adam step".into()));
            }
            for ((p, &g), (m, v)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                // Decoupled weight decay first, then the Adam update.
                *p = *p - lr * wd * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch training record. Deliberately contains no wall-clock values:
/// persisted logs must be byte-identical across reruns.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total objective over the epoch's batches.
    pub train_loss: f64,
    pub recon_loss: f64,
    pub kl_loss: f64,
    /// Mean adversarial cross-entropy (adversarial models only).
    pub adv_loss: Option<f64>,
    /// `None` on epochs skipped by `validate_every`.
    pub val_ndcg: Option<f64>,
    /// Validation balanced accuracy of the adversary head (adversarial
    /// models, validated epochs only).
    pub val_adv_bacc: Option<f64>,
}

/// A selected model state plus the validation scores that selected it.
#[derive(Clone, Debug)]
pub struct Selected<S> {
    pub params: ModelParameters<S>,
    /// 1-based epoch the snapshot was taken after.
    pub epoch: usize,
    pub val_ndcg: f64,
    pub val_adv_bacc: Option<f64>,
}

/// Everything a training run produces.
pub struct TrainOutput<S> {
    pub log: Vec<EpochRecord>,
    pub best_ndcg: Selected<S>,
    pub last: Selected<S>,
    /// Only for adversarial models.
    pub min_adv_bacc: Option<Selected<S>>,
}

/// Which of the tracked checkpoints a consumer wants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionRule {
    BestNdcg,
    LastEpoch,
    MinAdvBacc,
}

impl std::str::FromStr for SelectionRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-ndcg" => Ok(SelectionRule::BestNdcg),
            "last-epoch" => Ok(SelectionRule::LastEpoch),
            "min-adv-bacc" => Ok(SelectionRule::MinAdvBacc),
            other => Err(Error::Config(format!(
                "unknown selection rule {other:?} (best-ndcg, last-epoch, min-adv-bacc)"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionRule::BestNdcg => "best-ndcg",
            SelectionRule::LastEpoch => "last-epoch",
            SelectionRule::MinAdvBacc => "min-adv-bacc",
        })
    }
}

/// Train one model on one fold.
pub fn train<S: Scalar>(
    matrix: &InteractionMatrix,
    split: &FoldSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &SeedStream,
) -> Result<TrainOutput<S>> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if model_cfg.n_items != matrix.n_items() {
        return Err(Error::Config(format!(
            "model expects {} items, dataset has {}",
            model_cfg.n_items,
            matrix.n_items()
        )));
    }
    if model_cfg.adversarial && model_cfg.n_classes != matrix.n_classes() as usize {
        return Err(Error::Config(format!(
            "model expects {} classes, dataset has {}",
            model_cfg.n_classes,
            matrix.n_classes()
        )));
    }
    let mut params = ModelParameters::<S>::init(model_cfg.clone(), seeds)?;
    let mut adam = AdamState::new(&params);
    let fold = split.fold as u64;

    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best_ndcg: Option<Selected<S>> = None;
    let mut min_bacc: Option<Selected<S>> = None;
    let mut step: u64 = 0;

    for epoch in 1..=train_cfg.epochs {
        let mut order = split.train.clone();
        let mut shuffle_rng = seeds.derive(StreamKind::BatchShuffle, &[fold, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // total, recon, kl, adv
        let mut n_batches = 0usize;
        for (batch_idx, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let x: Tensor<S> = matrix.dense_rows(batch);
            let labels_oh: Option<Tensor<S>> = if model_cfg.adversarial {
                let labels: Vec<Option<usize>> =
                    batch.iter().map(|&u| matrix.known_label(u).map(usize::from)).collect();
                Some(one_hot_masked(&labels, model_cfg.n_classes)?)
            } else {
                None
            };
            let mut dropout_rng = seeds.derive(StreamKind::Dropout, &[fold, epoch as u64, batch_idx as u64]);
            let mut latent_rng = seeds.derive(StreamKind::LatentNoise, &[fold, epoch as u64, batch_idx as u64]);

            let eff_beta = train_cfg.effective_beta(model_cfg.beta, step);
            let batch_cfg;
            let cfg_ref = if eff_beta == model_cfg.beta {
                model_cfg
            } else {
                batch_cfg = ModelConfig { beta: eff_beta, ..model_cfg.clone() };
                &batch_cfg
            };
            let mut tape = Tape::new();
            let ids = params.register(&mut tape);
            let graph = model::total_loss(
                &mut tape,
                &ids,
                cfg_ref,
                &x,
                labels_oh.as_ref(),
                Some(TrainNoise { dropout: &mut dropout_rng, latent: &mut latent_rng }),
            )?;
            let total = tape.value(graph.total).at(0, 0).as_f64();
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {total} at fold {fold}, epoch {epoch}, batch {batch_idx}"
                )));
            }
            sums.0 += total;
            sums.1 += tape.value(graph.recon).at(0, 0).as_f64();
            sums.2 += tape.value(graph.kl).at(0, 0).as_f64();
            if let Some(ce) = graph.adv_ce {
                sums.3 += tape.value(ce).at(0, 0).as_f64();
            }
            n_batches += 1;

            tape.backward(graph.total)?;
            let flat_ids: Vec<_> = ids
                .encoder
                .iter()
                .chain(&ids.decoder)
                .chain(&ids.adversary)
                .flat_map(|&(w, b)| [w, b])
                .collect();
            let grads: Vec<Tensor<S>> = flat_ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
            adam.step(&mut params, &grads, train_cfg)?;
            step += 1;
        }

        // The final epoch always validates so the Last checkpoint carries
        // scores and best-NDCG selection has at least one candidate.
        let validated = epoch % train_cfg.validate_every == 0 || epoch == train_cfg.epochs;
        let (val_ndcg, val_adv_bacc) = if validated {
            let ndcg = evaluate_ranking(
                &params,
                matrix,
                &split.val,
                train_cfg.eval_k,
                RecallDenominator::CappedAtK,
                seeds,
            )?
            .mean_ndcg;
            let bacc = if model_cfg.adversarial {
                Some(evaluate_adversary(&params, matrix, &split.val, seeds)?)
            } else {
                None
            };
            (Some(ndcg), bacc)
        } else {
            (None, None)
        };

        let n = n_batches as f64;
        log.push(EpochRecord {
            epoch,
            train_loss: sums.0 / n,
            recon_loss: sums.1 / n,
            kl_loss: sums.2 / n,
            adv_loss: model_cfg.adversarial.then_some(sums.3 / n),
            val_ndcg,
            val_adv_bacc,
        });

        if let Some(ndcg) = val_ndcg {
            let snapshot = || Selected {
                params: params.clone(),
                epoch,
                val_ndcg: ndcg,
                val_adv_bacc,
            };
            // Strictly-greater keeps the earliest epoch on NDCG ties.
            if best_ndcg.as_ref().is_none_or(|b| ndcg > b.val_ndcg) {
                best_ndcg = Some(snapshot());
            }
            // Less-or-equal keeps the latest epoch on balanced-accuracy ties.
            if let Some(bacc) = val_adv_bacc {
                if min_bacc.as_ref().is_none_or(|b| bacc <= b.val_adv_bacc.expect("adversarial")) {
                    min_bacc = Some(snapshot());
                }
            }
            if epoch == train_cfg.epochs {
                let last = snapshot();
                return Ok(TrainOutput {
                    log,
                    best_ndcg: best_ndcg.expect("final epoch is always validated"),
                    last,
                    min_adv_bacc: min_bacc,
                });
            }
        }
    }
    unreachable!("loop returns on the final (always validated) epoch")
}

/// One configuration candidate for a hyperparameter search.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub label: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Results of one grid candidate across the given folds.
pub struct GridPointOutcome<S> {
    pub label: String,
    /// Mean over folds of the best-NDCG checkpoint's validation NDCG.
    pub mean_val_ndcg: f64,
    pub folds: Vec<TrainOutput<S>>,
}

/// Full grid-search result. The winner is evaluated on each fold's test
/// users; every candidate keeps its complete logs.
pub struct GridOutcome<S> {
    pub winner: usize,
    pub points: Vec<GridPointOutcome<S>>,
    /// Winner's per-fold test NDCG@k using its best-NDCG checkpoints.
    pub winner_test_ndcg: Vec<f64>,
}

/// Train every grid candidate on every fold, pick the winner by mean
/// validation NDCG (earliest candidate on exact ties), and score the winner
/// on the test users. With a single candidate this is exactly one `train`
/// call per fold plus the test evaluation.
pub fn grid_run<S: Scalar>(
    matrix: &InteractionMatrix,
    splits: &[FoldSplit],
    points: &[GridPoint],
    seeds: &SeedStream,
) -> Result<GridOutcome<S>> {
    if points.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    if splits.is_empty() {
        return Err(Error::Config("grid search needs at least one fold".into()));
    }
    let mut outcomes = Vec::with_capacity(points.len());
    for point in points {
        let mut folds = Vec::with_capacity(splits.len());
        for split in splits {
            folds.push(train::<S>(matrix, split, &point.model, &point.train, seeds)?);
        }
        let vals: Vec<f64> = folds.iter().map(|f| f.best_ndcg.val_ndcg).collect();
        outcomes.push(GridPointOutcome {
            label: point.label.clone(),
            mean_val_ndcg: metrics::mean(&vals)?,
            folds,
        });
    }
    let mut winner = 0;
    for (i, o) in outcomes.iter().enumerate() {
        if o.mean_val_ndcg > outcomes[winner].mean_val_ndcg {
            winner = i;
        }
    }
    let eval_k = points[winner].train.eval_k;
    let mut winner_test_ndcg = Vec::with_capacity(splits.len());
    for (split, out) in splits.iter().zip(&outcomes[winner].folds) {
        let eval = evaluate_ranking(
            &out.best_ndcg.params,
            matrix,
            &split.test,
            eval_k,
            RecallDenominator::CappedAtK,
            seeds,
        )?;
        winner_test_ndcg.push(eval.mean_ndcg);
    }
    Ok(GridOutcome { winner, points: outcomes, winner_test_ndcg })
}

/// Ranking evaluation over held-out users: encode each user's input items,
/// score all items, drop the inputs from the ranking and compare the top-k
/// against the target items.
pub struct RankingEval {
    pub users: Vec<usize>,
    pub per_user_ndcg: Vec<f64>,
    pub per_user_recall: Vec<f64>,
    pub mean_ndcg: f64,
    pub mean_recall: f64,
}

pub fn evaluate_ranking<S: Scalar>(
    params: &ModelParameters<S>,
    matrix: &InteractionMatrix,
    users: &[usize],
    k: usize,
    denom: RecallDenominator,
    seeds: &SeedStream,
) -> Result<RankingEval> {
    if users.is_empty() {
        return Err(Error::Data("ranking evaluation over zero users".into()));
    }
    let mut per_user_ndcg = Vec::with_capacity(users.len());
    let mut per_user_recall = Vec::with_capacity(users.len());
    // Chunked so evaluation memory stays bounded on wide item sets.
    for chunk in users.chunks(512) {
        let splits: Vec<_> = chunk.iter().map(|&u| eval_split(matrix, u, seeds)).collect::<Result<_>>()?;
        let input_rows: Vec<&[u32]> = splits.iter().map(|s| s.input.as_slice()).collect();
        let x: Tensor<S> = dense_rows_from_items(&input_rows, matrix.n_items());
        let scores = model::item_scores(params, &x)?;
        let ranked = rank_top_k(&scores, k, |r, i| x.at(r, i) != S::zero());
        for (s, rec) in splits.iter().zip(&ranked) {
            let targets: HashSet<u32> = s.target.iter().copied().collect();
            per_user_ndcg.push(metrics::ndcg_at_k(rec, &targets, k)?);
            per_user_recall.push(metrics::recall_at_k(rec, &targets, k, denom)?);
        }
    }
    Ok(RankingEval {
        users: users.to_vec(),
        mean_ndcg: metrics::mean(&per_user_ndcg)?,
        mean_recall: metrics::mean(&per_user_recall)?,
        per_user_ndcg,
        per_user_recall,
    })
}

/// Balanced accuracy of the model's own adversary head on held-out users
/// (encoding their input-mask rows, like any other evaluation). Users with
/// an unknown attribute are skipped: the metric is undefined for them.
pub fn evaluate_adversary<S: Scalar>(
    params: &ModelParameters<S>,
    matrix: &InteractionMatrix,
    users: &[usize],
    seeds: &SeedStream,
) -> Result<f64> {
    let labeled: Vec<usize> =
        users.iter().copied().filter(|&u| matrix.known_label(u).is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::Data("no labeled users to score the adversary on".into()));
    }
    let mut counts = ConfusionCounts::new(params.config.n_classes);
    for chunk in labeled.chunks(512) {
        let splits: Vec<_> = chunk.iter().map(|&u| eval_split(matrix, u, seeds)).collect::<Result<_>>()?;
        let input_rows: Vec<&[u32]> = splits.iter().map(|s| s.input.as_slice()).collect();
        let x: Tensor<S> = dense_rows_from_items(&input_rows, matrix.n_items());
        let preds = model::adversary_predict(params, &x)?;
        for (&u, &p) in chunk.iter().zip(&preds) {
            counts.observe(matrix.label(u) as usize, p);
        }
    }
    counts.balanced_accuracy()
}
