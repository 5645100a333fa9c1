//! Post-hoc attribute-inference probing.
//!
//! After a model is trained and frozen, this module measures how much
//! protected-attribute information its latent space still carries: several
//! independently initialized feedforward heads are trained (cross-entropy,
//! Adam) to predict the attribute from the evaluation-time latent means,
//! and the strongest head's test balanced accuracy is reported as the
//! leakage upper bound. The probed model is only read, never written.
//!
//! Pool discipline mirrors the main pipeline: a stratified 10% of the
//! labeled training pool is held out for head selection, the remainder is
//! upsampled to class balance with the shared balancing routine, each head
//! keeps the parameters of its best-validation-BAcc epoch, and the head
//! with the highest test BAcc is reported. All randomness is keyed on
//! `(purpose, attacker seed, head, ...)`, so reported numbers are
//! reproducible and adding heads never perturbs existing ones — the
//! reported BAcc is monotone non-decreasing in the head count.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{balance_by_upsampling, dense_rows_from_items, eval_split, InteractionMatrix};
use crate::error::{Error, Result};
use crate::metrics::ConfusionCounts;
use crate::model::{self, argmax_rows, one_hot, Layer, ModelParameters};
use crate::rng::{SeedStream, StreamKind};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{self, Tensor};
use crate::train::{AdamState, TrainConfig};

/// Attack hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackerConfig {
    /// Number of independently initialized heads (>= 1).
    pub n_heads: usize,
    /// Hidden widths; `None` means one hidden layer as wide as the latent.
    pub hidden: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the training pool held out for head selection.
    pub holdout_frac: f64,
    /// Extra salt on every attacker stream; distinct seeds give independent
    /// attacks against the same frozen model.
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            n_heads: 5,
            hidden: None,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            holdout_frac: 0.1,
            seed: 0,
        }
    }
}

impl AttackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 {
            return Err(Error::Config("attacker needs at least one head".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("attacker epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "attacker learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 1.0) {
            return Err(Error::Config(format!(
                "attacker holdout fraction {} outside (0, 1)",
                self.holdout_frac
            )));
        }
        Ok(())
    }

    fn hidden_widths(&self, latent: usize) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| vec![latent])
    }
}

/// Which interaction rows feed the encoder when extracting latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowView {
    /// The user's complete interaction row (training users: the model saw
    /// all of it).
    Full,
    /// Only the evaluation input mask (held-out users: the targets stay
    /// hidden, exactly as in ranking evaluation).
    EvalInput,
}

/// Evaluation-mode latent means for a set of users of a frozen model. Purely
/// a read: calling it any number of times returns identical vectors and the
/// model parameters are untouched.
pub fn extract_latents<S: Scalar>(
    params: &ModelParameters<S>,
    matrix: &InteractionMatrix,
    users: &[usize],
    view: RowView,
    seeds: &SeedStream,
) -> Result<Tensor<S>> {
    let d = params.config.latent;
    let mut out = Tensor::zeros(users.len(), d);
    let mut done = 0usize;
    for chunk in users.chunks(512) {
        let x: Tensor<S> = match view {
            RowView::Full => matrix.dense_rows(chunk),
            RowView::EvalInput => {
                let splits: Vec<_> =
                    chunk.iter().map(|&u| eval_split(matrix, u, seeds)).collect::<Result<_>>()?;
                let rows: Vec<&[u32]> = splits.iter().map(|s| s.input.as_slice()).collect();
                dense_rows_from_items(&rows, matrix.n_items())
            }
        };
        let mu = model::latent_mu(params, &x)?;
        for r in 0..mu.rows() {
            out.row_mut(done + r).copy_from_slice(mu.row(r));
        }
        done += chunk.len();
    }
    Ok(out)
}

/// Scores of one attacker head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadScores {
    pub train_accuracy: f64,
    pub train_balanced_accuracy: f64,
    /// Holdout balanced accuracy of the selected epoch.
    pub val_balanced_accuracy: f64,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub test_accuracy: f64,
    pub test_balanced_accuracy: f64,
}

/// Outcome of one attack: per-head scores plus the strongest head's
/// per-user predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackReport {
    pub heads: Vec<HeadScores>,
    /// Index of the head with the highest test balanced accuracy (earliest
    /// on exact ties).
    pub reported: usize,
    /// The reported head's predicted class per evaluation user.
    pub predictions: Vec<usize>,
}

impl AttackReport {
    pub fn reported_scores(&self) -> &HeadScores {
        &self.heads[self.reported]
    }
}

/// Train `cfg.n_heads` fresh heads on the frozen training latents and score
/// them on the evaluation latents. Labels index rows of the respective
/// latent tensors. Every class in `0..n_classes` needs at least two training
/// users (one for the stratified holdout, one to learn from); a single-class
/// pool makes the attack undefined.
pub fn attack<S: Scalar>(
    train_latents: &Tensor<S>,
    train_labels: &[usize],
    eval_latents: &Tensor<S>,
    eval_labels: &[usize],
    n_classes: usize,
    cfg: &AttackerConfig,
    seeds: &SeedStream,
) -> Result<AttackReport> {
    cfg.validate()?;
    if n_classes < 2 {
        return Err(Error::Config(format!("attack needs >= 2 classes, got {n_classes}")));
    }
    if train_latents.rows() != train_labels.len() || eval_latents.rows() != eval_labels.len() {
        return Err(Error::Contract("latent row count != label count".into()));
    }
    if train_latents.cols() != eval_latents.cols() {
        return Err(Error::Contract("train/eval latent widths differ".into()));
    }
    for &l in train_labels.iter().chain(eval_labels) {
        if l >= n_classes {
            return Err(Error::Data(format!("label {l} out of range for {n_classes} classes")));
        }
    }

    // Stratified holdout, then balance the remainder by upsampling.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in train_labels.iter().enumerate() {
        members[l].push(i);
    }
    let present = members.iter().filter(|m| !m.is_empty()).count();
    if present < 2 {
        return Err(Error::Data(
            "attacker training pool contains a single class; the attack is undefined".into(),
        ));
    }
    if let Some(c) = members.iter().position(|m| m.len() < 2) {
        return Err(Error::Data(format!(
            "class {c} has {} training user(s); the stratified holdout needs >= 2 per class",
            members[c].len()
        )));
    }
    let mut rng = seeds.derive(StreamKind::AttackerHoldout, &[cfg.seed]);
    let mut holdout = Vec::new();
    let mut pool_members: Vec<Vec<usize>> = Vec::with_capacity(n_classes);
    for m in &members {
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut rng);
        let n_hold = ((cfg.holdout_frac * m.len() as f64).round() as usize).clamp(1, m.len() - 1);
        holdout.extend_from_slice(&shuffled[..n_hold]);
        let mut rest = shuffled[n_hold..].to_vec();
        rest.sort_unstable();
        pool_members.push(rest);
    }
    holdout.sort_unstable();
    let mut base: Vec<usize> = pool_members.iter().flatten().copied().collect();
    base.sort_unstable();
    let pool = balance_by_upsampling(base.clone(), &pool_members, &mut rng);

    let latent = train_latents.cols();
    let widths = cfg.hidden_widths(latent);
    let dims: Vec<(usize, usize)> = {
        let all: Vec<usize> =
            std::iter::once(latent).chain(widths.iter().copied()).chain(std::iter::once(n_classes)).collect();
        all.windows(2).map(|w| (w[0], w[1])).collect()
    };

    let results: Vec<(HeadScores, Vec<usize>)> = (0..cfg.n_heads)
        .into_par_iter()
        .map(|head| {
            train_head(
                head, &dims, train_latents, train_labels, eval_latents, eval_labels, &pool, &holdout,
                n_classes, cfg, seeds,
            )
        })
        .collect::<Result<_>>()?;

    let mut reported = 0;
    for (i, (scores, _)) in results.iter().enumerate() {
        if scores.test_balanced_accuracy > results[reported].0.test_balanced_accuracy {
            reported = i;
        }
    }
    let predictions = results[reported].1.clone();
    let heads = results.into_iter().map(|(s, _)| s).collect();
    Ok(AttackReport { heads, reported, predictions })
}

#[allow(clippy::too_many_arguments)]
fn train_head<S: Scalar>(
    head: usize,
    dims: &[(usize, usize)],
    train_latents: &Tensor<S>,
    train_labels: &[usize],
    eval_latents: &Tensor<S>,
    eval_labels: &[usize],
    pool: &[usize],
    holdout: &[usize],
    n_classes: usize,
    cfg: &AttackerConfig,
    seeds: &SeedStream,
) -> Result<(HeadScores, Vec<usize>)> {
    let mut layers: Vec<Layer<S>> = dims
        .iter()
        .enumerate()
        .map(|(layer, &(fan_in, fan_out))| {
            let mut rng =
                seeds.derive(StreamKind::AttackerInit, &[cfg.seed, head as u64, layer as u64]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Tensor::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = S::of_f64(rng.random_range(-bound..bound));
            }
            Layer { w, b: Tensor::zeros(1, fan_out) }
        })
        .collect();
    let shapes: Vec<(usize, usize)> =
        layers.iter().flat_map(|l| [l.w.shape(), l.b.shape()]).collect();
    let mut adam = AdamState::for_shapes(&shapes);
    let opt = TrainConfig { learning_rate: cfg.learning_rate, ..Default::default() };

    let holdout_x = gather_rows(train_latents, holdout);
    let holdout_y: Vec<usize> = holdout.iter().map(|&i| train_labels[i]).collect();
    let mut best: Option<(Vec<Layer<S>>, f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order = pool.to_vec();
        let mut shuffle_rng =
            seeds.derive(StreamKind::AttackerShuffle, &[cfg.seed, head as u64, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = gather_rows(train_latents, batch);
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let y: Tensor<S> = one_hot(&labels, n_classes)?;

            let mut tape = Tape::new();
            let ids: Vec<_> = layers
                .iter()
                .flat_map(|l| [l.w.clone(), l.b.clone()])
                .map(|t| tape.param(t))
                .collect();
            let x_in = tape.input(x);
            let mut h = x_in;
            for (i, pair) in ids.chunks(2).enumerate() {
                h = tape.matmul(h, pair[0])?;
                h = tape.add_row(h, pair[1])?;
                if i + 1 < dims.len() {
                    h = tape.relu(h);
                }
            }
            let y_in = tape.input(y);
            let ce = model::softmax_cross_entropy(&mut tape, h, y_in)?;
            let loss = tape.value(ce).at(0, 0).as_f64();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite attacker loss {loss} at head {head}, epoch {epoch}"
                )));
            }
            tape.backward(ce)?;
            let grads: Vec<Tensor<S>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
            let mut tensors: Vec<&mut Tensor<S>> = Vec::with_capacity(2 * layers.len());
            for l in &mut layers {
                tensors.push(&mut l.w);
                tensors.push(&mut l.b);
            }
            adam.step_tensors(tensors, &grads, &opt)?;
        }
        let val_bacc = scores_of(&predict(&layers, &holdout_x)?, &holdout_y, n_classes)?.1;
        if best.as_ref().is_none_or(|(_, b, _)| val_bacc > *b) {
            best = Some((layers.clone(), val_bacc, epoch));
        }
    }
    let (best_layers, val_bacc, best_epoch) = best.expect("at least one epoch ran");

    let train_preds = predict(&best_layers, train_latents)?;
    let (train_acc, train_bacc) = scores_of(&train_preds, train_labels, n_classes)?;
    let test_preds = predict(&best_layers, eval_latents)?;
    let (test_acc, test_bacc) = scores_of(&test_preds, eval_labels, n_classes)?;
    Ok((
        HeadScores {
            train_accuracy: train_acc,
            train_balanced_accuracy: train_bacc,
            val_balanced_accuracy: val_bacc,
            best_epoch,
            test_accuracy: test_acc,
            test_balanced_accuracy: test_bacc,
        },
        test_preds,
    ))
}

/// Evaluation-mode head forward: class predictions for each latent row.
fn predict<S: Scalar>(layers: &[Layer<S>], x: &Tensor<S>) -> Result<Vec<usize>> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        let mut out = tensor::matmul(&h, &layer.w)?;
        for r in 0..out.rows() {
            for (v, &b) in out.row_mut(r).iter_mut().zip(layer.b.row(0)) {
                *v = *v + b;
            }
        }
        if i + 1 < layers.len() {
            for v in out.data_mut() {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
        }
        h = out;
    }
    Ok(argmax_rows(&h))
}

fn scores_of(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<(f64, f64)> {
    let mut counts = ConfusionCounts::new(n_classes);
    counts.observe_all(labels, predictions)?;
    Ok((counts.accuracy()?, counts.balanced_accuracy()?))
}

fn gather_rows<S: Scalar>(src: &Tensor<S>, rows: &[usize]) -> Tensor<S> {
    let mut out = Tensor::zeros(rows.len(), src.cols());
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(src.row(i));
    }
    out
}
