//! The recommendation model: a variational autoencoder over user interaction
//! vectors, optionally trained against an adversarial attribute head.
//!
//! The encoder normalizes and (in training) drops out the interaction row,
//! runs tanh hidden layers, and emits a `2 * latent` pre-activation that is
//! split into `mu` and `log_var`. Training samples `z` with the
//! reparameterization trick; evaluation uses `z = mu`. The decoder mirrors
//! the encoder back to item logits scored by a multinomial log-likelihood.
//! The adversary head sees `z` through a gradient reversal op, so its own
//! weights learn to predict the protected attribute while the encoder is
//! pushed to make that prediction impossible.
//!
//! Graph-building functions are free functions over a [`Tape`] plus a
//! [`ModelIds`] handle, so the same code path serves training, evaluation and
//! finite-difference checking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{SeedStream, StreamKind};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Architecture and loss hyperparameters of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of items (input and output width).
    pub n_items: usize,
    /// Encoder hidden layer widths (tanh).
    pub enc_hidden: Vec<usize>,
    /// Latent dimensionality `d`; the encoder head emits `2 d` values.
    pub latent: usize,
    /// Decoder hidden widths; `None` mirrors the encoder in reverse.
    pub dec_hidden: Option<Vec<usize>>,
    /// Whether the adversarial head exists at all.
    pub adversarial: bool,
    /// Adversary hidden widths (relu).
    pub adv_hidden: Vec<usize>,
    /// Number of protected-attribute classes.
    pub n_classes: usize,
    /// Weight of the KL term in the reconstruction loss.
    pub beta: f64,
    /// Gradient reversal scale; `0` makes the adversary invisible to the
    /// encoder (its gradient contribution is multiplied by `-0`).
    pub lambda: f64,
    /// Dropout rate applied to the normalized input row during training.
    pub input_dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.latent == 0 {
            return Err(Error::Config("n_items and latent must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Config(format!("input_dropout {} outside [0, 1)", self.input_dropout)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.adversarial && self.n_classes < 2 {
            return Err(Error::Config("adversarial model needs at least 2 classes".into()));
        }
        if self.enc_hidden.contains(&0)
            || self.adv_hidden.contains(&0)
            || self.dec_hidden.as_ref().is_some_and(|d| d.contains(&0))
        {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Decoder hidden widths after resolving the mirror default.
    pub fn decoder_hidden(&self) -> Vec<usize> {
        match &self.dec_hidden {
            Some(d) => d.clone(),
            None => self.enc_hidden.iter().rev().cloned().collect(),
        }
    }

    /// `(in, out)` width pairs of the encoder layers.
    fn encoder_dims(&self) -> Vec<(usize, usize)> {
        layer_dims(self.n_items, &self.enc_hidden, 2 * self.latent)
    }

    fn decoder_dims(&self) -> Vec<(usize, usize)> {
        layer_dims(self.latent, &self.decoder_hidden(), self.n_items)
    }

    fn adversary_dims(&self) -> Vec<(usize, usize)> {
        layer_dims(self.latent, &self.adv_hidden, self.n_classes)
    }
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(input);
    widths.extend_from_slice(hidden);
    widths.push(output);
    widths.windows(2).map(|w| (w[0], w[1])).collect()
}

/// One dense layer: weight `in x out`, bias `1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

/// All trainable tensors of one model, plus the config they were built for.
#[derive(Clone, Debug)]
pub struct ModelParameters<S> {
    pub config: ModelConfig,
    pub encoder: Vec<Layer<S>>,
    pub decoder: Vec<Layer<S>>,
    pub adversary: Vec<Layer<S>>,
}

/// Role tags used to salt per-layer init streams; also the checkpoint name
/// prefixes, so the values are part of the on-disk format.
const ROLES: [&str; 3] = ["encoder", "decoder", "adversary"];

impl<S: Scalar> ModelParameters<S> {
    /// Xavier-uniform initialization, keyed per role and layer so that e.g.
    /// adding an adversary head does not shift the encoder/decoder draws.
    pub fn init(config: ModelConfig, seeds: &SeedStream) -> Result<Self> {
        config.validate()?;
        let init_role = |role: usize, dims: &[(usize, usize)]| -> Vec<Layer<S>> {
            dims.iter()
                .enumerate()
                .map(|(layer, &(fan_in, fan_out))| {
                    let mut rng = seeds.derive(StreamKind::WeightInit, &[role as u64, layer as u64]);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut w = Tensor::zeros(fan_in, fan_out);
                    for v in w.data_mut() {
                        *v = S::of_f64(rng.random_range(-bound..bound));
                    }
                    Layer { w, b: Tensor::zeros(1, fan_out) }
                })
                .collect()
        };
        let encoder = init_role(0, &config.encoder_dims());
        let decoder = init_role(1, &config.decoder_dims());
        let adversary = if config.adversarial { init_role(2, &config.adversary_dims()) } else { Vec::new() };
        Ok(ModelParameters { config, encoder, decoder, adversary })
    }

    fn roles(&self) -> [&Vec<Layer<S>>; 3] {
        [&self.encoder, &self.decoder, &self.adversary]
    }

    /// `(name, tensor)` pairs in a fixed order shared by the optimizer and
    /// the checkpoint format: encoder, decoder, adversary; each layer weight
    /// before bias.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (role, layers) in ROLES.iter().zip(self.roles()) {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{role}.{i}.weight"), &layer.w));
                out.push((format!("{role}.{i}.bias"), &layer.b));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParameters::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for layers in [&mut self.encoder, &mut self.decoder, &mut self.adversary] {
            for layer in layers.iter_mut() {
                out.push(&mut layer.w);
                out.push(&mut layer.b);
            }
        }
        out
    }

    /// Register every tensor on a tape and return the graph handle.
    pub fn register(&self, tape: &mut Tape<S>) -> ModelIds {
        let mut ids = Vec::with_capacity(2 * (self.encoder.len() + self.decoder.len() + self.adversary.len()));
        for layers in self.roles() {
            for layer in layers {
                ids.push(tape.param(layer.w.clone()));
                ids.push(tape.param(layer.b.clone()));
            }
        }
        ModelIds::split(&self.config, &ids).expect("freshly registered ids always partition")
    }
}

/// Node ids of the model tensors on some tape, grouped by role.
#[derive(Clone, Debug)]
pub struct ModelIds {
    pub encoder: Vec<(NodeId, NodeId)>,
    pub decoder: Vec<(NodeId, NodeId)>,
    pub adversary: Vec<(NodeId, NodeId)>,
}

impl ModelIds {
    /// Partition a flat id slice (in [`ModelParameters::named_tensors`]
    /// order) into per-role `(weight, bias)` pairs. Used by gradient checks
    /// that register the tensors themselves.
    pub fn split(config: &ModelConfig, ids: &[NodeId]) -> Result<Self> {
        let n_enc = config.encoder_dims().len();
        let n_dec = config.decoder_dims().len();
        let n_adv = if config.adversarial { config.adversary_dims().len() } else { 0 };
        let expect = 2 * (n_enc + n_dec + n_adv);
        if ids.len() != expect {
            return Err(Error::Contract(format!("expected {expect} tensor ids, got {}", ids.len())));
        }
        let pairs: Vec<(NodeId, NodeId)> = ids.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(ModelIds {
            encoder: pairs[..n_enc].to_vec(),
            decoder: pairs[n_enc..n_enc + n_dec].to_vec(),
            adversary: pairs[n_enc + n_dec..].to_vec(),
        })
    }
}

/// Mutable RNG handles used by a training-mode forward pass.
pub struct TrainNoise<'a> {
    pub dropout: &'a mut ChaCha8Rng,
    pub latent: &'a mut ChaCha8Rng,
}

/// Nodes produced by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub mu: NodeId,
    pub log_var: NodeId,
    /// Sampled latent in training mode, `mu` in eval mode.
    pub z: NodeId,
}

/// Encoder forward pass over a batch of interaction rows (`B x n_items`).
/// `noise: None` is evaluation mode: no dropout, `z = mu`. All-zero rows are
/// legal inputs; normalization passes them through unchanged.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    x: NodeId,
    noise: Option<TrainNoise<'_>>,
) -> Result<Encoded> {
    if tape.value(x).cols() != cfg.n_items {
        return Err(Error::Dimension {
            op: "encode",
            detail: format!("input has {} columns, model expects {}", tape.value(x).cols(), cfg.n_items),
        });
    }
    let mut h = tape.l2_normalize_rows(x)?;
    let mut noise = noise;
    if let Some(n) = noise.as_mut() {
        h = tape.dropout(h, cfg.input_dropout, true, n.dropout)?;
    }
    for (i, &(w, b)) in ids.encoder.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i + 1 < ids.encoder.len() {
            h = tape.tanh(h);
        }
    }
    let mu = tape.slice_cols(h, 0, cfg.latent)?;
    let log_var = tape.slice_cols(h, cfg.latent, 2 * cfg.latent)?;
    let z = match noise {
        Some(n) => tape.gaussian_sample(mu, log_var, n.latent)?,
        None => mu,
    };
    Ok(Encoded { mu, log_var, z })
}

/// Decoder forward pass: latent rows to item logits.
pub fn decode<S: Scalar>(tape: &mut Tape<S>, ids: &ModelIds, z: NodeId) -> Result<NodeId> {
    let mut h = z;
    for (i, &(w, b)) in ids.decoder.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i + 1 < ids.decoder.len() {
            h = tape.tanh(h);
        }
    }
    Ok(h)
}

/// Adversary forward pass: latent rows through gradient reversal to class
/// logits. Forward values are unaffected by the reversal, so this same path
/// serves adversary evaluation.
pub fn adversary_logits<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    z: NodeId,
) -> Result<NodeId> {
    if !cfg.adversarial {
        return Err(Error::Contract("model has no adversary head".into()));
    }
    let mut h = tape.grl(z, S::of_f64(cfg.lambda))?;
    for (i, &(w, b)) in ids.adversary.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        if i + 1 < ids.adversary.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Multinomial negative log-likelihood, averaged over the batch:
/// `-mean_u sum_i x[u,i] * log_softmax(logits)[u,i]`.
pub fn multinomial_nll<S: Scalar>(tape: &mut Tape<S>, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let rows = tape.value(logits).rows();
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.mul(log_probs, targets)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, S::of_f64(-1.0 / rows as f64)))
}

/// KL divergence from `N(mu, exp(log_var))` to the standard normal, summed
/// per user and averaged over the batch. Always non-negative; exactly zero
/// at `mu = 0, log_var = 0`.
pub fn gaussian_kl<S: Scalar>(tape: &mut Tape<S>, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
    let rows = tape.value(mu).rows();
    let var = tape.exp(log_var);
    let mu_sq = tape.mul(mu, mu)?;
    let one_plus = tape.add_scalar(log_var, S::one());
    let t = tape.sub(one_plus, mu_sq)?;
    let t = tape.sub(t, var)?;
    let total = tape.sum_all(t);
    Ok(tape.scale(total, S::of_f64(-0.5 / rows as f64)))
}

/// Softmax cross-entropy against one-hot labels, averaged over the batch.
pub fn softmax_cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: NodeId, one_hot: NodeId) -> Result<NodeId> {
    let rows = tape.value(logits).rows();
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.mul(log_probs, one_hot)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, S::of_f64(-1.0 / rows as f64)))
}

/// Loss nodes of a full forward pass; read values with `tape.value(..)`.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub encoded: Encoded,
    pub item_logits: NodeId,
    /// Multinomial reconstruction term.
    pub recon: NodeId,
    /// Unweighted KL term.
    pub kl: NodeId,
    /// Adversarial cross-entropy, when the head is active and labels given.
    pub adv_ce: Option<NodeId>,
    /// `recon + beta * kl (+ adv_ce)` — the trained objective.
    pub total: NodeId,
}

/// Build the full training/eval objective for a batch `x` (used as both
/// encoder input and reconstruction target). `labels_one_hot` activates the
/// adversarial term on adversarial models; its gradient reaches the encoder
/// through the reversal op scaled by `-lambda`, while the head itself is
/// trained normally. Unlabeled users are passed as all-zero one-hot rows:
/// they contribute nothing to the cross-entropy (value or gradient), and the
/// mean runs over the labeled rows only. A batch with no labeled rows skips
/// the adversarial term entirely.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &ModelIds,
    cfg: &ModelConfig,
    x: &Tensor<S>,
    labels_one_hot: Option<&Tensor<S>>,
    noise: Option<TrainNoise<'_>>,
) -> Result<LossGraph> {
    let x_in = tape.input(x.clone());
    let targets = tape.input(x.clone());
    let encoded = encode(tape, ids, cfg, x_in, noise)?;
    let item_logits = decode(tape, ids, encoded.z)?;
    let recon = multinomial_nll(tape, item_logits, targets)?;
    let kl = gaussian_kl(tape, encoded.mu, encoded.log_var)?;
    let weighted_kl = tape.scale(kl, S::of_f64(cfg.beta));
    let mut total = tape.add(recon, weighted_kl)?;
    let adv_ce = match labels_one_hot {
        Some(one_hot) if cfg.adversarial => {
            let labeled =
                (0..one_hot.rows()).filter(|&r| one_hot.row(r).iter().any(|&v| v != S::zero())).count();
            if labeled == 0 {
                None
            } else {
                let class_logits = adversary_logits(tape, ids, cfg, encoded.z)?;
                let oh = tape.input(one_hot.clone());
                let log_probs = tape.log_softmax_rows(class_logits);
                let picked = tape.mul(log_probs, oh)?;
                let sum = tape.sum_all(picked);
                let ce = tape.scale(sum, S::of_f64(-1.0 / labeled as f64));
                total = tape.add(total, ce)?;
                Some(ce)
            }
        }
        _ => None,
    };
    Ok(LossGraph { encoded, item_logits, recon, kl, adv_ce, total })
}

/// One-hot encode class labels as a `len x n_classes` tensor.
pub fn one_hot<S: Scalar>(labels: &[usize], n_classes: usize) -> Result<Tensor<S>> {
    let mut out = Tensor::zeros(labels.len(), n_classes);
    for (r, &c) in labels.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::Data(format!("label {c} out of range for {n_classes} classes")));
        }
        out.set(r, c, S::one());
    }
    Ok(out)
}

/// One-hot rows for optionally-labeled users: `None` becomes an all-zero
/// row, which the adversarial loss treats as "not in the class average".
pub fn one_hot_masked<S: Scalar>(labels: &[Option<usize>], n_classes: usize) -> Result<Tensor<S>> {
    let mut out = Tensor::zeros(labels.len(), n_classes);
    for (r, &c) in labels.iter().enumerate() {
        if let Some(c) = c {
            if c >= n_classes {
                return Err(Error::Data(format!("label {c} out of range for {n_classes} classes")));
            }
            out.set(r, c, S::one());
        }
    }
    Ok(out)
}

/// Evaluation-mode latent means for a batch of interaction rows.
pub fn latent_mu<S: Scalar>(params: &ModelParameters<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x_in = tape.input(x.clone());
    let encoded = encode(&mut tape, &ids, &params.config, x_in, None)?;
    Ok(tape.value(encoded.mu).clone())
}

/// Evaluation-mode item scores (decoder logits with `z = mu`).
pub fn item_scores<S: Scalar>(params: &ModelParameters<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x_in = tape.input(x.clone());
    let encoded = encode(&mut tape, &ids, &params.config, x_in, None)?;
    let logits = decode(&mut tape, &ids, encoded.z)?;
    Ok(tape.value(logits).clone())
}

/// Evaluation-mode adversary class predictions (argmax of the head logits).
pub fn adversary_predict<S: Scalar>(params: &ModelParameters<S>, x: &Tensor<S>) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let ids = params.register(&mut tape);
    let x_in = tape.input(x.clone());
    let encoded = encode(&mut tape, &ids, &params.config, x_in, None)?;
    let logits = adversary_logits(&mut tape, &ids, &params.config, encoded.z)?;
    Ok(argmax_rows(tape.value(logits)))
}

/// Row-wise argmax with ties broken toward the smaller index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Top-`k` item ids per user from score rows, skipping excluded items.
/// Ties break toward the smaller item id so rankings are deterministic.
///
/// `exclude(row, item)` marks items to leave out of the ranking (typically
/// the user's own input interactions).
pub fn rank_top_k<S: Scalar>(
    scores: &Tensor<S>,
    k: usize,
    exclude: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<u32>> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut order: Vec<u32> = (0..row.len() as u32).filter(|&i| !exclude(r, i as usize)).collect();
            order.sort_by(|&a, &b| {
                let (va, vb) = (row[a as usize], row[b as usize]);
                vb.partial_cmp(&va).expect("scores are finite").then(a.cmp(&b))
            });
            order.truncate(k);
            order
        })
        .collect()
}

/// Recommend top-`k` unseen items for each interaction row. Items with a
/// nonzero entry in `x` are excluded when `exclude_seen` is set.
pub fn recommend<S: Scalar>(
    params: &ModelParameters<S>,
    x: &Tensor<S>,
    k: usize,
    exclude_seen: bool,
) -> Result<Vec<Vec<u32>>> {
    let scores = item_scores(params, x)?;
    Ok(rank_top_k(&scores, k, |r, i| exclude_seen && x.at(r, i) != S::zero()))
}
