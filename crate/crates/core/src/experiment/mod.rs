//! Experiment orchestration: the six commands behind the `advmv` binary.
//!
//! `genseed` writes a synthetic biased dataset, `preprocess` builds and
//! caches the interaction matrix, `run` trains the model families across
//! all folds, `attack` probes frozen checkpoints with post-hoc classifier
//! heads, `sweep` repeats train+attack over a list of gradient reversal
//! scales, and `report` condenses everything into delimited tables plus a
//! structured mirror.
//!
//! Three model families are reported: `multvae-best` and `multvae-last` are
//! the best-validation-NDCG and final-epoch checkpoints of one plain run,
//! and `adv-multvae` is the adversarially trained model at its configured
//! selection rule. Every command is idempotent: completed units are
//! recorded in the output manifest and skipped on rerun, and rewritten
//! files are byte-identical for a fixed configuration and seed.

pub mod artifacts;
pub mod config;
pub mod manifest;
pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{attack, extract_latents, AttackReport, RowView};
use crate::checkpoint;
use crate::data::{
    assign_folds, fold_split, parse_interactions, parse_labels, FoldSplit, InteractionMatrix,
};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts, RecallDenominator};
use crate::model::ModelParameters;
use crate::stats::{mcnemar, wilcoxon_signed_rank};
use crate::train::{evaluate_adversary, evaluate_ranking, train, SelectionRule, TrainOutput};

use artifacts::{
    fmt_f, read_attack_users, read_selected, read_sweep_rows, read_train_log, write_attack_heads,
    write_attack_users, write_selected, write_sweep_rows, write_train_log, AttackHeadRow,
    AttackUserRow, SelectedMap, SelectedScores, SweepRow,
};
pub use config::ExperimentConfig;
use manifest::Manifest;
pub use synth::SyntheticOutput;

/// Significance marker attached to mean metrics whose per-user paired
/// Wilcoxon test against `multvae-best` comes out below alpha.
const SIGNIFICANCE_MARK: char = '\u{2020}'; // dagger
const ALPHA: f64 = 0.05;

// ── families ────────────────────────────────────────────────────────────

/// A training run: the plain model or the adversarial one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainFamily {
    Multvae,
    AdvMultvae,
}

impl TrainFamily {
    pub const ALL: [TrainFamily; 2] = [TrainFamily::Multvae, TrainFamily::AdvMultvae];

    pub fn name(self) -> &'static str {
        match self {
            TrainFamily::Multvae => "multvae",
            TrainFamily::AdvMultvae => "adv-multvae",
        }
    }

    fn adversarial(self) -> bool {
        matches!(self, TrainFamily::AdvMultvae)
    }
}

impl FromStr for TrainFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multvae" => Ok(TrainFamily::Multvae),
            "adv-multvae" => Ok(TrainFamily::AdvMultvae),
            other => Err(Error::Config(format!(
                "unknown training family {other:?} (multvae, adv-multvae)"
            ))),
        }
    }
}

/// A reported model: a training family pinned to one selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFamily {
    MultvaeBest,
    MultvaeLast,
    AdvMultvae,
}

impl ReportFamily {
    pub const ALL: [ReportFamily; 3] =
        [ReportFamily::MultvaeBest, ReportFamily::MultvaeLast, ReportFamily::AdvMultvae];

    pub fn name(self) -> &'static str {
        match self {
            ReportFamily::MultvaeBest => "multvae-best",
            ReportFamily::MultvaeLast => "multvae-last",
            ReportFamily::AdvMultvae => "adv-multvae",
        }
    }

    fn train_family(self) -> TrainFamily {
        match self {
            ReportFamily::AdvMultvae => TrainFamily::AdvMultvae,
            _ => TrainFamily::Multvae,
        }
    }

    fn rule(self, cfg: &ExperimentConfig) -> Result<SelectionRule> {
        Ok(match self {
            ReportFamily::MultvaeBest => SelectionRule::BestNdcg,
            ReportFamily::MultvaeLast => SelectionRule::LastEpoch,
            ReportFamily::AdvMultvae => cfg.selection_rule()?,
        })
    }
}

impl FromStr for ReportFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multvae-best" => Ok(ReportFamily::MultvaeBest),
            "multvae-last" => Ok(ReportFamily::MultvaeLast),
            "adv-multvae" => Ok(ReportFamily::AdvMultvae),
            other => Err(Error::Config(format!(
                "unknown report family {other:?} (multvae-best, multvae-last, adv-multvae)"
            ))),
        }
    }
}

// ── output layout ───────────────────────────────────────────────────────

/// All paths under the output directory, in one place.
struct Layout {
    out: PathBuf,
}

impl Layout {
    fn new(cfg: &ExperimentConfig) -> Layout {
        Layout { out: cfg.out.clone() }
    }

    fn cache(&self) -> PathBuf {
        self.out.join("dataset.cache")
    }

    fn fold_dir(&self, family: TrainFamily, fold: usize) -> PathBuf {
        self.out.join("runs").join(family.name()).join(format!("fold{fold}"))
    }

    fn checkpoint(&self, dir: &Path, rule: SelectionRule) -> PathBuf {
        dir.join(format!("{rule}.ckpt"))
    }

    fn attack_dir(&self, family: ReportFamily) -> PathBuf {
        self.out.join("attacks").join(family.name())
    }

    fn sweep_fold_dir(&self, lambda: f64, fold: usize) -> PathBuf {
        self.out.join("sweep").join(format!("lambda-{}", fmt_f(lambda))).join(format!("fold{fold}"))
    }

    fn sweep_attack_dir(&self, lambda: f64) -> PathBuf {
        self.out.join("sweep").join(format!("lambda-{}", fmt_f(lambda))).join("attack")
    }

    fn sweep_results(&self) -> PathBuf {
        self.out.join("sweep").join("results.tsv")
    }

    fn report_dir(&self) -> PathBuf {
        self.out.join("report")
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ── shared plumbing ─────────────────────────────────────────────────────

fn open_manifest(cfg: &ExperimentConfig) -> Result<Manifest> {
    Manifest::open(&cfg.out, cfg.fingerprint())
}

/// Load the cached matrix, verifying it against the manifest.
fn load_cache(cfg: &ExperimentConfig, manifest: &mut Manifest) -> Result<InteractionMatrix> {
    let path = Layout::new(cfg).cache();
    if !path.exists() {
        return Err(Error::Data(format!(
            "dataset cache {} not found; run the preprocess command first",
            path.display()
        )));
    }
    let matrix = InteractionMatrix::read_cache(&path)?;
    manifest.bind_dataset(matrix.fingerprint())?;
    Ok(matrix)
}

/// The seeded user partition and per-fold splits.
fn build_splits(cfg: &ExperimentConfig, matrix: &InteractionMatrix) -> Result<Vec<FoldSplit>> {
    let folds = assign_folds(matrix.n_users(), cfg.folds, &cfg.seeds())?;
    (0..cfg.folds).map(|f| fold_split(matrix, &folds, f, &cfg.seeds())).collect()
}

fn labeled_users(matrix: &InteractionMatrix, users: &[usize]) -> Vec<usize> {
    users.iter().copied().filter(|&u| matrix.known_label(u).is_some()).collect()
}

// ── genseed ─────────────────────────────────────────────────────────────

/// Generate the synthetic biased dataset at the configured dataset paths.
pub fn cmd_genseed(cfg: &ExperimentConfig) -> Result<SyntheticOutput> {
    synth::write(cfg)
}

// ── preprocess ──────────────────────────────────────────────────────────

/// Corpus statistics printed after preprocessing.
#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub name: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// Fraction of filled cells in the binarized matrix.
    pub density: f64,
    /// Per-class user counts with the configured class values.
    pub class_counts: Vec<(String, usize)>,
    pub unlabeled: usize,
    pub fingerprint: u64,
    pub cache_path: PathBuf,
    /// Whether an existing cache was reused instead of recomputed.
    pub cached: bool,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "dataset {}: {} users, {} items, {} interactions (density {:.3}%)",
            self.name,
            self.users,
            self.items,
            self.interactions,
            100.0 * self.density
        )?;
        let classes = self
            .class_counts
            .iter()
            .map(|(name, n)| format!("{name} {n}"))
            .collect::<Vec<_>>()
            .join(", ");
        writeln!(f, "classes: {classes}; unlabeled {}", self.unlabeled)?;
        write!(
            f,
            "cache: {} (fingerprint {:016x}{})",
            self.cache_path.display(),
            self.fingerprint,
            if self.cached { ", reused" } else { "" }
        )
    }
}

fn summarize(
    cfg: &ExperimentConfig,
    matrix: &InteractionMatrix,
    cache_path: PathBuf,
    cached: bool,
) -> DatasetSummary {
    let counts = matrix.class_counts();
    let class_counts = cfg
        .dataset
        .label_format
        .classes
        .iter()
        .zip(&counts)
        .map(|(name, &n)| (name.clone(), n))
        .collect();
    DatasetSummary {
        name: cfg.dataset.name.clone(),
        users: matrix.n_users(),
        items: matrix.n_items(),
        interactions: matrix.n_interactions(),
        density: matrix.n_interactions() as f64 / (matrix.n_users() * matrix.n_items()) as f64,
        class_counts,
        unlabeled: matrix.n_unlabeled(),
        fingerprint: matrix.fingerprint(),
        cache_path,
        cached,
    }
}

/// Parse the raw files, build the filtered matrix and cache it. With a
/// complete cache already present nothing is recomputed.
pub fn cmd_preprocess(cfg: &ExperimentConfig) -> Result<DatasetSummary> {
    let layout = Layout::new(cfg);
    let mut manifest = open_manifest(cfg)?;
    let cache = layout.cache();
    if manifest.is_done("preprocess") && cache.exists() {
        let matrix = load_cache(cfg, &mut manifest)?;
        return Ok(summarize(cfg, &matrix, cache, true));
    }
    let interactions_text = std::fs::read_to_string(&cfg.dataset.interactions)
        .map_err(|e| Error::io(&cfg.dataset.interactions, e))?;
    let labels_text = std::fs::read_to_string(&cfg.dataset.labels)
        .map_err(|e| Error::io(&cfg.dataset.labels, e))?;
    let interactions = parse_interactions(&interactions_text, &cfg.interaction_format())?;
    let labels = parse_labels(&labels_text, &cfg.label_format())?;
    let matrix = InteractionMatrix::build(
        &interactions,
        &labels,
        cfg.n_classes(),
        &cfg.preprocess_config(),
        &cfg.seeds(),
    )?;
    matrix.write_cache(&cache)?;
    manifest.bind_dataset(matrix.fingerprint())?;
    manifest.mark_done("preprocess")?;
    Ok(summarize(cfg, &matrix, cache, false))
}

// ── run ─────────────────────────────────────────────────────────────────

/// One trained (family, fold) unit.
#[derive(Clone, Debug)]
pub struct RunUnit {
    pub unit: String,
    /// True when the manifest already had this unit and nothing was done.
    pub cached: bool,
    /// Selection-rule name to validation scores of the kept checkpoints.
    pub selected: SelectedMap,
}

/// Everything `run` touched, in fold order per family.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub units: Vec<RunUnit>,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, u) in self.units.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            let state = if u.cached { " (cached)" } else { "" };
            write!(f, "{}{state}:", u.unit)?;
            for (rule, s) in &u.selected {
                write!(f, " {rule} epoch {} val-ndcg {:.4}", s.epoch, s.val_ndcg)?;
                if let Some(b) = s.val_adv_bacc {
                    write!(f, " val-adv-bacc {b:.4}")?;
                }
                write!(f, ";")?;
            }
        }
        Ok(())
    }
}

/// Train one family on one fold and persist checkpoints, log and scores.
fn run_fold(
    cfg: &ExperimentConfig,
    matrix: &InteractionMatrix,
    split: &FoldSplit,
    family: TrainFamily,
    lambda: f64,
    dir: &Path,
) -> Result<SelectedMap> {
    ensure_dir(dir)?;
    let model_cfg = cfg.model_config(matrix.n_items(), family.adversarial(), lambda);
    let train_cfg = cfg.train_config();
    let out: TrainOutput<f64> = train(matrix, split, &model_cfg, &train_cfg, &cfg.seeds())?;
    let layout = Layout::new(cfg);
    let mut selected = SelectedMap::new();
    checkpoint::save(&out.best_ndcg.params, &layout.checkpoint(dir, SelectionRule::BestNdcg))?;
    selected.insert(
        SelectionRule::BestNdcg.to_string(),
        SelectedScores {
            epoch: out.best_ndcg.epoch,
            val_ndcg: out.best_ndcg.val_ndcg,
            val_adv_bacc: out.best_ndcg.val_adv_bacc,
        },
    );
    checkpoint::save(&out.last.params, &layout.checkpoint(dir, SelectionRule::LastEpoch))?;
    selected.insert(
        SelectionRule::LastEpoch.to_string(),
        SelectedScores {
            epoch: out.last.epoch,
            val_ndcg: out.last.val_ndcg,
            val_adv_bacc: out.last.val_adv_bacc,
        },
    );
    if let Some(m) = &out.min_adv_bacc {
        checkpoint::save(&m.params, &layout.checkpoint(dir, SelectionRule::MinAdvBacc))?;
        selected.insert(
            SelectionRule::MinAdvBacc.to_string(),
            SelectedScores { epoch: m.epoch, val_ndcg: m.val_ndcg, val_adv_bacc: m.val_adv_bacc },
        );
    }
    write_train_log(&dir.join("train_log.tsv"), &out.log)?;
    write_selected(&dir.join("selected.toml"), &selected)?;
    Ok(selected)
}

/// Train the requested families (both when `family` is `None`) across all
/// folds, skipping units the manifest already records.
pub fn cmd_run(cfg: &ExperimentConfig, family: Option<TrainFamily>) -> Result<RunSummary> {
    let layout = Layout::new(cfg);
    let mut manifest = open_manifest(cfg)?;
    let matrix = load_cache(cfg, &mut manifest)?;
    let splits = build_splits(cfg, &matrix)?;
    let families: Vec<TrainFamily> = match family {
        Some(f) => vec![f],
        None => TrainFamily::ALL.to_vec(),
    };
    let mut units = Vec::new();
    for fam in families {
        for split in &splits {
            let unit = format!("run/{}/fold{}", fam.name(), split.fold);
            let dir = layout.fold_dir(fam, split.fold);
            if manifest.is_done(&unit) {
                let selected = read_selected(&dir.join("selected.toml"))?;
                units.push(RunUnit { unit, cached: true, selected });
                continue;
            }
            let selected = run_fold(cfg, &matrix, split, fam, cfg.model.lambda, &dir)?;
            manifest.mark_done(&unit)?;
            eprintln!("advmv: trained {unit}");
            units.push(RunUnit { unit, cached: false, selected });
        }
    }
    Ok(RunSummary { units })
}

// ── attack ──────────────────────────────────────────────────────────────

/// Reported-head scores of one attacked (family, fold) unit.
#[derive(Clone, Debug)]
pub struct AttackUnit {
    pub unit: String,
    pub cached: bool,
    pub test_accuracy: f64,
    pub test_balanced_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct AttackSummary {
    pub units: Vec<AttackUnit>,
}

impl fmt::Display for AttackSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, u) in self.units.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            let state = if u.cached { " (cached)" } else { "" };
            write!(
                f,
                "{}{state}: test acc {:.4}, test bacc {:.4}",
                u.unit, u.test_accuracy, u.test_balanced_accuracy
            )?;
        }
        Ok(())
    }
}

/// Probe one frozen checkpoint: train the attacker heads on the fold's
/// training-user latents and export per-user and per-head tables. The
/// checkpoint file must be byte-identical before and after — the attack
/// only ever reads the model.
fn attack_checkpoint(
    cfg: &ExperimentConfig,
    matrix: &InteractionMatrix,
    split: &FoldSplit,
    ckpt: &Path,
    users_path: &Path,
    heads_path: &Path,
) -> Result<AttackReport> {
    if !ckpt.exists() {
        return Err(Error::Data(format!(
            "checkpoint {} not found; run the run (or sweep) command first",
            ckpt.display()
        )));
    }
    let frozen = std::fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
    let params: ModelParameters<f64> = checkpoint::load(ckpt)?;
    let seeds = cfg.seeds();
    let train_users = labeled_users(matrix, &split.train_base);
    let eval_users = labeled_users(matrix, &split.test);
    if eval_users.is_empty() {
        return Err(Error::Data(format!("fold {}: no labeled test users to attack", split.fold)));
    }
    let train_latents = extract_latents(&params, matrix, &train_users, RowView::Full, &seeds)?;
    let eval_latents = extract_latents(&params, matrix, &eval_users, RowView::EvalInput, &seeds)?;
    let train_labels: Vec<usize> = train_users.iter().map(|&u| matrix.label(u) as usize).collect();
    let eval_labels: Vec<usize> = eval_users.iter().map(|&u| matrix.label(u) as usize).collect();
    let report = attack(
        &train_latents,
        &train_labels,
        &eval_latents,
        &eval_labels,
        matrix.n_classes() as usize,
        &cfg.attacker_config(split.fold),
        &seeds,
    )?;
    let after = std::fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
    if frozen != after {
        return Err(Error::Contract(format!(
            "checkpoint {} changed during the attack; the model must stay frozen",
            ckpt.display()
        )));
    }
    let rows: Vec<AttackUserRow> = eval_users
        .iter()
        .enumerate()
        .map(|(i, &u)| AttackUserRow {
            user: matrix.user_ids()[u],
            label: eval_labels[i],
            predicted: report.predictions[i],
            mu: eval_latents.row(i).to_vec(),
        })
        .collect();
    write_attack_users(users_path, &rows, eval_latents.cols())?;
    let head_rows: Vec<AttackHeadRow> = report
        .heads
        .iter()
        .enumerate()
        .map(|(i, h)| AttackHeadRow {
            head: i,
            best_epoch: h.best_epoch,
            train_accuracy: h.train_accuracy,
            train_balanced_accuracy: h.train_balanced_accuracy,
            val_balanced_accuracy: h.val_balanced_accuracy,
            test_accuracy: h.test_accuracy,
            test_balanced_accuracy: h.test_balanced_accuracy,
            reported: i == report.reported,
        })
        .collect();
    write_attack_heads(heads_path, &head_rows)?;
    Ok(report)
}

/// Attack the requested report families (all three when `family` is
/// `None`) on every fold.
pub fn cmd_attack(cfg: &ExperimentConfig, family: Option<ReportFamily>) -> Result<AttackSummary> {
    let layout = Layout::new(cfg);
    let mut manifest = open_manifest(cfg)?;
    let matrix = load_cache(cfg, &mut manifest)?;
    let splits = build_splits(cfg, &matrix)?;
    let families: Vec<ReportFamily> = match family {
        Some(f) => vec![f],
        None => ReportFamily::ALL.to_vec(),
    };
    let mut units = Vec::new();
    for fam in families {
        let rule = fam.rule(cfg)?;
        let dir = layout.attack_dir(fam);
        ensure_dir(&dir)?;
        for split in &splits {
            let unit = format!("attack/{}/fold{}", fam.name(), split.fold);
            let heads_path = dir.join(format!("fold{}_heads.tsv", split.fold));
            if manifest.is_done(&unit) {
                let heads = artifacts::read_attack_heads(&heads_path)?;
                let reported = heads
                    .iter()
                    .find(|h| h.reported)
                    .ok_or_else(|| Error::Data(format!("{}: no reported head", heads_path.display())))?;
                units.push(AttackUnit {
                    unit,
                    cached: true,
                    test_accuracy: reported.test_accuracy,
                    test_balanced_accuracy: reported.test_balanced_accuracy,
                });
                continue;
            }
            let ckpt = layout.checkpoint(&layout.fold_dir(fam.train_family(), split.fold), rule);
            let users_path = dir.join(format!("fold{}_users.tsv", split.fold));
            let report = attack_checkpoint(cfg, &matrix, split, &ckpt, &users_path, &heads_path)?;
            manifest.mark_done(&unit)?;
            eprintln!("advmv: attacked {unit}");
            let scores = report.reported_scores();
            units.push(AttackUnit {
                unit,
                cached: false,
                test_accuracy: scores.test_accuracy,
                test_balanced_accuracy: scores.test_balanced_accuracy,
            });
        }
    }
    Ok(AttackSummary { units })
}

// ── sweep ───────────────────────────────────────────────────────────────

/// Train the adversarial family at every configured gradient reversal
/// scale, attack each selected checkpoint, and collect one row per
/// (scale, fold) into `sweep/results.tsv`.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    if cfg.sweep.lambdas.is_empty() {
        return Err(Error::Config("sweep.lambdas is empty; list at least one value".into()));
    }
    let layout = Layout::new(cfg);
    let mut manifest = open_manifest(cfg)?;
    let matrix = load_cache(cfg, &mut manifest)?;
    let splits = build_splits(cfg, &matrix)?;
    let rule = cfg.selection_rule()?;
    let k = cfg.train.eval_k;
    let mut rows = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        let attack_dir = layout.sweep_attack_dir(lambda);
        ensure_dir(&attack_dir)?;
        for split in &splits {
            let fold = split.fold;
            let dir = layout.sweep_fold_dir(lambda, fold);
            let train_unit = format!("sweep/lambda-{}/fold{fold}", fmt_f(lambda));
            if !manifest.is_done(&train_unit) {
                run_fold(cfg, &matrix, split, TrainFamily::AdvMultvae, lambda, &dir)?;
                manifest.mark_done(&train_unit)?;
                eprintln!("advmv: trained {train_unit}");
            }
            let ckpt = layout.checkpoint(&dir, rule);
            let users_path = attack_dir.join(format!("fold{fold}_users.tsv"));
            let heads_path = attack_dir.join(format!("fold{fold}_heads.tsv"));
            let attack_unit = format!("sweep-attack/lambda-{}/fold{fold}", fmt_f(lambda));
            if !manifest.is_done(&attack_unit) {
                attack_checkpoint(cfg, &matrix, split, &ckpt, &users_path, &heads_path)?;
                manifest.mark_done(&attack_unit)?;
                eprintln!("advmv: attacked {attack_unit}");
            }
            // Score the selected checkpoint from its persisted artifacts so
            // cached and fresh units produce identical rows.
            let selected = read_selected(&dir.join("selected.toml"))?;
            let scores = selected.get(&rule.to_string()).ok_or_else(|| {
                Error::Data(format!("{}: missing {rule} scores", dir.display()))
            })?;
            let params: ModelParameters<f64> = checkpoint::load(&ckpt)?;
            let ranking = evaluate_ranking(
                &params,
                &matrix,
                &split.test,
                k,
                RecallDenominator::CappedAtK,
                &cfg.seeds(),
            )?;
            let adversary_bacc = evaluate_adversary(&params, &matrix, &split.test, &cfg.seeds())?;
            let (attacker_acc, attacker_bacc) = attacker_test_scores(&users_path)?;
            rows.push(SweepRow {
                lambda,
                fold,
                epoch: scores.epoch,
                val_ndcg: scores.val_ndcg,
                test_ndcg: ranking.mean_ndcg,
                test_recall: ranking.mean_recall,
                adversary_bacc,
                attacker_acc,
                attacker_bacc,
            });
        }
    }
    write_sweep_rows(&layout.sweep_results(), &rows)?;
    Ok(rows)
}

/// Accuracy and balanced accuracy of the reported head's predictions in a
/// per-user attack export.
fn attacker_test_scores(users_path: &Path) -> Result<(f64, f64)> {
    let rows = read_attack_users(users_path)?;
    let n_classes = rows.iter().map(|r| r.label.max(r.predicted) + 1).max().unwrap_or(2).max(2);
    let mut counts = ConfusionCounts::new(n_classes);
    for r in &rows {
        counts.observe(r.label, r.predicted);
    }
    Ok((counts.accuracy()?, counts.balanced_accuracy()?))
}

// ── report ──────────────────────────────────────────────────────────────

/// Everything the report knows about one family, mirrored into the
/// structured output file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyReport {
    pub name: String,
    /// Selection rule behind this family's checkpoints.
    pub checkpoint: String,
    /// Means over the test folds.
    pub ndcg: f64,
    pub recall: f64,
    pub attacker_acc: f64,
    pub attacker_bacc: f64,
    /// The model's own adversary head (adversarial family only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adversary_bacc: Option<f64>,
    /// Per-fold values behind the means.
    pub fold_ndcg: Vec<f64>,
    pub fold_recall: Vec<f64>,
    /// Selected checkpoint's validation NDCG per fold.
    pub fold_val_ndcg: Vec<f64>,
    pub fold_attacker_acc: Vec<f64>,
    pub fold_attacker_bacc: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fold_adversary_bacc: Option<Vec<f64>>,
    /// Two-sided Wilcoxon p-values of per-user paired differences against
    /// `multvae-best` (absent on the baseline itself).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wilcoxon_ndcg_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ndcg_significant: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wilcoxon_recall_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall_significant: Option<bool>,
}

/// One pairwise McNemar comparison of attacker per-user correctness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McnemarReport {
    pub a: String,
    pub b: String,
    /// Users only the first attacker classified correctly.
    pub a_only: u64,
    /// Users only the second attacker classified correctly.
    pub b_only: u64,
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub exact: bool,
}

/// Per-scale means over folds, for the reversal-scale curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambda: f64,
    pub val_ndcg: f64,
    pub test_ndcg: f64,
    pub test_recall: f64,
    pub adversary_bacc: f64,
    pub attacker_acc: f64,
    pub attacker_bacc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub seed: u64,
    pub folds: usize,
    pub k: usize,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    /// Provenance note carried in every header: the settings are this
    /// implementation's own defaults.
    pub note: String,
}

/// The full evaluation, written as delimited tables plus this structured
/// mirror (`report/summary.toml`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub meta: ReportMeta,
    pub family: Vec<FamilyReport>,
    pub mcnemar: Vec<McnemarReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub sweep: Vec<SweepSummary>,
}

impl EvaluationReport {
    /// Parse a structured report file back.
    pub fn read(path: &Path) -> Result<EvaluationReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn family(&self, name: &str) -> Option<&FamilyReport> {
        self.family.iter().find(|f| f.name == name)
    }
}

impl fmt::Display for EvaluationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", render_summary_tsv(self))
    }
}

/// Render the human summary table (also written to `report/summary.tsv`).
fn render_summary_tsv(report: &EvaluationReport) -> String {
    use std::fmt::Write;
    let m = &report.meta;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "# advmv report: dataset {}, seed {}, {}-fold cross-validation, k={}",
        m.dataset, m.seed, m.folds, m.k
    );
    let _ = writeln!(s, "# {}", m.note);
    let _ = writeln!(
        s,
        "# {SIGNIFICANCE_MARK} marks a two-sided Wilcoxon p < {ALPHA} against multvae-best \
         on paired per-user values"
    );
    let k = m.k;
    let _ = writeln!(
        s,
        "family\tcheckpoint\tndcg@{k}\trecall@{k}\tattacker_acc\tattacker_bacc\tadversary_bacc"
    );
    for fam in &report.family {
        let mark = |sig: Option<bool>| if sig == Some(true) { SIGNIFICANCE_MARK.to_string() } else { String::new() };
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}{}\t{:.4}{}\t{:.4}\t{:.4}\t{}",
            fam.name,
            fam.checkpoint,
            fam.ndcg,
            mark(fam.ndcg_significant),
            fam.recall,
            mark(fam.recall_significant),
            fam.attacker_acc,
            fam.attacker_bacc,
            fam.adversary_bacc.map(|b| format!("{b:.4}")).unwrap_or_else(|| "-".into()),
        );
    }
    s
}

/// Per-family per-fold evaluation pulled together by `cmd_report`.
struct FamilyEval {
    fam: ReportFamily,
    rule: SelectionRule,
    fold_ndcg: Vec<f64>,
    fold_recall: Vec<f64>,
    fold_val_ndcg: Vec<f64>,
    fold_attacker_acc: Vec<f64>,
    fold_attacker_bacc: Vec<f64>,
    fold_adversary_bacc: Option<Vec<f64>>,
    /// Concatenated per-user ranking metrics across folds, in a fixed
    /// (fold, user) order shared by all families.
    user_ndcg: Vec<f64>,
    user_recall: Vec<f64>,
    /// Concatenated attacker per-user correctness across folds.
    attacker_correct: Vec<bool>,
    /// Concatenated attacked user ids, for cross-family alignment checks.
    attacked_users: Vec<u64>,
}

/// Evaluate checkpoints, aggregate attacks, run the significance tests and
/// write the report files. Requires completed `run` and `attack` commands;
/// includes the sweep table when sweep results exist.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<EvaluationReport> {
    let layout = Layout::new(cfg);
    let mut manifest = open_manifest(cfg)?;
    let matrix = load_cache(cfg, &mut manifest)?;
    let splits = build_splits(cfg, &matrix)?;

    // Fail with a to-do list rather than a missing-file error.
    let mut missing = Vec::new();
    for fam in TrainFamily::ALL {
        for fold in 0..cfg.folds {
            let unit = format!("run/{}/fold{fold}", fam.name());
            if !manifest.is_done(&unit) {
                missing.push(unit);
            }
        }
    }
    for fam in ReportFamily::ALL {
        for fold in 0..cfg.folds {
            let unit = format!("attack/{}/fold{fold}", fam.name());
            if !manifest.is_done(&unit) {
                missing.push(unit);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "incomplete experiment, missing: {}; run the run and attack commands first",
            missing.join(", ")
        )));
    }

    let k = cfg.train.eval_k;
    let mut evals = Vec::new();
    for fam in ReportFamily::ALL {
        let rule = fam.rule(cfg)?;
        let mut e = FamilyEval {
            fam,
            rule,
            fold_ndcg: Vec::new(),
            fold_recall: Vec::new(),
            fold_val_ndcg: Vec::new(),
            fold_attacker_acc: Vec::new(),
            fold_attacker_bacc: Vec::new(),
            fold_adversary_bacc: fam.train_family().adversarial().then(Vec::new),
            user_ndcg: Vec::new(),
            user_recall: Vec::new(),
            attacker_correct: Vec::new(),
            attacked_users: Vec::new(),
        };
        for split in &splits {
            let dir = layout.fold_dir(fam.train_family(), split.fold);
            let ckpt = layout.checkpoint(&dir, rule);
            let params: ModelParameters<f64> = checkpoint::load(&ckpt)?;
            let ranking = evaluate_ranking(
                &params,
                &matrix,
                &split.test,
                k,
                RecallDenominator::CappedAtK,
                &cfg.seeds(),
            )?;
            e.fold_ndcg.push(ranking.mean_ndcg);
            e.fold_recall.push(ranking.mean_recall);
            e.user_ndcg.extend_from_slice(&ranking.per_user_ndcg);
            e.user_recall.extend_from_slice(&ranking.per_user_recall);
            let selected = read_selected(&dir.join("selected.toml"))?;
            let scores = selected.get(&rule.to_string()).ok_or_else(|| {
                Error::Data(format!("{}: missing {rule} scores", dir.display()))
            })?;
            e.fold_val_ndcg.push(scores.val_ndcg);
            if let Some(bacc) = &mut e.fold_adversary_bacc {
                bacc.push(evaluate_adversary(&params, &matrix, &split.test, &cfg.seeds())?);
            }
            let users_path =
                layout.attack_dir(fam).join(format!("fold{}_users.tsv", split.fold));
            let rows = read_attack_users(&users_path)?;
            let (acc, bacc) = attacker_test_scores(&users_path)?;
            e.fold_attacker_acc.push(acc);
            e.fold_attacker_bacc.push(bacc);
            for r in &rows {
                e.attacker_correct.push(r.label == r.predicted);
                e.attacked_users.push(r.user);
            }
        }
        evals.push(e);
    }

    // All families attack the same users in the same order; anything else
    // means artifacts from different splits were mixed.
    for e in &evals[1..] {
        if e.attacked_users != evals[0].attacked_users {
            return Err(Error::Data(format!(
                "attack exports of {} and {} cover different users; \
                 the output directory mixes incompatible artifacts",
                evals[0].fam.name(),
                e.fam.name()
            )));
        }
    }

    let baseline = &evals[0];
    let mut families = Vec::new();
    for e in &evals {
        let is_baseline = e.fam == ReportFamily::MultvaeBest;
        let (wn, wr) = if is_baseline {
            (None, None)
        } else {
            (
                Some(wilcoxon_signed_rank(&e.user_ndcg, &baseline.user_ndcg, ALPHA)?),
                Some(wilcoxon_signed_rank(&e.user_recall, &baseline.user_recall, ALPHA)?),
            )
        };
        families.push(FamilyReport {
            name: e.fam.name().to_string(),
            checkpoint: e.rule.to_string(),
            ndcg: metrics::mean(&e.fold_ndcg)?,
            recall: metrics::mean(&e.fold_recall)?,
            attacker_acc: metrics::mean(&e.fold_attacker_acc)?,
            attacker_bacc: metrics::mean(&e.fold_attacker_bacc)?,
            adversary_bacc: match &e.fold_adversary_bacc {
                Some(b) => Some(metrics::mean(b)?),
                None => None,
            },
            fold_ndcg: e.fold_ndcg.clone(),
            fold_recall: e.fold_recall.clone(),
            fold_val_ndcg: e.fold_val_ndcg.clone(),
            fold_attacker_acc: e.fold_attacker_acc.clone(),
            fold_attacker_bacc: e.fold_attacker_bacc.clone(),
            fold_adversary_bacc: e.fold_adversary_bacc.clone(),
            wilcoxon_ndcg_p: wn.as_ref().map(|w| w.p_value),
            ndcg_significant: wn.as_ref().map(|w| w.significant),
            wilcoxon_recall_p: wr.as_ref().map(|w| w.p_value),
            recall_significant: wr.as_ref().map(|w| w.significant),
        });
    }

    let mut mcnemar_rows = Vec::new();
    for i in 0..evals.len() {
        for j in (i + 1)..evals.len() {
            let r = mcnemar(&evals[i].attacker_correct, &evals[j].attacker_correct, ALPHA)?;
            mcnemar_rows.push(McnemarReport {
                a: evals[i].fam.name().to_string(),
                b: evals[j].fam.name().to_string(),
                a_only: r.a_only,
                b_only: r.b_only,
                statistic: r.statistic,
                p_value: r.p_value,
                significant: r.significant,
                exact: r.exact,
            });
        }
    }

    let sweep = match read_sweep_summary(&layout)? {
        Some(s) => s,
        None => Vec::new(),
    };

    let report = EvaluationReport {
        meta: ReportMeta {
            dataset: cfg.dataset.name.clone(),
            seed: cfg.seed,
            folds: cfg.folds,
            k,
            config_fingerprint: format!("{:016x}", cfg.fingerprint()),
            dataset_fingerprint: format!("{:016x}", matrix.fingerprint()),
            note: "hyperparameters and grids are this implementation's own defaults".into(),
        },
        family: families,
        mcnemar: mcnemar_rows,
        sweep,
    };
    write_report_files(cfg, &layout, &report)?;
    Ok(report)
}

/// Aggregate `sweep/results.tsv` into per-scale means, if it exists.
fn read_sweep_summary(layout: &Layout) -> Result<Option<Vec<SweepSummary>>> {
    let path = layout.sweep_results();
    if !path.exists() {
        return Ok(None);
    }
    let rows = read_sweep_rows(&path)?;
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<&SweepRow>> = HashMap::new();
    for r in &rows {
        let key = r.lambda.to_bits();
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    for key in order {
        let g = &groups[&key];
        let mean = |f: fn(&SweepRow) -> f64| -> Result<f64> {
            metrics::mean(&g.iter().map(|r| f(r)).collect::<Vec<f64>>())
        };
        out.push(SweepSummary {
            lambda: f64::from_bits(key),
            val_ndcg: mean(|r| r.val_ndcg)?,
            test_ndcg: mean(|r| r.test_ndcg)?,
            test_recall: mean(|r| r.test_recall)?,
            adversary_bacc: mean(|r| r.adversary_bacc)?,
            attacker_acc: mean(|r| r.attacker_acc)?,
            attacker_bacc: mean(|r| r.attacker_bacc)?,
        });
    }
    Ok(Some(out))
}

/// Write `summary.tsv`, `summary.toml`, per-family epoch series, the
/// McNemar table and (when sweep data exists) the reversal-scale series.
fn write_report_files(
    cfg: &ExperimentConfig,
    layout: &Layout,
    report: &EvaluationReport,
) -> Result<()> {
    use std::fmt::Write;
    let dir = layout.report_dir();
    ensure_dir(&dir)?;

    let summary_tsv = dir.join("summary.tsv");
    std::fs::write(&summary_tsv, render_summary_tsv(report))
        .map_err(|e| Error::io(&summary_tsv, e))?;

    let toml_text = toml::to_string(report)
        .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
    let summary_toml = dir.join("summary.toml");
    std::fs::write(&summary_toml, toml_text).map_err(|e| Error::io(&summary_toml, e))?;

    // Per-epoch series per training family, with a fold column, for
    // learning-curve plots.
    for fam in TrainFamily::ALL {
        let mut text = format!("fold\t{}\n", artifacts::TRAIN_LOG_HEADER);
        for fold in 0..cfg.folds {
            let log = read_train_log(&layout.fold_dir(fam, fold).join("train_log.tsv"))?;
            for r in &log {
                let _ = writeln!(
                    text,
                    "{fold}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    r.epoch,
                    fmt_f(r.train_loss),
                    fmt_f(r.recon_loss),
                    fmt_f(r.kl_loss),
                    artifacts::fmt_of(r.adv_loss),
                    artifacts::fmt_of(r.val_ndcg),
                    artifacts::fmt_of(r.val_adv_bacc),
                );
            }
        }
        let path = dir.join(format!("epochs_{}.tsv", fam.name()));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }

    let mut text = String::from("a\tb\ta_only\tb_only\tstatistic\tp_value\tsignificant\texact\n");
    for r in &report.mcnemar {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.a,
            r.b,
            r.a_only,
            r.b_only,
            fmt_f(r.statistic),
            fmt_f(r.p_value),
            u8::from(r.significant),
            u8::from(r.exact),
        );
    }
    let path = dir.join("mcnemar.tsv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    if !report.sweep.is_empty() {
        let mut text = String::from(
            "lambda\tval_ndcg\ttest_ndcg\ttest_recall\tadversary_bacc\tattacker_acc\tattacker_bacc\n",
        );
        for r in &report.sweep {
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                fmt_f(r.lambda),
                fmt_f(r.val_ndcg),
                fmt_f(r.test_ndcg),
                fmt_f(r.test_recall),
                fmt_f(r.adversary_bacc),
                fmt_f(r.attacker_acc),
                fmt_f(r.attacker_bacc),
            );
        }
        let path = dir.join("lambda_sweep.tsv");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
