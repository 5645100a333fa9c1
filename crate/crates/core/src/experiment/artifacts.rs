//! On-disk experiment artifacts: training logs, selected-checkpoint scores,
//! attack exports and sweep rows.
//!
//! Everything here is delimited text (or a small TOML table) designed to be
//! byte-identical across reruns: floats print with their shortest
//! round-trip representation, optional values print as `-`, and rows follow
//! a fixed order. Readers validate headers and re-parse floats exactly, so
//! a written file is a lossless serialization, not a display artifact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::EpochRecord;

/// Shortest round-trip rendering of a float.
pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

/// Optional float; `-` marks absence.
pub(crate) fn fmt_of(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_f(v),
        None => "-".into(),
    }
}

fn parse_f(field: &str, path: &Path, line_no: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| {
        Error::Data(format!("{}: line {line_no}: bad float {field:?}", path.display()))
    })
}

fn parse_of(field: &str, path: &Path, line_no: usize) -> Result<Option<f64>> {
    if field == "-" {
        Ok(None)
    } else {
        parse_f(field, path, line_no).map(Some)
    }
}

fn parse_int<T: std::str::FromStr>(field: &str, path: &Path, line_no: usize) -> Result<T> {
    field.parse::<T>().map_err(|_| {
        Error::Data(format!("{}: line {line_no}: bad integer {field:?}", path.display()))
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Split a data line and check the column count against the header's.
fn columns<'a>(line: &'a str, n: usize, path: &Path, line_no: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != n {
        return Err(Error::Data(format!(
            "{}: line {line_no}: {} columns, expected {n}",
            path.display(),
            parts.len()
        )));
    }
    Ok(parts)
}

fn check_header(got: Option<&str>, want: &str, path: &Path) -> Result<()> {
    match got {
        Some(h) if h == want => Ok(()),
        other => Err(Error::Data(format!(
            "{}: header {:?} does not match {want:?}",
            path.display(),
            other.unwrap_or("")
        ))),
    }
}

// ── training log ────────────────────────────────────────────────────────

pub(crate) const TRAIN_LOG_HEADER: &str =
    "epoch\ttrain_loss\trecon_loss\tkl_loss\tadv_loss\tval_ndcg\tval_adv_bacc";

pub fn write_train_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(TRAIN_LOG_HEADER);
    text.push('\n');
    for r in log {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            fmt_f(r.train_loss),
            fmt_f(r.recon_loss),
            fmt_f(r.kl_loss),
            fmt_of(r.adv_loss),
            fmt_of(r.val_ndcg),
            fmt_of(r.val_adv_bacc),
        );
    }
    write_text(path, &text)
}

pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    check_header(lines.next(), TRAIN_LOG_HEADER, path)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let c = columns(line, 7, path, no)?;
        out.push(EpochRecord {
            epoch: parse_int(c[0], path, no)?,
            train_loss: parse_f(c[1], path, no)?,
            recon_loss: parse_f(c[2], path, no)?,
            kl_loss: parse_f(c[3], path, no)?,
            adv_loss: parse_of(c[4], path, no)?,
            val_ndcg: parse_of(c[5], path, no)?,
            val_adv_bacc: parse_of(c[6], path, no)?,
        });
    }
    Ok(out)
}

// ── selected checkpoints ────────────────────────────────────────────────

/// Validation scores of one selected checkpoint, persisted next to it so
/// reports never have to re-derive the selection from the raw log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedScores {
    /// 1-based epoch the snapshot was taken after.
    pub epoch: usize,
    pub val_ndcg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_adv_bacc: Option<f64>,
}

/// Map of selection-rule name to scores (`best-ndcg`, `last-epoch`, and for
/// adversarial runs `min-adv-bacc`).
pub type SelectedMap = BTreeMap<String, SelectedScores>;

pub fn write_selected(path: &Path, selected: &SelectedMap) -> Result<()> {
    let text = toml::to_string(selected)
        .map_err(|e| Error::Checkpoint(format!("selected scores serialization: {e}")))?;
    write_text(path, &text)
}

pub fn read_selected(path: &Path) -> Result<SelectedMap> {
    let text = read_text(path)?;
    toml::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("selected scores {}: {e}", path.display())))
}

// ── attack exports ──────────────────────────────────────────────────────

/// Per-user outcome of the reported attacker head: original user id, true
/// class, predicted class and the latent mean the head saw.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackUserRow {
    pub user: u64,
    pub label: usize,
    pub predicted: usize,
    pub mu: Vec<f64>,
}

pub fn write_attack_users(path: &Path, rows: &[AttackUserRow], latent: usize) -> Result<()> {
    let mut text = String::from("user\tlabel\tpredicted\tcorrect");
    for d in 0..latent {
        let _ = write!(text, "\tmu{d}");
    }
    text.push('\n');
    for r in rows {
        let _ = write!(
            text,
            "{}\t{}\t{}\t{}",
            r.user,
            r.label,
            r.predicted,
            u8::from(r.label == r.predicted)
        );
        for v in &r.mu {
            let _ = write!(text, "\t{}", fmt_f(*v));
        }
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_attack_users(path: &Path) -> Result<Vec<AttackUserRow>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with("user\tlabel\tpredicted\tcorrect") {
        return Err(Error::Data(format!("{}: not an attack user table", path.display())));
    }
    let n_cols = header.split('\t').count();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let c = columns(line, n_cols, path, no)?;
        let mu = c[4..]
            .iter()
            .map(|f| parse_f(f, path, no))
            .collect::<Result<Vec<f64>>>()?;
        out.push(AttackUserRow {
            user: parse_int(c[0], path, no)?,
            label: parse_int(c[1], path, no)?,
            predicted: parse_int(c[2], path, no)?,
            mu,
        });
    }
    Ok(out)
}

/// One attacker head's scores as written to the per-fold head table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackHeadRow {
    pub head: usize,
    pub best_epoch: usize,
    pub train_accuracy: f64,
    pub train_balanced_accuracy: f64,
    pub val_balanced_accuracy: f64,
    pub test_accuracy: f64,
    pub test_balanced_accuracy: f64,
    pub reported: bool,
}

const HEADS_HEADER: &str =
    "head\tbest_epoch\ttrain_acc\ttrain_bacc\tval_bacc\ttest_acc\ttest_bacc\treported";

pub fn write_attack_heads(path: &Path, rows: &[AttackHeadRow]) -> Result<()> {
    let mut text = String::from(HEADS_HEADER);
    text.push('\n');
    for r in rows {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.head,
            r.best_epoch,
            fmt_f(r.train_accuracy),
            fmt_f(r.train_balanced_accuracy),
            fmt_f(r.val_balanced_accuracy),
            fmt_f(r.test_accuracy),
            fmt_f(r.test_balanced_accuracy),
            u8::from(r.reported),
        );
    }
    write_text(path, &text)
}

pub fn read_attack_heads(path: &Path) -> Result<Vec<AttackHeadRow>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    check_header(lines.next(), HEADS_HEADER, path)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let c = columns(line, 8, path, no)?;
        out.push(AttackHeadRow {
            head: parse_int(c[0], path, no)?,
            best_epoch: parse_int(c[1], path, no)?,
            train_accuracy: parse_f(c[2], path, no)?,
            train_balanced_accuracy: parse_f(c[3], path, no)?,
            val_balanced_accuracy: parse_f(c[4], path, no)?,
            test_accuracy: parse_f(c[5], path, no)?,
            test_balanced_accuracy: parse_f(c[6], path, no)?,
            reported: c[7] == "1",
        });
    }
    Ok(out)
}

// ── sweep rows ──────────────────────────────────────────────────────────

/// One (gradient reversal scale, fold) outcome of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub fold: usize,
    /// Selected checkpoint's epoch.
    pub epoch: usize,
    pub val_ndcg: f64,
    pub test_ndcg: f64,
    pub test_recall: f64,
    /// Model's own adversary head on the test users.
    pub adversary_bacc: f64,
    pub attacker_acc: f64,
    pub attacker_bacc: f64,
}

const SWEEP_HEADER: &str =
    "lambda\tfold\tepoch\tval_ndcg\ttest_ndcg\ttest_recall\tadversary_bacc\tattacker_acc\tattacker_bacc";

pub fn write_sweep_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for r in rows {
        let _ = writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            fmt_f(r.lambda),
            r.fold,
            r.epoch,
            fmt_f(r.val_ndcg),
            fmt_f(r.test_ndcg),
            fmt_f(r.test_recall),
            fmt_f(r.adversary_bacc),
            fmt_f(r.attacker_acc),
            fmt_f(r.attacker_bacc),
        );
    }
    write_text(path, &text)
}

pub fn read_sweep_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    check_header(lines.next(), SWEEP_HEADER, path)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let c = columns(line, 9, path, no)?;
        out.push(SweepRow {
            lambda: parse_f(c[0], path, no)?,
            fold: parse_int(c[1], path, no)?,
            epoch: parse_int(c[2], path, no)?,
            val_ndcg: parse_f(c[3], path, no)?,
            test_ndcg: parse_f(c[4], path, no)?,
            test_recall: parse_f(c[5], path, no)?,
            adversary_bacc: parse_f(c[6], path, no)?,
            attacker_acc: parse_f(c[7], path, no)?,
            attacker_bacc: parse_f(c[8], path, no)?,
        });
    }
    Ok(out)
}
