//! Synthetic biased-dataset generator.
//!
//! A desk-scale stand-in for the real corpora: two equal user classes whose
//! interaction probabilities differ over two class-preferred item blocks,
//! plus a shared block both classes like. High `p_own` versus low `p_other`
//! plants a recoverable class signal in the interaction rows; setting all
//! three probabilities equal removes the signal entirely.
//!
//! Generation draws one Bernoulli variable per (user, item) cell from a
//! single derived stream in fixed row-major order, so the output bytes are a
//! pure function of the configuration and the seed.

use std::path::PathBuf;

use rand::Rng;

use crate::binio::fnv1a64;
use crate::error::{Error, Result};
use crate::rng::StreamKind;

use super::config::ExperimentConfig;

/// Everything `genseed` produced.
#[derive(Clone, Debug)]
pub struct SyntheticOutput {
    pub interactions_path: PathBuf,
    pub labels_path: PathBuf,
    /// Content hash of the interaction file.
    pub interactions_hash: u64,
    /// Content hash of the label file.
    pub labels_hash: u64,
    /// Users per class, in class order (always equal by construction).
    pub class_counts: Vec<usize>,
    pub n_interactions: usize,
}

/// Render the two dataset files as strings. Interactions use the
/// `user::item::1` shape of the default ingestion format; labels use
/// `user::<class value>` with the configured class values.
pub fn generate(cfg: &ExperimentConfig) -> Result<(String, String, usize)> {
    let s = &cfg.synthetic;
    let classes = &cfg.dataset.label_format.classes;
    if classes.len() != 2 {
        return Err(Error::Config(format!(
            "the synthetic generator builds exactly 2 classes; the label format lists {}",
            classes.len()
        )));
    }
    let block = (s.items - s.shared_items) / 2;
    let mut rng = cfg.seeds().derive(StreamKind::Synthetic, &[]);
    let mut interactions = String::new();
    let mut n_interactions = 0usize;
    for user in 0..s.users {
        let class = user % 2;
        for item in 0..s.items {
            let p = if item < block {
                if class == 0 {
                    s.p_own
                } else {
                    s.p_other
                }
            } else if item < 2 * block {
                if class == 1 {
                    s.p_own
                } else {
                    s.p_other
                }
            } else {
                s.p_shared
            };
            // One draw per cell regardless of p keeps every cell's
            // randomness independent of the configured probabilities.
            let hit = rng.random::<f64>() < p;
            if hit {
                interactions.push_str(&format!("{user}::{item}::1\n"));
                n_interactions += 1;
            }
        }
    }
    let mut labels = String::new();
    for user in 0..s.users {
        labels.push_str(&format!("{user}::{}\n", classes[user % 2]));
    }
    Ok((interactions, labels, n_interactions))
}

/// Generate and write the dataset to the configured dataset paths, creating
/// parent directories as needed. Rewrites are byte-identical.
pub fn write(cfg: &ExperimentConfig) -> Result<SyntheticOutput> {
    let (interactions, labels, n_interactions) = generate(cfg)?;
    for (path, text) in [(&cfg.dataset.interactions, &interactions), (&cfg.dataset.labels, &labels)]
    {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let half = cfg.synthetic.users / 2;
    Ok(SyntheticOutput {
        interactions_path: cfg.dataset.interactions.clone(),
        labels_path: cfg.dataset.labels.clone(),
        interactions_hash: fnv1a64(interactions.as_bytes()),
        labels_hash: fnv1a64(labels.as_bytes()),
        class_counts: vec![half, half],
        n_interactions,
    })
}
