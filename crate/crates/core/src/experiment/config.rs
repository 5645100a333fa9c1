//! The experiment configuration file.
//!
//! One TOML file drives every command. All keys have documented defaults, so
//! an empty file is a valid configuration; unknown keys are rejected so that
//! typos fail loudly instead of silently running with defaults. Relative
//! paths in the file are resolved against the directory containing it.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::binio::fnv1a64;
use crate::data::{InteractionFormat, LabelFormat, PreprocessConfig, UNKNOWN_LABEL};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng::SeedStream;
use crate::train::{SelectionRule, TrainConfig};
use crate::attack::AttackerConfig;

/// Root of the configuration file.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream in the pipeline derives from it.
    pub seed: u64,
    /// Number of cross-validation folds over users.
    pub folds: usize,
    /// Output directory for caches, checkpoints, attacks and reports.
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub preprocess: PreprocessSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
    pub synthetic: SyntheticSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            folds: 5,
            out: PathBuf::from("advmv-out"),
            dataset: DatasetSection::default(),
            preprocess: PreprocessSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            sweep: SweepSection::default(),
            synthetic: SyntheticSection::default(),
        }
    }
}

/// Where the raw data lives and how its lines are shaped.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Free-form tag used in printed summaries and report headers.
    pub name: String,
    /// Interaction log file (also the target of the `genseed` command).
    pub interactions: PathBuf,
    /// User attribute file (also the target of the `genseed` command).
    pub labels: PathBuf,
    pub interaction_format: InteractionFormatSection,
    pub label_format: LabelFormatSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: "dataset".into(),
            interactions: PathBuf::from("interactions.dat"),
            labels: PathBuf::from("users.dat"),
            interaction_format: InteractionFormatSection::default(),
            label_format: LabelFormatSection::default(),
        }
    }
}

/// Line shape of the interaction log. The defaults parse
/// `user::item::rating::timestamp` records.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionFormatSection {
    pub delimiter: String,
    pub user_col: usize,
    pub item_col: usize,
    /// Column carrying the rating/count; a negative value means there is no
    /// such column and every line counts as weight 1.
    pub weight_col: i64,
    pub skip_header: bool,
}

impl Default for InteractionFormatSection {
    fn default() -> Self {
        InteractionFormatSection {
            delimiter: "::".into(),
            user_col: 0,
            item_col: 1,
            weight_col: 2,
            skip_header: false,
        }
    }
}

/// Line shape of the user attribute file. The defaults parse
/// `user::gender::...` records with `M`/`F` class values.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelFormatSection {
    pub delimiter: String,
    pub user_col: usize,
    pub label_col: usize,
    /// Recognized class values in class order. Users with any other value
    /// are kept with an unknown attribute.
    pub classes: Vec<String>,
    pub skip_header: bool,
}

impl Default for LabelFormatSection {
    fn default() -> Self {
        LabelFormatSection {
            delimiter: "::".into(),
            user_col: 0,
            label_col: 1,
            classes: vec!["M".into(), "F".into()],
            skip_header: false,
        }
    }
}

/// Filtering applied while building the interaction matrix.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub min_weight: f64,
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
    /// Seeded random item subsample applied before degree filtering;
    /// 0 keeps every item.
    pub item_subsample: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let d = PreprocessConfig::default();
        PreprocessSection {
            min_weight: d.min_weight,
            min_user_interactions: d.min_user_interactions,
            min_item_interactions: d.min_item_interactions,
            item_subsample: 0,
        }
    }
}

/// Network architecture and loss weights. The defaults are this
/// implementation's own; they are not taken from any external release.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Encoder hidden widths (tanh).
    pub enc_hidden: Vec<usize>,
    /// Latent dimensionality.
    pub latent: usize,
    /// Decoder hidden widths; omitted = mirror of the encoder.
    pub dec_hidden: Option<Vec<usize>>,
    /// Adversarial-head hidden widths; omitted = one layer as wide as the
    /// latent space.
    pub adv_hidden: Option<Vec<usize>>,
    /// KL weight.
    pub beta: f64,
    /// Gradient reversal scale for the adversarial model.
    pub lambda: f64,
    /// Dropout on the normalized input row during training.
    pub input_dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            enc_hidden: vec![600],
            latent: 200,
            dec_hidden: None,
            adv_hidden: None,
            beta: 0.2,
            lambda: 1.0,
            input_dropout: 0.5,
        }
    }
}

/// Optimizer, loop, and checkpoint-selection settings.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear KL warm-up in optimizer steps (0 = constant beta).
    pub beta_warmup_steps: usize,
    /// Validate every N epochs; the final epoch is always validated.
    pub validate_every: usize,
    /// Ranking cutoff for every NDCG/recall in the experiment.
    pub eval_k: usize,
    /// Which checkpoint represents the adversarial model in attacks and
    /// reports: `best-ndcg`, `last-epoch` or `min-adv-bacc`.
    pub selection: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            beta_warmup_steps: d.beta_warmup_steps,
            validate_every: d.validate_every,
            eval_k: d.eval_k,
            selection: "min-adv-bacc".into(),
        }
    }
}

/// Post-hoc attacker settings.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub n_heads: usize,
    /// Hidden widths; omitted = one layer as wide as the latent space.
    pub hidden: Option<Vec<usize>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_frac: f64,
    /// Salt for the attacker streams; each fold additionally adds its index.
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = AttackerConfig::default();
        AttackSection {
            n_heads: d.n_heads,
            hidden: d.hidden,
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            holdout_frac: d.holdout_frac,
            seed: d.seed,
        }
    }
}

/// Gradient-reversal-scale sweep.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Scales to train and attack, in output order.
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { lambdas: vec![0.0, 0.5, 1.0, 2.0, 4.0] }
    }
}

/// Synthetic biased-dataset generator (`genseed`).
///
/// Users split into two equal classes; items split into two class-preferred
/// blocks plus a shared block. Each (user, item) interaction is an
/// independent draw with probability `p_own` for the user's own block,
/// `p_other` for the opposite block and `p_shared` for the shared block.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub users: usize,
    pub items: usize,
    /// Items in the shared block; the rest split evenly between classes.
    pub shared_items: usize,
    pub p_own: f64,
    pub p_other: f64,
    pub p_shared: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            users: 400,
            items: 60,
            shared_items: 24,
            p_own: 0.45,
            p_other: 0.2,
            p_shared: 0.3,
        }
    }
}

impl ExperimentConfig {
    /// Parse a configuration document. Paths stay as written.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a configuration file and resolve its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.dataset.interactions = resolve(base, &cfg.dataset.interactions);
        cfg.dataset.labels = resolve(base, &cfg.dataset.labels);
        cfg.out = resolve(base, &cfg.out);
        Ok(cfg)
    }

    /// Static consistency checks. Path existence is checked at use time.
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        let n_classes = self.dataset.label_format.classes.len();
        if n_classes < 2 || n_classes >= usize::from(UNKNOWN_LABEL) {
            return Err(Error::Config(format!(
                "label_format.classes must list 2..{UNKNOWN_LABEL} values, got {n_classes}"
            )));
        }
        if self.dataset.interaction_format.delimiter.is_empty()
            || self.dataset.label_format.delimiter.is_empty()
        {
            return Err(Error::Config("delimiters must be non-empty".into()));
        }
        self.selection_rule()?;
        // Model and optimizer invariants are enforced by the owning types;
        // build them once against a placeholder item count.
        self.model_config(1, true, self.model.lambda).validate()?;
        self.train_config().validate()?;
        self.attacker_config(0).validate()?;
        for &l in &self.sweep.lambdas {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::Config(format!("sweep lambda {l} must be finite and >= 0")));
            }
        }
        let mut seen = Vec::new();
        for &l in &self.sweep.lambdas {
            if seen.contains(&l.to_bits()) {
                return Err(Error::Config(format!("sweep lambda {l} listed twice")));
            }
            seen.push(l.to_bits());
        }
        let s = &self.synthetic;
        if s.users < 4 || s.users % 2 != 0 {
            return Err(Error::Config(format!(
                "synthetic.users must be even and >= 4, got {}",
                s.users
            )));
        }
        if s.items <= s.shared_items || (s.items - s.shared_items) % 2 != 0 {
            return Err(Error::Config(format!(
                "synthetic items ({}) minus shared ({}) must be positive and even",
                s.items, s.shared_items
            )));
        }
        for (name, p) in [("p_own", s.p_own), ("p_other", s.p_other), ("p_shared", s.p_shared)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("synthetic.{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Root of every random stream in the experiment.
    pub fn seeds(&self) -> SeedStream {
        SeedStream::new(self.seed)
    }

    pub fn n_classes(&self) -> u8 {
        self.dataset.label_format.classes.len() as u8
    }

    pub fn interaction_format(&self) -> InteractionFormat {
        let f = &self.dataset.interaction_format;
        InteractionFormat {
            delimiter: f.delimiter.clone(),
            user_col: f.user_col,
            item_col: f.item_col,
            weight_col: usize::try_from(f.weight_col).ok(),
            skip_header: f.skip_header,
        }
    }

    pub fn label_format(&self) -> LabelFormat {
        let f = &self.dataset.label_format;
        LabelFormat {
            delimiter: f.delimiter.clone(),
            user_col: f.user_col,
            label_col: f.label_col,
            classes: f.classes.clone(),
            skip_header: f.skip_header,
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        let p = &self.preprocess;
        PreprocessConfig {
            min_weight: p.min_weight,
            min_user_interactions: p.min_user_interactions,
            min_item_interactions: p.min_item_interactions,
            item_subsample: if p.item_subsample == 0 { None } else { Some(p.item_subsample) },
        }
    }

    /// Concrete model configuration for a dataset with `n_items` items.
    pub fn model_config(&self, n_items: usize, adversarial: bool, lambda: f64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_items,
            enc_hidden: m.enc_hidden.clone(),
            latent: m.latent,
            dec_hidden: m.dec_hidden.clone(),
            adversarial,
            adv_hidden: m.adv_hidden.clone().unwrap_or_else(|| vec![m.latent]),
            n_classes: self.dataset.label_format.classes.len(),
            beta: m.beta,
            lambda,
            input_dropout: m.input_dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            beta_warmup_steps: t.beta_warmup_steps,
            validate_every: t.validate_every,
            eval_k: t.eval_k,
        }
    }

    /// The adversarial family's reporting checkpoint.
    pub fn selection_rule(&self) -> Result<SelectionRule> {
        SelectionRule::from_str(&self.train.selection)
    }

    /// Attacker settings for one fold. Folds get distinct stream salts so
    /// their attacks are independent.
    pub fn attacker_config(&self, fold: usize) -> AttackerConfig {
        let a = &self.attack;
        AttackerConfig {
            n_heads: a.n_heads,
            hidden: a.hidden.clone(),
            epochs: a.epochs,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            holdout_frac: a.holdout_frac,
            seed: a.seed.wrapping_add(fold as u64),
        }
    }

    /// Hash of every semantically relevant setting. Output and input paths
    /// and the cosmetic dataset name are excluded: moving files around does
    /// not change what would be computed, everything else does.
    pub fn fingerprint(&self) -> u64 {
        let mut s = String::new();
        use std::fmt::Write;
        let _ = write!(s, "seed={};folds={};", self.seed, self.folds);
        let f = &self.dataset.interaction_format;
        let _ = write!(
            s,
            "ifmt={:?},{},{},{},{};",
            f.delimiter, f.user_col, f.item_col, f.weight_col, f.skip_header
        );
        let l = &self.dataset.label_format;
        let _ = write!(
            s,
            "lfmt={:?},{},{},{:?},{};",
            l.delimiter, l.user_col, l.label_col, l.classes, l.skip_header
        );
        let p = &self.preprocess;
        let _ = write!(
            s,
            "prep={:?},{},{},{};",
            p.min_weight, p.min_user_interactions, p.min_item_interactions, p.item_subsample
        );
        let m = &self.model;
        let _ = write!(
            s,
            "model={:?},{},{:?},{:?},{:?},{:?},{:?};",
            m.enc_hidden, m.latent, m.dec_hidden, m.adv_hidden, m.beta, m.lambda, m.input_dropout
        );
        let t = &self.train;
        let _ = write!(
            s,
            "train={},{},{:?},{:?},{:?},{:?},{:?},{},{},{},{};",
            t.epochs,
            t.batch_size,
            t.learning_rate,
            t.weight_decay,
            t.beta1,
            t.beta2,
            t.epsilon,
            t.beta_warmup_steps,
            t.validate_every,
            t.eval_k,
            t.selection
        );
        let a = &self.attack;
        let _ = write!(
            s,
            "attack={},{:?},{},{},{:?},{:?},{};",
            a.n_heads, a.hidden, a.epochs, a.batch_size, a.learning_rate, a.holdout_frac, a.seed
        );
        let _ = write!(s, "sweep={:?};", self.sweep.lambdas);
        let y = &self.synthetic;
        let _ = write!(
            s,
            "synth={},{},{},{:?},{:?},{:?}",
            y.users, y.items, y.shared_items, y.p_own, y.p_other, y.p_shared
        );
        fnv1a64(s.as_bytes())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
