//! The experiment configuration document: one versioned JSON file holding
//! target, model, training, and suite parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tailflow::error::{Error, Result};
use tailflow::model::{ModelArch, TransformKind, Variant};
use tailflow::synth::DatasetSizes;
use tailflow::train::TrainConfig;

/// Schema tag of the configuration document.
pub const CONFIG_SCHEMA: &str = "tailflow-config-v1";

/// Everything one experiment needs. Defaults are desk-scale: they dial the
/// full study (25 trials, 5 layers, 5000 steps) down to something that runs
/// end to end on a laptop; the full setting is a config edit away.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema: String,

    // Synthetic target.
    /// Data dimension.
    pub dim: usize,
    /// Number of heavy-tailed marginals (placed last).
    pub d_h: usize,
    /// Degrees of freedom of the heavy marginals.
    pub nu: f64,
    /// Seed of the target construction and dataset emission.
    pub data_seed: u64,
    pub sizes: DatasetSizes,

    // Model.
    /// Variants the suite trains; single-model commands pick one by flag.
    pub variants: Vec<Variant>,
    pub transform: TransformKind,
    /// Number of flow blocks (autoregressive + linear + permutation).
    pub n_layers: usize,
    pub arch: ModelArch,

    // Training.
    pub train: TrainConfig,

    // Suite.
    /// Fits per variant; trial `i` trains with `seed + i`.
    pub n_trials: usize,
    /// Master seed offsetting every per-trial seed.
    pub seed: u64,
    /// Whether emitted CSVs carry a `c0..c{D-1}` header row.
    pub header: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA.to_string(),
            dim: 8,
            d_h: 4,
            nu: 2.0,
            data_seed: 0,
            sizes: DatasetSizes::default(),
            variants: vec![Variant::Vanilla, Variant::Taf, Variant::Gtaf, Variant::Mtaf],
            transform: TransformKind::Affine,
            n_layers: 2,
            arch: ModelArch::default(),
            train: TrainConfig {
                steps: 2000,
                learning_rate: 1e-3,
                grad_clip: Some(10.0),
                ..TrainConfig::default()
            },
            n_trials: 5,
            seed: 0,
            header: false,
            out_dir: PathBuf::from("runs/experiment"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Schema {
                expected: CONFIG_SCHEMA.to_string(),
                found: self.schema.clone(),
            });
        }
        if self.dim == 0 {
            return Err(Error::validation("dim must be at least 1"));
        }
        if self.d_h > self.dim {
            return Err(Error::validation(format!(
                "d_h = {} exceeds dim = {}",
                self.d_h, self.dim
            )));
        }
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::validation(format!("nu must be positive, got {}", self.nu)));
        }
        if self.sizes.train == 0 || self.sizes.val == 0 || self.sizes.test == 0 {
            return Err(Error::validation("every dataset split needs at least one row"));
        }
        if self.variants.is_empty() {
            return Err(Error::validation("at least one variant is required"));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::validation(format!(
                    "variant `{v}` listed more than once"
                )));
            }
        }
        if self.n_layers == 0 {
            return Err(Error::validation("n_layers must be at least 1"));
        }
        if self.n_trials == 0 {
            return Err(Error::validation("n_trials must be at least 1"));
        }
        self.train.validate()?;
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::validation("out_dir must not be empty"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let cfg: ExperimentConfig = serde_json::from_reader(BufReader::new(file))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
