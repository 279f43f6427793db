//! Pipeline configuration file (TOML) and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::{InferenceParams, Mode};
use crate::morphology::{Connectivity, SegmentationParams};
use crate::phantom::{BundleFiles, PhantomSpec};
use crate::training::TrainConfig;
use crate::unet::UNetConfig;

/// Where scans live and where outputs go. Scan `name` is read from
/// `<data_dir>/<name>_ct.mhd`, `<name>_gt.mhd` and, when present,
/// `<name>_lung.mhd`; phantom bundles use this layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

impl Paths {
    pub fn files(&self, name: &str) -> BundleFiles {
        BundleFiles::in_dir(&self.data_dir, name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceSection {
    pub mode: Mode,
    /// Overrides the mode's threshold.
    pub threshold: Option<f32>,
    /// Overrides the mode's connectivity.
    pub connectivity: Option<Connectivity>,
    pub roi_buffer: usize,
    pub save_probability: bool,
    pub trachea_seed: Option<[usize; 3]>,
    pub segmentation: SegmentationParams,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            mode: Mode::Default,
            threshold: None,
            connectivity: None,
            roi_buffer: 30,
            save_probability: false,
            trachea_seed: None,
            segmentation: SegmentationParams::default(),
        }
    }
}

impl InferenceSection {
    pub fn params(&self) -> InferenceParams {
        let mut p = InferenceParams::for_mode(self.mode);
        if let Some(t) = self.threshold {
            p.threshold = t;
        }
        if let Some(c) = self.connectivity {
            p.connectivity = c;
        }
        p.roi_buffer = self.roi_buffer;
        p.segmentation = self.segmentation;
        p.trachea_seed = self.trachea_seed;
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSection {
    /// Phantoms written by the `phantom` subcommand.
    pub count: usize,
    /// Series seed; phantom `i` is `spec.numbered(seed, i)`.
    pub seed: u64,
    /// File name prefix; phantom `i` is `<prefix>_<iii>`.
    pub prefix: String,
    #[serde(flatten)]
    pub spec: PhantomSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            count: 15,
            seed: 1,
            prefix: "phantom".into(),
            spec: PhantomSpec::default(),
        }
    }
}

impl PhantomSection {
    pub fn name(&self, index: usize) -> String {
        format!("{}_{index:03}", self.prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub unet: UNetConfig,
    pub training: TrainConfig,
    pub inference: InferenceSection,
    pub phantom: PhantomSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(one_line(&e.to_string())))?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Range checks against each module's preconditions.
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("training.learning_rate must be > 0, got {}", t.learning_rate)));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("training.beta1 and beta2 must lie in [0, 1)".into()));
        }
        if t.adam_eps <= 0.0 {
            return Err(Error::Config("training.adam_eps must be > 0".into()));
        }
        if t.patches_per_scan == 0 || t.max_epochs == 0 {
            return Err(Error::Config("training.patches_per_scan and max_epochs must be >= 1".into()));
        }
        if t.average_window == 0 || t.stall_window == 0 {
            return Err(Error::Config("training window lengths must be >= 1".into()));
        }
        let a = &t.augment;
        if !(0.0..=1.0).contains(&a.flip_probability) || a.max_rotation_deg < 0.0 || a.scale_min <= 0.0 || a.scale_max < a.scale_min {
            return Err(Error::Config("training.augment ranges are inconsistent".into()));
        }
        let th = self.inference.params().threshold;
        if !(th > 0.0 && th < 1.0) {
            return Err(Error::Config(format!("inference threshold must lie in (0, 1), got {th}")));
        }
        self.phantom.spec.tree.validate()?;
        let p = &self.phantom.spec;
        if p.spacing <= 0.0 || p.noise_sigma < 0.0 || p.dims.iter().any(|d| *d == 0) {
            return Err(Error::Config("phantom dims, spacing and noise_sigma must be positive".into()));
        }
        Ok(())
    }

    /// Every scan listed for training and validation has its CT and ground
    /// truth on disk.
    pub fn check_training_files(&self) -> Result<()> {
        if self.paths.train.is_empty() || self.paths.val.is_empty() {
            return Err(Error::Config("paths.train and paths.val must both list scans".into()));
        }
        for name in self.paths.train.iter().chain(&self.paths.val) {
            let f = self.paths.files(name);
            for p in [&f.ct, &f.gt] {
                if !p.is_file() {
                    return Err(Error::Config(format!("scan {name}: missing {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

pub(crate) fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
