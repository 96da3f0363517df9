//! Run configuration: a sectioned TOML document with strict key checking.
//!
//! ```toml
//! [model]
//! preset = "tiny"        # any ModelConfig field may be overridden here
//!
//! [loss]
//! lambda2 = 0.0
//!
//! [data]
//! annotations = "train/annotations.jsonl"
//!
//! [train]
//! steps = 500
//! seed = 7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{ModelConfig, Preset, QueryMode};

/// Environment variable that prefixes relative dataset paths.
pub const DATA_ROOT_ENV: &str = "AWCC_DATA_ROOT";

/// A preset plus optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder_heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_channels: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_mode: Option<QueryMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_init_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Named-tensor file loaded over the initial weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

fn default_preset() -> Preset {
    Preset::Tiny
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::preset(Preset::Tiny)
    }
}

impl ModelSection {
    pub fn preset(preset: Preset) -> Self {
        ModelSection {
            preset,
            prototypes: None,
            tokens: None,
            channels: None,
            output_stride: None,
            decoder_layers: None,
            decoder_heads: None,
            ffn_hidden: None,
            crop_size: None,
            backbone: None,
            head_channels: None,
            query_mode: None,
            bank_init_std: None,
            normalization: None,
            pretrained: None,
        }
    }

    /// Every field pinned to `cfg`'s value.
    pub fn pinned(cfg: &ModelConfig) -> Self {
        ModelSection {
            preset: cfg.preset,
            prototypes: Some(cfg.prototypes),
            tokens: Some(cfg.tokens),
            channels: Some(cfg.channels),
            output_stride: Some(cfg.output_stride),
            decoder_layers: Some(cfg.decoder_layers),
            decoder_heads: Some(cfg.decoder_heads),
            ffn_hidden: Some(cfg.ffn_hidden),
            crop_size: Some(cfg.crop_size),
            backbone: Some(cfg.backbone.clone()),
            head_channels: Some(cfg.head_channels),
            query_mode: Some(cfg.query_mode),
            bank_init_std: Some(cfg.bank_init_std),
            normalization: Some(cfg.normalization),
            pretrained: None,
        }
    }

    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::from_preset(self.preset);
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone();
                }
            )*};
        }
        set!(
            prototypes,
            tokens,
            channels,
            output_stride,
            decoder_layers,
            decoder_heads,
            ffn_hidden,
            crop_size,
            backbone,
            head_channels,
            query_mode,
            bank_init_std,
            normalization
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training annotation file (JSON lines).
    pub annotations: Option<PathBuf>,
    /// Prefix for relative paths; overrides the environment variable.
    pub root: Option<PathBuf>,
    pub overlap_min: f64,
    pub flip_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            annotations: None,
            root: None,
            overlap_min: 0.5,
            flip_prob: 0.5,
        }
    }
}

impl DataConfig {
    /// Absolute paths pass through; relative ones are joined to `root`,
    /// else to `$AWCC_DATA_ROOT`, else left relative to the working directory.
    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match &self.root {
            Some(root) => root.join(p),
            None => match std::env::var_os(DATA_ROOT_ENV) {
                Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
                _ => p.to_path_buf(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            seed: 0,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(10.0),
            checkpoint_every: 0,
            out_dir: PathBuf::from("runs/awcc"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// `"weather"` groups results into clear/adverse/unknown subsets.
    pub subset_key: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        self.loss.validate()?;
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.overlap_min) || !(0.0..=1.0).contains(&d.flip_prob) {
            return Err(Error::Config("data.overlap_min and data.flip_prob must lie in [0,1]".into()));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return Err(Error::Config("train: lr and adam_eps must be positive, betas in [0,1)".into()));
        }
        if let Some(c) = t.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.clip_norm must be positive, got {c}")));
            }
        }
        if let Some(key) = &self.eval.subset_key {
            if key != "weather" {
                return Err(Error::Config(format!("eval.subset_key must be \"weather\", got {key:?}")));
            }
        }
        Ok(())
    }

    /// Copy with the model section fully pinned, as stored in checkpoints.
    pub fn snapshot(&self) -> Result<Self> {
        let mut s = self.clone();
        let pretrained = s.model.pretrained.take();
        s.model = ModelSection::pinned(&self.model_config()?);
        s.model.pretrained = pretrained;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model_config().unwrap(), ModelConfig::tiny());
        assert_eq!(c.train.lr, 1e-5);
        assert_eq!(c.loss.negatives, 64);
    }

    #[test]
    fn overrides_apply_on_top_of_the_preset() {
        let c = RunConfig::from_toml_str(
            "[model]\npreset = \"tiny\"\nquery_mode = \"label\"\n[loss]\nlambda2 = 0.0\n[train]\nsteps = 10\n",
        )
        .unwrap();
        let m = c.model_config().unwrap();
        assert_eq!(m.query_mode, QueryMode::Label);
        assert_eq!(m.channels, 32);
        assert_eq!(c.loss.lambda2, 0.0);
        assert_eq!(c.train.steps, 10);
    }

    #[test]
    fn unknown_keys_are_named() {
        for doc in ["[train]\nstpes = 3\n", "[modle]\n", "[model]\nchanels = 8\n"] {
            match RunConfig::from_toml_str(doc) {
                Err(Error::Config(m)) => assert!(m.contains("unknown field"), "{m}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml_str("[model]\ndecoder_heads = 5\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[loss]\ntau = 0.0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("[eval]\nsubset_key = \"scene\"\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn snapshot_round_trips_through_toml_and_json() {
        let c = RunConfig::from_toml_str("[model]\npreset = \"paper\"\ndecoder_layers = 1\n").unwrap();
        let s = c.snapshot().unwrap();
        assert_eq!(s.model_config().unwrap(), c.model_config().unwrap());
        assert_eq!(RunConfig::from_toml_str(&s.to_toml_string()).unwrap(), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), s);
    }

    #[test]
    fn data_paths_resolve_against_the_root() {
        let d = DataConfig {
            root: Some(PathBuf::from("/data")),
            ..Default::default()
        };
        assert_eq!(d.resolve_path(Path::new("a/b.jsonl")), PathBuf::from("/data/a/b.jsonl"));
        assert_eq!(d.resolve_path(Path::new("/abs.jsonl")), PathBuf::from("/abs.jsonl"));
    }
}
