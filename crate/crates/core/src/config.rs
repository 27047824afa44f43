//! Flat key=value run configuration.
//!
//! One UTF-8 text file covers every tunable: synthesis, preprocessing,
//! splits, network, search, and retraining. `#` starts a comment, unknown
//! keys are errors, and every command echoes the fully resolved
//! configuration into its output directory for provenance. The
//! `--paper-faithful` flag overrides the search-scale knobs with the
//! full-scale reference values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::augment::AugmentConfig;
use crate::data::morph::MorphOp;
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::scalar::Precision;
use crate::search::SearchConfig;
use crate::supernet::NetworkConfig;
use crate::train::TrainConfig;

/// Kernel extent of every searched convolution.
pub const CONV_KERNEL: usize = 3;
/// Pooling window and stride.
pub const POOL_SIZE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,

    // paths
    pub data_dir: Option<PathBuf>,
    pub genotype_down: Option<PathBuf>,
    pub genotype_up: Option<PathBuf>,
    pub eval_checkpoint: Option<PathBuf>,
    pub derive_checkpoint: Option<PathBuf>,

    // synthesis
    pub synth_count: usize,
    pub synth_height: usize,
    pub synth_width: usize,
    pub synth_classes: usize,
    pub synth_max_sinusoids: usize,
    pub synth_amplitude_frac: f64,
    pub synth_min_frequency: f64,
    pub synth_max_frequency: f64,
    pub synth_noise: f64,
    /// Optional per-layer base intensities; defaults to an even spread.
    pub synth_intensities: Option<Vec<f64>>,

    // preprocessing
    pub morph: Option<MorphOp>,
    pub morph_kernel: usize,
    pub augment_enabled: bool,
    pub augment_window: usize,
    pub augment_overlap: f64,
    pub augment_trim_top: usize,
    pub augment_trim_bottom: usize,
    pub augment_flip: bool,

    // split
    pub split_train: f64,
    pub split_test: f64,

    // network
    pub net_depth: usize,
    pub net_base_channels: usize,
    pub net_classes: usize,
    pub net_nodes: usize,
    pub net_input_channels: usize,

    // search
    pub search_epochs: usize,
    pub search_batch_size: usize,
    pub search_lr_max: f64,
    pub search_lr_min: f64,
    pub search_momentum: f64,
    pub search_weight_decay: f64,
    pub search_arch_lr: f64,
    pub search_arch_beta1: f64,
    pub search_arch_beta2: f64,
    pub search_arch_weight_decay: f64,
    pub search_val_fraction: f64,
    pub search_checkpoint_every: usize,

    // retraining
    pub retrain_epochs: usize,
    pub retrain_batch_size: usize,
    pub retrain_lr: f64,
    pub retrain_weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            precision: Precision::F32,
            data_dir: None,
            genotype_down: None,
            genotype_up: None,
            eval_checkpoint: None,
            derive_checkpoint: None,
            synth_count: 200,
            synth_height: 64,
            synth_width: 64,
            synth_classes: 4,
            synth_max_sinusoids: 3,
            synth_amplitude_frac: 0.3,
            synth_min_frequency: 0.5,
            synth_max_frequency: 2.5,
            synth_noise: 0.08,
            synth_intensities: None,
            morph: None,
            morph_kernel: 3,
            augment_enabled: false,
            augment_window: 300,
            augment_overlap: 0.5,
            augment_trim_top: 20,
            augment_trim_bottom: 20,
            augment_flip: true,
            split_train: 0.8,
            split_test: 0.2,
            net_depth: 3,
            net_base_channels: 8,
            net_classes: 4,
            net_nodes: 3,
            net_input_channels: 1,
            search_epochs: 30,
            search_batch_size: 4,
            search_lr_max: 0.025,
            search_lr_min: 0.01,
            search_momentum: 0.95,
            search_weight_decay: 3e-4,
            search_arch_lr: 3e-4,
            search_arch_beta1: 0.5,
            search_arch_beta2: 0.999,
            search_arch_weight_decay: 1e-3,
            search_val_fraction: 0.2,
            search_checkpoint_every: 10,
            retrain_epochs: 60,
            retrain_batch_size: 4,
            retrain_lr: 3e-4,
            retrain_weight_decay: 5e-5,
        }
    }
}

impl RunConfig {
    /// Parse a key=value file; unknown keys and malformed values are
    /// configuration errors naming the offending line.
    pub fn parse(text: &str, source: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("{source}:{lineno}: expected key = value, got '{line}'")))?;
            let key = key.trim();
            let value = value.trim();
            if let Some(prev) = seen.insert(key.to_string(), lineno) {
                return Err(Error::config(format!(
                    "{source}:{lineno}: key '{key}' already set on line {prev}"
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::config(format!("{source}:{lineno}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    /// Set one key programmatically (bindings use this instead of a file);
    /// call `validate` once all keys are in.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value).map_err(Error::Config)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("invalid value '{value}' for {key}"))
        }
        fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("invalid value '{value}' for {key}; expected true/false")),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "precision" => {
                self.precision = Precision::parse(value)
                    .ok_or_else(|| format!("invalid precision '{value}'; expected f32 or f64"))?
            }
            "data.dir" => self.data_dir = Some(PathBuf::from(value)),
            "genotype.down" => self.genotype_down = Some(PathBuf::from(value)),
            "genotype.up" => self.genotype_up = Some(PathBuf::from(value)),
            "eval.checkpoint" => self.eval_checkpoint = Some(PathBuf::from(value)),
            "derive.checkpoint" => self.derive_checkpoint = Some(PathBuf::from(value)),
            "synth.count" => self.synth_count = num(key, value)?,
            "synth.height" => self.synth_height = num(key, value)?,
            "synth.width" => self.synth_width = num(key, value)?,
            "synth.classes" => self.synth_classes = num(key, value)?,
            "synth.max_sinusoids" => self.synth_max_sinusoids = num(key, value)?,
            "synth.amplitude_frac" => self.synth_amplitude_frac = num(key, value)?,
            "synth.min_frequency" => self.synth_min_frequency = num(key, value)?,
            "synth.max_frequency" => self.synth_max_frequency = num(key, value)?,
            "synth.noise" => self.synth_noise = num(key, value)?,
            "synth.intensities" => {
                self.synth_intensities = if value == "auto" {
                    None
                } else {
                    let parsed: std::result::Result<Vec<f64>, String> = value
                        .split(',')
                        .map(|v| num::<f64>(key, v.trim()))
                        .collect();
                    Some(parsed?)
                };
            }
            "preprocess.morph" => {
                self.morph = match value {
                    "none" => None,
                    _ => Some(
                        MorphOp::parse(value)
                            .ok_or_else(|| format!("invalid morphology op '{value}'"))?,
                    ),
                }
            }
            "preprocess.morph_kernel" => self.morph_kernel = num(key, value)?,
            "augment.enabled" => self.augment_enabled = flag(key, value)?,
            "augment.window" => self.augment_window = num(key, value)?,
            "augment.overlap" => self.augment_overlap = num(key, value)?,
            "augment.trim_top" => self.augment_trim_top = num(key, value)?,
            "augment.trim_bottom" => self.augment_trim_bottom = num(key, value)?,
            "augment.flip" => self.augment_flip = flag(key, value)?,
            "split.train" => self.split_train = num(key, value)?,
            "split.test" => self.split_test = num(key, value)?,
            "net.depth" => self.net_depth = num(key, value)?,
            "net.base_channels" => self.net_base_channels = num(key, value)?,
            "net.classes" => self.net_classes = num(key, value)?,
            "net.nodes" => self.net_nodes = num(key, value)?,
            "net.input_channels" => self.net_input_channels = num(key, value)?,
            "search.epochs" => self.search_epochs = num(key, value)?,
            "search.batch_size" => self.search_batch_size = num(key, value)?,
            "search.lr_max" => self.search_lr_max = num(key, value)?,
            "search.lr_min" => self.search_lr_min = num(key, value)?,
            "search.momentum" => self.search_momentum = num(key, value)?,
            "search.weight_decay" => self.search_weight_decay = num(key, value)?,
            "search.arch_lr" => self.search_arch_lr = num(key, value)?,
            "search.arch_beta1" => self.search_arch_beta1 = num(key, value)?,
            "search.arch_beta2" => self.search_arch_beta2 = num(key, value)?,
            "search.arch_weight_decay" => self.search_arch_weight_decay = num(key, value)?,
            "search.val_fraction" => self.search_val_fraction = num(key, value)?,
            "search.checkpoint_every" => self.search_checkpoint_every = num(key, value)?,
            "retrain.epochs" => self.retrain_epochs = num(key, value)?,
            "retrain.batch_size" => self.retrain_batch_size = num(key, value)?,
            "retrain.lr" => self.retrain_lr = num(key, value)?,
            "retrain.weight_decay" => self.retrain_weight_decay = num(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if (self.split_train + self.split_test - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions sum to {}, expected 1",
                self.split_train + self.split_test
            )));
        }
        if let Some(means) = &self.synth_intensities {
            if means.len() != self.synth_classes {
                return Err(Error::config(format!(
                    "synth.intensities lists {} values for {} classes",
                    means.len(),
                    self.synth_classes
                )));
            }
        }
        if self.synth_classes != self.net_classes {
            return Err(Error::config(format!(
                "synth.classes ({}) and net.classes ({}) must agree",
                self.synth_classes, self.net_classes
            )));
        }
        Ok(())
    }

    /// Full-scale reference values: seven intermediate nodes, batch 2,
    /// 300 search epochs, momentum-0.95 SGD on a 0.025 -> 0.01 cosine with
    /// weight decay 3e-4, retraining with Adam at 3e-4 / decay 5e-5, an
    /// 80/20 split, and the 300-wide half-overlap crop augmentation.
    pub fn apply_paper_faithful(&mut self) {
        self.net_nodes = 7;
        self.search_epochs = 300;
        self.search_batch_size = 2;
        self.search_lr_max = 0.025;
        self.search_lr_min = 0.01;
        self.search_momentum = 0.95;
        self.search_weight_decay = 3e-4;
        self.retrain_lr = 3e-4;
        self.retrain_weight_decay = 5e-5;
        self.retrain_batch_size = 2;
        self.split_train = 0.8;
        self.split_test = 0.2;
        self.augment_enabled = true;
        self.augment_window = 300;
        self.augment_overlap = 0.5;
        self.augment_trim_top = 20;
        self.augment_trim_bottom = 20;
        self.augment_flip = true;
    }

    /// Canonical echo of the resolved configuration: sorted keys, one per
    /// line, structural constants included. Byte-deterministic.
    pub fn resolved_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("precision".into(), self.precision.name().into()),
            ("const.conv_kernel".into(), CONV_KERNEL.to_string()),
            ("const.pool_size".into(), POOL_SIZE.to_string()),
            ("synth.count".into(), self.synth_count.to_string()),
            ("synth.height".into(), self.synth_height.to_string()),
            ("synth.width".into(), self.synth_width.to_string()),
            ("synth.classes".into(), self.synth_classes.to_string()),
            ("synth.max_sinusoids".into(), self.synth_max_sinusoids.to_string()),
            ("synth.amplitude_frac".into(), fmt_f64(self.synth_amplitude_frac)),
            ("synth.min_frequency".into(), fmt_f64(self.synth_min_frequency)),
            ("synth.max_frequency".into(), fmt_f64(self.synth_max_frequency)),
            ("synth.noise".into(), fmt_f64(self.synth_noise)),
            (
                "synth.intensities".into(),
                self.synth_intensities
                    .as_ref()
                    .map(|m| m.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","))
                    .unwrap_or_else(|| "auto".into()),
            ),
            (
                "preprocess.morph".into(),
                self.morph.map(|m| m.name().to_string()).unwrap_or_else(|| "none".into()),
            ),
            ("preprocess.morph_kernel".into(), self.morph_kernel.to_string()),
            ("augment.enabled".into(), self.augment_enabled.to_string()),
            ("augment.window".into(), self.augment_window.to_string()),
            ("augment.overlap".into(), fmt_f64(self.augment_overlap)),
            ("augment.trim_top".into(), self.augment_trim_top.to_string()),
            ("augment.trim_bottom".into(), self.augment_trim_bottom.to_string()),
            ("augment.flip".into(), self.augment_flip.to_string()),
            ("split.train".into(), fmt_f64(self.split_train)),
            ("split.test".into(), fmt_f64(self.split_test)),
            ("net.depth".into(), self.net_depth.to_string()),
            ("net.base_channels".into(), self.net_base_channels.to_string()),
            ("net.classes".into(), self.net_classes.to_string()),
            ("net.nodes".into(), self.net_nodes.to_string()),
            ("net.input_channels".into(), self.net_input_channels.to_string()),
            ("search.epochs".into(), self.search_epochs.to_string()),
            ("search.batch_size".into(), self.search_batch_size.to_string()),
            ("search.lr_max".into(), fmt_f64(self.search_lr_max)),
            ("search.lr_min".into(), fmt_f64(self.search_lr_min)),
            ("search.momentum".into(), fmt_f64(self.search_momentum)),
            ("search.weight_decay".into(), fmt_f64(self.search_weight_decay)),
            ("search.arch_lr".into(), fmt_f64(self.search_arch_lr)),
            ("search.arch_beta1".into(), fmt_f64(self.search_arch_beta1)),
            ("search.arch_beta2".into(), fmt_f64(self.search_arch_beta2)),
            ("search.arch_weight_decay".into(), fmt_f64(self.search_arch_weight_decay)),
            ("search.val_fraction".into(), fmt_f64(self.search_val_fraction)),
            ("search.checkpoint_every".into(), self.search_checkpoint_every.to_string()),
            ("retrain.epochs".into(), self.retrain_epochs.to_string()),
            ("retrain.batch_size".into(), self.retrain_batch_size.to_string()),
            ("retrain.lr".into(), fmt_f64(self.retrain_lr)),
            ("retrain.weight_decay".into(), fmt_f64(self.retrain_weight_decay)),
        ];
        for (key, path) in [
            ("data.dir", &self.data_dir),
            ("genotype.down", &self.genotype_down),
            ("genotype.up", &self.genotype_up),
            ("eval.checkpoint", &self.eval_checkpoint),
            ("derive.checkpoint", &self.derive_checkpoint),
        ] {
            if let Some(p) = path {
                pairs.push((key.into(), p.display().to_string()));
            }
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    // typed sub-configurations

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            count: self.synth_count,
            height: self.synth_height,
            width: self.synth_width,
            num_layers: self.synth_classes,
            max_sinusoids: self.synth_max_sinusoids,
            amplitude_frac: self.synth_amplitude_frac,
            min_frequency: self.synth_min_frequency,
            max_frequency: self.synth_max_frequency,
            intensity_means: self.synth_intensities.clone(),
            noise: self.synth_noise,
            seed: self.seed,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            window: self.augment_window,
            overlap: self.augment_overlap,
            trim_top: self.augment_trim_top,
            trim_bottom: self.augment_trim_bottom,
            flip: self.augment_flip,
        }
    }

    pub fn network_config(&self, input_h: usize, input_w: usize) -> NetworkConfig {
        NetworkConfig {
            depth: self.net_depth,
            base_channels: self.net_base_channels,
            num_classes: self.net_classes,
            m: self.net_nodes,
            in_channels: self.net_input_channels,
            input_h,
            input_w,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            epochs: self.search_epochs,
            batch_size: self.search_batch_size,
            lr_max: self.search_lr_max,
            lr_min: self.search_lr_min,
            momentum: self.search_momentum,
            weight_decay: self.search_weight_decay,
            arch_lr: self.search_arch_lr,
            arch_beta1: self.search_arch_beta1,
            arch_beta2: self.search_arch_beta2,
            arch_weight_decay: self.search_arch_weight_decay,
            val_fraction: self.search_val_fraction,
            seed: self.seed,
            verify_phase_separation: cfg!(debug_assertions),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.retrain_epochs,
            batch_size: self.retrain_batch_size,
            lr: self.retrain_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.retrain_weight_decay,
            seed: self.seed,
        }
    }
}

/// Shortest representation that parses back exactly.
fn fmt_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}
