//! Flat key/value experiment configuration with file parsing and
//! command-line overrides. Every key has a default; unknown keys are
//! rejected. The full schema is documented in the repository README.

use crate::caps::{CapsConfig, SelectMode};
use crate::datagen::{ProtocolConfig, RawSpec};
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::train::TrainConfig;
use crate::unet::{NetConfig, SamplerKind};
use std::path::Path;

/// Which sampler pairs a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerChoice {
    Caps,
    MaxPool,
    BlurPool,
    Aps,
}

impl SamplerChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "caps" => Ok(SamplerChoice::Caps),
            "maxpool" => Ok(SamplerChoice::MaxPool),
            "blurpool" => Ok(SamplerChoice::BlurPool),
            "aps" => Ok(SamplerChoice::Aps),
            other => Err(Error::Config(format!(
                "unknown sampler '{other}' (expected caps|maxpool|blurpool|aps)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SamplerChoice::Caps => "caps",
            SamplerChoice::MaxPool => "maxpool",
            SamplerChoice::BlurPool => "blurpool",
            SamplerChoice::Aps => "aps",
        }
    }
}

/// All experiment parameters, flattened. See the README for the config-file
/// schema; values are overridable from the command line.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // dataset
    pub raws: usize,
    pub dataset_seed: u64,
    pub raw_size: usize,
    pub crop_size: usize,
    pub margin: usize,
    pub step: usize,
    pub train_crops_per_raw: usize,
    pub max_offsets_per_subset: usize,
    pub data_dir: Option<String>,
    // network
    pub depth: usize,
    pub base_channels: usize,
    pub extractor_w1: usize,
    pub extractor_w2: usize,
    pub samplers: Vec<SamplerChoice>,
    pub beta: Real,
    pub temperature: Real,
    pub k: usize,
    pub use_aw: bool,
    pub use_ca: bool,
    pub use_lpf: bool,
    pub select_mode: SelectMode,
    // training
    pub lr0: Real,
    pub momentum: Real,
    pub poly_power: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    // experiment
    pub seeds: Vec<u64>,
    pub out: String,
    pub sets: Vec<String>,
    pub verify_shifts: usize,
    pub verify_seeds: usize,
    pub report_input: Option<String>,
    pub formats: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            raws: 10,
            dataset_seed: 1,
            raw_size: 192,
            crop_size: 64,
            margin: 20,
            step: 1,
            train_crops_per_raw: 30,
            max_offsets_per_subset: 25,
            data_dir: None,
            depth: 2,
            base_channels: 4,
            extractor_w1: 8,
            extractor_w2: 4,
            samplers: vec![SamplerChoice::Caps, SamplerChoice::MaxPool, SamplerChoice::BlurPool],
            beta: 0.25,
            temperature: 1e-3,
            k: 2,
            use_aw: true,
            use_ca: true,
            use_lpf: true,
            select_mode: SelectMode::Soft,
            lr0: 0.001,
            momentum: 0.9,
            poly_power: 0.9,
            batch_size: 8,
            max_epochs: 40,
            patience: 10,
            seeds: vec![0, 1, 2],
            out: "out".into(),
            sets: vec!["mdt".into(), "bdt".into()],
            verify_shifts: 20,
            verify_seeds: 10,
            report_input: None,
            formats: vec!["csv".into(), "svg".into()],
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean '{value}' for key '{key}'"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment; both the file parser and the
    /// CLI overrides funnel through here.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "raws" => self.raws = parse_num(key, value)?,
            "dataset_seed" => self.dataset_seed = parse_num(key, value)?,
            "raw_size" => self.raw_size = parse_num(key, value)?,
            "crop_size" => self.crop_size = parse_num(key, value)?,
            "margin" => self.margin = parse_num(key, value)?,
            "step" => self.step = parse_num(key, value)?,
            "train_crops_per_raw" => self.train_crops_per_raw = parse_num(key, value)?,
            "max_offsets_per_subset" => self.max_offsets_per_subset = parse_num(key, value)?,
            "data_dir" => {
                self.data_dir = if value.is_empty() { None } else { Some(value.to_string()) }
            }
            "depth" => self.depth = parse_num(key, value)?,
            "base_channels" => self.base_channels = parse_num(key, value)?,
            "extractor_w1" => self.extractor_w1 = parse_num(key, value)?,
            "extractor_w2" => self.extractor_w2 = parse_num(key, value)?,
            "samplers" | "sampler" => {
                self.samplers = value
                    .split(',')
                    .map(|s| SamplerChoice::parse(s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if self.samplers.is_empty() {
                    return Err(Error::Config("sampler list is empty".into()));
                }
            }
            "beta" => self.beta = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "use_aw" => self.use_aw = parse_bool(key, value)?,
            "use_ca" => self.use_ca = parse_bool(key, value)?,
            "use_lpf" => self.use_lpf = parse_bool(key, value)?,
            "select_mode" => {
                self.select_mode = match value {
                    "soft" => SelectMode::Soft,
                    "hard" => SelectMode::Hard,
                    _ => return Err(Error::Config(format!("bad select_mode '{value}'"))),
                }
            }
            "lr0" => self.lr0 = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "poly_power" => self.poly_power = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_num::<u64>(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if self.seeds.is_empty() {
                    return Err(Error::Config("seed list is empty".into()));
                }
            }
            "out" => self.out = value.to_string(),
            "sets" | "set" => {
                self.sets = value.split(',').map(|s| s.trim().to_string()).collect();
                for s in &self.sets {
                    if s != "mdt" && s != "bdt" {
                        return Err(Error::Config(format!("unknown test set '{s}'")));
                    }
                }
            }
            "verify_shifts" => self.verify_shifts = parse_num(key, value)?,
            "verify_seeds" => self.verify_seeds = parse_num(key, value)?,
            "report_input" => {
                self.report_input = if value.is_empty() { None } else { Some(value.to_string()) }
            }
            "formats" => {
                self.formats = value.split(',').map(|s| s.trim().to_string()).collect();
                for f in &self.formats {
                    if f != "csv" && f != "svg" {
                        return Err(Error::Config(format!("unknown format '{f}'")));
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Reads a `key = value` config file; `#` starts a comment.
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let text = std::fs::read_to_string(&path)?;
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            cfg.set_key(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol().validate()?;
        self.caps_config().validate()?;
        self.net_config(SamplerChoice::Caps).validate()?;
        self.train_config(0).validate()?;
        if self.raws < 3 && self.data_dir.is_none() {
            return Err(Error::Config("need at least 3 raw images (train/val/test)".into()));
        }
        if self.crop_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "crop size {} not divisible by 2^depth = {}",
                self.crop_size,
                1 << self.depth
            )));
        }
        Ok(())
    }

    pub fn raw_spec(&self) -> RawSpec {
        RawSpec { size: self.raw_size, ..Default::default() }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            crop_size: self.crop_size,
            margin: self.margin,
            step: self.step,
            train_crops_per_raw: self.train_crops_per_raw,
            defect_to_normal: (3, 1),
            max_offsets_per_subset: self.max_offsets_per_subset,
        }
    }

    pub fn caps_config(&self) -> CapsConfig {
        CapsConfig {
            beta: self.beta,
            temperature: self.temperature,
            k: self.k,
            use_aw: self.use_aw,
            use_ca: self.use_ca,
            use_lpf: self.use_lpf,
            select_mode: self.select_mode,
        }
    }

    pub fn sampler_kind(&self, choice: SamplerChoice) -> SamplerKind {
        match choice {
            SamplerChoice::Caps => SamplerKind::Caps(self.caps_config()),
            SamplerChoice::MaxPool => SamplerKind::MaxPool,
            SamplerChoice::BlurPool => SamplerKind::BlurPool,
            SamplerChoice::Aps => SamplerKind::Aps,
        }
    }

    pub fn net_config(&self, choice: SamplerChoice) -> NetConfig {
        NetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            in_channels: 1,
            classes: 2,
            sampler: self.sampler_kind(choice),
            extractor_widths: (self.extractor_w1, self.extractor_w2),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            poly_power: self.poly_power,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_patience: self.patience,
            seed,
        }
    }

    /// One-line-per-key echo of the configuration, in schema order.
    pub fn echo(&self) -> String {
        let samplers: Vec<&str> = self.samplers.iter().map(|s| s.name()).collect();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "raws = {}\ndataset_seed = {}\nraw_size = {}\ncrop_size = {}\nmargin = {}\nstep = {}\n\
             train_crops_per_raw = {}\nmax_offsets_per_subset = {}\ndata_dir = {}\ndepth = {}\n\
             base_channels = {}\nextractor_w1 = {}\nextractor_w2 = {}\nsamplers = {}\nbeta = {}\n\
             temperature = {}\nk = {}\nuse_aw = {}\nuse_ca = {}\nuse_lpf = {}\nselect_mode = {}\n\
             lr0 = {}\nmomentum = {}\npoly_power = {}\nbatch_size = {}\nmax_epochs = {}\n\
             patience = {}\nseeds = {}\nout = {}\nsets = {}\nverify_shifts = {}\nverify_seeds = {}\n\
             report_input = {}\nformats = {}\n",
            self.raws,
            self.dataset_seed,
            self.raw_size,
            self.crop_size,
            self.margin,
            self.step,
            self.train_crops_per_raw,
            self.max_offsets_per_subset,
            self.data_dir.as_deref().unwrap_or(""),
            self.depth,
            self.base_channels,
            self.extractor_w1,
            self.extractor_w2,
            samplers.join(","),
            self.beta,
            self.temperature,
            self.k,
            self.use_aw,
            self.use_ca,
            self.use_lpf,
            match self.select_mode {
                SelectMode::Soft => "soft",
                SelectMode::Hard => "hard",
            },
            self.lr0,
            self.momentum,
            self.poly_power,
            self.batch_size,
            self.max_epochs,
            self.patience,
            seeds.join(","),
            self.out,
            self.sets.join(","),
            self.verify_shifts,
            self.verify_seeds,
            self.report_input.as_deref().unwrap_or(""),
            self.formats.join(","),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn file_parsing_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, "# comment\nbeta = 0.125\nseeds = 4,5\nsamplers = caps,aps\n")
            .unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.beta, 0.125);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.samplers, vec![SamplerChoice::Caps, SamplerChoice::Aps]);

        std::fs::write(&path, "betta = 0.125\n").unwrap();
        assert!(matches!(ExperimentConfig::from_file(&path), Err(Error::Config(_))));
        std::fs::write(&path, "beta zero\n").unwrap();
        assert!(ExperimentConfig::from_file(&path).is_err());
    }

    #[test]
    fn overrides_and_echo_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set_key("sampler", "maxpool").unwrap();
        cfg.set_key("set", "mdt").unwrap();
        cfg.set_key("temperature", "1e-2").unwrap();
        assert_eq!(cfg.samplers, vec![SamplerChoice::MaxPool]);
        assert_eq!(cfg.sets, vec!["mdt"]);
        // every echoed line re-applies cleanly
        let mut other = ExperimentConfig::default();
        for line in cfg.echo().lines() {
            let (k, v) = line.split_once('=').unwrap();
            other.set_key(k.trim(), v).unwrap();
        }
        assert_eq!(other.echo(), cfg.echo());
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.set_key("sampler", "pool9000").is_err());
        assert!(cfg.set_key("set", "xdt").is_err());
        assert!(cfg.set_key("use_aw", "perhaps").is_err());
        assert!(cfg.set_key("formats", "pdf").is_err());
    }
}
