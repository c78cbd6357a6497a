//! Run configuration: one flat `key = value` namespace covering every knob
//! of the pipeline, with named presets and layered overrides.
//!
//! Precedence, lowest to highest: preset defaults, config file, the
//! `STT_SEED` environment variable (seed only), command-line `--key value`
//! overrides. The resolved configuration serializes back to canonical text
//! so checkpoints and reports can echo exactly what produced them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::alignment::LossConfig;
use crate::driver::synth::SyntheticCorpusSpec;
use crate::encoders::{BackboneKind, EncoderConfig};
use crate::error::{Error, Result};
use crate::evaluation::{BaselineKind, EvalConfig};
use crate::numeric::optim::AdamwConfig;
use crate::pairing::{CurriculumSchedule, FramePosition, SamplerOptions, TactileFrames};

/// Which tactile descriptor drives localization at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorSource {
    /// Category prototype averaged over instances and frame positions.
    Prototype,
    /// The descriptor of one fixed frame position of the traced instance.
    Frame(FramePosition),
}

impl DescriptorSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorSource::Prototype => "prototype",
            DescriptorSource::Frame(p) => p.as_str(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prototype" => Ok(DescriptorSource::Prototype),
            other => Ok(DescriptorSource::Frame(FramePosition::parse(other)?)),
        }
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optim: AdamwConfig,
    pub batch_size: usize,
    pub schedule: CurriculumSchedule,
    pub sampler: SamplerOptions,
    pub hflip: bool,
    pub eval: EvalConfig,
    pub eval_descriptor: DescriptorSource,
    /// Stop after this many epochs; 0 means the full schedule.
    pub train_epochs: usize,
    /// Optimizer steps per epoch; 0 derives one pass over the train records.
    pub steps_per_epoch: usize,
    pub synth: SyntheticCorpusSpec,
}

impl RunConfig {
    /// Desk-scale defaults: small model, short schedule, fast on one core.
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".to_string(),
            seed: 0,
            out: PathBuf::from("runs/out"),
            data_dir: PathBuf::from("data"),
            encoder: EncoderConfig {
                image_side: 224,
                patch: 16,
                input_channels: 3,
                backbone_dim: 8,
                shared_dim: 8,
                backbone: BackboneKind::FeatureFile,
                ln_eps: 1e-5,
            },
            loss: LossConfig {
                temperature: 0.07,
                cosine: true,
            },
            optim: AdamwConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
                weight_decay: 0.05,
            },
            batch_size: 16,
            schedule: CurriculumSchedule {
                stage1_epochs: 20,
                stage2_epochs: 10,
                rho: 0.5,
                frozen_epochs: 2,
            },
            sampler: SamplerOptions {
                in_domain_stage1: true,
                tactile_frames: TactileFrames::All,
            },
            hflip: false,
            eval: EvalConfig::default(),
            eval_descriptor: DescriptorSource::Prototype,
            train_epochs: 0,
            steps_per_epoch: 32,
            synth: SyntheticCorpusSpec::default(),
        }
    }

    /// Full-scale hyperparameters for training against real backbones.
    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.preset = "paper".to_string();
        cfg.optim.lr = 1e-5;
        cfg.batch_size = 64;
        cfg.schedule.stage1_epochs = 100;
        cfg.schedule.stage2_epochs = 50;
        cfg.schedule.frozen_epochs = 3;
        cfg
    }

    fn preset_named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::invalid(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }

    /// Applies one `key = value` setting.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                // Handled before individual keys; re-validate the name only.
                Self::preset_named(value)?;
                self.preset = value.to_string();
            }
            "seed" => self.seed = parse_u64(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "data.dir" => self.data_dir = PathBuf::from(value),
            "encoder.image_side" => self.encoder.image_side = parse_usize(key, value)?,
            "encoder.patch" => self.encoder.patch = parse_usize(key, value)?,
            "encoder.input_channels" => self.encoder.input_channels = parse_usize(key, value)?,
            "encoder.backbone_dim" => self.encoder.backbone_dim = parse_usize(key, value)?,
            "encoder.shared_dim" => self.encoder.shared_dim = parse_usize(key, value)?,
            "encoder.backbone" => self.encoder.backbone = BackboneKind::parse(value)?,
            "encoder.ln_eps" => self.encoder.ln_eps = parse_f64(key, value)?,
            "loss.temperature" => self.loss.temperature = parse_f64(key, value)?,
            "loss.cosine" => self.loss.cosine = parse_bool(key, value)?,
            "optim.lr" => self.optim.lr = parse_f64(key, value)?,
            "optim.beta1" => self.optim.beta1 = parse_f64(key, value)?,
            "optim.beta2" => self.optim.beta2 = parse_f64(key, value)?,
            "optim.eps" => self.optim.eps = parse_f64(key, value)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_f64(key, value)?,
            "optim.batch_size" => self.batch_size = parse_usize(key, value)?,
            "schedule.stage1_epochs" => self.schedule.stage1_epochs = parse_usize(key, value)?,
            "schedule.stage2_epochs" => self.schedule.stage2_epochs = parse_usize(key, value)?,
            "schedule.rho" => self.schedule.rho = parse_f64(key, value)?,
            "schedule.frozen_epochs" => self.schedule.frozen_epochs = parse_usize(key, value)?,
            "pairing.in_domain_stage1" => self.sampler.in_domain_stage1 = parse_bool(key, value)?,
            "pairing.tactile_frames" => self.sampler.tactile_frames = TactileFrames::parse(value)?,
            "augment.hflip" => self.hflip = parse_bool(key, value)?,
            "eval.threshold" => self.eval.threshold = parse_f64(key, value)?,
            "eval.baseline" => {
                self.eval.baseline = match value {
                    "none" => None,
                    other => Some(BaselineKind::parse(other)?),
                }
            }
            "eval.descriptor" => self.eval_descriptor = DescriptorSource::parse(value)?,
            "train.epochs" => self.train_epochs = parse_usize(key, value)?,
            "train.steps_per_epoch" => self.steps_per_epoch = parse_usize(key, value)?,
            "synth.categories" => self.synth.categories = parse_usize(key, value)?,
            "synth.instances_per_category" => {
                self.synth.instances_per_category = parse_usize(key, value)?
            }
            "synth.frames_per_instance" => {
                self.synth.frames_per_instance = parse_usize(key, value)?
            }
            "synth.grid" => self.synth.grid = parse_usize(key, value)?,
            "synth.tactile_grid" => self.synth.tactile_grid = parse_usize(key, value)?,
            "synth.visual_grid" => self.synth.visual_grid = parse_usize(key, value)?,
            "synth.channels" => self.synth.channels = parse_usize(key, value)?,
            "synth.noise_level" => self.synth.noise_level = parse_f64(key, value)?,
            "synth.instance_jitter" => self.synth.instance_jitter = parse_f64(key, value)?,
            "synth.patch_jitter" => self.synth.patch_jitter = parse_f64(key, value)?,
            "synth.scenes" => self.synth.scenes = parse_usize(key, value)?,
            "synth.interactive_scenes" => self.synth.interactive_scenes = parse_usize(key, value)?,
            "synth.out_domain_per_category" => {
                self.synth.out_domain_per_category = parse_usize(key, value)?
            }
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Layers sources by precedence and validates the result.
    ///
    /// `file` is the raw config-file text (with its path for error messages),
    /// `env_seed` the value of `STT_SEED` if set, `overrides` the CLI flags.
    pub fn resolve(
        file: Option<(&str, &Path)>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let file_pairs = match file {
            Some((text, origin)) => parse_config_text(text, origin)?,
            None => Vec::new(),
        };
        // The preset picks the default table, so it must resolve first
        // regardless of where in the sources it appears.
        let mut preset = "desk".to_string();
        for (k, v) in file_pairs.iter().chain(overrides.iter()) {
            if k == "preset" {
                preset = v.clone();
            }
        }
        let mut cfg = Self::preset_named(&preset)?;
        for (k, v) in &file_pairs {
            cfg.apply(k, v)?;
        }
        if let Some(seed) = env_seed {
            cfg.apply("seed", seed)
                .map_err(|_| Error::invalid(format!("STT_SEED: `{seed}` is not a valid seed")))?;
        }
        for (k, v) in overrides {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.schedule.validate()?;
        self.eval.validate()?;
        self.synth.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("optim.batch_size must be at least 1"));
        }
        Ok(())
    }

    /// Like [`to_text`](Self::to_text) minus filesystem locations, for
    /// embedding in artifacts that should compare equal across machines and
    /// working directories.
    pub fn portable_text(&self) -> String {
        self.to_text()
            .lines()
            .filter(|l| !l.starts_with("out = ") && !l.starts_with("data.dir = "))
            .fold(String::new(), |mut acc, l| {
                acc.push_str(l);
                acc.push('\n');
                acc
            })
    }

    /// Canonical text form; parsing it back yields an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kv = |s: &mut String, k: &str, v: &str| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv(&mut s, "preset", &self.preset);
        kv(&mut s, "seed", &self.seed.to_string());
        kv(&mut s, "out", &self.out.display().to_string());
        kv(&mut s, "data.dir", &self.data_dir.display().to_string());
        kv(&mut s, "encoder.image_side", &self.encoder.image_side.to_string());
        kv(&mut s, "encoder.patch", &self.encoder.patch.to_string());
        kv(&mut s, "encoder.input_channels", &self.encoder.input_channels.to_string());
        kv(&mut s, "encoder.backbone_dim", &self.encoder.backbone_dim.to_string());
        kv(&mut s, "encoder.shared_dim", &self.encoder.shared_dim.to_string());
        kv(&mut s, "encoder.backbone", self.encoder.backbone.as_str());
        kv(&mut s, "encoder.ln_eps", &fmt_f64(self.encoder.ln_eps));
        kv(&mut s, "loss.temperature", &fmt_f64(self.loss.temperature));
        kv(&mut s, "loss.cosine", bool_str(self.loss.cosine));
        kv(&mut s, "optim.lr", &fmt_f64(self.optim.lr));
        kv(&mut s, "optim.beta1", &fmt_f64(self.optim.beta1));
        kv(&mut s, "optim.beta2", &fmt_f64(self.optim.beta2));
        kv(&mut s, "optim.eps", &fmt_f64(self.optim.eps));
        kv(&mut s, "optim.weight_decay", &fmt_f64(self.optim.weight_decay));
        kv(&mut s, "optim.batch_size", &self.batch_size.to_string());
        kv(&mut s, "schedule.stage1_epochs", &self.schedule.stage1_epochs.to_string());
        kv(&mut s, "schedule.stage2_epochs", &self.schedule.stage2_epochs.to_string());
        kv(&mut s, "schedule.rho", &fmt_f64(self.schedule.rho));
        kv(&mut s, "schedule.frozen_epochs", &self.schedule.frozen_epochs.to_string());
        kv(&mut s, "pairing.in_domain_stage1", bool_str(self.sampler.in_domain_stage1));
        kv(&mut s, "pairing.tactile_frames", self.sampler.tactile_frames.as_str());
        kv(&mut s, "augment.hflip", bool_str(self.hflip));
        kv(&mut s, "eval.threshold", &fmt_f64(self.eval.threshold));
        kv(
            &mut s,
            "eval.baseline",
            self.eval.baseline.map_or("none", |b| b.as_str()),
        );
        kv(&mut s, "eval.descriptor", self.eval_descriptor.as_str());
        kv(&mut s, "train.epochs", &self.train_epochs.to_string());
        kv(&mut s, "train.steps_per_epoch", &self.steps_per_epoch.to_string());
        kv(&mut s, "synth.categories", &self.synth.categories.to_string());
        kv(
            &mut s,
            "synth.instances_per_category",
            &self.synth.instances_per_category.to_string(),
        );
        kv(
            &mut s,
            "synth.frames_per_instance",
            &self.synth.frames_per_instance.to_string(),
        );
        kv(&mut s, "synth.grid", &self.synth.grid.to_string());
        kv(&mut s, "synth.tactile_grid", &self.synth.tactile_grid.to_string());
        kv(&mut s, "synth.visual_grid", &self.synth.visual_grid.to_string());
        kv(&mut s, "synth.channels", &self.synth.channels.to_string());
        kv(&mut s, "synth.noise_level", &fmt_f64(self.synth.noise_level));
        kv(&mut s, "synth.instance_jitter", &fmt_f64(self.synth.instance_jitter));
        kv(&mut s, "synth.patch_jitter", &fmt_f64(self.synth.patch_jitter));
        kv(&mut s, "synth.scenes", &self.synth.scenes.to_string());
        kv(
            &mut s,
            "synth.interactive_scenes",
            &self.synth.interactive_scenes.to_string(),
        );
        kv(
            &mut s,
            "synth.out_domain_per_category",
            &self.synth.out_domain_per_category.to_string(),
        );
        s
    }
}

fn bool_str(v: bool) -> &'static str {
    if v {
        "true"
    } else {
        "false"
    }
}

fn fmt_f64(v: f64) -> String {
    // `{:?}` prints the shortest round-tripping decimal for an f64.
    format!("{v:?}")
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: `{value}` is not an unsigned integer")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: `{value}` is not an unsigned integer")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: `{value}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::invalid(format!("{key}: `{value}` is not finite")));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::invalid(format!("{key}: `{other}` is not a boolean"))),
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Later occurrences of a key override earlier ones.
pub fn parse_config_text(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(origin, idx + 1, format!("expected `key = value`, got `{raw}`"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::parse(origin, idx + 1, "empty key"));
        }
        match seen.get(key) {
            Some(&at) => pairs[at] = (key.to_string(), value.to_string()),
            None => {
                seen.insert(key.to_string(), pairs.len());
                pairs.push((key.to_string(), value.to_string()));
            }
        }
    }
    Ok(pairs)
}

/// Reads and parses a config file.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_resolve_without_sources() {
        let cfg = RunConfig::resolve(None, None, &[]).unwrap();
        assert_eq!(cfg.optim.lr, 1e-3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.schedule.stage1_epochs, 20);
        assert_eq!(cfg.schedule.stage2_epochs, 10);
        assert_eq!(cfg.schedule.frozen_epochs, 2);
        assert_eq!(cfg.loss.temperature, 0.07);
        assert_eq!(cfg.optim.beta1, 0.9);
        assert_eq!(cfg.optim.beta2, 0.95);
        assert_eq!(cfg.optim.weight_decay, 0.05);
    }

    #[test]
    fn paper_preset_swaps_scale_hyperparameters() {
        let overrides = [("preset".to_string(), "paper".to_string())];
        let cfg = RunConfig::resolve(None, None, &overrides).unwrap();
        assert_eq!(cfg.optim.lr, 1e-5);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.schedule.stage1_epochs, 100);
        assert_eq!(cfg.schedule.stage2_epochs, 50);
        assert_eq!(cfg.schedule.frozen_epochs, 3);
        // Non-scale knobs keep desk values.
        assert_eq!(cfg.loss.temperature, 0.07);
    }

    #[test]
    fn file_then_env_then_flag_precedence_for_seed() {
        let file = "seed = 1\noptim.lr = 0.5\n";
        let origin = Path::new("run.cfg");
        let cfg = RunConfig::resolve(Some((file, origin)), None, &[]).unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.optim.lr, 0.5);

        let cfg = RunConfig::resolve(Some((file, origin)), Some("2"), &[]).unwrap();
        assert_eq!(cfg.seed, 2);

        let flags = [("seed".to_string(), "3".to_string())];
        let cfg = RunConfig::resolve(Some((file, origin)), Some("2"), &flags).unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn preset_in_file_applies_before_other_file_keys() {
        let file = "optim.lr = 0.25\npreset = paper\n";
        let cfg = RunConfig::resolve(Some((file, Path::new("c"))), None, &[]).unwrap();
        // The explicit lr wins over the preset value despite line order.
        assert_eq!(cfg.optim.lr, 0.25);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let file = "\n# a comment\nseed = 9 # trailing\n\n";
        let pairs = parse_config_text(file, Path::new("c")).unwrap();
        assert_eq!(pairs, vec![("seed".to_string(), "9".to_string())]);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let flags = [("optim.momentum".to_string(), "0.9".to_string())];
        let err = RunConfig::resolve(None, None, &flags).unwrap_err();
        assert!(err.to_string().contains("optim.momentum"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn malformed_line_reports_file_and_line() {
        let err = parse_config_text("seed: 4\n", Path::new("bad.cfg")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.cfg:1"), "{msg}");
    }

    #[test]
    fn text_round_trips_to_an_equal_config() {
        let flags = [
            ("preset".to_string(), "paper".to_string()),
            ("seed".to_string(), "41".to_string()),
            ("schedule.rho".to_string(), "0.75".to_string()),
            ("pairing.tactile_frames".to_string(), "interior".to_string()),
            ("eval.baseline".to_string(), "full-circle".to_string()),
            ("eval.descriptor".to_string(), "middle".to_string()),
        ];
        let cfg = RunConfig::resolve(None, None, &flags).unwrap();
        let text = cfg.to_text();
        let back = RunConfig::resolve(Some((&text, Path::new("echo"))), None, &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let flags = [("optim.batch_size".to_string(), "0".to_string())];
        assert!(RunConfig::resolve(None, None, &flags).is_err());
        let flags = [("eval.threshold".to_string(), "1.5".to_string())];
        assert!(RunConfig::resolve(None, None, &flags).is_err());
        let flags = [("schedule.rho".to_string(), "-0.1".to_string())];
        assert!(RunConfig::resolve(None, None, &flags).is_err());
    }

    #[test]
    fn later_duplicate_key_wins_within_a_file() {
        let file = "seed = 1\nseed = 5\n";
        let cfg = RunConfig::resolve(Some((file, Path::new("c"))), None, &[]).unwrap();
        assert_eq!(cfg.seed, 5);
    }
}
