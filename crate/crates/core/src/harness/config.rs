use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::federation::{LocalTraining, Schedule};
use crate::selection::{LambdaMode, Strategy, DEFAULT_EPS_U};
use crate::semcom::SemComConfig;

/// Environment variable that replaces the configured seed list.
pub const SEED_ENV: &str = "FEDSEM_SEED";

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSource {
    Synthetic(SynthSpec),
    /// Corpus file in the tensor binary format.
    File(PathBuf),
}

/// A complete, validated experiment description.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub validation_fraction: f64,
    pub clients: usize,
    pub alpha_dir: f64,
    pub rounds: usize,
    pub e_total: usize,
    /// `None` means `E_total`.
    pub e_max: Option<usize>,
    pub lambda: LambdaMode,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub semcom: SemComConfig,
    pub local: LocalTraining,
    pub initial_loss: f64,
    pub eps_u: f64,
    /// `None`: normalize when a baseline run is present. `Some(true)`: require one.
    pub normalize_efficiency: Option<bool>,
    pub parallel: bool,
    pub checkpoints: bool,
    pub output_dir: PathBuf,
}

pub const PRESETS: [&str; 2] = ["desk-scale", "paper-scale"];

impl ExperimentConfig {
    /// 16x16x3 synthetic corpus (4 classes x 100 images), four clients, ten
    /// rounds, twelve epochs per round with at most six per client.
    pub fn desk_scale() -> Self {
        let semcom = SemComConfig::desk_scale();
        Self {
            corpus: CorpusSource::Synthetic(SynthSpec::desk_scale()),
            validation_fraction: 0.2,
            clients: 4,
            alpha_dir: 1.0,
            rounds: 10,
            e_total: 12,
            e_max: Some(6),
            lambda: LambdaMode::Adaptive,
            strategies: vec![
                Strategy::Baseline,
                Strategy::Utilitarian,
                Strategy::ProportionalFairness(LambdaMode::Adaptive),
            ],
            seeds: vec![1, 2],
            semcom,
            local: LocalTraining {
                lr: 3e-3,
                weight_decay: 1e-4,
                batch_size: 16,
                clip_norm: 1.0,
            },
            initial_loss: 1.0,
            eps_u: DEFAULT_EPS_U,
            normalize_efficiency: None,
            parallel: true,
            checkpoints: false,
            output_dir: PathBuf::from("fedsem-out"),
        }
    }

    /// 64x64x3 images, ten clients, fifty rounds, thirty epochs per round.
    pub fn paper_scale() -> Self {
        Self {
            corpus: CorpusSource::Synthetic(SynthSpec {
                classes: 20,
                per_class: 100,
                channels: 3,
                height: 64,
                width: 64,
                noise: 0.03,
            }),
            clients: 10,
            rounds: 50,
            e_total: 30,
            e_max: None,
            seeds: vec![1, 2, 3],
            semcom: SemComConfig::paper_scale(),
            local: LocalTraining {
                lr: 3e-4,
                weight_decay: 1e-4,
                batch_size: 16,
                clip_norm: 1.0,
            },
            ..Self::desk_scale()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-scale" => Ok(Self::desk_scale()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::config(format!(
                "preset: unknown preset {other:?}, expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn e_max(&self) -> usize {
        self.e_max.unwrap_or(self.e_total)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            rounds: self.rounds,
            e_total: self.e_total,
            e_max: self.e_max(),
            eps_u: self.eps_u,
            initial_loss: self.initial_loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("{key}: {msg}")));
        self.semcom.validate()?;
        self.local.validate()?;
        if let CorpusSource::Synthetic(s) = &self.corpus {
            if [s.channels, s.height, s.width] != self.semcom.image_shape() {
                return bad(
                    "height",
                    format!(
                        "synthetic images are {}x{}x{} but the model expects {:?}",
                        s.channels,
                        s.height,
                        s.width,
                        self.semcom.image_shape()
                    ),
                );
            }
            if s.classes == 0 || s.per_class == 0 {
                return bad("synth_classes", "class count and images per class must be >= 1".into());
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            return bad("validation_fraction", format!("must be in (0, 1), got {}", self.validation_fraction));
        }
        if self.clients == 0 {
            return bad("clients", "must be >= 1".into());
        }
        if !(self.alpha_dir > 0.0 && self.alpha_dir.is_finite()) {
            return bad("alpha_dir", format!("must be > 0, got {}", self.alpha_dir));
        }
        if self.rounds == 0 {
            return bad("rounds", "must be >= 1".into());
        }
        if self.e_total == 0 {
            return bad("e_total", "must be >= 1".into());
        }
        if self.e_max() == 0 {
            return bad("e_max", "must be >= 1".into());
        }
        if self.e_total > self.clients * self.e_max() {
            return Err(Error::Infeasible {
                total: self.e_total,
                capacity: self.clients * self.e_max(),
            });
        }
        if self.strategies.contains(&Strategy::Baseline) && self.e_total < self.clients {
            return bad("e_total", format!("baseline needs E_total >= K = {}", self.clients));
        }
        if let LambdaMode::Constant(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("lambda", format!("must be >= 0, got {l}"));
            }
        }
        if self.strategies.is_empty() {
            return bad("strategies", "need at least one strategy".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed".into());
        }
        if !(self.initial_loss >= 0.0 && self.initial_loss.is_finite()) {
            return bad("initial_loss", format!("must be >= 0, got {}", self.initial_loss));
        }
        if !(self.eps_u > 0.0 && self.eps_u.is_finite()) {
            return bad("eps_u", format!("must be > 0, got {}", self.eps_u));
        }
        if self.normalize_efficiency == Some(true) && !self.strategies.contains(&Strategy::Baseline) {
            return bad(
                "normalize_efficiency",
                "efficiency normalization requires a baseline run in the batch".into(),
            );
        }
        Ok(())
    }

    /// Replace the seed list from [`SEED_ENV`] when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seeds = parse_list(SEED_ENV, &v)?;
        }
        Ok(())
    }

    /// Parse `key = value` lines. A `preset` line, wherever it appears, is
    /// expanded first; every other key then overrides it. Blank lines and
    /// `#` comments are ignored; unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("{key}: set more than once")));
            }
            entries.push((key, value));
        }
        let mut cfg = match entries.iter().find(|(k, _)| *k == "preset") {
            Some((_, name)) => Self::preset(name)?,
            None => Self::desk_scale(),
        };
        for (key, value) in entries.into_iter().filter(|(k, _)| *k != "preset") {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthSpec> {
        match &mut self.corpus {
            CorpusSource::Synthetic(s) => Ok(s),
            CorpusSource::File(_) => Err(Error::config(format!("{key}: only applies to the synthetic corpus"))),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus_path" => self.corpus = CorpusSource::File(PathBuf::from(value)),
            "synth_classes" => self.synth_mut(key)?.classes = parse(key, value)?,
            "synth_per_class" => self.synth_mut(key)?.per_class = parse(key, value)?,
            "synth_noise" => self.synth_mut(key)?.noise = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "clients" => self.clients = parse(key, value)?,
            "alpha_dir" => self.alpha_dir = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "e_total" => self.e_total = parse(key, value)?,
            "e_max" => {
                self.e_max = match value {
                    "e_total" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "lambda" => {
                self.lambda = match value {
                    "adaptive" => LambdaMode::Adaptive,
                    v => LambdaMode::Constant(parse(key, v)?),
                }
            }
            "strategies" => {
                self.strategies = value
                    .split(',')
                    .map(|s| parse_strategy(key, s.trim(), self.lambda))
                    .collect::<Result<_>>()?
            }
            "seeds" => self.seeds = parse_list(key, value)?,
            "channels" | "height" | "width" => {
                let v = parse(key, value)?;
                let target = match key {
                    "channels" => &mut self.semcom.channels,
                    "height" => &mut self.semcom.height,
                    _ => &mut self.semcom.width,
                };
                *target = v;
                if let CorpusSource::Synthetic(s) = &mut self.corpus {
                    match key {
                        "channels" => s.channels = v,
                        "height" => s.height = v,
                        _ => s.width = v,
                    }
                }
            }
            "encoder_channels" => {
                let list: Vec<usize> = parse_list(key, value)?;
                self.semcom.encoder_channels = list
                    .try_into()
                    .map_err(|_| Error::config(format!("{key}: expected three comma-separated widths")))?;
            }
            "semantic_dim" => self.semcom.semantic_dim = parse(key, value)?,
            "channel_dim" => {
                let v: usize = parse(key, value)?;
                if !v.is_multiple_of(2) {
                    return Err(Error::config(format!("{key}: must be even (I/Q pairs), got {v}")));
                }
                self.semcom.channel_dim = v;
            }
            "snr_db" => self.semcom.snr_db = parse(key, value)?,
            "alpha_loss" => self.semcom.alpha_loss = parse(key, value)?,
            "eps_zf" => self.semcom.eps_zf = parse(key, value)?,
            "noise" => self.semcom.noise_enabled = parse_bool(key, value)?,
            "fading" => self.semcom.fading_enabled = parse_bool(key, value)?,
            "power_norm" => self.semcom.normalize_power = parse_bool(key, value)?,
            "lr" => self.local.lr = parse(key, value)?,
            "weight_decay" => self.local.weight_decay = parse(key, value)?,
            "batch_size" => self.local.batch_size = parse(key, value)?,
            "clip_norm" => self.local.clip_norm = parse(key, value)?,
            "initial_loss" => self.initial_loss = parse(key, value)?,
            "eps_u" => self.eps_u = parse(key, value)?,
            "normalize_efficiency" => {
                self.normalize_efficiency = match value {
                    "auto" => None,
                    v => Some(parse_bool(key, v)?),
                }
            }
            "parallel" => self.parallel = parse_bool(key, value)?,
            "checkpoints" => self.checkpoints = parse_bool(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(Error::config(format!("{other}: unknown key"))),
        }
        // A later `lambda` line still applies to an earlier `strategies` line.
        for s in &mut self.strategies {
            if let Strategy::ProportionalFairness(mode) = s {
                *mode = self.lambda;
            }
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::config(format!(
            "{key}: cannot parse {value:?} as {}",
            std::any::type_name::<T>().rsplit("::").next().unwrap_or("value")
        ))
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

pub fn parse_strategy(key: &str, name: &str, lambda: LambdaMode) -> Result<Strategy> {
    match name {
        "baseline" => Ok(Strategy::Baseline),
        "utilitarian" => Ok(Strategy::Utilitarian),
        "prop_fair" => Ok(Strategy::ProportionalFairness(lambda)),
        other => Err(Error::config(format!(
            "{key}: unknown strategy {other:?}, expected baseline, utilitarian or prop_fair"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(text: &str) -> String {
        match ExperimentConfig::parse(text) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn preset_alone_is_complete() {
        let cfg = ExperimentConfig::parse("preset = desk-scale\n").unwrap();
        assert_eq!(cfg, ExperimentConfig::desk_scale());
        assert_eq!(cfg.e_max(), 6);
        assert_eq!(ExperimentConfig::paper_scale().e_max(), 30);
        assert_eq!(cfg.semcom.image_shape(), [3, 16, 16]);
        assert_eq!((cfg.clients, cfg.rounds, cfg.e_total), (4, 10, 12));
        assert_eq!((cfg.semcom.semantic_dim, cfg.semcom.channel_dim), (64, 8));
        ExperimentConfig::paper_scale().validate().unwrap();
    }

    #[test]
    fn large_preset_values() {
        let cfg = ExperimentConfig::parse("preset = paper-scale").unwrap();
        assert_eq!((cfg.clients, cfg.rounds, cfg.e_total, cfg.alpha_dir), (10, 50, 30, 1.0));
        assert_eq!((cfg.local.lr, cfg.local.weight_decay, cfg.local.batch_size, cfg.local.clip_norm), (3e-4, 1e-4, 16, 1.0));
        assert_eq!((cfg.semcom.alpha_loss, cfg.semcom.snr_db), (0.8, 10.0));
        assert_eq!((cfg.semcom.semantic_dim, cfg.semcom.channel_dim), (256, 32));
    }

    #[test]
    fn overrides_apply_after_preset() {
        let cfg = ExperimentConfig::parse("rounds = 3\n# note\npreset = desk-scale\nlambda = 2.5\nstrategies = prop_fair, baseline\n").unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(
            cfg.strategies,
            vec![Strategy::ProportionalFairness(LambdaMode::Constant(2.5)), Strategy::Baseline]
        );
    }

    #[test]
    fn errors_name_the_key() {
        assert!(err("snr_db = ten").starts_with("snr_db:"));
        assert!(err("channel_dim = 7").starts_with("channel_dim:"));
        assert!(err("bogus = 1").starts_with("bogus:"));
        assert!(err("rounds = 1\nrounds = 2").starts_with("rounds:"));
        assert!(err("preset = moon").starts_with("preset:"));
        assert!(matches!(
            ExperimentConfig::parse("e_max = 2"),
            Err(Error::Infeasible { total: 12, capacity: 8 })
        ));
        assert!(matches!(
            ExperimentConfig::parse("e_max = e_total\nclients = 2"),
            Ok(ExperimentConfig { e_max: None, .. })
        ));
        assert!(err("strategies = utilitarian\nnormalize_efficiency = true").starts_with("normalize_efficiency:"));
        assert!(err("just words").contains("line 1"));
    }

    #[test]
    fn image_size_follows_model() {
        let cfg = ExperimentConfig::parse("height = 24\nwidth = 32").unwrap();
        match &cfg.corpus {
            CorpusSource::Synthetic(s) => assert_eq!((s.height, s.width), (24, 32)),
            other => panic!("{other:?}"),
        }
    }
}
