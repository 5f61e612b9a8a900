//! The run configuration shared by every command: a TOML file whose fields
//! all have defaults, with command-line flags layered on top.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msop::curriculum::{Regime, ScheduleConfig, TrainConfig};
use msop::datasets::{PerturbConfig, SynthConfig};
use msop::msop::ClassifierConfig;
use msop::optim::SgdConfig;
use msop::pipeline::{RoiProvider, DEFAULT_CONFIDENCE};
use msop::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where evaluation and prediction take candidate regions from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum RoiSource {
    Manifest,
    Whole,
    /// Detector records, one JSON object per line.
    File(PathBuf),
}

impl FromStr for RoiSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manifest" => Ok(RoiSource::Manifest),
            "whole" => Ok(RoiSource::Whole),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(RoiSource::File(p.into())),
                _ => Err(Error::config(
                    "roi_source",
                    format!("`{s}` is not one of manifest, whole, file:<path>"),
                )),
            },
        }
    }
}

impl TryFrom<String> for RoiSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RoiSource> for String {
    fn from(r: RoiSource) -> String {
        r.to_string()
    }
}

impl fmt::Display for RoiSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoiSource::Manifest => f.write_str("manifest"),
            RoiSource::Whole => f.write_str("whole"),
            RoiSource::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl RoiSource {
    pub fn provider(&self, confidence: f64) -> Result<RoiProvider> {
        match self {
            RoiSource::Manifest => Ok(RoiProvider::Manifest),
            RoiSource::Whole => Ok(RoiProvider::WholeImage),
            RoiSource::File(p) => RoiProvider::from_detections(p, confidence),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub regime: Regime,
    pub sigma0: u32,
    pub k: usize,
    pub k_prime: usize,
    pub record_wall_time: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch_size,
            lr: t.sgd.lr,
            momentum: t.sgd.momentum,
            weight_decay: t.sgd.weight_decay,
            lr_step: t.sgd.lr_step,
            lr_gamma: t.sgd.lr_gamma,
            regime: t.regime,
            sigma0: t.schedule.sigma0,
            k: t.schedule.k,
            k_prime: t.schedule.k_prime,
            record_wall_time: t.record_wall_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub test_per_class: usize,
    pub regimes: Vec<Regime>,
    pub blur_sigmas: Vec<u32>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            test_per_class: 30,
            regimes: Regime::ALL.to_vec(),
            blur_sigmas: vec![0, 1, 2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation and training order.
    pub seed: u64,
    pub out: PathBuf,
    /// Training manifest for `train`, evaluation set for `eval` and
    /// `predict`.
    pub manifest: Option<PathBuf>,
    /// Held-out manifest for `ablate` on real data.
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub roi_source: RoiSource,
    /// Minimum detector confidence kept from a `file:` ROI source.
    pub confidence: f64,
    /// Patient-grouped cross-validation in `eval` when set.
    pub folds: Option<usize>,
    /// `synth` also writes the perturbed twin of the generated set.
    pub perturbed_twin: bool,
    pub train: TrainSection,
    pub model: ClassifierConfig,
    pub synth: SynthConfig,
    pub perturb: PerturbConfig,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            manifest: None,
            test_manifest: None,
            checkpoint: None,
            roi_source: RoiSource::Manifest,
            confidence: DEFAULT_CONFIDENCE,
            folds: None,
            perturbed_twin: false,
            train: TrainSection::default(),
            model: ClassifierConfig::default(),
            synth: SynthConfig::default(),
            perturb: PerturbConfig::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(|t| t.split(['=', '\n']).next().unwrap_or(t).trim().to_string())
                .filter(|t| !t.is_empty())
                .unwrap_or_else(|| "config".into());
            Error::config(field, message)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch,
            sgd: SgdConfig {
                lr: t.lr,
                momentum: t.momentum,
                weight_decay: t.weight_decay,
                lr_step: t.lr_step,
                lr_gamma: t.lr_gamma,
            },
            regime: t.regime,
            schedule: ScheduleConfig {
                sigma0: t.sigma0,
                k: t.k,
                k_prime: t.k_prime,
            },
            seed: self.seed,
            record_wall_time: t.record_wall_time,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.model.validate()?;
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::config("confidence", "must lie in [0, 1]"));
        }
        if self.folds.is_some_and(|k| k < 2) {
            return Err(Error::config("folds", "needs at least 2 folds"));
        }
        if !(0.0..=0.5).contains(&self.perturb.beta) {
            return Err(Error::config("perturb.beta", "must lie in [0, 0.5]"));
        }
        Ok(())
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::config("manifest", "required by this command"))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::config("checkpoint", "required by this command"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.batch, 16);
        assert_eq!(c.train.lr, 0.005);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 0.0005);
        assert_eq!((c.train.sigma0, c.train.k_prime, c.train.k), (16, 10, 5));
        assert_eq!(c.train.regime, Regime::Va);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn parse_serialize_fixed_point() {
        let text = r#"
            seed = 7
            manifest = "data/m.jsonl"
            roi_source = "file:det.jsonl"
            folds = 5
            [train]
            epochs = 3
            regime = "control"
            lr = 0.01
            [model]
            input_size = 32
            stage_widths = [4, 8]
            [synth]
            normal = 3
            [ablate]
            blur_sigmas = [0, 2]
        "#;
        let a = RunConfig::parse(text).unwrap();
        assert_eq!(a.roi_source, RoiSource::File("det.jsonl".into()));
        assert_eq!(a.model.stage_widths, vec![4, 8]);
        let s = a.to_toml();
        let b = RunConfig::parse(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_toml(), s);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_toml()).unwrap(), d);
    }

    #[test]
    fn unknown_and_bad_fields_name_the_field() {
        match RunConfig::parse("[train]\nepochz = 3\n") {
            Err(Error::Config { message, .. }) => assert!(message.contains("epochz")),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("roi_source = \"nowhere\"\n") {
            Err(Error::Config { message, .. }) => assert!(message.contains("roi_source")),
            other => panic!("{other:?}"),
        }
        let mut c = RunConfig::default();
        c.train.batch = 0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "batch"));
    }

    #[test]
    fn roi_source_strings() {
        for s in ["manifest", "whole", "file:a/b.jsonl"] {
            assert_eq!(s.parse::<RoiSource>().unwrap().to_string(), s);
        }
        assert!("file:".parse::<RoiSource>().is_err());
    }
}
