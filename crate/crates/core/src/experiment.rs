//! Regime ablation on the synthetic benchmark: train one model per regime
//! under identical seeds and budgets, then evaluate each on the clean test
//! set, its texture-perturbed twin and blurred copies.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{blur_image, run_training, EpochRecord, Regime, Sample, TrainConfig};
use crate::datasets::{
    generate_synthetic, perturb_dataset, LabeledImage, PerturbConfig, SynthConfig,
};
use crate::error::Result;
use crate::eval::{classification_metrics, EvalReport};
use crate::label::Label;
use crate::msop::{ClassifierConfig, MsSopClassifier};
use crate::optim::SgdConfig;
use crate::pipeline::{predict_image, region_samples, RegionClassifier};
use crate::plane::Plane;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub model: ClassifierConfig,
    pub train: TrainConfig,
    /// Training set; the test set uses the same generator settings with
    /// `test_per_class` images per class and a different seed.
    pub synth: SynthConfig,
    pub test_per_class: usize,
    pub perturb: PerturbConfig,
    pub regimes: Vec<Regime>,
    pub blur_sigmas: Vec<u32>,
}

/// A four-stage model on 64x64 crops of 300 training and 90 test images.
/// Covariance is scaled by 1/N and the learning rate lowered to 0.001;
/// without them the attention gates saturate and training stalls.
impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: ClassifierConfig {
                input_size: 64,
                stage_widths: vec![8, 16, 32, 64],
                layers_per_stage: 1,
                normalize_covariance: true,
                ..ClassifierConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                sgd: SgdConfig {
                    lr: 0.001,
                    ..SgdConfig::default()
                },
                ..TrainConfig::default()
            },
            synth: SynthConfig {
                normal: 100,
                benign: 100,
                malignant: 100,
                ..SynthConfig::default()
            },
            test_per_class: 30,
            perturb: PerturbConfig::default(),
            regimes: Regime::ALL.to_vec(),
            blur_sigmas: vec![0, 1, 2, 4, 8, 16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Perturbed,
    Blur(u32),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Clean => f.write_str("clean"),
            Condition::Perturbed => f.write_str("perturbed"),
            Condition::Blur(s) => write!(f, "blur{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub regime: Regime,
    pub condition: Condition,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub logs: Vec<(Regime, Vec<EpochRecord>)>,
}

impl AblationTable {
    pub fn get(&self, regime: Regime, condition: &Condition) -> Option<&EvalReport> {
        self.rows
            .iter()
            .find(|r| r.regime == regime && r.condition == *condition)
            .map(|r| &r.report)
    }

    /// Clean minus perturbed specificity.
    pub fn specificity_drop(&self, regime: Regime) -> Option<f64> {
        let clean = self.get(regime, &Condition::Clean)?.specificity?;
        let pert = self.get(regime, &Condition::Perturbed)?.specificity?;
        Some(clean - pert)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
        writeln!(
            f,
            "{:<8} {:<10} {:>7} {:>7} {:>7} {:>7}",
            "regime", "condition", "acc", "acc2", "sens", "spec"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:<10} {:>7.1} {:>7.1} {:>7} {:>7}",
                r.regime.as_str(),
                r.condition.to_string(),
                r.report.accuracy,
                r.report.acc2,
                o(r.report.sensitivity),
                o(r.report.specificity)
            )?;
        }
        Ok(())
    }
}

/// Blurs every region after it has been resized to the network input, the
/// same place the curriculum applies its blur.
struct BlurredInput<'a> {
    model: &'a MsSopClassifier,
    sigma: u32,
}

impl RegionClassifier for BlurredInput<'_> {
    fn classify(&self, region: &Plane) -> Result<Vec<f64>> {
        let s = self.model.config().input_size;
        let r = blur_image(&region.resize_bilinear(s, s)?, self.sigma as f64)?;
        self.model.predict_proba(&r.to_rgb_tensor())
    }
}

/// Training samples from the ground-truth ROIs of every record.
pub fn training_samples(records: &[LabeledImage], input_size: usize) -> Result<Vec<Sample>> {
    let per: Vec<Vec<Sample>> = records
        .par_iter()
        .map(|r| region_samples(&r.plane(), &r.boxes, r.label, input_size))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Image-level predictions through the ROI pipeline using each record's
/// ground-truth boxes.
pub fn predict_records(
    model: &impl RegionClassifier,
    records: &[LabeledImage],
) -> Result<Vec<Label>> {
    records
        .iter()
        .map(|r| Ok(predict_image(&r.id, &r.plane(), &r.boxes, model)?.label))
        .collect()
}

pub fn evaluate(model: &impl RegionClassifier, records: &[LabeledImage]) -> Result<EvalReport> {
    let preds = predict_records(model, records)?;
    let gts: Vec<Label> = records.iter().map(|r| r.label).collect();
    classification_metrics(&preds, &gts)
}

pub struct Benchmark {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub perturbed: Vec<LabeledImage>,
}

impl Benchmark {
    /// Pairs `test` with its perturbed twin, drawing spectra from the
    /// malignant images of `train`.
    pub fn new(
        train: Vec<LabeledImage>,
        test: Vec<LabeledImage>,
        perturb: &PerturbConfig,
    ) -> Result<Self> {
        let (perturbed, _) = perturb_dataset(&test, &train, perturb)?;
        Ok(Self {
            train,
            test,
            perturbed,
        })
    }
}

pub fn build_benchmark(config: &AblationConfig) -> Result<Benchmark> {
    let train = generate_synthetic(&config.synth)?;
    let test = generate_synthetic(&SynthConfig {
        normal: config.test_per_class,
        benign: config.test_per_class,
        malignant: config.test_per_class,
        seed: config.synth.seed.wrapping_add(1_000_003),
        ..config.synth.clone()
    })?;
    Benchmark::new(train, test, &config.perturb)
}

pub fn run_ablation(config: &AblationConfig) -> Result<AblationTable> {
    run_ablation_on(&build_benchmark(config)?, config)
}

/// Runs the ablation on a prepared benchmark; `config.synth` and
/// `config.test_per_class` are not consulted.
pub fn run_ablation_on(bench: &Benchmark, config: &AblationConfig) -> Result<AblationTable> {
    let samples = training_samples(&bench.train, config.model.input_size)?;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &regime in &config.regimes {
        let model = MsSopClassifier::new(config.model.clone(), config.train.seed)?;
        let train = TrainConfig {
            regime,
            ..config.train.clone()
        };
        let (model, log) = run_training(model, &samples, train)?;
        logs.push((regime, log));
        rows.push(AblationRow {
            regime,
            condition: Condition::Clean,
            report: evaluate(&model, &bench.test)?,
        });
        rows.push(AblationRow {
            regime,
            condition: Condition::Perturbed,
            report: evaluate(&model, &bench.perturbed)?,
        });
        for &sigma in &config.blur_sigmas {
            let blurred = BlurredInput {
                model: &model,
                sigma,
            };
            rows.push(AblationRow {
                regime,
                condition: Condition::Blur(sigma),
                report: evaluate(&blurred, &bench.test)?,
            });
        }
    }
    Ok(AblationTable { rows, logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::ScheduleConfig;

    fn tiny(sigma0: u32) -> AblationConfig {
        AblationConfig {
            model: ClassifierConfig {
                input_size: 16,
                stage_widths: vec![4, 8],
                layers_per_stage: 1,
                ..ClassifierConfig::default()
            },
            train: TrainConfig {
                epochs: 2,
                batch_size: 4,
                schedule: ScheduleConfig {
                    sigma0,
                    k: 1,
                    k_prime: 0,
                },
                seed: 1,
                ..TrainConfig::default()
            },
            synth: SynthConfig {
                size: 48,
                normal: 2,
                benign: 2,
                malignant: 2,
                ..SynthConfig::default()
            },
            test_per_class: 2,
            ..AblationConfig::default()
        }
    }

    #[test]
    fn table_has_every_regime_and_condition() {
        let t = run_ablation(&tiny(2)).unwrap();
        assert_eq!(t.rows.len(), 4 * 8);
        assert_eq!(t.logs.len(), 4);
        for regime in Regime::ALL {
            assert!(t.get(regime, &Condition::Blur(16)).is_some());
            assert!(t.specificity_drop(regime).is_some());
        }
        assert!(t.to_string().lines().count() == 33);
    }

    #[test]
    fn regimes_coincide_without_blur() {
        let t = run_ablation(&tiny(0)).unwrap();
        for regime in Regime::ALL {
            for (a, b) in t
                .rows
                .iter()
                .filter(|r| r.regime == regime)
                .zip(t.rows.iter().filter(|r| r.regime == Regime::None))
            {
                assert_eq!(a.report, b.report);
            }
        }
        for (_, log) in &t.logs {
            assert_eq!(log, &t.logs[0].1);
        }
    }

    #[test]
    fn sensitivity_is_unchanged_by_perturbation() {
        let t = run_ablation(&tiny(2)).unwrap();
        for regime in Regime::ALL {
            let c = t.get(regime, &Condition::Clean).unwrap();
            let p = t.get(regime, &Condition::Perturbed).unwrap();
            assert_eq!(c.sensitivity, p.sensitivity);
        }
    }
}
