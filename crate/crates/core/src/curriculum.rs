//! Visual-acuity curriculum: Gaussian blur, the halving sigma schedule, the
//! ablation regimes and the training loop that ties them to the classifier.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::msop::{Checkpoint, MsSopClassifier, TrainingSnapshot};
use crate::optim::{Sgd, SgdConfig};
use crate::plane::Plane;
use crate::tensor::Tensor;

/// Normalised 1-D Gaussian of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!(
            "gaussian kernel needs sigma > 0, got {sigma}"
        )));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur with reflected borders. `sigma == 0` returns an
/// exact copy; the result is clamped to the input's intensity range.
pub fn blur_image(img: &Plane, sigma: f64) -> Result<Plane> {
    if img.is_empty() {
        return Err(Error::arg("cannot blur an empty image"));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width(), img.height());
    let mut rows = Plane::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| kv * img.get(reflect(x as i64 + t as i64 - r, w), y))
                .sum();
            rows.set(x, y, s);
        }
    }
    let (lo, hi) = img.min_max();
    let mut out = Plane::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| kv * rows.get(x, reflect(y as i64 + t as i64 - r, h)))
                .sum();
            out.set(x, y, s.clamp(lo, hi));
        }
    }
    Ok(out)
}

/// Parameters of the halving schedule: start at `sigma0`, and after every
/// epoch that is past `k_prime` and a multiple of `k`, halve (floor).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub sigma0: u32,
    pub k: usize,
    pub k_prime: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma0: 16,
            k: 5,
            k_prime: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "halving period must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub sigma: u32,
    pub sigma0: u32,
    pub k: usize,
    pub k_prime: usize,
    /// Next epoch to train, 1-based.
    pub epoch: usize,
}

impl CurriculumState {
    pub fn new(config: ScheduleConfig) -> Self {
        Self {
            sigma: config.sigma0,
            sigma0: config.sigma0,
            k: config.k,
            k_prime: config.k_prime,
            epoch: 1,
        }
    }
}

/// Returns the sigma to train with during `state.epoch` and the state for the
/// following epoch.
pub fn sigma_schedule(state: CurriculumState) -> (u32, CurriculumState) {
    let sigma = state.sigma;
    let mut next = state;
    if state.epoch > state.k_prime && state.k > 0 && state.epoch.is_multiple_of(state.k) {
        next.sigma = sigma / 2;
    }
    next.epoch += 1;
    (sigma, next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Blurry to sharp, the proposed curriculum.
    Va,
    /// The `Va` sigma sequence reversed: sharp to blurry.
    Anti,
    /// A sigma drawn independently each epoch from the `Va` sequence's
    /// multiset of values.
    Control,
    /// Always sharp.
    None,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Va, Regime::Anti, Regime::Control, Regime::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Va => "va",
            Regime::Anti => "anti",
            Regime::Control => "control",
            Regime::None => "none",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown regime `{s}` (expected va, anti, control or none)"
                ))
            })
    }
}

/// Sigma used at each of `epochs` epochs under `regime`.
pub fn sigma_sequence(
    regime: Regime,
    schedule: ScheduleConfig,
    epochs: usize,
    seed: u64,
) -> Vec<u32> {
    let va = |sigma0| {
        let mut state = CurriculumState::new(ScheduleConfig { sigma0, ..schedule });
        (0..epochs)
            .map(|_| {
                let (s, next) = sigma_schedule(state);
                state = next;
                s
            })
            .collect::<Vec<u32>>()
    };
    match regime {
        Regime::Va => va(schedule.sigma0),
        Regime::Anti => {
            let mut s = va(schedule.sigma0);
            s.reverse();
            s
        }
        Regime::Control => {
            let pool = va(schedule.sigma0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(CONTROL_STREAM);
            (0..epochs)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect()
        }
        Regime::None => va(0),
    }
}

const CONTROL_STREAM: u64 = u64::MAX;

/// A network-ready training example: grey levels already at the model's
/// input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Plane,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub regime: Regime,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Adds elapsed seconds to each log record. Off by default so that
    /// logs are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            sgd: SgdConfig::default(),
            regime: Regime::Va,
            schedule: ScheduleConfig::default(),
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        self.sgd.validate()?;
        self.schedule.validate()
    }

    pub fn sigmas(&self) -> Vec<u32> {
        sigma_sequence(self.regime, self.schedule, self.epochs, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sigma: u32,
    pub lr: f64,
    pub loss: f64,
    /// Fraction of training samples classified correctly before each
    /// sample's batch update.
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    /// Schedule state after the completed epochs.
    pub curriculum: CurriculumState,
    pub log: Vec<EpochRecord>,
}

pub struct Trainer {
    model: MsSopClassifier,
    sgd: Sgd,
    state: TrainingState,
    sigmas: Vec<u32>,
}

impl Trainer {
    pub fn new(model: MsSopClassifier, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sgd = Sgd::new(config.sgd.clone(), model.params().tensors(), true);
        let state = TrainingState {
            curriculum: CurriculumState::new(config.schedule),
            config,
            epochs_completed: 0,
            log: Vec::new(),
        };
        let sigmas = state.config.sigmas();
        Ok(Self {
            model,
            sgd,
            state,
            sigmas,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        let snapshot = checkpoint
            .training
            .ok_or_else(|| Error::arg("checkpoint holds no training state"))?;
        let model = checkpoint.model;
        snapshot.state.config.validate()?;
        let mut sgd = Sgd::new(
            snapshot.state.config.sgd.clone(),
            model.params().tensors(),
            true,
        );
        sgd.set_velocity(snapshot.velocity)?;
        let sigmas = snapshot.state.config.sigmas();
        Ok(Self {
            model,
            sgd,
            state: snapshot.state,
            sigmas,
        })
    }

    pub fn model(&self) -> &MsSopClassifier {
        &self.model
    }

    pub fn into_model(self) -> MsSopClassifier {
        self.model
    }

    pub fn state(&self) -> &TrainingState {
        &self.state
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.state.log
    }

    pub fn sigmas(&self) -> &[u32] {
        &self.sigmas
    }

    pub fn is_finished(&self) -> bool {
        self.state.epochs_completed >= self.state.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            training: Some(TrainingSnapshot {
                state: self.state.clone(),
                velocity: self.sgd.velocity().to_vec(),
            }),
        }
    }

    /// Trains one epoch. The data order is a seeded shuffle that depends
    /// only on the seed and the epoch number, so resumed runs match
    /// uninterrupted ones exactly.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(Error::arg("training already completed all epochs"));
        }
        if data.is_empty() {
            return Err(Error::arg("training set is empty"));
        }
        let size = self.model.config().input_size;
        if let Some(s) = data
            .iter()
            .find(|s| s.image.width() != size || s.image.height() != size)
        {
            return Err(Error::shape(format!(
                "training image is {}x{}, model input is {size}x{size}",
                s.image.width(),
                s.image.height()
            )));
        }
        let start = Instant::now();
        let epoch = self.state.epochs_completed + 1;
        let sigma = self.sigmas[epoch - 1];
        let inputs: Vec<Tensor> = data
            .par_iter()
            .map(|s| blur_image(&s.image, sigma as f64).map(|p| p.to_rgb_tensor()))
            .collect::<Result<_>>()?;

        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.state.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let lr = self.state.config.sgd.lr_at(epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(self.state.config.batch_size) {
            let model = &self.model;
            let results = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(&inputs[i], data[i].label.index()))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = model
                .params()
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for (r, &i) in results.iter().zip(batch) {
                loss_sum += r.loss;
                if argmax(&r.probs) == data[i].label.index() {
                    correct += 1;
                }
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v * scale;
                    }
                }
            }
            self.sgd
                .step(self.model.params_mut().tensors_mut(), &grads, lr)?;
        }
        if self.model.params().tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Invariant(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }

        let record = EpochRecord {
            epoch,
            sigma,
            lr,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
            wall_time: self
                .state
                .config
                .record_wall_time
                .then(|| start.elapsed().as_secs_f64()),
        };
        self.state.epochs_completed = epoch;
        self.state.curriculum = sigma_schedule(self.state.curriculum).1;
        self.state.log.push(record.clone());
        Ok(record)
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Trains `model` for every configured epoch and returns it with its log.
pub fn run_training(
    model: MsSopClassifier,
    data: &[Sample],
    config: TrainConfig,
) -> Result<(MsSopClassifier, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(model, config)?;
    while !trainer.is_finished() {
        trainer.run_epoch(data)?;
    }
    let log = trainer.state.log.clone();
    Ok((trainer.into_model(), log))
}
