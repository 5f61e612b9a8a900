//! Classification and detection metrics and patient-grouped folds.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::pipeline::BoundingBox;

/// Rows are ground truth, columns are predictions, both in
/// [`Label::index`] order.
pub type Confusion = [[usize; Label::COUNT]; Label::COUNT];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub miou: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Percentages in `[0, 100]`. Sensitivity and specificity treat malignant as
/// the positive class and are `None` when that class (respectively the
/// non-malignant classes) is absent from the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub acc2: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub confusion: Confusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
}

fn pct(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

pub fn classification_metrics(preds: &[Label], gts: &[Label]) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} ground-truth labels",
            preds.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::arg("no labels to evaluate"));
    }
    let mut confusion = [[0; Label::COUNT]; Label::COUNT];
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(gts) {
        confusion[g.index()][p.index()] += 1;
        match (g.is_malignant(), p.is_malignant()) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let correct = (0..Label::COUNT).map(|i| confusion[i][i]).sum();
    let n = gts.len();
    Ok(EvalReport {
        n,
        accuracy: pct(correct, n).expect("n > 0"),
        acc2: pct(tp + tn, n).expect("n > 0"),
        sensitivity: pct(tp, tp + fn_),
        specificity: pct(tn, tn + fp),
        confusion,
        detection: None,
    })
}

/// Centre-in-box rule: a prediction whose centre lies inside (or on) some
/// ground-truth box of its image is a true positive, otherwise a false
/// positive. An image without any prediction contributes one false negative.
/// mIoU averages, over predictions, the best IoU against that image's
/// ground truth.
pub fn detection_metrics(
    preds: &[Vec<BoundingBox>],
    gts: &[Vec<BoundingBox>],
) -> Result<DetectionMetrics> {
    if preds.len() != gts.len() {
        return Err(Error::arg(format!(
            "predictions for {} images, ground truth for {}",
            preds.len(),
            gts.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let (mut iou_sum, mut n_pred) = (0.0, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        for b in p.iter().chain(g) {
            b.validate()?;
        }
        if p.is_empty() {
            fn_ += 1;
        }
        for b in p {
            let (cx, cy) = b.center();
            if g.iter().any(|gt| gt.contains_point(cx, cy)) {
                tp += 1;
            } else {
                fp += 1;
            }
            iou_sum += g.iter().map(|gt| b.iou(gt)).fold(0.0, f64::max);
            n_pred += 1;
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(DetectionMetrics {
        tp,
        fp,
        fn_,
        miou: (n_pred > 0).then(|| iou_sum / n_pred as f64),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Splits record indices into `k` folds so that every patient's records share
/// one validation fold. Patients are shuffled with `seed`, stably ordered by
/// decreasing record count, and each is given to the currently smallest fold
/// (lowest index on ties).
pub fn patient_grouped_kfold<S: AsRef<str>>(
    patient_ids: &[S],
    k: usize,
    seed: u64,
) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::arg(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, id) in patient_ids.iter().enumerate() {
        let g = *slot.entry(id.as_ref()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    if groups.len() < k {
        return Err(Error::arg(format!(
            "{} distinct patients cannot fill {k} folds",
            groups.len()
        )));
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let mut val: Vec<Vec<usize>> = vec![Vec::new(); k];
    for g in groups {
        let f = (0..k).min_by_key(|&f| (val[f].len(), f)).expect("k >= 2");
        val[f].extend(g);
    }
    Ok(val
        .into_iter()
        .map(|mut v| {
            v.sort_unstable();
            let mut in_val = vec![false; patient_ids.len()];
            v.iter().for_each(|&i| in_val[i] = true);
            let train = (0..patient_ids.len()).filter(|&i| !in_val[i]).collect();
            Fold { train, val: v }
        })
        .collect())
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::arg("mean of no values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            sd: var.sqrt(),
        })
    }
}

impl fmt::Display for MeanSd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub folds: usize,
    pub accuracy: MeanSd,
    pub acc2: MeanSd,
    /// Over the folds where the metric is defined.
    pub sensitivity: Option<MeanSd>,
    pub specificity: Option<MeanSd>,
}

pub fn summarize_folds(reports: &[EvalReport]) -> Result<FoldSummary> {
    if reports.len() < 2 {
        return Err(Error::arg(format!(
            "fold summary needs at least 2 folds, got {}",
            reports.len()
        )));
    }
    let over = |f: fn(&EvalReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        MeanSd::of(&v).ok()
    };
    Ok(FoldSummary {
        folds: reports.len(),
        accuracy: over(|r| Some(r.accuracy)).expect("nonempty"),
        acc2: over(|r| Some(r.acc2)).expect("nonempty"),
        sensitivity: over(|r| r.sensitivity),
        specificity: over(|r| r.specificity),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"))
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "images        {}", self.n)?;
        writeln!(f, "accuracy      {:.1}", self.accuracy)?;
        writeln!(f, "acc-2         {:.1}", self.acc2)?;
        writeln!(f, "sensitivity   {}", opt(self.sensitivity))?;
        writeln!(f, "specificity   {}", opt(self.specificity))?;
        writeln!(
            f,
            "confusion (rows = truth, cols = predicted: normal benign malignant)"
        )?;
        for (l, row) in Label::ALL.iter().zip(&self.confusion) {
            writeln!(
                f,
                "  {:<10} {:>6} {:>6} {:>6}",
                l.as_str(),
                row[0],
                row[1],
                row[2]
            )?;
        }
        if let Some(d) = &self.detection {
            writeln!(
                f,
                "detection     mIoU {}  precision {}  recall {}",
                d.miou.map_or("n/a".into(), |v| format!("{v:.3}")),
                d.precision.map_or("n/a".into(), |v| format!("{v:.3}")),
                d.recall.map_or("n/a".into(), |v| format!("{v:.3}")),
            )?;
        }
        Ok(())
    }
}

impl fmt::Display for FoldSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = |m: Option<MeanSd>| m.map_or_else(|| "n/a".to_string(), |m| m.to_string());
        writeln!(f, "folds         {}", self.folds)?;
        writeln!(f, "accuracy      {}", self.accuracy)?;
        writeln!(f, "acc-2         {}", self.acc2)?;
        writeln!(f, "sensitivity   {}", o(self.sensitivity))?;
        writeln!(f, "specificity   {}", o(self.specificity))
    }
}
