//! One function per subcommand. Each reads its inputs from a resolved
//! [`RunConfig`] and writes its artifacts under `config.out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use msop::curriculum::{EpochRecord, Trainer};
use msop::datasets::{
    generate_with_shapes, load_manifest, manifest_root, perturb_dataset, read_manifest,
    write_dataset, write_manifest, LabeledImage,
};
use msop::eval::{
    classification_metrics, detection_metrics, patient_grouped_kfold, summarize_folds, EvalReport,
    FoldSummary,
};
use msop::experiment::{
    run_ablation, run_ablation_on, training_samples, AblationConfig, AblationTable, Benchmark,
};
use msop::msop::{Checkpoint, MsSopClassifier};
use msop::pipeline::{predict_image, ImagePrediction, RoiProvider};
use msop::plane::{save_gray, Plane};
use msop::{Error, Label, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const CHECKPOINT: &str = "checkpoint.msop";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).expect("records serialise");
        out.push(b'\n');
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("reports serialise");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn train_model(
    config: &RunConfig,
    records: &[LabeledImage],
) -> Result<(MsSopClassifier, Vec<EpochRecord>)> {
    let samples = training_samples(records, config.model.input_size)?;
    let model = MsSopClassifier::new(config.model.clone(), config.seed)?;
    msop::curriculum::run_training(model, &samples, config.train_config())
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochRecord>,
}

/// Trains on `config.manifest`, saving the checkpoint (with optimiser and
/// curriculum state) and the JSON Lines log after every epoch. With
/// `resume`, continues from the checkpoint already in `config.out` using the
/// training settings stored in it.
pub fn cmd_train(config: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let records = load_manifest(config.require_manifest()?)?;
    create_dir(&config.out)?;
    let ckpt_path = config.out.join(CHECKPOINT);
    let log_path = config.out.join(TRAIN_LOG);
    let mut trainer = if resume {
        Trainer::resume(Checkpoint::load(&ckpt_path)?)?
    } else {
        let model = MsSopClassifier::new(config.model.clone(), config.seed)?;
        Trainer::new(model, config.train_config())?
    };
    write_atomic(&config.out.join("config.toml"), config.to_toml().as_bytes())?;
    write_atomic(&log_path, &to_jsonl(trainer.log()))?;
    let samples = training_samples(&records, trainer.model().config().input_size)?;
    while !trainer.is_finished() {
        let rec = trainer.run_epoch(&samples)?;
        trainer.checkpoint().save(&ckpt_path)?;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        f.write_all(&to_jsonl(&[rec])).map_err(io_err(&log_path))?;
    }
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: trainer.log().to_vec(),
    })
}

fn evaluate_records(
    model: &MsSopClassifier,
    records: &[LabeledImage],
    provider: &RoiProvider,
) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(records.len());
    for r in records {
        let boxes = provider.boxes(&r.id, &r.boxes);
        preds.push(predict_image(&r.id, &r.plane(), &boxes, model)?.label);
    }
    let gts: Vec<Label> = records.iter().map(|r| r.label).collect();
    let mut report = classification_metrics(&preds, &gts)?;
    if let RoiProvider::External(_) = provider {
        let pred_boxes: Vec<_> = records
            .iter()
            .map(|r| provider.boxes(&r.id, &r.boxes))
            .collect();
        let gt_boxes: Vec<_> = records.iter().map(|r| r.boxes.clone()).collect();
        report.detection = Some(detection_metrics(&pred_boxes, &gt_boxes)?);
    }
    Ok(report)
}

pub enum EvalOutcome {
    Single(EvalReport),
    Folds(Vec<EvalReport>, FoldSummary),
}

/// Evaluates `config.checkpoint` on `config.manifest`, or with `folds` set,
/// trains and evaluates one fresh model per patient-grouped fold.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalOutcome> {
    config.validate()?;
    let records = load_manifest(config.require_manifest()?)?;
    let provider = config.roi_source.provider(config.confidence)?;
    create_dir(&config.out)?;
    let Some(k) = config.folds else {
        let model = Checkpoint::load(config.require_checkpoint()?)?.model;
        let report = evaluate_records(&model, &records, &provider)?;
        write_json(&config.out.join("report.json"), &report)?;
        write_atomic(
            &config.out.join("report.txt"),
            report.to_string().as_bytes(),
        )?;
        return Ok(EvalOutcome::Single(report));
    };
    let patients: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    let folds = patient_grouped_kfold(&patients, k, config.seed)?;
    let mut reports = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let pick = |idx: &[usize]| idx.iter().map(|&j| records[j].clone()).collect::<Vec<_>>();
        let (model, _) = train_model(config, &pick(&fold.train))?;
        let report = evaluate_records(&model, &pick(&fold.val), &provider)?;
        write_json(&config.out.join(format!("fold_{i}.json")), &report)?;
        reports.push(report);
    }
    let summary = summarize_folds(&reports)?;
    write_json(&config.out.join("summary.json"), &summary)?;
    write_atomic(
        &config.out.join("summary.txt"),
        summary.to_string().as_bytes(),
    )?;
    Ok(EvalOutcome::Folds(reports, summary))
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum PredictRecord {
    Ok(ImagePrediction),
    Err { image_id: String, error: String },
}

/// Predicts every image of `config.manifest` plus any extra `images`
/// (paths taken as given). An image that cannot be read yields an error
/// record and the run continues.
pub fn cmd_predict(config: &RunConfig, images: &[PathBuf]) -> Result<Vec<PredictRecord>> {
    config.validate()?;
    let model = Checkpoint::load(config.require_checkpoint()?)?.model;
    let provider = config.roi_source.provider(config.confidence)?;
    let mut inputs: Vec<(String, PathBuf, Vec<_>)> = Vec::new();
    if let Some(m) = &config.manifest {
        let root = manifest_root(m);
        for r in read_manifest(m)? {
            inputs.push((r.image.clone(), root.join(&r.image), r.boxes));
        }
    }
    for p in images {
        inputs.push((p.display().to_string(), p.clone(), Vec::new()));
    }
    if inputs.is_empty() {
        return Err(Error::config("manifest", "no images to predict"));
    }
    create_dir(&config.out)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (id, path, boxes) in inputs {
        let boxes = provider.boxes(&id, &boxes);
        let rec = match Plane::load_png(&path) {
            Ok(img) => PredictRecord::Ok(predict_image(&id, &img, &boxes, &model)?),
            Err(e) => PredictRecord::Err {
                image_id: id,
                error: e.to_string(),
            },
        };
        out.push(rec);
    }
    write_atomic(&config.out.join("predictions.jsonl"), &to_jsonl(&out))?;
    Ok(out)
}

#[derive(Serialize)]
struct ShapeRecord<'a> {
    image: &'a str,
    #[serde(flatten)]
    shape: &'a msop::datasets::ShapeParams,
}

pub struct SynthOutcome {
    pub manifest: PathBuf,
    pub perturbed_manifest: Option<PathBuf>,
    pub count: usize,
}

/// Writes the synthetic set (`manifest.jsonl`, PNGs under `images/`, the
/// generator parameters in `shapes.jsonl`) and optionally its perturbed
/// twin (`manifest_perturbed.jsonl`, with `provenance.jsonl`).
pub fn cmd_synth(config: &RunConfig) -> Result<SynthOutcome> {
    config.synth.validate()?;
    let generated = generate_with_shapes(&config.synth)?;
    create_dir(&config.out)?;
    let images: Vec<LabeledImage> = generated.iter().map(|(img, _)| img.clone()).collect();
    let manifest = write_dataset(&config.out, "manifest.jsonl", &images)?;
    let shapes: Vec<ShapeRecord> = generated
        .iter()
        .map(|(img, shape)| ShapeRecord {
            image: &img.id,
            shape,
        })
        .collect();
    write_atomic(&config.out.join("shapes.jsonl"), &to_jsonl(&shapes))?;
    let perturbed_manifest = if config.perturbed_twin {
        let (twin, provenance) = perturb_dataset(&images, &images, &config.perturb)?;
        for t in twin
            .iter()
            .filter(|t| provenance.iter().any(|p| p.image == t.id))
        {
            save_gray(&config.out.join(&t.id), &t.image)?;
        }
        let path = config.out.join("manifest_perturbed.jsonl");
        let records: Vec<_> = twin.iter().map(LabeledImage::record).collect();
        write_manifest(&path, &records)?;
        write_atomic(&config.out.join("provenance.jsonl"), &to_jsonl(&provenance))?;
        Some(path)
    } else {
        None
    };
    Ok(SynthOutcome {
        manifest,
        perturbed_manifest,
        count: images.len(),
    })
}

pub fn ablation_config(config: &RunConfig) -> AblationConfig {
    AblationConfig {
        model: config.model.clone(),
        train: config.train_config(),
        synth: config.synth.clone(),
        test_per_class: config.ablate.test_per_class,
        perturb: config.perturb.clone(),
        regimes: config.ablate.regimes.clone(),
        blur_sigmas: config.ablate.blur_sigmas.clone(),
    }
}

/// Runs the regime ablation on `manifest`/`test_manifest` when both are set,
/// otherwise on a generated synthetic benchmark.
pub fn cmd_ablate(config: &RunConfig) -> Result<AblationTable> {
    config.validate()?;
    let ab = ablation_config(config);
    let table = match (&config.manifest, &config.test_manifest) {
        (Some(train), Some(test)) => {
            let bench = Benchmark::new(load_manifest(train)?, load_manifest(test)?, &ab.perturb)?;
            run_ablation_on(&bench, &ab)?
        }
        (None, None) => {
            ab.synth.validate()?;
            run_ablation(&ab)?
        }
        _ => {
            return Err(Error::config(
                "test_manifest",
                "ablation on real data needs both manifest and test_manifest",
            ))
        }
    };
    create_dir(&config.out)?;
    write_json(&config.out.join("ablation.json"), &table)?;
    write_atomic(
        &config.out.join("ablation.txt"),
        table.to_string().as_bytes(),
    )?;
    Ok(table)
}
