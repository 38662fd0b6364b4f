//! Command implementations behind the CLI. Each takes fully resolved arguments and writes
//! into an output directory.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use weatherir_core::inference::{iterative_restore, modulation_grid};
use weatherir_core::metrics::{
    evaluate, gt_quality, interval_error, ordering_accuracy, EvalItem, EvalReport, KindScores,
};
use weatherir_core::synth::WeatherKind;
use weatherir_core::trainer::{Batch, Dataset, SeverityRegime, Stage, StepLog, Trainer};
use weatherir_core::{Error as CoreError, Model};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::imageio::{load_png, save_png};
use crate::manifest::{generate_corpus, hex_digest, list_pngs, render_scenes, LoadedRow, Manifest};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    Ok(bytes)
}

// ---- synth

#[derive(Clone, Debug)]
pub struct SynthSummary {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub hash: String,
}

/// Writes clean images, degraded images and `manifest.csv` under `out`.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    let s = &cfg.synth;
    if s.kinds.is_empty() || s.per_kind == 0 {
        return Err(CliError::Usage(
            "synth needs at least one kind and per_kind >= 1".into(),
        ));
    }
    create_dir(out)?;
    cfg.echo_into(out)?;
    let scratch;
    let clean_dir = match &s.clean_dir {
        Some(d) => d.clone(),
        None => {
            if s.clean_count == 0 || s.size == 0 {
                return Err(CliError::Usage(
                    "synth.clean_count and synth.size must be positive".into(),
                ));
            }
            scratch = out.join("scenes");
            render_scenes(&scratch, s.clean_count, s.size)?;
            scratch.clone()
        }
    };
    let counts: Vec<(WeatherKind, usize)> = s.kinds.iter().map(|&k| (k, s.per_kind)).collect();
    let manifest = generate_corpus(&clean_dir, out, &counts, &s.severity, cfg.train.seed)?;
    Ok(SynthSummary {
        hash: manifest.hash()?,
        manifest_path: out.join("manifest.csv"),
        manifest,
    })
}

// ---- train

#[derive(Serialize)]
struct LogLine {
    step: u64,
    stage: u8,
    epoch: usize,
    lr: f64,
    total: f64,
    severity: f64,
    cl: f64,
    l1: f64,
    ssim: f64,
    perceptual: f64,
    contrastive: bool,
}

/// One line of the JSONL training log.
pub fn log_line(l: &StepLog) -> String {
    let line = LogLine {
        step: l.step,
        stage: l.stage,
        epoch: l.epoch,
        lr: l.lr,
        total: l.total,
        severity: l.losses.severity,
        cl: l.losses.cl,
        l1: l.losses.l1,
        ssim: l.losses.ssim,
        perceptual: l.losses.perceptual,
        contrastive: l.contrastive_active,
    };
    serde_json::to_string(&line).expect("log line serializes")
}

#[derive(Serialize)]
struct DumpCrop {
    row: usize,
    kind: String,
    top: usize,
    left: usize,
    gt_quality: f64,
    degraded: String,
    clean: String,
}

#[derive(Serialize)]
struct Dump {
    error: String,
    contrastive: bool,
    anchors: Vec<DumpCrop>,
    partners: Vec<DumpCrop>,
}

/// Writes the crops of `batch` and a JSON description into `dir`.
pub fn dump_batch(dir: &Path, batch: &Batch, error: &str) -> Result<()> {
    create_dir(dir)?;
    let side = |name: &str, crops: &[weatherir_core::trainer::Crop]| -> Result<Vec<DumpCrop>> {
        crops
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let d = format!("{name}{i}_degraded.png");
                let k = format!("{name}{i}_clean.png");
                save_png(&dir.join(&d), &c.degraded.clone().clamped())?;
                save_png(&dir.join(&k), &c.clean.clone().clamped())?;
                Ok(DumpCrop {
                    row: c.row,
                    kind: batch.kinds[i].to_string(),
                    top: c.top,
                    left: c.left,
                    gt_quality: c.gt_quality,
                    degraded: d,
                    clean: k,
                })
            })
            .collect()
    };
    let dump = Dump {
        error: error.to_string(),
        contrastive: batch.contrastive,
        anchors: side("anchor", &batch.anchors)?,
        partners: side("partner", &batch.partners)?,
    };
    write_json(&dir.join("batch.json"), &dump)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub last: Option<StepLog>,
}

/// Runs (or resumes) both training stages. Writes `config.txt`, `train_log.jsonl`,
/// `checkpoint.ckpt` after every epoch, `stage1.ckpt` and `final.ckpt`. A non-finite
/// loss dumps the offending batch into `nan_batch/` and fails with a numeric error.
pub fn train(cfg: &RunConfig, data: &Dataset, out: &Path, resume: Option<Checkpoint>) -> Result<TrainSummary> {
    create_dir(out)?;
    let mut trainer = match resume {
        Some(c) => c.into_trainer()?,
        None => Trainer::new(cfg.train.clone())?,
    };
    let mut cfg = cfg.clone();
    cfg.train = trainer.config().clone();
    cfg.echo_into(out)?;

    let kinds: std::collections::BTreeSet<_> = data.samples().iter().map(|s| s.kind).collect();
    if kinds.len() < 2 && cfg.train.weights.cl > 0.0 {
        log::warn!("only one weather kind in the data: contrastive loss disabled");
    }

    let log_path = out.join("train_log.jsonl");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(trainer.progress().global_step > 0)
        .write(true)
        .truncate(trainer.progress().global_step == 0)
        .open(&log_path)
        .map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut io_err: Option<std::io::Error> = None;
    let mut last = None;

    while !trainer.finished() {
        let stage = trainer.progress().stage;
        let r = trainer.run_epoch(data, &mut |l| {
            if let Err(e) = writeln!(log, "{}", log_line(l)) {
                io_err.get_or_insert(e);
            }
            last = Some(l.clone());
        });
        log.flush().map_err(|e| CliError::io(&log_path, e))?;
        if let Some(e) = io_err.take() {
            return Err(CliError::io(&log_path, e));
        }
        if let Err(e) = r {
            if let (CoreError::NonFinite { .. }, Some(b)) = (&e, trainer.last_batch()) {
                dump_batch(&out.join("nan_batch"), b, &e.to_string())?;
            }
            return Err(e.into());
        }
        Checkpoint::of_trainer(&trainer, &cfg).save(&out.join("checkpoint.ckpt"))?;
        let p = trainer.progress();
        log::info!(
            "stage {} epoch {} done, step {}",
            stage.number(),
            p.epoch,
            p.global_step
        );
        if stage == Stage::One && (p.stage == Stage::Two || trainer.finished()) {
            Checkpoint::of_trainer(&trainer, &cfg).save(&out.join("stage1.ckpt"))?;
        }
    }
    let final_checkpoint = out.join("final.ckpt");
    Checkpoint::of_trainer(&trainer, &cfg).save(&final_checkpoint)?;
    Ok(TrainSummary {
        steps: trainer.progress().global_step,
        final_checkpoint,
        last,
    })
}

// ---- eval

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoresJson {
    pub count: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub ssim_before: f64,
    pub ssim_after: f64,
}

impl From<&KindScores> for ScoresJson {
    fn from(s: &KindScores) -> Self {
        Self {
            count: s.count,
            psnr_before: s.psnr_before,
            psnr_after: s.psnr_after,
            ssim_before: s.ssim_before,
            ssim_after: s.ssim_after,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindJson {
    pub kind: String,
    #[serde(flatten)]
    pub scores: ScoresJson,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalJson {
    pub overall: ScoresJson,
    pub per_kind: Vec<KindJson>,
}

impl From<&EvalReport> for EvalJson {
    fn from(r: &EvalReport) -> Self {
        Self {
            overall: (&r.overall).into(),
            per_kind: r
                .per_kind
                .iter()
                .map(|(k, s)| KindJson {
                    kind: k.to_string(),
                    scores: s.into(),
                })
                .collect(),
        }
    }
}

pub fn evaluate_rows(model: &Model<f32>, rows: &[LoadedRow]) -> Result<EvalReport> {
    let items = rows.iter().map(|r| EvalItem {
        kind: r.row.kind,
        degraded: &r.degraded,
        clean: &r.clean,
    });
    Ok(evaluate(items, |img| model.restore(img))?)
}

/// Writes `eval.json` and returns its bytes.
pub fn eval(model: &Model<f32>, rows: &[LoadedRow], out: &Path) -> Result<(EvalReport, Vec<u8>)> {
    create_dir(out)?;
    let report = evaluate_rows(model, rows)?;
    let bytes = write_json(&out.join("eval.json"), &EvalJson::from(&report))?;
    Ok((report, bytes))
}

// ---- restore

/// Restores one PNG or every PNG of a directory `iters` times. The final result keeps the
/// input's file name; with `iters > 1` intermediates are written as `<stem>_iter<k>.png`.
pub fn restore(model: &Model<f32>, input: &Path, iters: usize, out: &Path) -> Result<Vec<PathBuf>> {
    if iters == 0 {
        return Err(CliError::Usage("--iters must be at least 1".into()));
    }
    let inputs = if input.is_dir() {
        list_pngs(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(CliError::Missing(input.to_path_buf()));
    };
    if inputs.is_empty() {
        return Err(CliError::Data(format!("no PNG images in {}", input.display())));
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for p in inputs {
        let img = load_png(&p)?;
        let outs = iterative_restore(model, &img, iters)?;
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
        for (k, o) in outs.iter().enumerate().take(iters - 1) {
            let q = out.join(format!("{stem}_iter{}.png", k + 1));
            save_png(&q, o)?;
        }
        let q = out.join(format!("{stem}.png"));
        save_png(&q, outs.last().unwrap())?;
        written.push(q);
    }
    Ok(written)
}

// ---- modulate

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlphaJson {
    pub alpha: f64,
    pub residual_energy: f64,
    pub predicted_quality: f64,
}

/// Writes `sheet.png` (one panel per alpha) and `modulation.json`.
pub fn modulate(model: &Model<f32>, input: &Path, alphas: &[f64], out: &Path) -> Result<Vec<AlphaJson>> {
    if alphas.is_empty() || alphas.iter().any(|a| !a.is_finite()) {
        return Err(CliError::Usage("--alphas needs finite values".into()));
    }
    let img = load_png(input)?;
    let grid = modulation_grid(model, &img, alphas)?;
    create_dir(out)?;
    save_png(&out.join("sheet.png"), &grid.sheet)?;
    let metrics: Vec<AlphaJson> = grid
        .metrics
        .iter()
        .map(|m| AlphaJson {
            alpha: m.alpha,
            residual_energy: m.residual_energy,
            predicted_quality: m.predicted_quality,
        })
        .collect();
    write_json(&out.join("modulation.json"), &metrics)?;
    Ok(metrics)
}

// ---- ablate

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankingJson {
    pub ordering_accuracy: Option<f64>,
    pub interval_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegimeJson {
    pub regime: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub ranking: RankingJson,
    pub restoration: EvalJson,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationJson {
    pub seed: u64,
    pub regimes: Vec<RegimeJson>,
}

/// Ordering accuracy and interval error of the quality ranker over `rows`.
pub fn ranking_stats(model: &Model<f32>, rows: &[LoadedRow]) -> Result<RankingJson> {
    let (mut preds, mut gts, mut kinds) = (Vec::new(), Vec::new(), Vec::new());
    for r in rows {
        let (_, sev) = model.encode_any(&r.degraded)?;
        preds.push(model.predict_iqa(&sev)?.0);
        gts.push(gt_quality(&r.degraded, &r.clean)?);
        kinds.push(r.row.kind);
    }
    Ok(RankingJson {
        ordering_accuracy: ordering_accuracy(&preds, &gts, &kinds),
        interval_error: interval_error(&preds, &gts, &kinds),
    })
}

/// Trains one model per regime from the same seed and configuration, then scores each on
/// `eval_rows`. Writes `<regime>/` training outputs and `ablation.json`; returns the report
/// and the bytes of the JSON file.
pub fn ablate(
    cfg: &RunConfig,
    data: &Dataset,
    eval_rows: &[LoadedRow],
    regimes: &[SeverityRegime],
    out: &Path,
) -> Result<(AblationJson, Vec<u8>)> {
    if regimes.is_empty() {
        return Err(CliError::Usage("no regimes to compare".into()));
    }
    create_dir(out)?;
    cfg.echo_into(out)?;
    let mut results = Vec::new();
    for &regime in regimes {
        let mut c = cfg.clone();
        c.train.regime = regime;
        let dir = out.join(regime.as_str());
        let summary = train(&c, data, &dir, None)?;
        let ck = Checkpoint::load(&summary.final_checkpoint)?;
        let model = ck.model()?;
        let bytes = std::fs::read(&summary.final_checkpoint).map_err(|e| CliError::io(&summary.final_checkpoint, e))?;
        results.push(RegimeJson {
            regime: regime.to_string(),
            checkpoint: format!("{}/final.ckpt", regime.as_str()),
            checkpoint_sha256: hex_digest(&bytes),
            ranking: ranking_stats(&model, eval_rows)?,
            restoration: EvalJson::from(&evaluate_rows(&model, eval_rows)?),
        });
    }
    let report = AblationJson {
        seed: cfg.train.seed,
        regimes: results,
    };
    let bytes = write_json(&out.join("ablation.json"), &report)?;
    Ok((report, bytes))
}

/// Loads a checkpoint's model, or fails with the checkpoint's error class.
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    Checkpoint::load(path)?.model()
}
