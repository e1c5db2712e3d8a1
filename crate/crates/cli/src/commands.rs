use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use localctl::eval::{
    run_ablation, score_image, AblationPlan, AblationReport, AblationRow, ImageMetrics, Scenario,
};
use localctl::guidance::{ConceptMatchState, ControlMask, GuidanceConfig};
use localctl::model::checkpoint::{Checkpoint, OptimizerSnapshot};
use localctl::model::{parse_prompt, vocab, DenoiserWeights, Group};
use localctl::sampler::{
    diagnostics_csv, sample, train_phase, Adam, LossCurve, Mode, SampleRequest, StepDiagnostics,
    Toggles,
};
use localctl::scenes::{
    edge_condition, generate_scene, io, ConditionImage, DatasetManifest, GrayImage,
};
use localctl::{DType, Error, Result, Scalar};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// What a command reports back to `main`.
#[derive(Debug, Default)]
pub struct Outcome {
    pub written: Vec<PathBuf>,
    /// Cells of a sweep that failed; nonzero maps to the partial-failure exit code.
    pub failures: usize,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", dir.display()),
        ))
    })
}

fn write(out: &mut Outcome, path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    out.written.push(path);
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("manifest serializes") + "\n"
}

#[derive(Serialize)]
struct DatasetRecord<'a> {
    command: &'static str,
    code_version: &'static str,
    config_hash: String,
    dataset: &'a DatasetManifest,
}

/// Writes the dataset manifest and `data.previews` preview renders with their global conditions.
pub fn cmd_dataset(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.output_dir.join("dataset");
    ensure_dir(&dir)?;
    let mut out = Outcome::default();
    let manifest = DatasetManifest::build(&cfg.data.distribution, cfg.seed, cfg.data.previews);
    for rec in &manifest.scenes {
        let scene = generate_scene(&rec.spec)?;
        let all: Vec<usize> = (0..scene.instance_masks.len()).collect();
        let cond = edge_condition(&scene.instance_masks, &all)?;
        write(
            &mut out,
            dir.join(format!("{:05}.png", rec.index)),
            io::encode_png(&scene.image)?,
        )?;
        write(
            &mut out,
            dir.join(format!("{:05}_edges.png", rec.index)),
            io::encode_mask_png(&cond.edges)?,
        )?;
    }
    let record = DatasetRecord {
        command: "dataset",
        code_version: CODE_VERSION,
        config_hash: cfg.hash(),
        dataset: &manifest,
    };
    write(&mut out, dir.join("manifest.json"), json(&record))?;
    Ok(out)
}

#[derive(Serialize)]
struct TrainRecord {
    command: &'static str,
    code_version: &'static str,
    config_hash: String,
    checkpoint: PathBuf,
    checkpoint_hash: String,
    resumed_from: Option<PathBuf>,
    base_steps: u64,
    control_steps: u64,
    final_base_loss: Option<f64>,
    final_control_loss: Option<f64>,
}

fn save_checkpoint<F: Scalar>(
    path: &Path,
    weights: &DenoiserWeights<F>,
    adam: Option<&Adam<F>>,
) -> Result<String> {
    let ck = Checkpoint {
        weights: weights.clone(),
        optimizer: adam.map(|a| a.snapshot(weights)),
    };
    let bytes = ck.to_bytes();
    fs::write(path, &bytes)?;
    Ok(ck.digest())
}

fn append_curve(path: &Path, curve: &LossCurve, fresh: bool) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)?;
    let text = curve.to_csv();
    let body = if fresh {
        text.as_str()
    } else {
        text.split_once('\n').map_or("", |(_, b)| b)
    };
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Runs one phase up to `target` total steps in checkpointed segments.
fn run_phase<F: Scalar>(
    cfg: &RunConfig,
    weights: &mut DenoiserWeights<F>,
    adam: &mut Adam<F>,
    target: u64,
    ckpt: &Path,
    curve_path: &Path,
    log: &mut impl FnMut(String),
) -> Result<Option<f64>> {
    let schedule = cfg.schedule.training()?;
    let lr = match adam.group {
        Group::Base => cfg.train.learning_rate,
        Group::Control => cfg.train.control_learning_rate,
    };
    let mut last = None;
    if adam.step == 0 {
        append_curve(curve_path, &LossCurve::default(), true)?;
    }
    let every = if cfg.train.checkpoint_every == 0 {
        u64::MAX
    } else {
        cfg.train.checkpoint_every
    };
    while adam.step < target {
        let steps = (target - adam.step).min(every);
        let tc = cfg.train.phase(steps, lr, cfg.seed);
        match train_phase(
            weights,
            adam,
            &cfg.data.distribution,
            &schedule,
            &tc,
            |_, _| {},
        ) {
            Ok(curve) => {
                append_curve(curve_path, &curve, false)?;
                last = curve.window_mean(-50, 50);
                log(format!(
                    "{} step {}/{} loss {:.5}",
                    adam.group.name(),
                    adam.step,
                    target,
                    last.unwrap_or(f64::NAN)
                ));
                save_checkpoint(ckpt, weights, Some(adam))?;
            }
            Err(e) => {
                save_checkpoint(ckpt, weights, Some(adam))?;
                log(format!(
                    "{e}; last finite weights saved to {}",
                    ckpt.display()
                ));
                return Err(e);
            }
        }
    }
    Ok(last)
}

fn train_typed<F: Scalar>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    log: &mut impl FnMut(String),
) -> Result<Outcome> {
    ensure_dir(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join("model.ckpt");
    let (mut weights, snapshot): (DenoiserWeights<F>, Option<OptimizerSnapshot<F>>) = match resume {
        Some(p) => {
            let ck = Checkpoint::<F>::load(p)?;
            if ck.weights.arch != cfg.model {
                return Err(Error::Validation(
                    "checkpoint architecture differs from [model]".into(),
                ));
            }
            (ck.weights, ck.optimizer)
        }
        None => (
            DenoiserWeights::init(&cfg.model, cfg.train.init_seed)?,
            None,
        ),
    };
    if cfg.train.base_steps == 0 && cfg.train.control_steps > 0 && weights.base_steps == 0 {
        return Err(Error::Usage("control training needs base steps".into()));
    }
    let restore = |weights: &DenoiserWeights<F>, group: Group| -> Result<Option<Adam<F>>> {
        match &snapshot {
            Some(s) if s.phase == group.name() => Adam::restore(weights, s).map(Some),
            _ => Ok(None),
        }
    };
    let mut base_loss = None;
    let mut optimizer = None;
    if weights.base_steps < cfg.train.base_steps {
        if weights.control_steps > 0 {
            return Err(Error::Validation(
                "cannot extend base training after the control phase started".into(),
            ));
        }
        let mut adam = match restore(&weights, Group::Base)? {
            Some(a) => a,
            None if weights.base_steps == 0 => Adam::new(&weights, Group::Base),
            None => {
                return Err(Error::Checkpoint(
                    "resuming base training needs its optimizer state".into(),
                ))
            }
        };
        base_loss = run_phase(
            cfg,
            &mut weights,
            &mut adam,
            cfg.train.base_steps,
            &ckpt,
            &cfg.output_dir.join("base_loss.csv"),
            log,
        )?;
        optimizer = Some(adam.snapshot(&weights));
    }
    let mut control_loss = None;
    if weights.control_steps < cfg.train.control_steps {
        let mut adam = match restore(&weights, Group::Control)? {
            Some(a) => a,
            None if weights.control_steps == 0 => {
                weights.copy_encoder_into_control();
                Adam::new(&weights, Group::Control)
            }
            None => {
                return Err(Error::Checkpoint(
                    "resuming control training needs its optimizer state".into(),
                ))
            }
        };
        control_loss = run_phase(
            cfg,
            &mut weights,
            &mut adam,
            cfg.train.control_steps,
            &ckpt,
            &cfg.output_dir.join("control_loss.csv"),
            log,
        )?;
        optimizer = Some(adam.snapshot(&weights));
    }
    let mut out = Outcome::default();
    let ck = Checkpoint {
        weights,
        optimizer: optimizer.or(snapshot),
    };
    let bytes = ck.to_bytes();
    write(&mut out, ckpt.clone(), &bytes)?;
    let record = TrainRecord {
        command: "train",
        code_version: CODE_VERSION,
        config_hash: cfg.hash(),
        checkpoint: ckpt.clone(),
        checkpoint_hash: ck.digest(),
        resumed_from: resume.map(Path::to_path_buf),
        base_steps: ck.weights.base_steps,
        control_steps: ck.weights.control_steps,
        final_base_loss: base_loss,
        final_control_loss: control_loss,
    };
    write(
        &mut out,
        cfg.output_dir.join("train_manifest.json"),
        json(&record),
    )?;
    Ok(out)
}

/// Trains the base denoiser, then the control branch, writing `model.ckpt`
/// and per-phase loss CSVs under the output directory.
pub fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    mut log: impl FnMut(String),
) -> Result<Outcome> {
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, resume, &mut log),
        DType::F64 => train_typed::<f64>(cfg, resume, &mut log),
    }
}

/// Condition, mask and prompt for generation and evaluation.
pub struct Inputs {
    pub prompt: Vec<usize>,
    pub condition: Option<ConditionImage>,
    pub mask: Option<ControlMask>,
    pub scenario: Option<Scenario>,
}

/// Built-in scenarios by name.
pub fn scenario(name: &str) -> Result<Scenario> {
    match name {
        "circle_and_square" => Ok(Scenario::circle_and_square()),
        other => Err(Error::Validation(format!(
            "unknown scenario {other:?} (known: circle_and_square)"
        ))),
    }
}

/// Reads the prompt, condition and mask named in `[sample]`, or takes them from a built-in scenario.
pub fn load_inputs(cfg: &RunConfig, scenario_name: Option<&str>) -> Result<Inputs> {
    if let Some(name) = scenario_name {
        let sc = scenario(name)?;
        return Ok(Inputs {
            prompt: sc.prompt(),
            condition: Some(sc.condition.clone()),
            mask: Some(sc.mask.clone()),
            scenario: Some(sc),
        });
    }
    let size = cfg.model.image_size;
    let condition = match &cfg.sample.condition {
        Some(p) => {
            let edges = io::load_mask(p)?;
            if edges.width != size || edges.height != size {
                return Err(Error::Validation(format!(
                    "condition {} is {}x{}, expected {size}x{size}",
                    p.display(),
                    edges.width,
                    edges.height
                )));
            }
            Some(ConditionImage::from_edges(edges))
        }
        None => None,
    };
    let mask = match &cfg.sample.mask {
        Some(p) => {
            let m = io::load_mask(p)?;
            if m.width != size || m.height != size {
                return Err(Error::Validation(format!(
                    "mask {} is {}x{}, expected {size}x{size}",
                    p.display(),
                    m.width,
                    m.height
                )));
            }
            Some(ControlMask::from_image_mask(m)?)
        }
        None => None,
    };
    Ok(Inputs {
        prompt: parse_prompt(&cfg.sample.prompt)?,
        condition,
        mask,
        scenario: None,
    })
}

#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub command: &'static str,
    pub code_version: &'static str,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub dtype: DType,
    pub seed: u64,
    pub mode: &'static str,
    pub toggles: String,
    pub prompt: Vec<String>,
    pub prompt_tokens: Vec<usize>,
    pub guidance: &'a GuidanceConfig,
    pub concept: &'a ConceptMatchState,
    pub metrics: Option<ImageMetrics>,
    pub diagnostics: &'a [StepDiagnostics],
}

fn generate_typed<F: Scalar>(cfg: &RunConfig, scenario_name: Option<&str>) -> Result<Outcome> {
    let mode = Mode::from_name(&cfg.sample.mode)
        .ok_or_else(|| Error::Validation(format!("unknown mode {:?}", cfg.sample.mode)))?;
    let toggles = Toggles::parse(&cfg.sample.toggles)?;
    let inputs = load_inputs(cfg, scenario_name)?;
    let ck = Checkpoint::<F>::load(&cfg.sample.checkpoint)?;
    let checkpoint_hash = ck.digest();
    let schedule = cfg.schedule.sampling()?;
    let dir = cfg.output_dir.join("generate");
    ensure_dir(&dir)?;
    let results: Vec<Result<_>> = cfg
        .sample
        .seeds
        .par_iter()
        .map(|&seed| {
            let r = sample(&SampleRequest {
                weights: &ck.weights,
                schedule: &schedule,
                prompt: &inputs.prompt,
                condition: inputs.condition.as_ref(),
                mask: inputs.mask.as_ref(),
                guidance: &cfg.guidance,
                mode,
                toggles,
                step: cfg.sample.step,
                seed,
                allow_untrained: false,
            })?;
            let img = GrayImage::from_latent(&r.image)?;
            let metrics = match &inputs.scenario {
                Some(sc) => Some(score_image(&img, sc)?.0),
                None => None,
            };
            Ok((seed, r, img, metrics))
        })
        .collect();
    let mut out = Outcome::default();
    for res in results {
        let (seed, r, img, metrics) = res?;
        let stem = format!("seed{seed:05}");
        write(
            &mut out,
            dir.join(format!("{stem}.png")),
            io::encode_png(&img)?,
        )?;
        write(
            &mut out,
            dir.join(format!("{stem}.csv")),
            diagnostics_csv(&r.diagnostics),
        )?;
        let manifest = RunManifest {
            command: "generate",
            code_version: CODE_VERSION,
            config_hash: cfg.hash(),
            checkpoint_hash: checkpoint_hash.clone(),
            dtype: F::DTYPE,
            seed,
            mode: mode.name(),
            toggles: toggles.effective(mode).label(),
            prompt: r
                .prompt
                .iter()
                .map(|&t| vocab::word(t).unwrap_or("?").to_string())
                .collect(),
            prompt_tokens: r.prompt.clone(),
            guidance: &cfg.guidance,
            concept: &r.concept,
            metrics,
            diagnostics: &r.diagnostics,
        };
        write(&mut out, dir.join(format!("{stem}.json")), json(&manifest))?;
    }
    Ok(out)
}

/// Samples one image per seed with PNG, diagnostics CSV and JSON manifest.
pub fn cmd_generate(cfg: &RunConfig, scenario_name: Option<&str>) -> Result<Outcome> {
    match cfg.dtype {
        DType::F32 => generate_typed::<f32>(cfg, scenario_name),
        DType::F64 => generate_typed::<f64>(cfg, scenario_name),
    }
}

#[derive(Serialize)]
struct AblationRecord<'a> {
    command: &'static str,
    code_version: &'static str,
    config_hash: String,
    checkpoint_hash: String,
    seeds: &'a [u64],
    report: &'a AblationReport,
}

fn ablate_typed<F: Scalar>(cfg: &RunConfig, log: &mut impl FnMut(String)) -> Result<Outcome> {
    if cfg.eval.rows.is_empty() {
        return Err(Error::Validation(
            "nothing to run: eval.rows is empty".into(),
        ));
    }
    let rows: Vec<AblationRow> = cfg
        .eval
        .rows
        .iter()
        .map(|r| AblationRow::parse(r))
        .collect::<Result<_>>()?;
    let scenarios: Vec<Scenario> = cfg
        .eval
        .scenarios
        .iter()
        .map(|s| scenario(s))
        .collect::<Result<_>>()?;
    let ck = Checkpoint::<F>::load(&cfg.eval.checkpoint)?;
    let schedule = cfg.schedule.sampling()?;
    let plan = AblationPlan {
        weights: &ck.weights,
        schedule: &schedule,
        guidance: &cfg.guidance,
        step: cfg.sample.step,
        scenarios: &scenarios,
        seeds: &cfg.eval.seeds,
        rows: &rows,
        jobs: cfg.jobs,
        keep_images: cfg.eval.keep_images,
    };
    let start = Instant::now();
    let report = run_ablation(&plan)?;
    log(format!(
        "{} runs in {:.1}s",
        report.runs.len(),
        start.elapsed().as_secs_f64()
    ));
    let dir = cfg.output_dir.join("ablation");
    ensure_dir(&dir)?;
    let mut out = Outcome {
        failures: report.failures(),
        ..Default::default()
    };
    write(&mut out, dir.join("runs.csv"), report.runs_csv())?;
    write(&mut out, dir.join("summary.csv"), report.summary_csv())?;
    let record = AblationRecord {
        command: "ablate",
        code_version: CODE_VERSION,
        config_hash: cfg.hash(),
        checkpoint_hash: ck.digest(),
        seeds: &cfg.eval.seeds,
        report: &report,
    };
    write(&mut out, dir.join("summary.json"), json(&record))?;
    if cfg.eval.keep_images {
        let img_dir = dir.join("images");
        ensure_dir(&img_dir)?;
        for r in &report.runs {
            if let Some(img) = &r.image {
                let name = format!(
                    "{}_{}_seed{:05}.png",
                    r.row.replace('+', "-"),
                    r.scenario,
                    r.seed
                );
                write(&mut out, img_dir.join(name), io::encode_png(img)?)?;
            }
        }
    }
    for r in &report.rows {
        log(format!(
            "{:<16} iou {:.3} dual {:.3} edge {:.3} failures {}",
            r.label,
            r.iou.map_or(f64::NAN, |s| s.mean),
            r.dual_rate.map_or(f64::NAN, |s| s.mean),
            r.edge_agreement.map_or(f64::NAN, |s| s.mean),
            r.failures
        ));
    }
    Ok(out)
}

/// Runs the component ablation over `[eval]` rows, scenarios and seeds.
pub fn cmd_ablate(cfg: &RunConfig, mut log: impl FnMut(String)) -> Result<Outcome> {
    match cfg.dtype {
        DType::F32 => ablate_typed::<f32>(cfg, &mut log),
        DType::F64 => ablate_typed::<f64>(cfg, &mut log),
    }
}

pub const EVAL_CSV_HEADER: &str = "image,iou,dual_success,edge_agreement,detections";

/// Scores existing images against a scenario and writes `eval/metrics.csv`.
pub fn cmd_eval(cfg: &RunConfig, images: &[PathBuf], scenario_name: &str) -> Result<Outcome> {
    if images.is_empty() {
        return Err(Error::Validation("nothing to run: no images given".into()));
    }
    let sc = scenario(scenario_name)?;
    let mut csv = format!("{EVAL_CSV_HEADER}\n");
    let mut out = Outcome::default();
    for p in images {
        let row = io::load_image(p).and_then(|img| score_image(&img, &sc));
        match row {
            Ok((m, dets)) => {
                let kinds: Vec<&str> = dets.iter().map(|d| d.kind.name()).collect();
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    p.display(),
                    m.iou,
                    u8::from(m.dual_success),
                    m.edge_agreement.map(|v| v.to_string()).unwrap_or_default(),
                    kinds.join(";")
                ));
            }
            Err(e) => {
                out.failures += 1;
                csv.push_str(&format!(
                    "{},,,,error: {}\n",
                    p.display(),
                    e.to_string().replace(',', ";")
                ));
            }
        }
    }
    let dir = cfg.output_dir.join("eval");
    ensure_dir(&dir)?;
    write(&mut out, dir.join("metrics.csv"), csv)?;
    Ok(out)
}
