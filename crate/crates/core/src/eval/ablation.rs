use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{ControlMask, GuidanceConfig};
use crate::model::{token_for, DenoiserWeights};
use crate::sampler::{sample, Mode, NoiseSchedule, SampleRequest, StepConfig, Toggles};
use crate::scalar::Scalar;
use crate::scenes::{
    edge_condition, generate_scene, mask_from_instance, BinaryMask, ConditionImage, GrayImage,
    SceneSpec, ShapeInstance, ShapeKind,
};

use super::detect::{detect_shapes, dual_object_success, Detection, DETECTION_THRESHOLD};
use super::metrics::{edge_agreement_from, iou};

/// A prompt with a local condition on one of its objects.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub kinds: Vec<ShapeKind>,
    /// Index into `kinds` of the conditioned object.
    pub control: usize,
    pub condition: ConditionImage,
    pub mask: ControlMask,
    /// Ground-truth pixels of the conditioned object.
    pub target: BinaryMask,
}

impl Scenario {
    /// Builds a scenario from a scene: the prompt lists every instance, the
    /// condition and region come from instance `control` alone.
    pub fn from_spec(
        name: &str,
        spec: &SceneSpec,
        control: usize,
        dilation: usize,
    ) -> Result<Self> {
        let scene = generate_scene(spec)?;
        let target = scene
            .instance_masks
            .get(control)
            .ok_or_else(|| Error::Validation(format!("instance {control} out of range")))?
            .clone();
        Ok(Self {
            name: name.into(),
            kinds: scene.caption.clone(),
            control,
            condition: edge_condition(&scene.instance_masks, &[control])?,
            mask: mask_from_instance(&target, dilation)?,
            target,
        })
    }

    /// "circle and square" with an edge condition on the circle only. The
    /// circle sits in a corner so the free canvas can hold a square.
    pub fn circle_and_square() -> Self {
        let spec = SceneSpec {
            canvas: 32,
            shapes: vec![
                ShapeInstance {
                    kind: ShapeKind::Circle,
                    cx: 8,
                    cy: 8,
                    radius: 5,
                    intensity: 255,
                },
                ShapeInstance {
                    kind: ShapeKind::Square,
                    cx: 23,
                    cy: 23,
                    radius: 5,
                    intensity: 255,
                },
            ],
            background: 0,
            seed: 0,
        };
        Self::from_spec("circle_and_square", &spec, 0, 3).expect("valid reference scene")
    }

    pub fn prompt(&self) -> Vec<usize> {
        self.kinds.iter().map(|&k| token_for(k)).collect()
    }

    pub fn control_kind(&self) -> ShapeKind {
        self.kinds[self.control]
    }
}

/// One configuration of the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    Baseline(Mode),
    Components(Toggles),
}

impl AblationRow {
    /// The six component rows followed by the three baselines.
    pub fn standard() -> Vec<AblationRow> {
        let mut rows: Vec<_> = Toggles::ABLATION
            .iter()
            .map(|&t| AblationRow::Components(t))
            .collect();
        rows.extend([Mode::Naive, Mode::NoiseMask, Mode::FeatureMask].map(AblationRow::Baseline));
        rows
    }

    pub fn label(&self) -> String {
        match self {
            AblationRow::Baseline(m) => m.name().to_string(),
            AblationRow::Components(t) => t.label(),
        }
    }

    /// Parses a baseline mode name or a `+`-joined component list.
    pub fn parse(s: &str) -> Result<Self> {
        match Mode::from_name(s) {
            Some(Mode::FullMethod) => Ok(AblationRow::Components(Toggles::ALL)),
            Some(m) => Ok(AblationRow::Baseline(m)),
            None => Toggles::parse(s).map(AblationRow::Components),
        }
    }

    pub fn mode_and_toggles(&self) -> (Mode, Toggles) {
        match *self {
            AblationRow::Baseline(m) => (m, Toggles::NONE),
            AblationRow::Components(t) => (Mode::FullMethod, t),
        }
    }
}

/// Metrics of one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub iou: f64,
    pub dual_success: bool,
    pub edge_agreement: Option<f64>,
}

/// Scores an image against a scenario.
///
/// IoU compares the confident detections of the conditioned kind that touch
/// the control region with the conditioned object's ground-truth pixels.
pub fn score_image(
    image: &GrayImage,
    scenario: &Scenario,
) -> Result<(ImageMetrics, Vec<Detection>)> {
    let detections = detect_shapes(image);
    let region = scenario.mask.image();
    let mut local = BinaryMask::empty(region.width, region.height);
    for d in &detections {
        let inside = d.mask.bits.iter().zip(&region.bits).any(|(&a, &b)| a && b);
        if d.kind == scenario.control_kind() && d.score >= DETECTION_THRESHOLD && inside {
            local = local.union(&d.mask)?;
        }
    }
    let dual_success = match scenario.kinds.as_slice() {
        [a, b, ..] => dual_object_success(&detections, *a, *b),
        _ => false,
    };
    let metrics = ImageMetrics {
        iou: iou(&local, &scenario.target)?,
        dual_success,
        edge_agreement: edge_agreement_from(&detections, &scenario.condition, &scenario.mask)?,
    };
    Ok((metrics, detections))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub row: String,
    pub scenario: String,
    pub seed: u64,
    pub metrics: Option<ImageMetrics>,
    /// Frozen control concept, when concept matching ran.
    pub control: Option<usize>,
    pub runtime_ms: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub image: Option<GrayImage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub iou: Option<Stat>,
    pub dual_rate: Option<Stat>,
    pub edge_agreement: Option<Stat>,
    pub runtime_ms: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<RowSummary>,
    pub runs: Vec<RunRecord>,
}

pub const RUNS_CSV_HEADER: &str =
    "row,scenario,seed,status,iou,dual_success,edge_agreement,control,runtime_ms,error";
pub const SUMMARY_CSV_HEADER: &str = "row,runs,failures,iou_mean,iou_std,dual_rate,dual_std,edge_mean,edge_std,edge_count,runtime_ms_mean";

/// Aggregates runs per row label, in the order given.
pub fn summarize(labels: &[String], runs: &[RunRecord]) -> Vec<RowSummary> {
    labels
        .iter()
        .map(|label| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| &r.row == label).collect();
            let ok: Vec<&ImageMetrics> = mine.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let ious: Vec<f64> = ok.iter().map(|m| m.iou).collect();
            let dual: Vec<f64> = ok
                .iter()
                .map(|m| f64::from(u8::from(m.dual_success)))
                .collect();
            let edges: Vec<f64> = ok.iter().filter_map(|m| m.edge_agreement).collect();
            let times: Vec<f64> = mine
                .iter()
                .filter(|r| r.metrics.is_some())
                .map(|r| r.runtime_ms)
                .collect();
            RowSummary {
                label: label.clone(),
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                iou: Stat::of(&ious),
                dual_rate: Stat::of(&dual),
                edge_agreement: Stat::of(&edges),
                runtime_ms: Stat::of(&times),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

impl AblationReport {
    pub fn failures(&self) -> usize {
        self.rows.iter().map(|r| r.failures).sum()
    }

    pub fn row(&self, label: &str) -> Option<&RowSummary> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Copy with wall-clock fields cleared, for comparing reruns.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.runs {
            r.runtime_ms = 0.0;
            r.image = None;
        }
        for r in &mut out.rows {
            r.runtime_ms = None;
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut s = format!("{RUNS_CSV_HEADER}\n");
        for r in &self.runs {
            let m = r.metrics.as_ref();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.row,
                csv_text(&r.scenario),
                r.seed,
                if m.is_some() { "ok" } else { "failed" },
                cell(m.map(|m| m.iou)),
                m.map(|m| u8::from(m.dual_success).to_string())
                    .unwrap_or_default(),
                cell(m.and_then(|m| m.edge_agreement)),
                r.control.map(|c| c.to_string()).unwrap_or_default(),
                r.runtime_ms,
                r.error.as_deref().map(csv_text).unwrap_or_default(),
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.label,
                r.runs,
                r.failures,
                cell(r.iou.map(|v| v.mean)),
                cell(r.iou.map(|v| v.std)),
                cell(r.dual_rate.map(|v| v.mean)),
                cell(r.dual_rate.map(|v| v.std)),
                cell(r.edge_agreement.map(|v| v.mean)),
                cell(r.edge_agreement.map(|v| v.std)),
                r.edge_agreement.map(|v| v.count).unwrap_or(0),
                cell(r.runtime_ms.map(|v| v.mean)),
            );
        }
        s
    }
}

/// Reads back the per-run CSV written by [`AblationReport::runs_csv`].
pub fn parse_runs_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RUNS_CSV_HEADER) {
        return Err(Error::Parse {
            offset: 0,
            reason: "unexpected run CSV header".into(),
        });
    }
    let mut offset = RUNS_CSV_HEADER.len() + 1;
    let mut out = Vec::new();
    for line in lines {
        let bad = |what: &str| Error::Parse {
            offset,
            reason: format!("bad {what}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad("field count"));
        }
        let num = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        let metrics = match f[3] {
            "ok" => Some(ImageMetrics {
                iou: num(f[4], "iou")?.ok_or_else(|| bad("iou"))?,
                dual_success: f[5] == "1",
                edge_agreement: num(f[6], "edge agreement")?,
            }),
            "failed" => None,
            _ => return Err(bad("status")),
        };
        out.push(RunRecord {
            row: f[0].into(),
            scenario: f[1].into(),
            seed: f[2].parse().map_err(|_| bad("seed"))?,
            metrics,
            control: if f[7].is_empty() {
                None
            } else {
                Some(f[7].parse().map_err(|_| bad("control"))?)
            },
            runtime_ms: f[8].parse().map_err(|_| bad("runtime"))?,
            error: (!f[9].is_empty()).then(|| f[9].to_string()),
            image: None,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

/// Everything a sweep needs besides the rows.
pub struct AblationPlan<'a, F> {
    pub weights: &'a DenoiserWeights<F>,
    pub schedule: &'a NoiseSchedule,
    pub guidance: &'a GuidanceConfig,
    pub step: StepConfig,
    pub scenarios: &'a [Scenario],
    pub seeds: &'a [u64],
    pub rows: &'a [AblationRow],
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub keep_images: bool,
}

/// Samples and scores one cell. Failures are recorded, not returned.
pub fn run_cell<F: Scalar>(
    plan: &AblationPlan<'_, F>,
    row: &AblationRow,
    scenario: &Scenario,
    seed: u64,
) -> RunRecord {
    let (mode, toggles) = row.mode_and_toggles();
    let start = Instant::now();
    let prompt = scenario.prompt();
    let outcome = sample(&SampleRequest {
        weights: plan.weights,
        schedule: plan.schedule,
        prompt: &prompt,
        condition: Some(&scenario.condition),
        mask: Some(&scenario.mask),
        guidance: plan.guidance,
        mode,
        toggles,
        step: plan.step,
        seed,
        allow_untrained: false,
    })
    .and_then(|r| {
        let img = GrayImage::from_latent(&r.image)?;
        let (m, _) = score_image(&img, scenario)?;
        Ok((m, r.concept.frozen, img))
    });
    let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut rec = RunRecord {
        row: row.label(),
        scenario: scenario.name.clone(),
        seed,
        metrics: None,
        control: None,
        runtime_ms,
        error: None,
        image: None,
    };
    match outcome {
        Ok((m, frozen, img)) => {
            rec.metrics = Some(m);
            rec.control = frozen;
            rec.image = plan.keep_images.then_some(img);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Runs every (row, scenario, seed) cell and aggregates per row.
pub fn run_ablation<F: Scalar>(plan: &AblationPlan<'_, F>) -> Result<AblationReport> {
    if plan.rows.is_empty() {
        return Err(Error::Validation(
            "nothing to run: no ablation rows requested".into(),
        ));
    }
    if plan.scenarios.is_empty() {
        return Err(Error::Validation("nothing to run: no scenarios".into()));
    }
    if plan.seeds.len() < 2 {
        return Err(Error::Validation(
            "an ablation needs at least two seeds".into(),
        ));
    }
    let mut labels: Vec<String> = Vec::new();
    for r in plan.rows {
        if labels.contains(&r.label()) {
            return Err(Error::Validation(format!(
                "row {} requested twice",
                r.label()
            )));
        }
        labels.push(r.label());
    }
    let mut cells = Vec::new();
    for row in plan.rows {
        for sc in plan.scenarios {
            for &seed in plan.seeds {
                cells.push((row, sc, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<RunRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(row, sc, seed)| run_cell(plan, row, sc, seed))
            .collect()
    });
    Ok(AblationReport {
        rows: summarize(&labels, &runs),
        runs,
    })
}
