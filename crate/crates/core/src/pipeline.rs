//! Detect, reconstruct part by part, re-detect, compare.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Detector, ReconstructHint, Reconstructor};
use crate::checker::{check_syntax, explain, SyntaxVerdict};
use crate::geometry::{nms, score_order, Detection, GeometryError, PatchGrid, DEFAULT_PATCH_SIZE};
use crate::grammar::sort_row_major;
use crate::metrics::{report, ConfusionMatrix, MetricRow, MetricsError, Report, RunMetadata};
use crate::raster::RasterImage;
use crate::seed;
use crate::synth::{self, Correctness, CorpusError, SceneAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingStrategy {
    /// Mask the patches under each detected part in turn.
    PartBased,
    /// Mask a random fraction of all patches once.
    Random,
}

impl std::fmt::Display for MaskingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskingStrategy::PartBased => "part_based",
            MaskingStrategy::Random => "random",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartOrder {
    /// Top-to-bottom, left-to-right by box center.
    RowMajor,
    /// Highest detection score first.
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub iou_threshold: f64,
    pub nms_original: f64,
    pub nms_reconstructed: f64,
    pub patch_size: u32,
    pub masking: MaskingStrategy,
    /// Fraction of patches masked by the random strategy.
    pub mask_ratio: f64,
    pub order: PartOrder,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            nms_original: 0.1,
            nms_reconstructed: 0.3,
            patch_size: DEFAULT_PATCH_SIZE,
            masking: MaskingStrategy::PartBased,
            mask_ratio: 0.25,
            order: PartOrder::RowMajor,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("nms_original", self.nms_original),
            ("nms_reconstructed", self.nms_reconstructed),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::Config(format!("{name} {v} is outside [0, 1]")));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(PipelineError::Config(format!(
                "mask_ratio {} is outside (0, 1]",
                self.mask_ratio
            )));
        }
        if self.patch_size == 0 {
            return Err(PipelineError::Config("patch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            masking: Some(self.masking.to_string()),
            mask_ratio: (self.masking == MaskingStrategy::Random).then_some(self.mask_ratio),
            iou_threshold: Some(self.iou_threshold),
            nms_original: Some(self.nms_original),
            nms_reconstructed: Some(self.nms_reconstructed),
            patch_size: Some(self.patch_size),
            seed: Some(self.seed),
            ..RunMetadata::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{stage}: {source}")]
    Backend {
        stage: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn at(stage: impl Into<String>) -> impl FnOnce(BackendError) -> PipelineError {
    let stage = stage.into();
    move |source| PipelineError::Backend { stage, source }
}

/// One reconstruction call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// The part this step masked; absent for random masking.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part: Option<Detection>,
    pub masked_patches: Vec<usize>,
    pub input_sha256: String,
    pub output_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub input_sha256: String,
    pub steps: Vec<TraceStep>,
    pub output_sha256: String,
}

impl PipelineTrace {
    /// True when every step consumed exactly the previous step's output.
    pub fn is_chained(&self) -> bool {
        let mut expect = &self.input_sha256;
        for s in &self.steps {
            if &s.input_sha256 != expect {
                return false;
            }
            expect = &s.output_sha256;
        }
        expect == &self.output_sha256
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub verdict: SyntaxVerdict,
    /// No part was detected, so there was nothing to check.
    pub vacuous: bool,
    pub original: Vec<Detection>,
    pub reconstructed: Vec<Detection>,
    pub trace: PipelineTrace,
    pub final_image: RasterImage,
}

/// Runs the configured masking strategy on one image.
pub fn run(
    image: &RasterImage,
    detector: &dyn Detector,
    reconstructor: &dyn Reconstructor,
    hint: Option<&ReconstructHint>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    match cfg.masking {
        MaskingStrategy::PartBased => run_pipeline(image, detector, reconstructor, hint, cfg),
        MaskingStrategy::Random => run_random_masking(image, detector, reconstructor, hint, cfg),
    }
}

/// Part-based masking: one reconstruction per detected part, each on the
/// previous step's output, masks taken from the original detections.
pub fn run_pipeline(
    image: &RasterImage,
    detector: &dyn Detector,
    reconstructor: &dyn Reconstructor,
    hint: Option<&ReconstructHint>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let grid = PatchGrid::new(image.width(), image.height(), cfg.patch_size)?;
    let original = detect_original(image, detector, cfg)?;
    let mut working = image.clone();
    let mut steps = Vec::with_capacity(original.len());
    for (k, part) in original.iter().enumerate() {
        let masked = grid.patches_for_box(&part.bbox)?;
        let next = reconstruct_local(&working, &grid, &masked, reconstructor, hint)
            .map_err(at(format!("reconstruct step {k} ({})", part.label)))?;
        steps.push(TraceStep {
            part: Some(part.clone()),
            masked_patches: masked,
            input_sha256: working.digest(),
            output_sha256: next.digest(),
        });
        working = next;
    }
    finish(image, original, working, steps, detector, cfg)
}

/// Random masking baseline: `ceil(mask_ratio * patches)` patches chosen
/// uniformly (seeded by the config seed and the image), reconstructed once.
pub fn run_random_masking(
    image: &RasterImage,
    detector: &dyn Detector,
    reconstructor: &dyn Reconstructor,
    hint: Option<&ReconstructHint>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let grid = PatchGrid::new(image.width(), image.height(), cfg.patch_size)?;
    let original = detect_original(image, detector, cfg)?;
    let mut steps = Vec::new();
    let mut working = image.clone();
    if !original.is_empty() {
        let masked = random_mask(&grid, cfg.mask_ratio, cfg.seed, &image.digest());
        working = reconstruct_local(image, &grid, &masked, reconstructor, hint)
            .map_err(at("reconstruct (random mask)"))?;
        steps.push(TraceStep {
            part: None,
            masked_patches: masked,
            input_sha256: image.digest(),
            output_sha256: working.digest(),
        });
    }
    finish(image, original, working, steps, detector, cfg)
}

/// Sorted patch indices; the count is `ceil(ratio * patch_count)`.
pub fn random_mask(grid: &PatchGrid, ratio: f64, seed: u64, image_digest: &str) -> Vec<usize> {
    let n = grid.patch_count();
    let k = ((ratio * n as f64).ceil() as usize).min(n);
    let mut rng = seed::rng_for(seed, &format!("mask/{image_digest}"));
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

fn detect_original(
    image: &RasterImage,
    detector: &dyn Detector,
    cfg: &PipelineConfig,
) -> Result<Vec<Detection>, PipelineError> {
    let raw = detector.detect(image).map_err(at("detect original"))?;
    let clamped = clamp_all(raw, image);
    let mut kept = nms(&clamped, cfg.nms_original)?;
    match cfg.order {
        PartOrder::RowMajor => sort_row_major(&mut kept),
        PartOrder::Score => kept.sort_by(score_order),
    }
    Ok(kept)
}

fn clamp_all(dets: Vec<Detection>, image: &RasterImage) -> Vec<Detection> {
    dets.into_iter()
        .filter_map(|mut d| {
            d.bbox = d.bbox.clamp_to(image.width(), image.height())?;
            Some(d)
        })
        .collect()
}

/// Calls the reconstructor and keeps only its masked patches, so pixels
/// outside the mask are the input's whatever the backend returns.
fn reconstruct_local(
    input: &RasterImage,
    grid: &PatchGrid,
    masked: &[usize],
    reconstructor: &dyn Reconstructor,
    hint: Option<&ReconstructHint>,
) -> Result<RasterImage, BackendError> {
    let produced = reconstructor.reconstruct(input, grid, masked, hint)?;
    if (produced.width(), produced.height()) != (input.width(), input.height()) {
        return Err(BackendError::Dimensions {
            want_w: input.width(),
            want_h: input.height(),
            got_w: produced.width(),
            got_h: produced.height(),
        });
    }
    let mut out = input.clone();
    let p = grid.patch_size();
    for &i in masked {
        let (x0, y0) = grid.patch_origin(i)?;
        out.copy_rect_from(&produced, x0, y0, x0 + p, y0 + p);
    }
    Ok(out)
}

fn finish(
    image: &RasterImage,
    original: Vec<Detection>,
    final_image: RasterImage,
    steps: Vec<TraceStep>,
    detector: &dyn Detector,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome, PipelineError> {
    let trace = PipelineTrace {
        input_sha256: image.digest(),
        steps,
        output_sha256: final_image.digest(),
    };
    if original.is_empty() {
        return Ok(PipelineOutcome {
            verdict: SyntaxVerdict::from_errors(Vec::new()),
            vacuous: true,
            original,
            reconstructed: Vec::new(),
            trace,
            final_image,
        });
    }
    let raw = detector.detect(&final_image).map_err(at("detect reconstruction"))?;
    let mut reconstructed = nms(&clamp_all(raw, &final_image), cfg.nms_reconstructed)?;
    sort_row_major(&mut reconstructed);
    let verdict = check_syntax(&original, &reconstructed, cfg.iou_threshold)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(PipelineOutcome {
        verdict,
        vacuous: false,
        original,
        reconstructed,
        trace,
        final_image,
    })
}

/// The hint an annotation implies: its frame, or none for scattered parts.
pub fn hint_for(annotation: &SceneAnnotation) -> ReconstructHint {
    if annotation.framed {
        ReconstructHint::Framed {
            frame: annotation.frame,
        }
    } else {
        ReconstructHint::Unframed
    }
}

/// Pixel-difference baseline: an image is flagged when the mean squared
/// error between it and its reconstruction exceeds `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseBaseline {
    pub threshold: f64,
}

impl MseBaseline {
    pub fn score(outcome: &PipelineOutcome, input: &RasterImage) -> f64 {
        outcome
            .final_image
            .mean_squared_error(input)
            .expect("reconstruction keeps the input size")
    }

    pub fn predict_correct(&self, mse: f64) -> bool {
        mse <= self.threshold
    }
}

/// Detector and reconstructor used for one object class.
#[derive(Clone)]
pub struct BackendPair {
    pub detector: Arc<dyn Detector>,
    pub reconstructor: Arc<dyn Reconstructor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutcome {
    pub correct: bool,
    pub vacuous: bool,
    pub explanation: Vec<String>,
    pub verdict: SyntaxVerdict,
    pub original: Vec<Detection>,
    pub reconstructed: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene_id: String,
    pub class_name: String,
    pub truth: Correctness,
    #[serde(flatten)]
    pub result: SceneStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SceneStatus {
    Checked(SceneOutcome),
    Failed { error: String },
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub parallelism: usize,
    /// Per-scene trace files are written here when set.
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub manifest_sha256: String,
    pub config: PipelineConfig,
    pub results: Vec<SceneResult>,
}

impl Evaluation {
    pub fn confusion_by_class(&self) -> BTreeMap<String, ConfusionMatrix> {
        let mut out: BTreeMap<String, ConfusionMatrix> = BTreeMap::new();
        for r in &self.results {
            if let SceneStatus::Checked(o) = &r.result {
                out.entry(r.class_name.clone()).or_default().record(o.correct, r.truth);
            }
        }
        out
    }

    pub fn failed(&self) -> Vec<&SceneResult> {
        self.results
            .iter()
            .filter(|r| matches!(r.result, SceneStatus::Failed { .. }))
            .collect()
    }

    pub fn report(&self, mut run: RunMetadata) -> Result<Report, MetricsError> {
        run.manifest_sha256 = Some(self.manifest_sha256.clone());
        run.scenes = Some(self.results.len());
        run.failed_scenes = self.failed().iter().map(|r| r.scene_id.clone()).collect();
        let rows = self
            .confusion_by_class()
            .into_iter()
            .map(|(class, m)| MetricRow::from_counts(class, m))
            .collect();
        report(rows, run)
    }
}

#[derive(Debug, Serialize)]
struct TraceFile<'a> {
    scene_id: &'a str,
    trace: &'a PipelineTrace,
    original: &'a [Detection],
    reconstructed: &'a [Detection],
    verdict: &'a SyntaxVerdict,
}

/// Evaluates every scene of the corpus at `dir`.
///
/// A scene that fails (unreadable files, backend errors, no backend for its
/// class) is recorded as failed and does not stop the run. Results are in
/// scene-id order regardless of `parallelism`.
pub fn evaluate_corpus(
    dir: &Path,
    backends: &BTreeMap<String, BackendPair>,
    cfg: &PipelineConfig,
    opts: &EvalOptions,
) -> Result<Evaluation, CorpusError> {
    cfg.validate().map_err(|e| CorpusError::Annotation {
        scene_id: "*".into(),
        message: e.to_string(),
    })?;
    let manifest = synth::read_manifest(dir)?;
    if manifest.scenes.is_empty() {
        return Err(CorpusError::Empty(dir.display().to_string()));
    }
    let manifest_sha256 = synth::manifest_digest(dir)?;
    if let Some(t) = &opts.trace_dir {
        std::fs::create_dir_all(t).map_err(|source| CorpusError::Io {
            path: t.display().to_string(),
            source,
        })?;
    }
    let entries = &manifest.scenes;
    let next = AtomicUsize::new(0);
    let workers = opts.parallelism.clamp(1, entries.len().max(1));
    let mut results: Vec<SceneResult> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(entry) = entries.get(i) else { break };
                        let result = evaluate_entry(dir, entry, backends, cfg, opts.trace_dir.as_deref())
                            .unwrap_or_else(|error| SceneStatus::Failed { error });
                        done.push(SceneResult {
                            scene_id: entry.scene_id.clone(),
                            class_name: entry.class_name.clone(),
                            truth: entry.correctness,
                            result,
                        });
                    }
                    done
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    results.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    Ok(Evaluation {
        manifest_sha256,
        config: *cfg,
        results,
    })
}

fn evaluate_entry(
    dir: &Path,
    entry: &synth::ManifestEntry,
    backends: &BTreeMap<String, BackendPair>,
    cfg: &PipelineConfig,
    trace_dir: Option<&Path>,
) -> Result<SceneStatus, String> {
    let pair = backends
        .get(&entry.class_name)
        .ok_or_else(|| format!("no backend configured for class `{}`", entry.class_name))?;
    let scene = synth::load_scene(dir, entry).map_err(|e| e.to_string())?;
    let hint = hint_for(&scene.annotation);
    let out = run(
        &scene.image,
        pair.detector.as_ref(),
        pair.reconstructor.as_ref(),
        Some(&hint),
        cfg,
    )
    .map_err(|e| e.to_string())?;
    if let Some(t) = trace_dir {
        let file = TraceFile {
            scene_id: &entry.scene_id,
            trace: &out.trace,
            original: &out.original,
            reconstructed: &out.reconstructed,
            verdict: &out.verdict,
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| e.to_string())?;
        text.push('\n');
        let path = t.join(format!("{}.json", entry.scene_id));
        std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(SceneStatus::Checked(SceneOutcome {
        correct: out.verdict.correct,
        vacuous: out.vacuous,
        explanation: explain(&out.verdict),
        verdict: out.verdict,
        original: out.original,
        reconstructed: out.reconstructed,
    }))
}
