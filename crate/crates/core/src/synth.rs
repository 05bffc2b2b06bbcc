//! Deterministic synthetic scenes and the on-disk corpus format.
//!
//! A scene is a textured background with one flat-color glyph per part,
//! placed at its grammar slot (plus optional jitter) inside a container
//! frame. Part boxes are snapped to pixel boundaries before rendering, so the
//! annotation box of a part is exactly the pixel extent of its glyph.
//!
//! Corpus layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<scene_id>.ppm
//! <dir>/annotations/<scene_id>.json
//! <dir>/backgrounds/<class>/<name>.ppm
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{BBox, Detection, GeometryError, PatchGrid, DEFAULT_PATCH_SIZE};
use crate::grammar::{sort_row_major, ContainerFrame, Grammar};
use crate::perturb::PerturbationRecord;
use crate::raster::{RasterError, RasterImage};
use crate::render::{self, Palette, PaletteError};
use crate::seed;

pub const DEFAULT_IMAGE_SIZE: u32 = 224;
pub const MAX_GENERATION_ATTEMPTS: usize = 16;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error("invalid jitter: {0}")]
    InvalidJitter(String),
    #[error("scene `{scene_id}`: no valid placement after {attempts} attempts")]
    Generation { scene_id: String, attempts: usize },
    #[error("scene `{0}` already exists in the corpus")]
    DuplicateScene(String),
    #[error("scene `{0}` is not in the manifest")]
    UnknownScene(String),
    #[error("scene `{scene_id}`: {message}")]
    Annotation { scene_id: String, message: String },
    #[error("corpus at {0} has no scenes")]
    Empty(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> CorpusError + '_ {
    move |source| CorpusError::Json {
        path: path.display().to_string(),
        source,
    }
}

/// Seeded variation applied to part placement.
///
/// Sigmas are fractions of the slot's size; normal draws are truncated at
/// three standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterSpec {
    pub seed: u64,
    pub center_sigma: f64,
    pub size_sigma: f64,
    pub drop_prob: f64,
}

impl JitterSpec {
    pub fn none(seed: u64) -> Self {
        Self {
            seed,
            center_sigma: 0.0,
            size_sigma: 0.0,
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let ok_sigma = |s: f64| s.is_finite() && s >= 0.0;
        if !ok_sigma(self.center_sigma) || !ok_sigma(self.size_sigma) {
            return Err(CorpusError::InvalidJitter(format!(
                "sigmas must be finite and >= 0 (center {}, size {})",
                self.center_sigma, self.size_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(CorpusError::InvalidJitter(format!(
                "drop_prob {} is outside [0, 1]",
                self.drop_prob
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.center_sigma == 0.0 && self.size_sigma == 0.0 && self.drop_prob == 0.0
    }
}

/// Standard normal draw truncated to `[-3, 3]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Correctness {
    Correct,
    Incorrect,
    Unknown,
}

impl std::fmt::Display for Correctness {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Correctness::Correct => "correct",
            Correctness::Incorrect => "incorrect",
            Correctness::Unknown => "unknown",
        })
    }
}

/// One "visual sentence": the parts of an image and whether their arrangement is correct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub scene_id: String,
    pub class_name: String,
    /// Image path relative to the corpus directory.
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub frame: ContainerFrame,
    /// False for scenes whose parts are not arranged inside an object frame
    /// (scattered parts); the frame is then the whole image.
    #[serde(default = "yes")]
    pub framed: bool,
    pub parts: Vec<Detection>,
    pub correctness: Correctness,
    #[serde(default)]
    pub provenance: Vec<PerturbationRecord>,
}

fn yes() -> bool {
    true
}

impl SceneAnnotation {
    pub fn image_file_for(scene_id: &str) -> String {
        format!("images/{scene_id}.ppm")
    }

    /// Checks labels against `grammar` and, for correct scenes, same-label overlap.
    pub fn validate(&self, grammar: &Grammar) -> Result<(), CorpusError> {
        let fail = |message: String| CorpusError::Annotation {
            scene_id: self.scene_id.clone(),
            message,
        };
        if self.class_name != grammar.class_name() {
            return Err(fail(format!(
                "class `{}` does not match grammar `{}`",
                self.class_name,
                grammar.class_name()
            )));
        }
        for p in &self.parts {
            if !grammar.contains(&p.label) {
                return Err(fail(format!("label `{}` is not in the vocabulary", p.label)));
            }
        }
        if self.correctness == Correctness::Correct {
            for (i, a) in self.parts.iter().enumerate() {
                for b in &self.parts[i + 1..] {
                    if a.label == b.label && crate::geometry::iou(&a.bbox, &b.bbox) > 0.3 {
                        return Err(fail(format!("overlapping `{}` parts in a correct scene", a.label)));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RasterImage,
    pub annotation: SceneAnnotation,
}

/// Renders one grammar-conformant scene. Deterministic in `(jitter, scene_id)`.
pub fn generate_scene(
    grammar: &Grammar,
    width: u32,
    height: u32,
    jitter: &JitterSpec,
    scene_id: &str,
) -> Result<Scene, CorpusError> {
    PatchGrid::new(width, height, DEFAULT_PATCH_SIZE)?;
    jitter.validate()?;
    let palette = Palette::for_grammar(grammar)?;
    let frame = ContainerFrame::centered(width, height)?;
    let mut rng = seed::rng_for(jitter.seed, &format!("scene/{scene_id}"));
    let texture_seed: u64 = rng.random();

    let mut parts = None;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        if let Some(p) = place_parts(grammar, &frame, jitter, &mut rng) {
            parts = Some(p);
            break;
        }
    }
    let mut parts = parts.ok_or_else(|| CorpusError::Generation {
        scene_id: scene_id.to_owned(),
        attempts: MAX_GENERATION_ATTEMPTS,
    })?;
    sort_row_major(&mut parts);

    let mut image = render::background(width, height, texture_seed)?;
    for part in &parts {
        let color = palette.color(&part.label).expect("slot labels are in the palette");
        render::draw_glyph(&mut image, &part.bbox, color);
    }

    let annotation = SceneAnnotation {
        scene_id: scene_id.to_owned(),
        class_name: grammar.class_name().to_owned(),
        image: SceneAnnotation::image_file_for(scene_id),
        width,
        height,
        frame,
        framed: true,
        parts,
        correctness: Correctness::Correct,
        provenance: Vec::new(),
    };
    Ok(Scene { image, annotation })
}

/// One placement attempt; `None` when a required part leaves the frame or
/// two parts collide.
fn place_parts<R: Rng>(
    grammar: &Grammar,
    frame: &ContainerFrame,
    jitter: &JitterSpec,
    rng: &mut R,
) -> Option<Vec<Detection>> {
    let mut parts: Vec<Detection> = Vec::new();
    for slot in grammar.slots() {
        // fixed number of draws per slot keeps the stream aligned across slots
        let keep_draw: f64 = rng.random();
        let (zx, zy) = (truncated_normal(rng), truncated_normal(rng));
        let (zw, zh) = (truncated_normal(rng), truncated_normal(rng));
        if !slot.required && keep_draw < jitter.drop_prob {
            continue;
        }
        let base = slot.place(frame).ok()?;
        let (cx, cy) = base.center();
        let w = base.width() * (1.0 + zw * jitter.size_sigma).max(0.25);
        let h = base.height() * (1.0 + zh * jitter.size_sigma).max(0.25);
        let cx = cx + zx * jitter.center_sigma * base.width();
        let cy = cy + zy * jitter.center_sigma * base.height();
        let placed = BBox::from_center(cx, cy, w, h)
            .ok()
            .and_then(|b| b.snap_to_pixels())
            .filter(|b| frame.bbox().contains(b));
        match placed {
            Some(b) => parts.push(Detection::certain(slot.label.clone(), b)),
            None if slot.required => return None,
            None => {}
        }
    }
    for (i, a) in parts.iter().enumerate() {
        if parts[i + 1..].iter().any(|b| a.bbox.intersects(&b.bbox)) {
            return None;
        }
    }
    Some(parts)
}

/// Generates `ids` concurrently on up to `parallelism` threads; output order follows `ids`.
pub fn generate_scenes(
    grammar: &Grammar,
    width: u32,
    height: u32,
    jitter: &JitterSpec,
    ids: &[String],
    parallelism: usize,
) -> Result<Vec<Scene>, CorpusError> {
    let workers = parallelism.max(1).min(ids.len().max(1));
    let chunk = ids.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<Scene>, CorpusError>> = std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|id| generate_scene(grammar, width, height, jitter, id))
                        .collect::<Result<Vec<_>, _>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("generation thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(ids.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub class_name: String,
    pub image: String,
    pub annotation: String,
    pub correctness: Correctness,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub correct: usize,
    pub incorrect: usize,
    pub unknown: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    pub unknown: usize,
    pub by_class: BTreeMap<String, SplitCounts>,
    /// Correct scenes per incorrect scene; absent when there are no incorrect scenes.
    pub correct_per_incorrect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub scenes: Vec<ManifestEntry>,
    #[serde(default)]
    pub backgrounds: BTreeMap<String, Vec<String>>,
    pub counts: ManifestCounts,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            scenes: Vec::new(),
            backgrounds: BTreeMap::new(),
            counts: ManifestCounts::default(),
        }
    }
}

impl Manifest {
    /// Sorts entries by id and recomputes counts.
    pub fn refresh(&mut self) {
        self.scenes.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        let mut counts = ManifestCounts::default();
        for e in &self.scenes {
            let split = counts.by_class.entry(e.class_name.clone()).or_default();
            match e.correctness {
                Correctness::Correct => {
                    counts.correct += 1;
                    split.correct += 1
                }
                Correctness::Incorrect => {
                    counts.incorrect += 1;
                    split.incorrect += 1
                }
                Correctness::Unknown => {
                    counts.unknown += 1;
                    split.unknown += 1
                }
            }
        }
        counts.total = self.scenes.len();
        counts.correct_per_incorrect =
            (counts.incorrect > 0).then(|| counts.correct as f64 / counts.incorrect as f64);
        self.counts = counts;
    }

    pub fn entry(&self, scene_id: &str) -> Option<&ManifestEntry> {
        self.scenes.iter().find(|e| e.scene_id == scene_id)
    }

    /// Imbalance rendered as `correct:incorrect` reduced by their gcd, e.g. `5:1`.
    pub fn imbalance(&self) -> Option<String> {
        let (c, i) = (self.counts.correct, self.counts.incorrect);
        if i == 0 {
            return None;
        }
        let g = gcd(c, i);
        Some(format!("{}:{}", c / g, i / g))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let path = manifest_path(dir);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(json_err(&path))
}

/// Hex SHA-256 of the manifest file bytes.
pub fn manifest_digest(dir: &Path) -> Result<String, CorpusError> {
    let path = manifest_path(dir);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), CorpusError> {
    let mut m = manifest.clone();
    m.refresh();
    write_json(&manifest_path(dir), &m)
}

fn ensure_dir(path: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_scene_files(dir: &Path, scene: &Scene) -> Result<ManifestEntry, CorpusError> {
    let ann = &scene.annotation;
    let annotation = format!("annotations/{}.json", ann.scene_id);
    let image_path = dir.join(&ann.image);
    if let Some(parent) = image_path.parent() {
        ensure_dir(parent)?;
    }
    scene.image.save(&image_path)?;
    write_json(&dir.join(&annotation), ann)?;
    Ok(ManifestEntry {
        scene_id: ann.scene_id.clone(),
        class_name: ann.class_name.clone(),
        image: ann.image.clone(),
        annotation,
        correctness: ann.correctness,
    })
}

/// Writes `scenes` into `dir` under a fresh manifest (any previous manifest is replaced).
pub fn write_corpus(scenes: &[Scene], dir: &Path) -> Result<Manifest, CorpusError> {
    write_into(Manifest::default(), scenes, dir)
}

/// Adds `scenes` to the corpus at `dir`, creating it if needed.
pub fn append_corpus(scenes: &[Scene], dir: &Path) -> Result<Manifest, CorpusError> {
    let base = if manifest_path(dir).exists() {
        read_manifest(dir)?
    } else {
        Manifest::default()
    };
    write_into(base, scenes, dir)
}

fn write_into(mut manifest: Manifest, scenes: &[Scene], dir: &Path) -> Result<Manifest, CorpusError> {
    ensure_dir(&dir.join("annotations"))?;
    ensure_dir(&dir.join("images"))?;
    let mut ids: std::collections::HashSet<String> =
        manifest.scenes.iter().map(|e| e.scene_id.clone()).collect();
    for scene in scenes {
        if !ids.insert(scene.annotation.scene_id.clone()) {
            return Err(CorpusError::DuplicateScene(scene.annotation.scene_id.clone()));
        }
    }
    for scene in scenes {
        manifest.scenes.push(write_scene_files(dir, scene)?);
    }
    manifest.refresh();
    write_json(&manifest_path(dir), &manifest)?;
    Ok(manifest)
}

/// Stores background images for `class` and registers them in the manifest.
pub fn add_backgrounds(
    dir: &Path,
    class: &str,
    images: &[(String, RasterImage)],
) -> Result<Manifest, CorpusError> {
    let mut manifest = if manifest_path(dir).exists() {
        read_manifest(dir)?
    } else {
        Manifest::default()
    };
    let sub = dir.join("backgrounds").join(class);
    ensure_dir(&sub)?;
    let list = manifest.backgrounds.entry(class.to_owned()).or_default();
    for (name, img) in images {
        let rel = format!("backgrounds/{class}/{name}.ppm");
        img.save(&dir.join(&rel))?;
        if !list.contains(&rel) {
            list.push(rel);
        }
    }
    list.sort();
    manifest.refresh();
    write_json(&manifest_path(dir), &manifest)?;
    Ok(manifest)
}

pub fn read_annotation(dir: &Path, entry: &ManifestEntry) -> Result<SceneAnnotation, CorpusError> {
    let path = dir.join(&entry.annotation);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(json_err(&path))
}

pub fn load_scene(dir: &Path, entry: &ManifestEntry) -> Result<Scene, CorpusError> {
    let annotation = read_annotation(dir, entry)?;
    let image = RasterImage::load(&dir.join(&annotation.image))?;
    if (image.width(), image.height()) != (annotation.width, annotation.height) {
        return Err(CorpusError::Annotation {
            scene_id: annotation.scene_id,
            message: format!(
                "image is {}x{}, annotation says {}x{}",
                image.width(),
                image.height(),
                annotation.width,
                annotation.height
            ),
        });
    }
    Ok(Scene { image, annotation })
}

/// Manifest plus every annotation, in manifest order.
pub fn read_corpus(dir: &Path) -> Result<(Manifest, Vec<SceneAnnotation>), CorpusError> {
    let manifest = read_manifest(dir)?;
    let anns = manifest
        .scenes
        .iter()
        .map(|e| read_annotation(dir, e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, anns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::Palette;

    fn cat() -> Grammar {
        Grammar::bundled("cat").unwrap()
    }

    #[test]
    fn zero_jitter_matches_layout() {
        for name in ["cat", "face", "wild"] {
            let g = Grammar::bundled(name).unwrap();
            let scene = generate_scene(&g, 224, 224, &JitterSpec::none(1), "s0").unwrap();
            let layout = g.instantiate_full_layout(&scene.annotation.frame);
            assert_eq!(scene.annotation.parts.len(), layout.len());
            for (got, want) in scene.annotation.parts.iter().zip(&layout) {
                assert_eq!(got.label, want.label);
                for (a, b) in got.bbox.to_array().iter().zip(want.bbox.to_array()) {
                    assert!((a - b).abs() < 1e-9, "{name}: {a} vs {b}");
                }
            }
        }
        let g = cat();
        let scene = generate_scene(&g, 224, 224, &JitterSpec::none(1), "s0").unwrap();
        let required = g.instantiate_layout(&scene.annotation.frame);
        assert_eq!(scene.annotation.parts.len(), required.len());
    }

    #[test]
    fn generation_is_deterministic() {
        let g = Grammar::bundled("face").unwrap();
        let j = JitterSpec {
            seed: 9,
            center_sigma: 0.1,
            size_sigma: 0.1,
            drop_prob: 0.3,
        };
        let a = generate_scene(&g, 224, 224, &j, "face-1").unwrap();
        let b = generate_scene(&g, 224, 224, &j, "face-1").unwrap();
        assert_eq!(a.image.to_ppm(), b.image.to_ppm());
        assert_eq!(a.annotation, b.annotation);
        let c = generate_scene(&g, 224, 224, &j, "face-2").unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn dropping_optional_ears() {
        let g = Grammar::bundled("face").unwrap();
        let j = JitterSpec {
            drop_prob: 1.0,
            ..JitterSpec::none(4)
        };
        for i in 0..5 {
            let s = generate_scene(&g, 224, 224, &j, &format!("f{i}")).unwrap();
            assert!(s.annotation.parts.iter().all(|p| !p.label.as_str().starts_with("ear")));
            assert_eq!(s.annotation.parts.len(), 4);
            assert_eq!(s.annotation.correctness, Correctness::Correct);
        }
    }

    #[test]
    fn glyph_pixels_match_annotation_boxes() {
        let g = Grammar::bundled("face").unwrap();
        let palette = Palette::for_grammar(&g).unwrap();
        let j = JitterSpec {
            seed: 3,
            center_sigma: 0.2,
            size_sigma: 0.1,
            drop_prob: 0.5,
        };
        for i in 0..10 {
            let s = generate_scene(&g, 224, 224, &j, &format!("g{i}")).unwrap();
            for part in &s.annotation.parts {
                let idx = g.label_index(&part.label).unwrap();
                let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
                for y in 0..224 {
                    for x in 0..224 {
                        if palette.classify(s.image.get(x, y)) == Some(idx) {
                            x0 = x0.min(x);
                            y0 = y0.min(y);
                            x1 = x1.max(x + 1);
                            y1 = y1.max(y + 1);
                        }
                    }
                }
                let got = [x0, y0, x1, y1].map(f64::from);
                assert_eq!(got, part.bbox.to_array(), "{}", part.label);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = cat();
        assert!(generate_scene(&g, 100, 224, &JitterSpec::none(0), "x").is_err());
        let j = JitterSpec {
            center_sigma: -1.0,
            ..JitterSpec::none(0)
        };
        assert!(matches!(
            generate_scene(&g, 224, 224, &j, "x"),
            Err(CorpusError::InvalidJitter(_))
        ));
    }

    #[test]
    fn impossible_jitter_reports_generation_error() {
        let g = cat();
        let j = JitterSpec {
            center_sigma: 50.0,
            ..JitterSpec::none(0)
        };
        assert!(matches!(
            generate_scene(&g, 224, 224, &j, "x"),
            Err(CorpusError::Generation { attempts: 16, .. })
        ));
    }

    #[test]
    fn corpus_round_trip() {
        let g = cat();
        let dir = tempfile::tempdir().unwrap();
        let j = JitterSpec {
            center_sigma: 0.05,
            ..JitterSpec::none(11)
        };
        let ids: Vec<String> = (0..3).map(|i| format!("cat-{i:05}")).collect();
        let scenes = generate_scenes(&g, 224, 224, &j, &ids, 2).unwrap();
        let manifest = write_corpus(&scenes, dir.path()).unwrap();
        assert_eq!(manifest.counts.total, 3);
        assert_eq!(fs::read_dir(dir.path().join("images")).unwrap().count(), 3);
        assert_eq!(fs::read_dir(dir.path().join("annotations")).unwrap().count(), 3);

        let (read_back, anns) = read_corpus(dir.path()).unwrap();
        assert_eq!(read_back, manifest);
        for (scene, ann) in scenes.iter().zip(&anns) {
            assert_eq!(&scene.annotation, ann);
            let loaded = load_scene(dir.path(), read_back.entry(&ann.scene_id).unwrap()).unwrap();
            assert_eq!(loaded.image, scene.image);
        }
        assert!(matches!(
            append_corpus(&scenes[..1], dir.path()),
            Err(CorpusError::DuplicateScene(_))
        ));
    }

    #[test]
    fn manifest_records_imbalance() {
        let mut m = Manifest::default();
        for i in 0..1200 {
            m.scenes.push(ManifestEntry {
                scene_id: format!("s{i:05}"),
                class_name: "cat".into(),
                image: String::new(),
                annotation: String::new(),
                correctness: if i < 1000 {
                    Correctness::Correct
                } else {
                    Correctness::Incorrect
                },
            });
        }
        m.refresh();
        assert_eq!(m.counts.correct_per_incorrect, Some(5.0));
        assert_eq!(m.imbalance().as_deref(), Some("5:1"));
        assert_eq!(m.counts.by_class["cat"].incorrect, 200);
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let g = Grammar::bundled("wild").unwrap();
        let j = JitterSpec {
            center_sigma: 0.1,
            ..JitterSpec::none(5)
        };
        let ids: Vec<String> = (0..9).map(|i| format!("w{i}")).collect();
        let a = generate_scenes(&g, 224, 224, &j, &ids, 1).unwrap();
        let b = generate_scenes(&g, 224, 224, &j, &ids, 8).unwrap();
        assert_eq!(a, b);
    }
}
