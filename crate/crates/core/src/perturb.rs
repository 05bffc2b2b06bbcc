//! Syntactically incorrect scenes built from correct ones: swapped parts,
//! replaced parts, extra parts and parts scattered over a background.
//!
//! Word omission is deliberately absent: a missing part does not make an
//! image incorrect (occlusion, crop, pose).
//!
//! Pixels are moved with a bilinear resize and hard paste. Annotation boxes
//! stay authoritative for every downstream stage. Each operation appends a
//! [`PerturbationRecord`] to the scene's provenance; [`replay`] re-applies a
//! record without consuming randomness.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, Detection, GeometryError, Label};
use crate::grammar::{ContainerFrame, Grammar};
use crate::raster::{RasterError, RasterImage};
use crate::render::{glyph_image, Palette, PaletteError};
use crate::seed;
use crate::synth::{Correctness, Scene, SceneAnnotation};

pub const MAX_PLACEMENT_SAMPLES: usize = 64;
/// Upper bound on the IOU between a pasted part and any part already present.
pub const PLACEMENT_MAX_IOU: f64 = 0.1;
/// Pixels kept free around placed parts. Touching parts of one label would
/// read as a single blob to a color-based detector.
pub const PLACEMENT_GAP: f64 = 2.0;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("scene has no part #{0}")]
    MissingPart(usize),
    #[error("cannot swap a part with itself (#{0})")]
    SamePart(usize),
    #[error("parts #{0} and #{1} share the label `{2}`; swapping them changes nothing")]
    SameLabel(usize, usize, Label),
    #[error("replacement label `{0}` equals the current label")]
    IdenticalReplacement(Label),
    #[error("label `{0}` is not in the grammar vocabulary")]
    UnknownLabel(Label),
    #[error("source library has no entry for `{0}`")]
    EmptyLibrary(Label),
    #[error("no valid placement for `{label}` after {attempts} samples")]
    Placement { label: Label, attempts: usize },
    #[error("background is {got:?}, scene is {want:?}")]
    BackgroundSize { got: (u32, u32), want: (u32, u32) },
    #[error("record cannot be replayed: {0}")]
    Replay(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Swap,
    Replace,
    Extra,
    Scatter,
}

impl std::fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PerturbationKind::Swap => "swap",
            PerturbationKind::Replace => "replace",
            PerturbationKind::Extra => "extra",
            PerturbationKind::Scatter => "scatter",
        })
    }
}

/// A part of the source annotation, by position and the label it had.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRef {
    pub index: usize,
    pub label: Label,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Where the pixels of an extra part came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "lowercase")]
pub enum PartSource {
    /// Crop of a part already in the scene.
    Part { index: usize },
    /// Entry of the part library for the label.
    Library { index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub label: Label,
    /// Box of the part in the source scene.
    pub from: BBox,
    pub to: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PerturbationOp {
    Swap {
        a: PartRef,
        b: PartRef,
    },
    Replace {
        target: PartRef,
        new_label: Label,
        library_index: usize,
    },
    Extra {
        label: Label,
        #[serde(rename = "box")]
        bbox: BBox,
        source: PartSource,
    },
    Scatter {
        background: String,
        placements: Vec<Placement>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    #[serde(flatten)]
    pub op: PerturbationOp,
    pub seed: u64,
}

impl PerturbationRecord {
    pub fn kind(&self) -> PerturbationKind {
        match self.op {
            PerturbationOp::Swap { .. } => PerturbationKind::Swap,
            PerturbationOp::Replace { .. } => PerturbationKind::Replace,
            PerturbationOp::Extra { .. } => PerturbationKind::Extra,
            PerturbationOp::Scatter { .. } => PerturbationKind::Scatter,
        }
    }
}

/// Per-label images that can be pasted as replacement or extra parts.
#[derive(Debug, Clone, Default)]
pub struct PartLibrary {
    entries: BTreeMap<Label, Vec<RasterImage>>,
}

impl PartLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// One flat glyph per vocabulary label.
    pub fn from_grammar(grammar: &Grammar) -> Result<Self, PerturbError> {
        let palette = Palette::for_grammar(grammar)?;
        let mut lib = Self::new();
        for (label, color) in palette.entries() {
            lib.insert(label.clone(), glyph_image(8, 8, *color)?);
        }
        Ok(lib)
    }

    /// Crops of every annotated part of the given scenes.
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> Self {
        let mut lib = Self::new();
        for s in scenes {
            for p in &s.annotation.parts {
                if let Some(crop) = s.image.crop(&p.bbox) {
                    lib.insert(p.label.clone(), crop);
                }
            }
        }
        lib
    }

    pub fn insert(&mut self, label: Label, image: RasterImage) {
        self.entries.entry(label).or_default().push(image);
    }

    pub fn get(&self, label: &Label) -> &[RasterImage] {
        self.entries.get(label).map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Scene {
    /// Same scene under a new id (image path follows the id).
    pub fn renamed(mut self, scene_id: &str) -> Scene {
        self.annotation.scene_id = scene_id.to_owned();
        self.annotation.image = SceneAnnotation::image_file_for(scene_id);
        self
    }
}

fn part_ref(ann: &SceneAnnotation, index: usize) -> Result<PartRef, PerturbError> {
    let p = ann.parts.get(index).ok_or(PerturbError::MissingPart(index))?;
    Ok(PartRef {
        index,
        label: p.label.clone(),
        bbox: p.bbox,
    })
}

fn crop(image: &RasterImage, bbox: &BBox) -> Result<RasterImage, PerturbError> {
    image
        .crop(bbox)
        .ok_or_else(|| PerturbError::Replay(format!("box {bbox} covers no pixel")))
}

fn finish(mut scene: Scene, record: PerturbationRecord) -> Scene {
    scene.annotation.correctness = Correctness::Incorrect;
    scene.annotation.provenance.push(record);
    scene
}

/// Exchanges the pixels and labels of parts `a` and `b`.
pub fn perturb_swap(scene: &Scene, a: usize, b: usize, seed: u64) -> Result<Scene, PerturbError> {
    let (ra, rb) = (part_ref(&scene.annotation, a)?, part_ref(&scene.annotation, b)?);
    if a == b {
        return Err(PerturbError::SamePart(a));
    }
    if ra.label == rb.label {
        return Err(PerturbError::SameLabel(a, b, ra.label));
    }
    apply_swap(scene, ra, rb, seed)
}

fn apply_swap(scene: &Scene, a: PartRef, b: PartRef, seed: u64) -> Result<Scene, PerturbError> {
    let mut out = scene.clone();
    let (crop_a, crop_b) = (crop(&scene.image, &a.bbox)?, crop(&scene.image, &b.bbox)?);
    out.image.paste_resized(&crop_b, &a.bbox);
    out.image.paste_resized(&crop_a, &b.bbox);
    let parts = &mut out.annotation.parts;
    let la = parts[a.index].label.clone();
    parts[a.index].label = parts[b.index].label.clone();
    parts[b.index].label = la;
    Ok(finish(
        out,
        PerturbationRecord {
            op: PerturbationOp::Swap { a, b },
            seed,
        },
    ))
}

/// Overwrites part `target` with a library image of `new_label`.
pub fn perturb_replace(
    scene: &Scene,
    target: usize,
    new_label: &Label,
    grammar: &Grammar,
    library: &PartLibrary,
    seed: u64,
) -> Result<Scene, PerturbError> {
    let t = part_ref(&scene.annotation, target)?;
    if !grammar.contains(new_label) {
        return Err(PerturbError::UnknownLabel(new_label.clone()));
    }
    if &t.label == new_label {
        return Err(PerturbError::IdenticalReplacement(new_label.clone()));
    }
    let choices = library.get(new_label);
    if choices.is_empty() {
        return Err(PerturbError::EmptyLibrary(new_label.clone()));
    }
    let library_index = seed::rng(seed).random_range(0..choices.len());
    apply_replace(scene, t, new_label.clone(), library_index, library, seed)
}

fn apply_replace(
    scene: &Scene,
    target: PartRef,
    new_label: Label,
    library_index: usize,
    library: &PartLibrary,
    seed: u64,
) -> Result<Scene, PerturbError> {
    let src = library
        .get(&new_label)
        .get(library_index)
        .ok_or_else(|| PerturbError::EmptyLibrary(new_label.clone()))?;
    let mut out = scene.clone();
    out.image.paste_resized(src, &target.bbox);
    out.annotation.parts[target.index].label = new_label.clone();
    Ok(finish(
        out,
        PerturbationRecord {
            op: PerturbationOp::Replace {
                target,
                new_label,
                library_index,
            },
            seed,
        },
    ))
}

/// Samples an integer-aligned `w x h` box inside `area` that does not touch
/// any of `taken` (which also bounds its IOU with them below [`PLACEMENT_MAX_IOU`]).
/// True when at least `PLACEMENT_GAP` pixels lie between the boxes on one axis.
fn separated(a: &BBox, b: &BBox) -> bool {
    a.x_max() + PLACEMENT_GAP <= b.x_min()
        || b.x_max() + PLACEMENT_GAP <= a.x_min()
        || a.y_max() + PLACEMENT_GAP <= b.y_min()
        || b.y_max() + PLACEMENT_GAP <= a.y_min()
}

fn sample_placement<R: Rng>(
    rng: &mut R,
    area: &BBox,
    w: f64,
    h: f64,
    taken: &[BBox],
    label: &Label,
) -> Result<BBox, PerturbError> {
    let x_lo = area.x_min().ceil();
    let y_lo = area.y_min().ceil();
    let x_hi = (area.x_max() - w).floor();
    let y_hi = (area.y_max() - h).floor();
    if x_hi >= x_lo && y_hi >= y_lo {
        for _ in 0..MAX_PLACEMENT_SAMPLES {
            let x = rng.random_range(x_lo as i64..=x_hi as i64) as f64;
            let y = rng.random_range(y_lo as i64..=y_hi as i64) as f64;
            let cand = BBox::new(x, y, x + w, y + h)?;
            let free = taken
                .iter()
                .all(|t| separated(t, &cand) && iou(t, &cand) < PLACEMENT_MAX_IOU);
            if free {
                return Ok(cand);
            }
        }
    }
    Err(PerturbError::Placement {
        label: label.clone(),
        attempts: MAX_PLACEMENT_SAMPLES,
    })
}

/// Pastes one more `label` part at a free location inside the frame.
///
/// The pixels come from an existing part with that label when the scene has
/// one, otherwise from the library. The new part has the size of the copied
/// part, or of the label's grammar slot when copying from the library.
pub fn perturb_extra(
    scene: &Scene,
    label: &Label,
    grammar: &Grammar,
    library: &PartLibrary,
    seed: u64,
) -> Result<Scene, PerturbError> {
    if !grammar.contains(label) {
        return Err(PerturbError::UnknownLabel(label.clone()));
    }
    let ann = &scene.annotation;
    let mut rng = seed::rng(seed);
    let existing = ann.parts.iter().position(|p| &p.label == label);
    let (source, w, h) = match existing {
        Some(index) => {
            let b = ann.parts[index].bbox;
            (PartSource::Part { index }, b.width(), b.height())
        }
        None => {
            let choices = library.get(label);
            if choices.is_empty() {
                return Err(PerturbError::EmptyLibrary(label.clone()));
            }
            let index = rng.random_range(0..choices.len());
            let (w, h) = match grammar.slot(label) {
                Some(slot) => {
                    let b = slot.place(&ann.frame)?;
                    (b.width().round().max(1.0), b.height().round().max(1.0))
                }
                None => (
                    f64::from(choices[index].width()),
                    f64::from(choices[index].height()),
                ),
            };
            (PartSource::Library { index }, w, h)
        }
    };
    let taken: Vec<BBox> = ann.parts.iter().map(|p| p.bbox).collect();
    let bbox = sample_placement(&mut rng, ann.frame.bbox(), w, h, &taken, label)?;
    apply_extra(scene, label.clone(), bbox, source, library, seed)
}

fn apply_extra(
    scene: &Scene,
    label: Label,
    bbox: BBox,
    source: PartSource,
    library: &PartLibrary,
    seed: u64,
) -> Result<Scene, PerturbError> {
    let src = match &source {
        PartSource::Part { index } => {
            let p = scene
                .annotation
                .parts
                .get(*index)
                .ok_or(PerturbError::MissingPart(*index))?;
            crop(&scene.image, &p.bbox)?
        }
        PartSource::Library { index } => library
            .get(&label)
            .get(*index)
            .cloned()
            .ok_or_else(|| PerturbError::EmptyLibrary(label.clone()))?,
    };
    let mut out = scene.clone();
    out.image.paste_resized(&src, &bbox);
    out.annotation.parts.push(Detection::certain(label.clone(), bbox));
    Ok(finish(
        out,
        PerturbationRecord {
            op: PerturbationOp::Extra {
                label,
                bbox,
                source,
            },
            seed,
        },
    ))
}

/// Moves every part of `scene` to a random free spot on `background`.
///
/// The result has no object frame: the frame is the whole image and
/// `framed` is false. `background_ref` is recorded in the provenance.
pub fn perturb_scatter(
    scene: &Scene,
    background: &RasterImage,
    background_ref: &str,
    seed: u64,
) -> Result<Scene, PerturbError> {
    let ann = &scene.annotation;
    let want = (ann.width, ann.height);
    let got = (background.width(), background.height());
    if got != want {
        return Err(PerturbError::BackgroundSize { got, want });
    }
    let whole = ContainerFrame::full_image(ann.width, ann.height)?;
    let mut rng = seed::rng(seed);
    let mut placements = Vec::with_capacity(ann.parts.len());
    let mut taken: Vec<BBox> = Vec::new();
    for p in &ann.parts {
        let to = sample_placement(
            &mut rng,
            whole.bbox(),
            p.bbox.width(),
            p.bbox.height(),
            &taken,
            &p.label,
        )?;
        taken.push(to);
        placements.push(Placement {
            label: p.label.clone(),
            from: p.bbox,
            to,
        });
    }
    apply_scatter(scene, background, background_ref.to_owned(), placements, seed)
}

fn apply_scatter(
    scene: &Scene,
    background: &RasterImage,
    background_ref: String,
    placements: Vec<Placement>,
    seed: u64,
) -> Result<Scene, PerturbError> {
    let ann = &scene.annotation;
    let mut image = background.clone();
    let mut parts = Vec::with_capacity(placements.len());
    for pl in &placements {
        let src = crop(&scene.image, &pl.from)?;
        image.paste_resized(&src, &pl.to);
        parts.push(Detection::certain(pl.label.clone(), pl.to));
    }
    let annotation = SceneAnnotation {
        frame: ContainerFrame::full_image(ann.width, ann.height)?,
        framed: false,
        parts,
        ..ann.clone()
    };
    Ok(finish(
        Scene { image, annotation },
        PerturbationRecord {
            op: PerturbationOp::Scatter {
                background: background_ref,
                placements,
            },
            seed,
        },
    ))
}

/// Re-applies a recorded perturbation to `scene` (the scene it was recorded on).
///
/// `background` is required for scatter records.
pub fn replay(
    scene: &Scene,
    record: &PerturbationRecord,
    library: &PartLibrary,
    background: Option<&RasterImage>,
) -> Result<Scene, PerturbError> {
    match &record.op {
        PerturbationOp::Swap { a, b } => apply_swap(scene, a.clone(), b.clone(), record.seed),
        PerturbationOp::Replace {
            target,
            new_label,
            library_index,
        } => apply_replace(
            scene,
            target.clone(),
            new_label.clone(),
            *library_index,
            library,
            record.seed,
        ),
        PerturbationOp::Extra {
            label,
            bbox,
            source,
        } => apply_extra(scene, label.clone(), *bbox, source.clone(), library, record.seed),
        PerturbationOp::Scatter {
            background: name,
            placements,
        } => {
            let bg = background
                .ok_or_else(|| PerturbError::Replay(format!("scatter needs background `{name}`")))?;
            apply_scatter(scene, bg, name.clone(), placements.clone(), record.seed)
        }
    }
}
