//! Part vocabularies and canonical layouts.
//!
//! A grammar names the parts ("words") an object class is built from and the
//! arrangement they take in a correct image. Layouts are expressed relative to
//! a [`ContainerFrame`], the extent of the object inside the image.
//!
//! The slot layout is this toolkit's own formalisation of "correct
//! arrangement"; real images only ever reach the checker through detections,
//! so the layout is used by synthesis and by the oracle backends.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, Detection, GeometryError, Label};

pub const GRAMMAR_FILE_VERSION: u32 = 1;

/// Slots of one grammar must overlap less than this in relative coordinates.
pub const MAX_SLOT_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("cannot parse grammar file: {0}")]
    Parse(String),
    #[error("invalid grammar field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("unknown bundled grammar `{0}` (available: face, cat, wild)")]
    UnknownBundled(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> GrammarError {
    GrammarError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

/// Extent of the object within the image; relative slot coordinates map onto it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContainerFrame(pub BBox);

impl ContainerFrame {
    pub fn new(bbox: BBox) -> Self {
        ContainerFrame(bbox)
    }

    /// The whole image as a frame.
    pub fn full_image(width: u32, height: u32) -> Result<Self, GeometryError> {
        Ok(ContainerFrame(BBox::new(
            0.0,
            0.0,
            f64::from(width),
            f64::from(height),
        )?))
    }

    /// Default object placement: the image inset by a seventh of its shorter side.
    pub fn centered(width: u32, height: u32) -> Result<Self, GeometryError> {
        let margin = f64::from(width.min(height) / 7);
        Ok(ContainerFrame(BBox::new(
            margin,
            margin,
            f64::from(width) - margin,
            f64::from(height) - margin,
        )?))
    }

    pub fn bbox(&self) -> &BBox {
        &self.0
    }

    /// Maps a relative box `(u0, v0, u1, v1)` into absolute coordinates.
    fn map(&self, u0: f64, v0: f64, u1: f64, v1: f64) -> Result<BBox, GeometryError> {
        let f = &self.0;
        let (w, h) = (f.width(), f.height());
        BBox::new(
            f.x_min() + u0 * w,
            f.y_min() + v0 * h,
            f.x_min() + u1 * w,
            f.y_min() + v1 * h,
        )
    }
}

/// Canonical position of one part, relative to the container frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSlot {
    pub label: Label,
    pub center: [f64; 2],
    pub size: [f64; 2],
    #[serde(default = "default_required")]
    pub required: bool,
}

fn default_required() -> bool {
    true
}

impl PartSlot {
    /// Relative box `(u0, v0, u1, v1)`.
    pub fn relative_box(&self) -> (f64, f64, f64, f64) {
        let (hw, hh) = (self.size[0] / 2.0, self.size[1] / 2.0);
        (
            self.center[0] - hw,
            self.center[1] - hh,
            self.center[0] + hw,
            self.center[1] + hh,
        )
    }

    pub fn place(&self, frame: &ContainerFrame) -> Result<BBox, GeometryError> {
        let (u0, v0, u1, v1) = self.relative_box();
        frame.map(u0, v0, u1, v1)
    }
}

/// On-disk layout of a grammar file (TOML, or the same structure in JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrammarFile {
    pub version: u32,
    pub class_name: String,
    pub labels: Vec<Label>,
    #[serde(default)]
    pub aliases: BTreeMap<Label, String>,
    #[serde(default)]
    pub slots: Vec<PartSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grammar {
    class_name: String,
    vocabulary: Vec<Label>,
    aliases: BTreeMap<Label, String>,
    slots: Vec<PartSlot>,
}

impl Grammar {
    pub fn class_name(&self) -> &str {
        &self.class_name
    }

    /// Part labels in declaration order.
    pub fn vocabulary(&self) -> &[Label] {
        &self.vocabulary
    }

    pub fn slots(&self) -> &[PartSlot] {
        &self.slots
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.vocabulary.contains(label)
    }

    pub fn label_index(&self, label: &Label) -> Option<usize> {
        self.vocabulary.iter().position(|l| l == label)
    }

    pub fn slot(&self, label: &Label) -> Option<&PartSlot> {
        self.slots.iter().find(|s| &s.label == label)
    }

    /// Word class of a label after aliasing (`eye_left` -> `eye`).
    pub fn word_class<'a>(&'a self, label: &'a Label) -> &'a str {
        self.aliases
            .get(label)
            .map(String::as_str)
            .unwrap_or(label.as_str())
    }

    /// Distinct word classes in vocabulary order.
    pub fn word_classes(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.vocabulary
            .iter()
            .map(|l| self.word_class(l))
            .filter(|c| seen.insert(*c))
            .collect()
    }

    /// One detection per required slot, in row-major order of box centers.
    pub fn instantiate_layout(&self, frame: &ContainerFrame) -> Vec<Detection> {
        self.place_slots(frame, false)
    }

    /// Like [`Grammar::instantiate_layout`] but including optional slots.
    pub fn instantiate_full_layout(&self, frame: &ContainerFrame) -> Vec<Detection> {
        self.place_slots(frame, true)
    }

    fn place_slots(&self, frame: &ContainerFrame, with_optional: bool) -> Vec<Detection> {
        let mut out: Vec<Detection> = self
            .slots
            .iter()
            .filter(|s| with_optional || s.required)
            .map(|s| {
                // validated slots have positive relative extent and the frame
                // has positive area, so the mapped box is always valid
                let bbox = s.place(frame).expect("validated slot maps to a valid box");
                Detection::certain(s.label.clone(), bbox)
            })
            .collect();
        sort_row_major(&mut out);
        out
    }

    pub fn from_file(file: GrammarFile) -> Result<Self, GrammarError> {
        if file.version != GRAMMAR_FILE_VERSION {
            return Err(invalid(
                "version",
                format!(
                    "unsupported version {} (expected {GRAMMAR_FILE_VERSION})",
                    file.version
                ),
            ));
        }
        if file.class_name.trim().is_empty() {
            return Err(invalid("class_name", "must not be empty"));
        }
        if file.labels.is_empty() {
            return Err(invalid("labels", "vocabulary is empty"));
        }
        let mut seen = HashSet::new();
        for (i, label) in file.labels.iter().enumerate() {
            if label.as_str().trim().is_empty() {
                return Err(invalid(format!("labels[{i}]"), "empty label"));
            }
            if !seen.insert(label) {
                return Err(invalid(
                    format!("labels[{i}]"),
                    format!("duplicate label `{label}`"),
                ));
            }
        }
        for key in file.aliases.keys() {
            if !seen.contains(key) {
                return Err(invalid(
                    format!("aliases.{key}"),
                    "aliased label is not in the vocabulary",
                ));
            }
        }

        let mut slot_labels = HashSet::new();
        for (i, slot) in file.slots.iter().enumerate() {
            if !seen.contains(&slot.label) {
                return Err(invalid(
                    format!("slots[{i}].label"),
                    format!("`{}` is not in the vocabulary", slot.label),
                ));
            }
            if !slot_labels.insert(&slot.label) {
                return Err(invalid(
                    format!("slots[{i}].label"),
                    format!("duplicate slot for `{}`", slot.label),
                ));
            }
            let [w, h] = slot.size;
            if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
                return Err(invalid(
                    format!("slots[{i}].size"),
                    format!("[{w}, {h}] must lie in (0, 1]"),
                ));
            }
            let (u0, v0, u1, v1) = slot.relative_box();
            let eps = 1e-12;
            let finite = [u0, v0, u1, v1].iter().all(|v| v.is_finite());
            if !finite || u0 < -eps || v0 < -eps || u1 > 1.0 + eps || v1 > 1.0 + eps {
                return Err(invalid(
                    format!("slots[{i}].center"),
                    format!(
                        "slot `{}` extends outside the unit frame ({u0}, {v0}, {u1}, {v1})",
                        slot.label
                    ),
                ));
            }
        }
        let unit = ContainerFrame(BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box"));
        for i in 0..file.slots.len() {
            for j in (i + 1)..file.slots.len() {
                let (a, b) = (&file.slots[i], &file.slots[j]);
                let overlap = iou(
                    &a.place(&unit).map_err(|e| invalid(format!("slots[{i}]"), e.to_string()))?,
                    &b.place(&unit).map_err(|e| invalid(format!("slots[{j}]"), e.to_string()))?,
                );
                if overlap >= MAX_SLOT_IOU {
                    return Err(invalid(
                        format!("slots[{j}]"),
                        format!(
                            "slot `{}` overlaps slot `{}` (iou {overlap:.3} >= {MAX_SLOT_IOU})",
                            b.label, a.label
                        ),
                    ));
                }
            }
        }

        Ok(Grammar {
            class_name: file.class_name,
            vocabulary: file.labels,
            aliases: file.aliases,
            slots: file.slots,
        })
    }

    pub fn to_file(&self) -> GrammarFile {
        GrammarFile {
            version: GRAMMAR_FILE_VERSION,
            class_name: self.class_name.clone(),
            labels: self.vocabulary.clone(),
            aliases: self.aliases.clone(),
            slots: self.slots.clone(),
        }
    }

    /// One of the grammars shipped with the toolkit: `face`, `cat` or `wild`.
    pub fn bundled(name: &str) -> Result<Self, GrammarError> {
        let src = match name {
            "face" => include_str!("../grammars/face.toml"),
            "cat" => include_str!("../grammars/cat.toml"),
            "wild" => include_str!("../grammars/wild.toml"),
            other => return Err(GrammarError::UnknownBundled(other.to_owned())),
        };
        load_grammar(src)
    }
}

/// Parses and validates grammar file content. JSON is detected by a leading `{`.
pub fn load_grammar(source: &str) -> Result<Grammar, GrammarError> {
    let file: GrammarFile = if source.trim_start().starts_with('{') {
        serde_json::from_str(source).map_err(|e| GrammarError::Parse(e.to_string()))?
    } else {
        toml::from_str(source).map_err(|e| GrammarError::Parse(e.to_string()))?
    };
    Grammar::from_file(file)
}

/// Top-to-bottom, then left-to-right by box center.
pub fn sort_row_major(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        let (ax, ay) = a.bbox.center();
        let (bx, by) = b.bbox.center();
        ay.total_cmp(&by)
            .then(ax.total_cmp(&bx))
            .then_with(|| a.label.cmp(&b.label))
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_SLOTS: &str = r#"
version = 1
class_name = "toy"
labels = ["eye_left", "nose"]

[[slots]]
label = "eye_left"
center = [0.3, 0.3]
size = [0.2, 0.2]

[[slots]]
label = "nose"
center = [0.5, 0.6]
size = [0.2, 0.2]
"#;

    fn frame(x0: f64, y0: f64, x1: f64, y1: f64) -> ContainerFrame {
        ContainerFrame(BBox::new(x0, y0, x1, y1).unwrap())
    }

    #[test]
    fn bundled_face_vocabulary() {
        let g = Grammar::bundled("face").unwrap();
        assert_eq!(g.word_classes(), vec!["eye", "ear", "nose", "mouth"]);
        assert_eq!(g.vocabulary().len(), 6);
        assert_eq!(g.slots().len(), 6);
        for name in ["cat", "wild"] {
            let g = Grammar::bundled(name).unwrap();
            assert_eq!(g.slots().len(), 5);
            assert_eq!(g.word_classes(), vec!["ear", "eye", "nose"]);
        }
        assert!(Grammar::bundled("horse").is_err());
    }

    #[test]
    fn nose_maps_affinely() {
        let g = Grammar::bundled("face").unwrap();
        let layout = g.instantiate_layout(&frame(0., 0., 100., 100.));
        let nose = layout.iter().find(|d| d.label.as_str() == "nose").unwrap();
        let want = [40.0, 47.5, 60.0, 62.5];
        for (got, want) in nose.bbox.to_array().iter().zip(want) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert_eq!(nose.score(), 1.0);
    }

    #[test]
    fn layout_is_required_only_and_row_major() {
        let g = Grammar::bundled("face").unwrap();
        let layout = g.instantiate_layout(&frame(0., 0., 160., 160.));
        let labels: Vec<_> = layout.iter().map(|d| d.label.as_str()).collect();
        assert_eq!(labels, vec!["eye_left", "eye_right", "nose", "mouth"]);
        let full = g.instantiate_full_layout(&frame(0., 0., 160., 160.));
        assert_eq!(full.len(), 6);
    }

    #[test]
    fn identity_frame_scales_relative_slots() {
        let g = load_grammar(TWO_SLOTS).unwrap();
        let layout = g.instantiate_layout(&frame(0., 0., 224., 224.));
        let eye = &layout[0];
        let (u0, v0, u1, v1) = g.slots()[0].relative_box();
        let want = [u0 * 224., v0 * 224., u1 * 224., v1 * 224.];
        for (got, want) in eye.bbox.to_array().iter().zip(want) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_slot_rejected() {
        let src = TWO_SLOTS.replace(r#"label = "nose""#, r#"label = "eye_left""#);
        match load_grammar(&src) {
            Err(GrammarError::Validation { field, .. }) => assert_eq!(field, "slots[1].label"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_label_rejected() {
        let src = TWO_SLOTS.replace(r#"["eye_left", "nose"]"#, r#"["eye_left", "eye_left", "nose"]"#);
        let err = load_grammar(&src).unwrap_err();
        assert!(err.to_string().contains("labels[1]"), "{err}");
    }

    #[test]
    fn empty_vocabulary_rejected() {
        let src = "version = 1\nclass_name = \"x\"\nlabels = []\n";
        let err = load_grammar(src).unwrap_err();
        assert!(matches!(err, GrammarError::Validation { ref field, .. } if field == "labels"));
    }

    #[test]
    fn out_of_range_slot_rejected() {
        let src = TWO_SLOTS.replace("center = [0.5, 0.6]", "center = [0.95, 0.6]");
        let err = load_grammar(&src).unwrap_err();
        assert!(err.to_string().contains("slots[1].center"), "{err}");
    }

    #[test]
    fn overlapping_slots_rejected() {
        let src = TWO_SLOTS.replace("center = [0.5, 0.6]", "center = [0.32, 0.3]");
        let err = load_grammar(&src).unwrap_err();
        assert!(err.to_string().contains("overlaps"), "{err}");
    }

    #[test]
    fn json_rendering_accepted() {
        let g = Grammar::bundled("cat").unwrap();
        let json = serde_json::to_string(&g.to_file()).unwrap();
        assert_eq!(load_grammar(&json).unwrap(), g);
    }

    #[test]
    fn unknown_version_rejected() {
        let src = TWO_SLOTS.replace("version = 1", "version = 7");
        assert!(load_grammar(&src).unwrap_err().to_string().contains("version"));
    }
}
