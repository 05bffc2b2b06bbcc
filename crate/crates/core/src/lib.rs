//! Visual syntax checking for images made of labelled semantic parts.
//!
//! An image is read as a sentence whose words are its parts (eyes, ears, a
//! nose, ...). Checking proceeds in three stages:
//!
//! 1. a part detector finds the words ([`backends::Detector`]);
//! 2. each detected part is masked in turn, patch-aligned, and the image is
//!    inpainted, every step working on the previous step's output
//!    ([`backends::Reconstructor`], [`pipeline::run_pipeline`]);
//! 3. the detector runs once more on the final reconstruction and the two
//!    detection sets are compared location by location
//!    ([`checker::check_syntax`]).
//!
//! Neural models plug in as external processes over a line-delimited JSON
//! protocol ([`backends::external`]). For desk-scale verification the crate
//! ships oracle backends driven by the grammar, a synthetic corpus generator
//! ([`synth`]), a perturbation engine ([`perturb`]) and balanced-accuracy
//! reporting ([`metrics`]).

pub mod backends;
pub mod checker;
pub mod geometry;
pub mod grammar;
pub mod metrics;
pub mod perturb;
pub mod pipeline;
pub mod plan;
pub mod raster;
pub mod render;
pub mod seed;
pub mod synth;

pub use backends::{Detector, ReconstructHint, Reconstructor};
pub use checker::{check_syntax, explain, SyntaxError, SyntaxVerdict};
pub use geometry::{iou, nms, BBox, Detection, Label, PatchGrid};
pub use grammar::{load_grammar, ContainerFrame, Grammar};
pub use raster::RasterImage;
pub use synth::{Correctness, JitterSpec, Scene, SceneAnnotation};
