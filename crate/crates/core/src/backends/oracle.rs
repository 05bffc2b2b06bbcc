//! Grammar-driven stand-ins for the neural detector and inpainter.
//!
//! The detector finds glyphs by color: every 4-connected component of pixels
//! matching a label color becomes one detection whose box is the component's
//! pixel extent. The reconstructor knows the canonical layout of its grammar
//! and paints it, over its own background texture, into the masked patches.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, Detector, ReconstructHint, Reconstructor};
use crate::geometry::{BBox, Detection, PatchGrid};
use crate::grammar::{sort_row_major, Grammar};
use crate::raster::RasterImage;
use crate::render::{self, Palette, PaletteError};
use crate::seed;
use crate::synth::truncated_normal;

/// Components with fewer pixels are ignored.
pub const MIN_COMPONENT_PIXELS: usize = 4;

/// Box perturbation applied to exact glyph detections.
///
/// Sigmas are fractions of the box size. Draws are truncated at three
/// standard deviations; scores are uniform in `[0.7, 1.0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    pub seed: u64,
    pub center_sigma: f64,
    #[serde(default)]
    pub size_sigma: f64,
}

#[derive(Debug, Clone)]
pub struct OracleDetector {
    palette: Palette,
    noise: Option<DetectorNoise>,
}

impl OracleDetector {
    pub fn new(grammar: &Grammar) -> Result<Self, PaletteError> {
        Ok(Self {
            palette: Palette::for_grammar(grammar)?,
            noise: None,
        })
    }

    pub fn with_noise(mut self, noise: DetectorNoise) -> Self {
        self.noise = Some(noise);
        self
    }

    /// Exact glyph boxes, one per color component, in row-major order.
    pub fn components(&self, image: &RasterImage) -> Vec<Detection> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut class = vec![u8::MAX; w * h];
        for y in 0..h {
            for x in 0..w {
                if let Some(c) = self.palette.classify(image.get(x as u32, y as u32)) {
                    class[y * w + x] = c as u8;
                }
            }
        }
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        let mut stack = Vec::new();
        for start in 0..w * h {
            if seen[start] || class[start] == u8::MAX {
                continue;
            }
            let c = class[start];
            seen[start] = true;
            stack.push(start);
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            let mut count = 0;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                count += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
                let mut visit = |j: usize| {
                    if !seen[j] && class[j] == c {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
            if count < MIN_COMPONENT_PIXELS {
                continue;
            }
            let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
                .expect("component has positive extent");
            out.push(Detection::certain(self.palette.label(c as usize).clone(), bbox));
        }
        sort_row_major(&mut out);
        out
    }
}

impl Detector for OracleDetector {
    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, BackendError> {
        let exact = self.components(image);
        let Some(noise) = self.noise else {
            return Ok(exact);
        };
        let mut rng = seed::rng_for(noise.seed, &format!("detect/{}", image.digest()));
        let mut out = Vec::with_capacity(exact.len());
        for d in exact {
            let (cx, cy) = d.bbox.center();
            let (w, h) = (d.bbox.width(), d.bbox.height());
            let (zx, zy) = (truncated_normal(&mut rng), truncated_normal(&mut rng));
            let (zw, zh) = (truncated_normal(&mut rng), truncated_normal(&mut rng));
            let score = rng.random_range(0.7..=1.0);
            let nw = w * (1.0 + zw * noise.size_sigma).max(0.25);
            let nh = h * (1.0 + zh * noise.size_sigma).max(0.25);
            let (cx, cy) = (cx + zx * noise.center_sigma * w, cy + zy * noise.center_sigma * h);
            let moved = BBox::clipped(
                cx - nw / 2.0,
                cy - nh / 2.0,
                cx + nw / 2.0,
                cy + nh / 2.0,
                image.width(),
                image.height(),
            );
            if let Some(b) = moved {
                out.push(Detection::new(d.label, b, score)?);
            }
        }
        Ok(out)
    }
}

/// Inpaints masked patches with the grammar's canonical layout.
///
/// Every slot, optional ones included, is painted, so a correct scene with or
/// without optional parts reconstructs to itself up to placement jitter.
#[derive(Debug, Clone)]
pub struct OracleReconstructor {
    grammar: Grammar,
    palette: Palette,
    texture_seed: u64,
}

impl OracleReconstructor {
    pub fn new(grammar: &Grammar, texture_seed: u64) -> Result<Self, PaletteError> {
        Ok(Self {
            grammar: grammar.clone(),
            palette: Palette::for_grammar(grammar)?,
            texture_seed,
        })
    }

    /// The full image this reconstructor would paint for `hint`.
    pub fn canvas(&self, width: u32, height: u32, hint: &ReconstructHint) -> Result<RasterImage, BackendError> {
        let mut canvas = render::background(width, height, self.texture_seed)?;
        if let ReconstructHint::Framed { frame } = hint {
            for part in self.grammar.instantiate_full_layout(frame) {
                let color = self.palette.color(&part.label).expect("layout labels are in the palette");
                render::draw_glyph(&mut canvas, &part.bbox, color);
            }
        }
        Ok(canvas)
    }
}

impl Reconstructor for OracleReconstructor {
    fn reconstruct(
        &self,
        image: &RasterImage,
        grid: &PatchGrid,
        masked: &[usize],
        hint: Option<&ReconstructHint>,
    ) -> Result<RasterImage, BackendError> {
        check_grid(image, grid)?;
        let hint = hint.ok_or(BackendError::MissingHint)?;
        for &i in masked {
            grid.check_index(i)?;
        }
        let canvas = self.canvas(image.width(), image.height(), hint)?;
        let mut out = image.clone();
        let p = grid.patch_size();
        for &i in masked {
            let (x0, y0) = grid.patch_origin(i)?;
            out.copy_rect_from(&canvas, x0, y0, x0 + p, y0 + p);
        }
        Ok(out)
    }
}

pub(crate) fn check_grid(image: &RasterImage, grid: &PatchGrid) -> Result<(), BackendError> {
    if (image.width(), image.height()) != (grid.image_width(), grid.image_height()) {
        return Err(BackendError::Dimensions {
            want_w: grid.image_width(),
            want_h: grid.image_height(),
            got_w: image.width(),
            got_h: image.height(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::grammar::ContainerFrame;
    use crate::synth::{generate_scene, JitterSpec};

    fn face() -> Grammar {
        Grammar::bundled("face").unwrap()
    }

    fn jitter(seed: u64) -> JitterSpec {
        JitterSpec {
            seed,
            center_sigma: 0.05,
            size_sigma: 0.05,
            drop_prob: 0.3,
        }
    }

    #[test]
    fn detector_recovers_annotations_exactly() {
        let g = face();
        let det = OracleDetector::new(&g).unwrap();
        for i in 0..20 {
            let scene = generate_scene(&g, 224, 224, &jitter(7), &format!("s{i}")).unwrap();
            let found = det.detect(&scene.image).unwrap();
            assert_eq!(found, scene.annotation.parts, "scene s{i}");
        }
    }

    #[test]
    fn background_yields_nothing() {
        let g = face();
        let det = OracleDetector::new(&g).unwrap();
        let img = render::background(64, 64, 3).unwrap();
        assert!(det.detect(&img).unwrap().is_empty());
    }

    #[test]
    fn same_color_components_are_separate() {
        let g = face();
        let pal = Palette::for_grammar(&g).unwrap();
        let nose = pal.color(&"nose".into()).unwrap();
        let mut img = render::background(64, 64, 1).unwrap();
        img.fill_box(&BBox::new(2.0, 2.0, 10.0, 10.0).unwrap(), nose);
        img.fill_box(&BBox::new(20.0, 2.0, 30.0, 10.0).unwrap(), nose);
        // a 2-pixel speck is below the component floor
        img.fill_box(&BBox::new(50.0, 50.0, 52.0, 51.0).unwrap(), nose);
        let found = OracleDetector::new(&g).unwrap().detect(&img).unwrap();
        assert_eq!(found.len(), 2);
        assert_eq!(found[1].bbox, BBox::new(20.0, 2.0, 30.0, 10.0).unwrap());
    }

    #[test]
    fn noisy_detections_stay_close_and_repeat() {
        let g = face();
        let noise = DetectorNoise {
            seed: 11,
            center_sigma: 0.05,
            size_sigma: 0.0,
        };
        let det = OracleDetector::new(&g).unwrap().with_noise(noise);
        let scene = generate_scene(&g, 224, 224, &jitter(3), "n").unwrap();
        let a = det.detect(&scene.image).unwrap();
        let b = det.detect(&scene.image).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), scene.annotation.parts.len());
        for (d, truth) in a.iter().zip(&scene.annotation.parts) {
            assert_eq!(d.label, truth.label);
            // shift is at most 0.15 of the size on each axis
            assert!(iou(&d.bbox, &truth.bbox) >= 0.56, "{}", iou(&d.bbox, &truth.bbox));
            assert!((0.7..=1.0).contains(&d.score()));
        }
    }

    #[test]
    fn reconstruction_only_touches_masked_patches() {
        let g = face();
        let rec = OracleReconstructor::new(&g, 5).unwrap();
        let img = render::background(224, 224, 9).unwrap();
        let grid = PatchGrid::new(224, 224, 16).unwrap();
        let hint = ReconstructHint::Framed {
            frame: ContainerFrame::centered(224, 224).unwrap(),
        };
        let out = rec.reconstruct(&img, &grid, &[0, 50, 100], Some(&hint)).unwrap();
        for y in 0..224 {
            for x in 0..224 {
                let p = grid.index(y / 16, x / 16);
                if ![0, 50, 100].contains(&p) {
                    assert_eq!(out.get(x, y), img.get(x, y));
                }
            }
        }
        assert_ne!(out, img);
    }

    #[test]
    fn reconstruction_is_idempotent() {
        let g = face();
        let rec = OracleReconstructor::new(&g, 5).unwrap();
        let scene = generate_scene(&g, 224, 224, &jitter(1), "i").unwrap();
        let grid = PatchGrid::new(224, 224, 16).unwrap();
        let hint = ReconstructHint::Framed {
            frame: scene.annotation.frame,
        };
        let mask = grid.patches_for_box(&scene.annotation.parts[0].bbox).unwrap();
        let once = rec.reconstruct(&scene.image, &grid, &mask, Some(&hint)).unwrap();
        let twice = rec.reconstruct(&once, &grid, &mask, Some(&hint)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn canonical_scene_is_a_fixed_point() {
        let g = face();
        let rec = OracleReconstructor::new(&g, 5).unwrap();
        let frame = ContainerFrame::centered(224, 224).unwrap();
        let hint = ReconstructHint::Framed { frame };
        let canvas = rec.canvas(224, 224, &hint).unwrap();
        let grid = PatchGrid::new(224, 224, 16).unwrap();
        let all: Vec<usize> = (0..grid.patch_count()).collect();
        assert_eq!(rec.reconstruct(&canvas, &grid, &all, Some(&hint)).unwrap(), canvas);
    }

    #[test]
    fn unframed_hint_erases_parts() {
        let g = face();
        let rec = OracleReconstructor::new(&g, 5).unwrap();
        let det = OracleDetector::new(&g).unwrap();
        let scene = generate_scene(&g, 224, 224, &JitterSpec::none(0), "u").unwrap();
        let grid = PatchGrid::new(224, 224, 16).unwrap();
        let all: Vec<usize> = (0..grid.patch_count()).collect();
        let out = rec
            .reconstruct(&scene.image, &grid, &all, Some(&ReconstructHint::Unframed))
            .unwrap();
        assert!(det.detect(&out).unwrap().is_empty());
    }

    #[test]
    fn rejects_missing_hint_and_bad_input() {
        let g = face();
        let rec = OracleReconstructor::new(&g, 5).unwrap();
        let img = render::background(224, 224, 9).unwrap();
        let grid = PatchGrid::new(224, 224, 16).unwrap();
        let err = rec.reconstruct(&img, &grid, &[0], None).unwrap_err();
        assert_eq!(err.to_string(), "missing frame hint");
        let hint = ReconstructHint::Unframed;
        assert!(rec.reconstruct(&img, &grid, &[196], Some(&hint)).is_err());
        let small = PatchGrid::new(32, 32, 16).unwrap();
        assert!(matches!(
            rec.reconstruct(&img, &small, &[0], Some(&hint)),
            Err(BackendError::Dimensions { .. })
        ));
    }
}
