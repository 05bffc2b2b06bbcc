//! Flat-color glyphs and the background texture of synthetic scenes.
//!
//! Every label of a grammar gets a saturated color far (in L-infinity
//! distance) from both the background band and every other label color, so a
//! pixel can be attributed to a label without ambiguity even after bilinear
//! resampling of a glyph.

use thiserror::Error;

use crate::geometry::{BBox, Label};
use crate::grammar::Grammar;
use crate::raster::{RasterError, RasterImage, Rgb};
use crate::seed::mix64;

/// Background channel values lie in `BACKGROUND_BASE ± BACKGROUND_AMPLITUDE`.
pub const BACKGROUND_BASE: u8 = 120;
pub const BACKGROUND_AMPLITUDE: u8 = 12;

/// A pixel belongs to a glyph color when every channel is within this distance.
pub const COLOR_TOLERANCE: u8 = 40;

const COLORS: [Rgb; 12] = [
    [230, 30, 30],
    [30, 200, 40],
    [30, 60, 230],
    [240, 240, 20],
    [220, 30, 220],
    [20, 210, 220],
    [250, 140, 10],
    [120, 20, 250],
    [255, 255, 255],
    [10, 10, 10],
    [20, 110, 20],
    [120, 10, 10],
];

#[derive(Debug, Error)]
#[error("grammar `{class}` has {count} labels; at most {max} glyph colors are available")]
pub struct PaletteError {
    pub class: String,
    pub count: usize,
    pub max: usize,
}

/// Label-to-color assignment for one grammar (by vocabulary position).
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    entries: Vec<(Label, Rgb)>,
}

impl Palette {
    pub fn for_grammar(grammar: &Grammar) -> Result<Self, PaletteError> {
        let vocab = grammar.vocabulary();
        if vocab.len() > COLORS.len() {
            return Err(PaletteError {
                class: grammar.class_name().to_owned(),
                count: vocab.len(),
                max: COLORS.len(),
            });
        }
        Ok(Self {
            entries: vocab.iter().cloned().zip(COLORS).collect(),
        })
    }

    pub fn color(&self, label: &Label) -> Option<Rgb> {
        self.entries.iter().find(|(l, _)| l == label).map(|(_, c)| *c)
    }

    pub fn entries(&self) -> &[(Label, Rgb)] {
        &self.entries
    }

    /// Index of the label whose color matches `px`, if any.
    pub fn classify(&self, px: Rgb) -> Option<usize> {
        self.entries.iter().position(|(_, c)| {
            c.iter()
                .zip(px)
                .all(|(&a, b)| a.abs_diff(b) <= COLOR_TOLERANCE)
        })
    }

    pub fn label(&self, index: usize) -> &Label {
        &self.entries[index].0
    }
}

/// Texture value at one pixel. Pure function of `(seed, x, y)`.
pub fn background_pixel(seed: u64, x: u32, y: u32) -> Rgb {
    let h = mix64(seed ^ (u64::from(y) << 32 | u64::from(x)));
    let span = u64::from(BACKGROUND_AMPLITUDE) * 2 + 1;
    let base = BACKGROUND_BASE - BACKGROUND_AMPLITUDE;
    [
        base + (h % span) as u8,
        base + ((h >> 16) % span) as u8,
        base + ((h >> 32) % span) as u8,
    ]
}

pub fn background(width: u32, height: u32, seed: u64) -> Result<RasterImage, RasterError> {
    let mut img = RasterImage::filled(width, height, [0, 0, 0])?;
    for y in 0..height {
        for x in 0..width {
            img.put(x, y, background_pixel(seed, x, y));
        }
    }
    Ok(img)
}

/// Solid rectangle glyph of `color` covering `bbox`.
pub fn draw_glyph(img: &mut RasterImage, bbox: &BBox, color: Rgb) {
    img.fill_box(bbox, color);
}

/// A standalone glyph image of the given size.
pub fn glyph_image(width: u32, height: u32, color: Rgb) -> Result<RasterImage, RasterError> {
    RasterImage::filled(width, height, color)
}
