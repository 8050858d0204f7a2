//! Bitmap text rendering onto image canvases.

use super::font::{self, GLYPH_HEIGHT, GLYPH_WIDTH};
use crate::image::Image;

/// Largest glyph scale; a scale-4 line is exactly as tall as a 32 px canvas.
pub const MAX_SCALE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error("text box {w}x{h} at ({x0}, {y0}) leaves the {canvas_w}x{canvas_h} canvas")]
    Overflow {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        canvas_w: usize,
        canvas_h: usize,
    },
    #[error("{chars} characters do not fit in {width} px even at scale 1")]
    TooLong { chars: usize, width: usize },
    #[error("no glyph for {0:?}")]
    Charset(char),
    #[error("scale must be in 1..={MAX_SCALE}, got {0}")]
    Scale(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FontStyle {
    Regular,
    /// Every stroke widened by one pixel to the right.
    Bold,
    /// Rows sheared right by one pixel for every four rows above the baseline.
    Italic,
    /// Only the boundary pixels of each stroke.
    Outline,
}

impl FontStyle {
    pub const ALL: [FontStyle; 4] = [FontStyle::Regular, FontStyle::Bold, FontStyle::Italic, FontStyle::Outline];
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FontSpec {
    pub scale: usize,
    pub style: FontStyle,
    pub ink: [f32; 3],
}

impl FontSpec {
    pub fn regular(scale: usize, ink: [f32; 3]) -> Self {
        FontSpec {
            scale,
            style: FontStyle::Regular,
            ink,
        }
    }

    /// Horizontal pitch: a `6·scale` cell plus a `2·scale` gap.
    pub fn advance(&self) -> usize {
        advance(self.scale)
    }

    pub fn line_height(&self) -> usize {
        GLYPH_HEIGHT * self.scale
    }

    pub fn line_width(&self, text: &str) -> usize {
        text.chars().count() * self.advance()
    }
}

pub fn advance(scale: usize) -> usize {
    8 * scale
}

/// Largest scale (at most [`MAX_SCALE`]) whose line fits `usable_width`.
pub fn fit_font_size(text: &str, usable_width: usize) -> Result<usize, RenderError> {
    let chars = text.chars().count();
    (1..=MAX_SCALE)
        .rev()
        .find(|&s| chars * advance(s) <= usable_width)
        .ok_or(RenderError::TooLong {
            chars,
            width: usable_width,
        })
}

/// Ink coverage of one character in its `advance x line_height` cell,
/// row-major.
pub fn cell_mask(c: char, spec: &FontSpec) -> Result<Vec<bool>, RenderError> {
    let g = font::glyph(c).ok_or(RenderError::Charset(c))?;
    let s = spec.scale;
    let (w, h) = (spec.advance(), spec.line_height());
    let base = |x: isize, y: isize| -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < GLYPH_WIDTH * s
            && (y as usize) < h
            && g.ink(x as usize / s, y as usize / s)
    };
    let mut mask = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            mask[y as usize * w + x as usize] = match spec.style {
                FontStyle::Regular => base(x, y),
                FontStyle::Bold => base(x, y) || base(x - 1, y),
                FontStyle::Italic => base(x - (h as isize - 1 - y) / 4, y),
                FontStyle::Outline => {
                    base(x, y) && !(base(x - 1, y) && base(x + 1, y) && base(x, y - 1) && base(x, y + 1))
                }
            };
        }
    }
    Ok(mask)
}

/// Composites `text` onto a copy of `canvas` with its top-left corner at
/// `(x0, y0)`. The whole line box must lie inside the canvas.
pub fn render_text_line(
    text: &str,
    spec: &FontSpec,
    canvas: &Image,
    x0: usize,
    y0: usize,
) -> Result<Image, RenderError> {
    if !(1..=MAX_SCALE).contains(&spec.scale) {
        return Err(RenderError::Scale(spec.scale));
    }
    let (w, h) = (spec.line_width(text), spec.line_height());
    if text.is_empty() {
        return Ok(canvas.clone());
    }
    if x0 + w > canvas.width() || y0 + h > canvas.height() {
        return Err(RenderError::Overflow {
            x0,
            y0,
            w,
            h,
            canvas_w: canvas.width(),
            canvas_h: canvas.height(),
        });
    }
    let mut out = canvas.clone();
    let cell_w = spec.advance();
    for (i, c) in text.chars().enumerate() {
        let mask = cell_mask(c, spec)?;
        for y in 0..h {
            for x in 0..cell_w {
                if mask[y * cell_w + x] {
                    let px = out.pixel_mut(y0 + y, x0 + i * cell_w + x);
                    for (v, &ink) in px.iter_mut().zip(&spec.ink) {
                        *v = ink;
                    }
                }
            }
        }
    }
    Ok(out)
}
