//! Training-example synthesis: procedural backgrounds, styled source text,
//! centred target text and the supervision layers built from them.

use rand::Rng as _;

use super::corpus::{Lang, ParallelPair};
use super::font;
use super::render::{self, fit_font_size, FontSpec, FontStyle, RenderError};
use crate::image::Image;
use crate::rng::{self, Rng};

pub const CANVAS_HEIGHT: usize = 32;
pub const CANVAS_WIDTH: usize = 512;
pub const CANVAS_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Solid,
    Gradient,
    Stripes,
    Noise,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 4] = [
        BackgroundKind::Solid,
        BackgroundKind::Gradient,
        BackgroundKind::Stripes,
        BackgroundKind::Noise,
    ];
}

/// Colour pair for a background plus a legible ink. Light backgrounds get
/// dark ink and vice versa.
#[derive(Clone, Copy, Debug)]
struct Palette {
    a: [f32; 3],
    b: [f32; 3],
    ink: [f32; 3],
}

fn quantized(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn color_in(rng: &mut Rng, lo: f32, hi: f32) -> [f32; 3] {
    std::array::from_fn(|_| quantized(rng.random_range(lo..hi)))
}

fn palette(rng: &mut Rng) -> Palette {
    if rng.random_bool(0.5) {
        Palette {
            a: color_in(rng, 0.6, 1.0),
            b: color_in(rng, 0.6, 1.0),
            ink: color_in(rng, 0.0, 0.3),
        }
    } else {
        Palette {
            a: color_in(rng, 0.0, 0.4),
            b: color_in(rng, 0.0, 0.4),
            ink: color_in(rng, 0.75, 1.0),
        }
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

fn background(kind: BackgroundKind, pal: &Palette, h: usize, w: usize, rng: &mut Rng) -> Image {
    let mut img = Image::filled(h, w, &pal.a);
    match kind {
        BackgroundKind::Solid => {}
        BackgroundKind::Gradient => {
            let vertical = rng.random_bool(0.3);
            for y in 0..h {
                for x in 0..w {
                    let t = if vertical {
                        y as f32 / (h - 1).max(1) as f32
                    } else {
                        x as f32 / (w - 1).max(1) as f32
                    };
                    img.pixel_mut(y, x).copy_from_slice(&mix(pal.a, pal.b, t));
                }
            }
        }
        BackgroundKind::Stripes => {
            let period = rng.random_range(6..24usize);
            let slope = rng.random_range(0..3usize);
            for y in 0..h {
                for x in 0..w {
                    let band = (x + slope * y) / period % 2;
                    let c = if band == 0 { pal.a } else { pal.b };
                    img.pixel_mut(y, x).copy_from_slice(&c);
                }
            }
        }
        BackgroundKind::Noise => {
            let cell = rng.random_range(4..12usize);
            let (gh, gw) = (h / cell + 2, w / cell + 2);
            let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
            let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
            for y in 0..h {
                for x in 0..w {
                    let (cy, cx) = (y / cell, x / cell);
                    let ty = smooth((y % cell) as f32 / cell as f32);
                    let tx = smooth((x % cell) as f32 / cell as f32);
                    let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
                    let top = at(cy, cx) + (at(cy, cx + 1) - at(cy, cx)) * tx;
                    let bottom = at(cy + 1, cx) + (at(cy + 1, cx + 1) - at(cy + 1, cx)) * tx;
                    img.pixel_mut(y, x).copy_from_slice(&mix(pal.a, pal.b, top + (bottom - top) * ty));
                }
            }
        }
    }
    img.quantize_8bit();
    img
}

/// Placement of one rendered line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub font: FontSpec,
    pub x0: usize,
    pub y0: usize,
}

impl Placement {
    /// Pixel box `(x0, y0, width, height)` covered by the `i`-th character.
    pub fn cell(&self, i: usize) -> (usize, usize, usize, usize) {
        let a = self.font.advance();
        (self.x0 + i * a, self.y0, a, self.font.line_height())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub src_image: Image,
    pub background: Image,
    pub tgt_image: Image,
    /// Target glyphs in black on white.
    pub tgt_text_image: Image,
    pub src_text: String,
    pub tgt_text: String,
    pub lang: Lang,
    pub seed: u64,
}

/// A synthesized example together with how it was drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub example: TrainingExample,
    pub background_kind: BackgroundKind,
    pub source: Placement,
    pub target: Placement,
}

fn centred(text: &str, font: FontSpec) -> Placement {
    Placement {
        font,
        x0: (CANVAS_WIDTH - font.line_width(text)) / 2,
        y0: (CANVAS_HEIGHT - font.line_height()) / 2,
    }
}

/// Draws one example on the standard 32x512 canvas. Everything random is
/// drawn from a stream seeded by `seed` alone.
pub fn make_example(src_text: &str, tgt_text: &str, lang: Lang, seed: u64) -> Result<Rendered, RenderError> {
    for t in [src_text, tgt_text] {
        if let Some(c) = font::first_uncovered(t) {
            return Err(RenderError::Charset(c));
        }
    }
    let src_max = fit_font_size(src_text, CANVAS_WIDTH)?;
    let tgt_scale = fit_font_size(tgt_text, CANVAS_WIDTH)?;

    let mut rng = rng::rng_for(seed, "example");
    let kind = BackgroundKind::ALL[rng.random_range(0..BackgroundKind::ALL.len())];
    let pal = palette(&mut rng);
    let back = background(kind, &pal, CANVAS_HEIGHT, CANVAS_WIDTH, &mut rng);

    let src_font = FontSpec {
        scale: rng.random_range(src_max.saturating_sub(1).max(1)..=src_max),
        style: FontStyle::ALL[rng.random_range(0..FontStyle::ALL.len())],
        ink: pal.ink,
    };
    let source = Placement {
        font: src_font,
        x0: rng.random_range(0..=CANVAS_WIDTH - src_font.line_width(src_text)),
        y0: rng.random_range(0..=CANVAS_HEIGHT - src_font.line_height()),
    };
    let target = centred(tgt_text, FontSpec::regular(tgt_scale, pal.ink));

    let src_image = render::render_text_line(src_text, &source.font, &back, source.x0, source.y0)?;
    let tgt_image = render::render_text_line(tgt_text, &target.font, &back, target.x0, target.y0)?;
    let white = Image::filled(CANVAS_HEIGHT, CANVAS_WIDTH, &[1.0; CANVAS_CHANNELS]);
    let black_font = FontSpec::regular(tgt_scale, [0.0; 3]);
    let tgt_text_image = render::render_text_line(tgt_text, &black_font, &white, target.x0, target.y0)?;

    Ok(Rendered {
        example: TrainingExample {
            src_image,
            background: back,
            tgt_image,
            tgt_text_image,
            src_text: src_text.to_string(),
            tgt_text: tgt_text.to_string(),
            lang,
            seed,
        },
        background_kind: kind,
        source,
        target,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RejectReason {
    EmptyText,
    Overflow,
    Charset(char),
    /// Some visible target character left no ink, or ink landed outside
    /// the target line.
    Incomplete,
    Canvas,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Checks that both texts are renderable and that the target layers show
/// the whole target line and nothing else.
pub fn filter_example(e: &TrainingExample) -> Verdict {
    use RejectReason::*;
    if e.src_text.trim().is_empty() || e.tgt_text.trim().is_empty() {
        return Verdict::Reject(EmptyText);
    }
    for t in [&e.src_text, &e.tgt_text] {
        if let Some(c) = font::first_uncovered(t) {
            return Verdict::Reject(Charset(c));
        }
    }
    let (Ok(_), Ok(scale)) = (
        fit_font_size(&e.src_text, CANVAS_WIDTH),
        fit_font_size(&e.tgt_text, CANVAS_WIDTH),
    ) else {
        return Verdict::Reject(Overflow);
    };
    let layers = [&e.src_image, &e.background, &e.tgt_image, &e.tgt_text_image];
    if layers
        .iter()
        .any(|l| l.check_canvas(CANVAS_HEIGHT, CANVAS_WIDTH, CANVAS_CHANNELS).is_err())
    {
        return Verdict::Reject(Canvas);
    }
    let target = centred(&e.tgt_text, FontSpec::regular(scale, [0.0; 3]));
    let (bx, by, bw, bh) = (target.x0, target.y0, target.font.line_width(&e.tgt_text), target.font.line_height());
    let inside = |y: usize, x: usize| x >= bx && x < bx + bw && y >= by && y < by + bh;
    for y in 0..CANVAS_HEIGHT {
        for x in 0..CANVAS_WIDTH {
            let composed = e.tgt_image.pixel(y, x) != e.background.pixel(y, x);
            let inked = e.tgt_text_image.pixel(y, x) != [1.0; CANVAS_CHANNELS];
            if (composed || inked) && !inside(y, x) {
                return Verdict::Reject(Incomplete);
            }
        }
    }
    for (i, c) in e.tgt_text.chars().enumerate() {
        if c.is_whitespace() {
            continue;
        }
        let (cx, cy, cw, ch) = target.cell(i);
        let mut drawn = false;
        let mut visible = false;
        for y in cy..cy + ch {
            for x in cx..cx + cw {
                drawn |= e.tgt_text_image.pixel(y, x) != [1.0; CANVAS_CHANNELS];
                visible |= e.tgt_image.pixel(y, x) != e.background.pixel(y, x);
            }
        }
        if !drawn || !visible {
            return Verdict::Reject(Incomplete);
        }
    }
    Verdict::Accept
}

/// `count` examples cycling through `pairs`; example `i` is seeded by
/// `item_seed(seed, i)`, so any subset can be regenerated independently.
pub fn synthesize(pairs: &[ParallelPair], count: usize, seed: u64) -> Result<Vec<TrainingExample>, RenderError> {
    (0..count)
        .map(|i| synthesize_one(pairs, i, seed))
        .collect()
}

pub fn synthesize_one(pairs: &[ParallelPair], index: usize, seed: u64) -> Result<TrainingExample, RenderError> {
    let p = &pairs[index % pairs.len()];
    make_example(&p.src, &p.tgt, p.lang, rng::item_seed(seed, index as u64)).map(|r| r.example)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_is_reproducible_from_its_seed() {
        let a = make_example("good morning", "guten Morgen", Lang::De, 11).unwrap();
        let b = make_example("good morning", "guten Morgen", Lang::De, 11).unwrap();
        let c = make_example("good morning", "guten Morgen", Lang::De, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.example.src_image, c.example.src_image);
    }

    #[test]
    fn target_differs_from_background_only_inside_glyph_cells() {
        for seed in 0..20 {
            let r = make_example("where is the station?", "où est la gare ?", Lang::Fr, seed).unwrap();
            let e = &r.example;
            let n = e.tgt_text.chars().count();
            let in_cell = |y: usize, x: usize| (0..n).any(|i| {
                let (cx, cy, cw, ch) = r.target.cell(i);
                x >= cx && x < cx + cw && y >= cy && y < cy + ch
            });
            for y in 0..CANVAS_HEIGHT {
                for x in 0..CANVAS_WIDTH {
                    if e.tgt_image.pixel(y, x) != e.background.pixel(y, x) {
                        assert!(in_cell(y, x), "seed {seed} pixel ({y},{x})");
                    }
                }
            }
            assert_eq!(filter_example(e), Verdict::Accept);
        }
    }

    #[test]
    fn every_background_kind_appears_and_stays_in_range() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..60 {
            let r = make_example("stop", "halt", Lang::De, seed).unwrap();
            seen.insert(format!("{:?}", r.background_kind));
            assert!(r.example.background.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn filter_rejections() {
        let ok = make_example("stop", "halt", Lang::De, 1).unwrap().example;
        let long = TrainingExample {
            tgt_text: "x".repeat(65),
            ..ok.clone()
        };
        assert_eq!(filter_example(&long), Verdict::Reject(RejectReason::Overflow));
        let empty = TrainingExample {
            tgt_text: " ".into(),
            ..ok.clone()
        };
        assert_eq!(filter_example(&empty), Verdict::Reject(RejectReason::EmptyText));
        let foreign = TrainingExample {
            tgt_text: "\u{4e2d}".into(),
            ..ok.clone()
        };
        assert_eq!(filter_example(&foreign), Verdict::Reject(RejectReason::Charset('\u{4e2d}')));
        let blank = TrainingExample {
            tgt_image: ok.background.clone(),
            ..ok.clone()
        };
        assert_eq!(filter_example(&blank), Verdict::Reject(RejectReason::Incomplete));
        assert_eq!(filter_example(&ok), Verdict::Accept);
        assert!(matches!(
            make_example("a", &"x".repeat(65), Lang::De, 0),
            Err(RenderError::TooLong { .. })
        ));
    }

    #[test]
    fn parallel_order_does_not_matter() {
        let pairs = crate::data::corpus::bundled_pairs();
        let all = synthesize(&pairs, 12, 5).unwrap();
        for i in [11, 3, 7] {
            assert_eq!(synthesize_one(&pairs, i, 5).unwrap(), all[i]);
        }
    }
}
