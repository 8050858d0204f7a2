//! 5x8 bitmap glyph atlas assembled from the ISO 8859 variants of the
//! `embedded-graphics` mono font, so Latin, Central European, Romanian and
//! Cyrillic text all share one base face.

use std::collections::HashMap;
use std::sync::OnceLock;

use embedded_graphics::image::GetPixel;
use embedded_graphics::mono_font::{iso_8859_1, iso_8859_16, iso_8859_2, iso_8859_5, MonoFont};
use embedded_graphics::pixelcolor::BinaryColor;
use embedded_graphics::prelude::Point;

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 8;

/// One glyph; bit `x` of `rows[y]` is set where ink is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub rows: [u8; GLYPH_HEIGHT],
}

impl Glyph {
    pub fn ink(&self, x: usize, y: usize) -> bool {
        x < GLYPH_WIDTH && y < GLYPH_HEIGHT && self.rows[y] >> x & 1 == 1
    }
}

const ATLAS_COLUMNS: i32 = 16;

fn read_glyph(font: &MonoFont<'_>, index: usize) -> Glyph {
    let (col, row) = (index as i32 % ATLAS_COLUMNS, index as i32 / ATLAS_COLUMNS);
    let (x0, y0) = (col * GLYPH_WIDTH as i32, row * GLYPH_HEIGHT as i32);
    let mut rows = [0u8; GLYPH_HEIGHT];
    for (y, bits) in rows.iter_mut().enumerate() {
        for x in 0..GLYPH_WIDTH {
            let p = Point::new(x0 + x as i32, y0 + y as i32);
            if font.image.pixel(p) == Some(BinaryColor::On) {
                *bits |= 1 << x;
            }
        }
    }
    Glyph { rows }
}

fn atlas() -> &'static HashMap<char, Glyph> {
    static ATLAS: OnceLock<HashMap<char, Glyph>> = OnceLock::new();
    ATLAS.get_or_init(|| {
        use embedded_graphics::mono_font::mapping;
        let faces: [(&MonoFont<'_>, &mapping::StrGlyphMapping<'_>); 4] = [
            (&iso_8859_1::FONT_5X8, &mapping::ISO_8859_1),
            (&iso_8859_2::FONT_5X8, &mapping::ISO_8859_2),
            (&iso_8859_16::FONT_5X8, &mapping::ISO_8859_16),
            (&iso_8859_5::FONT_5X8, &mapping::ISO_8859_5),
        ];
        let mut map = HashMap::new();
        map.insert(' ', Glyph { rows: [0; GLYPH_HEIGHT] });
        for (font, covered) in faces {
            for cp in 0x21u32..0x500 {
                let Some(c) = char::from_u32(cp) else { continue };
                if map.contains_key(&c) || !covered.contains(c) {
                    continue;
                }
                map.insert(c, read_glyph(font, font.glyph_mapping.index(c)));
            }
        }
        map
    })
}

pub fn glyph(c: char) -> Option<&'static Glyph> {
    atlas().get(&c)
}

pub fn covers(c: char) -> bool {
    atlas().contains_key(&c)
}

/// First character of `text` without a glyph.
pub fn first_uncovered(text: &str) -> Option<char> {
    text.chars().find(|&c| !covers(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn picture(c: char) -> Vec<String> {
        let g = glyph(c).unwrap();
        (0..GLYPH_HEIGHT)
            .map(|y| (0..GLYPH_WIDTH).map(|x| if g.ink(x, y) { '#' } else { '.' }).collect())
            .collect()
    }

    #[test]
    fn capital_a_has_the_expected_shape() {
        let rows = picture('A');
        let want = [".....", ".##..", "#..#.", "#..#.", "####.", "#..#.", "#..#.", "....."];
        assert_eq!(rows, want);
    }

    #[test]
    fn covers_all_target_scripts() {
        for c in "Grüße ça ř ů ș ț ă î Привет ёЁ".chars() {
            assert!(covers(c), "{c}");
        }
        assert!(!covers('\u{4e2d}'));
        assert!(glyph(' ').unwrap().rows.iter().all(|&r| r == 0));
    }

    #[test]
    fn distinct_letters_have_distinct_bitmaps() {
        assert_ne!(glyph('a'), glyph('b'));
        assert_ne!(glyph('е'), glyph('ё'));
        assert!(glyph('Ж').unwrap().rows.iter().any(|&r| r != 0));
    }
}
