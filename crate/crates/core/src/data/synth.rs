use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::font::{glyph, GLYPH_HEIGHT, GLYPH_WIDTH};
use super::{LineBox, ParagraphSample, TextLine, BACKGROUND};
use crate::error::{Error, Result};
use crate::layers::ImagePlane;

/// Inclusive integer range, written `min..max` or as a single value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span<T> {
    pub min: T,
    pub max: T,
}

impl<T: Copy + PartialOrd> Span<T> {
    pub fn new(min: T, max: T) -> Self {
        Span { min, max }
    }

    pub fn fixed(v: T) -> Self {
        Span { min: v, max: v }
    }

    pub fn is_empty(&self) -> bool {
        self.min > self.max
    }

    pub fn contains(&self, v: T) -> bool {
        self.min <= v && v <= self.max
    }
}

impl<T: FromStr> FromStr for Span<T> {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |p: &str| p.trim().parse::<T>().map_err(|_| format!("invalid range bound {p:?}"));
        match s.split_once("..") {
            Some((a, b)) => Ok(Span { min: parse(a)?, max: parse(b)? }),
            None => {
                let v = parse(s)?;
                Ok(Span { min: parse(s)?, max: v })
            }
        }
    }
}

impl<T: fmt::Display + PartialEq> fmt::Display for Span<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.min == self.max {
            write!(f, "{}", self.min)
        } else {
            write!(f, "{}..{}", self.min, self.max)
        }
    }
}

/// Parameters of the synthetic paragraph renderer. Pixel quantities are in
/// output pixels except `char_gap`, which is in font units.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub alphabet: String,
    pub lines: Span<usize>,
    pub chars_per_line: Span<usize>,
    pub scale: usize,
    /// Per-character vertical offset in pixels.
    pub jitter: Span<i64>,
    /// Blank rows between the ink of consecutive lines; zero or less makes
    /// the lines touch.
    pub line_gap: Span<i64>,
    /// Chance that one gap of a sample is redrawn from `-1..0`.
    pub touch_prob: f64,
    pub char_gap: usize,
    pub margin: usize,
    /// Uniform additive noise amplitude as a fraction of full scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            alphabet: "0123456789 ".into(),
            lines: Span::fixed(3),
            chars_per_line: Span::new(4, 8),
            scale: 2,
            jitter: Span::new(0, 1),
            line_gap: Span::new(3, 6),
            touch_prob: 0.0,
            char_gap: 2,
            margin: 4,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.lines.is_empty() || self.lines.min == 0 {
            return bad(format!("line count range {} must be non-empty and positive", self.lines));
        }
        if self.chars_per_line.is_empty() || self.chars_per_line.min == 0 {
            return bad(format!("characters per line {} must be non-empty and positive", self.chars_per_line));
        }
        if self.jitter.is_empty() || self.line_gap.is_empty() {
            return bad("jitter and line gap ranges must be non-empty".into());
        }
        if self.scale == 0 {
            return bad("scale must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.touch_prob) {
            return bad("noise and touch probability must lie in [0, 1]".into());
        }
        if let Some(c) = self.alphabet.chars().find(|&c| glyph(c).is_none()) {
            return bad(format!("no glyph for {c:?}"));
        }
        if self.writable().is_empty() {
            return bad("alphabet has no printable symbol".into());
        }
        Ok(())
    }

    fn writable(&self) -> Vec<char> {
        self.alphabet.chars().filter(|&c| c != ' ').collect()
    }
}

struct RenderedLine {
    text: String,
    width: usize,
    height: usize,
    ink: Vec<bool>,
    // tight ink bounds inside the line canvas
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
}

fn render_line(spec: &GenSpec, symbols: &[char], rng: &mut ChaCha8Rng) -> RenderedLine {
    let s = spec.scale;
    let n = rng.gen_range(spec.chars_per_line.min..=spec.chars_per_line.max);
    let text: String = (0..n).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect();
    let offsets: Vec<i64> = (0..n).map(|_| rng.gen_range(spec.jitter.min..=spec.jitter.max)).collect();
    let advance = (GLYPH_WIDTH + spec.char_gap) * s;
    let width = n * GLYPH_WIDTH * s + (n - 1) * spec.char_gap * s;
    let height = GLYPH_HEIGHT * s + (spec.jitter.max - spec.jitter.min) as usize;
    let mut ink = vec![false; width * height];
    for (k, c) in text.chars().enumerate() {
        let g = glyph(c).expect("validated alphabet");
        let y0 = (offsets[k] - spec.jitter.min) as usize;
        for gy in 0..GLYPH_HEIGHT * s {
            for gx in 0..GLYPH_WIDTH * s {
                if g.ink(gy / s, gx / s) {
                    ink[(y0 + gy) * width + k * advance + gx] = true;
                }
            }
        }
    }
    let rows: Vec<usize> = (0..height).filter(|&y| ink[y * width..(y + 1) * width].contains(&true)).collect();
    let cols: Vec<usize> = (0..width).filter(|&x| (0..height).any(|y| ink[y * width + x])).collect();
    RenderedLine {
        text,
        width,
        height,
        ink,
        top: rows[0],
        bottom: *rows.last().unwrap(),
        left: cols[0],
        right: *cols.last().unwrap(),
    }
}

/// Renders one paragraph, fully determined by `spec` (including its seed).
pub fn generate_paragraph(spec: &GenSpec) -> Result<ParagraphSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let symbols = spec.writable();
    let count = rng.gen_range(spec.lines.min..=spec.lines.max);
    let rendered: Vec<RenderedLine> = (0..count).map(|_| render_line(spec, &symbols, &mut rng)).collect();
    let mut gaps: Vec<i64> = (1..count).map(|_| rng.gen_range(spec.line_gap.min..=spec.line_gap.max)).collect();
    if count > 1 && rng.gen_bool(spec.touch_prob) {
        let k = rng.gen_range(0..gaps.len());
        gaps[k] = rng.gen_range(-1..=0);
    }

    // place each line so its ink starts `gap` rows below the previous ink
    let m = spec.margin;
    let mut boxes = Vec::with_capacity(count);
    let mut origins = Vec::with_capacity(count);
    for (i, line) in rendered.iter().enumerate() {
        let ink_top = match boxes.last() {
            None => m as i64,
            Some(prev) => {
                let prev: &LineBox = prev;
                (prev.bottom as i64 + 1 + gaps[i - 1]).max(prev.top as i64 + 1)
            }
        };
        let origin = ink_top - line.top as i64;
        origins.push(origin);
        boxes.push(LineBox {
            top: ink_top as usize,
            bottom: (ink_top + (line.bottom - line.top) as i64) as usize,
            left: m + line.left,
            right: m + line.right,
        });
    }
    let width = 2 * m + rendered.iter().map(|l| l.width).max().unwrap_or(0);
    let height = boxes.iter().map(|b| b.bottom).max().unwrap_or(0) + 1 + m;
    let mut pixels = vec![BACKGROUND; width * height];
    for (line, &origin) in rendered.iter().zip(&origins) {
        for y in 0..line.height {
            let py = origin + y as i64;
            if py < 0 || py as usize >= height {
                continue;
            }
            for x in 0..line.width {
                if line.ink[y * line.width + x] {
                    pixels[py as usize * width + m + x] = 0.0;
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let amp = spec.noise * BACKGROUND;
        for p in &mut pixels {
            *p = (*p + rng.gen_range(-amp..=amp)).clamp(0.0, BACKGROUND).round();
        }
    }
    let lines = rendered
        .into_iter()
        .zip(boxes)
        .map(|(l, b)| TextLine { text: l.text, bbox: Some(b) })
        .collect();
    Ok(ParagraphSample { image: ImagePlane::gray(height, width, pixels)?, lines })
}

/// `count` paragraphs; sample `i` uses seed `spec.seed + i`.
pub fn generate_corpus(spec: &GenSpec, count: usize) -> Result<Vec<ParagraphSample>> {
    (0..count)
        .map(|i| generate_paragraph(&GenSpec { seed: spec.seed.wrapping_add(i as u64), ..spec.clone() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> GenSpec {
        GenSpec { noise: 0.0, jitter: Span::fixed(0), ..GenSpec::default() }
    }

    #[test]
    fn single_glyph_sample_is_the_glyph() {
        let spec = GenSpec {
            alphabet: "7".into(),
            lines: Span::fixed(1),
            chars_per_line: Span::fixed(1),
            scale: 1,
            margin: 0,
            ..clean()
        };
        let s = generate_paragraph(&spec).unwrap();
        assert_eq!((s.image.height(), s.image.width()), (7, 5));
        let g = glyph('7').unwrap();
        for y in 0..7 {
            for x in 0..5 {
                assert_eq!(s.image.get(y, x, 0) == 0.0, g.ink(y, x));
            }
        }
        assert_eq!(s.lines[0].text, "7");
        assert_eq!(s.lines[0].bbox, Some(LineBox { top: 0, bottom: 6, left: 0, right: 4 }));
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = GenSpec { seed: 9, ..GenSpec::default() };
        assert_eq!(generate_paragraph(&spec).unwrap(), generate_paragraph(&spec).unwrap());
        let other = GenSpec { seed: 10, ..spec.clone() };
        assert_ne!(generate_paragraph(&spec).unwrap().image, generate_paragraph(&other).unwrap().image);
    }

    #[test]
    fn boxes_bound_ink_exactly() {
        let spec = GenSpec { jitter: Span::new(-1, 2), line_gap: Span::new(-1, 4), ..clean() };
        for s in generate_corpus(&spec, 40).unwrap() {
            let boxes = s.boxes().unwrap();
            for w in boxes.windows(2) {
                assert!(w[0].top < w[1].top && w[0].top <= w[0].bottom);
            }
            let (h, wd) = (s.image.height(), s.image.width());
            for y in 0..h {
                for x in 0..wd {
                    if s.image.get(y, x, 0) == 0.0 {
                        assert!(boxes.iter().any(|b| (b.top..=b.bottom).contains(&y) && (b.left..=b.right).contains(&x)));
                    }
                }
            }
            for b in &boxes {
                for (y, x) in [(b.top, None), (b.bottom, None), (usize::MAX, Some(b.left)), (usize::MAX, Some(b.right))] {
                    let hit = match x {
                        None => (b.left..=b.right).any(|x| s.image.get(y, x, 0) == 0.0),
                        Some(x) => (b.top..=b.bottom).any(|y| s.image.get(y, x, 0) == 0.0),
                    };
                    assert!(hit, "box edge without ink: {b:?}");
                }
            }
        }
    }

    #[test]
    fn non_positive_gaps_make_touching_lines() {
        let spec = GenSpec { line_gap: Span::new(-1, 0), ..GenSpec::default() };
        let touching = generate_corpus(&spec, 100)
            .unwrap()
            .iter()
            .filter(|s| s.boxes().unwrap().windows(2).any(|w| w[1].top <= w[0].bottom + 1))
            .count();
        assert!(touching >= 1);
    }

    #[test]
    fn spans_parse() {
        assert_eq!("4..8".parse::<Span<usize>>().unwrap(), Span::new(4, 8));
        assert_eq!("-1..0".parse::<Span<i64>>().unwrap(), Span::new(-1, 0));
        assert_eq!("3".parse::<Span<usize>>().unwrap(), Span::fixed(3));
        assert!("a..b".parse::<Span<usize>>().is_err());
        assert_eq!(Span::new(-1i64, 0).to_string(), "-1..0");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_paragraph(&GenSpec { scale: 0, ..GenSpec::default() }).is_err());
        assert!(generate_paragraph(&GenSpec { alphabet: "ab".into(), ..GenSpec::default() }).is_err());
        assert!(generate_paragraph(&GenSpec { lines: Span::new(3, 2), ..GenSpec::default() }).is_err());
    }
}
