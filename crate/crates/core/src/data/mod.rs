//! Synthetic paragraphs, the on-disk dataset format, input normalization and
//! the projection-profile line segmenter.

mod font;
mod io;
mod segment;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use font::{glyph, glyphs, FontGlyph, GLYPH_HEIGHT, GLYPH_WIDTH};
pub use io::{load_dataset, read_pgm, save_dataset, write_pgm, write_ppm, SampleFiles};
pub use segment::{line_crops, projection_segment, SegmentConfig};
pub use synth::{generate_corpus, generate_paragraph, GenSpec, Span};

use crate::ctc::LabelSeq;
use crate::error::{Error, Result};
use crate::layers::ImagePlane;

/// Intensity of unmarked paper in stored images.
pub const BACKGROUND: f64 = 255.0;

/// Ordered symbol set; label `k` is the `k`-th symbol and the CTC blank is
/// `len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("alphabet lists {c:?} twice")));
            }
        }
        Ok(Alphabet { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn contains(&self, c: char) -> bool {
        self.symbols.contains(&c)
    }

    pub fn index(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    /// `source` names the origin of `text` in errors.
    pub fn encode(&self, text: &str, source: &Path) -> Result<LabelSeq> {
        let labels = text
            .chars()
            .map(|c| self.index(c).ok_or_else(|| Error::UnknownSymbol { path: source.to_path_buf(), symbol: c }))
            .collect::<Result<Vec<_>>>()?;
        LabelSeq::new(labels, self.len())
    }

    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| self.symbols.get(l)).collect()
    }
}

impl std::fmt::Display for Alphabet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.symbols.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

/// How line transcripts combine into one paragraph target.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineJoin {
    #[default]
    Space,
    Nothing,
}

impl LineJoin {
    pub fn join<S: AsRef<str>>(self, lines: &[S]) -> String {
        let sep = match self {
            LineJoin::Space => " ",
            LineJoin::Nothing => "",
        };
        lines.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(sep)
    }
}

/// Inclusive pixel bounds of one text line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineBox {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl LineBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextLine {
    pub text: String,
    pub bbox: Option<LineBox>,
}

/// A grayscale page with dark ink on a light background, in raw 0–255
/// intensities, and its line transcripts top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphSample {
    pub image: ImagePlane,
    pub lines: Vec<TextLine>,
}

impl ParagraphSample {
    pub fn transcript(&self, join: LineJoin) -> String {
        let texts: Vec<&str> = self.lines.iter().map(|l| l.text.as_str()).collect();
        join.join(&texts)
    }

    pub fn boxes(&self) -> Option<Vec<LineBox>> {
        self.lines.iter().map(|l| l.bbox).collect()
    }
}

/// Zero mean, unit variance; a constant image maps to zeros.
pub fn normalize(image: &ImagePlane) -> ImagePlane {
    let v = image.data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let div = if std < 1e-8 { 1.0 } else { std };
    let mut out = image.clone();
    out.data_mut().iter_mut().for_each(|x| *x = (*x - mean) / div);
    out
}
