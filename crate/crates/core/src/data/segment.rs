use super::{LineBox, ParagraphSample, TextLine};
use crate::error::{Error, Result};
use crate::layers::ImagePlane;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentConfig {
    /// Rows whose ink density is below `threshold` times the peak are gaps.
    pub threshold: f64,
    /// Bands shorter than this many rows are dropped.
    pub min_height: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { threshold: 0.05, min_height: 3 }
    }
}

impl SegmentConfig {
    pub fn scaled(scale: usize) -> Self {
        SegmentConfig { min_height: 3 * scale, ..Self::default() }
    }
}

/// Explicit line segmentation from the horizontal ink-density profile.
/// Ink is whatever is darker than the brightest pixel.
pub fn projection_segment(image: &ImagePlane, cfg: &SegmentConfig) -> Vec<LineBox> {
    let (h, w) = (image.height(), image.width());
    let paper = image.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ink = |y: usize, x: usize| paper - image.get(y, x, 0);
    let profile: Vec<f64> = (0..h).map(|y| (0..w).map(|x| ink(y, x)).sum()).collect();
    let peak = profile.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Vec::new();
    }
    let cut = cfg.threshold * peak;
    let mut boxes = Vec::new();
    let mut y = 0;
    while y < h {
        if profile[y] < cut {
            y += 1;
            continue;
        }
        let top = y;
        while y < h && profile[y] >= cut {
            y += 1;
        }
        let bottom = y - 1;
        if bottom - top + 1 < cfg.min_height {
            continue;
        }
        let cols: Vec<f64> = (0..w).map(|x| (top..=bottom).map(|yy| ink(yy, x)).sum()).collect();
        let col_peak = cols.iter().copied().fold(0.0, f64::max);
        let inked: Vec<usize> = (0..w).filter(|&x| cols[x] >= cfg.threshold * col_peak).collect();
        boxes.push(LineBox { top, bottom, left: inked[0], right: *inked.last().unwrap() });
    }
    boxes
}

/// Splits a paragraph into crops of `lines` consecutive text lines (a sliding
/// window, so an `n`-line paragraph yields `n - lines + 1` crops), each
/// spanning the full width and `margin` rows beyond its outer boxes.
/// Paragraphs with at most `lines` lines are returned whole.
pub fn line_crops(sample: &ParagraphSample, lines: usize, margin: usize) -> Result<Vec<ParagraphSample>> {
    if lines == 0 {
        return Err(Error::Config("line crops need at least one line".into()));
    }
    if sample.lines.len() <= lines {
        return Ok(vec![sample.clone()]);
    }
    let boxes = sample
        .boxes()
        .ok_or_else(|| Error::Config("cropping lines requires ground-truth boxes".into()))?;
    let mut out = Vec::new();
    for start in 0..=sample.lines.len() - lines {
        let window = &boxes[start..start + lines];
        let top = window[0].top.saturating_sub(margin);
        let bottom = window[lines - 1].bottom + margin;
        let image = sample.image.crop(top, bottom, 0, sample.image.width() - 1)?;
        let last = image.height() - 1;
        let crop_lines = sample.lines[start..start + lines]
            .iter()
            .zip(window)
            .map(|(l, b)| TextLine {
                text: l.text.clone(),
                bbox: Some(LineBox {
                    top: b.top.saturating_sub(top),
                    bottom: (b.bottom - top).min(last),
                    left: b.left,
                    right: b.right,
                }),
            })
            .collect();
        out.push(ParagraphSample { image, lines: crop_lines });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GenSpec, Span};

    fn bands(h: usize, w: usize, rows: &[std::ops::Range<usize>]) -> ImagePlane {
        let mut data = vec![255.0; h * w];
        for r in rows {
            for y in r.clone() {
                for x in 1..w - 1 {
                    data[y * w + x] = 0.0;
                }
            }
        }
        ImagePlane::gray(h, w, data).unwrap()
    }

    #[test]
    fn blank_image_has_no_lines() {
        assert!(projection_segment(&bands(10, 6, &[]), &SegmentConfig::default()).is_empty());
    }

    #[test]
    fn separated_bands_give_one_box_each() {
        let img = bands(20, 6, &[2..7, 10..16]);
        let b = projection_segment(&img, &SegmentConfig::default());
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].top, b[0].bottom, b[1].top, b[1].bottom), (2, 6, 10, 15));
        assert_eq!((b[0].left, b[0].right), (1, 4));
    }

    #[test]
    fn touching_bands_merge() {
        let img = bands(20, 6, &[2..8, 8..14]);
        assert_eq!(projection_segment(&img, &SegmentConfig::default()).len(), 1);
        let short = bands(20, 6, &[2..4, 10..16]);
        assert_eq!(projection_segment(&short, &SegmentConfig::default()).len(), 1);
    }

    #[test]
    fn recovers_line_count_on_separated_synthetic_pages() {
        let spec = GenSpec { noise: 0.0, jitter: Span::new(0, 1), lines: Span::new(1, 4), line_gap: Span::new(3, 8), ..GenSpec::default() };
        for s in generate_corpus(&spec, 100).unwrap() {
            let boxes = projection_segment(&s.image, &SegmentConfig::scaled(spec.scale));
            assert_eq!(boxes.len(), s.lines.len());
            for (b, l) in boxes.iter().zip(&s.lines) {
                let gt = l.bbox.unwrap();
                assert!(b.top >= gt.top && b.bottom <= gt.bottom && b.height() + 2 >= gt.height(), "{b:?} vs {gt:?}");
            }
        }
    }

    #[test]
    fn crops_slide_over_lines() {
        let s = &generate_corpus(&GenSpec { noise: 0.0, ..GenSpec::default() }, 1).unwrap()[0];
        let singles = line_crops(s, 1, 1).unwrap();
        assert_eq!(singles.len(), 3);
        for (c, l) in singles.iter().zip(&s.lines) {
            assert_eq!(c.lines.len(), 1);
            assert_eq!(c.lines[0].text, l.text);
            let b = c.lines[0].bbox.unwrap();
            assert_eq!((b.top, b.bottom + 2), (1, c.image.height()));
        }
        let pairs = line_crops(s, 2, 1).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].lines[1].text, s.lines[2].text);
        assert_eq!(line_crops(s, 3, 1).unwrap(), vec![s.clone()]);
    }
}
