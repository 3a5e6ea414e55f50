use std::fs;
use std::path::{Path, PathBuf};

use crate::collapse::AttentionMap;
use crate::data::{write_pgm, write_ppm, LineBox};
use crate::error::{Error, Result};
use crate::layers::ImagePlane;

const HUES: [[f64; 3]; 6] = [
    [230.0, 25.0, 75.0],
    [60.0, 180.0, 75.0],
    [0.0, 130.0, 200.0],
    [245.0, 130.0, 48.0],
    [145.0, 30.0, 180.0],
    [70.0, 240.0, 240.0],
];

/// Step `t` weights at image resolution by nearest-neighbour lookup of the
/// feature cell covering each pixel.
pub fn upsample_step(map: &AttentionMap, t: usize, height: usize, width: usize, cell: (usize, usize)) -> Vec<f64> {
    let (dh, dw) = cell;
    let w = map.step(t);
    let (mh, mw) = (map.height(), map.width());
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let j = (y / dh).min(mh - 1);
        for x in 0..width {
            out.push(w[j * mw + (x / dw).min(mw - 1)]);
        }
    }
    out
}

/// Writes `attention-step<t>.pgm` for every step (weights × 255) and an
/// `attention-overlay.ppm` tinting each pixel with the hue of its strongest
/// step. Returns the written paths, steps first.
pub fn export_attention(image: &ImagePlane, map: &AttentionMap, cell: (usize, usize), dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (image.height(), image.width());
    let steps: Vec<Vec<f64>> = (0..map.steps()).map(|t| upsample_step(map, t, h, w, cell)).collect();
    let mut paths = Vec::with_capacity(steps.len() + 1);
    for (t, s) in steps.iter().enumerate() {
        let path = dir.join(format!("attention-step{}.pgm", t + 1));
        write_pgm(&path, &ImagePlane::gray(h, w, s.iter().map(|v| v * 255.0).collect())?)?;
        paths.push(path);
    }
    let mut rgb = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        let (t, a) = steps
            .iter()
            .enumerate()
            .map(|(t, s)| (t, s[p]))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        let gray = image.data()[p * image.channels()];
        for c in HUES[t % HUES.len()] {
            rgb.push(gray * (1.0 - a) + c * a);
        }
    }
    let path = dir.join("attention-overlay.ppm");
    write_ppm(&path, &ImagePlane::new(h, w, 3, rgb)?)?;
    paths.push(path);
    Ok(paths)
}

/// Share of step `t` attention that falls inside `bbox`, over the columns the
/// box spans. Each cell's weight is spread evenly over the pixel rows it
/// covers, so a column holds unit mass.
pub fn attention_mass_in_box(map: &AttentionMap, t: usize, bbox: &LineBox, cell: (usize, usize)) -> f64 {
    let (dh, dw) = cell;
    let w = map.step(t);
    let (mh, mw) = (map.height(), map.width());
    let mut inside = 0.0;
    for x in bbox.left..=bbox.right {
        let i = (x / dw).min(mw - 1);
        for j in 0..mh {
            let (lo, hi) = (j * dh, (j + 1) * dh);
            let overlap = hi.min(bbox.bottom + 1).saturating_sub(lo.max(bbox.top));
            inside += w[j * mw + i] * overlap as f64 / dh as f64;
        }
    }
    inside / bbox.width() as f64
}
