use super::{FeatureMap, ImagePlane};
use crate::error::{Error, Result};

/// Groups non-overlapping `th×tw` pixel blocks into feature vectors.
///
/// The image is zero-padded at the bottom and right to a multiple of the tile
/// size; each output vector concatenates its block in row-major `(dy, dx, c)`
/// order, giving `th·tw·C` channels.
pub fn tile(image: &ImagePlane, th: usize, tw: usize) -> Result<FeatureMap> {
    if th == 0 || tw == 0 {
        return Err(Error::dim("tile", format!("tile extents must be positive, got {th}x{tw}")));
    }
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let (oh, ow) = (h.div_ceil(th), w.div_ceil(tw));
    let depth = th * tw * c;
    let mut data = Vec::with_capacity(oh * ow * depth);
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..th {
                for dx in 0..tw {
                    let (y, x) = (oy * th + dy, ox * tw + dx);
                    for ch in 0..c {
                        data.push(if y < h && x < w { image.get(y, x, ch) } else { 0.0 });
                    }
                }
            }
        }
    }
    FeatureMap::new(oh, ow, depth, data)
}
