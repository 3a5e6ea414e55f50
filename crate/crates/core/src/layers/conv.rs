use rand::Rng;

use super::{check_finite, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::kernels::{add_assign, matvec_acc, matvec_t_acc, outer_acc};
use crate::tensor::{GradStore, ParamId, ParamStore};

/// Strided convolution with stride equal to the kernel, applied to the four
/// direction maps of an MDLSTM block with one kernel per direction. The four
/// responses are summed, biased and squashed with tanh.
///
/// Weights are stored as `[dir][ky][kx][channel] × filters`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub depth: usize,
    pub kernel_width: usize,
    pub kernel_height: usize,
    pub filters: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    in_height: usize,
    in_width: usize,
    inputs: Vec<FeatureMap>,
    out: FeatureMap,
}

impl ConvCache {
    pub fn output(&self) -> &FeatureMap {
        &self.out
    }
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        depth: usize,
        kernel_width: usize,
        kernel_height: usize,
        filters: usize,
        rng: &mut R,
    ) -> Self {
        let patch = 4 * kernel_height * kernel_width * depth;
        Conv {
            depth,
            kernel_width,
            kernel_height,
            filters,
            weight: ps.add_uniform(format!("{name}/w"), &[patch, filters], patch, rng),
            bias: ps.add_zeros(format!("{name}/b"), &[filters]),
        }
    }

    fn patch_len(&self) -> usize {
        4 * self.kernel_height * self.kernel_width * self.depth
    }

    /// Visits every (patch slot, source offset) pair of the window at output
    /// cell `(oy, ox)`, skipping padded positions.
    fn for_each_tap(&self, h: usize, w: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw, d) = (self.kernel_height, self.kernel_width, self.depth);
        for dir in 0..4 {
            for ky in 0..kh {
                let y = oy * kh + ky;
                if y >= h {
                    continue;
                }
                for kx in 0..kw {
                    let x = ox * kw + kx;
                    if x >= w {
                        continue;
                    }
                    let slot = ((dir * kh + ky) * kw + kx) * d;
                    f(dir, slot, (y * w + x) * d);
                }
            }
        }
    }

    pub fn forward(&self, ps: &ParamStore, inputs: &[FeatureMap]) -> Result<ConvCache> {
        if inputs.len() != 4 {
            return Err(Error::dim("conv_nonoverlap", format!("expected 4 direction maps, got {}", inputs.len())));
        }
        let (h, w) = (inputs[0].height(), inputs[0].width());
        if inputs.iter().any(|m| m.height() != h || m.width() != w || m.depth() != self.depth) {
            return Err(Error::dim("conv_nonoverlap", "direction maps differ in shape or depth"));
        }
        let (oh, ow) = (h.div_ceil(self.kernel_height), w.div_ceil(self.kernel_width));
        let (wt, b) = (ps.value(self.weight), ps.value(self.bias));
        let d = self.depth;
        let mut patch = vec![0.0; self.patch_len()];
        let mut out = Vec::with_capacity(oh * ow * self.filters);
        for oy in 0..oh {
            for ox in 0..ow {
                patch.iter_mut().for_each(|v| *v = 0.0);
                self.for_each_tap(h, w, oy, ox, |dir, slot, src| {
                    patch[slot..slot + d].copy_from_slice(&inputs[dir].data()[src..src + d]);
                });
                let start = out.len();
                out.extend_from_slice(b);
                matvec_acc(&patch, wt, &mut out[start..]);
                out[start..].iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        check_finite(&out, "conv_nonoverlap")?;
        Ok(ConvCache {
            in_height: h,
            in_width: w,
            inputs: inputs.to_vec(),
            out: FeatureMap::new(oh, ow, self.filters, out)?,
        })
    }

    /// Returns one input gradient per direction map.
    pub fn backward(&self, ps: &ParamStore, cache: &ConvCache, grad_out: &[f64], gs: &mut GradStore) -> Vec<Vec<f64>> {
        let (h, w, d, f) = (cache.in_height, cache.in_width, self.depth, self.filters);
        let wt = ps.value(self.weight);
        let mut dins = vec![vec![0.0; h * w * d]; 4];
        let mut patch = vec![0.0; self.patch_len()];
        let mut dpatch = vec![0.0; self.patch_len()];
        let mut dz = vec![0.0; f];
        let (oh, ow) = (cache.out.height(), cache.out.width());
        for oy in 0..oh {
            for ox in 0..ow {
                let cell = (oy * ow + ox) * f;
                for k in 0..f {
                    let y = cache.out.data()[cell + k];
                    dz[k] = grad_out[cell + k] * (1.0 - y * y);
                }
                patch.iter_mut().for_each(|v| *v = 0.0);
                self.for_each_tap(h, w, oy, ox, |dir, slot, src| {
                    patch[slot..slot + d].copy_from_slice(&cache.inputs[dir].data()[src..src + d]);
                });
                outer_acc(&patch, &dz, gs.get_mut(self.weight));
                add_assign(gs.get_mut(self.bias), &dz);
                dpatch.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_acc(wt, &dz, &mut dpatch);
                self.for_each_tap(h, w, oy, ox, |dir, slot, src| {
                    add_assign(&mut dins[dir][src..src + d], &dpatch[slot..slot + d]);
                });
            }
        }
        dins
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_window_covers_a_kernel_sized_input() {
        let mut ps = ParamStore::new();
        let conv = Conv::new(&mut ps, "c", 3, 2, 4, 5, &mut ChaCha8Rng::seed_from_u64(0));
        let maps = vec![FeatureMap::zeros(4, 2, 3); 4];
        let out = conv.forward(&ps, &maps).unwrap();
        assert_eq!((out.output().height(), out.output().width(), out.output().depth()), (1, 1, 5));
    }

    #[test]
    fn ones_count_the_kernel_window() {
        for (kw, kh, d) in [(1, 2, 1), (2, 1, 1), (1, 1, 2)] {
            let mut ps = ParamStore::new();
            let conv = Conv::new(&mut ps, "c", d, kw, kh, 1, &mut ChaCha8Rng::seed_from_u64(1));
            ps.value_mut(conv.weight).iter_mut().for_each(|v| *v = 1.0);
            let ones = FeatureMap::new(kh, kw, d, vec![1.0; kh * kw * d]).unwrap();
            let zeros = FeatureMap::zeros(kh, kw, d);
            let out = conv.forward(&ps, &[ones, zeros.clone(), zeros.clone(), zeros]).unwrap();
            assert!((out.output().data()[0] - ((kw * kh * d) as f64).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_extents_are_zero_padded() {
        let mut ps = ParamStore::new();
        let conv = Conv::new(&mut ps, "c", 1, 2, 4, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let maps = vec![FeatureMap::new(5, 3, 1, vec![0.5; 15]).unwrap(); 4];
        let out = conv.forward(&ps, &maps).unwrap();
        assert_eq!((out.output().height(), out.output().width()), (2, 2));
    }

    #[test]
    fn mismatched_direction_maps_are_rejected() {
        let mut ps = ParamStore::new();
        let conv = Conv::new(&mut ps, "c", 1, 2, 2, 1, &mut ChaCha8Rng::seed_from_u64(3));
        let mut maps = vec![FeatureMap::zeros(2, 2, 1); 4];
        assert!(conv.forward(&ps, &maps[..3]).is_err());
        maps[3] = FeatureMap::zeros(2, 4, 1);
        assert!(matches!(conv.forward(&ps, &maps), Err(Error::Dimension { .. })));
    }
}
