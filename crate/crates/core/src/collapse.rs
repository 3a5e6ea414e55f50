//! Reduction of an encoded `H×W×D` map to a sequence of `D`-vectors.
//!
//! The standard collapse sums every column. The attention collapse instead
//! runs `T` steps; at each step a small four-direction MDLSTM scores every
//! position from the features and the previous step's weights, a softmax over
//! each column turns the scores into weights, and the column's weighted sum
//! becomes one frame. Concatenating the `T` step outputs gives one `W`-frame
//! segment per text line when the network has learned to read line by line.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{sum_directions, FeatureMap, Linear, MdLstmBlock, MdLstmCache};
use crate::tensor::{softmax_along_axis, GradStore, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollapseMode {
    Standard,
    Attention,
}

/// `T×H×W` attention weights; every column of every step sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    pub fn new(steps: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Ok(AttentionMap { weights: Tensor::new(vec![steps, height, width], data)? })
    }

    pub fn steps(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn data(&self) -> &[f64] {
        self.weights.data()
    }

    /// `H×W` weights of step `t` (0-based).
    pub fn step(&self, t: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.weights.data()[t * n..(t + 1) * n]
    }

    /// Largest deviation of any column sum from one.
    pub fn max_column_error(&self) -> f64 {
        let (h, w) = (self.height(), self.width());
        (0..self.steps())
            .flat_map(|t| {
                let s = self.step(t);
                (0..w).map(move |i| ((0..h).map(|j| s[j * w + i]).sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Mean row index under step `t`'s weights, averaged over columns:
    /// `Σ_ij j·ω_ij / W`.
    pub fn row_centroid(&self, t: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        let s = self.step(t);
        let mut acc = 0.0;
        for j in 0..h {
            for i in 0..w {
                acc += j as f64 * s[j * w + i];
            }
        }
        acc / w as f64
    }
}

/// Frames produced by a collapse, `L×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedSeq {
    vectors: Tensor,
}

impl CollapsedSeq {
    pub fn new(len: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        Ok(CollapsedSeq { vectors: Tensor::new(vec![len, depth], data)? })
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn depth(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn data(&self) -> &[f64] {
        self.vectors.data()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let d = self.depth();
        &self.data()[i * d..(i + 1) * d]
    }
}

/// `z_i = Σ_j a_ij`.
pub fn standard_collapse(a: &FeatureMap) -> Result<CollapsedSeq> {
    let (h, w, d) = (a.height(), a.width(), a.depth());
    let mut z = vec![0.0; w * d];
    for j in 0..h {
        for (dst, src) in z.iter_mut().zip(&a.data()[j * w * d..(j + 1) * w * d]) {
            *dst += src;
        }
    }
    CollapsedSeq::new(w, d, z)
}

/// Broadcasts each column gradient to every row of that column.
pub fn standard_collapse_backward(height: usize, grad: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * grad.len());
    for _ in 0..height {
        out.extend_from_slice(grad);
    }
    out
}

/// Per-column softmax of `H×W` scores (normalized over rows).
pub fn column_softmax(scores: &[f64], height: usize, width: usize) -> Result<Vec<f64>> {
    let t = Tensor::new(vec![height, width], scores.to_vec())?;
    Ok(softmax_along_axis(&t, 0)?.into_data())
}

fn column_softmax_backward(omega: &[f64], grad: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; omega.len()];
    for i in 0..width {
        let dot: f64 = (0..height).map(|j| omega[j * width + i] * grad[j * width + i]).sum();
        for j in 0..height {
            let p = j * width + i;
            out[p] = omega[p] * (grad[p] - dot);
        }
    }
    out
}

/// `z_i = Σ_j ω_ij a_ij` for an `H×W` weight map.
pub fn weighted_collapse(a: &FeatureMap, omega: &[f64]) -> Result<CollapsedSeq> {
    let (h, w, d) = (a.height(), a.width(), a.depth());
    if omega.len() != h * w {
        return Err(Error::dim("weighted_collapse", format!("weights {} vs map {h}x{w}", omega.len())));
    }
    let mut z = vec![0.0; w * d];
    for j in 0..h {
        for i in 0..w {
            let wt = omega[j * w + i];
            for (dst, src) in z[i * d..(i + 1) * d].iter_mut().zip(a.at(j, i)) {
                *dst += wt * src;
            }
        }
    }
    CollapsedSeq::new(w, d, z)
}

/// Returns `(dL/da, dL/dω)` for `grad = dL/dz` (`W×D`).
fn weighted_collapse_backward(a: &FeatureMap, omega: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (h, w, d) = (a.height(), a.width(), a.depth());
    let mut da = vec![0.0; h * w * d];
    let mut domega = vec![0.0; h * w];
    for j in 0..h {
        for i in 0..w {
            let p = j * w + i;
            let g = &grad[i * d..(i + 1) * d];
            let wt = omega[p];
            let mut dot = 0.0;
            for ((dst, &gk), &ak) in da[p * d..(p + 1) * d].iter_mut().zip(g).zip(a.at(j, i)) {
                *dst = wt * gk;
                dot += gk * ak;
            }
            domega[p] = dot;
        }
    }
    (da, domega)
}

/// Scores positions from the encoded map and the previous attention weights,
/// which enter as one extra input channel.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    pub block: MdLstmBlock,
    pub out: Linear,
    pub feature_depth: usize,
}

#[derive(Debug, Clone)]
pub struct ScoreCache {
    scans: Vec<MdLstmCache>,
    summed: FeatureMap,
}

impl AttentionNet {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, feature_depth: usize, units: usize, rng: &mut R) -> Self {
        AttentionNet {
            block: MdLstmBlock::new(ps, &format!("{name}/mdlstm"), feature_depth + 1, units, rng),
            out: Linear::new(ps, &format!("{name}/linear"), units, 1, rng),
            feature_depth,
        }
    }

    /// `H×W` unnormalized scores.
    pub fn scores(&self, ps: &ParamStore, a: &FeatureMap, prev: &[f64]) -> Result<(Vec<f64>, ScoreCache)> {
        let (h, w, d) = (a.height(), a.width(), a.depth());
        if prev.len() != h * w {
            return Err(Error::dim(
                "attention_scores",
                format!("previous attention has {} entries, map is {h}x{w}", prev.len()),
            ));
        }
        if d != self.feature_depth {
            return Err(Error::dim("attention_scores", format!("feature depth {d}, expected {}", self.feature_depth)));
        }
        let mut input = Vec::with_capacity(h * w * (d + 1));
        for (p, &wp) in prev.iter().enumerate() {
            input.extend_from_slice(&a.data()[p * d..(p + 1) * d]);
            input.push(wp);
        }
        let input = FeatureMap::new(h, w, d + 1, input)?;
        let scans = self.block.forward(ps, &input)?;
        let summed = sum_directions(&scans)?;
        let scores = self.out.forward(ps, summed.data())?;
        Ok((scores, ScoreCache { scans, summed }))
    }

    /// Returns `(dL/da, dL/dprev)`.
    pub(crate) fn scores_backward(
        &self,
        ps: &ParamStore,
        cache: &ScoreCache,
        grad: &[f64],
        gs: &mut GradStore,
    ) -> (Vec<f64>, Vec<f64>) {
        let dsum = self.out.backward(ps, cache.summed.data(), grad, gs);
        let dinput = self.block.backward(ps, &cache.scans, &vec![dsum; 4], gs);
        let d = self.feature_depth;
        let n = dinput.len() / (d + 1);
        let mut da = Vec::with_capacity(n * d);
        let mut dprev = Vec::with_capacity(n);
        for chunk in dinput.chunks_exact(d + 1) {
            da.extend_from_slice(&chunk[..d]);
            dprev.push(chunk[d]);
        }
        (da, dprev)
    }
}

/// Standalone form of the scoring op.
pub fn attention_scores(ps: &ParamStore, net: &AttentionNet, a: &FeatureMap, prev: &[f64]) -> Result<Vec<f64>> {
    Ok(net.scores(ps, a, prev)?.0)
}

#[derive(Debug, Clone)]
pub struct IterateCache {
    steps: Vec<ScoreCache>,
    attention: AttentionMap,
}

impl IterateCache {
    pub fn attention(&self) -> &AttentionMap {
        &self.attention
    }
}

/// Runs `steps` rounds of score → column softmax → weighted collapse,
/// starting from all-zero previous weights. The attention network's
/// recurrent state does not carry across rounds; only the weights do.
pub fn iterate_collapse(
    ps: &ParamStore,
    net: &AttentionNet,
    a: &FeatureMap,
    steps: usize,
) -> Result<(CollapsedSeq, IterateCache)> {
    if steps == 0 {
        return Err(Error::Config("attention needs at least one collapse step".into()));
    }
    let (h, w, d) = (a.height(), a.width(), a.depth());
    let mut prev = vec![0.0; h * w];
    let mut frames = Vec::with_capacity(steps * w * d);
    let mut weights = Vec::with_capacity(steps * h * w);
    let mut caches = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (scores, cache) = net.scores(ps, a, &prev)?;
        let omega = column_softmax(&scores, h, w)?;
        frames.extend_from_slice(weighted_collapse(a, &omega)?.data());
        weights.extend_from_slice(&omega);
        caches.push(cache);
        prev = omega;
    }
    let attention = AttentionMap::new(steps, h, w, weights)?;
    debug_assert!(attention.max_column_error() < 1e-6);
    Ok((CollapsedSeq::new(steps * w, d, frames)?, IterateCache { steps: caches, attention }))
}

/// Backpropagates `grad` (`T·W×D`) through every round, including the
/// dependence of each round's scores on the previous round's weights.
/// Returns `dL/da`.
pub fn iterate_collapse_backward(
    ps: &ParamStore,
    net: &AttentionNet,
    a: &FeatureMap,
    cache: &IterateCache,
    grad: &[f64],
    gs: &mut GradStore,
) -> Vec<f64> {
    let (h, w, d) = (a.height(), a.width(), a.depth());
    let steps = cache.steps.len();
    let mut da = vec![0.0; h * w * d];
    let mut domega_carry = vec![0.0; h * w];
    for t in (0..steps).rev() {
        let omega = cache.attention.step(t);
        let (da_collapse, mut domega) = weighted_collapse_backward(a, omega, &grad[t * w * d..(t + 1) * w * d]);
        crate::tensor::kernels::add_assign(&mut da, &da_collapse);
        crate::tensor::kernels::add_assign(&mut domega, &domega_carry);
        let dscores = column_softmax_backward(omega, &domega, h, w);
        let (da_scores, dprev) = net.scores_backward(ps, &cache.steps[t], &dscores, gs);
        crate::tensor::kernels::add_assign(&mut da, &da_scores);
        domega_carry = dprev;
    }
    da
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, d: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_net(ps: &mut ParamStore, d: usize) -> AttentionNet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = AttentionNet::new(ps, "att", d, 3, &mut rng);
        ps.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
        net
    }

    #[test]
    fn standard_collapse_sums_rows() {
        let a = FeatureMap::new(2, 3, 1, vec![1.0; 6]).unwrap();
        assert_eq!(standard_collapse(&a).unwrap().data(), &[2.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let single = random_map(1, 4, 2, &mut rng);
        assert_eq!(standard_collapse(&single).unwrap().data(), single.data());
        let g = standard_collapse_backward(3, &[1.0, 2.0]);
        assert_eq!(g, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn column_softmax_examples() {
        assert_eq!(column_softmax(&[0.0; 8], 4, 2).unwrap(), vec![0.25; 8]);
        let w = column_softmax(&[1f64.ln(), 3f64.ln()], 2, 1).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..15).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let w = column_softmax(&s, 5, 3).unwrap();
        for i in 0..3 {
            let sum: f64 = (0..5).map(|j| w[j * 3 + i]).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn weighted_collapse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_map(4, 3, 2, &mut rng);
        let uniform = weighted_collapse(&a, &[0.25; 12]).unwrap();
        let sum = standard_collapse(&a).unwrap();
        for (u, s) in uniform.data().iter().zip(sum.data()) {
            assert!((u - s / 4.0).abs() < 1e-12);
            assert!((4.0 * u - s).abs() < 1e-12);
        }
        let mut onehot = vec![0.0; 12];
        for i in 0..3 {
            onehot[2 * 3 + i] = 1.0;
        }
        let z = weighted_collapse(&a, &onehot).unwrap();
        for i in 0..3 {
            assert_eq!(z.frame(i), a.at(2, i));
        }
        let row = random_map(1, 3, 2, &mut rng);
        assert_eq!(weighted_collapse(&row, &[1.0; 3]).unwrap(), standard_collapse(&row).unwrap());
    }

    #[test]
    fn weighted_collapse_is_linear_in_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a1, a2) = (random_map(3, 4, 2, &mut rng), random_map(3, 4, 2, &mut rng));
        let omega = column_softmax(&(0..12).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>(), 3, 4).unwrap();
        let sum = FeatureMap::new(3, 4, 2, a1.data().iter().zip(a2.data()).map(|(x, y)| x + y).collect()).unwrap();
        let lhs = weighted_collapse(&sum, &omega).unwrap();
        let r1 = weighted_collapse(&a1, &omega).unwrap();
        let r2 = weighted_collapse(&a2, &omega).unwrap();
        for ((l, x), y) in lhs.data().iter().zip(r1.data()).zip(r2.data()) {
            assert!((l - (x + y)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_scores_zero_and_collapses_to_column_mean() {
        let mut ps = ParamStore::new();
        let net = zero_net(&mut ps, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_map(4, 5, 2, &mut rng);
        let s = attention_scores(&ps, &net, &a, &[0.0; 20]).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        let (z, cache) = iterate_collapse(&ps, &net, &a, 1).unwrap();
        let mean = standard_collapse(&a).unwrap();
        for (x, m) in z.data().iter().zip(mean.data()) {
            assert!((x - m / 4.0).abs() < 1e-12);
        }
        assert_eq!(cache.attention().steps(), 1);
    }

    #[test]
    fn output_length_is_steps_times_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParamStore::new();
        let net = AttentionNet::new(&mut ps, "att", 3, 4, &mut rng);
        for (h, w, t) in [(1, 1, 1), (3, 5, 2), (6, 2, 4)] {
            let a = random_map(h, w, 3, &mut rng);
            let (z, cache) = iterate_collapse(&ps, &net, &a, t).unwrap();
            assert_eq!(z.len(), t * w);
            assert_eq!(z.depth(), 3);
            assert!(cache.attention().max_column_error() < 1e-6);
            let s = attention_scores(&ps, &net, &a, &vec![0.0; h * w]).unwrap();
            assert!(s.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn mismatched_previous_weights_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new();
        let net = AttentionNet::new(&mut ps, "att", 2, 2, &mut rng);
        let a = random_map(3, 3, 2, &mut rng);
        assert!(matches!(attention_scores(&ps, &net, &a, &[0.0; 8]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn row_centroid_of_one_hot_rows() {
        let mut data = vec![0.0; 2 * 3 * 2];
        // step 0 on row 0, step 1 on row 2
        data[0] = 1.0;
        data[1] = 1.0;
        data[6 + 4] = 1.0;
        data[6 + 5] = 1.0;
        let map = AttentionMap::new(2, 3, 2, data).unwrap();
        assert_eq!(map.row_centroid(0), 0.0);
        assert_eq!(map.row_centroid(1), 2.0);
        assert_eq!(map.max_column_error(), 0.0);
    }
}
