use rand::Rng;

use super::check_finite;
use crate::error::{Error, Result};
use crate::tensor::kernels::{matvec_acc, matvec_t_acc, outer_acc};
use crate::tensor::{sigmoid, GradStore, ParamId, ParamStore};

// Gate blocks inside the 4U pre-activation vector.
const I: usize = 0;
const F: usize = 1;
const O: usize = 2;
const G: usize = 3;

/// One-dimensional LSTM without peepholes: sigmoid input/forget/output gates
/// and a tanh candidate, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub input: usize,
    pub units: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    reverse: bool,
    input: Vec<f64>,
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_c: Vec<f64>,
    out: Vec<f64>,
}

impl LstmCache {
    /// `L×U` hidden outputs, indexed by sequence position.
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

impl Lstm {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, input: usize, units: usize, rng: &mut R) -> Self {
        let fan_in = input + units;
        Lstm {
            input,
            units,
            wx: ps.add_uniform(format!("{name}/wx"), &[input, 4 * units], fan_in, rng),
            wh: ps.add_uniform(format!("{name}/wh"), &[units, 4 * units], fan_in, rng),
            b: ps.add_zeros(format!("{name}/b"), &[4 * units]),
        }
    }

    /// Single update from explicit previous state; returns `(h, c)`.
    pub fn step(&self, ps: &ParamStore, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let u = self.units;
        if x.len() != self.input || h_prev.len() != u || c_prev.len() != u {
            return Err(Error::dim(
                "lstm_step",
                format!(
                    "expected x[{}], h[{u}], c[{u}]; got x[{}], h[{}], c[{}]",
                    self.input,
                    x.len(),
                    h_prev.len(),
                    c_prev.len()
                ),
            ));
        }
        let mut gates = vec![0.0; 4 * u];
        let (mut c, mut tc, mut h) = (vec![0.0; u], vec![0.0; u], vec![0.0; u]);
        self.cell_update(ps, x, Some((h_prev, c_prev)), &mut gates, &mut c, &mut tc, &mut h);
        Ok((h, c))
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn cell_update(
        &self,
        ps: &ParamStore,
        x: &[f64],
        prev: Option<(&[f64], &[f64])>,
        gates: &mut [f64],
        c: &mut [f64],
        tanh_c: &mut [f64],
        h: &mut [f64],
    ) {
        let u = self.units;
        gates.copy_from_slice(ps.value(self.b));
        matvec_acc(x, ps.value(self.wx), gates);
        if let Some((hp, _)) = prev {
            matvec_acc(hp, ps.value(self.wh), gates);
        }
        for k in 0..u {
            let i = sigmoid(gates[I * u + k]);
            let f = sigmoid(gates[F * u + k]);
            let o = sigmoid(gates[O * u + k]);
            let g = gates[G * u + k].tanh();
            gates[I * u + k] = i;
            gates[F * u + k] = f;
            gates[O * u + k] = o;
            gates[G * u + k] = g;
            let cp = prev.map_or(0.0, |(_, cp)| cp[k]);
            c[k] = f * cp + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
    }

    /// Runs over an `L×I` sequence, right-to-left when `reverse`.
    pub fn forward(&self, ps: &ParamStore, seq: &[f64], reverse: bool) -> Result<LstmCache> {
        if seq.is_empty() || !seq.len().is_multiple_of(self.input) {
            return Err(Error::dim(
                "lstm",
                format!("sequence of {} values does not split into rows of {}", seq.len(), self.input),
            ));
        }
        let (l, u) = (seq.len() / self.input, self.units);
        let mut cache = LstmCache {
            reverse,
            input: seq.to_vec(),
            gates: vec![0.0; l * 4 * u],
            cell: vec![0.0; l * u],
            tanh_c: vec![0.0; l * u],
            out: vec![0.0; l * u],
        };
        let mut h_prev = vec![0.0; u];
        let mut c_prev = vec![0.0; u];
        for step in 0..l {
            let t = if reverse { l - 1 - step } else { step };
            let x = &seq[t * self.input..(t + 1) * self.input];
            let prev = (step > 0).then_some((h_prev.as_slice(), c_prev.as_slice()));
            let (c, h) = (&mut cache.cell[t * u..(t + 1) * u], &mut cache.out[t * u..(t + 1) * u]);
            self.cell_update(
                ps,
                x,
                prev,
                &mut cache.gates[t * 4 * u..(t + 1) * 4 * u],
                c,
                &mut cache.tanh_c[t * u..(t + 1) * u],
                h,
            );
            h_prev.copy_from_slice(h);
            c_prev.copy_from_slice(c);
        }
        check_finite(&cache.out, "lstm")?;
        Ok(cache)
    }

    pub fn backward(&self, ps: &ParamStore, cache: &LstmCache, grad_out: &[f64], gs: &mut GradStore) -> Vec<f64> {
        let u = self.units;
        let l = cache.out.len() / u;
        let (wx, wh) = (ps.value(self.wx), ps.value(self.wh));
        let mut dx = vec![0.0; cache.input.len()];
        let mut dh_next = vec![0.0; u];
        let mut dc_next = vec![0.0; u];
        let mut dz = vec![0.0; 4 * u];
        for step in (0..l).rev() {
            let t = if cache.reverse { l - 1 - step } else { step };
            let prev = if step == 0 { None } else if cache.reverse { Some(t + 1) } else { Some(t - 1) };
            let gates = &cache.gates[t * 4 * u..(t + 1) * 4 * u];
            for k in 0..u {
                let (i, f, o, g) = (gates[I * u + k], gates[F * u + k], gates[O * u + k], gates[G * u + k]);
                let tc = cache.tanh_c[t * u + k];
                let dh = grad_out[t * u + k] + dh_next[k];
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                let cp = prev.map_or(0.0, |p| cache.cell[p * u + k]);
                dz[I * u + k] = dc * g * i * (1.0 - i);
                dz[F * u + k] = dc * cp * f * (1.0 - f);
                dz[O * u + k] = dh * tc * o * (1.0 - o);
                dz[G * u + k] = dc * i * (1.0 - g * g);
                dc_next[k] = dc * f;
            }
            let x = &cache.input[t * self.input..(t + 1) * self.input];
            outer_acc(x, &dz, gs.get_mut(self.wx));
            crate::tensor::kernels::add_assign(gs.get_mut(self.b), &dz);
            matvec_t_acc(wx, &dz, &mut dx[t * self.input..(t + 1) * self.input]);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            if let Some(p) = prev {
                outer_acc(&cache.out[p * u..(p + 1) * u], &dz, gs.get_mut(self.wh));
                matvec_t_acc(wh, &dz, &mut dh_next);
            }
        }
        dx
    }
}

/// Forward and backward LSTMs over the same sequence, outputs concatenated
/// per step as `[h_fwd, h_bwd]`.
#[derive(Debug, Clone)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone)]
pub struct BlstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
    out: Vec<f64>,
}

impl BlstmCache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

impl Blstm {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, input: usize, units: usize, rng: &mut R) -> Self {
        Blstm {
            fwd: Lstm::new(ps, &format!("{name}/fwd"), input, units, rng),
            bwd: Lstm::new(ps, &format!("{name}/bwd"), input, units, rng),
        }
    }

    pub fn units(&self) -> usize {
        self.fwd.units
    }

    pub fn forward(&self, ps: &ParamStore, seq: &[f64]) -> Result<BlstmCache> {
        let fwd = self.fwd.forward(ps, seq, false)?;
        let bwd = self.bwd.forward(ps, seq, true)?;
        let u = self.units();
        let out = fwd
            .out
            .chunks_exact(u)
            .zip(bwd.out.chunks_exact(u))
            .flat_map(|(a, b)| a.iter().chain(b).copied())
            .collect();
        Ok(BlstmCache { fwd, bwd, out })
    }

    pub fn backward(&self, ps: &ParamStore, cache: &BlstmCache, grad_out: &[f64], gs: &mut GradStore) -> Vec<f64> {
        let u = self.units();
        let (mut gf, mut gb) = (Vec::with_capacity(grad_out.len() / 2), Vec::with_capacity(grad_out.len() / 2));
        for chunk in grad_out.chunks_exact(2 * u) {
            gf.extend_from_slice(&chunk[..u]);
            gb.extend_from_slice(&chunk[u..]);
        }
        let mut dx = self.fwd.backward(ps, &cache.fwd, &gf, gs);
        let db = self.bwd.backward(ps, &cache.bwd, &gb, gs);
        crate::tensor::kernels::add_assign(&mut dx, &db);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(ps: &mut ParamStore) {
        ps.iter_mut().for_each(|p| p.value.data_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    #[test]
    fn zero_weights_halve_the_previous_cell() {
        let mut ps = ParamStore::new();
        let lstm = Lstm::new(&mut ps, "l", 2, 3, &mut ChaCha8Rng::seed_from_u64(0));
        zeroed(&mut ps);
        let c_prev = [1.0, -2.0, 0.4];
        let (h, c) = lstm.step(&ps, &[0.7, -3.0], &[0.3, 0.1, -0.2], &c_prev).unwrap();
        for k in 0..3 {
            assert!((c[k] - 0.5 * c_prev[k]).abs() < 1e-15);
            assert!((h[k] - 0.5 * (0.5 * c_prev[k]).tanh()).abs() < 1e-15);
        }
        let (h, c) = lstm.step(&ps, &[0.0, 0.0], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!((h, c), (vec![0.0; 3], vec![0.0; 3]));
    }

    #[test]
    fn step_matches_sequence_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let lstm = Lstm::new(&mut ps, "l", 2, 3, &mut rng);
        let seq: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cache = lstm.forward(&ps, &seq, false).unwrap();
        let (mut h, mut c) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 0..4 {
            (h, c) = lstm.step(&ps, &seq[2 * t..2 * t + 2], &h, &c).unwrap();
            assert_eq!(&cache.output()[3 * t..3 * t + 3], h.as_slice());
        }
    }

    #[test]
    fn blstm_single_step_concatenates_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamStore::new();
        let blstm = Blstm::new(&mut ps, "b", 3, 2, &mut rng);
        let x = [0.2, -0.5, 0.9];
        let out = blstm.forward(&ps, &x).unwrap();
        let (hf, _) = blstm.fwd.step(&ps, &x, &[0.0; 2], &[0.0; 2]).unwrap();
        let (hb, _) = blstm.bwd.step(&ps, &x, &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(out.output(), [hf, hb].concat().as_slice());
    }

    #[test]
    fn palindrome_with_mirrored_params_gives_mirrored_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::new();
        let blstm = Blstm::new(&mut ps, "b", 2, 3, &mut rng);
        for (f, b) in [(blstm.fwd.wx, blstm.bwd.wx), (blstm.fwd.wh, blstm.bwd.wh), (blstm.fwd.b, blstm.bwd.b)] {
            let v = ps.value(f).to_vec();
            ps.value_mut(b).copy_from_slice(&v);
        }
        let seq = [0.1, 0.5, -0.3, 0.2, 0.8, -0.6, -0.3, 0.2, 0.1, 0.5];
        let out = blstm.forward(&ps, &seq).unwrap();
        let y = out.output();
        let l = 5;
        for t in 0..l {
            let (fwd, bwd) = (&y[t * 6..t * 6 + 3], &y[(l - 1 - t) * 6 + 3..(l - 1 - t) * 6 + 6]);
            for (a, b) in fwd.iter().zip(bwd) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let mut ps = ParamStore::new();
        let blstm = Blstm::new(&mut ps, "b", 2, 4, &mut ChaCha8Rng::seed_from_u64(4));
        zeroed(&mut ps);
        let out = blstm.forward(&ps, &[1.0, -1.0, 3.0, 0.5]).unwrap();
        assert!(out.output().iter().all(|&v| v == 0.0));
        assert_eq!(out.output().len(), 2 * 8);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut ps = ParamStore::new();
        let lstm = Lstm::new(&mut ps, "l", 2, 2, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(matches!(lstm.forward(&ps, &[], false), Err(Error::Dimension { .. })));
        assert!(matches!(lstm.forward(&ps, &[1.0; 3], false), Err(Error::Dimension { .. })));
    }
}
