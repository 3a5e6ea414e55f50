use rand::Rng;

use super::{check_finite, FeatureMap};
use crate::error::{Error, Result};
use crate::tensor::kernels::{add_assign, matvec_acc, matvec_t_acc, outer_acc};
use crate::tensor::{sigmoid, GradStore, ParamId, ParamStore};

// Gate blocks inside the 5U pre-activation vector.
const I: usize = 0;
const FH: usize = 1;
const FV: usize = 2;
const O: usize = 3;
const G: usize = 4;

/// Scan direction over a feature map, named by where the scan travels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// ↘ from the top-left corner.
    DownRight,
    /// ↙ from the top-right corner.
    DownLeft,
    /// ↖ from the bottom-right corner.
    UpLeft,
    /// ↗ from the bottom-left corner.
    UpRight,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::DownRight, Direction::DownLeft, Direction::UpLeft, Direction::UpRight];

    /// `(flip rows, flip columns)` relative to ↘.
    pub fn flips(self) -> (bool, bool) {
        match self {
            Direction::DownRight => (false, false),
            Direction::DownLeft => (false, true),
            Direction::UpLeft => (true, true),
            Direction::UpRight => (true, false),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Direction::DownRight => "dr",
            Direction::DownLeft => "dl",
            Direction::UpLeft => "ul",
            Direction::UpRight => "ur",
        }
    }
}

/// Two-dimensional LSTM: the cell at each position reads the hidden and cell
/// states of its horizontal and vertical predecessors along the scan, with
/// one forget gate per predecessor axis:
///
/// `c = i⊙g + f_h⊙c_h + f_v⊙c_v`, `h = o⊙tanh(c)`.
///
/// Predecessors outside the map contribute zero state.
#[derive(Debug, Clone)]
pub struct MdLstm {
    pub input: usize,
    pub units: usize,
    pub wx: ParamId,
    pub wh: ParamId,
    pub wv: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct MdLstmCache {
    direction: Direction,
    height: usize,
    width: usize,
    input: Vec<f64>,
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_c: Vec<f64>,
    out: FeatureMap,
}

impl MdLstmCache {
    pub fn output(&self) -> &FeatureMap {
        &self.out
    }
}

/// Walks scan coordinates in order, yielding map positions of the current
/// cell and its horizontal and vertical predecessors.
struct ScanOrder {
    height: usize,
    width: usize,
    flip_rows: bool,
    flip_cols: bool,
}

impl ScanOrder {
    fn new(direction: Direction, height: usize, width: usize) -> Self {
        let (flip_rows, flip_cols) = direction.flips();
        ScanOrder { height, width, flip_rows, flip_cols }
    }

    #[inline]
    fn pos(&self, sy: usize, sx: usize) -> usize {
        let y = if self.flip_rows { self.height - 1 - sy } else { sy };
        let x = if self.flip_cols { self.width - 1 - sx } else { sx };
        y * self.width + x
    }

    #[inline]
    fn at(&self, sy: usize, sx: usize) -> (usize, Option<usize>, Option<usize>) {
        let p = self.pos(sy, sx);
        let ph = (sx > 0).then(|| self.pos(sy, sx - 1));
        let pv = (sy > 0).then(|| self.pos(sy - 1, sx));
        (p, ph, pv)
    }
}

impl MdLstm {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, input: usize, units: usize, rng: &mut R) -> Self {
        let fan_in = input + 2 * units;
        MdLstm {
            input,
            units,
            wx: ps.add_uniform(format!("{name}/wx"), &[input, 5 * units], fan_in, rng),
            wh: ps.add_uniform(format!("{name}/wh"), &[units, 5 * units], fan_in, rng),
            wv: ps.add_uniform(format!("{name}/wv"), &[units, 5 * units], fan_in, rng),
            b: ps.add_zeros(format!("{name}/b"), &[5 * units]),
        }
    }

    pub fn forward(&self, ps: &ParamStore, input: &FeatureMap, direction: Direction) -> Result<MdLstmCache> {
        if input.depth() != self.input {
            return Err(Error::dim(
                "mdlstm_scan",
                format!("input depth {} but layer expects {}", input.depth(), self.input),
            ));
        }
        let (h, w, u) = (input.height(), input.width(), self.units);
        let n = h * w;
        let (wx, wh, wv, b) = (ps.value(self.wx), ps.value(self.wh), ps.value(self.wv), ps.value(self.b));
        let x = input.data();
        let mut gates = vec![0.0; n * 5 * u];
        let mut cell = vec![0.0; n * u];
        let mut tanh_c = vec![0.0; n * u];
        let mut out = vec![0.0; n * u];
        let order = ScanOrder::new(direction, h, w);
        let mut z = vec![0.0; 5 * u];
        for sy in 0..h {
            for sx in 0..w {
                let (p, ph, pv) = order.at(sy, sx);
                z.copy_from_slice(b);
                matvec_acc(&x[p * self.input..(p + 1) * self.input], wx, &mut z);
                if let Some(q) = ph {
                    matvec_acc(&out[q * u..(q + 1) * u], wh, &mut z);
                }
                if let Some(q) = pv {
                    matvec_acc(&out[q * u..(q + 1) * u], wv, &mut z);
                }
                let gp = &mut gates[p * 5 * u..(p + 1) * 5 * u];
                for k in 0..u {
                    let i = sigmoid(z[I * u + k]);
                    let fh = sigmoid(z[FH * u + k]);
                    let fv = sigmoid(z[FV * u + k]);
                    let o = sigmoid(z[O * u + k]);
                    let g = z[G * u + k].tanh();
                    gp[I * u + k] = i;
                    gp[FH * u + k] = fh;
                    gp[FV * u + k] = fv;
                    gp[O * u + k] = o;
                    gp[G * u + k] = g;
                    let ch = ph.map_or(0.0, |q| cell[q * u + k]);
                    let cv = pv.map_or(0.0, |q| cell[q * u + k]);
                    let c = i * g + fh * ch + fv * cv;
                    let tc = c.tanh();
                    cell[p * u + k] = c;
                    tanh_c[p * u + k] = tc;
                    out[p * u + k] = o * tc;
                }
            }
        }
        check_finite(&out, "mdlstm_scan")?;
        Ok(MdLstmCache {
            direction,
            height: h,
            width: w,
            input: x.to_vec(),
            gates,
            cell,
            tanh_c,
            out: FeatureMap::new(h, w, u, out)?,
        })
    }

    /// `grad_out` is `H×W×U`; returns the `H×W×I` input gradient.
    pub fn backward(&self, ps: &ParamStore, cache: &MdLstmCache, grad_out: &[f64], gs: &mut GradStore) -> Vec<f64> {
        let (h, w, u) = (cache.height, cache.width, self.units);
        let (wx, wh, wv) = (ps.value(self.wx), ps.value(self.wh), ps.value(self.wv));
        let out = cache.out.data();
        let mut dh_acc = grad_out.to_vec();
        let mut dc_acc = vec![0.0; h * w * u];
        let mut dx = vec![0.0; cache.input.len()];
        let mut dz = vec![0.0; 5 * u];
        let mut gwx = gs.get(self.wx).to_vec();
        let mut gwh = gs.get(self.wh).to_vec();
        let mut gwv = gs.get(self.wv).to_vec();
        let mut gb = gs.get(self.b).to_vec();
        let order = ScanOrder::new(cache.direction, h, w);
        for sy in (0..h).rev() {
            for sx in (0..w).rev() {
                let (p, ph, pv) = order.at(sy, sx);
                let gp = &cache.gates[p * 5 * u..(p + 1) * 5 * u];
                for k in 0..u {
                    let (i, fh, fv, o, g) =
                        (gp[I * u + k], gp[FH * u + k], gp[FV * u + k], gp[O * u + k], gp[G * u + k]);
                    let tc = cache.tanh_c[p * u + k];
                    let dh = dh_acc[p * u + k];
                    let dc = dc_acc[p * u + k] + dh * o * (1.0 - tc * tc);
                    let ch = ph.map_or(0.0, |q| cache.cell[q * u + k]);
                    let cv = pv.map_or(0.0, |q| cache.cell[q * u + k]);
                    dz[I * u + k] = dc * g * i * (1.0 - i);
                    dz[FH * u + k] = dc * ch * fh * (1.0 - fh);
                    dz[FV * u + k] = dc * cv * fv * (1.0 - fv);
                    dz[O * u + k] = dh * tc * o * (1.0 - o);
                    dz[G * u + k] = dc * i * (1.0 - g * g);
                    if let Some(q) = ph {
                        dc_acc[q * u + k] += dc * fh;
                    }
                    if let Some(q) = pv {
                        dc_acc[q * u + k] += dc * fv;
                    }
                }
                let xi = &cache.input[p * self.input..(p + 1) * self.input];
                outer_acc(xi, &dz, &mut gwx);
                add_assign(&mut gb, &dz);
                matvec_t_acc(wx, &dz, &mut dx[p * self.input..(p + 1) * self.input]);
                if let Some(q) = ph {
                    outer_acc(&out[q * u..(q + 1) * u], &dz, &mut gwh);
                    matvec_t_acc(wh, &dz, &mut dh_acc[q * u..(q + 1) * u]);
                }
                if let Some(q) = pv {
                    outer_acc(&out[q * u..(q + 1) * u], &dz, &mut gwv);
                    matvec_t_acc(wv, &dz, &mut dh_acc[q * u..(q + 1) * u]);
                }
            }
        }
        gs.get_mut(self.wx).copy_from_slice(&gwx);
        gs.get_mut(self.wh).copy_from_slice(&gwh);
        gs.get_mut(self.wv).copy_from_slice(&gwv);
        gs.get_mut(self.b).copy_from_slice(&gb);
        dx
    }
}

/// Four independent scans over the same input, one per direction.
#[derive(Debug, Clone)]
pub struct MdLstmBlock {
    pub scans: [MdLstm; 4],
}

impl MdLstmBlock {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, input: usize, units: usize, rng: &mut R) -> Self {
        let scans = Direction::ALL.map(|d| MdLstm::new(ps, &format!("{name}/{}", d.tag()), input, units, rng));
        MdLstmBlock { scans }
    }

    pub fn units(&self) -> usize {
        self.scans[0].units
    }

    pub fn forward(&self, ps: &ParamStore, input: &FeatureMap) -> Result<Vec<MdLstmCache>> {
        self.scans
            .iter()
            .zip(Direction::ALL)
            .map(|(scan, d)| scan.forward(ps, input, d))
            .collect()
    }

    /// `grads[d]` is the output gradient of direction `d`; returns the summed input gradient.
    pub fn backward(&self, ps: &ParamStore, caches: &[MdLstmCache], grads: &[Vec<f64>], gs: &mut GradStore) -> Vec<f64> {
        let mut dx: Option<Vec<f64>> = None;
        for ((scan, cache), g) in self.scans.iter().zip(caches).zip(grads) {
            let d = scan.backward(ps, cache, g, gs);
            match dx.as_mut() {
                Some(acc) => add_assign(acc, &d),
                None => dx = Some(d),
            }
        }
        dx.expect("four scans")
    }
}

/// Sums the four direction outputs into one `H×W×U` map.
pub(crate) fn sum_directions(caches: &[MdLstmCache]) -> Result<FeatureMap> {
    let first = caches[0].output();
    let mut data = first.data().to_vec();
    for c in &caches[1..] {
        add_assign(&mut data, c.output().data());
    }
    FeatureMap::new(first.height(), first.width(), first.depth(), data)
}
