use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels::{matvec_acc, matvec_t_acc, outer_acc};
use crate::tensor::{GradStore, ParamId, ParamStore};

/// Row-wise affine map `[N, I] -> [N, O]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let weight = ps.add_uniform(format!("{name}/w"), &[input, output], input, rng);
        let bias = ps.add_zeros(format!("{name}/b"), &[output]);
        Linear { input, output, weight, bias }
    }

    pub fn forward(&self, ps: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if !x.len().is_multiple_of(self.input) {
            return Err(Error::dim(
                "linear",
                format!("{} values is not a multiple of input width {}", x.len(), self.input),
            ));
        }
        let (w, b) = (ps.value(self.weight), ps.value(self.bias));
        let mut out = Vec::with_capacity(x.len() / self.input * self.output);
        for row in x.chunks_exact(self.input) {
            let start = out.len();
            out.extend_from_slice(b);
            matvec_acc(row, w, &mut out[start..]);
        }
        Ok(out)
    }

    pub fn backward(&self, ps: &ParamStore, x: &[f64], grad_out: &[f64], gs: &mut GradStore) -> Vec<f64> {
        let w = ps.value(self.weight);
        let mut dx = vec![0.0; x.len()];
        for (r, (row, dz)) in x.chunks_exact(self.input).zip(grad_out.chunks_exact(self.output)).enumerate() {
            outer_acc(row, dz, gs.get_mut(self.weight));
            crate::tensor::kernels::add_assign(gs.get_mut(self.bias), dz);
            matvec_t_acc(w, dz, &mut dx[r * self.input..(r + 1) * self.input]);
        }
        dx
    }
}
