//! Dense row-major arrays with a gradient slot, plus the handful of
//! differentiable primitives the network is assembled from.
//!
//! Every forward op validates its output: a NaN or infinity anywhere aborts
//! with [`Error::NonFinite`] naming the op, rather than letting a diverging
//! recurrence poison later layers silently.

mod checkpoint;
pub(crate) mod kernels;
mod param;

pub use checkpoint::{read_parameters, write_parameters, PARAM_FORMAT_VERSION};
pub use param::{GradStore, ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data, grad: None };
        t.ensure_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let slot = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op: op.to_string() })
        }
    }

    /// Splits the shape around `axis` into (outer, extent, inner) strides.
    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }
}

/// `out[n,o] = Σ_i input[n,i]·weight[i,o] + bias[o]`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, i, o) = affine_dims(input, weight, bias)?;
    let mut out = Vec::with_capacity(n * o);
    for row in input.data.chunks_exact(i) {
        let mut acc = bias.data.clone();
        kernels::matvec_acc(row, &weight.data, &mut acc);
        out.extend_from_slice(&acc);
    }
    let t = Tensor { shape: vec![n, o], data: out, grad: None };
    t.ensure_finite("affine")?;
    Ok(t)
}

/// Accumulates exact gradients of `affine` into the grad slots of all three arguments.
pub fn affine_backward(
    input: &mut Tensor,
    weight: &mut Tensor,
    bias: &mut Tensor,
    grad_out: &Tensor,
) -> Result<()> {
    let (n, i, o) = affine_dims(input, weight, bias)?;
    if grad_out.shape != [n, o] {
        return Err(Error::dim(
            "affine_backward",
            format!("grad {:?} vs output [{n}, {o}]", grad_out.shape),
        ));
    }
    let mut gi = vec![0.0; n * i];
    let mut gw = vec![0.0; i * o];
    let mut gb = vec![0.0; o];
    for r in 0..n {
        let dz = &grad_out.data[r * o..(r + 1) * o];
        let x = &input.data[r * i..(r + 1) * i];
        kernels::outer_acc(x, dz, &mut gw);
        kernels::matvec_t_acc(&weight.data, dz, &mut gi[r * i..(r + 1) * i]);
        for (b, d) in gb.iter_mut().zip(dz) {
            *b += d;
        }
    }
    input.accumulate_grad(&gi);
    weight.accumulate_grad(&gw);
    bias.accumulate_grad(&gb);
    Ok(())
}

fn affine_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1 {
        return Err(Error::dim(
            "affine",
            format!(
                "expected input [N, I], weight [I, O], bias [O]; got {:?}, {:?}, {:?}",
                input.shape, weight.shape, bias.shape
            ),
        ));
    }
    let (n, i) = (input.shape[0], input.shape[1]);
    let (wi, o) = (weight.shape[0], weight.shape[1]);
    if i != wi || bias.shape[0] != o {
        return Err(Error::dim(
            "affine",
            format!(
                "input {:?} incompatible with weight {:?} and bias {:?}",
                input.shape, weight.shape, bias.shape
            ),
        ));
    }
    Ok((n, i, o))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    AddConst(f64),
    MulConst(f64),
}

impl Elementwise {
    fn name(self) -> &'static str {
        match self {
            Elementwise::Tanh => "tanh",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Exp => "exp",
            Elementwise::Log => "log",
            Elementwise::AddConst(_) => "add-const",
            Elementwise::MulConst(_) => "mul-const",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Elementwise::Tanh => x.tanh(),
            Elementwise::Sigmoid => sigmoid(x),
            Elementwise::Exp => x.exp(),
            Elementwise::Log => x.ln(),
            Elementwise::AddConst(c) => x + c,
            Elementwise::MulConst(c) => x * c,
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Elementwise::Tanh => 1.0 - y * y,
            Elementwise::Sigmoid => y * (1.0 - y),
            Elementwise::Exp => y,
            Elementwise::Log => 1.0 / x,
            Elementwise::AddConst(_) => 1.0,
            Elementwise::MulConst(c) => c,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise(input: &Tensor, f: Elementwise) -> Result<Tensor> {
    if f == Elementwise::Log {
        if let Some(bad) = input.data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
    }
    let data = input.data.iter().map(|&x| f.apply(x)).collect();
    let t = Tensor { shape: input.shape.clone(), data, grad: None };
    t.ensure_finite(f.name())?;
    Ok(t)
}

pub fn elementwise_backward(
    input: &mut Tensor,
    output: &Tensor,
    f: Elementwise,
    grad_out: &Tensor,
) -> Result<()> {
    if input.shape != output.shape || output.shape != grad_out.shape {
        return Err(Error::dim("elementwise_backward", "input/output/grad shapes differ"));
    }
    let g: Vec<f64> = input
        .data
        .iter()
        .zip(&output.data)
        .zip(&grad_out.data)
        .map(|((&x, &y), &d)| d * f.derivative(x, y))
        .collect();
    input.accumulate_grad(&g);
    Ok(())
}

/// Overflow-safe softmax over `axis` (max subtracted per slice).
pub fn softmax_along_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax_along_axis", input, axis)?;
    let (outer, extent, inner) = input.axis_split(axis);
    let mut data = input.data.clone();
    for o in 0..outer {
        for k in 0..inner {
            let base = o * extent * inner + k;
            let idx = |j: usize| base + j * inner;
            let m = (0..extent).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..extent {
                let e = (data[idx(j)] - m).exp();
                data[idx(j)] = e;
                s += e;
            }
            for j in 0..extent {
                data[idx(j)] /= s;
            }
        }
    }
    let t = Tensor { shape: input.shape.clone(), data, grad: None };
    t.ensure_finite("softmax_along_axis")?;
    Ok(t)
}

/// Uses the softmax output only: `dx_j = y_j (dy_j − Σ_k y_k dy_k)`.
pub fn softmax_backward(
    input: &mut Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    axis: usize,
) -> Result<()> {
    check_axis("softmax_backward", output, axis)?;
    if input.shape != output.shape || output.shape != grad_out.shape {
        return Err(Error::dim("softmax_backward", "input/output/grad shapes differ"));
    }
    let (outer, extent, inner) = output.axis_split(axis);
    let mut g = vec![0.0; output.len()];
    for o in 0..outer {
        for k in 0..inner {
            let base = o * extent * inner + k;
            let dot: f64 = (0..extent)
                .map(|j| output.data[base + j * inner] * grad_out.data[base + j * inner])
                .sum();
            for j in 0..extent {
                let p = base + j * inner;
                g[p] = output.data[p] * (grad_out.data[p] - dot);
            }
        }
    }
    input.accumulate_grad(&g);
    Ok(())
}

pub fn reduce_sum_along_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("reduce_sum_along_axis", input, axis)?;
    let (outer, extent, inner) = input.axis_split(axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..extent {
            let src = &input.data[(o * extent + j) * inner..(o * extent + j + 1) * inner];
            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = input.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    let t = Tensor { shape, data, grad: None };
    t.ensure_finite("reduce_sum_along_axis")?;
    Ok(t)
}

/// Broadcasts `grad_out` back along the reduced axis.
pub fn reduce_sum_backward(input: &mut Tensor, grad_out: &Tensor, axis: usize) -> Result<()> {
    check_axis("reduce_sum_backward", input, axis)?;
    let (outer, extent, inner) = input.axis_split(axis);
    if grad_out.len() != outer * inner {
        return Err(Error::dim("reduce_sum_backward", "gradient does not match reduced shape"));
    }
    let mut g = vec![0.0; input.len()];
    for o in 0..outer {
        let src = &grad_out.data[o * inner..(o + 1) * inner];
        for j in 0..extent {
            g[(o * extent + j) * inner..(o * extent + j + 1) * inner].copy_from_slice(src);
        }
    }
    input.accumulate_grad(&g);
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        Err(Error::dim(op, format!("axis {axis} out of range for shape {:?}", t.shape)))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let err = Tensor::new(vec![1], vec![f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn affine_examples() {
        let out = affine(&t(&[1, 2], &[1., 2.]), &t(&[2, 2], &[1., 0., 0., 1.]), &t(&[2], &[0., 0.]))
            .unwrap();
        assert_eq!(out.data(), &[1., 2.]);
        let out = affine(&t(&[1, 2], &[1., 1.]), &t(&[2, 1], &[2., 3.]), &t(&[1], &[1.])).unwrap();
        assert_eq!(out.data(), &[6.]);
    }

    #[test]
    fn affine_shape_mismatch_names_both_shapes() {
        let err = affine(&t(&[1, 3], &[1.; 3]), &t(&[2, 2], &[1.; 4]), &t(&[2], &[0.; 2]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn affine_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = random(&[3, 4], &mut rng);
        let mut w = random(&[4, 2], &mut rng);
        let mut b = random(&[2], &mut rng);
        let probe = random(&[3, 2], &mut rng);
        let (x0, b0) = (x.clone(), b.clone());
        let loss = |w: &Tensor| -> f64 {
            let y = affine(&x0, w, &b0).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum()
        };
        affine_backward(&mut x, &mut w, &mut b, &probe).unwrap();
        let analytic = w.grad().unwrap().to_vec();
        let h = 1e-5;
        for (k, &a) in analytic.iter().enumerate() {
            let mut wp = w.clone();
            wp.data_mut()[k] += h;
            let mut wm = w.clone();
            wm.data_mut()[k] -= h;
            let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-12);
            assert!(rel < 1e-6, "entry {k}: fd {fd} analytic {}", a);
        }
        // bias gradient is the column sum of the probe
        let gb = b.grad().unwrap();
        assert!((gb[0] - (probe.data()[0] + probe.data()[2] + probe.data()[4])).abs() < 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let zero = t(&[1], &[0.0]);
        assert_eq!(elementwise(&zero, Elementwise::Sigmoid).unwrap().data(), &[0.5]);
        assert_eq!(elementwise(&zero, Elementwise::Tanh).unwrap().data(), &[0.0]);
        assert!(matches!(
            elementwise(&zero, Elementwise::Log),
            Err(Error::Domain { op: "log", .. })
        ));
        let y = elementwise(&t(&[2], &[1.0, 2.0]), Elementwise::MulConst(3.0)).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0]);
    }

    #[test]
    fn sigmoid_derivative_matches_finite_difference() {
        let mut x = t(&[1], &[1.0]);
        let y = elementwise(&x, Elementwise::Sigmoid).unwrap();
        elementwise_backward(&mut x, &y, Elementwise::Sigmoid, &t(&[1], &[1.0])).unwrap();
        let h = 1e-5;
        let fd = (sigmoid(1.0 + h) - sigmoid(1.0 - h)) / (2.0 * h);
        assert!((x.grad().unwrap()[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for f in [
            Elementwise::Tanh,
            Elementwise::Sigmoid,
            Elementwise::Exp,
            Elementwise::Log,
            Elementwise::AddConst(0.3),
            Elementwise::MulConst(-1.7),
        ] {
            let mut x = random(&[5], &mut rng);
            if f == Elementwise::Log {
                x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
            }
            let y = elementwise(&x, f).unwrap();
            let ones = Tensor::filled(&[5], 1.0);
            elementwise_backward(&mut x, &y, f, &ones).unwrap();
            for k in 0..5 {
                let v = x.data()[k];
                let h = 1e-5;
                let fd = (f.apply(v + h) - f.apply(v - h)) / (2.0 * h);
                let g = x.grad().unwrap()[k];
                assert!((fd - g).abs() / fd.abs().max(1e-8) < 1e-4, "{f:?}");
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_along_axis(&t(&[4], &[0.; 4]), 0).unwrap();
        assert_eq!(y.data(), &[0.25; 4]);
        let y = softmax_along_axis(&t(&[2], &[1f64.ln(), 3f64.ln()]), 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let base = t(&[3], &[0.1, -0.4, 2.0]);
        let shifted = t(&[3], &[1000.1, 999.6, 1002.0]);
        let a = softmax_along_axis(&base, 0).unwrap();
        let b = softmax_along_axis(&shifted, 0).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
        assert!(softmax_along_axis(&base, 1).is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = random(&[3, 4], &mut rng);
        let probe = random(&[3, 4], &mut rng);
        let loss = |x: &Tensor| -> f64 {
            softmax_along_axis(x, 0).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let y = softmax_along_axis(&x, 0).unwrap();
        softmax_backward(&mut x, &y, &probe, 0).unwrap();
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += 1e-5;
            let mut m = x.clone();
            m.data_mut()[k] -= 1e-5;
            let fd = (loss(&p) - loss(&m)) / 2e-5;
            let g = x.grad().unwrap()[k];
            assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn reduce_sum_examples() {
        let x = t(&[2, 2], &[1., 2., 3., 4.]);
        let y = reduce_sum_along_axis(&x, 0).unwrap();
        assert_eq!((y.shape(), y.data()), (&[2usize][..], &[4., 6.][..]));
        let x = t(&[1, 3], &[1., 2., 3.]);
        assert_eq!(reduce_sum_along_axis(&x, 0).unwrap().data(), x.data());
        let mut x = t(&[2, 3], &[0.; 6]);
        reduce_sum_backward(&mut x, &t(&[3], &[1., 2., 3.]), 0).unwrap();
        assert_eq!(x.grad().unwrap(), &[1., 2., 3., 1., 2., 3.]);
    }

    proptest! {
        #[test]
        fn softmax_slices_sum_to_one(
            values in proptest::collection::vec(-10.0f64..10.0, 12),
            axis in 0usize..3,
        ) {
            let x = t(&[2, 3, 2], &values);
            let y = softmax_along_axis(&x, axis).unwrap();
            prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            let s = reduce_sum_along_axis(&y, axis).unwrap();
            for v in s.data() {
                prop_assert!((v - 1.0).abs() < 1e-6);
            }
            // purity: bitwise identical on recompute
            prop_assert_eq!(softmax_along_axis(&x, axis).unwrap(), y);
        }
    }
}
