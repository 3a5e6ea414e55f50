// Slice kernels over row-major `[I, O]` weight matrices. `O` is inferred from
// the lengths, so callers must pass matching slices.

/// `out[o] += Σ_i x[i]·w[i,o]`
#[inline]
pub(crate) fn matvec_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let o = out.len();
    debug_assert_eq!(w.len(), x.len() * o);
    for (&xi, row) in x.iter().zip(w.chunks_exact(o)) {
        if xi == 0.0 {
            continue;
        }
        for (acc, &wv) in out.iter_mut().zip(row) {
            *acc += xi * wv;
        }
    }
}

/// `dw[i,o] += x[i]·dz[o]`
#[inline]
pub(crate) fn outer_acc(x: &[f64], dz: &[f64], dw: &mut [f64]) {
    let o = dz.len();
    debug_assert_eq!(dw.len(), x.len() * o);
    for (&xi, row) in x.iter().zip(dw.chunks_exact_mut(o)) {
        if xi == 0.0 {
            continue;
        }
        for (acc, &d) in row.iter_mut().zip(dz) {
            *acc += xi * d;
        }
    }
}

/// `dx[i] += Σ_o w[i,o]·dz[o]`
#[inline]
pub(crate) fn matvec_t_acc(w: &[f64], dz: &[f64], dx: &mut [f64]) {
    let o = dz.len();
    debug_assert_eq!(w.len(), dx.len() * o);
    for (acc, row) in dx.iter_mut().zip(w.chunks_exact(o)) {
        let mut s = 0.0;
        for (&wv, &d) in row.iter().zip(dz) {
            s += wv * d;
        }
        *acc += s;
    }
}

#[inline]
pub(crate) fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
