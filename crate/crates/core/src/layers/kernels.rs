//! Sequential kernels and their hand-written backward maps. Every kernel
//! accumulates in a fixed order so a distributed layer that sees the same
//! window in the same order reproduces the sequential result exactly.

use crate::halo::KernelDim;
use crate::tensor::strides;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Flat offsets of every sliding window over one spatial block.
struct Windows {
    out_shape: Vec<usize>,
    /// Input offset of each window's first tap, row-major over outputs.
    base: Vec<usize>,
    /// Offset of each tap relative to `base`, row-major over the kernel.
    taps: Vec<usize>,
}

fn windows(input: &[usize], size: &[usize], stride: &[usize], dilation: &[usize]) -> Result<Windows> {
    let d = input.len();
    if size.len() != d || stride.len() != d || dilation.len() != d {
        return Err(Error::contract(format!("kernel rank {} does not match input rank {d}", size.len())));
    }
    let mut out_shape = Vec::with_capacity(d);
    for i in 0..d {
        if size[i] == 0 || stride[i] == 0 || dilation[i] == 0 {
            return Err(Error::contract("kernel size, stride and dilation must be positive"));
        }
        let span = dilation[i] * (size[i] - 1) + 1;
        if span > input[i] {
            return Err(Error::contract(format!("window {span} exceeds input extent {} in dimension {i}", input[i])));
        }
        out_shape.push((input[i] - span) / stride[i] + 1);
    }
    let st = strides(input);
    let grid = |shape: &[usize], step: &dyn Fn(usize) -> usize| -> Vec<usize> {
        let n: usize = shape.iter().product();
        (0..n)
            .map(|mut flat| {
                let mut off = 0;
                for i in (0..d).rev() {
                    off += (flat % shape[i]) * step(i) * st[i];
                    flat /= shape[i];
                }
                off
            })
            .collect()
    };
    let base = grid(&out_shape, &|i| stride[i]);
    let taps = grid(size, &|i| dilation[i]);
    Ok(Windows { out_shape, base, taps })
}

fn spatial_kernel(kernel: &[KernelDim]) -> (Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>) {
    (
        kernel.iter().map(|k| k.size).collect(),
        kernel.iter().map(|k| k.stride).collect(),
        kernel.iter().map(|k| k.dilation).collect(),
        kernel.iter().map(|k| k.pad_left).collect(),
        kernel.iter().map(|k| k.pad_right).collect(),
    )
}

/// Zero-pads the spatial dimensions (everything after batch and channel).
pub fn pad_spatial<T: Real>(x: &Tensor<T>, lo: &[usize], hi: &[usize]) -> Result<Tensor<T>> {
    if lo.iter().chain(hi).all(|&p| p == 0) {
        return Ok(x.clone());
    }
    x.pad(&[&[0, 0], lo].concat(), &[&[0, 0], hi].concat())
}

/// Adjoint of [`pad_spatial`].
pub fn unpad_spatial<T: Real>(x: &Tensor<T>, lo: &[usize], hi: &[usize]) -> Result<Tensor<T>> {
    if lo.iter().chain(hi).all(|&p| p == 0) {
        return Ok(x.clone());
    }
    x.unpad(&[&[0, 0], lo].concat(), &[&[0, 0], hi].concat())
}

fn check_conv_shapes<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<()> {
    if x.rank() < 3 || w.rank() != x.rank() || w.shape()[1] != x.shape()[1] {
        return Err(Error::ShapeMismatch { expected: w.shape().to_vec(), got: x.shape().to_vec() });
    }
    if let Some(b) = b {
        if b.shape() != [w.shape()[0]] {
            return Err(Error::ShapeMismatch { expected: vec![w.shape()[0]], got: b.shape().to_vec() });
        }
    }
    Ok(())
}

/// Unpadded cross-correlation. `x` is `(n_b, n_ci, ...)`, `w` is
/// `(n_co, n_ci, k...)`; each output is `b + sum over ci, taps`.
pub fn conv_valid<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: &[usize],
    dilation: &[usize],
) -> Result<Tensor<T>> {
    check_conv_shapes(x, w, b)?;
    let (nb, nci, nco) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let win = windows(&x.shape()[2..], &w.shape()[2..], stride, dilation)?;
    let s_in: usize = x.shape()[2..].iter().product();
    let s_out = win.base.len();
    let kv = win.taps.len();
    let (xd, wd) = (x.data(), w.data());
    let mut y = Tensor::zeros(&[&[nb, nco], win.out_shape.as_slice()].concat());
    let yd = y.data_mut();
    for n in 0..nb {
        for co in 0..nco {
            let bias = b.map_or(T::zero(), |b| b.data()[co]);
            let yrow = &mut yd[(n * nco + co) * s_out..][..s_out];
            for (o, yv) in yrow.iter_mut().enumerate() {
                let mut acc = bias;
                for ci in 0..nci {
                    let xs = &xd[(n * nci + ci) * s_in + win.base[o]..];
                    let ws = &wd[(co * nci + ci) * kv..][..kv];
                    for (t, &wv) in ws.iter().enumerate() {
                        acc += wv * xs[win.taps[t]];
                    }
                }
                *yv = acc;
            }
        }
    }
    Ok(y)
}

/// Cotangents of [`conv_valid`] with respect to `x`, `w` and (if asked) `b`.
pub fn conv_valid_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: &[usize],
    dilation: &[usize],
    with_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    check_conv_shapes(x, w, None)?;
    let (nb, nci, nco) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let win = windows(&x.shape()[2..], &w.shape()[2..], stride, dilation)?;
    let expected = [&[nb, nco], win.out_shape.as_slice()].concat();
    if dy.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch { expected, got: dy.shape().to_vec() });
    }
    let s_in: usize = x.shape()[2..].iter().product();
    let s_out = win.base.len();
    let kv = win.taps.len();
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = with_bias.then(|| Tensor::zeros(&[nco]));
    {
        let dxd = dx.data_mut();
        let dwd = dw.data_mut();
        for n in 0..nb {
            for co in 0..nco {
                let dyrow = &dyd[(n * nco + co) * s_out..][..s_out];
                if let Some(db) = db.as_mut() {
                    let mut acc = db.data()[co];
                    for &g in dyrow {
                        acc += g;
                    }
                    db.data_mut()[co] = acc;
                }
                for ci in 0..nci {
                    let xoff = (n * nci + ci) * s_in;
                    let woff = (co * nci + ci) * kv;
                    for (o, &g) in dyrow.iter().enumerate() {
                        let at = xoff + win.base[o];
                        for t in 0..kv {
                            dxd[at + win.taps[t]] += wd[woff + t] * g;
                            dwd[woff + t] += g * xd[at + win.taps[t]];
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Padded cross-correlation: `kernel` lists the spatial dimensions only.
pub fn conv_local<T: Real>(w: &Tensor<T>, b: Option<&Tensor<T>>, x: &Tensor<T>, kernel: &[KernelDim]) -> Result<Tensor<T>> {
    let (_, stride, dilation, lo, hi) = spatial_kernel(kernel);
    conv_valid(&pad_spatial(x, &lo, &hi)?, w, b, &stride, &dilation)
}

/// Backward of [`conv_local`]: `(dw, db, dx)`.
pub fn conv_local_adjoint<T: Real>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kernel: &[KernelDim],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (_, stride, dilation, lo, hi) = spatial_kernel(kernel);
    let (dxp, dw, db) = conv_valid_backward(&pad_spatial(x, &lo, &hi)?, w, dy, &stride, &dilation, true)?;
    Ok((dw, db.expect("bias requested"), unpad_spatial(&dxp, &lo, &hi)?))
}

/// Unpadded pooling over the spatial dimensions of `(n_b, n_c, ...)`.
/// Returns the output and, for max pooling, the flat input index chosen
/// for each output (lowest index on ties).
pub fn pool_valid<T: Real>(
    x: &Tensor<T>,
    size: &[usize],
    stride: &[usize],
    dilation: &[usize],
    mode: PoolMode,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() < 3 {
        return Err(Error::contract(format!("pooling needs batch and channel dimensions, got {:?}", x.shape())));
    }
    let (nb, nc) = (x.shape()[0], x.shape()[1]);
    let win = windows(&x.shape()[2..], size, stride, dilation)?;
    let s_in: usize = x.shape()[2..].iter().product();
    let s_out = win.base.len();
    let scale = T::one() / T::from_usize(win.taps.len()).expect("window size fits");
    let mut y = Tensor::zeros(&[&[nb, nc], win.out_shape.as_slice()].concat());
    let mut argmax = Vec::new();
    let xd = x.data();
    for (plane, ys) in y.data_mut().chunks_mut(s_out.max(1)).enumerate().take(nb * nc) {
        let off = plane * s_in;
        for (o, yv) in ys.iter_mut().enumerate() {
            let at = off + win.base[o];
            match mode {
                PoolMode::Max => {
                    let mut best = at + win.taps[0];
                    for &t in &win.taps[1..] {
                        if xd[at + t] > xd[best] {
                            best = at + t;
                        }
                    }
                    *yv = xd[best];
                    argmax.push(best);
                }
                PoolMode::Avg => {
                    let mut acc = T::zero();
                    for &t in &win.taps {
                        acc += xd[at + t];
                    }
                    *yv = acc * scale;
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Backward of [`pool_valid`]; `argmax` must come from the matching forward.
pub fn pool_valid_backward<T: Real>(
    x_shape: &[usize],
    dy: &Tensor<T>,
    size: &[usize],
    stride: &[usize],
    dilation: &[usize],
    mode: PoolMode,
    argmax: &[usize],
) -> Result<Tensor<T>> {
    let win = windows(&x_shape[2..], size, stride, dilation)?;
    let expected = [&x_shape[..2], win.out_shape.as_slice()].concat();
    if dy.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch { expected, got: dy.shape().to_vec() });
    }
    let mut dx = Tensor::zeros(x_shape);
    let s_in: usize = x_shape[2..].iter().product();
    let s_out = win.base.len();
    let dxd = dx.data_mut();
    match mode {
        PoolMode::Max => {
            if argmax.len() != dy.len() {
                return Err(Error::contract("max-pool backward without matching forward indices"));
            }
            for (&g, &i) in dy.data().iter().zip(argmax) {
                dxd[i] += g;
            }
        }
        PoolMode::Avg => {
            let scale = T::one() / T::from_usize(win.taps.len()).expect("window size fits");
            for (j, &g) in dy.data().iter().enumerate() {
                let at = (j / s_out) * s_in + win.base[j % s_out];
                for &t in &win.taps {
                    dxd[at + t] += g * scale;
                }
            }
        }
    }
    Ok(dx)
}

/// Padded pooling; `kernel` lists the spatial dimensions. Padding is zeros.
pub fn pool_local<T: Real>(x: &Tensor<T>, kernel: &[KernelDim], mode: PoolMode) -> Result<(Tensor<T>, Vec<usize>)> {
    let (size, stride, dilation, lo, hi) = spatial_kernel(kernel);
    pool_valid(&pad_spatial(x, &lo, &hi)?, &size, &stride, &dilation, mode)
}

pub fn pool_local_adjoint<T: Real>(
    x_shape: &[usize],
    dy: &Tensor<T>,
    kernel: &[KernelDim],
    mode: PoolMode,
    argmax: &[usize],
) -> Result<Tensor<T>> {
    let (size, stride, dilation, lo, hi) = spatial_kernel(kernel);
    let padded: Vec<usize> = x_shape
        .iter()
        .enumerate()
        .map(|(i, &n)| if i < 2 { n } else { n + lo[i - 2] + hi[i - 2] })
        .collect();
    let dxp = pool_valid_backward(&padded, dy, &size, &stride, &dilation, mode, argmax)?;
    unpad_spatial(&dxp, &lo, &hi)
}

/// `y[n, o] = b[o] + sum_i w[o, i] x[n, i]` with `x` of shape `(n_b, n_fi)`
/// and `w` of shape `(n_fo, n_fi)`.
pub fn affine_local<T: Real>(w: &Tensor<T>, b: Option<&Tensor<T>>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if w.rank() != 2 || x.rank() != 2 || w.shape()[1] != x.shape()[1] {
        return Err(Error::ShapeMismatch { expected: w.shape().to_vec(), got: x.shape().to_vec() });
    }
    let (nb, nfi, nfo) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if let Some(b) = b {
        if b.shape() != [nfo] {
            return Err(Error::ShapeMismatch { expected: vec![nfo], got: b.shape().to_vec() });
        }
    }
    let mut y = Tensor::zeros(&[nb, nfo]);
    let (xd, wd) = (x.data(), w.data());
    for (n, yrow) in y.data_mut().chunks_mut(nfo).enumerate() {
        let xrow = &xd[n * nfi..][..nfi];
        for (o, yv) in yrow.iter_mut().enumerate() {
            let mut acc = b.map_or(T::zero(), |b| b.data()[o]);
            for (&wv, &xv) in wd[o * nfi..][..nfi].iter().zip(xrow) {
                acc += wv * xv;
            }
            *yv = acc;
        }
    }
    Ok(y)
}

/// Backward of [`affine_local`]: `(dw, db, dx)` with `dw` and `db` summed
/// over the batch.
pub fn affine_local_adjoint<T: Real>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (nb, nfi, nfo) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if dy.shape() != [nb, nfo] || w.shape() != [nfo, nfi] {
        return Err(Error::ShapeMismatch { expected: vec![nb, nfo], got: dy.shape().to_vec() });
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = Tensor::zeros(&[nb, nfi]);
    let mut dw = Tensor::zeros(&[nfo, nfi]);
    let mut db = Tensor::zeros(&[nfo]);
    for n in 0..nb {
        let xrow = &xd[n * nfi..][..nfi];
        for o in 0..nfo {
            let g = dyd[n * nfo + o];
            db.data_mut()[o] += g;
            let wrow = &wd[o * nfi..][..nfi];
            let dxrow = &mut dx.data_mut()[n * nfi..][..nfi];
            for (dxv, &wv) in dxrow.iter_mut().zip(wrow) {
                *dxv += wv * g;
            }
            let dwrow = &mut dw.data_mut()[o * nfi..][..nfi];
            for (dwv, &xv) in dwrow.iter_mut().zip(xrow) {
                *dwv += g * xv;
            }
        }
    }
    Ok((dw, db, dx))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
    (Tensor::from_vec(x.shape(), data).expect("same shape"), mask)
}

pub fn relu_adjoint<T: Real>(dy: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if mask.len() != dy.len() {
        return Err(Error::ShapeMismatch { expected: vec![mask.len()], got: vec![dy.len()] });
    }
    let data = dy.data().iter().zip(mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
    Tensor::from_vec(dy.shape(), data)
}

/// Mean cross-entropy of `logits` `(n_b, C)` against integer labels, with
/// the cotangent of the logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch { expected: vec![labels.len()], got: logits.shape().to_vec() });
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
    }
    let nb = T::from_usize(labels.len()).expect("batch fits");
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    for (n, &label) in labels.iter().enumerate() {
        let z = &logits.data()[n * c..][..c];
        let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in z {
            sum += (v - zmax).exp();
        }
        let lse = zmax + sum.ln();
        total += lse - z[label];
        let g = &mut grad.data_mut()[n * c..][..c];
        for (k, gv) in g.iter_mut().enumerate() {
            let p = (z[k] - lse).exp();
            *gv = (p - if k == label { T::one() } else { T::zero() }) / nb;
        }
    }
    Ok((total / nb, grad))
}

/// Index of the largest logit per row, lowest index on ties.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v).unwrap()
    }

    /// Central differences of `f` at `x` against `g`, elementwise.
    fn fd_check(x: &Tensor, g: &Tensor, f: impl Fn(&Tensor) -> f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (fd - g.data()[i]).abs() / g.data()[i].abs().max(1.0);
            assert!(rel < 1e-6, "coordinate {i}: fd {fd} vs {}", g.data()[i]);
        }
    }

    fn weighted(y: &Tensor, r: &Tensor) -> f64 {
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_scaling_example() {
        let x = t(&[1, 1, 3], &[1., 2., 3.]);
        let w = t(&[1, 1, 1], &[2.]);
        let b = t(&[1], &[0.]);
        let k = [KernelDim::new(1, 1)];
        assert_eq!(conv_local(&w, Some(&b), &x, &k).unwrap().data(), &[2., 4., 6.]);
        let (dw, db, dx) = conv_local_adjoint(&w, &x, &t(&[1, 1, 3], &[1., 1., 1.]), &k).unwrap();
        assert_eq!(dx.data(), &[2., 2., 2.]);
        assert_eq!(dw.data(), &[6.]);
        assert_eq!(db.data(), &[3.]);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::random(&[2, 3, 7, 6], &mut rng);
        let w = Tensor::<f64>::random(&[4, 3, 3, 2], &mut rng);
        let b = Tensor::<f64>::random(&[4], &mut rng);
        let y = conv_valid(&x, &w, Some(&b), &[2, 1], &[1, 2]).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 4]);
        for n in 0..2 {
            for co in 0..4 {
                for i in 0..3 {
                    for j in 0..4 {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for a in 0..3 {
                                for c in 0..2 {
                                    acc += w.get(&[co, ci, a, c]) * x.get(&[n, ci, 2 * i + a, j + 2 * c]);
                                }
                            }
                        }
                        assert!((y.get(&[n, co, i, j]) - acc).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::random(&[2, 2, 5, 4], &mut rng);
        let w = Tensor::<f64>::random(&[3, 2, 3, 2], &mut rng);
        let b = Tensor::<f64>::random(&[3], &mut rng);
        let k = [KernelDim::padded(3, 1), KernelDim::new(2, 1)];
        let r = Tensor::<f64>::random(conv_local(&w, Some(&b), &x, &k).unwrap().shape(), &mut rng);
        let (dw, db, dx) = conv_local_adjoint(&w, &x, &r, &k).unwrap();
        fd_check(&x, &dx, |x| weighted(&conv_local(&w, Some(&b), x, &k).unwrap(), &r));
        fd_check(&w, &dw, |w| weighted(&conv_local(w, Some(&b), &x, &k).unwrap(), &r));
        fd_check(&b, &db, |b| weighted(&conv_local(&w, Some(b), &x, &k).unwrap(), &r));
    }

    #[test]
    fn pooling_examples() {
        let x = t(&[1, 1, 4], &[1., 3., 2., 2.]);
        let k = [KernelDim::new(2, 2)];
        let (y, idx) = pool_local(&x, &k, PoolMode::Max).unwrap();
        assert_eq!(y.data(), &[3., 2.]);
        // tie between positions 2 and 3 goes to 2
        assert_eq!(idx, vec![1, 2]);
        let dx = pool_local_adjoint(&[1, 1, 2], &t(&[1, 1, 1], &[1.]), &k, PoolMode::Avg, &[]).unwrap();
        assert_eq!(dx.data(), &[0.5, 0.5]);
        assert!(pool_local(&t(&[1, 1, 1], &[1.]), &k, PoolMode::Max).is_err());
    }

    #[test]
    fn pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::random(&[2, 2, 6, 5], &mut rng);
        let k = [KernelDim::new(2, 2), KernelDim::padded(3, 1)];
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let (y, idx) = pool_local(&x, &k, mode).unwrap();
            let r = Tensor::<f64>::random(y.shape(), &mut rng);
            let dx = pool_local_adjoint(x.shape(), &r, &k, mode, &idx).unwrap();
            // random data has no ties, so argmax is stable under h = 1e-5
            fd_check(&x, &dx, |x| weighted(&pool_local(x, &k, mode).unwrap().0, &r));
        }
    }

    #[test]
    fn affine_examples_and_gradients() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let x = t(&[1, 2], &[5., -3.]);
        assert_eq!(affine_local(&eye, Some(&t(&[2], &[0., 0.])), &x).unwrap(), x);
        let w = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(affine_local(&w, Some(&t(&[2], &[0., 0.])), &t(&[1, 2], &[1., 1.])).unwrap().data(), &[3., 7.]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::random(&[3, 5], &mut rng);
        let w = Tensor::<f64>::random(&[4, 5], &mut rng);
        let b = Tensor::<f64>::random(&[4], &mut rng);
        let r = Tensor::<f64>::random(&[3, 4], &mut rng);
        let (dw, db, dx) = affine_local_adjoint(&w, &x, &r).unwrap();
        fd_check(&x, &dx, |x| weighted(&affine_local(&w, Some(&b), x).unwrap(), &r));
        fd_check(&w, &dw, |w| weighted(&affine_local(w, Some(&b), &x).unwrap(), &r));
        fd_check(&b, &db, |b| weighted(&affine_local(&w, Some(b), &x).unwrap(), &r));
    }

    #[test]
    fn relu_example() {
        let (y, mask) = relu(&t(&[2], &[-1., 2.]));
        assert_eq!(y.data(), &[0., 2.]);
        assert_eq!(relu_adjoint(&t(&[2], &[5., 5.]), &mask).unwrap().data(), &[0., 5.]);
    }

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let (loss, _) = cross_entropy(&Tensor::<f64>::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-15);
        assert!(cross_entropy(&Tensor::<f64>::zeros(&[1, 10]), &[10]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::<f64>::random(&[4, 6], &mut rng);
        let labels = [1, 0, 5, 3];
        let (_, g) = cross_entropy(&z, &labels).unwrap();
        fd_check(&z, &g, |z| cross_entropy(z, &labels).unwrap().0);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_rows(&t(&[2, 3], &[1., 3., 3., 0., -1., -2.])), vec![1, 0]);
    }
}
