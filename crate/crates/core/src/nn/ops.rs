//! Forward and analytic backward passes for the layer primitives.
//!
//! Backward functions take whatever the forward needed (inputs, or cached
//! outputs) plus the upstream gradient, and return gradients for every
//! differentiable argument.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Smallest row norm `l2_normalize` accepts.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

fn check_dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_rank("dense", 2)?;
    w.expect_rank("dense", 2)?;
    b.expect_rank("dense", 1)?;
    let (n, i) = (x.dim(0), x.dim(1));
    let o = w.dim(1);
    if w.dim(0) != i || b.dim(0) != o {
        return Err(Error::shape("dense", format!("x {:?}, W {:?}, b {:?}", x.shape, w.shape, b.shape)));
    }
    Ok((n, i, o))
}

/// `x · W + b` for `x: [N×I]`, `W: [I×O]`, `b: [O]`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, i, o) = check_dense(x, w, b)?;
    let mut out = Tensor::zeros(&[n, o]);
    for r in 0..n {
        let dst = &mut out.data[r * o..(r + 1) * o];
        dst.copy_from_slice(&b.data);
        for (k, &xv) in x.data[r * i..(r + 1) * i].iter().enumerate() {
            for (d, &wv) in dst.iter_mut().zip(&w.data[k * o..(k + 1) * o]) {
                *d += xv * wv;
            }
        }
    }
    Ok(out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let b = Tensor::zeros(&[w.dim(1)]);
    let (n, i, o) = check_dense(x, w, &b)?;
    if grad_out.shape != [n, o] {
        return Err(Error::shape("dense_backward", format!("grad {:?}", grad_out.shape)));
    }
    let mut gx = Tensor::zeros(&[n, i]);
    let mut gw = Tensor::zeros(&[i, o]);
    let mut gb = Tensor::zeros(&[o]);
    for r in 0..n {
        let g = &grad_out.data[r * o..(r + 1) * o];
        for (bb, &gv) in gb.data.iter_mut().zip(g) {
            *bb += gv;
        }
        for k in 0..i {
            let wrow = &w.data[k * o..(k + 1) * o];
            gx.data[r * i + k] = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
            let xv = x.data[r * i + k];
            for (d, &gv) in gw.data[k * o..(k + 1) * o].iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    Ok(DenseGrads { x: gx, w: gw, b: gb })
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// Passes `grad` where the forward input was positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().zip(&grad_out.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub x: Tensor,
    pub k: Tensor,
    pub b: Tensor,
}

fn check_conv(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<[usize; 5]> {
    x.expect_rank("conv2d", 4)?;
    k.expect_rank("conv2d", 4)?;
    b.expect_rank("conv2d", 1)?;
    let [n, cin, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let cout = k.dim(0);
    if k.shape != [cout, cin, 3, 3] || b.dim(0) != cout {
        return Err(Error::shape("conv2d", format!("x {:?}, K {:?}, b {:?}", x.shape, k.shape, b.shape)));
    }
    if h < 3 || w < 3 {
        return Err(Error::shape("conv2d", format!("spatial dims {h}x{w} below 3x3")));
    }
    Ok([n, cin, cout, h, w])
}

/// Column range `[lo, hi)` of output positions whose input column
/// `x + dx - 1` lies inside `0..w`.
#[inline]
fn valid_span(dx: usize, w: usize) -> (usize, usize) {
    match dx {
        0 => (1, w),
        1 => (0, w),
        _ => (0, w - 1),
    }
}

/// 3×3 cross-correlation, stride 1, zero padding 1.
/// `x: [N×Cin×H×W]`, `K: [Cout×Cin×3×3]`, `b: [Cout]`.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, cin, cout, h, w] = check_conv(x, k, b)?;
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    for s in 0..n {
        for co in 0..cout {
            let dst = &mut out.data[(s * cout + co) * plane..(s * cout + co + 1) * plane];
            dst.fill(b.data[co]);
            for ci in 0..cin {
                let src = &x.data[(s * cin + ci) * plane..(s * cin + ci + 1) * plane];
                let kern = &k.data[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kv = kern[dy * 3 + dx];
                        let (lo, hi) = valid_span(dx, w);
                        for y in 0..h {
                            let iy = y + dy;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let srow = &src[(iy - 1) * w..iy * w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            for (d, &sv) in drow[lo..hi].iter_mut().zip(&srow[lo + dx - 1..hi + dx - 1]) {
                                *d += kv * sv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(x: &Tensor, k: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let b = Tensor::zeros(&[k.dim(0)]);
    let [n, cin, cout, h, w] = check_conv(x, k, &b)?;
    if grad_out.shape != [n, cout, h, w] {
        return Err(Error::shape("conv2d_backward", format!("grad {:?}", grad_out.shape)));
    }
    let plane = h * w;
    let mut gx = Tensor::zeros(&x.shape);
    let mut gk = Tensor::zeros(&k.shape);
    let mut gb = Tensor::zeros(&[cout]);
    for s in 0..n {
        for co in 0..cout {
            let g = &grad_out.data[(s * cout + co) * plane..(s * cout + co + 1) * plane];
            gb.data[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let xin = &x.data[(s * cin + ci) * plane..(s * cin + ci + 1) * plane];
                let kbase = (co * cin + ci) * 9;
                let gxs = &mut gx.data[(s * cin + ci) * plane..(s * cin + ci + 1) * plane];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kv = k.data[kbase + dy * 3 + dx];
                        let (lo, hi) = valid_span(dx, w);
                        let mut acc = 0.0;
                        for y in 0..h {
                            let iy = y + dy;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let grow = &g[y * w + lo..y * w + hi];
                            let xrow = &xin[(iy - 1) * w + lo + dx - 1..(iy - 1) * w + hi + dx - 1];
                            acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            let gxrow = &mut gxs[(iy - 1) * w + lo + dx - 1..(iy - 1) * w + hi + dx - 1];
                            for (d, &gv) in gxrow.iter_mut().zip(grow) {
                                *d += kv * gv;
                            }
                        }
                        gk.data[kbase + dy * 3 + dx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads { x: gx, k: gk, b: gb })
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// cell, the flat input index of the selected maximum (first in row-major
/// order on ties).
pub fn maxpool2d(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    x.expect_rank("maxpool2d", 4)?;
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2d", format!("odd spatial dims {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; out.len()];
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let cands = [
                    base + 2 * oy * w + 2 * ox,
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let mut best = cands[0];
                for &ci in &cands[1..] {
                    if x.data[ci] > x.data[best] {
                        best = ci;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    for (&src, &g) in argmax.iter().zip(&grad_out.data) {
        gx.data[src] += g;
    }
    gx
}

/// Spatial mean, `[N×C×H×W] -> [N×C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    x.expect_rank("global_avg_pool", 4)?;
    let [n, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let plane = h * w;
    let data = x.data.chunks_exact(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let plane = input_shape[2] * input_shape[3];
    let inv = 1.0 / plane as f64;
    let mut gx = Tensor::zeros(input_shape);
    for (chunk, &g) in gx.data.chunks_exact_mut(plane).zip(&grad_out.data) {
        chunk.fill(g * inv);
    }
    gx
}

/// Divides each row by its Euclidean norm. Returns the normalized rows and
/// the norms (needed by the backward pass).
pub fn l2_normalize(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    x.expect_rank("l2_normalize", 2)?;
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.dim(0));
    for r in 0..x.dim(0) {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= MIN_NORM {
            return Err(Error::NonFinite(format!("row {r} has norm {norm:e}, too small to normalize")));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Applies `(I − z zᵀ) / ‖x‖` row by row.
pub fn l2_normalize_backward(z: &Tensor, norms: &[f64], grad_out: &Tensor) -> Tensor {
    let mut gx = grad_out.clone();
    for (r, &norm) in norms.iter().enumerate() {
        let zr = z.row(r);
        let dot: f64 = zr.iter().zip(grad_out.row(r)).map(|(a, b)| a * b).sum();
        for (g, &zv) in gx.row_mut(r).iter_mut().zip(zr) {
            *g = (*g - dot * zv) / norm;
        }
    }
    gx
}

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    x.expect_rank("softmax", 2)?;
    let mut out = x.clone();
    for r in 0..x.dim(0) {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_examples() {
        let x = t(&[2, 2], &[1.0, 2.0, -3.0, 0.5]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let out = dense(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0]), &t(&[1], &[5.0])).unwrap();
        assert_eq!(out.data, vec![16.0]);
        assert!(dense(&x, &t(&[3, 1], &[1.0; 3]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = t(&[2], &[-1.0, 2.0]);
        assert_eq!(relu(&x).data, vec![0.0, 2.0]);
        assert_eq!(relu_backward(&x, &t(&[2], &[5.0, 7.0])).data, vec![0.0, 7.0]);
        let pos = t(&[3], &[0.0, 1.0, 4.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn conv_examples() {
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data[4] = 1.0;
        let x = Tensor::new(vec![1, 1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(conv2d(&x, &k, &Tensor::zeros(&[1])).unwrap(), x);

        let ones = t(&[1, 1, 3, 3], &[1.0; 9]);
        let out = conv2d(&ones, &ones, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.data, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

        assert!(conv2d(&t(&[1, 1, 2, 2], &[1.0; 4]), &ones, &Tensor::zeros(&[1])).is_err());
        assert!(conv2d(&ones, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let c = t(&[1, 1, 2, 4], &[3.0; 8]);
        assert_eq!(maxpool2d(&c).unwrap().0.data, vec![3.0, 3.0]);
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (out, arg) = maxpool2d(&x).unwrap();
        assert_eq!(out.data, vec![4.0]);
        let g = maxpool2d_backward(&x.shape, &arg, &t(&[1, 1, 1, 1], &[2.5]));
        assert_eq!(g.data, vec![0.0, 0.0, 0.0, 2.5]);
        // ties go to the first cell in row-major order
        let tie = t(&[1, 1, 2, 2], &[1.0, 7.0, 7.0, 7.0]);
        assert_eq!(maxpool2d(&tie).unwrap().1, vec![1]);
        assert!(maxpool2d(&t(&[1, 1, 3, 2], &[0.0; 6])).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data, vec![4.0]);
        let g = global_avg_pool_backward(&x.shape, &t(&[1, 1], &[8.0]));
        assert_eq!(g.data, vec![2.0; 4]);
    }

    #[test]
    fn l2_examples() {
        let (z, n) = l2_normalize(&t(&[2, 2], &[3.0, 4.0, 0.6, 0.8])).unwrap();
        assert_eq!(n, vec![5.0, 1.0]);
        assert!((z.data[0] - 0.6).abs() < 1e-15 && (z.data[1] - 0.8).abs() < 1e-15);
        assert_eq!(&z.data[2..], &[0.6, 0.8]);
        assert!(l2_normalize(&t(&[1, 2], &[0.0, 1e-14])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[1, 4], &[2.0; 4])).unwrap();
        assert!(s.data.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let s = softmax(&t(&[1, 2], &[0.0, 3f64.ln()])).unwrap();
        assert!((s.data[0] - 0.25).abs() < 1e-15 && (s.data[1] - 0.75).abs() < 1e-15);
        let x = t(&[2, 3], &[0.1, -2.0, 3.0, 700.0, 699.0, -5.0]);
        let shifted = Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| v + 123.0).collect() };
        let (a, b) = (softmax(&x).unwrap(), softmax(&shifted).unwrap());
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
        for r in 0..2 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
