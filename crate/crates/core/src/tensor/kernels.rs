//! Value-level kernels shared by the tape and by code that needs no gradients.

use super::Tensor;
use crate::error::{Error, Result};

pub const COSINE_EPS: f64 = 1e-8;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul")?;
    let (k2, n) = dims2(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out[m,n] += a[m,k] * b[k,n]`, accumulating over k in ascending order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::shape(
            op,
            format!("expected a matrix, got shape {s:?}"),
        )),
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for {:?}", x.shape()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(src[at(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - mx).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Interpolation stencil for one continuous point on an `h x w` grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    /// Flat cell indices (row * w + col) of the four corners.
    pub cells: [usize; 4],
    pub weights: [f64; 4],
    /// d weight / d x and d weight / d y in normalized coordinates.
    pub dx: [f64; 4],
    pub dy: [f64; 4],
}

fn axis_coord(t: f64, n: usize) -> (usize, usize, f64, f64) {
    if n < 2 {
        return (0, 0, 0.0, 0.0);
    }
    let scale = (n - 1) as f64;
    let inside = (0.0..=1.0).contains(&t);
    let p = t.clamp(0.0, 1.0) * scale;
    let i0 = (p.floor() as usize).min(n - 2);
    let frac = p - i0 as f64;
    (i0, i0 + 1, frac, if inside { scale } else { 0.0 })
}

/// Points outside [0,1] clamp to the border; the clamped coordinate then
/// carries zero derivative.
pub(crate) fn stencil(x: f64, y: f64, h: usize, w: usize) -> Stencil {
    let (x0, x1, fx, sx) = axis_coord(x, w);
    let (y0, y1, fy, sy) = axis_coord(y, h);
    Stencil {
        cells: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        weights: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        dx: [-(1.0 - fy) * sx, (1.0 - fy) * sx, -fy * sx, fy * sx],
        dy: [-(1.0 - fx) * sy, -fx * sy, (1.0 - fx) * sy, fx * sy],
    }
}

/// Samples a `[H, W, C]` map at normalized `(x, y)`.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Tensor> {
    let (h, w, c) = dims3(map, "bilinear_sample")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_sample", "empty map"));
    }
    let st = stencil(x, y, h, w);
    let mut out = vec![0.0; c];
    for k in 0..4 {
        let cell = &map.data()[st.cells[k] * c..(st.cells[k] + 1) * c];
        for (o, v) in out.iter_mut().zip(cell) {
            *o += st.weights[k] * v;
        }
    }
    Ok(Tensor::vector(out))
}

pub(crate) fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::shape(
            op,
            format!("expected rank 3, got shape {s:?}"),
        )),
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    let (dot, nu, nv) = cosine_parts(u, v);
    dot / (nu * nv + COSINE_EPS)
}

pub(crate) fn cosine_parts(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    (dot, uu.sqrt(), vv.sqrt())
}

/// 2x2 average pooling of a `[H, W, C]` map with ceil division; border
/// windows average over the cells they actually cover.
pub fn avg_pool2(map: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3(map, "avg_pool2")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..oh {
        for j in 0..ow {
            let cells = pool_window(i, j, h, w);
            let inv = 1.0 / cells.len() as f64;
            let o = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
            for cell in cells {
                let src = &map.data()[cell * c..(cell + 1) * c];
                for (a, b) in o.iter_mut().zip(src) {
                    *a += b * inv;
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub(crate) fn pool_window(i: usize, j: usize, h: usize, w: usize) -> Vec<usize> {
    let mut cells = Vec::with_capacity(4);
    for r in 2 * i..(2 * i + 2).min(h) {
        for col in 2 * j..(2 * j + 2).min(w) {
            cells.push(r * w + col);
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-6);
        assert!(s.data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.0, 0.0, 5.0]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for col in 0..3 {
            let sum = s.data()[col] + s.data()[3 + col];
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_weights_sum_to_one() {
        for &(x, y) in &[(0.0, 0.0), (1.0, 1.0), (0.3, 0.77), (-0.5, 1.5)] {
            let st = stencil(x, y, 5, 7);
            let s: f64 = st.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_point_has_zero_coordinate_derivative() {
        let st = stencil(-0.2, 0.5, 4, 4);
        assert!(st.dx.iter().all(|&d| d == 0.0));
        assert!(st.dy.iter().any(|&d| d != 0.0));
    }

    #[test]
    fn pool_odd_sizes() {
        let map = Tensor::new(vec![3, 3, 1], (0..9).map(f64::from).collect()).unwrap();
        let p = avg_pool2(&map).unwrap();
        assert_eq!(p.shape(), &[2, 2, 1]);
        assert_eq!(p.data(), &[2.0, 3.5, 6.5, 8.0]);
    }
}
