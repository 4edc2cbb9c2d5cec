//! Value-level kernels shared by the tape primitives and their adjoints.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{a:?} incompatible with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `target`, the flat index of `source` it reads under broadcasting.
fn broadcast_index_map(source: &[usize], target: &[usize]) -> Vec<usize> {
    let n = target.len();
    let offset = n - source.len();
    let src_strides = strides(source);
    let total: usize = target.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let mut flat = 0;
        for d in offset..n {
            let sd = d - offset;
            if source[sd] != 1 {
                flat += idx[d] * src_strides[sd];
            }
        }
        map.push(flat);
        for d in (0..n).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let full = broadcast_shape(x.shape(), shape)?;
    if full != shape {
        return Err(Error::shape(
            "broadcast_to",
            format!("{:?} -> {shape:?}", x.shape()),
        ));
    }
    let map = broadcast_index_map(x.shape(), shape);
    let data = map.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Adjoint of `broadcast_to`: sums `g` back down to `shape`.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = broadcast_index_map(shape, g.shape());
    let mut out = vec![0.0; shape.iter().product()];
    for (&i, &v) in map.iter().zip(g.data()) {
        out[i] += v;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn check_kernel(x: &Tensor, k: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let (h, w) = x.hw()?;
    let [s, s2] = k.shape()[..] else {
        return Err(Error::shape(op, format!("kernel must be 2-D, got {:?}", k.shape())));
    };
    if s != s2 || s % 2 == 0 {
        return Err(Error::shape(
            op,
            format!("kernel must be square with odd side, got {:?}", k.shape()),
        ));
    }
    if s > h || s > w {
        return Err(Error::shape(
            op,
            format!("kernel side {s} exceeds image extent {h}x{w}"),
        ));
    }
    Ok((h, w, s))
}

#[inline]
fn tap(i: usize, c: usize, a: usize, n: usize, circular: bool) -> Option<usize> {
    let pos = i as isize + c as isize - a as isize;
    if circular {
        Some(pos.rem_euclid(n as isize) as usize)
    } else if pos >= 0 && (pos as usize) < n {
        Some(pos as usize)
    } else {
        None
    }
}

/// Same-size 2-D convolution over the trailing two axes.
pub(crate) fn conv2d_same(x: &Tensor, k: &Tensor, circular: bool) -> Result<Tensor> {
    let (h, w, s) = check_kernel(x, k, "conv2d_same")?;
    let c = s / 2;
    let planes = x.numel() / (h * w);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        let xp = &xd[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for a in 0..s {
                let Some(si) = tap(i, c, a, h, circular) else { continue };
                for j in 0..w {
                    let mut acc = 0.0;
                    for b in 0..s {
                        if let Some(sj) = tap(j, c, b, w, circular) {
                            acc += kd[a * s + b] * xp[si * w + sj];
                        }
                    }
                    op[i * w + j] += acc;
                }
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn conv2d_same_vjp(x: &Tensor, k: &Tensor, g: &Tensor, circular: bool) -> (Tensor, Tensor) {
    let (h, w) = x.hw().expect("validated in forward");
    let s = k.shape()[0];
    let c = s / 2;
    let planes = x.numel() / (h * w);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; k.numel()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for a in 0..s {
                let Some(si) = tap(i, c, a, h, circular) else { continue };
                for j in 0..w {
                    let go = gd[base + i * w + j];
                    if go == 0.0 {
                        continue;
                    }
                    for b in 0..s {
                        if let Some(sj) = tap(j, c, b, w, circular) {
                            let xi = base + si * w + sj;
                            gx[xi] += go * kd[a * s + b];
                            gk[a * s + b] += go * xd[xi];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
    )
}

fn pooled_shape(x: &Tensor, factor: usize) -> Result<(usize, usize, Vec<usize>)> {
    let (h, w) = x.hw()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_pool2d",
            format!("extent {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = h / factor;
    shape[n - 1] = w / factor;
    Ok((h, w, shape))
}

/// Mean over non-overlapping `factor x factor` blocks.
pub(crate) fn avg_pool2d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, shape) = pooled_shape(x, factor)?;
    let (oh, ow) = (h / factor, w / factor);
    let planes = x.numel() / (h * w);
    let inv = 1.0 / (factor * factor) as f64;
    let xd = x.data();
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[p * oh * ow + (i / factor) * ow + j / factor] += xd[p * h * w + i * w + j] * inv;
            }
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn avg_pool2d_vjp(input_shape: &[usize], factor: usize, g: &Tensor) -> Tensor {
    let n = input_shape.len();
    let (h, w) = (input_shape[n - 2], input_shape[n - 1]);
    let (oh, ow) = (h / factor, w / factor);
    let planes = input_shape.iter().product::<usize>() / (h * w);
    let inv = 1.0 / (factor * factor) as f64;
    let gd = g.data();
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[p * h * w + i * w + j] = gd[p * oh * ow + (i / factor) * ow + j / factor] * inv;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

fn check_flow(x: &Tensor, flow: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = x.hw()?;
    if flow.shape() != [2, h, w] {
        return Err(Error::shape(
            "bilinear_warp",
            format!("flow must be [2, {h}, {w}], got {:?}", flow.shape()),
        ));
    }
    Ok((h, w))
}

struct Sample {
    y0: isize,
    x0: isize,
    wy: f64,
    wx: f64,
}

#[inline]
fn sample_at(i: usize, j: usize, dy: f64, dx: f64) -> Sample {
    let py = i as f64 - dy;
    let px = j as f64 - dx;
    let fy = py.floor();
    let fx = px.floor();
    Sample {
        y0: fy as isize,
        x0: fx as isize,
        wy: py - fy,
        wx: px - fx,
    }
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Backward warp: output pixel `p` reads `x` at `p - flow(p)`; zero outside the grid.
/// Flow channel 0 is the row displacement, channel 1 the column displacement.
pub(crate) fn bilinear_warp(x: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (h, w) = check_flow(x, flow)?;
    let hw = h * w;
    let planes = x.numel() / hw;
    let fd = flow.data();
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        let plane = &x.data()[p * hw..(p + 1) * hw];
        for i in 0..h {
            for j in 0..w {
                let s = sample_at(i, j, fd[i * w + j], fd[hw + i * w + j]);
                let v00 = pixel(plane, h, w, s.y0, s.x0);
                let v01 = pixel(plane, h, w, s.y0, s.x0 + 1);
                let v10 = pixel(plane, h, w, s.y0 + 1, s.x0);
                let v11 = pixel(plane, h, w, s.y0 + 1, s.x0 + 1);
                out[p * hw + i * w + j] = (1.0 - s.wy) * ((1.0 - s.wx) * v00 + s.wx * v01)
                    + s.wy * ((1.0 - s.wx) * v10 + s.wx * v11);
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn bilinear_warp_vjp(x: &Tensor, flow: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (h, w) = x.hw().expect("validated in forward");
    let hw = h * w;
    let planes = x.numel() / hw;
    let fd = flow.data();
    let mut gx = vec![0.0; x.numel()];
    let mut gf = vec![0.0; flow.numel()];
    let scatter = |buf: &mut [f64], y: isize, xx: isize, v: f64| {
        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
            buf[y as usize * w + xx as usize] += v;
        }
    };
    for p in 0..planes {
        let plane = &x.data()[p * hw..(p + 1) * hw];
        let gplane = &mut gx[p * hw..(p + 1) * hw];
        for i in 0..h {
            for j in 0..w {
                let go = g.data()[p * hw + i * w + j];
                if go == 0.0 {
                    continue;
                }
                let s = sample_at(i, j, fd[i * w + j], fd[hw + i * w + j]);
                let v00 = pixel(plane, h, w, s.y0, s.x0);
                let v01 = pixel(plane, h, w, s.y0, s.x0 + 1);
                let v10 = pixel(plane, h, w, s.y0 + 1, s.x0);
                let v11 = pixel(plane, h, w, s.y0 + 1, s.x0 + 1);
                scatter(gplane, s.y0, s.x0, go * (1.0 - s.wy) * (1.0 - s.wx));
                scatter(gplane, s.y0, s.x0 + 1, go * (1.0 - s.wy) * s.wx);
                scatter(gplane, s.y0 + 1, s.x0, go * s.wy * (1.0 - s.wx));
                scatter(gplane, s.y0 + 1, s.x0 + 1, go * s.wy * s.wx);
                // sample position moves opposite to the displacement
                let d_py = (1.0 - s.wx) * (v10 - v00) + s.wx * (v11 - v01);
                let d_px = (1.0 - s.wy) * (v01 - v00) + s.wy * (v11 - v10);
                gf[i * w + j] -= go * d_py;
                gf[hw + i * w + j] -= go * d_px;
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(flow.shape().to_vec(), gf),
    )
}

pub(crate) fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn softmax_slice_vjp(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = yi * (gi - dot);
    }
}
