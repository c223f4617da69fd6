//! Raw tensor kernels with hand-written backward passes.
//!
//! Everything works on NCHW `f64` arrays in standard layout. Convolution is
//! lowered to a GEMM over an im2col buffer; the buffer is kept by the caller
//! so the backward pass can reuse it.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin_per_group(), self.kernel, self.kernel]
    }
}

/// Lowers channels `[c0, c0 + cn)` of `x` to a `(cn*k*k, n*ho*wo)` matrix.
fn im2col(x: &ArrayView4<f64>, c0: usize, cn: usize, g: &ConvGeom) -> Array2<f64> {
    let (n, _, h, w) = x.dim();
    let (ho, wo) = g.out_hw(h, w);
    let k = g.kernel;
    let cols_n = n * ho * wo;
    let mut out = vec![0.0; cn * k * k * cols_n];
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let c_total = x.dim().1;
    for c in 0..cn {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane = &xs[((b * c_total) + c0 + c) * h * w..][..h * w];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let base = b * ho * wo + oy * wo;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..][..w];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((cn * k * k, cols_n), out).expect("im2col shape")
}

/// Scatter-adds a column matrix back into channels `[c0, c0 + cn)` of `dx`.
fn col2im(cols: &ArrayView2<f64>, dx: &mut Array4<f64>, c0: usize, cn: usize, g: &ConvGeom) {
    let (n, c_total, h, w) = dx.dim();
    let (ho, wo) = g.out_hw(h, w);
    let k = g.kernel;
    let cols_n = n * ho * wo;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let dxs = dx.as_slice_mut().expect("standard layout");
    for c in 0..cn {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cs[row * cols_n..(row + 1) * cols_n];
                for b in 0..n {
                    let plane_off = ((b * c_total) + c0 + c) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = b * ho * wo + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dxs[plane_off + iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(c, n*h*w)` matrix view of an NCHW block, channels first.
fn to_channel_major(y: &ArrayView4<f64>, c0: usize, cn: usize) -> Array2<f64> {
    let (n, _, h, w) = y.dim();
    let mut out = Array2::zeros((cn, n * h * w));
    for b in 0..n {
        for c in 0..cn {
            let src = y.slice(s![b, c0 + c, .., ..]);
            let mut dst = out.slice_mut(s![c, b * h * w..(b + 1) * h * w]);
            for (d, v) in dst.iter_mut().zip(src.iter()) {
                *d = *v;
            }
        }
    }
    out
}

pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_dim: (usize, usize, usize, usize),
}

pub fn conv2d_forward(
    x: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    bias: &ArrayView1<f64>,
    g: &ConvGeom,
) -> (Array4<f64>, ConvCache) {
    let (n, c, h, w) = x.dim();
    assert_eq!(c, g.cin, "conv input channels");
    let (ho, wo) = g.out_hw(h, w);
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let kk = g.kernel * g.kernel;
    let mut out = Array4::zeros((n, g.cout, ho, wo));
    let mut cols_all = Vec::with_capacity(g.groups);
    for grp in 0..g.groups {
        let cols = im2col(x, grp * cin_g, cin_g, g);
        let wg = weight.slice(s![grp * cout_g..(grp + 1) * cout_g, .., .., ..]);
        let wg = wg.to_shape((cout_g, cin_g * kk)).expect("weight reshape");
        let yg = wg.dot(&cols);
        for b in 0..n {
            for co in 0..cout_g {
                let oc = grp * cout_g + co;
                let bv = bias[oc];
                let src = yg.slice(s![co, b * ho * wo..(b + 1) * ho * wo]);
                let mut dst = out.slice_mut(s![b, oc, .., ..]);
                for (d, v) in dst.iter_mut().zip(src.iter()) {
                    *d = *v + bv;
                }
            }
        }
        cols_all.push(cols);
    }
    (out, ConvCache { cols: cols_all, in_dim: (n, c, h, w) })
}

/// Returns `dx` and, when requested, `(dweight, dbias)`.
pub fn conv2d_backward(
    cache: &ConvCache,
    dy: &ArrayView4<f64>,
    weight: &ArrayView4<f64>,
    g: &ConvGeom,
    want_param_grads: bool,
) -> (Array4<f64>, Option<(Array4<f64>, Array1<f64>)>) {
    let mut dx = Array4::zeros(cache.in_dim);
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    let kk = g.kernel * g.kernel;
    let mut dweight = want_param_grads.then(|| Array4::zeros(weight.raw_dim()));
    let mut dbias = want_param_grads.then(|| Array1::zeros(g.cout));
    for grp in 0..g.groups {
        let dyg = to_channel_major(dy, grp * cout_g, cout_g);
        let wg = weight.slice(s![grp * cout_g..(grp + 1) * cout_g, .., .., ..]);
        let wg = wg.to_shape((cout_g, cin_g * kk)).expect("weight reshape");
        let dcols = wg.t().dot(&dyg);
        col2im(&dcols.view(), &mut dx, grp * cin_g, cin_g, g);
        if let (Some(dw), Some(db)) = (dweight.as_mut(), dbias.as_mut()) {
            let dwg = dyg.dot(&cache.cols[grp].t());
            let dwg = dwg
                .into_shape_with_order((cout_g, cin_g, g.kernel, g.kernel))
                .expect("dweight reshape");
            dw.slice_mut(s![grp * cout_g..(grp + 1) * cout_g, .., .., ..])
                .assign(&dwg);
            let sums = dyg.sum_axis(Axis(1));
            db.slice_mut(s![grp * cout_g..(grp + 1) * cout_g]).assign(&sums);
        }
    }
    (dx, dweight.zip(dbias))
}

pub fn relu_forward(x: Array4<f64>) -> Array4<f64> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient through ReLU given the ReLU's *output*.
pub fn relu_backward(y: &ArrayView4<f64>, dy: &ArrayView4<f64>) -> Array4<f64> {
    let mut dx = dy.to_owned();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0
        }
    });
    dx
}

/// 2x2 max pooling with stride 2; odd trailing rows/cols are dropped.
pub fn maxpool2_forward(x: &ArrayView4<f64>) -> (Array4<f64>, Vec<u8>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::zeros((n, c, ho, wo));
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0u8;
                    for i in 0..4u8 {
                        let v = x[[b, ch, 2 * oy + (i / 2) as usize, 2 * ox + (i % 2) as usize]];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                    out[[b, ch, oy, ox]] = best;
                    arg.push(best_i);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(
    arg: &[u8],
    dy: &ArrayView4<f64>,
    in_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::zeros(in_dim);
    let (n, c, ho, wo) = dy.dim();
    let mut idx = 0;
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = arg[idx];
                    idx += 1;
                    dx[[b, ch, 2 * oy + (i / 2) as usize, 2 * ox + (i % 2) as usize]] +=
                        dy[[b, ch, oy, ox]];
                }
            }
        }
    }
    dx
}

pub fn avgpool2_forward(x: &ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / 2, w / 2);
    Array4::from_shape_fn((n, c, ho, wo), |(b, ch, oy, ox)| {
        0.25 * (x[[b, ch, 2 * oy, 2 * ox]]
            + x[[b, ch, 2 * oy, 2 * ox + 1]]
            + x[[b, ch, 2 * oy + 1, 2 * ox]]
            + x[[b, ch, 2 * oy + 1, 2 * ox + 1]])
    })
}

pub fn avgpool2_backward(
    dy: &ArrayView4<f64>,
    in_dim: (usize, usize, usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::zeros(in_dim);
    let (n, c, ho, wo) = dy.dim();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = 0.25 * dy[[b, ch, oy, ox]];
                    for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dx[[b, ch, 2 * oy + dy_, 2 * ox + dx_]] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Global average pool, `(n, c, h, w) -> (n, c)`.
pub fn gap_forward(x: &ArrayView4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn gap_backward(dy: &ArrayView2<f64>, in_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (n, c, h, w) = in_dim;
    let scale = 1.0 / (h * w) as f64;
    Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dy[[b, ch]] * scale)
}

/// `x @ w^T + b` with `w: (out, in)`.
pub fn linear_forward(x: &ArrayView2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
    want_param_grads: bool,
) -> (Array2<f64>, Option<(Array2<f64>, Array1<f64>)>) {
    let dx = dy.dot(w);
    let pg = want_param_grads.then(|| (dy.t().dot(x), dy.sum_axis(Axis(0))));
    (dx, pg)
}

/// Row-wise softmax, numerically stabilised.
pub fn softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy of `logits` against integer `labels` and its gradient
/// with respect to the logits.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let lp = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = lp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        loss -= lp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    (loss / n as f64, grad / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct-loop convolution used as an oracle for the im2col path.
    fn conv_naive(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>, g: &ConvGeom) -> Array4<f64> {
        let (n, _, h, wd) = x.dim();
        let (ho, wo) = g.out_hw(h, wd);
        let (cig, cog) = (g.cin_per_group(), g.cout_per_group());
        Array4::from_shape_fn((n, g.cout, ho, wo), |(bi, oc, oy, ox)| {
            let grp = oc / cog;
            let mut acc = b[oc];
            for ci in 0..cig {
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[[oc, ci, ky, kx]]
                                * x[[bi, grp * cig + ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for g in [
            ConvGeom { cin: 3, cout: 4, kernel: 3, stride: 1, pad: 1, groups: 1 },
            ConvGeom { cin: 4, cout: 6, kernel: 3, stride: 2, pad: 1, groups: 2 },
            ConvGeom { cin: 4, cout: 4, kernel: 3, stride: 1, pad: 1, groups: 4 },
            ConvGeom { cin: 2, cout: 3, kernel: 1, stride: 1, pad: 0, groups: 1 },
        ] {
            let x = rand4(&mut rng, (2, g.cin, 5, 6));
            let ws = g.weight_shape();
            let w = rand4(&mut rng, (ws[0], ws[1], ws[2], ws[3]));
            let b = Array1::from_shape_fn(g.cout, |_| rng.random_range(-1.0..1.0));
            let (y, _) = conv2d_forward(&x.view(), &w.view(), &b.view(), &g);
            let y2 = conv_naive(&x, &w, &b, &g);
            assert!((&y - &y2).iter().all(|d| d.abs() < 1e-12), "{g:?}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom { cin: 4, cout: 4, kernel: 3, stride: 2, pad: 1, groups: 2 };
        let x = rand4(&mut rng, (2, 4, 5, 5));
        let ws = g.weight_shape();
        let w = rand4(&mut rng, (ws[0], ws[1], ws[2], ws[3]));
        let b = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let (y, cache) = conv2d_forward(&x.view(), &w.view(), &b.view(), &g);
        let r = rand4(&mut rng, y.dim());
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>| {
            (conv2d_forward(&x.view(), &w.view(), &b.view(), &g).0 * &r).sum()
        };
        let (dx, pg) = conv2d_backward(&cache, &r.view(), &w.view(), &g, true);
        let (dw, db) = pg.unwrap();
        let h = 1e-6;
        for idx in [[0, 1, 2, 3], [1, 3, 4, 4], [0, 0, 0, 0]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7, "dx {idx:?}: {fd} vs {}", dx[idx]);
        }
        for idx in [[0, 1, 2, 1], [3, 0, 1, 1]] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-7);
        }
        let mut bp = b.clone();
        bp[2] += h;
        let mut bm = b.clone();
        bm[2] -= h;
        let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
        assert!((fd - db[2]).abs() < 1e-7);
    }

    #[test]
    fn pooling_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand4(&mut rng, (1, 2, 4, 4));
        let r = rand4(&mut rng, (1, 2, 2, 2));
        let (_, arg) = maxpool2_forward(&x.view());
        let dmax = maxpool2_backward(&arg, &r.view(), x.dim());
        let davg = avgpool2_backward(&r.view(), x.dim());
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 1, 3, 2], [0, 1, 1, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fmax = |x: &Array4<f64>| (maxpool2_forward(&x.view()).0 * &r).sum();
            let favg = |x: &Array4<f64>| (avgpool2_forward(&x.view()) * &r).sum();
            assert!(((fmax(&xp) - fmax(&xm)) / (2.0 * h) - dmax[idx]).abs() < 1e-7);
            assert!(((favg(&xp) - favg(&xm)) / (2.0 * h) - davg[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = ndarray::arr2(&[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]);
        let labels = [1, 0];
        let (_, g) = cross_entropy(&logits.view(), &labels);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = logits.clone();
                p[[i, j]] += h;
                let mut m = logits.clone();
                m[[i, j]] -= h;
                let fd = (cross_entropy(&p.view(), &labels).0 - cross_entropy(&m.view(), &labels).0)
                    / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
        let p = softmax(&logits.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
