//! Raw numeric kernels shared by the forward and backward passes.

use crate::tensor::{numel_of, Tensor};

/// `c = beta * c + op(a) * op(b)` with row-major storage.
///
/// `op(a)` is `m x k` and `op(b)` is `k x n`. When `trans_a` is set, `a` is
/// stored as `k x m`; likewise `b` is stored `n x k` under `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read `shape` as if it were broadcast to `out`; broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    assert!(shape.len() <= nd, "cannot broadcast {shape:?} to {out:?}");
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        if shape[i] == out[oi] {
            strides[oi] = acc;
        } else {
            assert_eq!(shape[i], 1, "cannot broadcast {shape:?} to {out:?}");
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out` with the matching offsets into each operand.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    let total = numel_of(out);
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel_of(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    walk2(&out_shape, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::new(out_shape, data)
}

/// Sums `t` down to `shape`, the adjoint of broadcasting `shape` up to `t.shape()`.
pub fn reduce_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let st = broadcast_strides(shape, t.shape());
    let ident: Vec<usize> = vec![0; t.ndim()];
    let mut out = vec![0.0; numel_of(shape)];
    let td = t.data();
    walk2(t.shape(), &st, &ident, |i, io, _| out[io] += td[i]);
    Tensor::new(shape.to_vec(), out)
}

/// Broadcasts `t` up to `shape`.
pub fn expand_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let st = broadcast_strides(t.shape(), shape);
    let ident: Vec<usize> = vec![0; shape.len()];
    let mut out = vec![0.0; numel_of(shape)];
    let td = t.data();
    walk2(shape, &st, &ident, |i, it, _| out[i] = td[it]);
    Tensor::new(shape.to_vec(), out)
}

pub fn transpose2d(t: &Tensor) -> Tensor {
    assert_eq!(t.ndim(), 2, "transpose expects a matrix");
    let (r, c) = (t.dim(0), t.dim(1));
    let src = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new([c, r], out)
}

/// Geometry of a stride-1 zero-padded 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    /// Samples per im2col chunk, keeping the column buffer near 4M entries.
    fn chunk(&self) -> usize {
        let per = self.patch() * self.out_h() * self.out_w();
        (4_000_000 / per.max(1)).clamp(1, self.batch.max(1))
    }
}

fn im2col(g: &ConvGeom, x: &[f64], s0: usize, ns: usize, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let width = ns * hw;
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * width..(r + 1) * width];
                for s in 0..ns {
                    let img = &x[((s0 + s) * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut row[s * hw..(s + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize + ki as isize - pad;
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= g.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize + kj as isize - pad;
                            *d = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], s0: usize, ns: usize, dx: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let width = ns * hw;
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[r * width..(r + 1) * width];
                for s in 0..ns {
                    let img = &mut dx[((s0 + s) * g.in_ch + c) * g.h * g.w..][..g.h * g.w];
                    let src = &row[s * hw..(s + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy as isize + ki as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..wo {
                            let ix = ox as isize + kj as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; `x` is `[N, Cin, H, W]`, `w` is `[Cout, Cin, kh, kw]`.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let mut out = vec![0.0; g.batch * g.out_ch * hw];
    let chunk = g.chunk();
    let patch = g.patch();
    let mut cols = vec![0.0; patch * chunk * hw];
    let mut res = vec![0.0; g.out_ch * chunk * hw];
    let mut s0 = 0;
    while s0 < g.batch {
        let ns = chunk.min(g.batch - s0);
        let cols = &mut cols[..patch * ns * hw];
        let res = &mut res[..g.out_ch * ns * hw];
        im2col(g, x, s0, ns, cols);
        gemm(g.out_ch, patch, ns * hw, w, false, cols, false, res, 0.0);
        for s in 0..ns {
            for co in 0..g.out_ch {
                let b = bias.map_or(0.0, |b| b[co]);
                let src = &res[co * ns * hw + s * hw..][..hw];
                let dst = &mut out[((s0 + s) * g.out_ch + co) * hw..][..hw];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        s0 += ns;
    }
    out
}

/// Gradients of the convolution with respect to input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let patch = g.patch();
    let chunk = g.chunk();
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut db = vec![0.0; g.out_ch];
    let mut cols = vec![0.0; patch * chunk * hw];
    let mut dmat = vec![0.0; g.out_ch * chunk * hw];
    let mut s0 = 0;
    while s0 < g.batch {
        let ns = chunk.min(g.batch - s0);
        let cols = &mut cols[..patch * ns * hw];
        let dmat = &mut dmat[..g.out_ch * ns * hw];
        for s in 0..ns {
            for co in 0..g.out_ch {
                let src = &dout[((s0 + s) * g.out_ch + co) * hw..][..hw];
                dmat[co * ns * hw + s * hw..][..hw].copy_from_slice(src);
                db[co] += src.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, x, s0, ns, cols);
            gemm(g.out_ch, ns * hw, patch, dmat, false, cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(patch, g.out_ch, ns * hw, w, true, dmat, false, cols, 0.0);
            col2im(g, cols, s0, ns, dx);
        }
        s0 += ns;
    }
    (dx, dw, db)
}

/// 2x2 average pooling with floor semantics on `[N, C, H, W]`.
pub fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let img = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (y, xx) = (2 * oy, 2 * ox);
                dst[oy * wo + ox] = 0.25
                    * (img[y * w + xx] + img[y * w + xx + 1] + img[(y + 1) * w + xx] + img[(y + 1) * w + xx + 1]);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn avg_pool2_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let g = dout.data();
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let img = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = 0.25 * src[oy * wo + ox];
                let (y, xx) = (2 * oy, 2 * ox);
                img[y * w + xx] += v;
                img[y * w + xx + 1] += v;
                img[(y + 1) * w + xx] += v;
                img[(y + 1) * w + xx + 1] += v;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// 2x nearest-neighbour upsampling on `[N, C, H, W]`.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let img = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = img[(oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn upsample2_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let g = dout.data();
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let img = &mut dx[p * h * w..(p + 1) * h * w];
        let src = &g[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                img[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

pub fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}
