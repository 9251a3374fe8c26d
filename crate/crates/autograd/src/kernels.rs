//! Raw numeric kernels over contiguous row-major `f64` buffers.
//!
//! Nothing in here knows about the graph; every function takes slices and
//! shapes and returns freshly allocated output.

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the (higher or equal rank) `target`
/// shape, with zero stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let rank = target.len();
    let own = strides(shape);
    let mut out = vec![0; rank];
    for i in 0..shape.len() {
        let t = i + rank - shape.len();
        out[t] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

/// Walks `out_shape` in row-major order and calls `f(out_index, offsets)`
/// where `offsets[k]` is the flat offset into operand `k` (given by its
/// broadcast strides).
fn walk<F: FnMut(usize, &[usize])>(out_shape: &[usize], operand_strides: &[Vec<usize>], mut f: F) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let k = operand_strides.len();
    let mut offsets = vec![0usize; k];
    if rank == 0 {
        f(0, &offsets);
        return;
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_strides: Vec<usize> = operand_strides.iter().map(|s| s[last]).collect();
    let mut base = vec![0usize; k];
    let mut pos = 0;
    loop {
        for j in 0..inner {
            for q in 0..k {
                offsets[q] = base[q] + j * inner_strides[q];
            }
            f(pos, &offsets);
            pos += 1;
        }
        // advance the outer multi-index
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for q in 0..k {
                base[q] += operand_strides[q][d];
            }
            if idx[d] < out_shape[d] {
                break;
            }
            for q in 0..k {
                base[q] -= operand_strides[q][d] * out_shape[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary<F: Fn(f64, f64) -> f64>(
    a: &[f64],
    ash: &[usize],
    b: &[f64],
    bsh: &[usize],
    f: F,
) -> (Vec<f64>, Vec<usize>) {
    if ash == bsh {
        let out = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return (out, ash.to_vec());
    }
    let shape = broadcast_shape(ash, bsh)
        .unwrap_or_else(|| panic!("shapes {ash:?} and {bsh:?} do not broadcast"));
    if b.len() == 1 {
        let y = b[0];
        let out = a.iter().map(|&x| f(x, y)).collect();
        if ash == shape.as_slice() {
            return (out, shape);
        }
    }
    let sa = broadcast_strides(ash, &shape);
    let sb = broadcast_strides(bsh, &shape);
    let mut out = vec![0.0; numel(&shape)];
    walk(&shape, &[sa, sb], |i, off| out[i] = f(a[off[0]], b[off[1]]));
    (out, shape)
}

/// Sums `x` down to `target` (which must broadcast to `xsh`).
pub(crate) fn sum_to(x: &[f64], xsh: &[usize], target: &[usize]) -> Vec<f64> {
    if xsh == target {
        return x.to_vec();
    }
    let mut out = vec![0.0; numel(target)];
    if out.len() == 1 {
        out[0] = x.iter().sum();
        return out;
    }
    let st = broadcast_strides(target, xsh);
    walk(xsh, &[st], |i, off| out[off[0]] += x[i]);
    out
}

pub(crate) fn broadcast_to(x: &[f64], xsh: &[usize], target: &[usize]) -> Vec<f64> {
    if xsh == target {
        return x.to_vec();
    }
    let sx = broadcast_strides(xsh, target);
    let mut out = vec![0.0; numel(target)];
    walk(target, &[sx], |i, off| out[i] = x[off[0]]);
    out
}

pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let own = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let mut out = vec![0.0; x.len()];
    walk(&out_shape, &[src_strides], |i, off| out[i] = x[off[0]]);
    (out, out_shape)
}

/// Batched matrix product. `a` is `[batch, m, k]` (or `[batch, k, m]` when
/// `ta`), `b` is `[batch, k, n]` (or `[batch, n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    let mut c = Vec::with_capacity(batch * m * n);
    for bi in 0..batch {
        c.extend(gemm_new(m, k, n, &a[bi * m * k..], rsa, csa, &b[bi * k * n..], rsb, csb));
    }
    c
}

/// Row-major `m x n` product `a · b` in a fresh buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize) -> Vec<f64> {
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: operand extents are asserted above; with beta = 0 the kernel
    // writes every element of `c` without reading it, so the length can be
    // set afterwards.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Geometry of a 2-D convolution on NCHW tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wsh: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW, got {x:?}");
        assert_eq!(wsh.len(), 4, "conv weight must be OCKK, got {wsh:?}");
        assert_eq!(x[1], wsh[1], "conv channel mismatch: input {x:?}, weight {wsh:?}");
        assert!(stride >= 1);
        let (h, w, kh, kw) = (x[2], x[3], wsh[2], wsh[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
        Self {
            n: x[0],
            c: x[1],
            h,
            w,
            o: wsh[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        }
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` along one axis whose input index
/// `o * stride + k - pad` falls inside `0..len`.
fn valid_span(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { out.min((len - 1 + pad - k) / stride + 1) } else { 0 };
    (lo.min(hi), hi)
}

/// `[c*kh*kw, n*ho*wo]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut cols = Vec::with_capacity(g.ck() * g.cols());
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(g.w, g.wo, kj, g.stride, g.pad);
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    cols.resize(cols.len() + ylo * g.wo, 0.0);
                    for oi in ylo..yhi {
                        let row = &src[(oi * g.stride + ki - g.pad) * g.w..][..g.w];
                        cols.resize(cols.len() + xlo, 0.0);
                        if xhi > xlo {
                            let first = xlo * g.stride + kj - g.pad;
                            if g.stride == 1 {
                                cols.extend_from_slice(&row[first..first + (xhi - xlo)]);
                            } else {
                                cols.extend(row[first..].iter().step_by(g.stride).take(xhi - xlo));
                            }
                        }
                        cols.resize(cols.len() + (g.wo - xhi), 0.0);
                    }
                    cols.resize(cols.len() + (g.ho - yhi) * g.wo, 0.0);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto NCHW.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.ho * g.wo;
    let ncols = g.cols();
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_span(g.h, g.ho, ki, g.stride, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_span(g.w, g.wo, kj, g.stride, g.pad);
                if xhi == xlo {
                    continue;
                }
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let first = xlo * g.stride + kj - g.pad;
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oi in ylo..yhi {
                        let d = &mut dst[(oi * g.stride + ki - g.pad) * g.w + first..];
                        let s = &src[ni * p + oi * g.wo + xlo..ni * p + oi * g.wo + xhi];
                        if g.stride == 1 {
                            for (a, b) in d[..s.len()].iter_mut().zip(s) {
                                *a += b;
                            }
                        } else {
                            for (a, b) in d.iter_mut().step_by(g.stride).zip(s) {
                                *a += b;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// NOHW -> `[o, n*p]`.
fn nchw_to_rows(y: &[f64], n: usize, o: usize, p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    for oi in 0..o {
        for ni in 0..n {
            out.extend_from_slice(&y[(ni * o + oi) * p..(ni * o + oi + 1) * p]);
        }
    }
    out
}

fn rows_to_nchw(r: &[f64], n: usize, o: usize, p: usize) -> Vec<f64> {
    if n == 1 {
        return r.to_vec();
    }
    let mut out = Vec::with_capacity(r.len());
    for ni in 0..n {
        for oi in 0..o {
            out.extend_from_slice(&r[oi * n * p + ni * p..oi * n * p + (ni + 1) * p]);
        }
    }
    out
}

pub(crate) fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let ncols = g.cols();
    let rows = gemm_new(g.o, g.ck(), ncols, w, g.ck(), 1, &cols, ncols, 1);
    rows_to_nchw(&rows, g.n, g.o, g.ho * g.wo)
}

/// Gradient of `conv2d` with respect to its input, for output gradient `gy`.
pub(crate) fn conv2d_transpose(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let rows = nchw_to_rows(gy, g.n, g.o, g.ho * g.wo);
    // cols = wᵀ · rows
    let cols = gemm_new(g.ck(), g.o, ncols, w, 1, g.ck(), &rows, ncols, 1);
    col2im(&cols, g)
}

/// Gradient of `conv2d` with respect to its weight.
pub(crate) fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.cols();
    let cols = im2col(x, g);
    let rows = nchw_to_rows(gy, g.n, g.o, g.ho * g.wo);
    // dw = rows · colsᵀ
    gemm_new(g.o, ncols, g.ck(), &rows, ncols, 1, &cols, 1, ncols)
}

pub(crate) fn upsample_nearest(x: &[f64], shape: &[usize], f: usize) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; nc * ho * wo];
    for c in 0..nc {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / f) * w + j / f];
            }
        }
    }
    out
}

pub(crate) fn sum_pool(x: &[f64], shape: &[usize], f: usize) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    assert!(h % f == 0 && w % f == 0, "pool factor {f} does not divide {h}x{w}");
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![0.0; nc * ho * wo];
    for c in 0..nc {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * ho * wo..(c + 1) * ho * wo];
        for i in 0..h {
            for j in 0..w {
                dst[(i / f) * wo + j / f] += src[i * w + j];
            }
        }
    }
    out
}

/// 2x2 max pooling; returns the pooled values and a one-hot mask (on the
/// input grid) marking the first maximum of each window.
pub(crate) fn max_pool2(x: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * ho * wo];
    let mut mask = vec![0.0; x.len()];
    for c in 0..nc {
        let base = c * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out[c * ho * wo + i * wo + j] = x[best];
                mask[best] = 1.0;
            }
        }
    }
    (out, mask)
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn narrow(x: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * n + start) * inner;
        out.extend_from_slice(&x[s..s + len * inner]);
    }
    out
}

pub(crate) fn pad_axis(x: &[f64], shape: &[usize], axis: usize, before: usize, total: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * total * inner];
    for o in 0..outer {
        let d = (o * total + before) * inner;
        out[d..d + n * inner].copy_from_slice(&x[o * n * inner..(o + 1) * n * inner]);
    }
    out
}
