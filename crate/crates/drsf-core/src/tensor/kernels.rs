//! Raw numeric kernels over `&[f64]` slices.
//!
//! These are the compute routines behind the tape ops. Reductions that
//! reassociate floating-point sums do so in a fixed, explicit order (4-lane
//! chunking), so results are identical on every platform regardless of
//! auto-vectorization.

use alloc::vec;
use alloc::vec::Vec;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Fixed-order 4-lane sum.
pub fn sum4(v: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = v.chunks_exact(4);
    let rem = chunks.remainder();
    for c in chunks {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut tail = 0.0;
    for &x in rem {
        tail += x;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Fixed-order 4-lane dot product.
pub fn dot4(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let ra = ca.remainder();
    let rb = &b[a.len() - ra.len()..];
    for (x, y) in ca.zip(b.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// How `b` maps onto `a` for an elementwise op. `b` is right-aligned to `a`
/// (numpy convention) and may only broadcast, never `a`.
pub enum BroadcastPlan {
    Same,
    /// b padded to `[1.., M.., 1..]`: repeats `repeat` times, `middle`
    /// distinct entries, each covering a contiguous `block` of `a`.
    Pattern {
        repeat: usize,
        middle: usize,
        block: usize,
    },
    /// Arbitrary singleton placement; handled by an odometer walk.
    General { b_stride_for_dim: Vec<usize> },
}

pub fn broadcast_plan(a_shape: &[usize], b_shape: &[usize]) -> Option<BroadcastPlan> {
    if a_shape == b_shape {
        return Some(BroadcastPlan::Same);
    }
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let nd = a_shape.len();
    let pad = nd - b_shape.len();
    let mut padded = vec![1usize; nd];
    padded[pad..].copy_from_slice(b_shape);
    for d in 0..nd {
        if padded[d] != 1 && padded[d] != a_shape[d] {
            return None;
        }
    }
    // Try the [1.., M.., 1..] pattern.
    let Some(first_non1) = padded.iter().position(|&x| x != 1) else {
        // b is a single (broadcast) scalar
        return Some(BroadcastPlan::Pattern {
            repeat: 1,
            middle: 1,
            block: a_shape.iter().product(),
        });
    };
    let last_non1 = padded.iter().rposition(|&x| x != 1).map_or(0, |i| i + 1);
    let middle_exact = (first_non1..last_non1).all(|d| padded[d] == a_shape[d]);
    if middle_exact {
        let repeat: usize = a_shape[..first_non1].iter().product();
        let middle: usize = a_shape[first_non1..last_non1].iter().product();
        let block: usize = a_shape[last_non1..].iter().product();
        return Some(BroadcastPlan::Pattern {
            repeat,
            middle,
            block,
        });
    }
    let b_str = strides(&padded);
    let mut b_stride_for_dim = vec![0usize; nd];
    for d in 0..nd {
        if padded[d] != 1 {
            b_stride_for_dim[d] = b_str[d];
        }
    }
    Some(BroadcastPlan::General { b_stride_for_dim })
}

/// out[i] = f(a[i], b[broadcast(i)])
pub fn binary_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    plan: &BroadcastPlan,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    match plan {
        BroadcastPlan::Same => {
            out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        BroadcastPlan::Pattern {
            repeat,
            middle,
            block,
        } => {
            if *block == 1 {
                out.resize(a.len(), 0.0);
                for (chunk_i, chunk) in a.chunks_exact(*middle).enumerate() {
                    let dst = &mut out[chunk_i * middle..(chunk_i + 1) * middle];
                    for ((d, &x), &y) in dst.iter_mut().zip(chunk).zip(b.iter()) {
                        *d = f(x, y);
                    }
                }
            } else {
                out.resize(a.len(), 0.0);
                let mut idx = 0;
                for _ in 0..*repeat {
                    for m in 0..*middle {
                        let s = b[m];
                        let src = &a[idx..idx + block];
                        let dst = &mut out[idx..idx + block];
                        for (d, &x) in dst.iter_mut().zip(src) {
                            *d = f(x, s);
                        }
                        idx += block;
                    }
                }
            }
        }
        BroadcastPlan::General { b_stride_for_dim } => {
            out.resize(a.len(), 0.0);
            odometer(a_shape, b_stride_for_dim, |flat, bi| {
                out[flat] = f(a[flat], b[bi]);
            });
        }
    }
    out
}

/// Sum `grad` (shaped like `a`) into the shape of broadcast operand `b`.
pub fn reduce_to_operand(
    grad: &[f64],
    a_shape: &[usize],
    b_len: usize,
    plan: &BroadcastPlan,
) -> Vec<f64> {
    match plan {
        BroadcastPlan::Same => grad.to_vec(),
        BroadcastPlan::Pattern {
            repeat,
            middle,
            block,
        } => {
            let mut out = vec![0.0f64; b_len];
            debug_assert_eq!(b_len, *middle);
            if *block == 1 {
                for chunk in grad.chunks_exact(*middle) {
                    for (o, &g) in out.iter_mut().zip(chunk) {
                        *o += g;
                    }
                }
            } else {
                let mut idx = 0;
                for _ in 0..*repeat {
                    for o in out.iter_mut() {
                        *o += sum4(&grad[idx..idx + block]);
                        idx += block;
                    }
                }
            }
            out
        }
        BroadcastPlan::General { b_stride_for_dim } => {
            let mut out = vec![0.0f64; b_len];
            odometer(a_shape, b_stride_for_dim, |flat, bi| {
                out[bi] += grad[flat];
            });
            out
        }
    }
}

/// Walk all flat indices of `shape`, tracking a secondary index advancing by
/// `sec_stride_for_dim` per dimension (0 for broadcast/reduced dims).
fn odometer(shape: &[usize], sec_stride_for_dim: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut sec = 0usize;
    for flat in 0..n {
        f(flat, sec);
        for d in (0..nd).rev() {
            idx[d] += 1;
            sec += sec_stride_for_dim[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            sec -= sec_stride_for_dim[d] * shape[d];
        }
    }
}

// ---------------------------------------------------------------------------
// Axis reductions
// ---------------------------------------------------------------------------

/// Output shape with reduced axes kept as size-1.
pub fn reduced_shape_keep(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut out = shape.to_vec();
    for &a in axes {
        out[a] = 1;
    }
    out
}

/// Output shape with reduced axes removed.
pub fn reduced_shape_drop(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &s)| s)
        .collect()
}

pub fn reduce_count(shape: &[usize], axes: &[usize]) -> usize {
    axes.iter().map(|&a| shape[a]).product()
}

fn is_trailing(shape: &[usize], axes: &[usize]) -> bool {
    let k = axes.len();
    axes.iter()
        .enumerate()
        .all(|(i, &a)| a == shape.len() - k + i)
}

fn is_leading(axes: &[usize]) -> bool {
    axes.iter().enumerate().all(|(i, &a)| a == i)
}

/// Visit every element together with its destination index in the reduced
/// (keep-dims) output.
pub fn for_each_mapped(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    if is_trailing(shape, axes) {
        let block: usize = axes.iter().map(|&a| shape[a]).product();
        let mut flat = 0;
        for out_i in 0..n / block.max(1) {
            for _ in 0..block {
                f(flat, out_i);
                flat += 1;
            }
        }
        return;
    }
    if is_leading(axes) {
        let inner: usize = shape[axes.len()..].iter().product();
        let mut flat = 0;
        while flat < n {
            for out_i in 0..inner {
                f(flat, out_i);
                flat += 1;
            }
        }
        return;
    }
    let out_keep = reduced_shape_keep(shape, axes);
    let out_str = strides(&out_keep);
    let mut sec_stride = vec![0usize; shape.len()];
    for d in 0..shape.len() {
        if !axes.contains(&d) {
            sec_stride[d] = out_str[d];
        }
    }
    odometer(shape, &sec_stride, &mut f);
}

/// Sum over `axes`; returns values for the keep-dims output shape.
pub fn reduce_sum(vals: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_len: usize = reduced_shape_keep(shape, axes).iter().product();
    if is_trailing(shape, axes) {
        // Contiguous blocks: fixed-order chunk sums.
        let block = reduce_count(shape, axes);
        if block > 0 {
            return vals.chunks_exact(block).map(sum4).collect();
        }
    }
    let mut out = vec![0.0f64; out_len];
    for_each_mapped(shape, axes, |flat, oi| out[oi] += vals[flat]);
    out
}

/// Population mean over `axes` (keep-dims layout).
pub fn reduce_mean(vals: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let count = reduce_count(shape, axes) as f64;
    let mut out = reduce_sum(vals, shape, axes);
    for v in out.iter_mut() {
        *v /= count;
    }
    out
}

/// Population variance over `axes` (keep-dims layout); two-pass.
pub fn reduce_var(vals: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let count = reduce_count(shape, axes) as f64;
    let mean = reduce_mean(vals, shape, axes);
    let out_len = mean.len();
    let mut out = vec![0.0f64; out_len];
    for_each_mapped(shape, axes, |flat, oi| {
        let d = vals[flat] - mean[oi];
        out[oi] += d * d;
    });
    for v in out.iter_mut() {
        *v /= count;
    }
    out
}

// ---------------------------------------------------------------------------
// Axis groups (softmax family)
// ---------------------------------------------------------------------------

/// Iterate groups along `axis`: calls `f(start, len, stride)` per group.
pub fn for_each_axis_group(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        let base = o * axis_len * inner;
        for i in 0..inner {
            f(base + i, axis_len, inner);
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (3x3, stride 1, pad 1)
// ---------------------------------------------------------------------------

/// out[x] += k3[0]·r[x-1] + k3[1]·r[x] + k3[2]·r[x+1] with zero padding.
#[inline(always)]
fn accum_row_3tap(out: &mut [f64], r: &[f64], k0: f64, k1: f64, k2: f64) {
    let w = out.len();
    if w == 1 {
        out[0] += k1 * r[0];
        return;
    }
    out[0] += k1 * r[0] + k2 * r[1];
    for x in 1..w - 1 {
        out[x] += k0 * r[x - 1] + k1 * r[x] + k2 * r[x + 1];
    }
    out[w - 1] += k0 * r[w - 2] + k1 * r[w - 1];
}

/// One input plane accumulated into one output plane through a 3x3 kernel
/// (stride 1, zero pad 1). All nine taps are applied in a single pass.
#[inline]
fn conv3x3_plane(out: &mut [f64], inp: &[f64], k9: &[f64], h: usize, w: usize) {
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        if y > 0 {
            accum_row_3tap(orow, &inp[(y - 1) * w..y * w], k9[0], k9[1], k9[2]);
        }
        accum_row_3tap(orow, &inp[y * w..(y + 1) * w], k9[3], k9[4], k9[5]);
        if y + 1 < h {
            accum_row_3tap(orow, &inp[(y + 1) * w..(y + 2) * w], k9[6], k9[7], k9[8]);
        }
    }
}

/// acc3[j] += Σ_x g[x] · r[x+j-1] with zero padding (kernel-gradient rows).
#[inline(always)]
fn accum_kgrad_row(acc3: &mut [f64], g: &[f64], r: &[f64]) {
    let w = g.len();
    let (mut a0, mut a1, mut a2) = (0.0f64, 0.0f64, 0.0f64);
    if w == 1 {
        a1 = g[0] * r[0];
    } else {
        a1 += g[0] * r[0];
        a2 += g[0] * r[1];
        for x in 1..w - 1 {
            let gv = g[x];
            a0 += gv * r[x - 1];
            a1 += gv * r[x];
            a2 += gv * r[x + 1];
        }
        let gv = g[w - 1];
        a0 += gv * r[w - 2];
        a1 += gv * r[w - 1];
    }
    acc3[0] += a0;
    acc3[1] += a1;
    acc3[2] += a2;
}

/// acc9[ky*3+kx] += Σ_{y,x} g[y][x] · inp[y+ky-1][x+kx-1], zero-padded.
#[inline]
fn conv3x3_kernel_grad(acc9: &mut [f64], g: &[f64], inp: &[f64], h: usize, w: usize) {
    for y in 0..h {
        let grow = &g[y * w..(y + 1) * w];
        if y > 0 {
            accum_kgrad_row(&mut acc9[0..3], grow, &inp[(y - 1) * w..y * w]);
        }
        accum_kgrad_row(&mut acc9[3..6], grow, &inp[y * w..(y + 1) * w]);
        if y + 1 < h {
            accum_kgrad_row(&mut acc9[6..9], grow, &inp[(y + 1) * w..(y + 2) * w]);
        }
    }
}

/// 3x3 same-size convolution. x: [n,cin,h,w], k: [cout,cin,3,3], bias: [cout].
pub fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    bias: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut y = vec![0.0f64; n * cout * hw];
    for ni in 0..n {
        for co in 0..cout {
            let plane = &mut y[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
            plane.fill(bias[co]);
            for ci in 0..cin {
                let xp = &x[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                conv3x3_plane(plane, xp, &k[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9], h, w);
            }
        }
    }
    y
}

/// Gradient wrt conv input: correlation of the output gradient with the
/// spatially flipped kernel.
pub fn conv2d_backward_input(
    gout: &[f64],
    k: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut gx = vec![0.0f64; n * cin * hw];
    let mut kf = [0.0f64; 9];
    for ni in 0..n {
        for ci in 0..cin {
            let plane = &mut gx[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
            for co in 0..cout {
                let kb = (co * cin + ci) * 9;
                for (i, s) in kf.iter_mut().enumerate() {
                    *s = k[kb + 8 - i];
                }
                let gp = &gout[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
                conv3x3_plane(plane, gp, &kf, h, w);
            }
        }
    }
    gx
}

/// Gradients wrt kernel and bias.
pub fn conv2d_backward_kernel(
    gout: &[f64],
    x: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut gk = vec![0.0f64; cout * cin * 9];
    let mut gb = vec![0.0f64; cout];
    for ni in 0..n {
        for co in 0..cout {
            let gp = &gout[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
            gb[co] += sum4(gp);
            for ci in 0..cin {
                let xp = &x[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                let acc = &mut gk[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                conv3x3_kernel_grad(acc, gp, xp, h, w);
            }
        }
    }
    (gk, gb)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x @ w + bias. x: [n, din], w: [din, dout], bias: [dout].
pub fn linear_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<f64> {
    let mut y = vec![0.0f64; n * dout];
    for ni in 0..n {
        let row = &mut y[ni * dout..(ni + 1) * dout];
        row.copy_from_slice(bias);
        for i in 0..din {
            let xv = x[ni * din + i];
            let wrow = &w[i * dout..(i + 1) * dout];
            for (r, &wv) in row.iter_mut().zip(wrow) {
                *r += xv * wv;
            }
        }
    }
    y
}

pub fn linear_backward(
    gout: &[f64],
    x: &[f64],
    w: &[f64],
    n: usize,
    din: usize,
    dout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0f64; n * din];
    let mut gw = vec![0.0f64; din * dout];
    let mut gb = vec![0.0f64; dout];
    for ni in 0..n {
        let grow = &gout[ni * dout..(ni + 1) * dout];
        for (b, &g) in gb.iter_mut().zip(grow) {
            *b += g;
        }
        for i in 0..din {
            let wrow = &w[i * dout..(i + 1) * dout];
            gx[ni * din + i] = dot4(grow, wrow);
            let xv = x[ni * din + i];
            let gwrow = &mut gw[i * dout..(i + 1) * dout];
            for (gwv, &g) in gwrow.iter_mut().zip(grow) {
                *gwv += xv * g;
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

/// 2x2 average pool, stride 2. Spatial dims must be even.
pub fn avg_pool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0f64; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (2 * oy) * w + 2 * ox;
                yp[oy * ow + ox] = 0.25 * (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]);
            }
        }
    }
    y
}

pub fn avg_pool2_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0f64; planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = 0.25 * gp[oy * ow + ox];
                let i = (2 * oy) * w + 2 * ox;
                gxp[i] += gv;
                gxp[i + 1] += gv;
                gxp[i + w] += gv;
                gxp[i + w + 1] += gv;
            }
        }
    }
    gx
}

/// Nearest-neighbor upsample by integer factor.
pub fn upsample_nearest_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut y = vec![0.0f64; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let yp = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let sy = oy / f;
            for ox in 0..ow {
                yp[oy * ow + ox] = xp[sy * w + ox / f];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(g: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut gx = vec![0.0f64; planes * h * w];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let gxp = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let sy = oy / f;
            for ox in 0..ow {
                gxp[sy * w + ox / f] += gp[oy * ow + ox];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert!(strides(&[]).is_empty());
    }

    #[test]
    fn reduce_sum_trailing_and_leading() {
        // shape [2,3], reduce axis 1 (trailing)
        let v = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(reduce_sum(&v, &[2, 3], &[1]), vec![6.0, 60.0]);
        // reduce axis 0 (leading)
        assert_eq!(reduce_sum(&v, &[2, 3], &[0]), vec![11.0, 22.0, 33.0]);
        // reduce all
        assert_eq!(reduce_sum(&v, &[2, 3], &[0, 1]), vec![66.0]);
    }

    #[test]
    fn reduce_var_population() {
        let v = [1.0, 3.0];
        let out = reduce_var(&v, &[1, 2], &[1]);
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn middle_axis_reduction_matches_manual() {
        // shape [2,3,2], reduce axis 1
        let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let out = reduce_sum(&v, &[2, 3, 2], &[1]);
        // out[n,0,k] = sum over c of v[n,c,k]
        assert_eq!(out, vec![0. + 2. + 4., 1. + 3. + 5., 6. + 8. + 10., 7. + 9. + 11.]);
    }

    #[test]
    fn broadcast_pattern_per_channel() {
        // a: [2,3,2,2] with b: [2,3,1,1]
        let a_shape = [2usize, 3, 2, 2];
        let plan = broadcast_plan(&a_shape, &[2, 3, 1, 1]).unwrap();
        match plan {
            BroadcastPlan::Pattern {
                repeat,
                middle,
                block,
            } => {
                assert_eq!((repeat, middle, block), (1, 6, 4));
            }
            _ => panic!("expected pattern"),
        }
    }

    #[test]
    fn broadcast_matches_materialized() {
        let a_shape = [2usize, 3];
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [10.0, 20.0, 30.0];
        let plan = broadcast_plan(&a_shape, &[3]).unwrap();
        let out = binary_broadcast(&a, &a_shape, &b, &plan, |x, y| x + y);
        assert_eq!(out, vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let back = reduce_to_operand(&[1.0; 6], &a_shape, 3, &plan);
        assert_eq!(back, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // centered delta kernel reproduces the input (single channel).
        let (n, c, h, w) = (1usize, 1usize, 4usize, 4usize);
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut k = vec![0.0f64; 9];
        k[4] = 1.0;
        let y = conv2d_forward(&x, &k, &[0.0], n, c, 1, h, w);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let x = vec![1.0f64; 2 * 3 * 4 * 4];
        let k = vec![0.0f64; 2 * 3 * 9];
        let y = conv2d_forward(&x, &k, &[0.5, -1.0], 2, 3, 2, 4, 4);
        for ni in 0..2 {
            for co in 0..2 {
                for i in 0..16 {
                    assert_eq!(y[(ni * 2 + co) * 16 + i], if co == 0 { 0.5 } else { -1.0 });
                }
            }
        }
    }

    #[test]
    fn pool_then_upsample_shapes() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y = avg_pool2_forward(&x, 1, 4, 4);
        assert_eq!(y.len(), 4);
        assert_eq!(y[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let up = upsample_nearest_forward(&y, 1, 2, 2, 2);
        assert_eq!(up.len(), 16);
        assert_eq!(up[0], y[0]);
        assert_eq!(up[5], y[0]);
    }
}
