//! Scalar-semantics compute kernels behind the graph operators.
//!
//! Every kernel walks its reduction axes in a fixed order, so results depend only
//! on the operands, never on batch composition or call history.

use crate::tensor::Element;

/// Register tile: rows of `a` by columns of `b` handled per micro-kernel call.
pub const MR: usize = 8;
pub const NR: usize = 16;

pub type Tile<T> = [[T; NR]; MR];

/// Column-matrix tiles are sized to stay around this many elements.
const TILE_ELEMS: usize = 32 * 1024;
/// Depth of one packed gemm block.
const KC: usize = 256;

/// Read-only strided matrix view: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Copy> Mat<'a, T> {
    pub fn rows(data: &'a [T], ld: usize) -> Self {
        Mat { data, rs: ld, cs: 1 }
    }

    /// Transposed view of a row-major matrix with leading dimension `ld`.
    pub fn cols(data: &'a [T], ld: usize) -> Self {
        Mat { data, rs: 1, cs: ld }
    }
}

/// Reusable buffers for packing and column tiles.
#[derive(Debug, Default)]
pub struct Workspace<T> {
    pub(crate) a_pack: Vec<T>,
    b_pack: Vec<T>,
    col: Vec<T>,
    pub(crate) pad: Vec<T>,
}

impl<T: Element> Workspace<T> {
    pub fn new() -> Self {
        Workspace {
            a_pack: Vec::new(),
            b_pack: Vec::new(),
            col: Vec::new(),
            pad: Vec::new(),
        }
    }
}

fn pack_a<T: Element>(m: usize, k: usize, a: Mat<T>, dst: &mut Vec<T>) {
    let row_blocks = m.div_ceil(MR);
    dst.resize(row_blocks * k * MR, T::zero());
    for blk in 0..row_blocks {
        let block = &mut dst[blk * k * MR..(blk + 1) * k * MR];
        let i0 = blk * MR;
        let mr = MR.min(m - i0);
        if mr < MR {
            block.iter_mut().for_each(|v| *v = T::zero());
        }
        if a.rs == 1 {
            for kk in 0..k {
                let off = kk * a.cs + i0;
                block[kk * MR..kk * MR + mr].copy_from_slice(&a.data[off..off + mr]);
            }
        } else {
            for r in 0..mr {
                let row = &a.data[(i0 + r) * a.rs..];
                for kk in 0..k {
                    block[kk * MR + r] = row[kk * a.cs];
                }
            }
        }
    }
}

fn pack_b<T: Element>(k: usize, n: usize, b: Mat<T>, dst: &mut Vec<T>) {
    let col_panels = n.div_ceil(NR);
    dst.resize(col_panels * k * NR, T::zero());
    for p in 0..col_panels {
        let j0 = p * NR;
        let width = NR.min(n - j0);
        let panel = &mut dst[p * k * NR..(p + 1) * k * NR];
        if width < NR {
            panel.iter_mut().for_each(|v| *v = T::zero());
        }
        if b.cs == 1 {
            for kk in 0..k {
                let off = kk * b.rs + j0;
                panel[kk * NR..kk * NR + width].copy_from_slice(&b.data[off..off + width]);
            }
        } else {
            for l in 0..width {
                let col = &b.data[(j0 + l) * b.cs..];
                for kk in 0..k {
                    panel[kk * NR + l] = col[kk * b.rs];
                }
            }
        }
    }
}

/// `c[i * ldc + j] += Σ_kk a(i, kk) · b(kk, j)` for an `m×k` by `k×n` product.
///
/// Both operands are packed into zero-padded register tiles (MR rows of `a`,
/// NR columns of `b`) so the micro-kernel reads contiguous memory.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ws<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: Mat<T>,
    b: Mat<T>,
    c: &mut [T],
    ldc: usize,
    ws: &mut Workspace<T>,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * ldc + n);
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        let a_blk = Mat {
            data: &a.data[k0 * a.cs..],
            rs: a.rs,
            cs: a.cs,
        };
        let b_blk = Mat {
            data: &b.data[k0 * b.rs..],
            rs: b.rs,
            cs: b.cs,
        };
        gemm_block(m, kc, n, a_blk, b_blk, c, ldc, ws);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_block<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: Mat<T>,
    b: Mat<T>,
    c: &mut [T],
    ldc: usize,
    ws: &mut Workspace<T>,
) {
    pack_a(m, k, a, &mut ws.a_pack);
    pack_b(k, n, b, &mut ws.b_pack);
    let row_blocks = m.div_ceil(MR);
    let col_panels = n.div_ceil(NR);
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..col_panels {
        let j0 = p * NR;
        let width = NR.min(n - j0);
        let panel = &ws.b_pack[p * k * NR..(p + 1) * k * NR];
        for blk in 0..row_blocks {
            let ablk = &ws.a_pack[blk * k * MR..(blk + 1) * k * MR];
            T::micro_kernel(ablk, panel, &mut acc);
            for (r, acc_row) in acc.iter().enumerate().take(MR.min(m - blk * MR)) {
                let i = blk * MR + r;
                let crow = &mut c[i * ldc + j0..i * ldc + j0 + width];
                for (cv, &av) in crow.iter_mut().zip(acc_row.iter()) {
                    *cv += av;
                }
            }
        }
    }
}

pub(crate) fn gemm<T: Element>(m: usize, k: usize, n: usize, a: Mat<T>, b: Mat<T>, c: &mut [T], ldc: usize) {
    gemm_ws(m, k, n, a, b, c, ldc, &mut Workspace::new());
}

/// Portable micro-kernel: `acc[r][l] = Σ_kk a[kk][r] · b[kk][l]` over packed
/// panels, computed as two 4-row halves (wider tiles defeat autovectorization).
#[inline(always)]
pub fn micro_kernel_generic<T: Element>(a: &[T], b: &[T], acc: &mut Tile<T>) {
    for half in 0..2 {
        let mut part = [[T::zero(); NR]; 4];
        for (av, bv) in a.chunks_exact(MR).zip(b.chunks_exact(NR)) {
            for r in 0..4 {
                let s = av[half * 4 + r];
                for l in 0..NR {
                    part[r][l] += s * bv[l];
                }
            }
        }
        acc[half * 4..half * 4 + 4].copy_from_slice(&part);
    }
}

/// f32 micro-kernel; uses fused multiply-add lanes when the target has them.
#[inline(always)]
pub fn micro_kernel_f32(a: &[f32], b: &[f32], acc: &mut Tile<f32>) {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    {
        // SAFETY: the target feature is enabled at compile time; `a` holds
        // k*MR and `b` k*NR elements, checked by the debug asserts inside.
        unsafe { simd::micro_avx512(a, b, acc) }
    }
    #[cfg(all(target_arch = "x86_64", target_feature = "avx2", target_feature = "fma", not(target_feature = "avx512f")))]
    {
        // SAFETY: as above.
        unsafe { simd::micro_avx2(a, b, acc) }
    }
    #[cfg(not(all(target_arch = "x86_64", any(target_feature = "avx512f", all(target_feature = "avx2", target_feature = "fma")))))]
    micro_kernel_generic(a, b, acc)
}

#[cfg(target_arch = "x86_64")]
#[allow(dead_code)]
mod simd {
    use super::{Tile, MR, NR};
    use std::arch::x86_64::*;

    #[cfg(target_feature = "avx512f")]
    #[inline(always)]
    pub unsafe fn micro_avx512(a: &[f32], b: &[f32], acc: &mut Tile<f32>) {
        debug_assert_eq!(a.len() / MR, b.len() / NR);
        let k = b.len() / NR;
        let (ap, bp) = (a.as_ptr(), b.as_ptr());
        let mut c = [_mm512_setzero_ps(); MR];
        for kk in 0..k {
            let bv = _mm512_loadu_ps(bp.add(kk * NR));
            let arow = ap.add(kk * MR);
            for (r, cr) in c.iter_mut().enumerate() {
                *cr = _mm512_fmadd_ps(_mm512_set1_ps(*arow.add(r)), bv, *cr);
            }
        }
        for (r, cr) in c.iter().enumerate() {
            _mm512_storeu_ps(acc[r].as_mut_ptr(), *cr);
        }
    }

    #[cfg(target_feature = "avx512f")]
    #[inline(always)]
    pub unsafe fn dot_4x2_avx512(a: [&[f32]; 4], b: [&[f32]; 2]) -> [[f32; 2]; 4] {
        let k = b[0].len();
        let body = k - k % 16;
        let mut acc = [[_mm512_setzero_ps(); 2]; 4];
        let mut t = 0;
        while t < body {
            let b0 = _mm512_loadu_ps(b[0].as_ptr().add(t));
            let b1 = _mm512_loadu_ps(b[1].as_ptr().add(t));
            for (ar, acc_i) in a.iter().zip(acc.iter_mut()) {
                let av = _mm512_loadu_ps(ar.as_ptr().add(t));
                acc_i[0] = _mm512_fmadd_ps(av, b0, acc_i[0]);
                acc_i[1] = _mm512_fmadd_ps(av, b1, acc_i[1]);
            }
            t += 16;
        }
        let mut out = [[0.0f32; 2]; 4];
        for i in 0..4 {
            for j in 0..2 {
                let mut total = _mm512_reduce_add_ps(acc[i][j]);
                for t in body..k {
                    total += a[i][t] * b[j][t];
                }
                out[i][j] = total;
            }
        }
        out
    }

    #[cfg(all(target_feature = "avx2", target_feature = "fma"))]
    #[inline(always)]
    pub unsafe fn micro_avx2(a: &[f32], b: &[f32], acc: &mut Tile<f32>) {
        debug_assert_eq!(a.len() / MR, b.len() / NR);
        let k = b.len() / NR;
        let (ap, bp) = (a.as_ptr(), b.as_ptr());
        for half in 0..2 {
            let mut c = [_mm256_setzero_ps(); 8];
            for kk in 0..k {
                let b0 = _mm256_loadu_ps(bp.add(kk * NR));
                let b1 = _mm256_loadu_ps(bp.add(kk * NR + 8));
                let arow = ap.add(kk * MR + half * 4);
                for r in 0..4 {
                    let s = _mm256_set1_ps(*arow.add(r));
                    c[2 * r] = _mm256_fmadd_ps(s, b0, c[2 * r]);
                    c[2 * r + 1] = _mm256_fmadd_ps(s, b1, c[2 * r + 1]);
                }
            }
            for r in 0..4 {
                _mm256_storeu_ps(acc[half * 4 + r].as_mut_ptr(), c[2 * r]);
                _mm256_storeu_ps(acc[half * 4 + r].as_mut_ptr().add(8), c[2 * r + 1]);
            }
        }
    }
}

/// `out[i][j] = <a[i], b[j]>` for four rows of `a` and two of `b`, all of equal length.
pub fn dot_4x2_generic<T: Element>(a: [&[T]; 4], b: [&[T]; 2]) -> [[T; 2]; 4] {
    const LANES: usize = 8;
    let k = b[0].len();
    let body = k - k % LANES;
    let mut acc = [[[T::zero(); LANES]; 2]; 4];
    for t0 in (0..body).step_by(LANES) {
        for (ar, acc_i) in a.iter().zip(acc.iter_mut()) {
            for (br, acc_ij) in b.iter().zip(acc_i.iter_mut()) {
                for l in 0..LANES {
                    acc_ij[l] += ar[t0 + l] * br[t0 + l];
                }
            }
        }
    }
    let mut out = [[T::zero(); 2]; 4];
    for i in 0..4 {
        for j in 0..2 {
            let mut total: T = acc[i][j].iter().copied().sum();
            for t in body..k {
                total += a[i][t] * b[j][t];
            }
            out[i][j] = total;
        }
    }
    out
}

pub fn dot_4x2_f32(a: [&[f32]; 4], b: [&[f32]; 2]) -> [[f32; 2]; 4] {
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    {
        assert!(a.iter().chain(b.iter()).all(|r| r.len() == b[0].len()));
        // SAFETY: avx512f is enabled at compile time and all rows have equal length.
        unsafe { simd::dot_4x2_avx512(a, b) }
    }
    #[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
    dot_4x2_generic(a, b)
}

/// `c[i * ldc + j] += Σ_t a[i * lda + t] · b[j * ldb + t]`: both operands are read
/// along contiguous rows, so nothing is packed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_nt<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    ldb: usize,
    c: &mut [T],
    ldc: usize,
) {
    let arow = |i: usize| &a[i * lda..i * lda + k];
    let brow = |j: usize| &b[j * ldb..j * ldb + k];
    let dot = |x: &[T], y: &[T]| x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>();
    let (m4, n2) = (m - m % 4, n - n % 2);
    for i0 in (0..m4).step_by(4) {
        let ar = [arow(i0), arow(i0 + 1), arow(i0 + 2), arow(i0 + 3)];
        for j0 in (0..n2).step_by(2) {
            let d = T::dot_4x2(ar, [brow(j0), brow(j0 + 1)]);
            for (ii, row) in d.iter().enumerate() {
                c[(i0 + ii) * ldc + j0] += row[0];
                c[(i0 + ii) * ldc + j0 + 1] += row[1];
            }
        }
    }
    for i in 0..m {
        let js = if i < m4 { n2..n } else { 0..n };
        for j in js {
            c[i * ldc + j] += dot(arow(i), brow(j));
        }
    }
}

/// Contiguous row-major gemm shorthand.
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm(m, k, n, Mat::rows(a, k), Mat::rows(b, n), c, n);
}

/// Geometry of one 2-D convolution over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `u`.
    #[inline]
    fn tap_range(&self, u: usize, extent: usize, out: usize) -> (usize, usize) {
        // input index = o*stride + u*dilation - padding must lie in [0, extent)
        let off = u * self.dilation;
        let lo = if off >= self.padding {
            0
        } else {
            (self.padding - off).div_ceil(self.stride)
        };
        let hi = if off >= extent + self.padding {
            0
        } else {
            let max_in = extent - 1 + self.padding - off; // o*stride <= max_in
            (max_in / self.stride + 1).min(out)
        };
        (lo.min(hi), hi)
    }
}

impl ConvGeom {
    /// Output rows per column-matrix tile.
    pub fn tile_rows(&self) -> usize {
        (TILE_ELEMS / (self.rows() * self.ow).max(1)).clamp(1, self.oh)
    }
}

/// Gathers output rows `oi0..oi1` of one image `[cin, h, w]` into
/// `col[(ci, u, v), (oi - oi0, oj)]`, `col` resized to fit.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, x: &[T], oi0: usize, oi1: usize, col: &mut Vec<T>) {
    let k = g.k;
    let tp = (oi1 - oi0) * g.ow;
    col.resize(g.rows() * tp, T::zero());
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..k {
            let (ilo, ihi) = g.tap_range(u, g.h, g.oh);
            for v in 0..k {
                let (jlo, jhi) = g.tap_range(v, g.w, g.ow);
                let row = &mut col[((ci * k + u) * k + v) * tp..][..tp];
                for oi in oi0..oi1 {
                    let dst = &mut row[(oi - oi0) * g.ow..(oi - oi0 + 1) * g.ow];
                    if oi < ilo || oi >= ihi || jlo >= jhi {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let y = oi * g.stride + u * g.dilation - g.padding;
                    let src = &plane[y * g.w..(y + 1) * g.w];
                    dst[..jlo].iter_mut().for_each(|v| *v = T::zero());
                    dst[jhi..].iter_mut().for_each(|v| *v = T::zero());
                    if g.stride == 1 {
                        let x0 = jlo + v * g.dilation - g.padding;
                        dst[jlo..jhi].copy_from_slice(&src[x0..x0 + (jhi - jlo)]);
                    } else {
                        for oj in jlo..jhi {
                            dst[oj] = src[oj * g.stride + v * g.dilation - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column tile for output rows `oi0..oi1` back into an image
/// gradient `[cin, h, w]`; adjoint of [`im2col`].
pub(crate) fn col2im<T: Element>(g: &ConvGeom, col: &[T], oi0: usize, oi1: usize, dx: &mut [T]) {
    let k = g.k;
    let tp = (oi1 - oi0) * g.ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for u in 0..k {
            let (ilo, ihi) = g.tap_range(u, g.h, g.oh);
            for v in 0..k {
                let (jlo, jhi) = g.tap_range(v, g.w, g.ow);
                if jlo >= jhi {
                    continue;
                }
                let row = &col[((ci * k + u) * k + v) * tp..][..tp];
                for oi in ilo.max(oi0)..ihi.min(oi1) {
                    let y = oi * g.stride + u * g.dilation - g.padding;
                    let src = &row[(oi - oi0) * g.ow..(oi - oi0 + 1) * g.ow];
                    let dst = &mut plane[y * g.w..(y + 1) * g.w];
                    if g.stride == 1 {
                        let x0 = jlo + v * g.dilation - g.padding;
                        for (d, &s) in dst[x0..x0 + (jhi - jlo)].iter_mut().zip(&src[jlo..jhi]) {
                            *d += s;
                        }
                    } else {
                        for oj in jlo..jhi {
                            dst[oj * g.stride + v * g.dilation - g.padding] += src[oj];
                        }
                    }
                }
            }
        }
    }
}

/// `out [cout, oh*ow] += w ⋆ x` for one image, without bias.
fn conv_accumulate<T: Element>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T], ws: &mut Workspace<T>) {
    let (rows, p) = (g.rows(), g.cols());
    let cout = w.len() / rows;
    if g.is_pointwise() {
        gemm_ws(cout, rows, p, Mat::rows(w, rows), Mat::rows(x, p), out, p, ws);
        return;
    }
    if T::conv_direct(g, x, w, out, ws) {
        return;
    }
    let step = g.tile_rows();
    let mut col = std::mem::take(&mut ws.col);
    for oi0 in (0..g.oh).step_by(step) {
        let oi1 = (oi0 + step).min(g.oh);
        let tp = (oi1 - oi0) * g.ow;
        im2col(g, x, oi0, oi1, &mut col);
        gemm_ws(
            cout,
            rows,
            tp,
            Mat::rows(w, rows),
            Mat::rows(&col, tp),
            &mut out[oi0 * g.ow..],
            p,
            ws,
        );
    }
    ws.col = col;
}

/// Forward convolution of one image. `out` is `[cout, oh*ow]`.
pub(crate) fn conv_forward_image<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    b: &[T],
    out: &mut [T],
    ws: &mut Workspace<T>,
) {
    for (row, &bv) in out.chunks_exact_mut(g.cols()).zip(b) {
        row.iter_mut().for_each(|v| *v = bv);
    }
    conv_accumulate(g, x, w, out, ws);
}

/// Weights and geometry of the stride-1 convolution that maps an output gradient
/// back to the input gradient: kernel flipped in both axes, channels swapped.
pub(crate) fn flipped_conv<T: Element>(g: &ConvGeom, w: &[T], cout: usize) -> Option<(ConvGeom, Vec<T>)> {
    let span = (g.k - 1) * g.dilation;
    if g.stride != 1 || g.padding > span {
        return None;
    }
    let k = g.k;
    let mut wf = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..g.cin {
            for u in 0..k {
                for v in 0..k {
                    wf[((ci * cout + co) * k + (k - 1 - u)) * k + (k - 1 - v)] =
                        w[((co * g.cin + ci) * k + u) * k + v];
                }
            }
        }
    }
    let geom = ConvGeom {
        cin: cout,
        h: g.oh,
        w: g.ow,
        k,
        stride: 1,
        padding: span - g.padding,
        dilation: g.dilation,
        oh: g.h,
        ow: g.w,
    };
    Some((geom, wf))
}

/// Backward convolution of one image: accumulates into `dw`, `db` and optionally `dx`.
/// `flipped` comes from [`flipped_conv`] when the stride-1 input-gradient shortcut applies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_image<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    flipped: Option<&(ConvGeom, Vec<T>)>,
    ws: &mut Workspace<T>,
) {
    let (rows, p) = (g.rows(), g.cols());
    let cout = dout.len() / p;
    if let Some(db) = db {
        for (co, row) in dout.chunks_exact(p).enumerate() {
            db[co] += row.iter().copied().sum::<T>();
        }
    }
    if let (Some((fg, wf)), Some(dx)) = (flipped, dx.as_deref_mut()) {
        conv_accumulate(fg, dout, wf, dx, ws);
    }
    let dx = if flipped.is_some() { None } else { dx };
    let mut dw = dw;
    if let Some(d) = dw.as_deref_mut() {
        if !g.is_pointwise() && T::conv_weight_grad(g, x, dout, d, ws) {
            dw = None;
        }
    }
    if g.is_pointwise() {
        if let Some(dw) = dw {
            gemm_nt(cout, p, rows, dout, p, x, p, dw, rows);
        }
        if let Some(dx) = dx {
            gemm_ws(rows, cout, p, Mat::cols(w, rows), Mat::rows(dout, p), dx, p, ws);
        }
        return;
    }
    let step = g.tile_rows();
    let mut col = std::mem::take(&mut ws.col);
    let mut dcol = Vec::new();
    let mut dx = dx;
    for oi0 in (0..g.oh).step_by(step) {
        let oi1 = (oi0 + step).min(g.oh);
        let tp = (oi1 - oi0) * g.ow;
        let dout_tile = Mat::rows(&dout[oi0 * g.ow..], p);
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, x, oi0, oi1, &mut col);
            gemm_nt(cout, tp, rows, &dout[oi0 * g.ow..], p, &col, tp, dw, rows);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcol.clear();
            dcol.resize(rows * tp, T::zero());
            gemm_ws(rows, cout, tp, Mat::cols(w, rows), dout_tile, &mut dcol, tp, ws);
            col2im(g, &dcol, oi0, oi1, dx);
        }
    }
    ws.col = col;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_on_ragged_shapes() {
        let mut rng = Rng::new(5);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 16, 16), (9, 13, 37), (17, 2, 65), (5, 600, 33)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            let mut ct = vec![0.0; m * n];
            // same product through transposed views of transposed copies
            let at = naive_transpose(m, k, &a);
            let bt = naive_transpose(k, n, &b);
            gemm(m, k, n, Mat::cols(&at, m), Mat::cols(&bt, k), &mut ct, n);
            assert_eq!(c, ct);
            let want = naive_gemm(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_accumulates_into_existing_output() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm_nn(1, 2, 1, &a, &b, &mut c);
        assert_eq!(c, [21.0]);
    }

    fn naive_transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        out
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for every geometry
        let mut rng = Rng::new(8);
        for &(h, w, k, s, p, d) in &[(5, 5, 3, 1, 1, 1), (7, 6, 3, 2, 2, 2), (9, 9, 3, 1, 4, 4), (4, 4, 1, 2, 0, 1)] {
            let oh = (h + 2 * p - d * (k - 1) - 1) / s + 1;
            let ow = (w + 2 * p - d * (k - 1) - 1) / s + 1;
            let g = ConvGeom { cin: 2, h, w, k, stride: s, padding: p, dilation: d, oh, ow };
            let x: Vec<f64> = (0..2 * h * w).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..g.rows() * g.cols()).map(|_| rng.normal()).collect();
            let mut col = Vec::new();
            im2col(&g, &x, 0, oh, &mut col);
            let mut back = vec![0.0; x.len()];
            col2im(&g, &y, 0, oh, &mut back);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn flipped_input_gradient_matches_col2im() {
        let mut rng = Rng::new(9);
        for &(h, w, k, p, d) in &[(5, 5, 3, 1, 1), (8, 6, 3, 2, 2), (9, 9, 3, 4, 4), (6, 7, 3, 0, 1), (4, 4, 1, 0, 1), (7, 7, 3, 3, 2)] {
            let (cin, cout) = (3, 2);
            let oh = h + 2 * p - d * (k - 1);
            let ow = w + 2 * p - d * (k - 1);
            let g = ConvGeom { cin, h, w, k, stride: 1, padding: p, dilation: d, oh, ow };
            let x: Vec<f64> = (0..cin * h * w).map(|_| rng.normal()).collect();
            let wt: Vec<f64> = (0..cout * g.rows()).map(|_| rng.normal()).collect();
            let dout: Vec<f64> = (0..cout * oh * ow).map(|_| rng.normal()).collect();
            let mut ws = Workspace::new();
            let mut slow = vec![0.0; x.len()];
            conv_backward_image(&g, &x, &wt, &dout, Some(&mut slow), None, None, None, &mut ws);
            let flipped = flipped_conv(&g, &wt, cout).expect("stride-1 geometry");
            let mut fast = vec![0.0; x.len()];
            conv_backward_image(&g, &x, &wt, &dout, Some(&mut fast), None, None, Some(&flipped), &mut ws);
            for (a, b) in slow.iter().zip(&fast) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b} for {g:?}");
            }
        }
    }
}
