//! Stride-1 convolution kernels that read shifted rows of a zero-padded input
//! instead of materializing the column matrix. f32 with AVX-512 only; callers fall
//! back to im2col + gemm when these return `false`.

use super::kernels::{ConvGeom, Workspace};

/// Output channels per register tile.
const CO: usize = 8;

/// Copies `x [cin, h, w]` into `dst [cin, h + 2p, w + 2p]` with a zero border.
/// Returns the padded row pitch.
fn pad_input(g: &ConvGeom, x: &[f32], dst: &mut Vec<f32>) -> usize {
    let (hp, wp) = (g.h + 2 * g.padding, g.w + 2 * g.padding);
    dst.clear();
    dst.resize(g.cin * hp * wp, 0.0);
    for ci in 0..g.cin {
        for y in 0..g.h {
            let src = &x[(ci * g.h + y) * g.w..][..g.w];
            let at = (ci * hp + y + g.padding) * wp + g.padding;
            dst[at..at + g.w].copy_from_slice(src);
        }
    }
    wp
}

/// Start of kernel tap `(ci, u, v)` in the padded input, relative to an output pixel.
fn tap_offsets(g: &ConvGeom, wp: usize) -> Vec<usize> {
    let hp = g.h + 2 * g.padding;
    let mut off = Vec::with_capacity(g.rows());
    for ci in 0..g.cin {
        for u in 0..g.k {
            for v in 0..g.k {
                off.push(ci * hp * wp + u * g.dilation * wp + v * g.dilation);
            }
        }
    }
    off
}

fn applies(g: &ConvGeom) -> bool {
    cfg!(all(target_arch = "x86_64", target_feature = "avx512f")) && g.stride == 1 && !g.is_pointwise()
}

/// `out [cout, oh*ow] += w ⋆ x` for one image.
pub(crate) fn conv_accumulate(g: &ConvGeom, x: &[f32], w: &[f32], out: &mut [f32], ws: &mut Workspace<f32>) -> bool {
    if !applies(g) {
        return false;
    }
    let rows = g.rows();
    let cout = w.len() / rows;
    assert!(x.len() >= g.cin * g.h * g.w && out.len() >= cout * g.cols());
    let mut xp = std::mem::take(&mut ws.pad);
    let wp = pad_input(g, x, &mut xp);
    let off = tap_offsets(g, wp);
    let blocks = cout.div_ceil(CO);
    let a = &mut ws.a_pack;
    a.clear();
    a.resize(blocks * rows * CO, 0.0);
    for co in 0..cout {
        let (blk, r) = (co / CO, co % CO);
        for kk in 0..rows {
            a[(blk * rows + kk) * CO + r] = w[co * rows + kk];
        }
    }
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    for blk in 0..blocks {
        let mr = CO.min(cout - blk * CO);
        // SAFETY: avx512f is enabled at compile time. Every tap offset plus the largest
        // (y, x) read stays inside the padded input, the packed block holds rows*CO
        // values, and output rows below `mr` exist; lanes past `ow` are masked.
        unsafe {
            simd::forward_block(g, &xp, wp, &off, &a[blk * rows * CO..(blk + 1) * rows * CO], &mut out[blk * CO * g.cols()..], mr)
        };
    }
    ws.pad = xp;
    true
}

/// `dw [cout, cin*k*k] += dout ⋆ x` (the weight gradient) for one image.
pub(crate) fn conv_weight_grad(g: &ConvGeom, x: &[f32], dout: &[f32], dw: &mut [f32], ws: &mut Workspace<f32>) -> bool {
    if !applies(g) {
        return false;
    }
    let (rows, p) = (g.rows(), g.cols());
    let cout = dout.len() / p;
    assert!(x.len() >= g.cin * g.h * g.w && dw.len() >= cout * rows);
    let mut xp = std::mem::take(&mut ws.pad);
    let wp = pad_input(g, x, &mut xp);
    let off = tap_offsets(g, wp);
    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    // SAFETY: as in `conv_accumulate`; `dout` holds cout full output planes.
    unsafe {
        simd::weight_grad(g, &xp, wp, &off, dout, cout, dw)
    };
    ws.pad = xp;
    true
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod simd {
    use super::{ConvGeom, CO};
    use std::arch::x86_64::*;

    /// Lane masks for the two 16-wide halves of a 32-pixel run of length `n`.
    #[inline(always)]
    fn masks(n: usize) -> (__mmask16, __mmask16) {
        let lo = if n >= 16 { 0xFFFF } else { (1u32 << n) as u16 - 1 };
        let hi = if n >= 32 {
            0xFFFF
        } else if n > 16 {
            (1u32 << (n - 16)) as u16 - 1
        } else {
            0
        };
        (lo, hi)
    }

    #[inline(always)]
    fn mask16(n: usize) -> __mmask16 {
        if n >= 16 {
            0xFFFF
        } else {
            (1u32 << n) as u16 - 1
        }
    }

    pub(super) unsafe fn forward_block(
        g: &ConvGeom,
        xp: &[f32],
        wp: usize,
        off: &[usize],
        a: &[f32],
        out: &mut [f32],
        mr: usize,
    ) {
        let p = g.cols();
        let (xb, ab, ob) = (xp.as_ptr(), a.as_ptr(), out.as_mut_ptr());
        for y in 0..g.oh {
            for x0 in (0..g.ow).step_by(32) {
                let (m0, m1) = masks(g.ow - x0);
                let mut c0 = [_mm512_setzero_ps(); CO];
                let mut c1 = [_mm512_setzero_ps(); CO];
                for r in 0..mr {
                    let o = ob.add(r * p + y * g.ow + x0);
                    c0[r] = _mm512_maskz_loadu_ps(m0, o);
                    c1[r] = _mm512_maskz_loadu_ps(m1, o.add(16));
                }
                let base = xb.add(y * wp + x0);
                for (kk, &o) in off.iter().enumerate() {
                    let src = base.add(o);
                    let b0 = _mm512_maskz_loadu_ps(m0, src);
                    let b1 = _mm512_maskz_loadu_ps(m1, src.add(16));
                    let arow = ab.add(kk * CO);
                    for r in 0..CO {
                        let s = _mm512_set1_ps(*arow.add(r));
                        c0[r] = _mm512_fmadd_ps(s, b0, c0[r]);
                        c1[r] = _mm512_fmadd_ps(s, b1, c1[r]);
                    }
                }
                for r in 0..mr {
                    let o = ob.add(r * p + y * g.ow + x0);
                    _mm512_mask_storeu_ps(o, m0, c0[r]);
                    _mm512_mask_storeu_ps(o.add(16), m1, c1[r]);
                }
            }
        }
    }

    pub(super) unsafe fn weight_grad(
        g: &ConvGeom,
        xp: &[f32],
        wp: usize,
        off: &[usize],
        dout: &[f32],
        cout: usize,
        dw: &mut [f32],
    ) {
        const TC: usize = 4;
        const TK: usize = 4;
        let (rows, p) = (off.len(), g.cols());
        let (xb, db) = (xp.as_ptr(), dout.as_ptr());
        for co0 in (0..cout).step_by(TC) {
            // ragged tiles repeat the last row / tap and drop the duplicate sums
            let co: [usize; TC] = std::array::from_fn(|i| (co0 + i).min(cout - 1));
            for kk0 in (0..rows).step_by(TK) {
                let taps: [usize; TK] = std::array::from_fn(|j| off[(kk0 + j).min(rows - 1)]);
                let mut acc = [[_mm512_setzero_ps(); TK]; TC];
                for y in 0..g.oh {
                    let drow = db.add(y * g.ow);
                    let xrow = xb.add(y * wp);
                    for x0 in (0..g.ow).step_by(16) {
                        let m = mask16(g.ow - x0);
                        let d: [__m512; TC] = std::array::from_fn(|i| _mm512_maskz_loadu_ps(m, drow.add(co[i] * p + x0)));
                        for (j, &t) in taps.iter().enumerate() {
                            let s = _mm512_maskz_loadu_ps(m, xrow.add(t + x0));
                            for i in 0..TC {
                                acc[i][j] = _mm512_fmadd_ps(d[i], s, acc[i][j]);
                            }
                        }
                    }
                }
                for i in 0..TC.min(cout - co0) {
                    for j in 0..TK.min(rows - kk0) {
                        dw[(co0 + i) * rows + kk0 + j] += _mm512_reduce_add_ps(acc[i][j]);
                    }
                }
            }
        }
    }
}
