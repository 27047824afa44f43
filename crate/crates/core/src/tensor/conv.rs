//! Direct convolution kernels (forward + backward) for NCHW tensors.
//!
//! All loops are laid out so the innermost iteration runs over contiguous
//! output columns with a loop-invariant weight, which the compiler turns
//! into fused multiply-add vector code for stride 1.

use crate::scalar::Scalar;

/// Resolved dimensions of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Output extent of a standard convolution along one axis.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let eff = dilation * (k - 1) + 1;
    let padded = input + 2 * padding;
    if padded < eff {
        return None;
    }
    Some((padded - eff) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_dim(
    input: usize,
    k: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    dilation: usize,
) -> Option<usize> {
    let grown = (input - 1) * stride + dilation * (k - 1) + output_padding + 1;
    if grown < 2 * padding {
        return None;
    }
    Some(grown - 2 * padding)
}

/// Valid output index range [lo, hi) along one axis for a fixed kernel tap,
/// i.e. all `o` with `0 <= o*stride + off < limit`.
#[inline]
fn tap_range(off: isize, stride: usize, count: usize, limit: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi_excl = if (limit as isize) <= off {
        0
    } else {
        (limit as isize - off + s - 1) / s
    };
    let lo = (lo.max(0) as usize).min(count);
    let hi = (hi_excl.max(0) as usize).min(count);
    (lo, hi.max(lo))
}

/// The common stride-1 3x3 same-size configuration (padding == dilation)
/// takes a padded-plane path with no per-row edge handling.
#[inline]
fn same_size_3x3(d: &ConvDims) -> bool {
    d.stride == 1 && d.kh == 3 && d.kw == 3 && d.padding == d.dilation
}

/// Copy a plane into a zero border of width `p`.
fn pad_plane<S: Scalar>(src: &[S], h: usize, w: usize, p: usize, dst: &mut [S]) {
    let wp = w + 2 * p;
    dst.fill(S::ZERO);
    for r in 0..h {
        dst[(r + p) * wp + p..][..w].copy_from_slice(&src[r * w..][..w]);
    }
}

fn pad_all_planes<S: Scalar>(x: &[S], channels: usize, h: usize, w: usize, p: usize) -> Vec<S> {
    let plane = (h + 2 * p) * (w + 2 * p);
    let mut buf = vec![S::ZERO; channels * plane];
    for c in 0..channels {
        pad_plane(&x[c * h * w..][..h * w], h, w, p, &mut buf[c * plane..][..plane]);
    }
    buf
}

/// Row update out[i] += t0*s[i] + t1*s[i+d] + t2*s[i+2d] over the full row.
#[inline]
fn row_taps3<S: Scalar>(out_row: &mut [S], src_row: &[S], taps: [S; 3], dil: usize) {
    let w = out_row.len();
    let s0 = &src_row[..w];
    let s1 = &src_row[dil..dil + w];
    let s2 = &src_row[2 * dil..2 * dil + w];
    for (((o, &a), &b), &c) in out_row.iter_mut().zip(s0).zip(s1).zip(s2) {
        *o += taps[0] * a + taps[1] * b + taps[2] * c;
    }
}

fn conv2d_fwd_padded<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: &ConvDims, out: &mut [S]) {
    debug_assert!(same_size_3x3(d) && d.oh == d.h && d.ow == d.w);
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (p, dil) = (d.padding, d.dilation);
    let wp = d.w + 2 * p;
    let plane = (d.h + 2 * p) * wp;
    let hw = d.h * d.w;
    for n in 0..d.n {
        let xpad = pad_all_planes(&x[n * d.c_in * hw..][..d.c_in * hw], d.c_in, d.h, d.w, p);
        for co in 0..d.c_out {
            let grp = co / cout_g;
            let out_plane = &mut out[(n * d.c_out + co) * hw..][..hw];
            out_plane.fill(bias.map_or(S::ZERO, |bv| bv[co]));
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let xp = &xpad[ci * plane..][..plane];
                let w_base = (co * cin_g + ci_l) * 9;
                for kh in 0..3 {
                    let taps = [w[w_base + kh * 3], w[w_base + kh * 3 + 1], w[w_base + kh * 3 + 2]];
                    for oh in 0..d.h {
                        let src_row = &xp[(oh + kh * dil) * wp..][..wp];
                        row_taps3(&mut out_plane[oh * d.w..][..d.w], src_row, taps, dil);
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_input_padded<S: Scalar>(g: &[S], w: &[S], d: &ConvDims, dx: &mut [S]) {
    debug_assert!(same_size_3x3(d));
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (p, dil) = (d.padding, d.dilation);
    let wp = d.w + 2 * p;
    let plane = (d.h + 2 * p) * wp;
    let hw = d.h * d.w;
    for n in 0..d.n {
        let gpad = pad_all_planes(&g[n * d.c_out * hw..][..d.c_out * hw], d.c_out, d.h, d.w, p);
        for ci in 0..d.c_in {
            let grp = ci / cin_g;
            let ci_l = ci % cin_g;
            let dx_plane = &mut dx[(n * d.c_in + ci) * hw..][..hw];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let gp = &gpad[co * plane..][..plane];
                let w_base = (co * cin_g + ci_l) * 9;
                for kh in 0..3 {
                    // the transpose correlates with the flipped kernel
                    let taps = [
                        w[w_base + (2 - kh) * 3 + 2],
                        w[w_base + (2 - kh) * 3 + 1],
                        w[w_base + (2 - kh) * 3],
                    ];
                    for ih in 0..d.h {
                        let src_row = &gp[(ih + kh * dil) * wp..][..wp];
                        row_taps3(&mut dx_plane[ih * d.w..][..d.w], src_row, taps, dil);
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_weight_padded<S: Scalar>(g: &[S], x: &[S], d: &ConvDims, dw: &mut [S]) {
    debug_assert!(same_size_3x3(d));
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (p, dil) = (d.padding, d.dilation);
    let wp = d.w + 2 * p;
    let plane = (d.h + 2 * p) * wp;
    let hw = d.h * d.w;
    for n in 0..d.n {
        let xpad = pad_all_planes(&x[n * d.c_in * hw..][..d.c_in * hw], d.c_in, d.h, d.w, p);
        for co in 0..d.c_out {
            let grp = co / cout_g;
            let g_plane = &g[(n * d.c_out + co) * hw..][..hw];
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let xp = &xpad[ci * plane..][..plane];
                let w_base = (co * cin_g + ci_l) * 9;
                for kh in 0..3 {
                    for kw in 0..3 {
                        let mut lanes = [S::ZERO; DOT_LANES];
                        for oh in 0..d.h {
                            let g_row = &g_plane[oh * d.w..][..d.w];
                            let x_row = &xp[(oh + kh * dil) * wp + kw * dil..][..d.w];
                            dot_unrolled_into(&mut lanes, g_row, x_row);
                        }
                        dw[w_base + kh * 3 + kw] += reduce_lanes(&lanes);
                    }
                }
            }
        }
    }
}

/// The stride-2 3x3 halving configuration (padding == dilation).
#[inline]
fn halving_3x3(d: &ConvDims) -> bool {
    d.stride == 2 && d.kh == 3 && d.kw == 3 && d.padding == d.dilation
}

/// Row update out[i] += t0*s[2i] + t1*s[2i+d] + t2*s[2i+2d].
#[inline]
fn row_taps3_gather2<S: Scalar>(out_row: &mut [S], src_row: &[S], taps: [S; 3], dil: usize) {
    let w = out_row.len();
    let s0 = &src_row[..2 * w - 1];
    let s1 = &src_row[dil..dil + 2 * w - 1];
    let s2 = &src_row[2 * dil..2 * dil + 2 * w - 1];
    for (i, o) in out_row.iter_mut().enumerate() {
        *o += taps[0] * s0[2 * i] + taps[1] * s1[2 * i] + taps[2] * s2[2 * i];
    }
}

/// Zero-stuffed padded canvas: canvas[(2r + d)][(2c + d)] = x[r][c] on a
/// (2h + 2d) x (2w + 2d) grid. The adjoint of a stride-2 convolution is a
/// stride-1 convolution over this canvas.
fn upsample_canvas<S: Scalar>(x_plane: &[S], h: usize, w: usize, dil: usize) -> Vec<S> {
    let (ch, cw) = (2 * h + 2 * dil, 2 * w + 2 * dil);
    let mut canvas = vec![S::ZERO; ch * cw];
    for r in 0..h {
        let src = &x_plane[r * w..][..w];
        let dst = &mut canvas[(2 * r + dil) * cw + dil..];
        for (c, &v) in src.iter().enumerate() {
            dst[2 * c] = v;
        }
    }
    canvas
}


/// Even/odd column split of padded planes: gathers at stride 2 become
/// contiguous reads. Returns (evens, odds) with row strides we/wo.
struct Deinterleaved<S> {
    even: Vec<S>,
    odd: Vec<S>,
    we: usize,
    wo: usize,
}

fn deinterleave_planes<S: Scalar>(padded: &[S], channels: usize, rows: usize, cols: usize) -> Deinterleaved<S> {
    let we = cols.div_ceil(2);
    let wo = cols / 2;
    let mut even = vec![S::ZERO; channels * rows * we];
    let mut odd = vec![S::ZERO; channels * rows * wo];
    for c in 0..channels {
        for r in 0..rows {
            let src = &padded[(c * rows + r) * cols..][..cols];
            let e = &mut even[(c * rows + r) * we..][..we];
            let o = &mut odd[(c * rows + r) * wo..][..wo];
            for i in 0..wo {
                e[i] = src[2 * i];
                o[i] = src[2 * i + 1];
            }
            if cols % 2 == 1 {
                e[we - 1] = src[cols - 1];
            }
        }
    }
    Deinterleaved { even, odd, we, wo }
}

/// out[i] += t0*s[2i] + t1*s[2i+dil] + t2*s[2i+2dil] on deinterleaved rows.
/// dil == 1 mixes even and odd; dil == 2 stays on the even lane.
#[inline]
fn row_taps3_deint<S: Scalar>(out_row: &mut [S], e_row: &[S], o_row: &[S], taps: [S; 3], dil: usize) {
    let w = out_row.len();
    match dil {
        1 => {
            let e0 = &e_row[..w];
            let e1 = &e_row[1..1 + w];
            let o0 = &o_row[..w];
            for (((out, &a), &b), &c) in out_row.iter_mut().zip(e0).zip(e1).zip(o0) {
                *out += taps[0] * a + taps[2] * b + taps[1] * c;
            }
        }
        2 => {
            let e0 = &e_row[..w];
            let e1 = &e_row[1..1 + w];
            let e2 = &e_row[2..2 + w];
            for (((out, &a), &b), &c) in out_row.iter_mut().zip(e0).zip(e1).zip(e2) {
                *out += taps[0] * a + taps[1] * b + taps[2] * c;
            }
        }
        _ => unreachable!("deinterleaved path only supports dilation 1 or 2"),
    }
}

/// acc_k += sum_i g[i] * s[2i + k*dil] on deinterleaved rows.
#[inline]
fn row_dots3_deint_into<S: Scalar>(
    lanes: &mut [[S; DOT_LANES]; 3],
    g_row: &[S],
    e_row: &[S],
    o_row: &[S],
    dil: usize,
) {
    let w = g_row.len();
    let chunks = w / DOT_LANES;
    match dil {
        1 => {
            for c in 0..chunks {
                let base = c * DOT_LANES;
                let gs = &g_row[base..][..DOT_LANES];
                let e0 = &e_row[base..][..DOT_LANES];
                let e1 = &e_row[base + 1..][..DOT_LANES];
                let o0 = &o_row[base..][..DOT_LANES];
                for l in 0..DOT_LANES {
                    lanes[0][l] += gs[l] * e0[l];
                    lanes[1][l] += gs[l] * o0[l];
                    lanes[2][l] += gs[l] * e1[l];
                }
            }
            for i in chunks * DOT_LANES..w {
                lanes[0][0] += g_row[i] * e_row[i];
                lanes[1][0] += g_row[i] * o_row[i];
                lanes[2][0] += g_row[i] * e_row[i + 1];
            }
        }
        2 => {
            for c in 0..chunks {
                let base = c * DOT_LANES;
                let gs = &g_row[base..][..DOT_LANES];
                let e0 = &e_row[base..][..DOT_LANES];
                let e1 = &e_row[base + 1..][..DOT_LANES];
                let e2 = &e_row[base + 2..][..DOT_LANES];
                for l in 0..DOT_LANES {
                    lanes[0][l] += gs[l] * e0[l];
                    lanes[1][l] += gs[l] * e1[l];
                    lanes[2][l] += gs[l] * e2[l];
                }
            }
            for i in chunks * DOT_LANES..w {
                lanes[0][0] += g_row[i] * e_row[i];
                lanes[1][0] += g_row[i] * e_row[i + 1];
                lanes[2][0] += g_row[i] * e_row[i + 2];
            }
        }
        _ => unreachable!("deinterleaved path only supports dilation 1 or 2"),
    }
}

fn conv2d_fwd_halving<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: &ConvDims, out: &mut [S]) {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (p, dil) = (d.padding, d.dilation);
    let wp = d.w + 2 * p;
    let plane = (d.h + 2 * p) * wp;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    let rows = d.h + 2 * p;
    let use_deint = dil <= 2;
    for n in 0..d.n {
        let xpad = pad_all_planes(&x[n * d.c_in * hw_in..][..d.c_in * hw_in], d.c_in, d.h, d.w, p);
        let split = use_deint.then(|| deinterleave_planes(&xpad, d.c_in, rows, wp));
        for co in 0..d.c_out {
            let grp = co / cout_g;
            let out_plane = &mut out[(n * d.c_out + co) * hw_out..][..hw_out];
            out_plane.fill(bias.map_or(S::ZERO, |bv| bv[co]));
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let w_base = (co * cin_g + ci_l) * 9;
                for kh in 0..3 {
                    let taps = [w[w_base + kh * 3], w[w_base + kh * 3 + 1], w[w_base + kh * 3 + 2]];
                    for oh in 0..d.oh {
                        let r = 2 * oh + kh * dil;
                        let out_row = &mut out_plane[oh * d.ow..][..d.ow];
                        if let Some(sp) = &split {
                            let e_row = &sp.even[(ci * rows + r) * sp.we..][..sp.we];
                            let o_row = &sp.odd[(ci * rows + r) * sp.wo..][..sp.wo];
                            row_taps3_deint(out_row, e_row, o_row, taps, dil);
                        } else {
                            let src_row = &xpad[ci * plane + r * wp..][..wp];
                            row_taps3_gather2(out_row, src_row, taps, dil);
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_input_halving<S: Scalar>(g: &[S], w: &[S], d: &ConvDims, dx: &mut [S]) {
    // adjoint: stride-1 correlation of the zero-stuffed gradient with the
    // flipped kernel
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let dil = d.dilation;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    if dil <= 2 && d.h == 2 * d.oh && d.w == 2 * d.ow {
        for n in 0..d.n {
            let gpad = pad_all_planes(&g[n * d.c_out * hw_out..][..d.c_out * hw_out], d.c_out, d.oh, d.ow, 1);
            let plane = (d.oh + 2) * (d.ow + 2);
            for ci in 0..d.c_in {
                let grp = ci / cin_g;
                let ci_l = ci % cin_g;
                let dx_plane = &mut dx[(n * d.c_in + ci) * hw_in..][..hw_in];
                for co_l in 0..cout_g {
                    let co = grp * cout_g + co_l;
                    let taps = flipped_taps(w, (co * cin_g + ci_l) * 9);
                    upsampled_corr_accumulate(dx_plane, &gpad[co * plane..][..plane], d.oh, d.ow, &taps, dil);
                }
            }
        }
        return;
    }
    let cw = 2 * d.ow + 2 * dil;
    for n in 0..d.n {
        let canvases: Vec<Vec<S>> = (0..d.c_out)
            .map(|co| upsample_canvas(&g[(n * d.c_out + co) * hw_out..][..hw_out], d.oh, d.ow, dil))
            .collect();
        for ci in 0..d.c_in {
            let grp = ci / cin_g;
            let ci_l = ci % cin_g;
            let dx_plane = &mut dx[(n * d.c_in + ci) * hw_in..][..hw_in];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let gp = &canvases[co];
                let w_base = (co * cin_g + ci_l) * 9;
                for kh in 0..3 {
                    let taps = [
                        w[w_base + (2 - kh) * 3 + 2],
                        w[w_base + (2 - kh) * 3 + 1],
                        w[w_base + (2 - kh) * 3],
                    ];
                    for ih in 0..d.h {
                        let src_row = &gp[(ih + kh * dil) * cw..][..cw];
                        row_taps3(&mut dx_plane[ih * d.w..][..d.w], src_row, taps, dil);
                    }
                }
            }
        }
    }
}

fn conv2d_bwd_weight_halving<S: Scalar>(g: &[S], x: &[S], d: &ConvDims, dw: &mut [S]) {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (p, dil) = (d.padding, d.dilation);
    let wp = d.w + 2 * p;
    let plane = (d.h + 2 * p) * wp;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    let rows = d.h + 2 * p;
    let use_deint = dil <= 2;
    for n in 0..d.n {
        let xpad = pad_all_planes(&x[n * d.c_in * hw_in..][..d.c_in * hw_in], d.c_in, d.h, d.w, p);
        let split = use_deint.then(|| deinterleave_planes(&xpad, d.c_in, rows, wp));
        for co in 0..d.c_out {
            let grp = co / cout_g;
            let g_plane = &g[(n * d.c_out + co) * hw_out..][..hw_out];
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let w_base = (co * cin_g + ci_l) * 9;
                for kh in 0..3 {
                    let mut lanes = [[S::ZERO; DOT_LANES]; 3];
                    for oh in 0..d.oh {
                        let g_row = &g_plane[oh * d.ow..][..d.ow];
                        let r = 2 * oh + kh * dil;
                        if let Some(sp) = &split {
                            let e_row = &sp.even[(ci * rows + r) * sp.we..][..sp.we];
                            let o_row = &sp.odd[(ci * rows + r) * sp.wo..][..sp.wo];
                            row_dots3_deint_into(&mut lanes, g_row, e_row, o_row, dil);
                        } else {
                            let src_row = &xpad[ci * plane + r * wp..][..wp];
                            row_dots3_gather2_into(&mut lanes, g_row, src_row, dil);
                        }
                    }
                    for k in 0..3 {
                        dw[w_base + kh * 3 + k] += reduce_lanes(&lanes[k]);
                    }
                }
            }
        }
    }
}


/// Pointwise (1x1, stride 1, no padding) configuration.
#[inline]
fn pointwise(d: &ConvDims) -> bool {
    d.stride == 1 && d.kh == 1 && d.kw == 1 && d.padding == 0 && d.dilation == 1
}

fn conv1x1_fwd<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: &ConvDims, out: &mut [S]) {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let hw = d.h * d.w;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let grp = co / cout_g;
            let out_plane = &mut out[(n * d.c_out + co) * hw..][..hw];
            out_plane.fill(bias.map_or(S::ZERO, |bv| bv[co]));
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let wv = w[co * cin_g + ci_l];
                let x_plane = &x[(n * d.c_in + ci) * hw..][..hw];
                for (o, &xv) in out_plane.iter_mut().zip(x_plane) {
                    *o += wv * xv;
                }
            }
        }
    }
}

fn conv1x1_bwd_input<S: Scalar>(g: &[S], w: &[S], d: &ConvDims, dx: &mut [S]) {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let hw = d.h * d.w;
    for n in 0..d.n {
        for ci in 0..d.c_in {
            let grp = ci / cin_g;
            let ci_l = ci % cin_g;
            let dx_plane = &mut dx[(n * d.c_in + ci) * hw..][..hw];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let wv = w[co * cin_g + ci_l];
                let g_plane = &g[(n * d.c_out + co) * hw..][..hw];
                for (dv, &gv) in dx_plane.iter_mut().zip(g_plane) {
                    *dv += wv * gv;
                }
            }
        }
    }
}

fn conv1x1_bwd_weight<S: Scalar>(g: &[S], x: &[S], d: &ConvDims, dw: &mut [S]) {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let hw = d.h * d.w;
    for co in 0..d.c_out {
        let grp = co / cout_g;
        for ci_l in 0..cin_g {
            let ci = grp * cin_g + ci_l;
            let mut acc = S::ZERO;
            for n in 0..d.n {
                let g_plane = &g[(n * d.c_out + co) * hw..][..hw];
                let x_plane = &x[(n * d.c_in + ci) * hw..][..hw];
                acc += dot_unrolled(g_plane, x_plane);
            }
            dw[co * cin_g + ci_l] += acc;
        }
    }
}

pub fn conv2d_fwd<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: &ConvDims, out: &mut [S]) {
    if pointwise(d) {
        return conv1x1_fwd(x, w, bias, d, out);
    }
    if same_size_3x3(d) {
        return conv2d_fwd_padded(x, w, bias, d, out);
    }
    if halving_3x3(d) {
        return conv2d_fwd_halving(x, w, bias, d, out);
    }
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let out_plane = &mut out[(n * d.c_out + co) * hw_out..][..hw_out];
            let b = bias.map_or(S::ZERO, |bv| bv[co]);
            out_plane.fill(b);
            for ci_l in 0..cin_g {
                let ci = g * cin_g + ci_l;
                let x_plane = &x[(n * d.c_in + ci) * hw_in..][..hw_in];
                let w_base = ((co * cin_g + ci_l) * d.kh) * d.kw;
                for kh in 0..d.kh {
                    let off_h = (kh * d.dilation) as isize - d.padding as isize;
                    let (oh_lo, oh_hi) = tap_range(off_h, d.stride, d.oh, d.h);
                    if d.stride == 1 && d.kw == 3 {
                        // fused three-tap row update on the interior
                        let taps = [w[w_base + kh * 3], w[w_base + kh * 3 + 1], w[w_base + kh * 3 + 2]];
                        let offs = [
                            -(d.padding as isize),
                            d.dilation as isize - d.padding as isize,
                            2 * d.dilation as isize - d.padding as isize,
                        ];
                        for oh in oh_lo..oh_hi {
                            let ih = oh as isize + off_h;
                            let x_row = &x_plane[ih as usize * d.w..][..d.w];
                            let out_row = &mut out_plane[oh * d.ow..][..d.ow];
                            fused_taps_accumulate(out_row, x_row, taps, offs, d.w);
                        }
                        continue;
                    }
                    for kw in 0..d.kw {
                        let wv = w[w_base + kh * d.kw + kw];
                        let off_w = (kw * d.dilation) as isize - d.padding as isize;
                        let (ow_lo, ow_hi) = tap_range(off_w, d.stride, d.ow, d.w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * d.stride) as isize + off_h;
                            let x_row = &x_plane[ih as usize * d.w..][..d.w];
                            let out_row = &mut out_plane[oh * d.ow..][..d.ow];
                            if d.stride == 1 {
                                let xa = (ow_lo as isize + off_w) as usize;
                                let xs = &x_row[xa..xa + (ow_hi - ow_lo)];
                                let os = &mut out_row[ow_lo..ow_hi];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * d.stride) as isize + off_w;
                                    out_row[ow] += wv * x_row[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// out[i] += sum_k taps[k] * src[i + offs[k]], handling the out-of-range
/// edges per tap and fusing all three taps over the in-range interior.
/// `src` has length `src_len`; `out` positions index the same coordinate
/// space (stride 1).
#[inline]
fn fused_taps_accumulate<S: Scalar>(out: &mut [S], src: &[S], taps: [S; 3], offs: [isize; 3], src_len: usize) {
    let count = out.len();
    let mut lo = 0usize;
    let mut hi = count;
    for &off in &offs {
        let (tl, th) = tap_range(off, 1, count, src_len);
        lo = lo.max(tl.min(th));
        hi = hi.min(th);
    }
    if lo > hi {
        lo = hi;
    }
    // left edge, per tap with validity checks
    for i in 0..lo {
        let mut acc = out[i];
        for k in 0..3 {
            let j = i as isize + offs[k];
            if j >= 0 && (j as usize) < src_len {
                acc += taps[k] * src[j as usize];
            }
        }
        out[i] = acc;
    }
    // interior: all three taps valid
    if hi > lo {
        let len = hi - lo;
        let s0 = &src[(lo as isize + offs[0]) as usize..][..len];
        let s1 = &src[(lo as isize + offs[1]) as usize..][..len];
        let s2 = &src[(lo as isize + offs[2]) as usize..][..len];
        let os = &mut out[lo..hi];
        for (((o, &a), &b), &c) in os.iter_mut().zip(s0).zip(s1).zip(s2) {
            *o += taps[0] * a + taps[1] * b + taps[2] * c;
        }
    }
    // right edge
    for i in hi..count {
        let mut acc = out[i];
        for k in 0..3 {
            let j = i as isize + offs[k];
            if j >= 0 && (j as usize) < src_len {
                acc += taps[k] * src[j as usize];
            }
        }
        out[i] = acc;
    }
}

pub fn conv2d_bwd_input<S: Scalar>(g: &[S], w: &[S], d: &ConvDims, dx: &mut [S]) {
    if pointwise(d) {
        return conv1x1_bwd_input(g, w, d, dx);
    }
    if same_size_3x3(d) {
        return conv2d_bwd_input_padded(g, w, d, dx);
    }
    if halving_3x3(d) {
        return conv2d_bwd_input_halving(g, w, d, dx);
    }
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    for n in 0..d.n {
        for co in 0..d.c_out {
            let grp = co / cout_g;
            let g_plane = &g[(n * d.c_out + co) * hw_out..][..hw_out];
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let dx_plane = &mut dx[(n * d.c_in + ci) * hw_in..][..hw_in];
                let w_base = ((co * cin_g + ci_l) * d.kh) * d.kw;
                for kh in 0..d.kh {
                    let off_h = (kh * d.dilation) as isize - d.padding as isize;
                    let (oh_lo, oh_hi) = tap_range(off_h, d.stride, d.oh, d.h);
                    if d.stride == 1 && d.kw == 3 {
                        // dx[iw] gathers g[iw - off] per tap: same fused form
                        // with negated offsets
                        let taps = [w[w_base + kh * 3], w[w_base + kh * 3 + 1], w[w_base + kh * 3 + 2]];
                        let offs = [
                            d.padding as isize,
                            d.padding as isize - d.dilation as isize,
                            d.padding as isize - 2 * d.dilation as isize,
                        ];
                        for oh in oh_lo..oh_hi {
                            let ih = oh as isize + off_h;
                            let g_row = &g_plane[oh * d.ow..][..d.ow];
                            let dx_row = &mut dx_plane[ih as usize * d.w..][..d.w];
                            fused_taps_accumulate(dx_row, g_row, taps, offs, d.ow);
                        }
                        continue;
                    }
                    for kw in 0..d.kw {
                        let wv = w[w_base + kh * d.kw + kw];
                        let off_w = (kw * d.dilation) as isize - d.padding as isize;
                        let (ow_lo, ow_hi) = tap_range(off_w, d.stride, d.ow, d.w);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * d.stride) as isize + off_h;
                            let g_row = &g_plane[oh * d.ow..][..d.ow];
                            let dx_row = &mut dx_plane[ih as usize * d.w..][..d.w];
                            if d.stride == 1 {
                                let xa = (ow_lo as isize + off_w) as usize;
                                let ds = &mut dx_row[xa..xa + (ow_hi - ow_lo)];
                                let gs = &g_row[ow_lo..ow_hi];
                                for (dv, &gv) in ds.iter_mut().zip(gs) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = (ow * d.stride) as isize + off_w;
                                    dx_row[iw as usize] += wv * g_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}


const DOT_LANES: usize = 8;

/// Three stride-2 gathered dot products accumulated into caller lanes;
/// the tail goes into lane 0 (fixed order).
#[inline]
fn row_dots3_gather2_into<S: Scalar>(lanes: &mut [[S; DOT_LANES]; 3], g_row: &[S], src_row: &[S], dil: usize) {
    let w = g_row.len();
    let chunks = w / DOT_LANES;
    for c in 0..chunks {
        for l in 0..DOT_LANES {
            let i = c * DOT_LANES + l;
            let g = g_row[i];
            lanes[0][l] += g * src_row[2 * i];
            lanes[1][l] += g * src_row[2 * i + dil];
            lanes[2][l] += g * src_row[2 * i + 2 * dil];
        }
    }
    for i in chunks * DOT_LANES..w {
        let g = g_row[i];
        lanes[0][0] += g * src_row[2 * i];
        lanes[1][0] += g * src_row[2 * i + dil];
        lanes[2][0] += g * src_row[2 * i + 2 * dil];
    }
}

#[inline]
fn reduce_lanes<S: Scalar>(lanes: &[S; DOT_LANES]) -> S {
    let mut s = S::ZERO;
    for &v in lanes {
        s += v;
    }
    s
}

/// Accumulate a dot product into caller-held lanes (fixed order); the
/// tail that does not fill a block goes into lane 0.
#[inline]
fn dot_unrolled_into<S: Scalar>(lanes: &mut [S; DOT_LANES], a: &[S], b: &[S]) {
    debug_assert_eq!(a.len(), b.len());
    let chunks = a.len() / DOT_LANES;
    for c in 0..chunks {
        let ab = &a[c * DOT_LANES..][..DOT_LANES];
        let bb = &b[c * DOT_LANES..][..DOT_LANES];
        for l in 0..DOT_LANES {
            lanes[l] += ab[l] * bb[l];
        }
    }
    for i in chunks * DOT_LANES..a.len() {
        lanes[0] += a[i] * b[i];
    }
}

/// Dot product with eight independent accumulators (fixed summation order).
#[inline]
fn dot_unrolled<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let ab = &a[c * LANES..][..LANES];
        let bb = &b[c * LANES..][..LANES];
        for l in 0..LANES {
            acc[l] += ab[l] * bb[l];
        }
    }
    let mut s = S::ZERO;
    for v in acc {
        s += v;
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Dot product of a contiguous row against a strided row, four independent
/// accumulators (fixed summation order).
#[inline]
fn dot_strided<S: Scalar>(g: &[S], x: &[S], x_start: usize, stride: usize) -> S {
    const LANES: usize = 4;
    let mut acc = [S::ZERO; LANES];
    let chunks = g.len() / LANES;
    for c in 0..chunks {
        for l in 0..LANES {
            let i = c * LANES + l;
            acc[l] += g[i] * x[x_start + i * stride];
        }
    }
    let mut s = S::ZERO;
    for v in acc {
        s += v;
    }
    for i in chunks * LANES..g.len() {
        s += g[i] * x[x_start + i * stride];
    }
    s
}

pub fn conv2d_bwd_weight<S: Scalar>(g: &[S], x: &[S], d: &ConvDims, dw: &mut [S]) {
    if pointwise(d) {
        return conv1x1_bwd_weight(g, x, d, dw);
    }
    if same_size_3x3(d) {
        return conv2d_bwd_weight_padded(g, x, d, dw);
    }
    if halving_3x3(d) {
        return conv2d_bwd_weight_halving(g, x, d, dw);
    }
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    for co in 0..d.c_out {
        let grp = co / cout_g;
        for ci_l in 0..cin_g {
            let ci = grp * cin_g + ci_l;
            let w_base = ((co * cin_g + ci_l) * d.kh) * d.kw;
            for kh in 0..d.kh {
                let off_h = (kh * d.dilation) as isize - d.padding as isize;
                let (oh_lo, oh_hi) = tap_range(off_h, d.stride, d.oh, d.h);
                for kw in 0..d.kw {
                    let off_w = (kw * d.dilation) as isize - d.padding as isize;
                    let (ow_lo, ow_hi) = tap_range(off_w, d.stride, d.ow, d.w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = S::ZERO;
                    for n in 0..d.n {
                        let g_plane = &g[(n * d.c_out + co) * hw_out..][..hw_out];
                        let x_plane = &x[(n * d.c_in + ci) * hw_in..][..hw_in];
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * d.stride) as isize + off_h;
                            let g_row = &g_plane[oh * d.ow..][..d.ow];
                            let x_row = &x_plane[ih as usize * d.w..][..d.w];
                            let gs = &g_row[ow_lo..ow_hi];
                            if d.stride == 1 {
                                let xa = (ow_lo as isize + off_w) as usize;
                                acc += dot_unrolled(gs, &x_row[xa..xa + (ow_hi - ow_lo)]);
                            } else {
                                let xa = (ow_lo * d.stride) as isize + off_w;
                                acc += dot_strided(gs, x_row, xa as usize, d.stride);
                            }
                        }
                    }
                    dw[w_base + kh * d.kw + kw] += acc;
                }
            }
        }
    }
}

pub fn conv2d_bwd_bias<S: Scalar>(g: &[S], d: &ConvDims, db: &mut [S]) {
    let hw_out = d.oh * d.ow;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g_plane = &g[(n * d.c_out + co) * hw_out..][..hw_out];
            let mut acc = S::ZERO;
            for &gv in g_plane {
                acc += gv;
            }
            db[co] += acc;
        }
    }
}

/// Dimensions of a transposed convolution. Weight layout is
/// (c_in, c_out/groups, kh, kw); oh/ow are the transposed output extents.
#[derive(Clone, Copy, Debug)]
pub struct ConvTDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// The stride-2 3x3 exact-doubling transposed configuration.
#[inline]
fn doubling_3x3(d: &ConvTDims) -> bool {
    d.stride == 2 && d.kh == 3 && d.kw == 3 && d.padding == d.dilation && d.oh == 2 * d.h && d.ow == 2 * d.w
}


/// Accumulate the zero-stuffed stride-1 correlation
/// out[r][c] += sum_{k,l} taps[k*3+l] * Xup[r + k*dil - dil][c + l*dil - dil]
/// where Xup is the 2x zero-stuffed grid of a plane (entries at even
/// coordinates). Real contributions split by output parity: with dil == 1
/// four dense sub-kernels, with dil == 2 a single 3x3 correlation landing
/// on even coordinates only. `xp` is the plane padded by one; output
/// extents must be exactly (2h, 2w).
#[allow(clippy::too_many_arguments)]
fn upsampled_corr_accumulate<S: Scalar>(
    out_plane: &mut [S],
    xp: &[S],
    h: usize,
    w: usize,
    taps: &[S; 9],
    dil: usize,
) {
    let wp = w + 2;
    let ow = 2 * w;
    match dil {
        1 => {
            let (t00, t01, t02) = (taps[0], taps[1], taps[2]);
            let (t10, t11, t12) = (taps[3], taps[4], taps[5]);
            let (t20, t21, t22) = (taps[6], taps[7], taps[8]);
            for a in 0..h {
                let row0 = &xp[(a + 1) * wp..][..wp];
                let row1 = &xp[(a + 2) * wp..][..wp];
                // even output row 2a: vertical tap k = 1 only
                {
                    let out_row = &mut out_plane[(2 * a) * ow..][..ow];
                    let x0 = &row0[1..1 + w];
                    let x1 = &row0[2..2 + w];
                    for ((pair, &v0), &v1) in out_row.chunks_exact_mut(2).zip(x0).zip(x1) {
                        pair[0] += t11 * v0;
                        pair[1] += t10 * v0 + t12 * v1;
                    }
                }
                // odd output row 2a + 1: vertical taps k = 0 (this row) and
                // k = 2 (next row)
                {
                    let out_row = &mut out_plane[(2 * a + 1) * ow..][..ow];
                    let x0 = &row0[1..1 + w];
                    let x1 = &row0[2..2 + w];
                    let y0 = &row1[1..1 + w];
                    let y1 = &row1[2..2 + w];
                    for ((((pair, &v0), &v1), &u0), &u1) in
                        out_row.chunks_exact_mut(2).zip(x0).zip(x1).zip(y0).zip(y1)
                    {
                        pair[0] += t01 * v0 + t21 * u0;
                        pair[1] += t00 * v0 + t02 * v1 + t20 * u0 + t22 * u1;
                    }
                }
            }
        }
        2 => {
            // only even coordinates receive anything: a full 3x3 correlation
            for a in 0..h {
                let out_row = &mut out_plane[(2 * a) * ow..][..ow];
                let r0 = &xp[a * wp..][..wp];
                let r1 = &xp[(a + 1) * wp..][..wp];
                let r2 = &xp[(a + 2) * wp..][..wp];
                for b in 0..w {
                    let acc = taps[0] * r0[b]
                        + taps[1] * r0[b + 1]
                        + taps[2] * r0[b + 2]
                        + taps[3] * r1[b]
                        + taps[4] * r1[b + 1]
                        + taps[5] * r1[b + 2]
                        + taps[6] * r2[b]
                        + taps[7] * r2[b + 1]
                        + taps[8] * r2[b + 2];
                    out_row[2 * b] += acc;
                }
            }
        }
        _ => unreachable!("parity path only supports dilation 1 or 2"),
    }
}

/// Kernel flipped in both axes, as required by the transposed form.
#[inline]
fn flipped_taps<S: Scalar>(w: &[S], base: usize) -> [S; 9] {
    let mut t = [S::ZERO; 9];
    for k in 0..3 {
        for l in 0..3 {
            t[k * 3 + l] = w[base + (2 - k) * 3 + (2 - l)];
        }
    }
    t
}

fn conv_transpose2d_fwd_doubling<S: Scalar>(x: &[S], w: &[S], d: &ConvTDims, out: &mut [S]) {
    // stride-1 correlation of the zero-stuffed input with the flipped
    // kernel, evaluated densely per output parity
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let dil = d.dilation;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    out.fill(S::ZERO);
    if dil <= 2 {
        for n in 0..d.n {
            let xpad = pad_all_planes(&x[n * d.c_in * hw_in..][..d.c_in * hw_in], d.c_in, d.h, d.w, 1);
            let plane = (d.h + 2) * (d.w + 2);
            for co in 0..d.c_out {
                let grp = co / cout_g;
                let co_l = co % cout_g;
                let out_plane = &mut out[(n * d.c_out + co) * hw_out..][..hw_out];
                for ci_l in 0..cin_g {
                    let ci = grp * cin_g + ci_l;
                    let taps = flipped_taps(w, (ci * cout_g + co_l) * 9);
                    upsampled_corr_accumulate(out_plane, &xpad[ci * plane..][..plane], d.h, d.w, &taps, dil);
                }
            }
        }
        return;
    }
    let cw = 2 * d.w + 2 * dil;
    for n in 0..d.n {
        let canvases: Vec<Vec<S>> = (0..d.c_in)
            .map(|ci| upsample_canvas(&x[(n * d.c_in + ci) * hw_in..][..hw_in], d.h, d.w, dil))
            .collect();
        for co in 0..d.c_out {
            let grp = co / cout_g;
            let co_l = co % cout_g;
            let out_plane = &mut out[(n * d.c_out + co) * hw_out..][..hw_out];
            for ci_l in 0..cin_g {
                let ci = grp * cin_g + ci_l;
                let xp = &canvases[ci];
                let w_base = (ci * cout_g + co_l) * 9;
                for kh in 0..3 {
                    let taps = [
                        w[w_base + (2 - kh) * 3 + 2],
                        w[w_base + (2 - kh) * 3 + 1],
                        w[w_base + (2 - kh) * 3],
                    ];
                    for r in 0..d.oh {
                        let src_row = &xp[(r + kh * dil) * cw..][..cw];
                        row_taps3(&mut out_plane[r * d.ow..][..d.ow], src_row, taps, dil);
                    }
                }
            }
        }
    }
}

fn conv_transpose2d_bwd_input_doubling<S: Scalar>(g: &[S], w: &[S], d: &ConvTDims, dx: &mut [S]) {
    // the gradient halves back: stride-2 gather over the padded gradient
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let dil = d.dilation;
    let wp = d.ow + 2 * dil;
    let plane = (d.oh + 2 * dil) * wp;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    let rows = d.oh + 2 * dil;
    let use_deint = dil <= 2;
    for n in 0..d.n {
        let gpad = pad_all_planes(&g[n * d.c_out * hw_out..][..d.c_out * hw_out], d.c_out, d.oh, d.ow, dil);
        let split = use_deint.then(|| deinterleave_planes(&gpad, d.c_out, rows, wp));
        for ci in 0..d.c_in {
            let grp = ci / cin_g;
            let dx_plane = &mut dx[(n * d.c_in + ci) * hw_in..][..hw_in];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let w_base = (ci * cout_g + co_l) * 9;
                for kh in 0..3 {
                    let taps = [w[w_base + kh * 3], w[w_base + kh * 3 + 1], w[w_base + kh * 3 + 2]];
                    for ih in 0..d.h {
                        let r = 2 * ih + kh * dil;
                        let dx_row = &mut dx_plane[ih * d.w..][..d.w];
                        if let Some(sp) = &split {
                            let e_row = &sp.even[(co * rows + r) * sp.we..][..sp.we];
                            let o_row = &sp.odd[(co * rows + r) * sp.wo..][..sp.wo];
                            row_taps3_deint(dx_row, e_row, o_row, taps, dil);
                        } else {
                            let src_row = &gpad[co * plane + r * wp..][..wp];
                            row_taps3_gather2(dx_row, src_row, taps, dil);
                        }
                    }
                }
            }
        }
    }
}

fn conv_transpose2d_bwd_weight_doubling<S: Scalar>(g: &[S], x: &[S], d: &ConvTDims, dw: &mut [S]) {
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let dil = d.dilation;
    let wp = d.ow + 2 * dil;
    let plane = (d.oh + 2 * dil) * wp;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    let rows = d.oh + 2 * dil;
    let use_deint = dil <= 2;
    for n in 0..d.n {
        let gpad = pad_all_planes(&g[n * d.c_out * hw_out..][..d.c_out * hw_out], d.c_out, d.oh, d.ow, dil);
        let split = use_deint.then(|| deinterleave_planes(&gpad, d.c_out, rows, wp));
        for ci in 0..d.c_in {
            let grp = ci / cin_g;
            let x_plane = &x[(n * d.c_in + ci) * hw_in..][..hw_in];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let w_base = (ci * cout_g + co_l) * 9;
                for kh in 0..3 {
                    let mut lanes = [[S::ZERO; DOT_LANES]; 3];
                    for ih in 0..d.h {
                        let x_row = &x_plane[ih * d.w..][..d.w];
                        let r = 2 * ih + kh * dil;
                        if let Some(sp) = &split {
                            let e_row = &sp.even[(co * rows + r) * sp.we..][..sp.we];
                            let o_row = &sp.odd[(co * rows + r) * sp.wo..][..sp.wo];
                            row_dots3_deint_into(&mut lanes, x_row, e_row, o_row, dil);
                        } else {
                            let src_row = &gpad[co * plane + r * wp..][..wp];
                            row_dots3_gather2_into(&mut lanes, x_row, src_row, dil);
                        }
                    }
                    for k in 0..3 {
                        dw[w_base + kh * 3 + k] += reduce_lanes(&lanes[k]);
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2d_fwd<S: Scalar>(x: &[S], w: &[S], d: &ConvTDims, out: &mut [S]) {
    if doubling_3x3(d) {
        return conv_transpose2d_fwd_doubling(x, w, d, out);
    }
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    out.fill(S::ZERO);
    for n in 0..d.n {
        for ci in 0..d.c_in {
            let grp = ci / cin_g;
            let x_plane = &x[(n * d.c_in + ci) * hw_in..][..hw_in];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let out_plane = &mut out[(n * d.c_out + co) * hw_out..][..hw_out];
                let w_base = ((ci * cout_g + co_l) * d.kh) * d.kw;
                for kh in 0..d.kh {
                    let off_h = (kh * d.dilation) as isize - d.padding as isize;
                    let (ih_lo, ih_hi) = tap_range(off_h, d.stride, d.h, d.oh);
                    for kw in 0..d.kw {
                        let wv = w[w_base + kh * d.kw + kw];
                        let off_w = (kw * d.dilation) as isize - d.padding as isize;
                        let (iw_lo, iw_hi) = tap_range(off_w, d.stride, d.w, d.ow);
                        if iw_lo >= iw_hi {
                            continue;
                        }
                        for ih in ih_lo..ih_hi {
                            let ohh = ((ih * d.stride) as isize + off_h) as usize;
                            let x_row = &x_plane[ih * d.w..][..d.w];
                            let out_row = &mut out_plane[ohh * d.ow..][..d.ow];
                            for iw in iw_lo..iw_hi {
                                let oww = ((iw * d.stride) as isize + off_w) as usize;
                                out_row[oww] += wv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2d_bwd_input<S: Scalar>(g: &[S], w: &[S], d: &ConvTDims, dx: &mut [S]) {
    if doubling_3x3(d) {
        return conv_transpose2d_bwd_input_doubling(g, w, d, dx);
    }
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    for n in 0..d.n {
        for ci in 0..d.c_in {
            let grp = ci / cin_g;
            let dx_plane = &mut dx[(n * d.c_in + ci) * hw_in..][..hw_in];
            for co_l in 0..cout_g {
                let co = grp * cout_g + co_l;
                let g_plane = &g[(n * d.c_out + co) * hw_out..][..hw_out];
                let w_base = ((ci * cout_g + co_l) * d.kh) * d.kw;
                for kh in 0..d.kh {
                    let off_h = (kh * d.dilation) as isize - d.padding as isize;
                    let (ih_lo, ih_hi) = tap_range(off_h, d.stride, d.h, d.oh);
                    for kw in 0..d.kw {
                        let wv = w[w_base + kh * d.kw + kw];
                        let off_w = (kw * d.dilation) as isize - d.padding as isize;
                        let (iw_lo, iw_hi) = tap_range(off_w, d.stride, d.w, d.ow);
                        if iw_lo >= iw_hi {
                            continue;
                        }
                        for ih in ih_lo..ih_hi {
                            let ohh = ((ih * d.stride) as isize + off_h) as usize;
                            let g_row = &g_plane[ohh * d.ow..][..d.ow];
                            let dx_row = &mut dx_plane[ih * d.w..][..d.w];
                            for iw in iw_lo..iw_hi {
                                let oww = ((iw * d.stride) as isize + off_w) as usize;
                                dx_row[iw] += wv * g_row[oww];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2d_bwd_weight<S: Scalar>(g: &[S], x: &[S], d: &ConvTDims, dw: &mut [S]) {
    if doubling_3x3(d) {
        return conv_transpose2d_bwd_weight_doubling(g, x, d, dw);
    }
    let cin_g = d.c_in / d.groups;
    let cout_g = d.c_out / d.groups;
    let (hw_in, hw_out) = (d.h * d.w, d.oh * d.ow);
    for ci in 0..d.c_in {
        let grp = ci / cin_g;
        for co_l in 0..cout_g {
            let co = grp * cout_g + co_l;
            let w_base = ((ci * cout_g + co_l) * d.kh) * d.kw;
            for kh in 0..d.kh {
                let off_h = (kh * d.dilation) as isize - d.padding as isize;
                let (ih_lo, ih_hi) = tap_range(off_h, d.stride, d.h, d.oh);
                for kw in 0..d.kw {
                    let off_w = (kw * d.dilation) as isize - d.padding as isize;
                    let (iw_lo, iw_hi) = tap_range(off_w, d.stride, d.w, d.ow);
                    if iw_lo >= iw_hi {
                        continue;
                    }
                    let mut acc = S::ZERO;
                    for n in 0..d.n {
                        let g_plane = &g[(n * d.c_out + co) * hw_out..][..hw_out];
                        let x_plane = &x[(n * d.c_in + ci) * hw_in..][..hw_in];
                        for ih in ih_lo..ih_hi {
                            let ohh = ((ih * d.stride) as isize + off_h) as usize;
                            let g_row = &g_plane[ohh * d.ow..][..d.ow];
                            let x_row = &x_plane[ih * d.w..][..d.w];
                            for iw in iw_lo..iw_hi {
                                let oww = ((iw * d.stride) as isize + off_w) as usize;
                                acc += g_row[oww] * x_row[iw];
                            }
                        }
                    }
                    dw[w_base + kh * d.kw + kw] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dims_match_reference_formula() {
        // 3x3 stride 1 pad 1 preserves size
        assert_eq!(conv_out_dim(16, 3, 1, 1, 1), Some(16));
        // 3x3 stride 2 pad 1 halves even sizes
        assert_eq!(conv_out_dim(16, 3, 2, 1, 1), Some(8));
        // dilation 2 pad 2 preserves size
        assert_eq!(conv_out_dim(16, 3, 1, 2, 2), Some(16));
        // dilated stride-2 halving
        assert_eq!(conv_out_dim(16, 3, 2, 2, 2), Some(8));
        // transposed 3x3 stride 2 pad 1 outpad 1 doubles
        assert_eq!(conv_transpose_out_dim(8, 3, 2, 1, 1, 1), Some(16));
        // transposed dilated variant also doubles
        assert_eq!(conv_transpose_out_dim(8, 3, 2, 2, 1, 2), Some(16));
    }

    #[test]
    fn tap_range_covers_interior_and_edges() {
        // stride 1, offset -1 (first tap of a pad-1 conv): output 0 invalid
        assert_eq!(tap_range(-1, 1, 8, 8), (1, 8));
        // offset +1 (last tap): output 7 would read x[8], invalid
        assert_eq!(tap_range(1, 1, 8, 8), (0, 7));
        // centered tap covers everything
        assert_eq!(tap_range(0, 1, 8, 8), (0, 8));
        // stride 2 halving: ih = 2*oh - 1
        assert_eq!(tap_range(-1, 2, 4, 8), (1, 4));
    }

    /// Reference convolution: direct six-loop definition, no range tricks.
    fn conv_ref(x: &[f64], w: &[f64], b: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
        let cin_g = d.c_in / d.groups;
        let cout_g = d.c_out / d.groups;
        let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
        for n in 0..d.n {
            for co in 0..d.c_out {
                for oh in 0..d.oh {
                    for ow in 0..d.ow {
                        let mut acc = b.map_or(0.0, |bv| bv[co]);
                        for ci_l in 0..cin_g {
                            let ci = (co / cout_g) * cin_g + ci_l;
                            for kh in 0..d.kh {
                                for kw in 0..d.kw {
                                    let ih = (oh * d.stride + kh * d.dilation) as isize - d.padding as isize;
                                    let iw = (ow * d.stride + kw * d.dilation) as isize - d.padding as isize;
                                    if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * d.c_in + ci) * d.h + ih as usize) * d.w + iw as usize;
                                    let wi = ((co * cin_g + ci_l) * d.kh + kh) * d.kw + kw;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * d.c_out + co) * d.oh + oh) * d.ow + ow] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_reference_over_configs() {
        let mut rng = crate::rng::Rng64::new(99);
        for &(stride, padding, dilation, groups, c_in, c_out) in &[
            (1usize, 1usize, 1usize, 1usize, 3usize, 5usize),
            (2, 1, 1, 1, 4, 8),
            (1, 2, 2, 1, 2, 2),
            (2, 2, 2, 1, 4, 8),
            (1, 1, 1, 4, 4, 4), // depthwise
            (2, 1, 1, 2, 4, 6),
        ] {
            let (n, h, w) = (2, 7, 9);
            let oh = conv_out_dim(h, 3, stride, padding, dilation).unwrap();
            let ow = conv_out_dim(w, 3, stride, padding, dilation).unwrap();
            let d = ConvDims { n, c_in, h, w, c_out, kh: 3, kw: 3, oh, ow, stride, padding, dilation, groups };
            let x: Vec<f64> = (0..n * c_in * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let wt: Vec<f64> = (0..c_out * (c_in / groups) * 9).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..c_out).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut out = vec![0.0; n * c_out * oh * ow];
            conv2d_fwd(&x, &wt, Some(&b), &d, &mut out);
            let expect = conv_ref(&x, &wt, Some(&b), &d);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "stride={stride} pad={padding} dil={dilation} groups={groups}");
            }
        }
    }

    #[test]
    fn transpose_forward_matches_scatter_reference() {
        let mut rng = crate::rng::Rng64::new(5);
        for &(stride, padding, outpad, dilation, groups) in &[
            (2usize, 1usize, 1usize, 1usize, 1usize),
            (2, 2, 1, 2, 1),
            (2, 1, 1, 1, 4), // depthwise transposed
            (1, 1, 0, 1, 1),
        ] {
            let (n, c_in, h, w) = (2, 4, 5, 6);
            let c_out = 4;
            let oh = conv_transpose_out_dim(h, 3, stride, padding, outpad, dilation).unwrap();
            let ow = conv_transpose_out_dim(w, 3, stride, padding, outpad, dilation).unwrap();
            let d = ConvTDims { n, c_in, h, w, c_out, kh: 3, kw: 3, oh, ow, stride, padding, dilation, groups };
            let x: Vec<f64> = (0..n * c_in * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let wt: Vec<f64> = (0..c_in * (c_out / groups) * 9).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut out = vec![0.0; n * c_out * oh * ow];
            conv_transpose2d_fwd(&x, &wt, &d, &mut out);

            // scatter reference
            let cin_g = c_in / groups;
            let cout_g = c_out / groups;
            let mut expect = vec![0.0; n * c_out * oh * ow];
            for ni in 0..n {
                for ci in 0..c_in {
                    for co_l in 0..cout_g {
                        let co = (ci / cin_g) * cout_g + co_l;
                        for ih in 0..h {
                            for iw in 0..w {
                                for kh in 0..3 {
                                    for kw in 0..3 {
                                        let ohh = (ih * stride + kh * dilation) as isize - padding as isize;
                                        let oww = (iw * stride + kw * dilation) as isize - padding as isize;
                                        if ohh < 0 || oww < 0 || ohh >= oh as isize || oww >= ow as isize {
                                            continue;
                                        }
                                        let xi = ((ni * c_in + ci) * h + ih) * w + iw;
                                        let wi = ((ci * cout_g + co_l) * 3 + kh) * 3 + kw;
                                        let oi = ((ni * c_out + co) * oh + ohh as usize) * ow + oww as usize;
                                        expect[oi] += x[xi] * wt[wi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
