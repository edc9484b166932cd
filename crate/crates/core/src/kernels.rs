//! Raw compute kernels behind the tape ops.
//!
//! Conventions: tensors are row-major `[N, C, D, H, W]` with W fastest. All
//! convolutions are 3x3x3, stride 1, zero same-padding. Kernels parallelize
//! over disjoint output planes; each plane is filled by exactly one task with
//! a fixed sequential inner order, so results do not depend on thread count.
//!
//! The convolution kernels copy their operands into zero-padded
//! (D+2)(H+2)(W+2) scratch planes and then run over the padded plane as one
//! contiguous stream: interior cells receive exactly the same-padding result
//! (the zero borders supply the padding terms), border cells accumulate
//! values that are never copied out. That keeps the SIMD inner loops free of
//! row bookkeeping at every spatial size. On x86_64 the streams are processed
//! with AVX-512 or AVX2+FMA register blocking when available; reductions use
//! fixed lane folds, so results are reproducible for any thread count.

use crate::par;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    pub fn plane(&self) -> usize {
        self.d * self.h * self.w
    }
    fn padded_plane(&self) -> usize {
        (self.d + 2) * (self.h + 2) * (self.w + 2)
    }
    /// Offset of the first interior cell in a padded plane.
    fn interior(&self) -> usize {
        (self.h + 2) * (self.w + 2) + (self.w + 2) + 1
    }
    /// Offsets of the 27 taps relative to a padded-plane cell.
    fn tap_offsets(&self) -> [usize; 27] {
        let (ph, pw) = (self.h + 2, self.w + 2);
        std::array::from_fn(|t| (t / 9) * ph * pw + ((t / 3) % 3) * pw + (t % 3))
    }
}

/// Reinterprets a scalar slice as f32 when S == f32 (runtime-dispatched SIMD path).
#[inline]
fn as_f32<S: 'static>(s: &[S]) -> Option<&[f32]> {
    if std::any::TypeId::of::<S>() == std::any::TypeId::of::<f32>() {
        Some(unsafe { std::slice::from_raw_parts(s.as_ptr() as *const f32, s.len()) })
    } else {
        None
    }
}

#[inline]
fn as_f32_mut<S: 'static>(s: &mut [S]) -> Option<&mut [f32]> {
    if std::any::TypeId::of::<S>() == std::any::TypeId::of::<f32>() {
        Some(unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr() as *mut f32, s.len()) })
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SimdLevel {
    Avx512,
    Avx2,
    None,
}

#[cfg(target_arch = "x86_64")]
fn simd_level() -> SimdLevel {
    use std::sync::OnceLock;
    static LEVEL: OnceLock<SimdLevel> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        if is_x86_feature_detected!("avx512f") {
            SimdLevel::Avx512
        } else if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            SimdLevel::Avx2
        } else {
            SimdLevel::None
        }
    })
}

#[cfg(not(target_arch = "x86_64"))]
fn simd_level() -> SimdLevel {
    SimdLevel::None
}

#[inline]
fn axpy<S: Scalar>(acc: &mut [S], x: &[S], a: S) {
    for (o, &v) in acc.iter_mut().zip(x.iter()) {
        *o += a * v;
    }
}

const LANES: usize = 16;

/// Deterministic vector dot product: 16 independent lanes, folded in index order.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [S::ZERO; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let pa = &a[i * LANES..(i + 1) * LANES];
        let pb = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            lanes[l] += pa[l] * pb[l];
        }
    }
    let mut s = S::ZERO;
    for l in lanes {
        s += l;
    }
    for i in chunks * LANES..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Deterministic slice sum with the same lane scheme as [`dot`].
pub fn sum_slice<S: Scalar>(a: &[S]) -> S {
    let mut lanes = [S::ZERO; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let p = &a[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            lanes[l] += p[l];
        }
    }
    let mut s = S::ZERO;
    for l in lanes {
        s += l;
    }
    for i in chunks * LANES..a.len() {
        s += a[i];
    }
    s
}

#[inline]
fn fold_lanes<S: Scalar>(lanes: &[S; LANES]) -> S {
    let mut s = S::ZERO;
    for &l in lanes {
        s += l;
    }
    s
}

/// Copies `planes` channel volumes into zero-padded (d+2)(h+2)(w+2) scratch.
fn pad_planes<S: Scalar>(src: &[S], planes: usize, d: usize, h: usize, w: usize) -> Vec<S> {
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut out = vec![S::ZERO; planes * pd * ph * pw];
    par::for_each_chunk_mut(&mut out, pd * ph * pw, |p, dst| {
        let src_plane = &src[p * d * h * w..(p + 1) * d * h * w];
        for z in 0..d {
            for y in 0..h {
                let s = &src_plane[(z * h + y) * w..(z * h + y) * w + w];
                let off = ((z + 1) * ph + (y + 1)) * pw + 1;
                dst[off..off + w].copy_from_slice(s);
            }
        }
    });
    out
}

/// Copies the interior of a padded accumulator back into a dense plane.
fn copy_interior<S: Scalar>(acc: &[S], out: &mut [S], d: usize, h: usize, w: usize) {
    let (ph, pw) = (h + 2, w + 2);
    for z in 0..d {
        for y in 0..h {
            let src = ((z + 1) * ph + (y + 1)) * pw + 1;
            out[(z * h + y) * w..(z * h + y) * w + w].copy_from_slice(&acc[src..src + w]);
        }
    }
}

/// Generic padded-run convolution of one output plane against `cin` padded
/// channel planes: `acc[lo + x] += sum_c sum_t wk[c*27+t] * chans[c][x + off_t]`.
/// Four partial sums per cell break the FP dependency chain; the summation
/// tree is fixed.
fn conv_padded_generic<S: Scalar>(
    acc: &mut [S],
    chans: &[S],
    wk: &[S],
    cin: usize,
    pplane: usize,
    lo: usize,
    run: usize,
    offs: &[usize; 27],
) {
    for c in 0..cin {
        let ch = &chans[c * pplane..(c + 1) * pplane];
        let wc: &[S] = &wk[c * 27..(c + 1) * 27];
        let srcs: [&[S]; 27] = std::array::from_fn(|t| &ch[offs[t]..offs[t] + run]);
        let out = &mut acc[lo..lo + run];
        for x in 0..run {
            let mut s = [S::ZERO; 4];
            for t in 0..27 {
                s[t & 3] += wc[t] * srcs[t][x];
            }
            out[x] += (s[0] + s[1]) + (s[2] + s[3]);
        }
    }
}

/// Generic padded-run weight gradient: `gw[t] += sum_x g[lo + x] * ch[x + off_t]`.
fn grad_weight_padded_generic<S: Scalar>(
    gw: &mut [S],
    g_pad: &[S],
    ch: &[S],
    lo: usize,
    run: usize,
    offs: &[usize; 27],
) {
    for kd in 0..3 {
        let mut lanes = [[S::ZERO; LANES]; 9];
        let g = &g_pad[lo..lo + run];
        let srcs: [&[S]; 9] =
            std::array::from_fn(|t| &ch[offs[kd * 9 + t]..offs[kd * 9 + t] + run]);
        let chunks = run / LANES;
        for i in 0..chunks {
            for t in 0..9 {
                let gs = &g[i * LANES..(i + 1) * LANES];
                let ss = &srcs[t][i * LANES..(i + 1) * LANES];
                for l in 0..LANES {
                    lanes[t][l] += gs[l] * ss[l];
                }
            }
        }
        for x in chunks * LANES..run {
            for t in 0..9 {
                lanes[t][x % LANES] += g[x] * srcs[t][x];
            }
        }
        for t in 0..9 {
            gw[kd * 9 + t] += fold_lanes(&lanes[t]);
        }
    }
}

/// AVX2 and AVX-512 implementations of the padded-run loops. Register
/// blocking keeps accumulators live across the channel and tap loops, which
/// the autovectorizer cannot arrange on its own. Summation order is fixed per
/// build, so results are reproducible for any thread count (though not
/// bit-identical across SIMD levels; tests compare against the oracle
/// numerically).
#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// # Safety
    /// Requires AVX2+FMA. `acc` is a padded plane of `pplane` cells, `chans`
    /// holds `cin` padded planes, `offs` are in-bounds tap offsets for a run
    /// of `run` cells starting at `lo`.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn conv_padded_avx2(
        acc: &mut [f32],
        chans: &[f32],
        wk: &[f32],
        cin: usize,
        pplane: usize,
        lo: usize,
        run: usize,
        offs: &[usize; 27],
    ) {
        let a = acc.as_mut_ptr().add(lo);
        let mut x = 0usize;
        while x + 32 <= run {
            let mut a0 = _mm256_loadu_ps(a.add(x));
            let mut a1 = _mm256_loadu_ps(a.add(x + 8));
            let mut a2 = _mm256_loadu_ps(a.add(x + 16));
            let mut a3 = _mm256_loadu_ps(a.add(x + 24));
            for c in 0..cin {
                let ch = chans.as_ptr().add(c * pplane + x);
                let wp = wk.as_ptr().add(c * 27);
                for t in 0..27 {
                    let wv = _mm256_set1_ps(*wp.add(t));
                    let p = ch.add(offs[t]);
                    a0 = _mm256_fmadd_ps(_mm256_loadu_ps(p), wv, a0);
                    a1 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(8)), wv, a1);
                    a2 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(16)), wv, a2);
                    a3 = _mm256_fmadd_ps(_mm256_loadu_ps(p.add(24)), wv, a3);
                }
            }
            _mm256_storeu_ps(a.add(x), a0);
            _mm256_storeu_ps(a.add(x + 8), a1);
            _mm256_storeu_ps(a.add(x + 16), a2);
            _mm256_storeu_ps(a.add(x + 24), a3);
            x += 32;
        }
        while x + 8 <= run {
            let mut a0 = _mm256_loadu_ps(a.add(x));
            for c in 0..cin {
                let ch = chans.as_ptr().add(c * pplane + x);
                let wp = wk.as_ptr().add(c * 27);
                for t in 0..27 {
                    a0 = _mm256_fmadd_ps(
                        _mm256_loadu_ps(ch.add(offs[t])),
                        _mm256_set1_ps(*wp.add(t)),
                        a0,
                    );
                }
            }
            _mm256_storeu_ps(a.add(x), a0);
            x += 8;
        }
        while x < run {
            let mut v = *a.add(x);
            for c in 0..cin {
                let ch = chans.as_ptr().add(c * pplane + x);
                let wp = wk.as_ptr().add(c * 27);
                for t in 0..27 {
                    v += *wp.add(t) * *ch.add(offs[t]);
                }
            }
            *a.add(x) = v;
            x += 1;
        }
    }

    /// # Safety
    /// Requires AVX-512F. Same contract as [`conv_padded_avx2`].
    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv_padded_avx512(
        acc: &mut [f32],
        chans: &[f32],
        wk: &[f32],
        cin: usize,
        pplane: usize,
        lo: usize,
        run: usize,
        offs: &[usize; 27],
    ) {
        let a = acc.as_mut_ptr().add(lo);
        let mut x = 0usize;
        while x + 64 <= run {
            let mut a0 = _mm512_loadu_ps(a.add(x));
            let mut a1 = _mm512_loadu_ps(a.add(x + 16));
            let mut a2 = _mm512_loadu_ps(a.add(x + 32));
            let mut a3 = _mm512_loadu_ps(a.add(x + 48));
            for c in 0..cin {
                let ch = chans.as_ptr().add(c * pplane + x);
                let wp = wk.as_ptr().add(c * 27);
                for t in 0..27 {
                    let wv = _mm512_set1_ps(*wp.add(t));
                    let p = ch.add(offs[t]);
                    a0 = _mm512_fmadd_ps(_mm512_loadu_ps(p), wv, a0);
                    a1 = _mm512_fmadd_ps(_mm512_loadu_ps(p.add(16)), wv, a1);
                    a2 = _mm512_fmadd_ps(_mm512_loadu_ps(p.add(32)), wv, a2);
                    a3 = _mm512_fmadd_ps(_mm512_loadu_ps(p.add(48)), wv, a3);
                }
            }
            _mm512_storeu_ps(a.add(x), a0);
            _mm512_storeu_ps(a.add(x + 16), a1);
            _mm512_storeu_ps(a.add(x + 32), a2);
            _mm512_storeu_ps(a.add(x + 48), a3);
            x += 64;
        }
        while x + 16 <= run {
            let mut a0 = _mm512_loadu_ps(a.add(x));
            for c in 0..cin {
                let ch = chans.as_ptr().add(c * pplane + x);
                let wp = wk.as_ptr().add(c * 27);
                for t in 0..27 {
                    a0 = _mm512_fmadd_ps(
                        _mm512_loadu_ps(ch.add(offs[t])),
                        _mm512_set1_ps(*wp.add(t)),
                        a0,
                    );
                }
            }
            _mm512_storeu_ps(a.add(x), a0);
            x += 16;
        }
        while x < run {
            let mut v = *a.add(x);
            for c in 0..cin {
                let ch = chans.as_ptr().add(c * pplane + x);
                let wp = wk.as_ptr().add(c * 27);
                for t in 0..27 {
                    v += *wp.add(t) * *ch.add(offs[t]);
                }
            }
            *a.add(x) = v;
            x += 1;
        }
    }

    #[inline]
    unsafe fn hsum256(v: __m256) -> f32 {
        let hi = _mm256_extractf128_ps(v, 1);
        let lo = _mm256_castps256_ps128(v);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    /// # Safety
    /// Requires AVX2+FMA. `g_pad` and `ch` are padded planes; `offs` are the
    /// 27 tap offsets; accumulates into `gw[0..27]`.
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn grad_weight_padded_avx2(
        gw: &mut [f32],
        g_pad: &[f32],
        ch: &[f32],
        lo: usize,
        run: usize,
        offs: &[usize; 27],
    ) {
        let g = g_pad.as_ptr().add(lo);
        for kd in 0..3 {
            let mut acc = [_mm256_setzero_ps(); 9];
            let mut tail = [0f32; 9];
            let base = ch.as_ptr();
            let mut x = 0usize;
            while x + 8 <= run {
                let gv = _mm256_loadu_ps(g.add(x));
                for t in 0..9 {
                    acc[t] = _mm256_fmadd_ps(
                        gv,
                        _mm256_loadu_ps(base.add(offs[kd * 9 + t] + x)),
                        acc[t],
                    );
                }
                x += 8;
            }
            while x < run {
                let gv = *g.add(x);
                for t in 0..9 {
                    tail[t] += gv * *base.add(offs[kd * 9 + t] + x);
                }
                x += 1;
            }
            for t in 0..9 {
                gw[kd * 9 + t] += hsum256(acc[t]) + tail[t];
            }
        }
    }

    /// # Safety
    /// Requires AVX-512F. Same contract as [`grad_weight_padded_avx2`].
    #[target_feature(enable = "avx512f")]
    pub unsafe fn grad_weight_padded_avx512(
        gw: &mut [f32],
        g_pad: &[f32],
        ch: &[f32],
        lo: usize,
        run: usize,
        offs: &[usize; 27],
    ) {
        let g = g_pad.as_ptr().add(lo);
        for kd in 0..3 {
            let mut acc = [_mm512_setzero_ps(); 9];
            let mut tail = [0f32; 9];
            let base = ch.as_ptr();
            let mut x = 0usize;
            while x + 16 <= run {
                let gv = _mm512_loadu_ps(g.add(x));
                for t in 0..9 {
                    acc[t] = _mm512_fmadd_ps(
                        gv,
                        _mm512_loadu_ps(base.add(offs[kd * 9 + t] + x)),
                        acc[t],
                    );
                }
                x += 16;
            }
            while x < run {
                let gv = *g.add(x);
                for t in 0..9 {
                    tail[t] += gv * *base.add(offs[kd * 9 + t] + x);
                }
                x += 1;
            }
            for t in 0..9 {
                gw[kd * 9 + t] += _mm512_reduce_add_ps(acc[t]) + tail[t];
            }
        }
    }
}

/// Dispatches one output plane of the padded-run convolution.
fn conv_padded_dispatch<S: Scalar>(
    acc: &mut [S],
    chans: &[S],
    wk: &[S],
    cin: usize,
    pplane: usize,
    lo: usize,
    run: usize,
    offs: &[usize; 27],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if let (Some(acc_f), Some(ch_f), Some(wk_f)) = (as_f32_mut(acc), as_f32(chans), as_f32(wk)) {
            match simd_level() {
                SimdLevel::Avx512 => {
                    unsafe { simd::conv_padded_avx512(acc_f, ch_f, wk_f, cin, pplane, lo, run, offs) };
                    return;
                }
                SimdLevel::Avx2 => {
                    unsafe { simd::conv_padded_avx2(acc_f, ch_f, wk_f, cin, pplane, lo, run, offs) };
                    return;
                }
                SimdLevel::None => {}
            }
        }
    }
    conv_padded_generic(acc, chans, wk, cin, pplane, lo, run, offs);
}

fn grad_weight_padded_dispatch<S: Scalar>(
    gw: &mut [S],
    g_pad: &[S],
    ch: &[S],
    lo: usize,
    run: usize,
    offs: &[usize; 27],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if let (Some(gw_f), Some(g_f), Some(ch_f)) = (as_f32_mut(gw), as_f32(g_pad), as_f32(ch)) {
            match simd_level() {
                SimdLevel::Avx512 => {
                    unsafe { simd::grad_weight_padded_avx512(gw_f, g_f, ch_f, lo, run, offs) };
                    return;
                }
                SimdLevel::Avx2 => {
                    unsafe { simd::grad_weight_padded_avx2(gw_f, g_f, ch_f, lo, run, offs) };
                    return;
                }
                SimdLevel::None => {}
            }
        }
    }
    grad_weight_padded_generic(gw, g_pad, ch, lo, run, offs);
}

/// Forward 3x3x3 same-padded cross-correlation plus bias.
///
/// `input` is `[N, Cin, D, H, W]`, `weight` is `[Cout, Cin, 3, 3, 3]`,
/// `bias` is `[Cout]`; returns `[N, Cout, D, H, W]`.
pub fn conv3d_forward<S: Scalar>(input: &[S], weight: &[S], bias: &[S], dims: ConvDims) -> Vec<S> {
    let ConvDims {
        batch,
        cin,
        cout,
        d,
        h,
        w,
    } = dims;
    let plane = dims.plane();
    let pplane = dims.padded_plane();
    let lo = dims.interior();
    let run = pplane - 2 * lo;
    let offs = dims.tap_offsets();
    let padded = pad_planes(input, batch * cin, d, h, w);

    let mut out = vec![S::ZERO; batch * cout * plane];
    par::for_each_chunk_mut(&mut out, plane, |p, out_plane| {
        let n = p / cout;
        let f = p % cout;
        let mut acc = vec![bias[f]; pplane];
        conv_padded_dispatch(
            &mut acc,
            &padded[n * cin * pplane..(n + 1) * cin * pplane],
            &weight[f * cin * 27..(f + 1) * cin * 27],
            cin,
            pplane,
            lo,
            run,
            &offs,
        );
        copy_interior(&acc, out_plane, d, h, w);
    });
    out
}

/// Gradient w.r.t. the convolution input: correlation of the upstream
/// gradient with the flipped kernel.
pub fn conv3d_grad_input<S: Scalar>(gout: &[S], weight: &[S], dims: ConvDims) -> Vec<S> {
    let g_pad = pad_planes(gout, dims.batch * dims.cout, dims.d, dims.h, dims.w);
    grad_input_from_padded(&g_pad, weight, dims)
}

fn grad_input_from_padded<S: Scalar>(g_pad: &[S], weight: &[S], dims: ConvDims) -> Vec<S> {
    let ConvDims {
        batch,
        cin,
        cout,
        d,
        h,
        w,
    } = dims;
    let plane = dims.plane();
    let pplane = dims.padded_plane();
    let lo = dims.interior();
    let run = pplane - 2 * lo;
    let offs = dims.tap_offsets();

    let mut gin = vec![S::ZERO; batch * cin * plane];
    par::for_each_chunk_mut(&mut gin, plane, |p, gin_plane| {
        let n = p / cin;
        let c = p % cin;
        // din[i] = sum_k w[k] * gout[i + 2 - k]: correlate with the flipped kernel
        let mut flipped = vec![S::ZERO; cout * 27];
        for f in 0..cout {
            let wk = &weight[(f * cin + c) * 27..(f * cin + c) * 27 + 27];
            for k in 0..27 {
                flipped[f * 27 + k] = wk[26 - k];
            }
        }
        let mut acc = vec![S::ZERO; pplane];
        conv_padded_dispatch(
            &mut acc,
            &g_pad[n * cout * pplane..(n + 1) * cout * pplane],
            &flipped,
            cout,
            pplane,
            lo,
            run,
            &offs,
        );
        copy_interior(&acc, gin_plane, d, h, w);
    });
    gin
}

/// Gradients w.r.t. the convolution weight and bias.
pub fn conv3d_grad_weight<S: Scalar>(
    gout: &[S],
    input: &[S],
    dims: ConvDims,
) -> (Vec<S>, Vec<S>) {
    let g_pad = pad_planes(gout, dims.batch * dims.cout, dims.d, dims.h, dims.w);
    grad_weight_from_padded(gout, &g_pad, input, dims)
}

fn grad_weight_from_padded<S: Scalar>(
    gout: &[S],
    g_pad: &[S],
    input: &[S],
    dims: ConvDims,
) -> (Vec<S>, Vec<S>) {
    let ConvDims {
        batch,
        cin,
        cout,
        d,
        h,
        w,
    } = dims;
    let plane = dims.plane();
    let pplane = dims.padded_plane();
    let lo = dims.interior();
    let run = pplane - 2 * lo;
    let offs = dims.tap_offsets();
    let in_pad = pad_planes(input, batch * cin, d, h, w);

    let mut gw = vec![S::ZERO; cout * cin * 27];
    let gb: Vec<S> = par::map_indexed(cout, |f| {
        let mut s = S::ZERO;
        for n in 0..batch {
            s += sum_slice(&gout[(n * cout + f) * plane..(n * cout + f + 1) * plane]);
        }
        s
    });

    par::for_each_chunk_mut(&mut gw, cin * 27, |f, gw_f| {
        for c in 0..cin {
            for n in 0..batch {
                grad_weight_padded_dispatch(
                    &mut gw_f[c * 27..(c + 1) * 27],
                    &g_pad[(n * cout + f) * pplane..(n * cout + f + 1) * pplane],
                    &in_pad[(n * cin + c) * pplane..(n * cin + c + 1) * pplane],
                    lo,
                    run,
                    &offs,
                );
            }
        }
    });
    (gw, gb)
}

/// Combined backward pass of one convolution: pads the upstream gradient once
/// and reuses it for both the input and the weight gradients.
pub fn conv3d_backward<S: Scalar>(
    gout: &[S],
    input: &[S],
    weight: &[S],
    dims: ConvDims,
    need_input_grad: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let g_pad = pad_planes(gout, dims.batch * dims.cout, dims.d, dims.h, dims.w);
    let gin = need_input_grad.then(|| grad_input_from_padded(&g_pad, weight, dims));
    let (gw, gb) = grad_weight_from_padded(gout, &g_pad, input, dims);
    (gin, gw, gb)
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of its argmax within the input plane (first index
/// in scan order wins ties).
pub fn maxpool3d_forward<S: Scalar>(
    input: &[S],
    planes: usize,
    d: usize,
    h: usize,
    w: usize,
) -> (Vec<S>, Vec<u32>) {
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let oplane = od * oh * ow;
    let mut out = vec![S::ZERO; planes * oplane];
    let mut arg = vec![0u32; planes * oplane];
    par::for_each_chunk_pair_mut(&mut out, oplane, &mut arg, oplane, |p, op, ap| {
        let ch = &input[p * d * h * w..(p + 1) * d * h * w];
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::from_f64(f64::NEG_INFINITY);
                    let mut best_idx = 0u32;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((2 * oz + dz) * h + (2 * oy + dy)) * w + 2 * ox + dx;
                                if ch[idx] > best {
                                    best = ch[idx];
                                    best_idx = idx as u32;
                                }
                            }
                        }
                    }
                    op[(oz * oh + oy) * ow + ox] = best;
                    ap[(oz * oh + oy) * ow + ox] = best_idx;
                }
            }
        }
    });
    (out, arg)
}

/// Routes pooled gradients back to the argmax positions.
pub fn maxpool3d_grad<S: Scalar>(
    gout: &[S],
    argmax: &[u32],
    planes: usize,
    in_plane: usize,
    out_plane: usize,
) -> Vec<S> {
    let mut gin = vec![S::ZERO; planes * in_plane];
    par::for_each_chunk_mut(&mut gin, in_plane, |p, gp| {
        let go = &gout[p * out_plane..(p + 1) * out_plane];
        let am = &argmax[p * out_plane..(p + 1) * out_plane];
        for (g, &a) in go.iter().zip(am.iter()) {
            gp[a as usize] += *g;
        }
    });
    gin
}

/// Nearest-neighbor x2 upsampling: each voxel replicated into a 2x2x2 block.
pub fn upsample3d_forward<S: Scalar>(
    input: &[S],
    planes: usize,
    d: usize,
    h: usize,
    w: usize,
) -> Vec<S> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let oplane = od * oh * ow;
    let mut out = vec![S::ZERO; planes * oplane];
    par::for_each_chunk_mut(&mut out, oplane, |p, op| {
        let ch = &input[p * d * h * w..(p + 1) * d * h * w];
        for z in 0..od {
            for y in 0..oh {
                let src_row = &ch[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2) * w + w];
                let row = &mut op[(z * oh + y) * ow..(z * oh + y) * ow + ow];
                for x in 0..ow {
                    row[x] = src_row[x / 2];
                }
            }
        }
    });
    out
}

/// Backward of nearest upsampling: sums each 2x2x2 block of the upstream gradient.
pub fn upsample3d_grad<S: Scalar>(
    gout: &[S],
    planes: usize,
    d: usize,
    h: usize,
    w: usize,
) -> Vec<S> {
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let oplane = od * oh * ow;
    let mut gin = vec![S::ZERO; planes * d * h * w];
    par::for_each_chunk_mut(&mut gin, d * h * w, |p, gp| {
        let go = &gout[p * oplane..(p + 1) * oplane];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut s = S::ZERO;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += go[((2 * z + dz) * oh + (2 * y + dy)) * ow + 2 * x + dx];
                            }
                        }
                    }
                    gp[(z * h + y) * w + x] = s;
                }
            }
        }
    });
    gin
}

/// Channel-wise global average pooling: `[N, C, D, H, W]` to `[N, C]`.
pub fn gap_forward<S: Scalar>(input: &[S], planes: usize, plane: usize) -> Vec<S> {
    let inv = S::from_f64(1.0 / plane as f64);
    par::map_indexed(planes, |p| sum_slice(&input[p * plane..(p + 1) * plane]) * inv)
}

pub fn gap_grad<S: Scalar>(gout: &[S], planes: usize, plane: usize) -> Vec<S> {
    let inv = S::from_f64(1.0 / plane as f64);
    let mut gin = vec![S::ZERO; planes * plane];
    par::for_each_chunk_mut(&mut gin, plane, |p, gp| {
        gp.fill(gout[p] * inv);
    });
    gin
}

/// `[n, k] x [k, m] -> [n, m]`, row-major.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(row, &b[p * m..(p + 1) * m], a[i * k + p]);
        }
    }
    out
}

/// Gradients of `matmul`: (dA, dB) given upstream `g` of shape `[n, m]`.
pub fn matmul_grads<S: Scalar>(
    g: &[S],
    a: &[S],
    b: &[S],
    n: usize,
    k: usize,
    m: usize,
) -> (Vec<S>, Vec<S>) {
    // dA[i,p] = g[i,:] . b[p,:]
    let mut da = vec![S::ZERO; n * k];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            da[i * k + p] = dot(gr, &b[p * m..(p + 1) * m]);
        }
    }
    // dB[p,:] += a[i,p] * g[i,:]
    let mut db = vec![S::ZERO; k * m];
    for i in 0..n {
        let gr = &g[i * m..(i + 1) * m];
        for p in 0..k {
            axpy(&mut db[p * m..(p + 1) * m], gr, a[i * k + p]);
        }
    }
    (da, db)
}
