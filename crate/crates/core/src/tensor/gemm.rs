//! Blocked, packed matrix-multiply kernels for wide-vector CPUs.
//!
//! Two entry points cover everything the network needs:
//!
//! * `gemm_nn_*`: `C (+)= A · B` with all matrices dense row-major.
//! * `gemm_nt_st`: `C (+)= A · Bᵀ` where B is stored row-major `[n × k]`,
//!   so both operands stream contiguously along k (used for weight
//!   gradients, where the reduction axis is long).
//!
//! Determinism contract: the floating-point reduction order for every C
//! element is a pure function of the operand shapes — never of thread count
//! or scheduling. `gemm_nn_par` only splits C by row blocks at a fixed
//! grain, and each block runs the same single-threaded kernel. The AVX-512
//! kernels perform the same fused multiply-adds in the same order as the
//! portable ones, so the two paths agree bit for bit.

use std::cell::RefCell;

const MR: usize = 8; // microkernel rows
const NR: usize = 16; // microkernel cols (two 8-lane vectors)
const KC: usize = 384; // k block: A/B panels sized for L1/L2 residency
const MC: usize = 128; // m block: packed A panel ~384 KiB
const NC: usize = 2048; // n block: packed B panel ~6 MiB

thread_local! {
    // Packing scratch, reused across calls on each worker thread.
    static PACK: RefCell<(Vec<f64>, Vec<f64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

#[cfg(target_arch = "x86_64")]
fn avx512_ok() -> bool {
    use std::sync::OnceLock;
    static OK: OnceLock<bool> = OnceLock::new();
    *OK.get_or_init(|| std::arch::is_x86_feature_detected!("avx512f"))
}

#[cfg(not(target_arch = "x86_64"))]
fn avx512_ok() -> bool {
    false
}

/// Where packed A panels come from: either a plain row-major matrix, a
/// row-major matrix read transposed, or an im2col patch matrix synthesized
/// from image geometry so it never has to be materialized.
trait PanelA {
    fn pack(&self, i0: usize, mb: usize, k0: usize, kb: usize, ap: &mut Vec<f64>);
}

/// Where packed B panels come from; same idea as [`PanelA`].
trait PanelB {
    fn pack(&self, k0: usize, kb: usize, j0: usize, nb: usize, bp: &mut Vec<f64>);
}

/// What happens to each finished MR×NR tile. `first` is true on the first
/// k panel, where the sink must overwrite rather than accumulate.
trait TileSink {
    fn store(
        &mut self,
        acc: &[[f64; NR]; MR],
        row0: usize,
        col0: usize,
        nrows: usize,
        ncols: usize,
        first: bool,
    );
}

/// The blocked GEMM driver shared by every entry point. The panel/tile loop
/// order — and with it the floating-point reduction order of every C
/// element — depends only on (m, k, n), never on the source or sink types,
/// so plain and fused variants of the same product agree bit for bit.
fn gemm_core<A: PanelA, B: PanelB, S: TileSink>(
    m: usize,
    k: usize,
    n: usize,
    a: &A,
    b: &B,
    sink: &mut S,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let wide = avx512_ok();
    PACK.with(|cell| {
        let (ap, bp) = &mut *cell.borrow_mut();
        for jc in (0..n).step_by(NC) {
            let nb = (n - jc).min(NC);
            let ntiles = nb.div_ceil(NR);
            for (kci, k0) in (0..k).step_by(KC).enumerate() {
                let kb = (k - k0).min(KC);
                b.pack(k0, kb, jc, nb, bp);
                let first = kci == 0;
                for i0 in (0..m).step_by(MC) {
                    let mb = (m - i0).min(MC);
                    a.pack(i0, mb, k0, kb, ap);
                    let mtiles = mb.div_ceil(MR);
                    for jt in 0..ntiles {
                        let btile = &bp[jt * kb * NR..][..kb * NR];
                        let ncols = (nb - jt * NR).min(NR);
                        for it in 0..mtiles {
                            let atile = &ap[it * kb * MR..][..kb * MR];
                            let mut acc = [[0.0f64; NR]; MR];
                            run_kernel(wide, kb, atile, btile, &mut acc);
                            let nrows = (mb - it * MR).min(MR);
                            sink.store(&acc, i0 + it * MR, jc + jt * NR, nrows, ncols, first);
                        }
                    }
                }
            }
        }
    });
}

struct PlainA<'a> {
    a: &'a [f64],
    lda: usize,
}

impl PanelA for PlainA<'_> {
    fn pack(&self, i0: usize, mb: usize, k0: usize, kb: usize, ap: &mut Vec<f64>) {
        pack_a(self.a, self.lda, i0, mb, k0, kb, ap);
    }
}

/// Rows of Aᵀ packed straight out of a row-major `[k × m]` store: row groups
/// of a tile sit contiguously in the source, so no transpose is needed.
struct TransA<'a> {
    a: &'a [f64],
    lda: usize,
}

impl PanelA for TransA<'_> {
    fn pack(&self, i0: usize, mb: usize, k0: usize, kb: usize, ap: &mut Vec<f64>) {
        let mtiles = mb.div_ceil(MR);
        ap.resize(mtiles * kb * MR, 0.0);
        for t in 0..mtiles {
            let rows = (mb - t * MR).min(MR);
            let tile = &mut ap[t * kb * MR..][..kb * MR];
            for kk in 0..kb {
                let src = &self.a[(k0 + kk) * self.lda + i0 + t * MR..][..rows];
                let dst = &mut tile[kk * MR..][..MR];
                dst[..rows].copy_from_slice(src);
                dst[rows..].fill(0.0);
            }
        }
    }
}

struct PlainB<'a> {
    b: &'a [f64],
    ldb: usize,
}

impl PanelB for PlainB<'_> {
    fn pack(&self, k0: usize, kb: usize, j0: usize, nb: usize, bp: &mut Vec<f64>) {
        pack_b(self.b, self.ldb, k0, kb, j0, nb, bp);
    }
}

/// A valid-correlation patch matrix described by its geometry: logically
/// `[chans·kh·kw × oh·ow]` with row `(c·kh+dy)·kw+dx`, column `y·ow+x`
/// holding `src[c][y+dy][x+dx]`, synthesized tile by tile.
#[derive(Clone, Copy)]
pub(crate) struct PatchSrc<'a> {
    pub src: &'a [f64],
    pub chans: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl PatchSrc<'_> {
    fn oh(&self) -> usize {
        self.h - self.kh + 1
    }

    fn ow(&self) -> usize {
        self.w - self.kw + 1
    }

    pub(crate) fn rows(&self) -> usize {
        self.chans * self.kh * self.kw
    }

    pub(crate) fn cols(&self) -> usize {
        self.oh() * self.ow()
    }

    /// Copy patch-matrix row `row`, columns `j0..j0+len`, into `dst`.
    /// Consecutive columns are consecutive source pixels except where the
    /// output row wraps, so this runs as a few contiguous copies.
    fn copy_row(&self, row: usize, j0: usize, len: usize, dst: &mut [f64]) {
        let ow = self.ow();
        let c = row / (self.kh * self.kw);
        let rem = row % (self.kh * self.kw);
        let (dy, dx) = (rem / self.kw, rem % self.kw);
        let mut j = j0;
        let mut out = 0;
        while out < len {
            let (y, x) = (j / ow, j % ow);
            let run = (ow - x).min(len - out);
            let off = (c * self.h + y + dy) * self.w + x + dx;
            dst[out..out + run].copy_from_slice(&self.src[off..off + run]);
            j += run;
            out += run;
        }
    }
}

impl PanelA for PatchSrc<'_> {
    fn pack(&self, i0: usize, mb: usize, k0: usize, kb: usize, ap: &mut Vec<f64>) {
        let mtiles = mb.div_ceil(MR);
        ap.resize(mtiles * kb * MR, 0.0);
        let mut tmp = [0.0f64; KC];
        for t in 0..mtiles {
            let rows = (mb - t * MR).min(MR);
            let tile = &mut ap[t * kb * MR..][..kb * MR];
            for r in 0..MR {
                if r < rows {
                    self.copy_row(i0 + t * MR + r, k0, kb, &mut tmp[..kb]);
                    for (kk, &v) in tmp[..kb].iter().enumerate() {
                        tile[kk * MR + r] = v;
                    }
                } else {
                    for kk in 0..kb {
                        tile[kk * MR + r] = 0.0;
                    }
                }
            }
        }
    }
}

impl PanelB for PatchSrc<'_> {
    fn pack(&self, k0: usize, kb: usize, j0: usize, nb: usize, bp: &mut Vec<f64>) {
        let ntiles = nb.div_ceil(NR);
        bp.resize(ntiles * kb * NR, 0.0);
        // One long row copy per k, then plain splits into tiles: the row
        // decomposition and wrap scan run once instead of once per tile.
        let mut row = [0.0f64; NC];
        for kk in 0..kb {
            self.copy_row(k0 + kk, j0, nb, &mut row[..nb]);
            for t in 0..ntiles {
                let cols = (nb - t * NR).min(NR);
                let dst = &mut bp[(t * kb + kk) * NR..][..NR];
                dst[..cols].copy_from_slice(&row[t * NR..t * NR + cols]);
                dst[cols..].fill(0.0);
            }
        }
    }
}

struct PlainSink<'a> {
    c: &'a mut [f64],
    ldc: usize,
    accumulate: bool,
}

impl TileSink for PlainSink<'_> {
    fn store(
        &mut self,
        acc: &[[f64; NR]; MR],
        row0: usize,
        col0: usize,
        nrows: usize,
        ncols: usize,
        first: bool,
    ) {
        store_tile(acc, self.c, self.ldc, row0, col0, nrows, ncols, self.accumulate || !first);
    }
}

/// Adds a per-row bias and clamps at zero while storing: the epilogue of a
/// convolution + ReLU with C rows as output channels. Only valid when the
/// whole reduction fits one k panel, since partial sums must not be clamped.
struct BiasReluSink<'a> {
    c: &'a mut [f64],
    ldc: usize,
    bias: &'a [f64],
}

impl TileSink for BiasReluSink<'_> {
    fn store(
        &mut self,
        acc: &[[f64; NR]; MR],
        row0: usize,
        col0: usize,
        nrows: usize,
        ncols: usize,
        first: bool,
    ) {
        debug_assert!(first, "bias+relu epilogue needs a single k panel");
        for r in 0..nrows {
            let b = self.bias[row0 + r];
            let dst = &mut self.c[(row0 + r) * self.ldc + col0..][..ncols];
            for (d, &v) in dst.iter_mut().zip(&acc[r][..ncols]) {
                *d = (v + b).max(0.0);
            }
        }
    }
}

/// Scatter-adds tiles of a `[oh·ow × chans·kh·kw]` product straight onto the
/// convolution's input-gradient layout, fusing away the intermediate patch
/// matrix of a data-gradient pass. Element (y·ow+x, (c·kh+dy)·kw+dx) lands
/// on `dst[c][y+dy][x+dx]`.
struct Col2imSink<'a> {
    dst: &'a mut [f64],
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ow: usize,
}

impl TileSink for Col2imSink<'_> {
    fn store(
        &mut self,
        acc: &[[f64; NR]; MR],
        row0: usize,
        col0: usize,
        nrows: usize,
        ncols: usize,
        _first: bool,
    ) {
        // dst index (c·h + y+dy)·w + x+dx splits into a per-column and a
        // per-row part; hoisting both keeps the divisions off the hot adds.
        let mut row_base = [0usize; MR];
        for (r, base) in row_base[..nrows].iter_mut().enumerate() {
            let j = row0 + r;
            *base = (j / self.ow) * self.w + j % self.ow;
        }
        let khw = self.kh * self.kw;
        for s in 0..ncols {
            let col = col0 + s;
            let (c, rem) = (col / khw, col % khw);
            let off = (c * self.h + rem / self.kw) * self.w + rem % self.kw;
            for r in 0..nrows {
                self.dst[off + row_base[r]] += acc[r][s];
            }
        }
    }
}

/// `C[m×n] (+)= A[m×k] · B[k×n]`, single-threaded.
///
/// `lda`/`ldb`/`ldc` are row strides. With `accumulate` false, C is
/// overwritten; otherwise the product is added to it.
pub(crate) fn gemm_nn_st(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    debug_assert!(m == 0 || a.len() >= (m - 1) * lda + k);
    debug_assert!(k == 0 || b.len() >= (k - 1) * ldb + n);
    debug_assert!(m == 0 || c.len() >= (m - 1) * ldc + n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for row in c.chunks_mut(ldc).take(m) {
                row[..n].fill(0.0);
            }
        }
        return;
    }
    gemm_core(
        m,
        k,
        n,
        &PlainA { a, lda },
        &PlainB { b, ldb },
        &mut PlainSink { c, ldc, accumulate },
    );
}

/// `C[m×n] (+)= Aᵀ · B` where A is stored row-major `[k × m]`. Tile rows of
/// Aᵀ are contiguous runs of A rows, so the packing stays stream-friendly
/// and nothing is transposed up front.
pub(crate) fn gemm_tn_st(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    debug_assert!(k == 0 || a.len() >= (k - 1) * lda + m);
    debug_assert!(k == 0 || b.len() >= (k - 1) * ldb + n);
    debug_assert!(m == 0 || c.len() >= (m - 1) * ldc + n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for row in c.chunks_mut(ldc).take(m) {
                row[..n].fill(0.0);
            }
        }
        return;
    }
    gemm_core(
        m,
        k,
        n,
        &TransA { a, lda },
        &PlainB { b, ldb },
        &mut PlainSink { c, ldc, accumulate },
    );
}

/// Convolution + bias + ReLU in one pass: `out[o][y·ow+x] =
/// max(0, bias[o] + Σ kernels[o]·patch(y,x))` with the patch matrix packed
/// straight from the image, never materialized.
pub(crate) fn gemm_conv_fwd(kernels: &[f64], bias: &[f64], patches: PatchSrc, out: &mut [f64]) {
    let m = bias.len();
    let k = patches.rows();
    let n = patches.cols();
    debug_assert!(kernels.len() >= m * k);
    debug_assert!(out.len() >= m * n);
    if k <= KC {
        gemm_core(
            m,
            k,
            n,
            &PlainA { a: kernels, lda: k },
            &patches,
            &mut BiasReluSink { c: out, ldc: n, bias },
        );
    } else {
        // reduction spans k panels: partial sums must not be clamped, so the
        // epilogue runs as its own pass
        gemm_core(
            m,
            k,
            n,
            &PlainA { a: kernels, lda: k },
            &patches,
            &mut PlainSink { c: out, ldc: n, accumulate: false },
        );
        for (ch, &b) in out.chunks_mut(n).take(m).zip(bias) {
            for v in ch {
                *v = (*v + b).max(0.0);
            }
        }
    }
}

/// Transposed kernel gradient of a convolution: `C[chans·kh·kw × o] (+)=
/// patches · dyt` where `dyt` is the output gradient stored `[oh·ow × o]`.
/// The patch matrix is packed straight from the forward activation.
pub(crate) fn gemm_conv_dw_t(
    patches: PatchSrc,
    dyt: &[f64],
    o: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    let m = patches.rows();
    let k = patches.cols();
    debug_assert!(dyt.len() >= k * o);
    debug_assert!(c.len() >= m * o);
    gemm_core(
        m,
        k,
        o,
        &patches,
        &PlainB { b: dyt, ldb: o },
        &mut PlainSink { c, ldc: o, accumulate },
    );
}

/// Data gradient of a convolution, scatter-added onto `dx` (`[chans × h × w]`,
/// zeroed by the caller): computes `dyt · kernels` — `[oh·ow × chans·kh·kw]`
/// — and folds each element onto its source pixel as it is produced.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_conv_ddata(
    dyt: &[f64],
    kernels: &[f64],
    o: usize,
    chans: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dx: &mut [f64],
) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let m = oh * ow;
    let n = chans * kh * kw;
    debug_assert!(dyt.len() >= m * o);
    debug_assert!(kernels.len() >= o * n);
    debug_assert!(dx.len() >= chans * h * w);
    gemm_core(
        m,
        o,
        n,
        &PlainA { a: dyt, lda: o },
        &PlainB { b: kernels, ldb: n },
        &mut Col2imSink { dst: dx, h, w, kh, kw, ow },
    );
}

/// Row-parallel wrapper around [`gemm_nn_st`]. Splits C into fixed `MC`-row
/// chunks, so results are bit-identical for any thread count.
pub(crate) fn gemm_nn_par(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    let work = 2.0 * m as f64 * k as f64 * n as f64;
    if m <= MC || work < 3.2e7 || rayon::current_num_threads() == 1 {
        return gemm_nn_st(m, k, n, a, lda, b, ldb, c, ldc, accumulate);
    }
    use rayon::prelude::*;
    c[..(m - 1) * ldc + n]
        .par_chunks_mut(MC * ldc)
        .enumerate()
        .for_each(|(t, cc)| {
            let i0 = t * MC;
            let mb = cc.len().div_ceil(ldc).min(m - i0);
            gemm_nn_st(mb, k, n, &a[i0 * lda..], lda, b, ldb, cc, ldc, accumulate);
        });
}

/// Row-parallel wrapper around [`gemm_tn_st`], split exactly like
/// [`gemm_nn_par`] so results are bit-identical for any thread count.
pub(crate) fn gemm_tn_par(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    let work = 2.0 * m as f64 * k as f64 * n as f64;
    if m <= MC || work < 3.2e7 || rayon::current_num_threads() == 1 {
        return gemm_tn_st(m, k, n, a, lda, b, ldb, c, ldc, accumulate);
    }
    use rayon::prelude::*;
    c[..(m - 1) * ldc + n]
        .par_chunks_mut(MC * ldc)
        .enumerate()
        .for_each(|(t, cc)| {
            let i0 = t * MC;
            let mb = cc.len().div_ceil(ldc).min(m - i0);
            gemm_tn_st(mb, k, n, &a[i0..], lda, b, ldb, cc, ldc, accumulate);
        });
}

/// `C[m×n] (+)= A[m×k] · B[n×k]ᵀ`, single-threaded.
///
/// Dot-product formulation: A rows and B rows both stream contiguously along
/// k, so no packing is needed. k is blocked so C partials stay cheap and the
/// B panel stays cache-resident.
pub(crate) fn gemm_nt_st(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    accumulate: bool,
) {
    const KB: usize = 512;
    const TR: usize = 4;
    debug_assert!(m == 0 || a.len() >= (m - 1) * lda + k);
    debug_assert!(n == 0 || b.len() >= (n - 1) * ldb + k);
    debug_assert!(m == 0 || c.len() >= (m - 1) * ldc + n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for row in c.chunks_mut(ldc).take(m) {
                row[..n].fill(0.0);
            }
        }
        return;
    }
    let wide = avx512_ok();
    for (kbi, k0) in (0..k).step_by(KB).enumerate() {
        let kb = (k - k0).min(KB);
        let acc_c = accumulate || kbi > 0;
        for i0 in (0..m).step_by(TR) {
            let mb = (m - i0).min(TR);
            for j0 in (0..n).step_by(TR) {
                let nb = (n - j0).min(TR);
                if mb == TR && nb == TR {
                    let ar = [
                        &a[i0 * lda + k0..][..kb],
                        &a[(i0 + 1) * lda + k0..][..kb],
                        &a[(i0 + 2) * lda + k0..][..kb],
                        &a[(i0 + 3) * lda + k0..][..kb],
                    ];
                    let br = [
                        &b[j0 * ldb + k0..][..kb],
                        &b[(j0 + 1) * ldb + k0..][..kb],
                        &b[(j0 + 2) * ldb + k0..][..kb],
                        &b[(j0 + 3) * ldb + k0..][..kb],
                    ];
                    let out = run_dot4x4(wide, kb, ar, br);
                    for r in 0..TR {
                        for s in 0..TR {
                            let dst = &mut c[(i0 + r) * ldc + j0 + s];
                            if acc_c {
                                *dst += out[r][s];
                            } else {
                                *dst = out[r][s];
                            }
                        }
                    }
                } else {
                    // edge tiles: plain dots, still fixed-order
                    for r in 0..mb {
                        for s in 0..nb {
                            let av = &a[(i0 + r) * lda + k0..][..kb];
                            let bv = &b[(j0 + s) * ldb + k0..][..kb];
                            let mut t = 0.0;
                            for (x, y) in av.iter().zip(bv) {
                                t = x.mul_add(*y, t);
                            }
                            let dst = &mut c[(i0 + r) * ldc + j0 + s];
                            if acc_c {
                                *dst += t;
                            } else {
                                *dst = t;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Blocked out-of-place transpose: `dst[c][r] = src[r][c]`.
pub(crate) fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    const TB: usize = 32;
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r0 in (0..rows).step_by(TB) {
        let rb = (rows - r0).min(TB);
        for c0 in (0..cols).step_by(TB) {
            let cb = (cols - c0).min(TB);
            for r in r0..r0 + rb {
                let srow = &src[r * cols + c0..][..cb];
                for (j, &v) in srow.iter().enumerate() {
                    dst[(c0 + j) * rows + r] = v;
                }
            }
        }
    }
}

#[inline(always)]
fn run_kernel(wide: bool, kb: usize, atile: &[f64], btile: &[f64], acc: &mut [[f64; NR]; MR]) {
    #[cfg(target_arch = "x86_64")]
    if wide {
        return unsafe { avx512::kernel_8x16(kb, atile, btile, acc) };
    }
    let _ = wide;
    kernel_8x16(kb, atile, btile, acc);
}

#[inline(always)]
fn run_dot4x4(wide: bool, kb: usize, ar: [&[f64]; 4], br: [&[f64]; 4]) -> [[f64; 4]; 4] {
    #[cfg(target_arch = "x86_64")]
    if wide {
        return unsafe { avx512::dot4x4(kb, ar, br) };
    }
    let _ = wide;
    dot4x4(kb, ar, br)
}

/// Inner tile product over one packed k block. `ap` is `[kb × MR]` k-major,
/// `bp` is `[kb × NR]` k-major; k ascends, so the reduction order per element
/// matches plain loop order.
#[inline(always)]
fn kernel_8x16(kb: usize, ap: &[f64], bp: &[f64], acc: &mut [[f64; NR]; MR]) {
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)).take(kb) {
        let av: &[f64; MR] = av.try_into().unwrap();
        let bv: &[f64; NR] = bv.try_into().unwrap();
        for r in 0..MR {
            let ar = av[r];
            for j in 0..NR {
                acc[r][j] = ar.mul_add(bv[j], acc[r][j]);
            }
        }
    }
}

/// 4×4 block of dot products over a k chunk, 8 lanes wide. Lane partials are
/// combined left to right, then the scalar tail is appended — a fixed order.
#[inline(always)]
fn dot4x4(kb: usize, ar: [&[f64]; 4], br: [&[f64]; 4]) -> [[f64; 4]; 4] {
    const VW: usize = 8;
    let mut acc = [[0.0f64; VW]; 16];
    let kvec = kb - kb % VW;
    let mut k0 = 0;
    while k0 < kvec {
        let mut av = [[0.0f64; VW]; 4];
        let mut bv = [[0.0f64; VW]; 4];
        for r in 0..4 {
            av[r].copy_from_slice(&ar[r][k0..k0 + VW]);
        }
        for s in 0..4 {
            bv[s].copy_from_slice(&br[s][k0..k0 + VW]);
        }
        for r in 0..4 {
            for s in 0..4 {
                let d = &mut acc[r * 4 + s];
                for l in 0..VW {
                    d[l] = av[r][l].mul_add(bv[s][l], d[l]);
                }
            }
        }
        k0 += VW;
    }
    finish_dot4x4(kb, kvec, &acc, ar, br)
}

/// Shared tail for the two dot4x4 paths: lane partials left to right, then
/// the scalar k remainder.
#[inline(always)]
fn finish_dot4x4(
    kb: usize,
    kvec: usize,
    acc: &[[f64; 8]; 16],
    ar: [&[f64]; 4],
    br: [&[f64]; 4],
) -> [[f64; 4]; 4] {
    let mut out = [[0.0f64; 4]; 4];
    for r in 0..4 {
        for s in 0..4 {
            let mut t = 0.0;
            for l in 0..8 {
                t += acc[r * 4 + s][l];
            }
            for kk in kvec..kb {
                t = ar[r][kk].mul_add(br[s][kk], t);
            }
            out[r][s] = t;
        }
    }
    out
}

/// AVX-512 variants of the two inner kernels. Each performs exactly the same
/// fused multiply-adds in the same order as its portable twin, so results
/// are bit-identical across the two paths.
#[cfg(target_arch = "x86_64")]
mod avx512 {
    use super::{finish_dot4x4, MR, NR};
    use std::arch::x86_64::*;

    /// # Safety
    /// Requires the `avx512f` CPU feature.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn kernel_8x16(
        kb: usize,
        ap: &[f64],
        bp: &[f64],
        out: &mut [[f64; NR]; MR],
    ) {
        debug_assert!(ap.len() >= kb * MR);
        debug_assert!(bp.len() >= kb * NR);
        unsafe {
            // acc[2r] holds columns 0..8 of row r, acc[2r+1] columns 8..16:
            // 16 accumulators, two B vectors and one broadcast in registers.
            let mut acc = [_mm512_setzero_pd(); 2 * MR];
            let mut pa = ap.as_ptr();
            let mut pb = bp.as_ptr();
            for _ in 0..kb {
                let b0 = _mm512_loadu_pd(pb);
                let b1 = _mm512_loadu_pd(pb.add(8));
                for r in 0..MR {
                    let a = _mm512_set1_pd(*pa.add(r));
                    acc[2 * r] = _mm512_fmadd_pd(a, b0, acc[2 * r]);
                    acc[2 * r + 1] = _mm512_fmadd_pd(a, b1, acc[2 * r + 1]);
                }
                pa = pa.add(MR);
                pb = pb.add(NR);
            }
            for r in 0..MR {
                _mm512_storeu_pd(out[r].as_mut_ptr(), acc[2 * r]);
                _mm512_storeu_pd(out[r].as_mut_ptr().add(8), acc[2 * r + 1]);
            }
        }
    }

    /// # Safety
    /// Requires the `avx512f` CPU feature.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dot4x4(kb: usize, ar: [&[f64]; 4], br: [&[f64]; 4]) -> [[f64; 4]; 4] {
        let kvec = kb - kb % 8;
        let mut lanes = [[0.0f64; 8]; 16];
        unsafe {
            let mut acc = [_mm512_setzero_pd(); 16];
            let mut k0 = 0;
            while k0 < kvec {
                let av = [
                    _mm512_loadu_pd(ar[0].as_ptr().add(k0)),
                    _mm512_loadu_pd(ar[1].as_ptr().add(k0)),
                    _mm512_loadu_pd(ar[2].as_ptr().add(k0)),
                    _mm512_loadu_pd(ar[3].as_ptr().add(k0)),
                ];
                let bv = [
                    _mm512_loadu_pd(br[0].as_ptr().add(k0)),
                    _mm512_loadu_pd(br[1].as_ptr().add(k0)),
                    _mm512_loadu_pd(br[2].as_ptr().add(k0)),
                    _mm512_loadu_pd(br[3].as_ptr().add(k0)),
                ];
                for r in 0..4 {
                    for s in 0..4 {
                        acc[r * 4 + s] = _mm512_fmadd_pd(av[r], bv[s], acc[r * 4 + s]);
                    }
                }
                k0 += 8;
            }
            for i in 0..16 {
                _mm512_storeu_pd(lanes[i].as_mut_ptr(), acc[i]);
            }
        }
        finish_dot4x4(kb, kvec, &lanes, ar, br)
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn store_tile(
    acc: &[[f64; NR]; MR],
    c: &mut [f64],
    ldc: usize,
    row0: usize,
    col0: usize,
    nrows: usize,
    ncols: usize,
    accumulate: bool,
) {
    for r in 0..nrows {
        let dst = &mut c[(row0 + r) * ldc + col0..][..ncols];
        let src = &acc[r][..ncols];
        if accumulate {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        } else {
            dst.copy_from_slice(src);
        }
    }
}

/// Packed A panel: MR-row tiles, k-major within each tile, zero-padded rows.
fn pack_a(a: &[f64], lda: usize, i0: usize, mb: usize, k0: usize, kb: usize, ap: &mut Vec<f64>) {
    let mtiles = mb.div_ceil(MR);
    ap.resize(mtiles * kb * MR, 0.0);
    for t in 0..mtiles {
        let rows = (mb - t * MR).min(MR);
        let tile = &mut ap[t * kb * MR..][..kb * MR];
        for r in 0..MR {
            if r < rows {
                let src = &a[(i0 + t * MR + r) * lda + k0..][..kb];
                for (kk, &v) in src.iter().enumerate() {
                    tile[kk * MR + r] = v;
                }
            } else {
                for kk in 0..kb {
                    tile[kk * MR + r] = 0.0;
                }
            }
        }
    }
}

/// Packed B panel: NR-column tiles, k-major within each tile, zero-padded
/// columns.
fn pack_b(b: &[f64], ldb: usize, k0: usize, kb: usize, j0: usize, nb: usize, bp: &mut Vec<f64>) {
    let ntiles = nb.div_ceil(NR);
    bp.resize(ntiles * kb * NR, 0.0);
    for t in 0..ntiles {
        let cols = (nb - t * NR).min(NR);
        let tile = &mut bp[t * kb * NR..][..kb * NR];
        for kk in 0..kb {
            let dst = &mut tile[kk * NR..][..NR];
            let src = &b[(k0 + kk) * ldb + j0 + t * NR..][..cols];
            dst[..cols].copy_from_slice(src);
            dst[cols..].fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            let err = (g - w).abs() / w.abs().max(1.0);
            assert!(err <= tol, "element {i}: got {g}, want {w}, rel err {err}");
        }
    }

    #[test]
    fn nn_matches_naive_over_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // deliberately straddle every tile boundary
        let dims = [1, 2, 3, 7, 8, 9, 15, 16, 17, 33];
        for _ in 0..60 {
            let m = dims[rng.gen_range(0..dims.len())];
            let k = dims[rng.gen_range(0..dims.len())];
            let n = dims[rng.gen_range(0..dims.len())];
            let a = rand_vec(m * k, &mut rng);
            let b = rand_vec(k * n, &mut rng);
            let mut c = rand_vec(m * n, &mut rng);
            let keep = c.clone();
            gemm_nn_st(m, k, n, &a, k, &b, n, &mut c, n, false);
            assert_close(&c, &naive_nn(m, k, n, &a, &b), 1e-13);

            // accumulate mode adds on top of the existing C
            let mut c2 = keep.clone();
            gemm_nn_st(m, k, n, &a, k, &b, n, &mut c2, n, true);
            let want: Vec<f64> = naive_nn(m, k, n, &a, &b)
                .iter()
                .zip(&keep)
                .map(|(p, c0)| p + c0)
                .collect();
            assert_close(&c2, &want, 1e-13);
        }
    }

    #[test]
    fn nn_crosses_kc_blocks() {
        // k > KC exercises the C-partial path across k blocks
        let (m, k, n) = (21, KC * 2 + 37, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(k * n, &mut rng);
        let mut c = vec![0.0; m * n];
        gemm_nn_st(m, k, n, &a, k, &b, n, &mut c, n, false);
        assert_close(&c, &naive_nn(m, k, n, &a, &b), 1e-11);
    }

    #[test]
    fn nn_strided_views() {
        // operate on a sub-matrix of a larger allocation
        let (m, k, n) = (5, 6, 4);
        let (lda, ldb, ldc) = (10, 9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let abig = rand_vec(m * lda, &mut rng);
        let bbig = rand_vec(k * ldb, &mut rng);
        let mut cbig = vec![0.0; m * ldc];
        gemm_nn_st(m, k, n, &abig, lda, &bbig, ldb, &mut cbig, ldc, false);
        let a: Vec<f64> = (0..m).flat_map(|i| abig[i * lda..][..k].to_vec()).collect();
        let b: Vec<f64> = (0..k).flat_map(|i| bbig[i * ldb..][..n].to_vec()).collect();
        let want = naive_nn(m, k, n, &a, &b);
        for i in 0..m {
            for j in 0..n {
                assert!((cbig[i * ldc + j] - want[i * n + j]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn nt_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for &(m, k, n) in &[(1, 1, 1), (4, 8, 4), (5, 19, 7), (8, 600, 9), (13, 1030, 6)] {
            let a = rand_vec(m * k, &mut rng);
            let b = rand_vec(n * k, &mut rng); // stored [n × k]
            let mut c = vec![0.0; m * n];
            gemm_nt_st(m, k, n, &a, k, &b, k, &mut c, n, false);
            // naive: C[i][j] = dot(A row i, B row j)
            let mut want = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    want[i * n + j] = (0..k).map(|p| a[i * k + p] * b[j * k + p]).sum();
                }
            }
            assert_close(&c, &want, 1e-11);
        }
    }

    #[test]
    fn par_is_bitwise_equal_to_st_for_any_thread_count() {
        let (m, k, n) = (700, 80, 90);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(k * n, &mut rng);
        let mut c_st = vec![0.0; m * n];
        gemm_nn_st(m, k, n, &a, k, &b, n, &mut c_st, n, false);
        for threads in [1, 2, 5] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let mut c_par = vec![0.0; m * n];
            pool.install(|| gemm_nn_par(m, k, n, &a, k, &b, n, &mut c_par, n, false));
            assert_eq!(c_st, c_par, "thread count {threads} changed results");
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[test]
    fn wide_and_portable_kernels_agree_bitwise() {
        if !super::avx512_ok() {
            return; // nothing to compare on this host
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &kb in &[1usize, 7, 8, 64, 200] {
            let ap = rand_vec(kb * MR, &mut rng);
            let bp = rand_vec(kb * NR, &mut rng);
            let mut plain = [[0.0; NR]; MR];
            kernel_8x16(kb, &ap, &bp, &mut plain);
            let mut wide = [[0.0; NR]; MR];
            unsafe { avx512::kernel_8x16(kb, &ap, &bp, &mut wide) };
            assert_eq!(plain, wide, "kb={kb}");

            let rows_a: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(kb, &mut rng)).collect();
            let rows_b: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(kb, &mut rng)).collect();
            let ar = [&rows_a[0][..], &rows_a[1][..], &rows_a[2][..], &rows_a[3][..]];
            let br = [&rows_b[0][..], &rows_b[1][..], &rows_b[2][..], &rows_b[3][..]];
            assert_eq!(dot4x4(kb, ar, br), unsafe { avx512::dot4x4(kb, ar, br) });
        }
    }

    #[test]
    fn transpose_round_trip() {
        let (r, c) = (37, 53);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let src = rand_vec(r * c, &mut rng);
        let mut t = vec![0.0; r * c];
        transpose_into(&src, r, c, &mut t);
        for i in 0..r {
            for j in 0..c {
                assert_eq!(t[j * r + i], src[i * c + j]);
            }
        }
        let mut back = vec![0.0; r * c];
        transpose_into(&t, c, r, &mut back);
        assert_eq!(back, src);
    }

    /// Materialized reference for [`PatchSrc`].
    fn naive_im2col(src: &[f64], chans: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut col = vec![0.0; chans * kh * kw * oh * ow];
        let mut row = 0;
        for c in 0..chans {
            for dy in 0..kh {
                for dx in 0..kw {
                    for y in 0..oh {
                        for x in 0..ow {
                            col[row * oh * ow + y * ow + x] = src[(c * h + y + dy) * w + x + dx];
                        }
                    }
                    row += 1;
                }
            }
        }
        col
    }

    #[test]
    fn tn_is_bitwise_equal_to_transposed_nn() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(m, k, n) in &[(5usize, 3usize, 4usize), (180, 47, 16), (300, 129, 33), (33856 / 8, 20, 17)] {
            let a = rand_vec(k * m, &mut rng); // stored [k × m]
            let b = rand_vec(k * n, &mut rng);
            let mut at = vec![0.0; m * k];
            transpose_into(&a, k, m, &mut at);
            let mut want = vec![0.0; m * n];
            gemm_nn_st(m, k, n, &at, k, &b, n, &mut want, n, false);
            let mut got = vec![0.0; m * n];
            gemm_tn_st(m, k, n, &a, m, &b, n, &mut got, n, false);
            assert_eq!(got, want, "({m},{k},{n})");
            let mut par = vec![0.0; m * n];
            gemm_tn_par(m, k, n, &a, m, &b, n, &mut par, n, false);
            assert_eq!(par, want, "par ({m},{k},{n})");
        }
    }

    #[test]
    fn patch_packing_is_bitwise_equal_to_materialized_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        // ow below, equal to, and above NR so column tiles wrap rows; the
        // last shape pushes the reduction past one k panel
        for &(chans, h, w) in
            &[(1usize, 9usize, 9usize), (3, 12, 11), (2, 20, 19), (4, 7, 25), (44, 8, 8)]
        {
            let (kh, kw) = (3, 3);
            let src = rand_vec(chans * h * w, &mut rng);
            let patches = PatchSrc { src: &src, chans, h, w, kh, kw };
            let col = naive_im2col(&src, chans, h, w, kh, kw);
            let (rows, cols) = (patches.rows(), patches.cols());

            // forward: kernels · patches with fused bias+relu
            let o = 5;
            let kern = rand_vec(o * rows, &mut rng);
            let bias = rand_vec(o, &mut rng);
            let mut fused = vec![0.0; o * cols];
            gemm_conv_fwd(&kern, &bias, patches, &mut fused);
            let mut plain = vec![0.0; o * cols];
            gemm_nn_st(o, rows, cols, &kern, rows, &col, cols, &mut plain, cols, false);
            for (ch, &b) in plain.chunks_mut(cols).zip(&bias) {
                for v in ch {
                    *v = (*v + b).max(0.0);
                }
            }
            assert_eq!(fused, plain, "fwd ({chans},{h},{w})");

            // weight gradient: patches · dyt, patch matrix as the A side
            let dyt = rand_vec(cols * o, &mut rng);
            let mut dwt = vec![0.0; rows * o];
            gemm_conv_dw_t(patches, &dyt, o, &mut dwt, false);
            // and accumulation stacks a second product on top
            let mut acc2 = dwt.clone();
            gemm_conv_dw_t(patches, &dyt, o, &mut acc2, true);
            for (twice, once) in acc2.iter().zip(&dwt) {
                assert_eq!(*twice, 2.0 * once);
            }
            let mut want = vec![0.0; rows * o];
            gemm_nn_st(rows, cols, o, &col, cols, &dyt, o, &mut want, o, false);
            assert_eq!(dwt, want, "dw ({chans},{h},{w})");
        }
    }

    #[test]
    fn conv_ddata_matches_explicit_product_and_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for &(chans, h, w, o) in &[(2usize, 10usize, 9usize, 4usize), (3, 21, 18, 7)] {
            let (kh, kw) = (3, 3);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let dyt = rand_vec(oh * ow * o, &mut rng);
            let kern = rand_vec(o * chans * kh * kw, &mut rng);
            let mut dx = vec![0.0; chans * h * w];
            gemm_conv_ddata(&dyt, &kern, o, chans, h, w, kh, kw, &mut dx);

            // reference: full product, then fold each element onto its pixel
            let n = chans * kh * kw;
            let mut prod = vec![0.0; oh * ow * n];
            gemm_nn_st(oh * ow, o, n, &dyt, o, &kern, n, &mut prod, n, false);
            let mut want = vec![0.0; chans * h * w];
            for j in 0..oh * ow {
                let (y, x) = (j / ow, j % ow);
                for col in 0..n {
                    let c = col / (kh * kw);
                    let rem = col % (kh * kw);
                    let (dy, dx2) = (rem / kw, rem % kw);
                    want[(c * h + y + dy) * w + x + dx2] += prod[j * n + col];
                }
            }
            for (i, (g, e)) in dx.iter().zip(&want).enumerate() {
                assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0), "element {i}: {g} vs {e}");
            }

            // the scatter order is fixed, so repeat runs agree exactly
            let mut again = vec![0.0; chans * h * w];
            gemm_conv_ddata(&dyt, &kern, o, chans, h, w, kh, kw, &mut again);
            assert_eq!(dx, again);
        }
    }

    // Throughput probe, not a correctness test: run with
    //   cargo test -p lunar-cnn --release gemm_throughput -- --ignored --nocapture
    #[test]
    #[ignore]
    fn gemm_throughput() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for &(m, k, n) in &[(64usize, 288usize, 2116usize), (180, 33856, 128), (1024, 1024, 1024)] {
            let a = rand_vec(m * k, &mut rng);
            let b = rand_vec(k * n, &mut rng);
            let mut c = vec![0.0; m * n];
            let flops = 2.0 * m as f64 * k as f64 * n as f64;
            let reps = (2e10 / flops).ceil().max(1.0) as usize;
            let start = std::time::Instant::now();
            for _ in 0..reps {
                gemm_nn_st(m, k, n, &a, k, &b, n, &mut c, n, false);
            }
            let dt = start.elapsed().as_secs_f64();
            println!(
                "nn {m}x{k}x{n}: {:.2} GF/s ({reps} reps, {dt:.2}s)",
                flops * reps as f64 / dt / 1e9
            );
        }
        let (m, k, n) = (64usize, 2116usize, 288usize);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(n * k, &mut rng);
        let mut c = vec![0.0; m * n];
        let flops = 2.0 * m as f64 * k as f64 * n as f64;
        let reps = (2e10 / flops).ceil() as usize;
        let start = std::time::Instant::now();
        for _ in 0..reps {
            gemm_nt_st(m, k, n, &a, k, &b, k, &mut c, n, false);
        }
        let dt = start.elapsed().as_secs_f64();
        println!(
            "nt {m}x{k}x{n}: {:.2} GF/s ({reps} reps, {dt:.2}s)",
            flops * reps as f64 / dt / 1e9
        );
    }
}
