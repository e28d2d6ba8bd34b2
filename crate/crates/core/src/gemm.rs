//! The matrix product behind every convolution: `C += A · B` where each
//! output cell is one fused multiply-add chain over `k` in order, seeded
//! with the value already in `C`. A cell therefore comes out the same
//! whatever the matrix sizes, the blocking, or the kernel that ran it.

use std::sync::OnceLock;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Isa {
    Avx512,
    Avx2,
    Generic,
}

pub(crate) fn isa() -> Isa {
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return Isa::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Isa::Avx2;
            }
        }
        Isa::Generic
    })
}

/// A register tile: `mr x nr` cells of C over a packed `k x mr` slice of A.
/// Row `kk` of B starts at `b + boffs[kk]`; the C tile has row stride
/// `ldc`.
type Kernel = unsafe fn(usize, *const f32, *const f32, *const isize, *mut f32, usize);

#[derive(Clone, Copy)]
struct Tile {
    mr: usize,
    nr: usize,
    kernel: Kernel,
}

/// Tiles available on this machine: wide, narrow and column. Narrow
/// serves short products such as streaming steps; column serves the
/// shortest, vectorizing over rows of C instead of columns.
fn tiles() -> [Tile; 3] {
    match isa() {
        #[cfg(target_arch = "x86_64")]
        Isa::Avx512 => [
            Tile { mr: 6, nr: 64, kernel: x86::avx512_6x64 },
            Tile { mr: 24, nr: 16, kernel: x86::avx512_24x16 },
            Tile { mr: 64, nr: 4, kernel: x86::avx512_64x4 },
        ],
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => [Tile { mr: 6, nr: 16, kernel: x86::avx2_6x16 }; 3],
        _ => [Tile { mr: 4, nr: 16, kernel: generic_4x16 }; 3],
    }
}

/// Picks the tile for an `n`-column product.
fn tile_for(n: usize) -> Tile {
    let [wide, narrow, column] = tiles();
    if n >= wide.nr {
        wide
    } else if n <= 8 {
        column
    } else {
        narrow
    }
}

/// `m x k` left operand, packed once per tile height in use.
#[derive(Clone, Debug)]
pub(crate) struct PackedA {
    m: usize,
    k: usize,
    panels: Vec<(usize, Vec<f32>)>,
}

impl PackedA {
    pub fn new(m: usize, k: usize, a: impl Fn(usize, usize) -> f32) -> Self {
        let mut heights: Vec<usize> = tiles().iter().map(|t| t.mr).collect();
        heights.dedup();
        let panels = heights
            .into_iter()
            .map(|mr| {
                let count = m.div_ceil(mr);
                let mut data = vec![0.0f32; count * k * mr];
                for p in 0..count {
                    for kk in 0..k {
                        for r in 0..mr.min(m - p * mr) {
                            data[(p * k + kk) * mr + r] = a(p * mr + r, kk);
                        }
                    }
                }
                (mr, data)
            })
            .collect();
        Self { m, k, panels }
    }

    fn panels(&self, mr: usize) -> &[f32] {
        &self.panels.iter().find(|(h, _)| *h == mr).expect("packed for every tile height").1
    }
}

/// One row of the right operand: column `q` reads `src[start + col]` with
/// `col = offset + q * step`, or zero when `col` is outside `0..row_len`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BRow {
    pub start: usize,
    pub offset: isize,
}

pub(crate) struct StridedB<'a> {
    pub src: &'a [f32],
    pub rows: &'a [BRow],
    pub row_len: usize,
    pub step: usize,
}

/// Output: cell `(row, q)` is `data[row * row_stride + first + q]`.
pub(crate) struct RowsC<'a> {
    pub data: &'a mut [f32],
    pub row_stride: usize,
    pub first: usize,
}

/// Below this many row panels B is read in place instead of packed, as
/// long as the block is in range and contiguous.
const DIRECT_PANELS: usize = 8;

/// Columns per batch of tiles sharing one pass over A.
const BATCH_COLUMNS: usize = 64;

/// `C += A · B` over `n` columns. Panics if an operand addresses memory
/// outside its slice.
pub(crate) fn gemm(a: &PackedA, b: &StridedB<'_>, c: &mut RowsC<'_>, n: usize) {
    assert_eq!(b.rows.len(), a.k, "B rows must match A columns");
    assert!(b.rows.iter().all(|r| r.start + b.row_len <= b.src.len()), "B row out of bounds");
    assert!(a.m == 0 || n == 0 || (a.m - 1) * c.row_stride + c.first + n <= c.data.len(), "C out of bounds");
    if n == 0 || a.m == 0 {
        return;
    }
    let tile = tile_for(n);
    let (mr, nr, k) = (tile.mr, tile.nr, a.k);
    let panels = a.panels(tile.mr);
    let panel_count = a.m.div_ceil(mr);
    let lo = b.rows.iter().map(|r| r.offset).min().unwrap_or(0);
    let hi = b.rows.iter().map(|r| r.offset).max().unwrap_or(0);
    // Column tiles are taken in batches so each A panel is reused from
    // cache across the batch instead of streamed once per tile.
    let batch = (BATCH_COLUMNS / nr).clamp(1, n.div_ceil(nr));
    let mut bpack = vec![0.0f32; batch * k * nr];
    let mut offs = vec![0isize; batch * k];
    let mut blocks: Vec<(usize, usize, bool)> = Vec::with_capacity(batch);
    let mut ctile = vec![0.0f32; mr * nr];
    for b0 in (0..n).step_by(batch * nr) {
        blocks.clear();
        for (j, n0) in (b0..n.min(b0 + batch * nr)).step_by(nr).enumerate() {
            let width = nr.min(n - n0);
            let first = n0 as isize;
            let direct = b.step == 1
                && panel_count <= DIRECT_PANELS
                && lo + first >= 0
                && hi + first + nr as isize <= b.row_len as isize;
            let o = &mut offs[j * k..(j + 1) * k];
            if direct {
                for (d, r) in o.iter_mut().zip(b.rows) {
                    *d = r.start as isize + r.offset + first;
                }
            } else {
                pack_block(b, n0, width, nr, &mut bpack[j * k * nr..(j + 1) * k * nr]);
                for (kk, d) in o.iter_mut().enumerate() {
                    *d = ((j * k + kk) * nr) as isize;
                }
            }
            blocks.push((n0, width, direct));
        }
        for p in 0..panel_count {
            let rows = mr.min(a.m - p * mr);
            let panel = panels[p * k * mr..(p + 1) * k * mr].as_ptr();
            for (j, &(n0, width, direct)) in blocks.iter().enumerate() {
                let bptr = if direct { b.src.as_ptr() } else { bpack.as_ptr() };
                let boffs = offs[j * k..].as_ptr();
                let base = p * mr * c.row_stride + c.first + n0;
                if rows == mr && width == nr {
                    // SAFETY: the panel holds k * mr floats. Every B row
                    // pointer addresses nr floats inside bpack or, for direct
                    // blocks, inside its source row (checked by the range
                    // test). The C tile lies within the bounds asserted on
                    // entry.
                    unsafe { (tile.kernel)(k, panel, bptr, boffs, c.data.as_mut_ptr().add(base), c.row_stride) };
                    continue;
                }
                for r in 0..rows {
                    ctile[r * nr..r * nr + width].copy_from_slice(&c.data[base + r * c.row_stride..][..width]);
                }
                // SAFETY: as above, with the mr x nr scratch tile as C.
                unsafe { (tile.kernel)(k, panel, bptr, boffs, ctile.as_mut_ptr(), nr) };
                for r in 0..rows {
                    c.data[base + r * c.row_stride..][..width].copy_from_slice(&ctile[r * nr..r * nr + width]);
                }
            }
        }
    }
}

/// Copies columns `n0..n0 + width` of every B row into `bpack` (row stride
/// `nr`), zero-filling out-of-range reads and the unused tail.
fn pack_block(b: &StridedB<'_>, n0: usize, width: usize, nr: usize, bpack: &mut [f32]) {
    for (kk, row) in b.rows.iter().enumerate() {
        let dst = &mut bpack[kk * nr..(kk + 1) * nr];
        let src = &b.src[row.start..row.start + b.row_len];
        let col0 = row.offset + (n0 * b.step) as isize;
        if b.step == 1 {
            let from = (-col0).clamp(0, width as isize) as usize;
            let to = (b.row_len as isize - col0).clamp(from as isize, width as isize) as usize;
            dst[..from].fill(0.0);
            if from < to {
                let s = (col0 + from as isize) as usize;
                dst[from..to].copy_from_slice(&src[s..s + (to - from)]);
            }
            dst[to..].fill(0.0);
        } else {
            for (j, v) in dst.iter_mut().enumerate() {
                let col = col0 + (j * b.step) as isize;
                *v = if j < width && col >= 0 && (col as usize) < b.row_len { src[col as usize] } else { 0.0 };
            }
        }
    }
}

unsafe fn generic_4x16(k: usize, a: *const f32, b: *const f32, boffs: *const isize, c: *mut f32, ldc: usize) {
    const MR: usize = 4;
    const NR: usize = 16;
    let a = std::slice::from_raw_parts(a, k * MR);
    let mut acc = [[0.0f32; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(std::slice::from_raw_parts(c.add(r * ldc), NR));
    }
    for kk in 0..k {
        let bv = std::slice::from_raw_parts(b.offset(*boffs.add(kk)), NR);
        for (r, row) in acc.iter_mut().enumerate() {
            let w = a[kk * MR + r];
            for (acc, &x) in row.iter_mut().zip(bv) {
                *acc = w.mul_add(x, *acc);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        std::slice::from_raw_parts_mut(c.add(r * ldc), NR).copy_from_slice(row);
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub unsafe fn avx512_6x64(k: usize, a: *const f32, b: *const f32, boffs: *const isize, c: *mut f32, ldc: usize) {
        const MR: usize = 6;
        let mut acc = [[_mm512_setzero_ps(); 4]; MR];
        for (r, row) in acc.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(c.add(r * ldc + 16 * j));
            }
        }
        for kk in 0..k {
            let x = b.offset(*boffs.add(kk));
            let x0 = _mm512_loadu_ps(x);
            let x1 = _mm512_loadu_ps(x.add(16));
            let x2 = _mm512_loadu_ps(x.add(32));
            let x3 = _mm512_loadu_ps(x.add(48));
            let w = a.add(kk * MR);
            for (r, row) in acc.iter_mut().enumerate() {
                let wv = _mm512_set1_ps(*w.add(r));
                row[0] = _mm512_fmadd_ps(wv, x0, row[0]);
                row[1] = _mm512_fmadd_ps(wv, x1, row[1]);
                row[2] = _mm512_fmadd_ps(wv, x2, row[2]);
                row[3] = _mm512_fmadd_ps(wv, x3, row[3]);
            }
        }
        for (r, row) in acc.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                _mm512_storeu_ps(c.add(r * ldc + 16 * j), *v);
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn avx512_24x16(k: usize, a: *const f32, b: *const f32, boffs: *const isize, c: *mut f32, ldc: usize) {
        const MR: usize = 24;
        let mut acc = [_mm512_setzero_ps(); MR];
        for (r, v) in acc.iter_mut().enumerate() {
            *v = _mm512_loadu_ps(c.add(r * ldc));
        }
        for kk in 0..k {
            let x = _mm512_loadu_ps(b.offset(*boffs.add(kk)));
            let w = a.add(kk * MR);
            for (r, v) in acc.iter_mut().enumerate() {
                *v = _mm512_fmadd_ps(_mm512_set1_ps(*w.add(r)), x, *v);
            }
        }
        for (r, v) in acc.iter().enumerate() {
            _mm512_storeu_ps(c.add(r * ldc), *v);
        }
    }

    /// Column tile: 64 rows of C in four registers per column.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn avx512_64x4(k: usize, a: *const f32, b: *const f32, boffs: *const isize, c: *mut f32, ldc: usize) {
        const MR: usize = 64;
        const NR: usize = 4;
        let mut cols = [[0.0f32; MR]; NR];
        for (q, col) in cols.iter_mut().enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = *c.add(r * ldc + q);
            }
        }
        let mut acc = [[_mm512_setzero_ps(); 4]; NR];
        for (q, col) in acc.iter_mut().enumerate() {
            for (j, v) in col.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(cols[q].as_ptr().add(16 * j));
            }
        }
        for kk in 0..k {
            let w = a.add(kk * MR);
            let w0 = _mm512_loadu_ps(w);
            let w1 = _mm512_loadu_ps(w.add(16));
            let w2 = _mm512_loadu_ps(w.add(32));
            let w3 = _mm512_loadu_ps(w.add(48));
            let x = b.offset(*boffs.add(kk));
            for (q, col) in acc.iter_mut().enumerate() {
                let xv = _mm512_set1_ps(*x.add(q));
                col[0] = _mm512_fmadd_ps(w0, xv, col[0]);
                col[1] = _mm512_fmadd_ps(w1, xv, col[1]);
                col[2] = _mm512_fmadd_ps(w2, xv, col[2]);
                col[3] = _mm512_fmadd_ps(w3, xv, col[3]);
            }
        }
        for (q, col) in acc.iter().enumerate() {
            for (j, v) in col.iter().enumerate() {
                _mm512_storeu_ps(cols[q].as_mut_ptr().add(16 * j), *v);
            }
        }
        for (q, col) in cols.iter().enumerate() {
            for (r, v) in col.iter().enumerate() {
                *c.add(r * ldc + q) = *v;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn avx2_6x16(k: usize, a: *const f32, b: *const f32, boffs: *const isize, c: *mut f32, ldc: usize) {
        const MR: usize = 6;
        let mut acc = [[_mm256_setzero_ps(); 2]; MR];
        for (r, row) in acc.iter_mut().enumerate() {
            row[0] = _mm256_loadu_ps(c.add(r * ldc));
            row[1] = _mm256_loadu_ps(c.add(r * ldc + 8));
        }
        for kk in 0..k {
            let x = b.offset(*boffs.add(kk));
            let x0 = _mm256_loadu_ps(x);
            let x1 = _mm256_loadu_ps(x.add(8));
            let w = a.add(kk * MR);
            for (r, row) in acc.iter_mut().enumerate() {
                let wv = _mm256_set1_ps(*w.add(r));
                row[0] = _mm256_fmadd_ps(wv, x0, row[0]);
                row[1] = _mm256_fmadd_ps(wv, x1, row[1]);
            }
        }
        for (r, row) in acc.iter().enumerate() {
            _mm256_storeu_ps(c.add(r * ldc), row[0]);
            _mm256_storeu_ps(c.add(r * ldc + 8), row[1]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reference(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, c0: &[f32]) -> Vec<f32> {
        let mut c = c0.to_vec();
        for r in 0..m {
            for q in 0..n {
                let mut acc = c[r * n + q];
                for kk in 0..k {
                    acc = a[r * k + kk].mul_add(b[kk * n + q], acc);
                }
                c[r * n + q] = acc;
            }
        }
        c
    }

    fn rows_of(k: usize, n: usize, shift: usize) -> Vec<BRow> {
        (0..k).map(|kk| BRow { start: kk * n, offset: shift as isize }).collect()
    }

    fn run_all(m: usize, k: usize, n: usize, rng: &mut ChaCha8Rng) {
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c0: Vec<f32> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = reference(&a, m, k, &b, n, &c0);
        let packed = PackedA::new(m, k, |r, kk| a[r * k + kk]);
        let rows = rows_of(k, n, 0);
        let mut got = c0.clone();
        let bm = StridedB { src: &b, rows: &rows, row_len: n, step: 1 };
        gemm(&packed, &bm, &mut RowsC { data: &mut got, row_stride: n, first: 0 }, n);
        assert_eq!(got, want, "{m}x{k}x{n}");
        // Column by column gives the same bits.
        let mut cols = c0.clone();
        for q in 0..n {
            let rows = rows_of(k, n, q);
            let bq = StridedB { src: &b, rows: &rows, row_len: n, step: 1 };
            gemm(&packed, &bq, &mut RowsC { data: &mut cols, row_stride: n, first: q }, 1);
        }
        assert_eq!(cols, want, "{m}x{k}x{n} by columns");
        // The portable kernel agrees with whichever one ran above.
        if m >= 4 && n >= 16 && k > 0 {
            let mut tile = [0.0f32; 64];
            for r in 0..4 {
                tile[r * 16..(r + 1) * 16].copy_from_slice(&c0[r * n..r * n + 16]);
            }
            let ap: Vec<f32> = (0..k).flat_map(|kk| (0..4).map(move |r| (r, kk))).map(|(r, kk)| a[r * k + kk]).collect();
            let offs: Vec<isize> = (0..k).map(|kk| (kk * n) as isize).collect();
            unsafe { generic_4x16(k, ap.as_ptr(), b.as_ptr(), offs.as_ptr(), tile.as_mut_ptr(), 16) };
            for r in 0..4 {
                assert_eq!(&tile[r * 16..(r + 1) * 16], &want[r * n..r * n + 16]);
            }
        }
    }

    #[test]
    fn matches_fma_chain_for_any_blocking() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, k, n) in &[
            (1, 1, 1),
            (5, 3, 7),
            (6, 17, 64),
            (25, 9, 65),
            (7, 40, 130),
            (30, 2, 16),
            (13, 0, 5),
            (100, 20, 200),
            (70, 33, 8),
            (130, 5, 3),
        ] {
            run_all(m, k, n, &mut rng);
        }
    }

    #[test]
    fn strided_and_out_of_range_reads() {
        // B columns every 3rd element starting before the row, C offset.
        let (m, k, n, len) = (3, 4, 5, 10);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let src: Vec<f32> = (0..k * len).map(|i| (i % 7) as f32 + 1.0).collect();
        let rows: Vec<BRow> = (0..k).map(|kk| BRow { start: kk * len, offset: kk as isize - 2 }).collect();
        let mut out = vec![0.0f32; m * 11];
        let packed = PackedA::new(m, k, |r, kk| a[r * k + kk]);
        let b = StridedB { src: &src, rows: &rows, row_len: len, step: 3 };
        gemm(&packed, &b, &mut RowsC { data: &mut out, row_stride: 11, first: 1 }, n);
        for r in 0..m {
            assert_eq!(out[r * 11], 0.0);
            for q in 0..n {
                let want: f32 = (0..k)
                    .map(|kk| {
                        let col = kk as isize - 2 + 3 * q as isize;
                        let x = if (0..len as isize).contains(&col) { src[kk * len + col as usize] } else { 0.0 };
                        a[r * k + kk] * x
                    })
                    .sum();
                assert_eq!(out[r * 11 + 1 + q], want);
            }
        }
    }
}
