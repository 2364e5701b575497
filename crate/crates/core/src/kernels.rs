//! GEMM benchmark body.
//!
//! One iteration is one row of the output matrix C, so every output element is
//! computed whole by exactly one resource. Both operators and the reference
//! accumulate each element as `0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...` in
//! ascending-k order; results are therefore bit-identical regardless of how
//! rows are split between resources or how columns are tiled.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::body::{BodyError, LoopBody};

/// Column-tile width of the smaller preset platform.
pub const TILE_COLS_ZYNQ: usize = 32;
/// Column-tile width of the larger preset platform.
pub const TILE_COLS_ULTRASCALE: usize = 128;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("matrix dimensions must be >= 1, got {rows}x{cols}")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("inner dimensions disagree: {a_rows}x{a_cols} * {b_rows}x{b_cols}")]
    InnerMismatch {
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("tile width must be in 1..={cols}, got {tile}")]
    BadTile { tile: usize, cols: usize },
    #[error("matrix I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, KernelError> {
        if rows == 0 || cols == 0 {
            return Err(KernelError::EmptyMatrix { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(KernelError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self, KernelError> {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Result<Self, KernelError> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    /// Uniform values in `[-1, 1)` drawn from ChaCha8 seeded with `seed`
    /// (`ChaCha8Rng::seed_from_u64`), filled in row-major order.
    pub fn random(rows: usize, cols: usize, seed: u64) -> Result<Self, KernelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Little-endian `u64` rows, `u64` cols, then `rows * cols` little-endian `f32`.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&(self.rows as u64).to_le_bytes())?;
        out.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> std::io::Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let rows = u64::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let cols = u64::from_le_bytes(word) as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, "matrix size overflows")
        })?;
        let mut bytes = vec![0u8; len * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_vec(rows, cols, data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        let io = |source| KernelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        self.write_to(BufWriter::new(file)).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        let io = |source| KernelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::open(path).map_err(io)?;
        Self::read_from(BufReader::new(file)).map_err(io)
    }
}

/// Naive `i, j, k` triple loop. Ground truth for every equality check.
pub fn gemm_reference(a: &Matrix, b: &Matrix) -> Result<Matrix, KernelError> {
    check_inner(a, b)?;
    let mut c = Matrix::zeros(a.rows, b.cols)?;
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0f32;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            c.set(i, j, acc);
        }
    }
    Ok(c)
}

/// Largest absolute elementwise difference.
pub fn verify(c: &Matrix, c_ref: &Matrix) -> Result<f32, KernelError> {
    if c.rows != c_ref.rows || c.cols != c_ref.cols {
        return Err(KernelError::ShapeMismatch(c.rows, c.cols, c_ref.rows, c_ref.cols));
    }
    Ok(c.data
        .iter()
        .zip(&c_ref.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max))
}

fn check_inner(a: &Matrix, b: &Matrix) -> Result<(), KernelError> {
    if a.cols != b.rows {
        return Err(KernelError::InnerMismatch {
            a_rows: a.rows,
            a_cols: a.cols,
            b_rows: b.rows,
            b_cols: b.cols,
        });
    }
    Ok(())
}

/// `C = A * B` as a loop body over the rows of C.
///
/// C is held as `f32` bit patterns in atomics so that concurrent operators can
/// write disjoint rows through a shared reference.
pub struct GemmProblem {
    a: Matrix,
    b: Matrix,
    c: Vec<AtomicU32>,
    tile_cols: usize,
}

impl GemmProblem {
    pub fn new(a: Matrix, b: Matrix, tile_cols: usize) -> Result<Self, KernelError> {
        check_inner(&a, &b)?;
        if tile_cols == 0 || tile_cols > b.cols {
            return Err(KernelError::BadTile {
                tile: tile_cols,
                cols: b.cols,
            });
        }
        let c = (0..a.rows * b.cols).map(|_| AtomicU32::new(0)).collect();
        Ok(Self { a, b, c, tile_cols })
    }

    /// Seeded random `m x k` and `k x p` inputs; B uses `seed + 1`.
    pub fn random(m: usize, k: usize, p: usize, tile_cols: usize, seed: u64) -> Result<Self, KernelError> {
        let a = Matrix::random(m, k, seed)?;
        let b = Matrix::random(k, p, seed.wrapping_add(1))?;
        Self::new(a, b, tile_cols.min(p))
    }

    /// Iteration count: one per row of C.
    pub fn rows(&self) -> usize {
        self.a.rows
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn tile_cols(&self) -> usize {
        self.tile_cols
    }

    /// Multiply-accumulates per iteration (`k * p`).
    pub fn macs_per_row(&self) -> usize {
        self.a.cols * self.b.cols
    }

    pub fn output(&self) -> Matrix {
        let data = self
            .c
            .iter()
            .map(|v| f32::from_bits(v.load(Ordering::Relaxed)))
            .collect();
        Matrix::from_vec(self.a.rows, self.b.cols, data).expect("shape fixed at construction")
    }

    pub fn clear_output(&self) {
        for v in &self.c {
            v.store(0, Ordering::Relaxed);
        }
    }

    fn store_row(&self, i: usize, col0: usize, vals: &[f32]) {
        let p = self.b.cols;
        for (slot, v) in self.c[i * p + col0..i * p + col0 + vals.len()].iter().zip(vals) {
            slot.store(v.to_bits(), Ordering::Relaxed);
        }
    }

    fn check_range(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        if begin > end || end > self.a.rows {
            return Err(BodyError(format!(
                "row range [{begin}, {end}) outside 0..{}",
                self.a.rows
            )));
        }
        Ok(())
    }

    /// Row-range CPU operator: whole rows of C, k-outer so B is streamed by row.
    pub fn gemm_cpu_chunk(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        self.check_range(begin, end)?;
        let mut acc = vec![0.0f32; self.b.cols];
        for i in begin..end {
            acc.fill(0.0);
            for (k, &aik) in self.a.row(i).iter().enumerate() {
                for (c, &bkj) in acc.iter_mut().zip(self.b.row(k)) {
                    *c += aik * bkj;
                }
            }
            self.store_row(i, 0, &acc);
        }
        Ok(())
    }

    /// Tiled accelerator operator: for each block of `tile_cols` columns of B,
    /// the row block `[begin, end)` of A produces the matching block of C.
    pub fn gemm_accel_chunk(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        self.check_range(begin, end)?;
        let p = self.b.cols;
        let mut block = vec![0.0f32; (end - begin) * self.tile_cols];
        for col0 in (0..p).step_by(self.tile_cols) {
            let width = self.tile_cols.min(p - col0);
            let block = &mut block[..(end - begin) * width];
            block.fill(0.0);
            for (r, i) in (begin..end).enumerate() {
                let out = &mut block[r * width..(r + 1) * width];
                for (k, &aik) in self.a.row(i).iter().enumerate() {
                    let b_tile = &self.b.row(k)[col0..col0 + width];
                    for (c, &bkj) in out.iter_mut().zip(b_tile) {
                        *c += aik * bkj;
                    }
                }
            }
            for (r, i) in (begin..end).enumerate() {
                self.store_row(i, col0, &block[r * width..(r + 1) * width]);
            }
        }
        Ok(())
    }
}

impl LoopBody for GemmProblem {
    fn cpu_operator(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        self.gemm_cpu_chunk(begin, end)
    }

    fn accel_operator(&self, begin: usize, end: usize) -> Result<(), BodyError> {
        self.gemm_accel_chunk(begin, end)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f32]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    /// Independent oracle: dot products over explicit column vectors.
    fn oracle(a: &Matrix, b: &Matrix) -> Vec<f32> {
        let mut out = Vec::new();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let col: Vec<f32> = (0..b.rows()).map(|k| b.data()[k * b.cols() + j]).collect();
                out.push(
                    a.row(i)
                        .iter()
                        .zip(&col)
                        .fold(0.0f32, |s, (x, y)| s + x * y),
                );
            }
        }
        out
    }

    #[test]
    fn identity_times_b() {
        let b = m(2, 2, &[1.5, -2.0, 3.25, 4.0]);
        let prob = GemmProblem::new(Matrix::identity(2).unwrap(), b.clone(), 2).unwrap();
        prob.gemm_cpu_chunk(0, 2).unwrap();
        assert_eq!(prob.output(), b);
        assert_eq!(gemm_reference(&Matrix::identity(2).unwrap(), &b).unwrap(), b);
        assert_eq!(gemm_reference(&b, &Matrix::identity(2).unwrap()).unwrap(), b);
    }

    #[test]
    fn one_by_one() {
        let prob = GemmProblem::new(m(1, 1, &[2.0]), m(1, 1, &[3.0]), 1).unwrap();
        prob.gemm_accel_chunk(0, 1).unwrap();
        assert_eq!(prob.output().data(), &[6.0]);
    }

    #[test]
    fn hand_computed_2x3_by_3x2() {
        let a = m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = m(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = gemm_reference(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn random_3x3_matches_oracle() {
        let prob = GemmProblem::random(3, 3, 3, 3, 7).unwrap();
        prob.gemm_cpu_chunk(0, 3).unwrap();
        assert_eq!(prob.output().data(), oracle(prob.a(), prob.b()).as_slice());
    }

    #[test]
    fn tiling_is_exact() {
        let prob = GemmProblem::random(4, 4, 4, 1, 11).unwrap();
        prob.gemm_accel_chunk(0, 4).unwrap();
        assert_eq!(prob.output().data(), oracle(prob.a(), prob.b()).as_slice());

        let one_tile = GemmProblem::random(5, 6, 7, 7, 3).unwrap();
        one_tile.gemm_cpu_chunk(0, 5).unwrap();
        let cpu = one_tile.output();
        one_tile.clear_output();
        one_tile.gemm_accel_chunk(0, 5).unwrap();
        assert_eq!(one_tile.output(), cpu);
    }

    #[test]
    fn ragged_last_tile() {
        let prob = GemmProblem::random(6, 5, 10, 4, 99).unwrap();
        prob.gemm_accel_chunk(0, 3).unwrap();
        prob.gemm_cpu_chunk(3, 6).unwrap();
        let r = gemm_reference(prob.a(), prob.b()).unwrap();
        assert_eq!(verify(&prob.output(), &r).unwrap(), 0.0);
    }

    #[test]
    fn verify_reports_max_difference() {
        let a = Matrix::random(3, 3, 1).unwrap();
        assert_eq!(verify(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.set(1, 2, a.get(1, 2) + 1e-3);
        let d = verify(&a, &b).unwrap();
        assert!((d - 1e-3).abs() < 1e-6, "{d}");
        assert!(verify(&a, &Matrix::zeros(2, 3).unwrap()).is_err());
    }

    #[test]
    fn construction_errors() {
        assert!(Matrix::zeros(0, 3).is_err());
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        let a = Matrix::zeros(2, 3).unwrap();
        assert!(GemmProblem::new(a.clone(), Matrix::zeros(2, 2).unwrap(), 1).is_err());
        assert!(GemmProblem::new(a.clone(), Matrix::zeros(3, 2).unwrap(), 3).is_err());
        assert!(gemm_reference(&a, &a).is_err());
        let prob = GemmProblem::new(a, Matrix::zeros(3, 2).unwrap(), 2).unwrap();
        assert!(prob.gemm_cpu_chunk(1, 3).is_err());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = Matrix::random(4, 4, 42).unwrap();
        assert_eq!(a, Matrix::random(4, 4, 42).unwrap());
        assert_ne!(a, Matrix::random(4, 4, 43).unwrap());
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn binary_round_trip() {
        let a = Matrix::random(3, 5, 8).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 15 * 4);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        assert_eq!(Matrix::read_from(buf.as_slice()).unwrap(), a);
        assert!(Matrix::read_from(&buf[..20]).is_err());
    }
}
