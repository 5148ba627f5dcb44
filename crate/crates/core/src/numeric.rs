//! Dense row-major matrices, unit-norm embedding batches, angles and random
//! rotations.
//!
//! Everything here works in `f64`. Randomness comes from [`seeded_rng`], a
//! ChaCha8 stream keyed by a 64-bit seed, so results are reproducible across
//! platforms and runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row norms at or below this are treated as degenerate.
pub const MIN_ROW_NORM: f64 = 1e-12;

pub type Rng64 = ChaCha8Rng;

/// Deterministic generator for `seed`.
pub fn seeded_rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive a child seed from a parent seed and a fixed stream offset.
///
/// SplitMix64 finalizer over `seed + offset * golden`, so neighbouring
/// offsets give unrelated streams.
pub fn child_seed(seed: u64, offset: u64) -> u64 {
    let mut z = seed.wrapping_add(offset.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn gaussian(rng: &mut Rng64) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from nested rows. Panics on ragged input; intended for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Entries drawn i.i.d. from N(0, 1).
    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng64) -> Self {
        let data = (0..rows * cols).map(|_| gaussian(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix has no data anyway.
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`; entry (i, j) is the dot product of row i and row j.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "row width {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += s * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stack rows of `self` followed by rows of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::DimensionMismatch(format!(
                "vstack widths {} and {}",
                self.cols, other.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    pub fn determinant(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "determinant of non-square matrix");
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for c in 0..n {
            let pivot = (c..n)
                .max_by(|&x, &y| a[x * n + c].abs().total_cmp(&a[y * n + c].abs()))
                .unwrap_or(c);
            if a[pivot * n + c] == 0.0 {
                return 0.0;
            }
            if pivot != c {
                for k in 0..n {
                    a.swap(c * n + k, pivot * n + k);
                }
                det = -det;
            }
            let p = a[c * n + c];
            det *= p;
            for r in c + 1..n {
                let f = a[r * n + c] / p;
                if f != 0.0 {
                    for k in c..n {
                        a[r * n + k] -= f * a[c * n + k];
                    }
                }
            }
        }
        det
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// A batch of embeddings whose rows all have unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbeddings {
    mat: Matrix,
}

impl UnitEmbeddings {
    /// Wrap a matrix that is already row-normalized. Returns `None` if any
    /// row norm is off by more than 1e-9.
    pub fn from_normalized(mat: Matrix) -> Option<Self> {
        let ok = mat.row_iter().all(|r| (norm(r) - 1.0).abs() <= 1e-9);
        ok.then_some(Self { mat })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn len(&self) -> usize {
        self.mat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mat.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mat.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.mat.row(i)
    }

    /// Apply `x ↦ R x` to every row. `r` must be orthogonal; rows are not
    /// renormalized, so sign flips stay exact.
    pub fn transform(&self, r: &Matrix) -> Result<UnitEmbeddings> {
        let out = self.mat.matmul_t(r)?;
        UnitEmbeddings::from_normalized(out)
            .ok_or_else(|| Error::ShapeMismatch("transform did not preserve unit norms; is it orthogonal?".into()))
    }

    pub fn select_rows(&self, idx: &[usize]) -> UnitEmbeddings {
        UnitEmbeddings {
            mat: self.mat.select_rows(idx),
        }
    }
}

/// Divide every row by its L2 norm.
pub fn l2_normalize_rows(m: &Matrix) -> Result<UnitEmbeddings> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if !(n > MIN_ROW_NORM) {
            return Err(Error::DegenerateRow { row: i, norm: n });
        }
        for x in row.iter_mut() {
            *x /= n;
        }
    }
    Ok(UnitEmbeddings { mat: out })
}

/// Cosine similarities between every vision row and every language row.
pub fn cosine_matrix(v: &UnitEmbeddings, l: &UnitEmbeddings) -> Result<Matrix> {
    if v.dim() != l.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding widths {} and {}",
            v.dim(),
            l.dim()
        )));
    }
    v.mat.matmul_t(&l.mat)
}

/// Angle in degrees for a cosine, clamped into the arccos domain.
pub fn angle_deg(cosine: f64) -> f64 {
    cosine.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Uniformly random `d×d` rotation (orthogonal, determinant +1).
///
/// Columns of a seeded Gaussian matrix are orthonormalized by modified
/// Gram-Schmidt with one reorthogonalization pass; if the result has
/// determinant -1 the first column is negated.
pub fn random_rotation(d: usize, seed: u64) -> Matrix {
    let mut q = orthonormal_columns(d, d, &mut seeded_rng(seed));
    if q.determinant() < 0.0 {
        for i in 0..d {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q
}

/// `rows×cols` matrix (rows ≥ cols) with orthonormal columns drawn from a
/// Gaussian sketch.
pub fn orthonormal_columns(rows: usize, cols: usize, rng: &mut Rng64) -> Matrix {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let n = norm(&v);
        // A nearly dependent draw is discarded and redrawn.
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut m = Matrix::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            m[(i, j)] = x;
        }
    }
    m
}

/// `-I` of size `d`.
pub fn negate_identity(d: usize) -> Matrix {
    Matrix::identity(d).scale(-1.0)
}

/// Index of the maximum entry; ties go to `preferred` when it is among the
/// maxima, otherwise to the lowest index.
pub fn argmax_prefer(values: &[f64], preferred: usize) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    if preferred < values.len() && values[preferred] == values[best] {
        preferred
    } else {
        best
    }
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let fp = f(&probe);
            probe[k] = x[k] - h;
            let fm = f(&probe);
            probe[k] = x[k];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − b| / max(|a| + |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(rows: &[&[f64]]) -> UnitEmbeddings {
        l2_normalize_rows(&Matrix::from_rows(rows)).unwrap()
    }

    fn random_unit(n: usize, d: usize, seed: u64) -> UnitEmbeddings {
        l2_normalize_rows(&Matrix::gaussian(n, d, &mut seeded_rng(seed))).unwrap()
    }

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-6);
        assert!(max_relative_error(&g, &[4.0, 3.0], 1e-12) < 1e-9);
    }

    #[test]
    fn normalize_examples() {
        let u = unit(&[&[3.0, 4.0]]);
        assert!((u.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((u.row(0)[1] - 0.8).abs() < 1e-15);

        let u = unit(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(u.matrix(), &Matrix::identity(2));

        let u = unit(&[&[1.0, 1.0, 1.0, 1.0]]);
        assert!(u.row(0).iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        match l2_normalize_rows(&m) {
            Err(Error::DegenerateRow { row: 1, .. }) => {}
            other => panic!("expected DegenerateRow, got {other:?}"),
        }
        let m = Matrix::from_rows(&[[1e-13, 0.0]]);
        assert!(l2_normalize_rows(&m).is_err());
    }

    #[test]
    fn cosine_examples() {
        let e = unit(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(cosine_matrix(&e, &e).unwrap(), Matrix::identity(2));

        let v = unit(&[&[1.0, 0.0]]);
        let l = unit(&[&[-1.0, 0.0]]);
        assert_eq!(cosine_matrix(&v, &l).unwrap()[(0, 0)], -1.0);

        let l = unit(&[&[0.6, 0.8]]);
        assert!((cosine_matrix(&v, &l).unwrap()[(0, 0)] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_width_mismatch() {
        let v = unit(&[&[1.0, 0.0]]);
        let l = unit(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(cosine_matrix(&v, &l), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn cosine_rectangular() {
        let v = random_unit(3, 4, 1);
        let l = random_unit(5, 4, 2);
        assert_eq!(cosine_matrix(&v, &l).unwrap().shape(), (3, 5));
    }

    #[test]
    fn angle_examples() {
        assert_eq!(angle_deg(1.0), 0.0);
        assert!((angle_deg(0.0) - 90.0).abs() < 1e-12);
        assert!((angle_deg(-1.0) - 180.0).abs() < 1e-12);
        // Rounding just past the domain is clamped.
        assert_eq!(angle_deg(1.0 + 1e-12), 0.0);
        assert!((angle_deg(-1.0 - 1e-12) - 180.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_one_dimensional() {
        for seed in 0..5 {
            assert_eq!(random_rotation(1, seed), Matrix::from_rows(&[[1.0]]));
        }
    }

    #[test]
    fn rotation_three_dimensional_is_orthogonal() {
        let r = random_rotation(3, 7);
        let rtr = r.t_matmul(&r).unwrap();
        assert!(rtr.max_abs_diff(&Matrix::identity(3)) < 1e-9);
        assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_two_dimensional_has_planar_form() {
        let r = random_rotation(2, 0);
        let (c, s) = (r[(0, 0)], r[(1, 0)]);
        assert!((c * c + s * s - 1.0).abs() < 1e-12);
        assert!((r[(0, 1)] + s).abs() < 1e-12);
        assert!((r[(1, 1)] - c).abs() < 1e-12);
    }

    #[test]
    fn rotation_is_deterministic() {
        assert_eq!(random_rotation(6, 11), random_rotation(6, 11));
        assert_ne!(random_rotation(6, 11), random_rotation(6, 12));
    }

    #[test]
    fn negate_identity_examples() {
        assert_eq!(negate_identity(2), Matrix::from_rows(&[[-1.0, 0.0], [0.0, -1.0]]));
        assert_eq!(negate_identity(1), Matrix::from_rows(&[[-1.0]]));
        let e = random_unit(4, 3, 5);
        let flipped = e.transform(&negate_identity(3)).unwrap();
        for i in 0..4 {
            assert!((norm(flipped.row(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negation_of_one_side_negates_similarities() {
        let v = random_unit(5, 4, 21);
        let l = random_unit(5, 4, 22);
        let neg = negate_identity(4);
        let m = cosine_matrix(&v, &l).unwrap();
        let both = cosine_matrix(&v.transform(&neg).unwrap(), &l.transform(&neg).unwrap()).unwrap();
        assert!(both.max_abs_diff(&m) < 1e-12);
        let one = cosine_matrix(&v, &l.transform(&neg).unwrap()).unwrap();
        assert!(one.max_abs_diff(&m.scale(-1.0)) < 1e-12);
    }

    #[test]
    fn argmax_tie_rules() {
        assert_eq!(argmax_prefer(&[0.5, 0.5, 0.1], 1), 1);
        assert_eq!(argmax_prefer(&[0.5, 0.5, 0.5], 2), 2);
        assert_eq!(argmax_prefer(&[0.1, 0.5, 0.5], 0), 1);
        assert_eq!(argmax_prefer(&[0.9, 0.5], 1), 0);
    }

    #[test]
    fn determinant_small_cases() {
        let m = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(m.determinant(), -1.0);
        let m = Matrix::from_rows(&[[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [1.0, 0.0, 4.0]]);
        assert!((m.determinant() - 24.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cosine_transpose_symmetry(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, d in 1usize..8) {
            let v = random_unit(n, d, seed);
            let l = random_unit(m, d, seed + 7919);
            let a = cosine_matrix(&v, &l).unwrap();
            let b = cosine_matrix(&l, &v).unwrap();
            prop_assert!(a.transpose().max_abs_diff(&b) < 1e-12);
            prop_assert!(a.as_slice().iter().all(|x| x.abs() <= 1.0 + 1e-9));
        }

        #[test]
        fn self_cosine_has_unit_diagonal(seed in 0u64..1000, n in 1usize..8, d in 1usize..8) {
            let v = random_unit(n, d, seed);
            let c = cosine_matrix(&v, &v).unwrap();
            for i in 0..n {
                prop_assert!((c[(i, i)] - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn angle_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            if a < b {
                prop_assert!(angle_deg(a) >= angle_deg(b));
            }
        }

        #[test]
        fn rotation_preserves_unit_norm(seed in 0u64..500, d in 1usize..12) {
            let r = random_rotation(d, seed);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            let x = random_unit(1, d, seed ^ 0xabcdef);
            let y = r.matmul(&x.matrix().transpose()).unwrap();
            prop_assert!((norm(y.as_slice()) - 1.0).abs() < 1e-9);
        }
    }
}
