//! Dense real matrix utilities: symmetric eigendecomposition, matrix
//! functions (sqrt, log, inverse square root), the generalized symmetric
//! eigenproblem, and null-space bases of homogeneous linear constraints.
//!
//! Everything here is desk-scale dense linear algebra on row-major `Vec`
//! storage. The eigensolver is a cyclic Jacobi iteration: quadratically
//! convergent, accurate to machine precision for symmetric matrices, and
//! generic over the scalar type.

use crate::{Error, Real, Result};

/// Relative eigenvalue threshold below which a Gram matrix counts as
/// degenerate (min eigenvalue ≤ tol · max eigenvalue).
pub const DEGENERACY_TOL: f64 = 1e-12;

/// Relative pivot threshold for rank decisions in Gaussian elimination.
pub const RANK_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// General rectangular matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RectMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    data: Vec<T>,
}

impl<T: Real> RectMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RectMatrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        RectMatrix { rows, cols, data }
    }

    /// Builds from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::BadShape { context: "ragged rows".into() });
        }
        Ok(RectMatrix { rows: r, cols: c, data: rows.concat() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadShape {
                context: format!("{} entries for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(RectMatrix { rows, cols, data })
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self[(i, k)];
                if aik == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + aik * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn scale(&self, factor: T) -> Self {
        let mut out = self.clone();
        for x in &mut out.data {
            *x = *x * factor;
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (x, y) in out.data.iter_mut().zip(&other.data) {
            *x = *x + *y;
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = self.clone();
        for (x, y) in out.data.iter_mut().zip(&other.data) {
            *x = *x - *y;
        }
        out
    }

    /// Entrywise dot product (Frobenius inner product).
    pub fn dot(&self, other: &Self) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(&x, &y)| x * y).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn trace(&self) -> T {
        assert_eq!(self.rows, self.cols, "trace of a non-square matrix");
        (0..self.rows).map(|i| self[(i, i)]).sum()
    }

    /// Extracts one column as a plain vector.
    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for RectMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T: Real> std::ops::IndexMut<(usize, usize)> for RectMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Symmetric square matrix; symmetrized on construction so that
/// `entries[i][j] == entries[j][i]` holds exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Real> SymMatrix<T> {
    /// Symmetrizes the input: entry (i,j) becomes (a_ij + a_ji)/2.
    pub fn new(a: &RectMatrix<T>) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::BadShape {
                context: format!("symmetric matrix from {}x{} input", a.rows, a.cols),
            });
        }
        let half = T::of(0.5);
        let dim = a.rows;
        let mut data = vec![T::zero(); dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v = (a[(i, j)] + a[(j, i)]) * half;
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        Ok(SymMatrix { dim, data })
    }

    /// Builds from the lower triangle of `f`: entry (i,j), j ≤ i, is mirrored.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = vec![T::zero(); dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let v = f(i, j);
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        SymMatrix { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix { dim, data: vec![T::zero(); dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn diag(values: &[T]) -> Self {
        let dim = values.len();
        Self::from_fn(dim, |i, j| if i == j { values[i] } else { T::zero() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_rect(&self) -> RectMatrix<T> {
        RectMatrix { rows: self.dim, cols: self.dim, data: self.data.clone() }
    }

    pub fn trace(&self) -> T {
        (0..self.dim).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Matrix-vector product.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.dim);
        let mut y = vec![T::zero(); self.dim];
        for i in 0..self.dim {
            let mut acc = T::zero();
            for j in 0..self.dim {
                acc = acc + self[(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }
}

impl<T: Real> std::ops::Index<(usize, usize)> for SymMatrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.dim + j]
    }
}

/// Full spectrum of a symmetric (or generalized symmetric) eigenproblem.
///
/// Eigenvalues ascend; `eigenvectors` holds them as columns, orthonormal for
/// the plain problem and B-orthonormal for the generalized one. Ties keep
/// the order the underlying decomposition produced them in.
#[derive(Clone, Debug)]
pub struct Spectrum<T> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: RectMatrix<T>,
}

impl<T: Real> Spectrum<T> {
    /// Largest eigenvalue with its eigenvector (the last ascending entry).
    pub fn max_pair(&self) -> (T, Vec<T>) {
        let last = self.eigenvalues.len() - 1;
        (self.eigenvalues[last], self.eigenvectors.column(last))
    }
}

// ---------------------------------------------------------------------------
// Eigendecomposition (cyclic Jacobi)
// ---------------------------------------------------------------------------

/// Full eigendecomposition of a symmetric matrix, eigenvalues ascending.
///
/// Cyclic Jacobi with a relative off-diagonal stopping threshold; each
/// eigenvector's sign is fixed so its largest-magnitude entry is positive,
/// making results deterministic.
pub fn eigh<T: Real>(a: &SymMatrix<T>) -> Result<Spectrum<T>> {
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let n = a.dim();
    if n == 0 {
        return Ok(Spectrum { eigenvalues: vec![], eigenvectors: RectMatrix::zeros(0, 0) });
    }
    let mut w = a.to_rect();
    let mut v = RectMatrix::<T>::identity(n);

    let frob = w.frobenius_norm();
    if frob > T::zero() {
        let stop = frob * T::epsilon() * T::of(0.5);
        // Quadratic convergence: a handful of sweeps suffice at desk scale.
        for _sweep in 0..64 {
            let mut off = T::zero();
            for p in 0..n {
                for q in (p + 1)..n {
                    off = off + w[(p, q)] * w[(p, q)];
                }
            }
            if (off + off).sqrt() <= stop {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    rotate_pq(&mut w, &mut v, p, q);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        w[(i, i)].partial_cmp(&w[(j, j)]).expect("eigenvalues are finite")
    });

    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = RectMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        eigenvalues.push(w[(src, src)]);
        // Sign convention: largest-|entry| component positive.
        let mut best = 0;
        for i in 1..n {
            if v[(i, src)].abs() > v[(best, src)].abs() {
                best = i;
            }
        }
        let flip = if v[(best, src)] < T::zero() { -T::one() } else { T::one() };
        for i in 0..n {
            eigenvectors[(i, col)] = flip * v[(i, src)];
        }
    }
    Ok(Spectrum { eigenvalues, eigenvectors })
}

/// One Jacobi rotation zeroing w[(p,q)], accumulated into v.
fn rotate_pq<T: Real>(w: &mut RectMatrix<T>, v: &mut RectMatrix<T>, p: usize, q: usize) {
    let apq = w[(p, q)];
    if apq == T::zero() {
        return;
    }
    let tau = (w[(q, q)] - w[(p, p)]) / ((apq + apq) * T::one());
    let t = if tau >= T::zero() {
        T::one() / (tau + (T::one() + tau * tau).sqrt())
    } else {
        -T::one() / (-tau + (T::one() + tau * tau).sqrt())
    };
    let c = T::one() / (T::one() + t * t).sqrt();
    let s = t * c;

    let n = w.rows;
    for i in 0..n {
        let wip = w[(i, p)];
        let wiq = w[(i, q)];
        w[(i, p)] = c * wip - s * wiq;
        w[(i, q)] = s * wip + c * wiq;
    }
    for i in 0..n {
        let wpi = w[(p, i)];
        let wqi = w[(q, i)];
        w[(p, i)] = c * wpi - s * wqi;
        w[(q, i)] = s * wpi + c * wqi;
    }
    w[(p, q)] = T::zero();
    w[(q, p)] = T::zero();
    for i in 0..n {
        let vip = v[(i, p)];
        let viq = v[(i, q)];
        v[(i, p)] = c * vip - s * viq;
        v[(i, q)] = s * vip + c * viq;
    }
}

// ---------------------------------------------------------------------------
// Matrix functions
// ---------------------------------------------------------------------------

/// Rebuilds V · diag(f(λ)) · Vᵀ from a spectrum.
fn rebuild<T: Real>(spec: &Spectrum<T>, f: impl Fn(T) -> T) -> SymMatrix<T> {
    let n = spec.eigenvalues.len();
    let v = &spec.eigenvectors;
    let mapped: Vec<T> = spec.eigenvalues.iter().map(|&l| f(l)).collect();
    SymMatrix::from_fn(n, |i, j| {
        let mut acc = T::zero();
        for k in 0..n {
            acc = acc + v[(i, k)] * mapped[k] * v[(j, k)];
        }
        acc
    })
}

fn psd_spectrum<T: Real>(a: &SymMatrix<T>) -> Result<Spectrum<T>> {
    let spec = eigh(a)?;
    let scale = spec
        .eigenvalues
        .iter()
        .fold(T::zero(), |m, &l| m.max(l.abs()));
    let min_eig = spec.eigenvalues.first().copied().unwrap_or_else(T::zero);
    if min_eig < -T::of(1e-8) * scale {
        return Err(Error::NotPsd { min_eig: min_eig.to_f64().unwrap_or(f64::NAN) });
    }
    Ok(spec)
}

/// Principal square root of a PSD matrix.
///
/// Eigenvalues within relative noise (1e-14·λ_max) of zero count as exact
/// zeros first — the square root would otherwise inflate eigensolver noise
/// to √ε on rank-deficient inputs. The survivors are clamped up to `floor`
/// before the square root.
pub fn sqrtm_psd<T: Real>(a: &SymMatrix<T>, floor: T) -> Result<SymMatrix<T>> {
    if floor < T::zero() {
        return Err(Error::BadConfig { context: "sqrtm floor must be nonnegative".into() });
    }
    let spec = psd_spectrum(a)?;
    let top = spec.eigenvalues.last().copied().unwrap_or_else(T::zero).max(T::zero());
    let cut = T::of(1e-14) * top;
    Ok(rebuild(&spec, |l| {
        let base = if l <= cut { T::zero() } else { l };
        base.max(floor).sqrt()
    }))
}

/// Matrix logarithm of a PSD matrix with eigenvalue clamping.
///
/// Eigenvalues below `eigen_floor` are clamped before the log, which is the
/// regularization rank-deficient density matrices need.
pub fn logm_psd<T: Real>(a: &SymMatrix<T>, eigen_floor: T) -> Result<SymMatrix<T>> {
    if eigen_floor <= T::zero() {
        return Err(Error::BadConfig { context: "logm eigen_floor must be positive".into() });
    }
    let spec = psd_spectrum(a)?;
    Ok(rebuild(&spec, |l| l.max(eigen_floor).ln()))
}

/// Inverse square root of a strictly positive definite Gram matrix,
/// taking the + branch of ±1/√λ throughout.
///
/// Errors with [`Error::DegenerateGram`] when the smallest eigenvalue does
/// not exceed `degeneracy_tol` times the largest — the signal that an
/// adjustment problem is under-determined.
pub fn inv_sqrt<T: Real>(g: &SymMatrix<T>, degeneracy_tol: T) -> Result<SymMatrix<T>> {
    let spec = eigh(g)?;
    let max_eig = spec.eigenvalues.last().copied().unwrap_or_else(T::zero);
    let min_eig = spec.eigenvalues.first().copied().unwrap_or_else(T::zero);
    if max_eig <= T::zero() || min_eig <= degeneracy_tol * max_eig {
        return Err(Error::DegenerateGram {
            context: format!(
                "min eigenvalue {:e} vs max {:e}",
                min_eig.to_f64().unwrap_or(f64::NAN),
                max_eig.to_f64().unwrap_or(f64::NAN)
            ),
        });
    }
    Ok(rebuild(&spec, |l| T::one() / l.sqrt()))
}

// ---------------------------------------------------------------------------
// Generalized symmetric eigenproblem
// ---------------------------------------------------------------------------

/// Solves num·V = μ·den·V for symmetric num and SPD den.
///
/// Reduction through W = den^{-1/2}: the spectrum of W·num·W with
/// eigenvectors mapped back by W, which makes them den-orthonormal.
pub fn gen_sym_eig<T: Real>(num: &SymMatrix<T>, den: &SymMatrix<T>) -> Result<Spectrum<T>> {
    if num.dim() != den.dim() {
        return Err(Error::BadShape {
            context: format!("gen_sym_eig dims {} vs {}", num.dim(), den.dim()),
        });
    }
    let w = inv_sqrt(den, T::of(DEGENERACY_TOL))?;
    let wr = w.to_rect();
    let reduced = SymMatrix::new(&wr.matmul(&num.to_rect()).matmul(&wr))?;
    let inner = eigh(&reduced)?;
    let eigenvectors = wr.matmul(&inner.eigenvectors);
    Ok(Spectrum { eigenvalues: inner.eigenvalues, eigenvectors })
}

// ---------------------------------------------------------------------------
// Null-space basis of homogeneous linear constraints
// ---------------------------------------------------------------------------

/// Basis of {x : C·x = 0} via Gaussian elimination with full pivoting.
///
/// Returns an N×N_V matrix whose columns span the null space,
/// N_V = N − rank(C). An empty or zero constraint set returns the identity.
/// Full (row and column) pivoting fixes which variables become free;
/// any other valid basis of the same space is an equally correct answer.
pub fn null_space_basis<T: Real>(constraints: &RectMatrix<T>) -> RectMatrix<T> {
    let n = constraints.cols;
    let r_rows = constraints.rows;
    if r_rows == 0 || n == 0 {
        return RectMatrix::identity(n);
    }

    let mut work = constraints.clone();
    let mut col_of: Vec<usize> = (0..n).collect();
    let scale = work.max_abs();
    if scale == T::zero() {
        return RectMatrix::identity(n);
    }
    let tol = scale * T::of(RANK_TOL);

    let mut rank = 0;
    let max_rank = r_rows.min(n);
    while rank < max_rank {
        // Full pivot search over the remaining submatrix.
        let (mut best_i, mut best_j, mut best) = (rank, rank, T::zero());
        for i in rank..r_rows {
            for j in rank..n {
                let v = work[(i, col_of[j])].abs();
                if v > best {
                    best = v;
                    best_i = i;
                    best_j = j;
                }
            }
        }
        if best <= tol {
            break;
        }
        if best_i != rank {
            for j in 0..n {
                let tmp = work[(rank, j)];
                work[(rank, j)] = work[(best_i, j)];
                work[(best_i, j)] = tmp;
            }
        }
        col_of.swap(rank, best_j);

        let pivot_col = col_of[rank];
        let pivot = work[(rank, pivot_col)];
        for j in 0..n {
            work[(rank, j)] = work[(rank, j)] / pivot;
        }
        // Reduced echelon form: clear the pivot column everywhere else.
        for i in 0..r_rows {
            if i == rank {
                continue;
            }
            let factor = work[(i, pivot_col)];
            if factor == T::zero() {
                continue;
            }
            for j in 0..n {
                let delta = factor * work[(rank, j)];
                work[(i, j)] = work[(i, j)] - delta;
            }
        }
        rank += 1;
    }

    let n_v = n - rank;
    let mut basis = RectMatrix::zeros(n, n_v);
    for (free_idx, perm) in (rank..n).enumerate() {
        let free_col = col_of[perm];
        basis[(free_col, free_idx)] = T::one();
        for p in 0..rank {
            basis[(col_of[p], free_idx)] = -work[(p, free_col)];
        }
    }
    basis
}

/// Rank of a matrix by the same full-pivot elimination as
/// [`null_space_basis`].
pub fn rank<T: Real>(m: &RectMatrix<T>) -> usize {
    m.cols - null_space_basis(m).cols
}

/// Solves the SPD system a·x = rhs through the eigendecomposition.
///
/// Errors with [`Error::SingularSystem`] when the spectrum is degenerate
/// relative to `rel_tol`.
pub(crate) fn solve_spd<T: Real>(a: &SymMatrix<T>, rhs: &[T], rel_tol: T) -> Result<Vec<T>> {
    let spec = eigh(a)?;
    let max_eig = spec.eigenvalues.last().copied().unwrap_or_else(T::zero);
    let min_eig = spec.eigenvalues.first().copied().unwrap_or_else(T::zero);
    if max_eig <= T::zero() || min_eig <= rel_tol * max_eig {
        return Err(Error::SingularSystem);
    }
    let v = &spec.eigenvectors;
    let n = a.dim();
    let mut coeffs = vec![T::zero(); n];
    for k in 0..n {
        let mut acc = T::zero();
        for i in 0..n {
            acc = acc + v[(i, k)] * rhs[i];
        }
        coeffs[k] = acc / spec.eigenvalues[k];
    }
    let mut x = vec![T::zero(); n];
    for i in 0..n {
        let mut acc = T::zero();
        for k in 0..n {
            acc = acc + v[(i, k)] * coeffs[k];
        }
        x[i] = acc;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
