//! Ground-state time evolution of a learned mapping operator.
//!
//! Diagonalizing the Lagrange-multiplier matrix λ turns the stationarity
//! relation S𝒰 = λ𝒰 into independent rows: in the eigenbasis of λ each row
//! of the transformed operator evolves with its own phase exp(−iλ^{[p]}t/ħ).
//! This is the only place in the crate where complex numbers appear; they
//! are kept as explicit (re, im) pairs so everything else stays real.

use crate::matfun::{eigh, RectMatrix};
use crate::qcqp::Solution;
use crate::superop::Superoperator;
use crate::{Error, Real, Result};

/// Largest exponent the dissipative variant will feed to `exp`.
pub const EXP_GUARD: f64 = 700.0;

/// A complex matrix as explicit real and imaginary parts of equal shape.
#[derive(Clone, Debug)]
pub struct ComplexOperator<T> {
    pub re: RectMatrix<T>,
    pub im: RectMatrix<T>,
}

impl<T: Real> ComplexOperator<T> {
    pub fn new(re: RectMatrix<T>, im: RectMatrix<T>) -> Result<Self> {
        if re.rows != im.rows || re.cols != im.cols {
            return Err(Error::BadShape {
                context: format!(
                    "real part is {}×{} but imaginary part is {}×{}",
                    re.rows, re.cols, im.rows, im.cols
                ),
            });
        }
        if !re.is_finite() || !im.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(Self { re, im })
    }

    pub fn rows(&self) -> usize {
        self.re.rows
    }

    pub fn cols(&self) -> usize {
        self.re.cols
    }

    /// Modulus and phase (atan2) of one entry, the CSV export pair.
    pub fn abs_phase(&self, i: usize, j: usize) -> (T, T) {
        let (re, im) = (self.re[(i, j)], self.im[(i, j)]);
        (re.hypot(im), im.atan2(re))
    }

    /// Largest deviation of the complex row Gram u·u† from the identity,
    /// over both real and imaginary parts.
    pub fn row_gram_deviation(&self) -> T {
        let mut worst = T::zero();
        for p in 0..self.rows() {
            for q in 0..self.rows() {
                let mut g_re = T::zero();
                let mut g_im = T::zero();
                for k in 0..self.cols() {
                    g_re = g_re + self.re[(p, k)] * self.re[(q, k)]
                        + self.im[(p, k)] * self.im[(q, k)];
                    g_im = g_im + self.im[(p, k)] * self.re[(q, k)]
                        - self.re[(p, k)] * self.im[(q, k)];
                }
                let target = if p == q { T::one() } else { T::zero() };
                worst = worst.max((g_re - target).abs()).max(g_im.abs());
            }
        }
        worst
    }
}

/// The evolution-ready form of a converged solution: eigenvalues λ^{[p]}
/// of the multiplier matrix and the solution rotated into that eigenbasis.
#[derive(Clone, Debug)]
pub struct GroundStateEvolution<T> {
    lambda_eigs: Vec<T>,
    v0: RectMatrix<T>,
    hbar: T,
}

impl<T: Real> GroundStateEvolution<T> {
    /// Assembles an evolution directly from an eigenvalue list and a
    /// row-orthonormal basis matrix. `prepare` is the usual entry point;
    /// this constructor serves handcrafted spectra.
    pub fn new(lambda_eigs: Vec<T>, v0: RectMatrix<T>, hbar: T) -> Result<Self> {
        if lambda_eigs.len() != v0.rows {
            return Err(Error::BadShape {
                context: format!(
                    "{} eigenvalues for {} rows",
                    lambda_eigs.len(),
                    v0.rows
                ),
            });
        }
        if v0.rows > v0.cols {
            return Err(Error::BadShape {
                context: format!("{}×{} basis has more rows than columns", v0.rows, v0.cols),
            });
        }
        if !v0.is_finite() || lambda_eigs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        if !(hbar > T::zero()) || !hbar.is_finite() {
            return Err(Error::BadConfig { context: "ħ must be positive and finite".into() });
        }
        let gram = v0.matmul(&v0.transpose());
        let mut worst = T::zero();
        for p in 0..v0.rows {
            for q in 0..v0.rows {
                let target = if p == q { T::one() } else { T::zero() };
                worst = worst.max((gram[(p, q)] - target).abs());
            }
        }
        if worst > T::of(1e-10) {
            return Err(Error::BadShape {
                context: format!(
                    "basis rows are not orthonormal (deviation {:e})",
                    worst.to_f64().unwrap_or(f64::NAN)
                ),
            });
        }
        Ok(Self { lambda_eigs, v0, hbar })
    }

    pub fn lambda_eigs(&self) -> &[T] {
        &self.lambda_eigs
    }

    pub fn v0(&self) -> &RectMatrix<T> {
        &self.v0
    }

    pub fn hbar(&self) -> T {
        self.hbar
    }

    pub fn with_hbar(mut self, hbar: T) -> Result<Self> {
        if !(hbar > T::zero()) || !hbar.is_finite() {
            return Err(Error::BadConfig { context: "ħ must be positive and finite".into() });
        }
        self.hbar = hbar;
        Ok(self)
    }
}

/// Diagonalizes the solution's multiplier matrix λβ^{[p]} = λ^{[p]}β^{[p]}
/// and rotates the operator rows into that basis, v_{pk} = Σ_j β_j^{[p]}u_{jk}.
/// The rotation leaves Tr λ — the fidelity — unchanged.
pub fn prepare<T: Real>(solution: &Solution<T>) -> Result<GroundStateEvolution<T>> {
    if !solution.converged {
        return Err(Error::NotConverged {
            context: "evolution needs a converged solution".into(),
        });
    }
    let b = &solution.b;
    if b.n_s() != 1 {
        return Err(Error::BadShape {
            context: format!("evolution needs a single-block operator, got N_s = {}", b.n_s()),
        });
    }
    if b.d_out() != b.d_in() {
        return Err(Error::BadShape {
            context: format!("evolution needs D = n, got {}×{}", b.d_out(), b.d_in()),
        });
    }
    b.validate_flags()?;
    if !b.orthonormal_rows {
        return Err(Error::BadShape {
            context: "solution rows are not flagged orthonormal".into(),
        });
    }
    let spec = eigh(&solution.multipliers.lambda)?;
    let v0 = spec.eigenvectors.transpose().matmul(b.block(0));
    GroundStateEvolution::new(spec.eigenvalues, v0, T::one())
}

/// u_{pk}(t) = exp(−iλ^{[p]}t/ħ)·v_{pk}: row p picks up phase −λ^{[p]}t/ħ.
/// Row magnitudes — and the complex row Gram — are preserved for every t.
pub fn evolve<T: Real>(g: &GroundStateEvolution<T>, t: T) -> ComplexOperator<T> {
    let (rows, cols) = (g.v0.rows, g.v0.cols);
    let mut re = RectMatrix::zeros(rows, cols);
    let mut im = RectMatrix::zeros(rows, cols);
    for p in 0..rows {
        let theta = g.lambda_eigs[p] * t / g.hbar;
        let (c, s) = (theta.cos(), theta.sin());
        for k in 0..cols {
            re[(p, k)] = c * g.v0[(p, k)];
            im[(p, k)] = -s * g.v0[(p, k)];
        }
    }
    ComplexOperator { re, im }
}

/// The pure-state density tensor (|𝒰⟩⟨𝒰|)(t): entry (pk; p'k') carries
/// phase −(λ^{[p]} − λ^{[p']})t/ħ on v_{pk}v_{p'k'}, flattened to a
/// (D·n)×(D·n) complex matrix over a = p·n + k. Entries with p = p' are
/// time-independent.
pub fn density_tensor_pure<T: Real>(g: &GroundStateEvolution<T>, t: T) -> ComplexOperator<T> {
    let (rows, cols) = (g.v0.rows, g.v0.cols);
    let dim = rows * cols;
    let mut re = RectMatrix::zeros(dim, dim);
    let mut im = RectMatrix::zeros(dim, dim);
    for p in 0..rows {
        for k in 0..cols {
            let a = p * cols + k;
            for p2 in 0..rows {
                for k2 in 0..cols {
                    let b = p2 * cols + k2;
                    let theta = (g.lambda_eigs[p] - g.lambda_eigs[p2]) * t / g.hbar;
                    let weight = g.v0[(p, k)] * g.v0[(p2, k2)];
                    re[(a, b)] = theta.cos() * weight;
                    im[(a, b)] = -theta.sin() * weight;
                }
            }
        }
    }
    ComplexOperator { re, im }
}

/// Frobenius norm of SΥ − ΥS for Υ = |𝒰⟩⟨𝒰| over the flattened index.
/// Since Υ is the rank-one outer product u·uᵀ and S is symmetric, the
/// commutator is exactly (Su)uᵀ − u(Su)ᵀ. Generically nonzero: it vanishes
/// only when Su ∝ u, i.e. when λ is a multiple of the identity.
pub fn liouville_commutator_residual<T: Real>(
    s: &Superoperator<T>,
    solution: &Solution<T>,
) -> Result<T> {
    if !solution.converged {
        return Err(Error::NotConverged {
            context: "commutator residual needs a converged solution".into(),
        });
    }
    if solution.b.n_s() != 1 {
        return Err(Error::BadShape {
            context: format!(
                "commutator residual needs a single-block operator, got N_s = {}",
                solution.b.n_s()
            ),
        });
    }
    let u = solution.b.flatten();
    let su = s.apply_flat(&u)?;
    let mut frob_sq = T::zero();
    for a in 0..u.len() {
        for b in 0..u.len() {
            let c = su[a] * u[b] - u[a] * su[b];
            frob_sq = frob_sq + c * c;
        }
    }
    Ok(frob_sq.sqrt())
}

/// Heat-like variant with the imaginary unit removed: row p scales by
/// exp(λ^{[p]}t/κ), exponentially growing or decaying. No unitarity claim.
pub fn evolve_dissipative<T: Real>(
    g: &GroundStateEvolution<T>,
    t: T,
    kappa: T,
) -> Result<RectMatrix<T>> {
    if !(kappa > T::zero()) || !kappa.is_finite() {
        return Err(Error::BadConfig { context: "κ must be positive and finite".into() });
    }
    let (rows, cols) = (g.v0.rows, g.v0.cols);
    let mut out = RectMatrix::zeros(rows, cols);
    for p in 0..rows {
        let exponent = g.lambda_eigs[p] * t / kappa;
        if exponent > T::of(EXP_GUARD) {
            return Err(Error::Overflow { exponent: exponent.to_f64().unwrap_or(f64::NAN) });
        }
        let scale = exponent.exp();
        for k in 0..cols {
            out[(p, k)] = scale * g.v0[(p, k)];
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
