//! Iterative solver for the constrained quadratic program
//! max Σ_s ⟨B_s|S|B_s⟩ subject to Σ_s B_sB_sᵀ = I (and, per mode, trace
//! preservation Σ_s B_sᵀB_s = I).
//!
//! Each iteration solves a generalized symmetric eigenproblem on the
//! subspace left after eliminating linear constraints, picks the
//! maximal-eigenvalue state, rescales it to the partial constraint
//! Σ|b|² = D, restores the quadratic constraints by closed-form
//! adjustments, refits the Lagrange multipliers (λ over output-index
//! pairs, ν over Kraus pairs) by least squares, and regenerates the
//! linearized helper constraints from the new iterate. The iteration
//! state is the triple (iterate, multipliers, constraint rows).

use crate::matfun::{self, RectMatrix, SymMatrix};
use crate::states::{self, MappingOperator, FLAG_TOL};
use crate::superop::Superoperator;
use crate::{Error, Real, Result};

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// The multiplier pair: λ (D×D, over output-index products) and ν
/// (N_s×N_s, over Kraus-block products, zero diagonal).
#[derive(Clone, Debug)]
pub struct LagrangeMultipliers<T> {
    pub lambda: SymMatrix<T>,
    pub nu: SymMatrix<T>,
}

impl<T: Real> LagrangeMultipliers<T> {
    pub fn zeros(d_out: usize, n_s: usize) -> Self {
        LagrangeMultipliers { lambda: SymMatrix::zeros(d_out), nu: SymMatrix::zeros(n_s) }
    }
}

/// Where a constraint row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Offdiag,
    DiagEq,
    KrausOffdiag,
    TracePreserve,
    External,
}

/// Homogeneous linear constraint rows over the flattened operator layout
/// (s,j,k) ↦ s·Dn + j·n + k. External rows persist across iterations;
/// all other rows are regenerated from each new iterate.
#[derive(Clone, Debug, Default)]
pub struct ConstraintSet<T> {
    rows: Vec<Vec<T>>,
    provenance: Vec<Provenance>,
}

impl<T: Real> ConstraintSet<T> {
    pub fn empty() -> Self {
        ConstraintSet { rows: Vec::new(), provenance: Vec::new() }
    }

    /// Wraps caller-supplied rows, all tagged external.
    pub fn external(rows: Vec<Vec<T>>) -> Result<Self> {
        let mut set = Self::empty();
        for row in rows {
            set.push(row, Provenance::External)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: Vec<T>, provenance: Provenance) -> Result<()> {
        if !row.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite);
        }
        self.push_raw(row, provenance);
        Ok(())
    }

    fn push_raw(&mut self, row: Vec<T>, provenance: Provenance) {
        self.rows.push(row);
        self.provenance.push(provenance);
    }

    fn extend_from(&mut self, other: &ConstraintSet<T>) {
        for (row, &prov) in other.rows.iter().zip(&other.provenance) {
            self.push_raw(row.clone(), prov);
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Stacks the rows into a matrix of the given width (0×width when
    /// empty); errors on any row of the wrong length.
    pub fn to_matrix(&self, width: usize) -> Result<RectMatrix<T>> {
        for row in &self.rows {
            if row.len() != width {
                return Err(Error::BadShape {
                    context: format!("constraint row length {} vs layout {width}", row.len()),
                });
            }
        }
        let mut out = RectMatrix::zeros(self.rows.len(), width);
        for (i, row) in self.rows.iter().enumerate() {
            out.data_mut()[i * width..(i + 1) * width].copy_from_slice(row);
        }
        Ok(out)
    }
}

/// Which quadratic constraint family the solver maintains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintMode {
    Orthogonality,
    TracePreserving,
    Both,
}

/// Whether iterates are rotated into the canonical Kraus gauge
/// (pairwise cross-traces zero).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gauge {
    Canonical,
    None,
}

/// Which eigenstate of the reduced problem continues the iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StateSelection {
    MaxMu,
}

#[derive(Clone, Debug)]
pub struct SolverConfig<T> {
    pub max_iterations: usize,
    /// ε_F: relative fidelity-change tolerance.
    pub convergence_rel_tol: T,
    /// Selected-eigenvalue tolerance, scaled by 1 + |𝓕|.
    pub mu_tol: T,
    /// Feasibility an iterate must reach before convergence is declared.
    pub constraint_tol: T,
    /// Rounds of the alternating external-constraint resolution.
    pub adjust_inner_iterations: usize,
    pub state_selection: StateSelection,
    pub gauge: Gauge,
    pub constraint_mode: ConstraintMode,
}

impl<T: Real> Default for SolverConfig<T> {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 200,
            convergence_rel_tol: T::of(1e-9),
            mu_tol: T::of(1e-8),
            constraint_tol: T::of(1e-10),
            adjust_inner_iterations: 5,
            state_selection: StateSelection::MaxMu,
            gauge: Gauge::Canonical,
            constraint_mode: ConstraintMode::Orthogonality,
        }
    }
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::BadConfig { context: "max_iterations must be positive".into() });
        }
        let tols = [
            ("convergence_rel_tol", self.convergence_rel_tol),
            ("mu_tol", self.mu_tol),
            ("constraint_tol", self.constraint_tol),
        ];
        for (name, value) in tols {
            if !(value > T::zero()) || !value.is_finite() {
                return Err(Error::BadConfig { context: format!("{name} must be positive") });
            }
        }
        if !(1..=100).contains(&self.adjust_inner_iterations) {
            return Err(Error::BadConfig {
                context: format!(
                    "adjust_inner_iterations = {} outside [1, 100]",
                    self.adjust_inner_iterations
                ),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Solution<T> {
    pub b: MappingOperator<T>,
    pub multipliers: LagrangeMultipliers<T>,
    pub fidelity: T,
    pub mu_selected: T,
    pub residual: T,
    pub iterations: usize,
    pub converged: bool,
    pub max_constraint_violation: T,
}

/// One diagnostics row per iteration.
#[derive(Clone, Copy, Debug)]
pub struct TraceRow<T> {
    pub iteration: usize,
    pub fidelity: T,
    pub mu_selected: T,
    pub residual: T,
    pub max_constraint_violation: T,
}

// ---------------------------------------------------------------------------
// Lagrange multipliers
// ---------------------------------------------------------------------------

fn check_pair<T: Real>(s: &Superoperator<T>, b: &MappingOperator<T>) -> Result<()> {
    if b.d_out() != s.d_out() || b.d_in() != s.d_in() {
        return Err(Error::BadShape {
            context: format!(
                "operator {}x{} vs tensor {}x{}",
                b.d_out(),
                b.d_in(),
                s.d_out(),
                s.d_in()
            ),
        });
    }
    Ok(())
}

/// Orthonormal basis (as rows) for the span of an external constraint set;
/// `None` when the set is empty. Degenerate row Grams are rejected.
fn external_span_basis<T: Real>(
    external: &ConstraintSet<T>,
    width: usize,
) -> Result<Option<RectMatrix<T>>> {
    if external.is_empty() {
        return Ok(None);
    }
    let e = external.to_matrix(width)?;
    let gram = SymMatrix::new(&e.matmul(&e.transpose()))?;
    let w = matfun::inv_sqrt(&gram, T::of(matfun::DEGENERACY_TOL))?;
    Ok(Some(w.to_rect().matmul(&e)))
}

/// Subtracts from `v` its projections onto the (orthonormal) basis rows.
fn remove_span_projections<T: Real>(v: &mut [T], basis: &RectMatrix<T>) {
    for r in 0..basis.rows {
        let row = basis.row(r);
        let coeff: T = row.iter().zip(v.iter()).map(|(&c, &x)| c * x).sum();
        for (x, &c) in v.iter_mut().zip(row) {
            *x = *x - coeff * c;
        }
    }
}

/// Least-squares multipliers: minimize ‖S b − λ∘b − ν∘b‖² over the
/// independent components λ_{ij} (j ≤ i, packed r = i(i+1)/2 + j) and
/// ν_{st} (t < s, packed s(s−1)/2 + t).
///
/// External rows carry multipliers of their own, so the fit is taken on
/// the orthogonal complement of their span: both the target S b and the
/// design columns are projected off it, which is the joint least-squares
/// solution with the external coefficients eliminated.
pub fn lagrange_multipliers<T: Real>(
    s: &Superoperator<T>,
    b: &MappingOperator<T>,
    external: &ConstraintSet<T>,
) -> Result<LagrangeMultipliers<T>> {
    check_pair(s, b)?;
    let d = b.d_out();
    let n = b.d_in();
    let n_s = b.n_s();
    let p_lambda = d * (d + 1) / 2;
    let p = p_lambda + n_s * (n_s - 1) / 2;
    let rows = n_s * d * n;

    let mut design = RectMatrix::zeros(rows, p);
    for i in 0..d {
        for j in 0..=i {
            let col = i * (i + 1) / 2 + j;
            for (s_idx, blk) in b.blocks().iter().enumerate() {
                let base = s_idx * d * n;
                for q in 0..n {
                    if i == j {
                        let r = base + i * n + q;
                        design[(r, col)] = design[(r, col)] + blk[(i, q)];
                    } else {
                        let r_i = base + i * n + q;
                        let r_j = base + j * n + q;
                        design[(r_i, col)] = design[(r_i, col)] + blk[(j, q)];
                        design[(r_j, col)] = design[(r_j, col)] + blk[(i, q)];
                    }
                }
            }
        }
    }
    for s_hi in 1..n_s {
        for t in 0..s_hi {
            let col = p_lambda + s_hi * (s_hi - 1) / 2 + t;
            for i in 0..d {
                for q in 0..n {
                    let r_hi = s_hi * d * n + i * n + q;
                    let r_lo = t * d * n + i * n + q;
                    design[(r_hi, col)] = design[(r_hi, col)] + b.block(t)[(i, q)];
                    design[(r_lo, col)] = design[(r_lo, col)] + b.block(s_hi)[(i, q)];
                }
            }
        }
    }

    let mut rhs = vec![T::zero(); rows];
    for s_idx in 0..n_s {
        let su = s.apply_flat(b.block(s_idx).data())?;
        rhs[s_idx * d * n..(s_idx + 1) * d * n].copy_from_slice(&su);
    }

    if let Some(basis) = external_span_basis(external, rows)? {
        remove_span_projections(&mut rhs, &basis);
        let mut col = vec![T::zero(); rows];
        for c in 0..p {
            for (r, slot) in col.iter_mut().enumerate() {
                *slot = design[(r, c)];
            }
            remove_span_projections(&mut col, &basis);
            for (r, &v) in col.iter().enumerate() {
                design[(r, c)] = v;
            }
        }
    }

    let gram = SymMatrix::new(&design.transpose().matmul(&design))?;
    let mut htail = vec![T::zero(); p];
    for (r, &rv) in rhs.iter().enumerate() {
        if rv == T::zero() {
            continue;
        }
        for (c, h) in htail.iter_mut().enumerate() {
            *h = *h + design[(r, c)] * rv;
        }
    }
    let x = matfun::solve_spd(&gram, &htail, T::of(1e-12))?;

    let lambda = SymMatrix::from_fn(d, |i, j| {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        x[hi * (hi + 1) / 2 + lo]
    });
    let nu = SymMatrix::from_fn(n_s, |a, c| {
        if a == c {
            T::zero()
        } else {
            let (hi, lo) = if a > c { (a, c) } else { (c, a) };
            x[p_lambda + hi * (hi - 1) / 2 + lo]
        }
    });
    Ok(LagrangeMultipliers { lambda, nu })
}

/// Closed-form multiplier for a single block: λ = Herm(U (SU)ᵀ), exact
/// at a row-orthonormal U and equal to the least-squares fit there.
pub fn lagrange_closed_form_unitary<T: Real>(
    s: &Superoperator<T>,
    b: &MappingOperator<T>,
) -> Result<SymMatrix<T>> {
    check_pair(s, b)?;
    if b.n_s() != 1 {
        return Err(Error::BadShape {
            context: format!("closed form needs N_s = 1, got {}", b.n_s()),
        });
    }
    let d = b.d_out();
    let n = b.d_in();
    let u = b.block(0);
    let su = s.apply_flat(u.data())?;
    Ok(SymMatrix::from_fn(d, |i, j| {
        let mut m_ij = T::zero();
        let mut m_ji = T::zero();
        for k in 0..n {
            m_ij = m_ij + u[(i, k)] * su[j * n + k];
            m_ji = m_ji + u[(j, k)] * su[i * n + k];
        }
        (m_ij + m_ji) / T::of(2.0)
    }))
}

/// The stationarity defect S b − λ∘b − ν∘b, flattened. Components along
/// the external-row span belong to those rows' own multipliers and are
/// removed, so the defect is measured on the complement only.
fn stationarity_defect<T: Real>(
    s: &Superoperator<T>,
    b: &MappingOperator<T>,
    lm: &LagrangeMultipliers<T>,
    external: &ConstraintSet<T>,
) -> Result<Vec<T>> {
    check_pair(s, b)?;
    let d = b.d_out();
    let n = b.d_in();
    let n_s = b.n_s();
    if lm.lambda.dim() != d || lm.nu.dim() != n_s {
        return Err(Error::BadShape {
            context: format!(
                "multipliers ({}, {}) vs operator (D = {d}, N_s = {n_s})",
                lm.lambda.dim(),
                lm.nu.dim()
            ),
        });
    }
    let mut out = vec![T::zero(); n_s * d * n];
    for s_idx in 0..n_s {
        let su = s.apply_flat(b.block(s_idx).data())?;
        for i in 0..d {
            for q in 0..n {
                let mut v = su[i * n + q];
                for j in 0..d {
                    v = v - lm.lambda[(i, j)] * b.block(s_idx)[(j, q)];
                }
                for t in 0..n_s {
                    if t != s_idx {
                        v = v - lm.nu[(s_idx, t)] * b.block(t)[(i, q)];
                    }
                }
                out[s_idx * d * n + i * n + q] = v;
            }
        }
    }
    if let Some(basis) = external_span_basis(external, out.len())? {
        remove_span_projections(&mut out, &basis);
    }
    Ok(out)
}

/// L² norm of the stationarity defect; ~0 at a converged solution. With
/// external rows present, the norm covers only the complement of their span.
pub fn residual<T: Real>(
    s: &Superoperator<T>,
    b: &MappingOperator<T>,
    lm: &LagrangeMultipliers<T>,
    external: &ConstraintSet<T>,
) -> Result<T> {
    let defect = stationarity_defect(s, b, lm, external)?;
    Ok(defect.iter().map(|&x| x * x).sum::<T>().sqrt())
}

// ---------------------------------------------------------------------------
// Helper constraints
// ---------------------------------------------------------------------------

/// Linearized feasibility rows built from the iterate `b`, all vanishing
/// on `b` itself when `b` satisfies the source quadratic constraints.
///
/// Orthogonality mode: D(D−1)/2 off-diagonal rows plus D−1 rows tying
/// consecutive row-Gram diagonals; trace mode instead emits the analogous
/// (n−1)(n+2)/2 rows on the column Gram. Stacks with N_s > 1 always add
/// N_s(N_s−1)/2 gauge rows keeping cross-traces zero. Redundant rows are
/// removed later by the rank step of the constraint elimination.
pub fn helper_constraints<T: Real>(
    b: &MappingOperator<T>,
    mode: ConstraintMode,
) -> ConstraintSet<T> {
    let d = b.d_out();
    let n = b.d_in();
    let n_s = b.n_s();
    let dn = d * n;
    let width = n_s * dn;
    let idx = |s: usize, j: usize, k: usize| s * dn + j * n + k;
    let mut set = ConstraintSet::empty();

    if matches!(mode, ConstraintMode::Orthogonality | ConstraintMode::Both) {
        for j in 0..d {
            for jp in 0..j {
                let mut row = vec![T::zero(); width];
                for (s_idx, blk) in b.blocks().iter().enumerate() {
                    for k in 0..n {
                        row[idx(s_idx, j, k)] = row[idx(s_idx, j, k)] + blk[(jp, k)];
                        row[idx(s_idx, jp, k)] = row[idx(s_idx, jp, k)] + blk[(j, k)];
                    }
                }
                set.push_raw(row, Provenance::Offdiag);
            }
        }
        for j in 1..d {
            let mut row = vec![T::zero(); width];
            for (s_idx, blk) in b.blocks().iter().enumerate() {
                for k in 0..n {
                    row[idx(s_idx, j, k)] = row[idx(s_idx, j, k)] + blk[(j, k)];
                    row[idx(s_idx, j - 1, k)] = row[idx(s_idx, j - 1, k)] - blk[(j - 1, k)];
                }
            }
            set.push_raw(row, Provenance::DiagEq);
        }
    }

    for s_hi in 1..n_s {
        for t in 0..s_hi {
            let mut row = vec![T::zero(); width];
            for j in 0..d {
                for k in 0..n {
                    row[idx(s_hi, j, k)] = row[idx(s_hi, j, k)] + b.block(t)[(j, k)];
                    row[idx(t, j, k)] = row[idx(t, j, k)] + b.block(s_hi)[(j, k)];
                }
            }
            set.push_raw(row, Provenance::KrausOffdiag);
        }
    }

    if matches!(mode, ConstraintMode::TracePreserving | ConstraintMode::Both) {
        for k in 0..n {
            for kp in 0..k {
                let mut row = vec![T::zero(); width];
                for (s_idx, blk) in b.blocks().iter().enumerate() {
                    for j in 0..d {
                        row[idx(s_idx, j, k)] = row[idx(s_idx, j, k)] + blk[(j, kp)];
                        row[idx(s_idx, j, kp)] = row[idx(s_idx, j, kp)] + blk[(j, k)];
                    }
                }
                set.push_raw(row, Provenance::TracePreserve);
            }
        }
        for k in 1..n {
            let mut row = vec![T::zero(); width];
            for (s_idx, blk) in b.blocks().iter().enumerate() {
                for j in 0..d {
                    row[idx(s_idx, j, k)] = row[idx(s_idx, j, k)] + blk[(j, k)];
                    row[idx(s_idx, j, k - 1)] = row[idx(s_idx, j, k - 1)] - blk[(j, k - 1)];
                }
            }
            set.push_raw(row, Provenance::TracePreserve);
        }
    }

    set
}

// ---------------------------------------------------------------------------
// Reduced eigenproblem
// ---------------------------------------------------------------------------

/// The full multiplier-shifted matrix
/// 𝒮_{s,jk;s',j'k'} = δ_{ss'}S_{jk;j'k'} − λ_{jj'}δ_{ss'}δ_{kk'} − ν_{ss'}δ_{jj'}δ_{kk'}.
fn script_matrix<T: Real>(s: &Superoperator<T>, lm: &LagrangeMultipliers<T>) -> RectMatrix<T> {
    let d = s.d_out();
    let n = s.d_in();
    let n_s = lm.nu.dim();
    let dn = d * n;
    let width = n_s * dn;
    let mut out = RectMatrix::zeros(width, width);
    for s_idx in 0..n_s {
        let base = s_idx * dn;
        for i in 0..d {
            for q in 0..n {
                let r = base + i * n + q;
                for j in 0..d {
                    for k in 0..n {
                        out[(r, base + j * n + k)] = s.matrix()[(i * n + q, j * n + k)];
                    }
                }
                for j in 0..d {
                    let c = base + j * n + q;
                    out[(r, c)] = out[(r, c)] - lm.lambda[(i, j)];
                }
                for t in 0..n_s {
                    if t != s_idx {
                        let c = t * dn + i * n + q;
                        out[(r, c)] = out[(r, c)] - lm.nu[(s_idx, t)];
                    }
                }
            }
        }
    }
    out
}

/// Projects the multiplier-shifted matrix onto the constraint null space:
/// num = Mᵀ𝒮M, den = MᵀM.
pub fn reduced_problem<T: Real>(
    s: &Superoperator<T>,
    lm: &LagrangeMultipliers<T>,
    m: &RectMatrix<T>,
) -> Result<(SymMatrix<T>, SymMatrix<T>)> {
    let width = lm.nu.dim() * s.dim();
    if lm.lambda.dim() != s.d_out() || m.rows != width {
        return Err(Error::BadShape {
            context: format!(
                "basis rows {} vs N_s·D·n = {width}, λ dim {} vs D = {}",
                m.rows,
                lm.lambda.dim(),
                s.d_out()
            ),
        });
    }
    let script = script_matrix(s, lm);
    let mt = m.transpose();
    let num = SymMatrix::new(&mt.matmul(&script.matmul(m)))?;
    let den = SymMatrix::new(&mt.matmul(m))?;
    Ok((num, den))
}

/// One eigenstep: solve num·v = μ·den·v, select the maximal μ, map the
/// eigenvector back through the elimination basis, and rescale to the
/// partial constraint Σ|b|² = D.
pub fn eig_step<T: Real>(
    num: &SymMatrix<T>,
    den: &SymMatrix<T>,
    m: &RectMatrix<T>,
    d_out: usize,
    d_in: usize,
    n_s: usize,
) -> Result<(T, MappingOperator<T>)> {
    if m.cols != num.dim() || m.rows != n_s * d_out * d_in {
        return Err(Error::BadShape {
            context: format!("basis {}x{} vs problem dim {}", m.rows, m.cols, num.dim()),
        });
    }
    let spec = matfun::gen_sym_eig(num, den)?;
    let (mu, v) = spec.max_pair();
    let mut flat = vec![T::zero(); m.rows];
    for (r, slot) in flat.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (c, &vc) in v.iter().enumerate() {
            acc = acc + m[(r, c)] * vc;
        }
        *slot = acc;
    }
    let norm_sq: T = flat.iter().map(|&x| x * x).sum();
    if !(norm_sq > T::zero()) || !norm_sq.is_finite() {
        return Err(Error::DegenerateGram {
            context: "eigenstep reconstructed a zero candidate".into(),
        });
    }
    let scale = (T::of(d_out as f64) / norm_sq).sqrt();
    for x in &mut flat {
        *x = *x * scale;
    }
    Ok((mu, MappingOperator::from_flat(d_out, d_in, n_s, &flat)?))
}

// ---------------------------------------------------------------------------
// Adjustments
// ---------------------------------------------------------------------------

/// Minimal-disturbance restoration of Σ_s B_sB_sᵀ = I: left-multiply every
/// block by the inverse square root of the row Gram.
pub fn adjust_orthogonal<T: Real>(b: &MappingOperator<T>) -> Result<MappingOperator<T>> {
    let w = matfun::inv_sqrt(&b.sum_bbt(), T::of(matfun::DEGENERACY_TOL))?;
    let wr = w.to_rect();
    let blocks = b.blocks().iter().map(|blk| wr.matmul(blk)).collect();
    let mut out = MappingOperator::new(blocks)?;
    out.orthonormal_rows = true;
    Ok(out)
}

/// Rotates the stack into the canonical gauge: recombines blocks along the
/// eigenvectors of the Kraus-space Gram Tr B_sB_tᵀ, ordered by descending
/// eigenvalue, which zeroes all cross-traces. The total fidelity against
/// any tensor is unchanged; zero Gram eigenvalues simply produce zero
/// blocks.
pub fn adjust_canonical<T: Real>(
    b: &MappingOperator<T>,
    s: &Superoperator<T>,
) -> Result<MappingOperator<T>> {
    check_pair(s, b)?;
    if b.n_s() == 1 {
        return Ok(b.clone());
    }
    let n_s = b.n_s();
    let gram = SymMatrix::from_fn(n_s, |i, j| b.cross_trace(i, j));
    let spec = matfun::eigh(&gram)?;
    let mut blocks = Vec::with_capacity(n_s);
    for col in (0..n_s).rev() {
        let mut combined = RectMatrix::zeros(b.d_out(), b.d_in());
        for (src, blk) in b.blocks().iter().enumerate() {
            let g = spec.eigenvectors[(src, col)];
            if g != T::zero() {
                combined = combined.add(&blk.scale(g));
            }
        }
        blocks.push(combined);
    }
    let mut out = MappingOperator::new(blocks)?;
    out.canonical = true;
    out.orthonormal_rows = b.orthonormal_rows;
    out.trace_preserving = b.trace_preserving;
    #[cfg(debug_assertions)]
    {
        let before = s.total_fidelity(b)?;
        let after = s.total_fidelity(&out)?;
        debug_assert!(
            (before - after).abs() <= T::of(1e-10) * (T::one() + before.abs()),
            "gauge rotation must preserve the fidelity"
        );
    }
    Ok(out)
}

/// Restoration of trace preservation Σ_s B_sᵀB_s = I: right-multiply every
/// block by the inverse square root of the column Gram. Requires enough
/// blocks for the column Gram to be invertible, i.e. N_s at or above the
/// minimal Kraus rank.
pub fn adjust_trace_preserving<T: Real>(b: &MappingOperator<T>) -> Result<MappingOperator<T>> {
    let need = states::min_kraus_rank(b.d_out(), b.d_in());
    if b.n_s() < need {
        return Err(Error::DegenerateGram {
            context: format!(
                "N_s = {} below the minimal Kraus rank {need} of a {}→{} trace-preserving map",
                b.n_s(),
                b.d_in(),
                b.d_out()
            ),
        });
    }
    let w = matfun::inv_sqrt(&b.sum_btb(), T::of(matfun::DEGENERACY_TOL))?;
    let wr = w.to_rect();
    let blocks = b.blocks().iter().map(|blk| blk.matmul(&wr)).collect();
    let mut out = MappingOperator::new(blocks)?;
    out.trace_preserving = true;
    Ok(out)
}

/// Resolves the conflict between orthonormality and external linear
/// constraints: orthonormalizes the external rows once, then alternates
/// the orthogonality adjustment with removal of the iterate's projections
/// onto those rows. Each round ends projection-clean; a handful of rounds
/// leaves both violations at the level the outer iteration needs.
pub fn adjust_with_external<T: Real>(
    b: &MappingOperator<T>,
    external: &ConstraintSet<T>,
    inner_iterations: usize,
) -> Result<MappingOperator<T>> {
    if !(1..=100).contains(&inner_iterations) {
        return Err(Error::BadConfig {
            context: format!("inner_iterations = {inner_iterations} outside [1, 100]"),
        });
    }
    let width = b.n_s() * b.d_out() * b.d_in();
    let Some(tilde) = external_span_basis(external, width)? else {
        return adjust_orthogonal(b);
    };

    let mut current = b.clone();
    for _ in 0..inner_iterations {
        current = adjust_orthogonal(&current)?;
        let mut flat = current.flatten();
        remove_span_projections(&mut flat, &tilde);
        current = MappingOperator::from_flat(b.d_out(), b.d_in(), b.n_s(), &flat)?;
    }
    Ok(current)
}

// ---------------------------------------------------------------------------
// Feasibility diagnostics
// ---------------------------------------------------------------------------

/// Worst entrywise violation of the mode's quadratic constraints, plus the
/// gauge cross-traces under the canonical gauge.
pub fn feasibility_violation<T: Real>(
    b: &MappingOperator<T>,
    mode: ConstraintMode,
    gauge: Gauge,
) -> T {
    let mut worst = T::zero();
    if matches!(mode, ConstraintMode::Orthogonality | ConstraintMode::Both) {
        let g = b.sum_bbt();
        for i in 0..b.d_out() {
            for j in 0..b.d_out() {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
    }
    if matches!(mode, ConstraintMode::TracePreserving | ConstraintMode::Both) {
        let g = b.sum_btb();
        for i in 0..b.d_in() {
            for j in 0..b.d_in() {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
    }
    if gauge == Gauge::Canonical {
        for s_hi in 1..b.n_s() {
            for t in 0..s_hi {
                worst = worst.max(b.cross_trace(s_hi, t).abs());
            }
        }
    }
    worst
}

/// Worst |⟨row|b⟩| over the set, each normalized by the row's L² norm.
pub fn external_violation<T: Real>(b: &MappingOperator<T>, set: &ConstraintSet<T>) -> T {
    let flat = b.flatten();
    let mut worst = T::zero();
    for row in set.rows() {
        if row.len() != flat.len() {
            return T::infinity();
        }
        let dot: T = row.iter().zip(&flat).map(|(&c, &x)| c * x).sum();
        let norm: T = row.iter().map(|&c| c * c).sum::<T>().sqrt();
        if norm > T::zero() {
            worst = worst.max(dot.abs() / norm);
        }
    }
    worst
}

fn set_measured_flags<T: Real>(b: &mut MappingOperator<T>) {
    let tol = T::of(FLAG_TOL);
    b.orthonormal_rows =
        feasibility_violation(b, ConstraintMode::Orthogonality, Gauge::None) <= tol;
    b.trace_preserving =
        feasibility_violation(b, ConstraintMode::TracePreserving, Gauge::None) <= tol;
    let mut cross = T::zero();
    for s_hi in 1..b.n_s() {
        for t in 0..s_hi {
            cross = cross.max(b.cross_trace(s_hi, t).abs());
        }
    }
    b.canonical = cross <= tol;
}

// ---------------------------------------------------------------------------
// The solver loop
// ---------------------------------------------------------------------------

/// Runs the iteration from scratch: zero multipliers and no helper rows on
/// the first pass (external rows always apply). Non-convergence within
/// `max_iterations` is reported as a `Solution` with `converged = false`
/// carrying the best iterate found — multi-block stacks are expected to
/// end there.
pub fn solve<T: Real>(
    s: &Superoperator<T>,
    n_s: usize,
    config: &SolverConfig<T>,
    external: &ConstraintSet<T>,
) -> Result<Solution<T>> {
    run_solver(s, n_s, config, external, None, None)
}

/// Like [`solve`], seeded at `initial`: the first pass already uses the
/// multipliers and helper constraints of the seed, so a converged solution
/// fed back in stays put.
pub fn solve_from<T: Real>(
    s: &Superoperator<T>,
    n_s: usize,
    config: &SolverConfig<T>,
    external: &ConstraintSet<T>,
    initial: Option<&MappingOperator<T>>,
) -> Result<Solution<T>> {
    run_solver(s, n_s, config, external, initial, None)
}

/// Like [`solve_from`], appending one diagnostics row per iteration.
pub fn solve_with_trace<T: Real>(
    s: &Superoperator<T>,
    n_s: usize,
    config: &SolverConfig<T>,
    external: &ConstraintSet<T>,
    initial: Option<&MappingOperator<T>>,
    trace: &mut Vec<TraceRow<T>>,
) -> Result<Solution<T>> {
    run_solver(s, n_s, config, external, initial, Some(trace))
}

fn run_solver<T: Real>(
    s: &Superoperator<T>,
    n_s: usize,
    config: &SolverConfig<T>,
    external: &ConstraintSet<T>,
    initial: Option<&MappingOperator<T>>,
    mut trace: Option<&mut Vec<TraceRow<T>>>,
) -> Result<Solution<T>> {
    config.validate()?;
    if n_s == 0 {
        return Err(Error::BadConfig { context: "N_s must be at least 1".into() });
    }
    let d = s.d_out();
    let n = s.d_in();
    let width = n_s * d * n;
    external.to_matrix(width)?;
    if !external.is_empty() && config.constraint_mode != ConstraintMode::Orthogonality {
        return Err(Error::BadConfig {
            context: "external rows are resolved against orthogonality constraints only".into(),
        });
    }

    let mut lm;
    let mut helpers: Option<ConstraintSet<T>>;
    let mut prev_fidelity: Option<T>;
    match initial {
        Some(seed) => {
            check_pair(s, seed)?;
            if seed.n_s() != n_s {
                return Err(Error::BadShape {
                    context: format!("seed has N_s = {}, solve asked for {n_s}", seed.n_s()),
                });
            }
            lm = lagrange_multipliers(s, seed, external)?;
            helpers = Some(helper_constraints(seed, config.constraint_mode));
            prev_fidelity = Some(s.total_fidelity(seed)?);
        }
        None => {
            lm = LagrangeMultipliers::zeros(d, n_s);
            helpers = None;
            prev_fidelity = None;
        }
    }

    let mut best: Option<Solution<T>> = None;
    for iteration in 1..=config.max_iterations {
        let mut combined = external.clone();
        if let Some(h) = &helpers {
            combined.extend_from(h);
        }
        let cmat = combined.to_matrix(width)?;
        let basis = matfun::null_space_basis(&cmat);
        if basis.cols == 0 {
            return Err(Error::BadRank { rank: width, dim: width });
        }
        let (num, den) = reduced_problem(s, &lm, &basis)?;
        let (mu, candidate) = eig_step(&num, &den, &basis, d, n, n_s)?;

        let mut b = if external.is_empty() {
            match config.constraint_mode {
                ConstraintMode::Orthogonality => adjust_orthogonal(&candidate)?,
                ConstraintMode::TracePreserving => adjust_trace_preserving(&candidate)?,
                ConstraintMode::Both => {
                    adjust_trace_preserving(&adjust_orthogonal(&candidate)?)?
                }
            }
        } else {
            adjust_with_external(&candidate, external, config.adjust_inner_iterations)?
        };
        if config.gauge == Gauge::Canonical && n_s > 1 {
            b = adjust_canonical(&b, s)?;
        }

        lm = lagrange_multipliers(s, &b, external)?;
        let fidelity = s.total_fidelity(&b)?;
        let step_residual = residual(s, &b, &lm, external)?;
        let violation = feasibility_violation(&b, config.constraint_mode, config.gauge)
            .max(external_violation(&b, external));
        if let Some(sink) = trace.as_deref_mut() {
            sink.push(TraceRow {
                iteration,
                fidelity,
                mu_selected: mu,
                residual: step_residual,
                max_constraint_violation: violation,
            });
        }

        if best.as_ref().map_or(true, |prev| fidelity > prev.fidelity) {
            best = Some(Solution {
                b: b.clone(),
                multipliers: lm.clone(),
                fidelity,
                mu_selected: mu,
                residual: step_residual,
                iterations: iteration,
                converged: false,
                max_constraint_violation: violation,
            });
        }

        let scale = T::one() + fidelity.abs();
        let settled = prev_fidelity
            .map_or(false, |p| (fidelity - p).abs() <= config.convergence_rel_tol * scale);
        if settled && mu.abs() <= config.mu_tol * scale && violation <= config.constraint_tol {
            let mut final_b = b;
            set_measured_flags(&mut final_b);
            return Ok(Solution {
                b: final_b,
                multipliers: lm,
                fidelity,
                mu_selected: mu,
                residual: step_residual,
                iterations: iteration,
                converged: true,
                max_constraint_violation: violation,
            });
        }

        prev_fidelity = Some(fidelity);
        helpers = Some(helper_constraints(&b, config.constraint_mode));
    }

    let mut out = best.expect("max_iterations ≥ 1 always produces an iterate");
    set_measured_flags(&mut out.b);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
