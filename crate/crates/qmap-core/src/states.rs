//! Density matrices, channels, random generation, and closeness measures.
//!
//! A channel is a stack of rectangular D×n Kraus blocks `B_s`; the stack
//! depth N_s = 1 is the partially unitary case (orthonormal rows). States
//! and operators are real throughout — the scalar field of the whole
//! artifact — so "unitary" always means real orthogonal here.

use serde::{Deserialize, Serialize};

use crate::matfun::{self, RectMatrix, SymMatrix};
use crate::rng::SplitMix64;
use crate::{Error, Real, Result};

/// Validation tolerance on density-matrix trace and positivity.
pub const DENSITY_TOL: f64 = 1e-10;

/// Eigenvalue clamp applied before any matrix logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

/// Symmetric PSD unit-trace state, possibly mixed.
///
/// Construction validates rather than repairs: inputs outside the 1e-10
/// trace/positivity tolerance are rejected, never renormalized.
#[derive(Clone, Debug)]
pub struct DensityMatrix<T> {
    mat: SymMatrix<T>,
}

impl<T: Real> DensityMatrix<T> {
    pub fn new(mat: SymMatrix<T>) -> Result<Self> {
        if !mat.is_finite() {
            return Err(Error::NonFinite);
        }
        let trace = mat.trace();
        if (trace - T::one()).abs() > T::of(DENSITY_TOL) {
            return Err(Error::BadDensity {
                context: format!("trace {:e} is not 1", trace.to_f64().unwrap_or(f64::NAN)),
            });
        }
        let spec = matfun::eigh(&mat)?;
        let min_eig = spec.eigenvalues.first().copied().unwrap_or_else(T::zero);
        if min_eig < -T::of(DENSITY_TOL) {
            return Err(Error::BadDensity {
                context: format!(
                    "min eigenvalue {:e} below -1e-10",
                    min_eig.to_f64().unwrap_or(f64::NAN)
                ),
            });
        }
        Ok(DensityMatrix { mat })
    }

    pub fn dim(&self) -> usize {
        self.mat.dim()
    }

    pub fn matrix(&self) -> &SymMatrix<T> {
        &self.mat
    }

    /// Tr ρ², the purity: 1 for pure states, 1/dim for maximally mixed.
    pub fn purity(&self) -> T {
        self.mat.data().iter().map(|&x| x * x).sum()
    }

    /// Principal square root (eigenvalues clamped at zero).
    pub fn sqrt(&self) -> Result<SymMatrix<T>> {
        matfun::sqrtm_psd(&self.mat, T::zero())
    }
}

/// Stack of N_s Kraus blocks, each d_out×d_in.
///
/// The flags record which quadratic constraints the stack is known to
/// satisfy; they are verified within 1e-10 whenever set by this crate.
#[derive(Clone, Debug)]
pub struct MappingOperator<T> {
    d_out: usize,
    d_in: usize,
    blocks: Vec<RectMatrix<T>>,
    pub orthonormal_rows: bool,
    pub canonical: bool,
    pub trace_preserving: bool,
}

/// Tolerance at which operator flags are verified.
pub const FLAG_TOL: f64 = 1e-10;

impl<T: Real> MappingOperator<T> {
    pub fn new(blocks: Vec<RectMatrix<T>>) -> Result<Self> {
        let first = blocks.first().ok_or_else(|| Error::BadShape {
            context: "operator needs at least one Kraus block".into(),
        })?;
        let (d_out, d_in) = (first.rows, first.cols);
        if d_out == 0 || d_in == 0 {
            return Err(Error::BadShape { context: "zero-dimensional Kraus block".into() });
        }
        for b in &blocks {
            if (b.rows, b.cols) != (d_out, d_in) {
                return Err(Error::BadShape {
                    context: format!(
                        "block {}x{} in a {d_out}x{d_in} stack",
                        b.rows, b.cols
                    ),
                });
            }
            if !b.is_finite() {
                return Err(Error::NonFinite);
            }
        }
        Ok(MappingOperator {
            d_out,
            d_in,
            blocks,
            orthonormal_rows: false,
            canonical: false,
            trace_preserving: false,
        })
    }

    /// Single-block (partially unitary) stack.
    pub fn single(block: RectMatrix<T>) -> Result<Self> {
        Self::new(vec![block])
    }

    pub fn n_s(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn block(&self, s: usize) -> &RectMatrix<T> {
        &self.blocks[s]
    }

    pub fn blocks(&self) -> &[RectMatrix<T>] {
        &self.blocks
    }

    /// Σ_s B_s B_sᵀ — the row Gram the orthonormality constraint targets.
    pub fn sum_bbt(&self) -> SymMatrix<T> {
        SymMatrix::from_fn(self.d_out, |i, j| {
            let mut acc = T::zero();
            for b in &self.blocks {
                for k in 0..self.d_in {
                    acc = acc + b[(i, k)] * b[(j, k)];
                }
            }
            acc
        })
    }

    /// Σ_s B_sᵀ B_s — the column Gram trace preservation targets.
    pub fn sum_btb(&self) -> SymMatrix<T> {
        SymMatrix::from_fn(self.d_in, |k, l| {
            let mut acc = T::zero();
            for b in &self.blocks {
                for j in 0..self.d_out {
                    acc = acc + b[(j, k)] * b[(j, l)];
                }
            }
            acc
        })
    }

    /// Tr B_s B_tᵀ, the Kraus-space Gram entry the canonical gauge zeroes
    /// for s ≠ t.
    pub fn cross_trace(&self, s: usize, t: usize) -> T {
        self.blocks[s].dot(&self.blocks[t])
    }

    /// Σ_{s,j,k} b² — the partial-constraint norm, D at the feasible point.
    pub fn frobenius_sq(&self) -> T {
        self.blocks.iter().map(|b| b.dot(b)).sum()
    }

    /// Flattens to the solver's vector layout: index (s,j,k) ↦ s·Dn + j·n + k.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.n_s() * self.d_out * self.d_in);
        for b in &self.blocks {
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn from_flat(d_out: usize, d_in: usize, n_s: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != d_out * d_in * n_s {
            return Err(Error::BadShape {
                context: format!("{} entries for an N_s={n_s} {d_out}x{d_in} stack", flat.len()),
            });
        }
        let mut blocks = Vec::with_capacity(n_s);
        for s in 0..n_s {
            let chunk = &flat[s * d_out * d_in..(s + 1) * d_out * d_in];
            blocks.push(RectMatrix::from_vec(d_out, d_in, chunk.to_vec())?);
        }
        Self::new(blocks)
    }

    /// Worst violation of each flagged constraint; `None` when no flag set.
    pub fn flag_violation(&self) -> Option<T> {
        let mut worst: Option<T> = None;
        let mut push = |v: T| worst = Some(worst.map_or(v, |w: T| w.max(v)));
        if self.orthonormal_rows {
            let g = self.sum_bbt();
            let mut v = T::zero();
            for i in 0..self.d_out {
                for j in 0..self.d_out {
                    let target = if i == j { T::one() } else { T::zero() };
                    v = v.max((g[(i, j)] - target).abs());
                }
            }
            push(v);
        }
        if self.canonical {
            let mut v = T::zero();
            for s in 0..self.n_s() {
                for t in 0..s {
                    v = v.max(self.cross_trace(s, t).abs());
                }
            }
            push(v);
        }
        if self.trace_preserving {
            let g = self.sum_btb();
            let mut v = T::zero();
            for i in 0..self.d_in {
                for j in 0..self.d_in {
                    let target = if i == j { T::one() } else { T::zero() };
                    v = v.max((g[(i, j)] - target).abs());
                }
            }
            push(v);
        }
        worst
    }

    /// Errors unless every set flag holds within [`FLAG_TOL`].
    pub fn validate_flags(&self) -> Result<()> {
        match self.flag_violation() {
            Some(v) if v > T::of(FLAG_TOL) => Err(Error::BadSpec {
                context: format!(
                    "flagged constraint violated by {:e}",
                    v.to_f64().unwrap_or(f64::NAN)
                ),
            }),
            _ => Ok(()),
        }
    }
}

/// Convex combination Σ |w_s|² U_s A U_sᵀ of unitary channels.
#[derive(Clone, Debug)]
pub struct MixedUnitaryChannel<T> {
    weights_sq: Vec<T>,
    unitaries: Vec<MappingOperator<T>>,
}

impl<T: Real> MixedUnitaryChannel<T> {
    /// `weights_sq` are the |w_s|² themselves; they must sum to 1 within
    /// 1e-12 and each unitary must be a single orthonormal-row block.
    pub fn new(weights_sq: Vec<T>, unitaries: Vec<MappingOperator<T>>) -> Result<Self> {
        if weights_sq.len() != unitaries.len() || weights_sq.is_empty() {
            return Err(Error::BadShape {
                context: "weights and unitaries must pair up nonempty".into(),
            });
        }
        if weights_sq.iter().any(|&w| w < T::zero() || !w.is_finite()) {
            return Err(Error::BadSpec { context: "squared weights must be nonnegative".into() });
        }
        let total: T = weights_sq.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-12) {
            return Err(Error::BadSpec {
                context: format!(
                    "squared weights sum to {:e}, not 1",
                    total.to_f64().unwrap_or(f64::NAN)
                ),
            });
        }
        for u in &unitaries {
            if u.n_s() != 1 {
                return Err(Error::BadShape {
                    context: "mixture members must be single-block operators".into(),
                });
            }
            if !u.orthonormal_rows {
                return Err(Error::BadSpec {
                    context: "mixture members must carry orthonormal rows".into(),
                });
            }
            u.validate_flags()?;
        }
        Ok(MixedUnitaryChannel { weights_sq, unitaries })
    }

    pub fn weights_sq(&self) -> &[T] {
        &self.weights_sq
    }

    pub fn unitaries(&self) -> &[MappingOperator<T>] {
        &self.unitaries
    }

    /// Σ |w_s|² U_s a U_sᵀ.
    pub fn apply(&self, a: &RectMatrix<T>) -> Result<RectMatrix<T>> {
        let mut out = RectMatrix::zeros(
            self.unitaries[0].d_out(),
            self.unitaries[0].d_out(),
        );
        for (w2, u) in self.weights_sq.iter().zip(&self.unitaries) {
            let term = apply_channel(u, a)?;
            out = out.add(&term.scale(*w2));
        }
        Ok(out)
    }
}

/// One observation: input state ρ (dim n), output state ϱ (dim D), weight ω.
#[derive(Clone, Debug)]
pub struct MappingRecord<T> {
    pub rho: DensityMatrix<T>,
    pub varrho: DensityMatrix<T>,
    pub omega: T,
}

/// Weighted list of observation pairs sharing dimensions (n, D).
#[derive(Clone, Debug)]
pub struct MappingDataset<T> {
    d_in: usize,
    d_out: usize,
    records: Vec<MappingRecord<T>>,
}

impl<T: Real> MappingDataset<T> {
    pub fn new(d_in: usize, d_out: usize, records: Vec<MappingRecord<T>>) -> Result<Self> {
        for (idx, r) in records.iter().enumerate() {
            if r.rho.dim() != d_in || r.varrho.dim() != d_out {
                return Err(Error::BadShape {
                    context: format!(
                        "record {idx} dims ({}, {}) vs dataset ({d_in}, {d_out})",
                        r.rho.dim(),
                        r.varrho.dim()
                    ),
                });
            }
            if r.omega <= T::zero() || !r.omega.is_finite() {
                return Err(Error::BadSpec {
                    context: format!("record {idx} weight must be positive"),
                });
            }
        }
        Ok(MappingDataset { d_in, d_out, records })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MappingRecord<T>] {
        &self.records
    }

    /// Σ ω — the observation count when all weights are 1.
    pub fn total_weight(&self) -> T {
        self.records.iter().map(|r| r.omega).sum()
    }
}

/// Rank-one-operator channel description: B_{jk} = 𝓜_{jk} |f_j⟩⟨x_k| over
/// orthonormal frames, with unit column norms Σ_j 𝓜²_{jk} = 1.
#[derive(Clone, Debug)]
pub struct RankOneChannelSpec<T> {
    basis_in: RectMatrix<T>,
    basis_out: RectMatrix<T>,
    m: RectMatrix<T>,
}

impl<T: Real> RankOneChannelSpec<T> {
    /// Frames hold their vectors as columns: `basis_in` is n×n, `basis_out`
    /// D×D, `m` is D×n.
    pub fn new(basis_in: RectMatrix<T>, basis_out: RectMatrix<T>, m: RectMatrix<T>) -> Result<Self> {
        let n = basis_in.rows;
        let d = basis_out.rows;
        if basis_in.cols != n || basis_out.cols != d {
            return Err(Error::BadSpec { context: "frames must be square".into() });
        }
        if (m.rows, m.cols) != (d, n) {
            return Err(Error::BadSpec {
                context: format!("m is {}x{}, want {d}x{n}", m.rows, m.cols),
            });
        }
        for (frame, name) in [(&basis_in, "input"), (&basis_out, "output")] {
            let gram = frame.transpose().matmul(frame);
            for i in 0..frame.rows {
                for j in 0..frame.rows {
                    let target = if i == j { T::one() } else { T::zero() };
                    if (gram[(i, j)] - target).abs() > T::of(FLAG_TOL) {
                        return Err(Error::BadSpec {
                            context: format!("{name} frame is not orthonormal"),
                        });
                    }
                }
            }
        }
        for k in 0..n {
            let norm: T = (0..d).map(|j| m[(j, k)] * m[(j, k)]).sum();
            if (norm - T::one()).abs() > T::of(FLAG_TOL) {
                return Err(Error::BadSpec {
                    context: format!(
                        "column {k} norm² is {:e}, not 1",
                        norm.to_f64().unwrap_or(f64::NAN)
                    ),
                });
            }
        }
        Ok(RankOneChannelSpec { basis_in, basis_out, m })
    }
}

// ---------------------------------------------------------------------------
// Random generation
// ---------------------------------------------------------------------------

/// Random rank-n_r density matrix: normalized sum of n_r Gaussian outer
/// products.
pub fn random_density<T: Real>(n: usize, n_r: usize, rng: &mut SplitMix64) -> Result<DensityMatrix<T>> {
    if n_r < 1 || n_r > n {
        return Err(Error::BadRank { rank: n_r, dim: n });
    }
    let vectors: Vec<Vec<T>> = (0..n_r)
        .map(|_| (0..n).map(|_| T::of(rng.normal())).collect())
        .collect();
    let mut acc = SymMatrix::from_fn(n, |i, j| {
        let mut s = T::zero();
        for v in &vectors {
            s = s + v[i] * v[j];
        }
        s
    });
    let trace = acc.trace();
    acc = SymMatrix::from_fn(n, |i, j| acc[(i, j)] / trace);
    DensityMatrix::new(acc)
}

/// Random partially unitary operator: a Gaussian d_out×d_in matrix with its
/// rows orthonormalized through the inverse square root of the row Gram.
pub fn random_partial_unitary<T: Real>(
    d_out: usize,
    d_in: usize,
    rng: &mut SplitMix64,
) -> Result<MappingOperator<T>> {
    if d_out > d_in {
        return Err(Error::BadShape {
            context: format!("partial unitary needs d_out ≤ d_in, got {d_out}x{d_in}"),
        });
    }
    let mut b = RectMatrix::from_fn(d_out, d_in, |_, _| T::of(rng.normal()));
    // Two symmetric-orthonormalization passes land within 1e-12 of exact.
    for _ in 0..2 {
        let gram = SymMatrix::new(&b.matmul(&b.transpose()))?;
        let w = matfun::inv_sqrt(&gram, T::of(matfun::DEGENERACY_TOL))?;
        b = w.to_rect().matmul(&b);
    }
    let mut op = MappingOperator::single(b)?;
    op.orthonormal_rows = true;
    op.validate_flags()?;
    Ok(op)
}

/// Random trace-preserving Kraus stack: Gaussian blocks followed by the
/// trace-preserving adjustment.
///
/// Requires `n_s ≥ min_kraus_rank(d_out, d_in)` — below it the column Gram
/// adjustment is declared degenerate.
pub fn random_kraus_channel<T: Real>(
    d_out: usize,
    d_in: usize,
    n_s: usize,
    rng: &mut SplitMix64,
) -> Result<MappingOperator<T>> {
    let blocks: Vec<RectMatrix<T>> = (0..n_s)
        .map(|_| RectMatrix::from_fn(d_out, d_in, |_, _| T::of(rng.normal())))
        .collect();
    let raw = MappingOperator::new(blocks)?;
    let mut adjusted = crate::qcqp::adjust_trace_preserving(&raw)?;
    adjusted.trace_preserving = true;
    adjusted.validate_flags()?;
    Ok(adjusted)
}

// ---------------------------------------------------------------------------
// Channels
// ---------------------------------------------------------------------------

/// Σ_s B_s · a · B_sᵀ. Symmetric inputs produce exactly symmetric outputs.
pub fn apply_channel<T: Real>(b: &MappingOperator<T>, a: &RectMatrix<T>) -> Result<RectMatrix<T>> {
    if a.rows != b.d_in() || a.cols != b.d_in() {
        return Err(Error::BadShape {
            context: format!("channel input {}x{}, want {0}x{0}", a.rows, b.d_in()),
        });
    }
    let d = b.d_out();
    let mut out = RectMatrix::zeros(d, d);
    for blk in b.blocks() {
        let ba = blk.matmul(a);
        let term = ba.matmul(&blk.transpose());
        out = out.add(&term);
    }
    let symmetric_input = (0..a.rows).all(|i| (0..i).all(|j| a[(i, j)] == a[(j, i)]));
    if symmetric_input {
        out = SymMatrix::new(&out)?.to_rect();
    }
    Ok(out)
}

/// The trace-calculating channel: D = 1, N_s = n, B_s = |f_0⟩⟨x_s| over the
/// standard basis, so the output is always [[Tr a]].
pub fn trace_channel<T: Real>(n: usize) -> Result<MappingOperator<T>> {
    let blocks: Vec<RectMatrix<T>> = (0..n)
        .map(|s| {
            RectMatrix::from_fn(1, n, |_, k| if k == s { T::one() } else { T::zero() })
        })
        .collect();
    let mut op = MappingOperator::new(blocks)?;
    op.trace_preserving = true;
    op.validate_flags()?;
    Ok(op)
}

/// Channel built from rank-one operators B_{jk} = 𝓜_{jk}|f_j⟩⟨x_k|; the unit
/// column norms of 𝓜 make it trace preserving.
pub fn rank_one_channel<T: Real>(spec: &RankOneChannelSpec<T>) -> Result<MappingOperator<T>> {
    let d = spec.basis_out.rows;
    let n = spec.basis_in.rows;
    let mut blocks = Vec::with_capacity(d * n);
    for j in 0..d {
        for k in 0..n {
            let coeff = spec.m[(j, k)];
            blocks.push(RectMatrix::from_fn(d, n, |r, c| {
                coeff * spec.basis_out[(r, j)] * spec.basis_in[(c, k)]
            }));
        }
    }
    let mut op = MappingOperator::new(blocks)?;
    op.trace_preserving = true;
    op.validate_flags()?;
    Ok(op)
}

/// Least Kraus-stack depth admitting trace preservation: max(1, d_in − d_out + 1).
pub fn min_kraus_rank(d_out: usize, d_in: usize) -> usize {
    if d_in > d_out {
        d_in - d_out + 1
    } else {
        1
    }
}

// ---------------------------------------------------------------------------
// Closeness measures
// ---------------------------------------------------------------------------

/// Per-record closeness measures between the observed output ϱ and the
/// channel output σ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClosenessKind {
    /// Tr ϱσ — probability of measuring σ in state ϱ.
    RhoSigma,
    /// Tr √(√ϱ σ √ϱ) — the proper fidelity.
    Prop,
    /// Tr √ϱ √σ — the overlap form; coincides with `Prop` only for
    /// commuting arguments, so it is exposed separately.
    PropOverlap,
    /// Tr ϱσ / (‖ϱ‖_F ‖σ‖_F) — correlation-style normalization.
    Corr,
    /// Tr ϱσ / (‖ϱ‖_F ‖ρ‖_F) — σ-denominator replaced by the input state.
    Vec,
    /// Tr ϱσ / Tr ϱ² — output-purity normalization.
    Nrho2,
    /// S(ϱ‖σ) = Tr ϱ ln ϱ − Tr ϱ ln σ — Kullback–Leibler divergence
    /// (lower is closer; 0 iff ϱ = σ).
    Kl,
}

fn trace_product<T: Real>(a: &SymMatrix<T>, b: &RectMatrix<T>) -> T {
    let n = a.dim();
    let mut acc = T::zero();
    for i in 0..n {
        for j in 0..n {
            acc = acc + a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Closeness of the channel output `sigma` to the observed state `varrho`.
///
/// `rho` is the channel *input*, needed only by [`ClosenessKind::Vec`].
/// `sigma` may be any square matrix (it need not be normalized); kinds that
/// take a square root or logarithm of it require it PSD within tolerance.
pub fn closeness<T: Real>(
    kind: ClosenessKind,
    varrho: &DensityMatrix<T>,
    sigma: &RectMatrix<T>,
    rho: Option<&DensityMatrix<T>>,
) -> Result<T> {
    let d = varrho.dim();
    if sigma.rows != d || sigma.cols != d {
        return Err(Error::BadShape {
            context: format!("sigma {}x{} vs varrho dim {d}", sigma.rows, sigma.cols),
        });
    }
    match kind {
        ClosenessKind::RhoSigma => Ok(trace_product(varrho.matrix(), sigma)),
        ClosenessKind::Prop => {
            let r = varrho.sqrt()?;
            let inner = SymMatrix::new(&r.to_rect().matmul(sigma).matmul(&r.to_rect()))?;
            Ok(matfun::sqrtm_psd(&inner, T::zero())?.trace())
        }
        ClosenessKind::PropOverlap => {
            let r = varrho.sqrt()?;
            let s = matfun::sqrtm_psd(&SymMatrix::new(sigma)?, T::zero())?;
            Ok(r.to_rect().dot(&s.to_rect()))
        }
        ClosenessKind::Corr => {
            let num = trace_product(varrho.matrix(), sigma);
            let den = varrho.matrix().frobenius_norm() * sigma.frobenius_norm();
            Ok(num / den)
        }
        ClosenessKind::Vec => {
            let rho = rho.ok_or_else(|| Error::BadShape {
                context: "closeness(vec) needs the channel input state".into(),
            })?;
            let num = trace_product(varrho.matrix(), sigma);
            let den = varrho.matrix().frobenius_norm() * rho.matrix().frobenius_norm();
            Ok(num / den)
        }
        ClosenessKind::Nrho2 => {
            let num = trace_product(varrho.matrix(), sigma);
            Ok(num / varrho.purity())
        }
        ClosenessKind::Kl => {
            let floor = T::of(LOG_FLOOR);
            let ln_varrho = matfun::logm_psd(varrho.matrix(), floor)?;
            let ln_sigma = matfun::logm_psd(&SymMatrix::new(sigma)?, floor)?;
            let first = trace_product(varrho.matrix(), &ln_varrho.to_rect());
            let second = trace_product(varrho.matrix(), &ln_sigma.to_rect());
            Ok(first - second)
        }
    }
}

/// True when ϱ carries weight (> 1e-10) on eigendirections where σ is
/// numerically zero — the situation the divergence clamp papers over.
pub fn kl_support_violated<T: Real>(
    varrho: &DensityMatrix<T>,
    sigma: &RectMatrix<T>,
) -> Result<bool> {
    let spec = matfun::eigh(&SymMatrix::new(sigma)?)?;
    let n = varrho.dim();
    for (idx, &eig) in spec.eigenvalues.iter().enumerate() {
        if eig > T::of(LOG_FLOOR) {
            continue;
        }
        let v = spec.eigenvectors.column(idx);
        let mut weight = T::zero();
        for i in 0..n {
            for j in 0..n {
                weight = weight + v[i] * varrho.matrix()[(i, j)] * v[j];
            }
        }
        if weight > T::of(1e-10) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Dataset-level fidelity flavors: the per-record closeness kinds plus the
/// two proxies that transform the input state before applying the channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FidelityKind {
    RhoSigma,
    /// Tr √ϱ · 𝓑(√ρ) — agrees with the proper fidelity when the data come
    /// from a single unitary.
    Sqrt,
    Vec,
    Nrho2,
    Prop,
    PropOverlap,
    Corr,
    Kl,
    /// Tr ϱ · 𝓑(ln ρ) — the quadratic form of the entropy superoperator.
    LogEntropy,
}

/// Total fidelity 𝓕 = Σ_l ω^{(l)} F(ϱ^{(l)}, 𝓑(ρ^{(l)})) over the dataset.
pub fn total_fidelity_dataset<T: Real>(
    kind: FidelityKind,
    dataset: &MappingDataset<T>,
    channel: &MappingOperator<T>,
) -> Result<T> {
    if channel.d_in() != dataset.d_in() || channel.d_out() != dataset.d_out() {
        return Err(Error::BadShape {
            context: format!(
                "channel {}x{} vs dataset ({}, {})",
                channel.d_out(),
                channel.d_in(),
                dataset.d_out(),
                dataset.d_in()
            ),
        });
    }
    let mut total = T::zero();
    for record in dataset.records() {
        let value = match kind {
            FidelityKind::Sqrt => {
                let sqrt_in = matfun::sqrtm_psd(record.rho.matrix(), T::zero())?;
                let mapped = apply_channel(channel, &sqrt_in.to_rect())?;
                trace_product(&record.varrho.sqrt()?, &mapped)
            }
            FidelityKind::LogEntropy => {
                let log_in = matfun::logm_psd(record.rho.matrix(), T::of(LOG_FLOOR))?;
                let mapped = apply_channel(channel, &log_in.to_rect())?;
                trace_product(record.varrho.matrix(), &mapped)
            }
            plain => {
                let ckind = match plain {
                    FidelityKind::RhoSigma => ClosenessKind::RhoSigma,
                    FidelityKind::Vec => ClosenessKind::Vec,
                    FidelityKind::Nrho2 => ClosenessKind::Nrho2,
                    FidelityKind::Prop => ClosenessKind::Prop,
                    FidelityKind::PropOverlap => ClosenessKind::PropOverlap,
                    FidelityKind::Corr => ClosenessKind::Corr,
                    FidelityKind::Kl => ClosenessKind::Kl,
                    FidelityKind::Sqrt | FidelityKind::LogEntropy => unreachable!(),
                };
                let sigma = apply_channel(channel, &record.rho.matrix().to_rect())?;
                closeness(ckind, &record.varrho, &sigma, Some(&record.rho))?
            }
        };
        total = total + record.omega * value;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Dataset serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RecordJson {
    omega: f64,
    rho: Vec<Vec<f64>>,
    varrho: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    n: usize,
    #[serde(rename = "D")]
    d: usize,
    records: Vec<RecordJson>,
}

fn matrix_to_nested<T: Real>(m: &SymMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.dim())
        .map(|i| (0..m.dim()).map(|j| m[(i, j)].to_f64().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn nested_to_matrix<T: Real>(rows: &[Vec<f64>]) -> Result<SymMatrix<T>> {
    let converted: Vec<Vec<T>> = rows
        .iter()
        .map(|row| row.iter().map(|&x| T::of(x)).collect())
        .collect();
    let rect = RectMatrix::from_rows(&converted)?;
    SymMatrix::new(&rect)
}

impl<T: Real> MappingDataset<T> {
    /// Serializes to the interchange JSON document
    /// `{"n":, "D":, "records": [{"omega":, "rho":, "varrho":}]}`.
    pub fn to_json_string(&self) -> String {
        let doc = DatasetJson {
            n: self.d_in,
            d: self.d_out,
            records: self
                .records
                .iter()
                .map(|r| RecordJson {
                    omega: r.omega.to_f64().unwrap_or(f64::NAN),
                    rho: matrix_to_nested(r.rho.matrix()),
                    varrho: matrix_to_nested(r.varrho.matrix()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("dataset serialization cannot fail")
    }

    /// Parses and validates the interchange document; inputs are
    /// symmetrized on load and rejected if they fail density validation.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: DatasetJson = serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<string>".into(),
            source,
        })?;
        let mut records = Vec::with_capacity(doc.records.len());
        for r in &doc.records {
            records.push(MappingRecord {
                rho: DensityMatrix::new(nested_to_matrix(&r.rho)?)?,
                varrho: DensityMatrix::new(nested_to_matrix(&r.varrho)?)?,
                omega: T::of(r.omega),
            });
        }
        MappingDataset::new(doc.n, doc.d, records)
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
