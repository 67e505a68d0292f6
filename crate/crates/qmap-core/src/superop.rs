//! The superoperator S_{jk;j'k'}: a rank-4 symmetric tensor built from a
//! dataset so that the total fidelity becomes the quadratic form
//! 𝓕 = Σ_s ⟨B_s|S|B_s⟩ over mapping operators.
//!
//! The tensor is stored as a dense symmetric (Dn)×(Dn) matrix over the
//! flattened index (j,k) ↦ j·n + k; at desk scale (D = n ≤ 50) this keeps
//! every downstream step ordinary dense linear algebra.

use serde::{Deserialize, Serialize};

use crate::matfun::{self, RectMatrix, SymMatrix};
use crate::states::{MappingDataset, MappingOperator, MappingRecord, LOG_FLOOR};
use crate::{Error, Real, Result};

/// Relative eigenvalue threshold above which a state stops counting as pure.
pub const PURE_TOL: f64 = 1e-8;

/// Which quadratic fidelity proxy the tensor encodes.
///
/// All kinds share the pattern S = Σ_l w^{(l)} A^{(l)} ⊗ B^{(l)} with
/// per-record transforms of (ϱ, ρ) and weight adjustments of ω.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuperopKind {
    /// ϱ ⊗ ρ with weight ω — the plain Tr ϱσ proxy.
    Plain,
    /// √ϱ ⊗ √ρ — exact proper fidelity for single-unitary channels.
    Sqrt,
    /// ϱ ⊗ ln ρ — the divergence-based proxy; 𝓕 is no longer an
    /// observation count.
    LogEntropy,
    /// ϱ ⊗ ρ with weight ω/(‖ϱ‖_F ‖ρ‖_F).
    VecNormalized,
    /// ϱ ⊗ ρ with weight ω/Tr ϱ².
    Nrho2Normalized,
    /// Rank-1 records only: Σ ω (f⊗x)(f⊗x)ᵀ over the underlying vectors.
    PureVectors,
    /// ϱ^p ⊗ ρ^q. The fidelity-motivated family has p + q = 1 (p = q = ½
    /// is `Sqrt`, p = q = 1 is `Plain`); any finite p, q ≥ 0 is accepted
    /// so those reductions stay inside the type.
    Power { p: f64, q: f64 },
}

impl SuperopKind {
    /// Whether ⟨B|S|B⟩ retains the meaning of a (weighted) observation
    /// count on exact data.
    pub fn counts_observations(&self) -> bool {
        !matches!(self, SuperopKind::LogEntropy)
    }
}

/// Symmetric (Dn)×(Dn) matrix form of the rank-4 tensor.
#[derive(Clone, Debug)]
pub struct Superoperator<T> {
    d_out: usize,
    d_in: usize,
    mat: SymMatrix<T>,
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

struct KahanVec<T> {
    sum: Vec<T>,
    comp: Vec<T>,
}

impl<T: Real> KahanVec<T> {
    fn new(len: usize) -> Self {
        KahanVec { sum: vec![T::zero(); len], comp: vec![T::zero(); len] }
    }

    fn add(&mut self, idx: usize, value: T) {
        let y = value - self.comp[idx];
        let t = self.sum[idx] + y;
        self.comp[idx] = (t - self.sum[idx]) - y;
        self.sum[idx] = t;
    }
}

/// Largest-eigenvalue dyadic factor √λ_max·v of a rank-1 state; errors when
/// a second eigenvalue carries relative weight above [`PURE_TOL`].
fn principal_vector<T: Real>(m: &SymMatrix<T>) -> Result<Vec<T>> {
    let spec = matfun::eigh(m)?;
    let dim = m.dim();
    let top = spec.eigenvalues[dim - 1];
    if dim > 1 {
        let second = spec.eigenvalues[dim - 2].abs();
        if second > T::of(PURE_TOL) * top.max(T::one()) {
            return Err(Error::NotPure {
                second_eig: second.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let scale = top.max(T::zero()).sqrt();
    Ok(spec.eigenvectors.column(dim - 1).iter().map(|&x| scale * x).collect())
}

fn matrix_power<T: Real>(m: &SymMatrix<T>, p: f64) -> Result<SymMatrix<T>> {
    let spec = matfun::eigh(m)?;
    let max_abs = spec
        .eigenvalues
        .iter()
        .fold(T::zero(), |acc, &l| acc.max(l.abs()));
    if let Some(&min) = spec.eigenvalues.first() {
        if min < -T::of(1e-8) * max_abs.max(T::one()) {
            return Err(Error::NotPsd { min_eig: min.to_f64().unwrap_or(f64::NAN) });
        }
    }
    // Eigenvalues at noise level are exact zeros: fractional powers would
    // otherwise inflate them (√1e-16 = 1e-8) on rank-deficient states.
    let cut = T::of(1e-14) * max_abs;
    let powered: Vec<T> = spec
        .eigenvalues
        .iter()
        .map(|&l| if l <= cut { T::zero() } else { l.powf(T::of(p)) })
        .collect();
    let v = &spec.eigenvectors;
    Ok(SymMatrix::from_fn(m.dim(), |i, j| {
        let mut acc = T::zero();
        for (idx, &lp) in powered.iter().enumerate() {
            acc = acc + v[(i, idx)] * lp * v[(j, idx)];
        }
        acc
    }))
}

/// Per-record (output factor, input factor, weight) for the tensor sum.
fn record_factors<T: Real>(
    record: &MappingRecord<T>,
    kind: SuperopKind,
) -> Result<(SymMatrix<T>, SymMatrix<T>, T)> {
    let varrho = record.varrho.matrix();
    let rho = record.rho.matrix();
    match kind {
        SuperopKind::Plain => Ok((varrho.clone(), rho.clone(), record.omega)),
        SuperopKind::Sqrt => Ok((
            matfun::sqrtm_psd(varrho, T::zero())?,
            matfun::sqrtm_psd(rho, T::zero())?,
            record.omega,
        )),
        SuperopKind::LogEntropy => Ok((
            varrho.clone(),
            matfun::logm_psd(rho, T::of(LOG_FLOOR))?,
            record.omega,
        )),
        SuperopKind::VecNormalized => {
            let den = varrho.frobenius_norm() * rho.frobenius_norm();
            Ok((varrho.clone(), rho.clone(), record.omega / den))
        }
        SuperopKind::Nrho2Normalized => {
            Ok((varrho.clone(), rho.clone(), record.omega / record.varrho.purity()))
        }
        SuperopKind::Power { p, q } => Ok((
            matrix_power(varrho, p)?,
            matrix_power(rho, q)?,
            record.omega,
        )),
        SuperopKind::PureVectors => unreachable!("handled by the caller"),
    }
}

/// Builds S = Σ_l w^{(l)} A^{(l)}_{jj'} B^{(l)}_{kk'} over the dataset.
///
/// Records are accumulated in dataset order with Kahan compensation, so the
/// result is reproducible to well under 1e-12 regardless of magnitudes.
/// An empty dataset yields the zero tensor.
pub fn build<T: Real>(dataset: &MappingDataset<T>, kind: SuperopKind) -> Result<Superoperator<T>> {
    if let SuperopKind::Power { p, q } = kind {
        if !p.is_finite() || !q.is_finite() || p < 0.0 || q < 0.0 {
            return Err(Error::BadSpec {
                context: format!("power kind needs finite p, q ≥ 0, got ({p}, {q})"),
            });
        }
    }
    let d = dataset.d_out();
    let n = dataset.d_in();
    let dim = d * n;
    let mut acc = KahanVec::new(dim * dim);
    for record in dataset.records() {
        if kind == SuperopKind::PureVectors {
            let f = principal_vector(record.varrho.matrix())?;
            let x = principal_vector(record.rho.matrix())?;
            let y: Vec<T> = (0..dim).map(|idx| f[idx / n] * x[idx % n]).collect();
            for row in 0..dim {
                for col in 0..dim {
                    acc.add(row * dim + col, record.omega * y[row] * y[col]);
                }
            }
        } else {
            let (a, b, w) = record_factors(record, kind)?;
            for j in 0..d {
                for k in 0..n {
                    let row = j * n + k;
                    for jp in 0..d {
                        let a_jj = w * a[(j, jp)];
                        if a_jj == T::zero() {
                            continue;
                        }
                        for kp in 0..n {
                            acc.add(row * dim + jp * n + kp, a_jj * b[(k, kp)]);
                        }
                    }
                }
            }
        }
    }
    let rect = RectMatrix::from_vec(dim, dim, acc.sum)?;
    Ok(Superoperator { d_out: d, d_in: n, mat: SymMatrix::new(&rect)? })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

impl<T: Real> Superoperator<T> {
    /// Wraps an existing (Dn)×(Dn) symmetric matrix as a tensor.
    pub fn from_matrix(d_out: usize, d_in: usize, mat: SymMatrix<T>) -> Result<Self> {
        if mat.dim() != d_out * d_in {
            return Err(Error::BadShape {
                context: format!("matrix dim {} vs D·n = {}", mat.dim(), d_out * d_in),
            });
        }
        Ok(Superoperator { d_out, d_in, mat })
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Flattened dimension D·n.
    pub fn dim(&self) -> usize {
        self.d_out * self.d_in
    }

    pub fn matrix(&self) -> &SymMatrix<T> {
        &self.mat
    }

    fn check_operator(&self, b: &MappingOperator<T>) -> Result<()> {
        if b.d_out() != self.d_out || b.d_in() != self.d_in {
            return Err(Error::BadShape {
                context: format!(
                    "operator {}x{} vs tensor {}x{}",
                    b.d_out(),
                    b.d_in(),
                    self.d_out,
                    self.d_in
                ),
            });
        }
        Ok(())
    }

    /// S acting on a flattened operator vector.
    pub fn apply_flat(&self, u: &[T]) -> Result<Vec<T>> {
        if u.len() != self.dim() {
            return Err(Error::BadShape {
                context: format!("vector length {} vs tensor dim {}", u.len(), self.dim()),
            });
        }
        Ok(self.mat.matvec(u))
    }

    /// (S𝒰)_{jk} = Σ_{j'k'} S_{jk;j'k'} u_{j'k'} for a single-block operator.
    pub fn apply(&self, u: &MappingOperator<T>) -> Result<MappingOperator<T>> {
        self.check_operator(u)?;
        if u.n_s() != 1 {
            return Err(Error::BadShape {
                context: format!("apply takes a single-block operator, got N_s = {}", u.n_s()),
            });
        }
        let out = self.apply_flat(&u.flatten())?;
        MappingOperator::from_flat(self.d_out, self.d_in, 1, &out)
    }

    /// 𝓕 = Σ_s ⟨B_s|S|B_s⟩.
    pub fn total_fidelity(&self, b: &MappingOperator<T>) -> Result<T> {
        self.check_operator(b)?;
        let mut total = T::zero();
        for s in 0..b.n_s() {
            let u = b.block(s).data();
            let su = self.mat.matvec(u);
            total = total + u.iter().zip(&su).map(|(&x, &y)| x * y).sum();
        }
        Ok(total)
    }

    /// Bilinear form ⟨A|S|B⟩ over single-block operators; symmetric in its
    /// arguments.
    pub fn inner(&self, a: &MappingOperator<T>, b: &MappingOperator<T>) -> Result<T> {
        self.check_operator(a)?;
        self.check_operator(b)?;
        if a.n_s() != 1 || b.n_s() != 1 {
            return Err(Error::BadShape {
                context: "inner takes single-block operators".into(),
            });
        }
        let sb = self.mat.matvec(b.block(0).data());
        Ok(a.block(0).data().iter().zip(&sb).map(|(&x, &y)| x * y).sum())
    }

    /// Rank-limited expansion S ≈ Σ_s (1/F^{[s]}) |S𝒰^{[s]}⟩⟨𝒰^{[s]}S|.
    ///
    /// With a full basis of Dn levels the Gram ⟨𝒰^{[s]}|S_approx|𝒰^{[s']}⟩
    /// reproduces the exact one. Levels are (operator, fidelity) pairs;
    /// a fidelity at or below 1e-12·(1 + max|F|) is rejected.
    pub fn approx_from_hierarchy(
        &self,
        levels: &[(MappingOperator<T>, T)],
    ) -> Result<Superoperator<T>> {
        let dim = self.dim();
        let f_scale = levels
            .iter()
            .fold(T::zero(), |acc, &(_, f)| acc.max(f.abs()));
        let tol = T::of(1e-12) * (T::one() + f_scale);
        let mut acc = RectMatrix::zeros(dim, dim);
        for (idx, (u, f)) in levels.iter().enumerate() {
            if *f <= tol {
                return Err(Error::BadLevel {
                    context: format!(
                        "level {idx} fidelity {:e} at or below tolerance",
                        f.to_f64().unwrap_or(f64::NAN)
                    ),
                });
            }
            self.check_operator(u)?;
            let su = self.apply_flat(&u.flatten())?;
            for row in 0..dim {
                let scaled = su[row] / *f;
                for col in 0..dim {
                    acc[(row, col)] = acc[(row, col)] + scaled * su[col];
                }
            }
        }
        Ok(Superoperator { d_out: self.d_out, d_in: self.d_in, mat: SymMatrix::new(&acc)? })
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SuperopJson {
    #[serde(rename = "D")]
    d: usize,
    n: usize,
    kind: SuperopKind,
    data: Vec<f64>,
}

impl<T: Real> Superoperator<T> {
    /// Serializes to `{"D":, "n":, "kind":, "data": [row-major]}`.
    pub fn to_json_string(&self, kind: SuperopKind) -> String {
        let doc = SuperopJson {
            d: self.d_out,
            n: self.d_in,
            kind,
            data: self.mat.data().iter().map(|&x| x.to_f64().unwrap_or(f64::NAN)).collect(),
        };
        serde_json::to_string(&doc).expect("tensor serialization cannot fail")
    }

    /// Parses the interchange document; returns the tensor and its recorded
    /// kind tag.
    pub fn from_json_str(text: &str) -> Result<(Self, SuperopKind)> {
        let doc: SuperopJson = serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<string>".into(),
            source,
        })?;
        let dim = doc.d * doc.n;
        if doc.data.len() != dim * dim {
            return Err(Error::BadShape {
                context: format!("{} entries for a {dim}x{dim} tensor", doc.data.len()),
            });
        }
        let rect = RectMatrix::from_vec(dim, dim, doc.data.iter().map(|&x| T::of(x)).collect())?;
        let mat = SymMatrix::new(&rect)?;
        Ok((Superoperator { d_out: doc.d, d_in: doc.n, mat }, doc.kind))
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
