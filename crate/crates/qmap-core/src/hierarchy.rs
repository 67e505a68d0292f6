//! Hierarchy of partially unitary operators: repeated single-block solves
//! where each new level is forced S-orthogonal to all previous ones via
//! external constraint rows, plus the expansion weights that turn the
//! levels into a mixed unitary channel.

use serde::{Deserialize, Serialize};

use crate::matfun::{RectMatrix, SymMatrix};
use crate::qcqp::{self, ConstraintMode, ConstraintSet, SolverConfig};
use crate::states::{MappingOperator, MixedUnitaryChannel};
use crate::superop::Superoperator;
use crate::{Error, Real, Result};

/// Levels beyond this count get clamped (with a warning): deeper stacks
/// stop carrying usable fidelity long before the Dn ceiling.
pub const LEVEL_CEILING: usize = 7;

/// One solved level: the operator 𝒰^{[s]}, its multiplier matrix λ^{[s]},
/// and the fidelity F^{[s]} = Tr λ^{[s]} = ⟨𝒰^{[s]}|S|𝒰^{[s]}⟩.
#[derive(Clone, Debug)]
pub struct HierarchyLevel<T> {
    pub u: MappingOperator<T>,
    pub lambda: SymMatrix<T>,
    pub fidelity: T,
}

/// Ordered levels of S-orthogonal partially unitary operators.
#[derive(Clone, Debug)]
pub struct Hierarchy<T> {
    d_out: usize,
    d_in: usize,
    levels: Vec<HierarchyLevel<T>>,
}

impl<T: Real> Hierarchy<T> {
    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn levels(&self) -> &[HierarchyLevel<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Expansion coefficients w_s of an operator over the hierarchy.
#[derive(Clone, Debug)]
pub struct HierarchyWeights<T> {
    pub w: Vec<T>,
}

/// Which orthogonality the external rows impose between levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintVariant {
    /// 0 = ⟨𝒰|S|𝒰^{[s']}⟩ — the default; produces the F^{[s]}δ_{ss'} Gram.
    SOrthogonal,
    /// 0 = ⟨𝒰|𝒰^{[s']}⟩ — plain orthogonality, the variant the
    /// density-tensor expansion needs.
    PlainOrthogonal,
}

/// A level failed: carries everything built so far.
#[derive(Debug)]
pub struct HierarchyFailure<T> {
    pub partial: Hierarchy<T>,
    pub failed_level: usize,
    pub error: Error,
}

impl<T> From<HierarchyFailure<T>> for Error {
    fn from(failure: HierarchyFailure<T>) -> Self {
        failure.error
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

/// Builds `levels` hierarchy levels with the default S-orthogonal
/// constraint variant.
pub fn build_hierarchy<T: Real>(
    s: &Superoperator<T>,
    levels: usize,
    config: &SolverConfig<T>,
) -> std::result::Result<Hierarchy<T>, HierarchyFailure<T>> {
    build_hierarchy_with_variant(s, levels, config, ConstraintVariant::SOrthogonal)
}

/// Runs single-block solves level by level; level s carries one external
/// row per prior level, built from the exact tensor (never from an
/// approximation). A level that fails to converge aborts the build and
/// returns the completed prefix alongside the error.
pub fn build_hierarchy_with_variant<T: Real>(
    s: &Superoperator<T>,
    levels: usize,
    config: &SolverConfig<T>,
    variant: ConstraintVariant,
) -> std::result::Result<Hierarchy<T>, HierarchyFailure<T>> {
    let empty = Hierarchy { d_out: s.d_out(), d_in: s.d_in(), levels: Vec::new() };
    let fail = |partial: Hierarchy<T>, level: usize, error: Error| HierarchyFailure {
        partial,
        failed_level: level,
        error,
    };

    if levels == 0 {
        return Err(fail(empty, 0, Error::BadLevel { context: "need at least one level".into() }));
    }
    if config.constraint_mode != ConstraintMode::Orthogonality {
        return Err(fail(
            empty,
            0,
            Error::BadConfig {
                context: "hierarchy levels are orthogonality-constrained solves".into(),
            },
        ));
    }
    let mut effective = levels;
    if effective > LEVEL_CEILING {
        eprintln!(
            "hierarchy: clamping {levels} requested levels to {LEVEL_CEILING}; \
             deeper levels stop being meaningful"
        );
        effective = LEVEL_CEILING;
    }
    if effective > s.dim() {
        return Err(fail(
            empty,
            0,
            Error::BadLevel {
                context: format!("{effective} levels exceed the Dn = {} ceiling", s.dim()),
            },
        ));
    }

    let mut built: Vec<HierarchyLevel<T>> = Vec::with_capacity(effective);
    for level in 0..effective {
        let mut external = ConstraintSet::empty();
        for prior in &built {
            let row = match variant {
                ConstraintVariant::SOrthogonal => match s.apply_flat(&prior.u.flatten()) {
                    Ok(row) => row,
                    Err(error) => {
                        return Err(fail(
                            Hierarchy { d_out: s.d_out(), d_in: s.d_in(), levels: built },
                            level,
                            error,
                        ))
                    }
                },
                ConstraintVariant::PlainOrthogonal => prior.u.flatten(),
            };
            if let Err(error) = external.push(row, qcqp::Provenance::External) {
                return Err(fail(
                    Hierarchy { d_out: s.d_out(), d_in: s.d_in(), levels: built },
                    level,
                    error,
                ));
            }
        }

        let solution = match qcqp::solve(s, 1, config, &external) {
            Ok(solution) => solution,
            Err(error) => {
                return Err(fail(
                    Hierarchy { d_out: s.d_out(), d_in: s.d_in(), levels: built },
                    level,
                    error,
                ))
            }
        };
        if !solution.converged {
            return Err(fail(
                Hierarchy { d_out: s.d_out(), d_in: s.d_in(), levels: built },
                level,
                Error::NotConverged {
                    context: format!(
                        "level {level} stalled after {} iterations at 𝓕 = {:e}, μ = {:e}",
                        solution.iterations,
                        solution.fidelity.to_f64().unwrap_or(f64::NAN),
                        solution.mu_selected.to_f64().unwrap_or(f64::NAN)
                    ),
                },
            ));
        }
        built.push(HierarchyLevel {
            u: solution.b,
            lambda: solution.multipliers.lambda,
            fidelity: solution.fidelity,
        });
    }

    Ok(Hierarchy { d_out: s.d_out(), d_in: s.d_in(), levels: built })
}

// ---------------------------------------------------------------------------
// Weights and channel assembly
// ---------------------------------------------------------------------------

/// w_s = ⟨V|S|𝒰^{[s]}⟩ / ⟨𝒰^{[s]}|S|𝒰^{[s]}⟩. When V lies in the level
/// span, ⟨V|S|V⟩ = Σ_s w_s² F^{[s]} recovers its fidelity.
pub fn weights_from_operator<T: Real>(
    h: &Hierarchy<T>,
    s: &Superoperator<T>,
    v: &MappingOperator<T>,
) -> Result<HierarchyWeights<T>> {
    if h.is_empty() {
        return Err(Error::BadLevel { context: "weights need at least one level".into() });
    }
    let mut w = Vec::with_capacity(h.len());
    for (idx, level) in h.levels().iter().enumerate() {
        if !(level.fidelity > T::zero()) {
            return Err(Error::BadLevel {
                context: format!(
                    "level {idx} fidelity {:e} is not positive",
                    level.fidelity.to_f64().unwrap_or(f64::NAN)
                ),
            });
        }
        w.push(s.inner(v, &level.u)? / level.fidelity);
    }
    Ok(HierarchyWeights { w })
}

/// Squares and renormalizes the weights, then pairs them with the level
/// operators as a mixed unitary channel.
pub fn to_mixed_unitary<T: Real>(
    h: &Hierarchy<T>,
    weights: &HierarchyWeights<T>,
) -> Result<MixedUnitaryChannel<T>> {
    if weights.w.len() != h.len() {
        return Err(Error::BadShape {
            context: format!("{} weights for {} levels", weights.w.len(), h.len()),
        });
    }
    let total: T = weights.w.iter().map(|&w| w * w).sum();
    if !(total > T::zero()) {
        return Err(Error::ZeroWeights);
    }
    let weights_sq: Vec<T> = weights.w.iter().map(|&w| w * w / total).collect();
    let unitaries: Vec<MappingOperator<T>> =
        h.levels().iter().map(|level| level.u.clone()).collect();
    MixedUnitaryChannel::new(weights_sq, unitaries)
}

/// Upper bound on the number of mixed-unitary terms reachable from a
/// Kraus rank k: k² − k + 1.
pub fn mixed_unitary_rank_bound(kraus_rank: usize) -> usize {
    kraus_rank * kraus_rank - kraus_rank + 1
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LevelJson {
    u: Vec<f64>,
    lambda: Vec<f64>,
    fidelity: f64,
}

#[derive(Serialize, Deserialize)]
struct HierarchyJson {
    #[serde(rename = "D")]
    d: usize,
    n: usize,
    levels: Vec<LevelJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
}

impl<T: Real> Hierarchy<T> {
    /// Serializes levels (operators and λ row-major), fidelities, and the
    /// optional weight vector.
    pub fn to_json_string(&self, weights: Option<&HierarchyWeights<T>>) -> String {
        let to_f64 = |x: &T| x.to_f64().unwrap_or(f64::NAN);
        let doc = HierarchyJson {
            d: self.d_out,
            n: self.d_in,
            levels: self
                .levels
                .iter()
                .map(|level| LevelJson {
                    u: level.u.flatten().iter().map(to_f64).collect(),
                    lambda: level.lambda.data().iter().map(to_f64).collect(),
                    fidelity: level.fidelity.to_f64().unwrap_or(f64::NAN),
                })
                .collect(),
            weights: weights.map(|w| w.w.iter().map(to_f64).collect()),
        };
        serde_json::to_string_pretty(&doc).expect("hierarchy serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<(Self, Option<HierarchyWeights<T>>)> {
        let doc: HierarchyJson = serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<string>".into(),
            source,
        })?;
        let mut levels = Vec::with_capacity(doc.levels.len());
        for (idx, level) in doc.levels.iter().enumerate() {
            let flat: Vec<T> = level.u.iter().map(|&x| T::of(x)).collect();
            let mut u = MappingOperator::from_flat(doc.d, doc.n, 1, &flat)?;
            let norm_sq = u.frobenius_sq();
            if (norm_sq - T::of(doc.d as f64)).abs() > T::of(1e-8) * T::of(doc.d as f64) {
                return Err(Error::BadLevel {
                    context: format!(
                        "level {idx} norm² {:e} is far from D = {}",
                        norm_sq.to_f64().unwrap_or(f64::NAN),
                        doc.d
                    ),
                });
            }
            u.orthonormal_rows = true;
            u.validate_flags()?;
            if level.lambda.len() != doc.d * doc.d {
                return Err(Error::BadShape {
                    context: format!("level {idx} λ has {} entries", level.lambda.len()),
                });
            }
            let lam_rect = RectMatrix::from_vec(
                doc.d,
                doc.d,
                level.lambda.iter().map(|&x| T::of(x)).collect(),
            )?;
            levels.push(HierarchyLevel {
                u,
                lambda: SymMatrix::new(&lam_rect)?,
                fidelity: T::of(level.fidelity),
            });
        }
        let weights = doc
            .weights
            .map(|w| HierarchyWeights { w: w.iter().map(|&x| T::of(x)).collect() });
        Ok((Hierarchy { d_out: doc.d, d_in: doc.n, levels }, weights))
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
