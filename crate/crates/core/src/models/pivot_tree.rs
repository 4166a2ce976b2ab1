//! Linear-Gaussian structural models rooted at a pivot entry.
//!
//! The pivot `X` has its own prior. Entries in the pivot's row and column
//! regress on `X`; every other entry regresses on the entry in the pivot's
//! column that shares its view (its "column anchor"). Row and column
//! entries are then conditionally independent given `X`, and every interior
//! entry is independent of `X` given its anchor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::serde_mat;
use super::{Entry, GaussianModel, MatrixGaussianModel, MatrixLayout};
use crate::error::{Error, Result};

/// An additional regression `child += coeff * parent` on top of the tree.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtraEdge {
    pub child: Entry,
    pub parent: Entry,
    #[serde(with = "serde_mat")]
    pub coeff: DMatrix<f64>,
}

/// Parameters of a pivot-rooted structural model.
///
/// `row_coeffs` is indexed by frame and `col_coeffs` by view; the slot at
/// the pivot is ignored. `rest_coeffs` and `noise_covs` are indexed by the
/// row-major entry index; slots that do not apply to an entry are ignored.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PivotTreeSpec {
    pub layout: MatrixLayout,
    pub pivot: Entry,
    pub pivot_prior: GaussianModel,
    #[serde(with = "serde_mat::list")]
    pub row_coeffs: Vec<DMatrix<f64>>,
    #[serde(with = "serde_mat::list")]
    pub col_coeffs: Vec<DMatrix<f64>>,
    #[serde(with = "serde_mat::list")]
    pub rest_coeffs: Vec<DMatrix<f64>>,
    #[serde(with = "serde_mat::list")]
    pub noise_covs: Vec<DMatrix<f64>>,
    #[serde(default)]
    pub extra_edges: Vec<ExtraEdge>,
}

impl PivotTreeSpec {
    /// The tree parent of `e`, or `None` for the pivot.
    pub fn parent(&self, e: Entry) -> Option<Entry> {
        let (i0, j0) = self.pivot;
        if e == self.pivot {
            None
        } else if e.0 == i0 || e.1 == j0 {
            Some(self.pivot)
        } else {
            Some((e.0, j0))
        }
    }

    fn coeff(&self, e: Entry) -> &DMatrix<f64> {
        let (i0, j0) = self.pivot;
        if e.0 == i0 {
            &self.row_coeffs[e.1]
        } else if e.1 == j0 {
            &self.col_coeffs[e.0]
        } else {
            &self.rest_coeffs[self.layout.entry_index(e)]
        }
    }

    fn validate(&self) -> Result<()> {
        let l = self.layout;
        let d = l.entry_dim;
        l.check_entry(self.pivot)?;
        if self.pivot_prior.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.pivot_prior.dim(),
            });
        }
        let lens = [
            ("row_coeffs", self.row_coeffs.len(), l.frames),
            ("col_coeffs", self.col_coeffs.len(), l.views),
            ("rest_coeffs", self.rest_coeffs.len(), l.n_entries()),
            ("noise_covs", self.noise_covs.len(), l.n_entries()),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::invalid(format!("{name} has {got} matrices, expected {want}")));
            }
        }
        let square = |m: &DMatrix<f64>| m.nrows() == d && m.ncols() == d;
        for e in l.entries().filter(|&e| e != self.pivot) {
            if !square(self.coeff(e)) {
                return Err(Error::invalid(format!("coefficient for entry {e:?} is not {d}x{d}")));
            }
            let cov = &self.noise_covs[l.entry_index(e)];
            if !square(cov) {
                return Err(Error::invalid(format!("innovation for entry {e:?} is not {d}x{d}")));
            }
            GaussianModel::new(DVector::zeros(d), cov.clone())
                .map_err(|err| Error::DegenerateModel(format!("innovation of entry {e:?}: {err}")))?;
        }
        for edge in &self.extra_edges {
            l.check_entry(edge.child)?;
            l.check_entry(edge.parent)?;
            if edge.child == edge.parent {
                return Err(Error::invalid("self-loop edge"));
            }
            if !square(&edge.coeff) {
                return Err(Error::invalid("extra edge coefficient has the wrong shape"));
            }
        }
        Ok(())
    }
}

/// Assembles `Sigma = (I - B)^{-1} Omega (I - B)^{-T}` and the matching mean.
pub fn build_pivot_tree(spec: &PivotTreeSpec) -> Result<MatrixGaussianModel> {
    spec.validate()?;
    let l = spec.layout;
    let d = l.entry_dim;
    let n = l.dim();
    let mut b = DMatrix::<f64>::zeros(n, n);
    let mut omega = DMatrix::<f64>::zeros(n, n);
    let mut intercept = DVector::<f64>::zeros(n);

    let put = |b: &mut DMatrix<f64>, child: Entry, parent: Entry, c: &DMatrix<f64>| {
        let (r, s) = (l.flat(child, 0), l.flat(parent, 0));
        let mut view = b.view_mut((r, s), (d, d));
        view += c;
    };
    for e in l.entries() {
        let at = l.flat(e, 0);
        match spec.parent(e) {
            None => {
                omega
                    .view_mut((at, at), (d, d))
                    .copy_from(spec.pivot_prior.covariance());
                intercept.rows_mut(at, d).copy_from(spec.pivot_prior.mean());
            }
            Some(parent) => {
                put(&mut b, e, parent, spec.coeff(e));
                omega
                    .view_mut((at, at), (d, d))
                    .copy_from(&spec.noise_covs[l.entry_index(e)]);
            }
        }
    }
    for edge in &spec.extra_edges {
        put(&mut b, edge.child, edge.parent, &edge.coeff);
    }

    let inv = (DMatrix::identity(n, n) - b)
        .try_inverse()
        .ok_or_else(|| Error::DegenerateModel("structural matrix (I - B) is singular".into()))?;
    let raw = &inv * omega * inv.transpose();
    let cov = (&raw + raw.transpose()) * 0.5;
    let mean = &inv * intercept;
    MatrixGaussianModel::new(l, GaussianModel::new(mean, cov)?)
}

/// How a randomly generated model is wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Wiring {
    /// The plain pivot tree.
    Tree,
    /// Interior entries additionally regress on the pivot-row entry of their frame.
    BothAnchors,
    /// Column entries additionally regress on a pivot-row entry, coupling the
    /// pivot's row and column beyond the pivot.
    CrossLinked,
}

/// Distribution over random pivot-tree parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeFamily {
    /// Coefficient entries are drawn from `U(-scale, scale)` (or `U(0, scale)` when positive).
    pub coeff_scale: f64,
    /// Added to every innovation covariance diagonal.
    pub innovation_floor: f64,
    pub positive: bool,
    pub wiring: Wiring,
}

impl Default for TreeFamily {
    fn default() -> Self {
        Self {
            coeff_scale: 0.8,
            innovation_floor: 0.3,
            positive: false,
            wiring: Wiring::Tree,
        }
    }
}

fn random_square<R: Rng + ?Sized>(rng: &mut R, d: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.random_range(lo..hi))
}

fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize, floor: f64) -> DMatrix<f64> {
    let a = random_square(rng, d, -0.7, 0.7);
    let m = &a * a.transpose() + DMatrix::identity(d, d) * floor;
    (&m + m.transpose()) * 0.5
}

pub fn random_pivot_tree<R: Rng + ?Sized>(
    layout: MatrixLayout,
    pivot: Entry,
    family: &TreeFamily,
    rng: &mut R,
) -> Result<PivotTreeSpec> {
    layout.check_entry(pivot)?;
    let d = layout.entry_dim;
    let (lo, hi) = if family.positive {
        (0.0, family.coeff_scale)
    } else {
        (-family.coeff_scale, family.coeff_scale)
    };
    let coeff = |rng: &mut R| random_square(rng, d, lo, hi);
    let row_coeffs = (0..layout.frames).map(|_| coeff(rng)).collect();
    let col_coeffs = (0..layout.views).map(|_| coeff(rng)).collect();
    let rest_coeffs = (0..layout.n_entries()).map(|_| coeff(rng)).collect();
    let noise_covs = (0..layout.n_entries())
        .map(|_| random_spd(rng, d, family.innovation_floor))
        .collect();
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pivot_prior = GaussianModel::from_parts(mean, random_spd(rng, d, family.innovation_floor))?;

    let (i0, j0) = pivot;
    let mut extra_edges = Vec::new();
    // a coupling that is always bounded away from zero
    let strong = |rng: &mut R| {
        let sign = if family.positive || rng.random_bool(0.5) { 1.0 } else { -1.0 };
        DMatrix::identity(d, d) * (sign * rng.random_range(0.5..1.0)) + random_square(rng, d, -0.1, 0.1)
    };
    match family.wiring {
        Wiring::Tree => {}
        Wiring::BothAnchors => {
            for e in layout.entries().filter(|e| e.0 != i0 && e.1 != j0) {
                extra_edges.push(ExtraEdge {
                    child: e,
                    parent: (i0, e.1),
                    coeff: strong(rng),
                });
            }
        }
        Wiring::CrossLinked => {
            if let Some(jr) = (0..layout.frames).find(|&j| j != j0) {
                for i in (0..layout.views).filter(|&i| i != i0) {
                    extra_edges.push(ExtraEdge {
                        child: (i, j0),
                        parent: (i0, jr),
                        coeff: strong(rng),
                    });
                }
            }
        }
    }

    Ok(PivotTreeSpec {
        layout,
        pivot,
        pivot_prior,
        row_coeffs,
        col_coeffs,
        rest_coeffs,
        noise_covs,
        extra_edges,
    })
}
