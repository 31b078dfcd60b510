//! Linear least squares under a unit-norm constraint,
//!
//! ```text
//! minimize |A o - y|^2  subject to  |o| = 1,    A in R^{N x 3},
//! ```
//!
//! which is the maximum-likelihood orientation for a fixed position
//! hypothesis. Stationary points of the Lagrangian satisfy
//! `o(lambda) = (A^T A + lambda I)^-1 A^T y`; the minimizer uses the largest
//! `lambda` with `|o(lambda)| = 1`. With `A = U diag(sigma) V^T`,
//! `mu_i = sigma_i^2` and `c_i = u_i^T y` the constraint reads
//!
//! ```text
//! sum_i mu_i c_i^2 / (mu_i + lambda)^2 = 1,
//! ```
//!
//! and clearing denominators gives a degree-6 polynomial in `lambda`. Its
//! real roots come from companion-matrix eigenvalues; the largest one is then
//! refined on the rational form above.

use nalgebra::{DMatrix, DVector, Unit};

use crate::error::{Error, Result};
use crate::physics::{link_geometry, AnchorTopology, MeasurementVector, UnitVec3, Vec3};

/// Singular values below this fraction of the largest count as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;
/// All `|c_i|` below this fraction of `|y|` is a degenerate right-hand side.
pub const DEGENERATE_RHS_TOLERANCE: f64 = 1e-14;
/// Relative spacing under which two `mu_i` are merged.
pub const MERGE_TOLERANCE: f64 = 1e-10;
/// Required accuracy of the secular equation at the returned multiplier.
pub const SECULAR_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedLsInstance {
    pub design: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstrainedLsSolution {
    pub o_hat: UnitVec3,
    pub lambda_star: f64,
    pub cost: f64,
    /// `mu_i`, squared singular values in descending order.
    pub spectrum: [f64; 3],
    /// `c_i = u_i^T y`.
    pub coefficients: [f64; 3],
}

/// A term `w / (nu + t)^2` of the normalized secular function.
#[derive(Debug, Clone, Copy)]
struct Term {
    nu: f64,
    w: f64,
}

/// Merges (nearly) repeated `nu` so the cleared polynomial has no spurious
/// double roots. Input `nu` must be sorted descending.
fn merge_terms(nu: &[f64; 3], w: &[f64; 3]) -> Vec<Term> {
    let mut terms: Vec<Term> = Vec::with_capacity(3);
    for (&n, &wi) in nu.iter().zip(w) {
        match terms.last_mut() {
            Some(t) if (t.nu - n).abs() <= MERGE_TOLERANCE * t.nu.max(n) => t.w += wi,
            _ => terms.push(Term { nu: n, w: wi }),
        }
    }
    terms
}

/// Ascending coefficients of `prod_g (nu_g + t)^2 - sum_g w_g prod_{h != g} (nu_h + t)^2`.
fn cleared_polynomial(terms: &[Term]) -> Vec<f64> {
    fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, x) in a.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                out[i + j] += x * y;
            }
        }
        out
    }
    let squares: Vec<Vec<f64>> = terms
        .iter()
        .map(|t| vec![t.nu * t.nu, 2.0 * t.nu, 1.0])
        .collect();
    let product = |skip: Option<usize>| {
        squares
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .fold(vec![1.0], |acc, (_, q)| mul(&acc, q))
    };
    let mut poly = product(None);
    for (g, t) in terms.iter().enumerate() {
        for (i, c) in product(Some(g)).iter().enumerate() {
            poly[i] -= t.w * c;
        }
    }
    poly
}

/// Real roots of a monic polynomial (ascending coefficients) from the
/// eigenvalues of its companion matrix.
fn companion_real_roots(poly: &[f64]) -> Vec<f64> {
    let n = poly.len() - 1;
    let lead = poly[n];
    let mut c = DMatrix::zeros(n, n);
    for i in 1..n {
        c[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        c[(i, n - 1)] = -poly[i] / lead;
    }
    c.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-7 * z.re.abs().max(1.0))
        .map(|z| z.re)
        .collect()
}

fn secular(terms: &[Term], t: f64) -> (f64, f64) {
    terms.iter().fold((-1.0, 0.0), |(g, dg), term| {
        let den = term.nu + t;
        (
            g + term.w / (den * den),
            dg - 2.0 * term.w / (den * den * den),
        )
    })
}

/// Refines the root of the normalized secular function on `(lo, hi]`,
/// where it is convex and strictly decreasing.
fn refine_root(terms: &[Term], start: f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut t = if start > lo && start <= hi {
        start
    } else {
        0.5 * (lo + hi)
    };
    for _ in 0..200 {
        let (g, dg) = secular(terms, t);
        if g == 0.0 {
            return t;
        }
        if g > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let newton = t - g / dg;
        let next = if newton > lo && newton < hi && dg < 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - t).abs() <= 4.0 * f64::EPSILON * t.abs().max(1e-300)
            || hi - lo <= f64::EPSILON * hi.abs()
        {
            return next;
        }
        t = next;
    }
    t
}

/// Real roots, in units of `lambda`, of the cleared secular polynomial for
/// the given spectrum and coefficients (unrefined, unsorted).
pub fn secular_roots(spectrum: &[f64; 3], coefficients: &[f64; 3]) -> Vec<f64> {
    let mu_max = spectrum.iter().cloned().fold(0.0, f64::max);
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| spectrum[b].total_cmp(&spectrum[a]));
    let nu = idx.map(|i| spectrum[i] / mu_max);
    let w = idx.map(|i| spectrum[i] * coefficients[i].powi(2) / (mu_max * mu_max));
    companion_real_roots(&cleared_polynomial(&merge_terms(&nu, &w)))
        .into_iter()
        .map(|t| t * mu_max)
        .collect()
}

pub fn solve_constrained(instance: &ConstrainedLsInstance) -> Result<ConstrainedLsSolution> {
    let a = &instance.design;
    let y = &instance.rhs;
    if a.ncols() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            actual: a.ncols(),
        });
    }
    if a.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            actual: y.len(),
        });
    }
    if a.nrows() == 0 {
        return Err(crate::error::invalid("design", "needs at least one row"));
    }
    if !a.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(crate::error::invalid("design", "entries must be finite"));
    }
    if a.nrows() < 3 {
        let sv = a.singular_values();
        let mut s = [0.0; 3];
        s[..sv.len()].copy_from_slice(sv.as_slice());
        return Err(Error::RankDeficient { singular_values: s });
    }

    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("thin U requested");
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    // nalgebra sorts singular values in descending order
    let sigma = [
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    ];
    if !(sigma[2] > RANK_TOLERANCE * sigma[0]) {
        return Err(Error::RankDeficient {
            singular_values: sigma,
        });
    }
    let mu = sigma.map(|s| s * s);
    let c = [0, 1, 2].map(|i| u.column(i).dot(y));
    let y_norm = y.norm();
    if c.iter()
        .all(|ci| ci.abs() <= DEGENERATE_RHS_TOLERANCE * y_norm)
    {
        return Err(Error::DegenerateRhs);
    }

    // Normalize lambda = mu_max t so the polynomial is well scaled.
    let mu_max = mu[0];
    let nu = mu.map(|m| m / mu_max);
    let w = [0, 1, 2].map(|i| mu[i] * c[i] * c[i] / (mu_max * mu_max));
    let terms = merge_terms(&nu, &w);
    let poly = cleared_polynomial(&terms);
    let start = companion_real_roots(&poly)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);

    let smallest = *terms.last().expect("at least one term");
    let lo = -smallest.nu;
    let hi = terms.iter().map(|t| t.w).sum::<f64>().sqrt();
    // Hard case: no weight on the smallest mode and the remaining terms stay
    // below one at the pole, so the multiplier sits exactly at -nu_min.
    let hard_case = smallest.w <= f64::MIN_POSITIVE && {
        let rest = &terms[..terms.len() - 1];
        secular(rest, lo).0 <= 0.0
    };
    let t_star = if hard_case {
        lo
    } else {
        refine_root(&terms, start, lo, hi)
    };
    if !hard_case {
        let (g, _) = secular(&terms, t_star);
        if !(g.abs() <= SECULAR_TOLERANCE) {
            return Err(Error::Solver(format!(
                "secular equation residual {g:e} at multiplier {t_star:e}"
            )));
        }
    }

    // Coordinates of o in the right singular basis.
    let mut coords = [0.0; 3];
    for i in 0..3 {
        let den = nu[i] + t_star;
        if hard_case && (nu[i] - smallest.nu).abs() <= MERGE_TOLERANCE * nu[i].max(smallest.nu) {
            continue;
        }
        coords[i] = sigma[i] * c[i] / mu_max / den;
    }
    if hard_case {
        let fill = (1.0 - coords.iter().map(|x| x * x).sum::<f64>())
            .max(0.0)
            .sqrt();
        coords[2] += fill;
    }
    let o = v_t.transpose() * nalgebra::Vector3::from(coords);
    let o_hat = Unit::new_normalize(Vec3::new(o[0], o[1], o[2]));
    let cost = (a * o_hat.into_inner() - y).norm_squared();
    Ok(ConstrainedLsSolution {
        o_hat,
        lambda_star: t_star * mu_max,
        cost,
        spectrum: mu,
        coefficients: c,
    })
}

/// Rows `b_n^T(p)` and distances `d_n(p)`.
pub fn field_design(p: &Vec3, topology: &AnchorTopology) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = topology.len();
    let mut b_t = DMatrix::zeros(n, 3);
    let mut d = Vec::with_capacity(n);
    for (row, anchor) in topology.anchors().iter().enumerate() {
        let g = link_geometry(p, anchor)?;
        b_t[(row, 0)] = g.scaled_field.x;
        b_t[(row, 1)] = g.scaled_field.y;
        b_t[(row, 2)] = g.scaled_field.z;
        d.push(g.distance);
    }
    Ok((b_t, d))
}

fn require_three(topology: &AnchorTopology, y_len: usize) -> Result<()> {
    if y_len != topology.len() {
        return Err(Error::DimensionMismatch {
            expected: topology.len(),
            actual: y_len,
        });
    }
    if topology.len() < 3 {
        return Err(crate::error::invalid(
            "topology",
            "orientation step needs N >= 3",
        ));
    }
    Ok(())
}

/// ML orientation at position hypothesis `p`: design `rho D_p^-3 B_p^T`.
pub fn orientation_given_position(
    p: &Vec3,
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
) -> Result<ConstrainedLsSolution> {
    require_three(topology, y.len())?;
    let (mut design, d) = field_design(p, topology)?;
    for (mut row, dn) in design.row_iter_mut().zip(&d) {
        row *= rho / dn.powi(3);
    }
    solve_constrained(&ConstrainedLsInstance {
        design,
        rhs: DVector::from_column_slice(y.as_slice()),
    })
}

/// Orientation step on the distance-scaled observations `j_hat`: design `B_p^T`.
pub fn orientation_given_position_scaled(
    p: &Vec3,
    j_hat: &DVector<f64>,
    topology: &AnchorTopology,
) -> Result<ConstrainedLsSolution> {
    require_three(topology, j_hat.len())?;
    let (design, _) = field_design(p, topology)?;
    solve_constrained(&ConstrainedLsInstance {
        design,
        rhs: j_hat.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn instance(design: DMatrix<f64>, rhs: Vec<f64>) -> ConstrainedLsInstance {
        ConstrainedLsInstance {
            design,
            rhs: DVector::from_vec(rhs),
        }
    }

    #[test]
    fn identity_with_unit_rhs() {
        let u = Vec3::new(1.0, 2.0, -2.0) / 3.0;
        let sol =
            solve_constrained(&instance(DMatrix::identity(3, 3), vec![u.x, u.y, u.z])).unwrap();
        assert_relative_eq!(sol.o_hat.into_inner(), u, epsilon = 1e-12);
        assert!(sol.lambda_star.abs() < 1e-12);
    }

    #[test]
    fn identity_with_doubled_rhs() {
        let u = Vec3::new(0.0, 0.6, 0.8);
        let sol =
            solve_constrained(&instance(DMatrix::identity(3, 3), vec![0.0, 1.2, 1.6])).unwrap();
        assert_relative_eq!(sol.o_hat.into_inner(), u, epsilon = 1e-12);
        assert_relative_eq!(sol.lambda_star, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_and_degenerate() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(
            solve_constrained(&instance(a, vec![1.0, 0.0, 0.0])),
            Err(Error::RankDeficient { .. })
        ));
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            solve_constrained(&instance(a, vec![1.0, 0.0])),
            Err(Error::RankDeficient { .. })
        ));
        assert!(matches!(
            solve_constrained(&instance(DMatrix::identity(3, 3), vec![0.0, 0.0, 0.0])),
            Err(Error::DegenerateRhs)
        ));
    }

    #[test]
    fn hard_case_fills_smallest_mode() {
        // rhs has no component along the weakest direction and is short,
        // so the multiplier sits at -mu_min.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let sol = solve_constrained(&instance(a, vec![0.3, 0.2, 0.0])).unwrap();
        assert_relative_eq!(sol.lambda_star, -1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.o_hat.norm(), 1.0, epsilon = 1e-12);
        // o = (0.3*3/(9-1), 0.2*2/(4-1), +-sqrt(rest))
        assert_relative_eq!(sol.o_hat.x, 0.9 / 8.0, epsilon = 1e-12);
        assert_relative_eq!(sol.o_hat.y, 0.4 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn merged_spectrum_lowers_degree() {
        let terms = merge_terms(&[1.0, 1.0, 0.5], &[0.2, 0.3, 0.1]);
        assert_eq!(terms.len(), 2);
        assert_eq!(cleared_polynomial(&terms).len(), 5);
    }

    #[test]
    fn cleared_polynomial_vanishes_at_secular_roots() {
        let terms = merge_terms(&[1.0, 0.4, 0.1], &[0.5, 0.2, 0.05]);
        let poly = cleared_polynomial(&terms);
        assert_eq!(poly.len(), 7);
        assert_eq!(poly[6], 1.0);
        for t in companion_real_roots(&poly) {
            let value: f64 = poly.iter().rev().fold(0.0, |acc, c| acc * t + c);
            assert!(value.abs() < 1e-9, "{t} -> {value}");
        }
    }
}
