//! Analytic signal gradients, log-likelihood, Fisher information and the
//! position/orientation error bounds derived from it.

use nalgebra::{Matrix2, Matrix3, Matrix5, SymmetricEigen, Vector5};

use crate::error::{Error, Result};
use crate::physics::{link_geometry, Anchor, AnchorTopology, MeasurementVector, Pose, Vec3};

/// Default cap on the Fisher matrix condition number.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// `ds_n / d[p_x, p_y, p_z, phi, theta]`.
pub type SignalGradient = Vector5<f64>;

/// `ds/dp` for a fixed orientation vector `o`.
pub(crate) fn spatial_gradient(
    position: &Vec3,
    o: &Vec3,
    anchor: &Anchor,
    rho: f64,
) -> Result<Vec3> {
    let g = link_geometry(position, anchor)?;
    let d = g.distance;
    let e = g.direction.into_inner();
    let o_n = anchor.orientation.into_inner();
    let cos_en = o_n.dot(&e);
    // d b^T / dp = 3/(2d) (o_n e^T + (o_n^T e)(I - 2 e e^T))
    let db_dp =
        1.5 / d * (o_n * e.transpose() + cos_en * (Matrix3::identity() - 2.0 * e * e.transpose()));
    let scale = rho / d.powi(3);
    Ok(scale * (db_dp * o - 3.0 / d * e * g.scaled_field.dot(o)))
}

/// Gradient at raw (not necessarily canonical) angles, as used by the 5D solver.
pub(crate) fn gradient_at(
    position: &Vec3,
    phi: f64,
    theta: f64,
    anchor: &Anchor,
    rho: f64,
) -> Result<SignalGradient> {
    let g = link_geometry(position, anchor)?;
    let d = g.distance;
    let e = g.direction.into_inner();
    let o_n = anchor.orientation.into_inner();
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let o = Vec3::new(cp * st, sp * st, ct);
    let do_dphi = Vec3::new(-sp, cp, 0.0) * st;
    let do_dtheta = Vec3::new(cp * ct, sp * ct, -st);

    let cos_en = o_n.dot(&e);
    let db_dp =
        1.5 / d * (o_n * e.transpose() + cos_en * (Matrix3::identity() - 2.0 * e * e.transpose()));
    let scale = rho / d.powi(3);
    let b = g.scaled_field;
    let dp = scale * (db_dp * o - 3.0 / d * e * b.dot(&o));
    Ok(Vector5::new(
        dp.x,
        dp.y,
        dp.z,
        scale * b.dot(&do_dphi),
        scale * b.dot(&do_dtheta),
    ))
}

pub fn signal_gradient(agent: &Pose, anchor: &Anchor, rho: f64) -> Result<SignalGradient> {
    gradient_at(
        &agent.position,
        agent.orientation.phi,
        agent.orientation.theta,
        anchor,
        rho,
    )
}

/// `-1/(2 sigma^2) sum (s_n(beta) - y_n)^2`, without the constant term.
pub fn log_likelihood(
    beta: &Pose,
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    sigma2: f64,
) -> Result<f64> {
    y.check_len(topology)?;
    let s = crate::physics::forward_model(beta, topology, rho)?;
    let sse: f64 = s
        .values
        .iter()
        .zip(&y.values)
        .map(|(s, y)| (s - y).powi(2))
        .sum();
    Ok(-sse / (2.0 * sigma2))
}

/// The 5x5 Fisher information matrix for `[p; phi; theta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherMatrix(pub Matrix5<f64>);

impl FisherMatrix {
    pub fn matrix(&self) -> &Matrix5<f64> {
        &self.0
    }

    pub fn position_block(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn angle_block(&self) -> Matrix2<f64> {
        self.0.fixed_view::<2, 2>(3, 3).into_owned()
    }

    /// Ratio of extreme eigenvalues; infinite when the smallest is not positive.
    pub fn condition_number(&self) -> f64 {
        let eig = SymmetricEigen::new(self.0).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if !(min > 0.0) || !max.is_finite() {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

pub fn fisher_matrix(
    beta: &Pose,
    topology: &AnchorTopology,
    rho: f64,
    sigma2: f64,
) -> Result<FisherMatrix> {
    let mut j = Matrix5::zeros();
    for a in topology.anchors() {
        let g = signal_gradient(beta, a, rho)?;
        j += g * g.transpose();
    }
    Ok(FisherMatrix(j / sigma2))
}

/// Position and orientation error bounds at one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub peb_m: f64,
    /// PEB as if the orientation were known.
    pub naive_peb_m: f64,
    pub angle_bound_phi_rad: f64,
    pub angle_bound_theta_rad: f64,
    /// `sqrt((J^-1)_44 + (J^-1)_55)`.
    pub angle_bound_rms_rad: f64,
    /// Angle bound as if the position were known.
    pub naive_angle_bound_rms_rad: f64,
    pub fim_condition: f64,
}

impl BoundReport {
    pub const CSV_HEADER: [&'static str; 7] = [
        "peb_m",
        "naive_peb_m",
        "angle_bound_phi_rad",
        "angle_bound_theta_rad",
        "angle_bound_rms_rad",
        "naive_angle_bound_rms_rad",
        "fim_condition",
    ];

    /// Values in [`Self::CSV_HEADER`] order.
    pub fn fields(&self) -> [f64; 7] {
        [
            self.peb_m,
            self.naive_peb_m,
            self.angle_bound_phi_rad,
            self.angle_bound_theta_rad,
            self.angle_bound_rms_rad,
            self.naive_angle_bound_rms_rad,
            self.fim_condition,
        ]
    }
}

pub fn bounds(
    beta: &Pose,
    topology: &AnchorTopology,
    rho: f64,
    sigma2: f64,
) -> Result<BoundReport> {
    bounds_with_cap(beta, topology, rho, sigma2, DEFAULT_CONDITION_CAP)
}

pub fn bounds_with_cap(
    beta: &Pose,
    topology: &AnchorTopology,
    rho: f64,
    sigma2: f64,
    condition_cap: f64,
) -> Result<BoundReport> {
    let fim = fisher_matrix(beta, topology, rho, sigma2)?;
    let condition = fim.condition_number();
    if !(condition <= condition_cap) {
        return Err(Error::UnboundedPose { condition });
    }
    let unbounded = || Error::UnboundedPose { condition };
    let inv = fim.0.cholesky().ok_or_else(unbounded)?.inverse();
    let naive_pos = fim
        .position_block()
        .cholesky()
        .ok_or_else(unbounded)?
        .inverse();
    let naive_ang = fim
        .angle_block()
        .cholesky()
        .ok_or_else(unbounded)?
        .inverse();
    Ok(BoundReport {
        peb_m: (inv[(0, 0)] + inv[(1, 1)] + inv[(2, 2)]).sqrt(),
        naive_peb_m: naive_pos.trace().sqrt(),
        angle_bound_phi_rad: inv[(3, 3)].sqrt(),
        angle_bound_theta_rad: inv[(4, 4)].sqrt(),
        angle_bound_rms_rad: (inv[(3, 3)] + inv[(4, 4)]).sqrt(),
        naive_angle_bound_rms_rad: naive_ang.trace().sqrt(),
        fim_condition: condition,
    })
}

/// PEB when the agent orientation `o` is known exactly: only the 3x3
/// position Fisher matrix enters.
pub fn known_orientation_peb(
    position: &Vec3,
    o: &Vec3,
    topology: &AnchorTopology,
    rho: f64,
    sigma2: f64,
) -> Result<f64> {
    let mut j = Matrix3::zeros();
    for a in topology.anchors() {
        let g = spatial_gradient(position, o, a, rho)?;
        j += g * g.transpose();
    }
    j /= sigma2;
    let eig = SymmetricEigen::new(j).eigenvalues;
    let condition = if eig.min() > 0.0 {
        eig.max() / eig.min()
    } else {
        f64::INFINITY
    };
    if !(condition <= DEFAULT_CONDITION_CAP) {
        return Err(Error::UnboundedPose { condition });
    }
    let inv = j
        .cholesky()
        .ok_or(Error::UnboundedPose { condition })?
        .inverse();
    Ok(inv.trace().sqrt())
}
