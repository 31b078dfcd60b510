//! Position estimators built on the LM solver and the orientation step.
//!
//! - [`ml5d`]: the full 5D maximum-likelihood fit with analytic Jacobian.
//! - [`ml3d`]: maximum likelihood over position only; the orientation is
//!   re-solved exactly at every position hypothesis.
//! - [`wls`]: the same reduction applied to distance-scaled observations
//!   `j = D_p^3 y / rho`, whose entries are plain alignment factors.
//! - [`cascade`]: [`wls`] followed by [`ml3d`] from its estimate.
//! - [`strongest_anchor`]: picks the anchor with the largest `|y_n|`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fisher::gradient_at;
use crate::lm::{self, ResidualProblem, SolverOptions, Termination};
use crate::orientation::{
    field_design, orientation_given_position, orientation_given_position_scaled,
};
use crate::physics::{
    link_geometry, sample_unit_vector, AnchorTopology, MeasurementVector, Pose,
    SphericalOrientation, Vec3,
};

/// Multiplier applied to the reference cost for hypotheses where the
/// orientation step cannot be evaluated.
pub const PENALTY_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Ml5d,
    Ml3d,
    Wls,
    Cascade,
    Baseline,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Ml5d,
        Algorithm::Ml3d,
        Algorithm::Wls,
        Algorithm::Cascade,
        Algorithm::Baseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Ml5d => "ML5D",
            Algorithm::Ml3d => "ML3D",
            Algorithm::Wls => "WLS",
            Algorithm::Cascade => "CASCADE",
            Algorithm::Baseline => "BASELINE",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid("algorithm", format!("unknown algorithm `{s}`")))
    }
}

impl serde::Serialize for Algorithm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> serde::Deserialize<'de> for Algorithm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEstimate {
    pub algorithm: Algorithm,
    pub position: Vec3,
    /// `None` for the strongest-anchor baseline.
    pub orientation: Option<SphericalOrientation>,
    /// Final cost in the algorithm's own metric (scaled for WLS). The
    /// baseline has no cost and reports infinity.
    pub residual_cost: f64,
    pub iterations: usize,
    /// `None` for the baseline, which does not iterate.
    pub termination: Option<Termination>,
}

impl PoseEstimate {
    pub fn pose(&self) -> Option<Pose> {
        self.orientation.map(|o| Pose::new(self.position, o))
    }

    pub fn position_error(&self, truth: &Vec3) -> f64 {
        (self.position - truth).norm()
    }
}

struct Ml5dProblem<'a> {
    y: &'a [f64],
    topology: &'a AnchorTopology,
    rho: f64,
}

impl ResidualProblem for Ml5dProblem<'_> {
    fn num_params(&self) -> usize {
        5
    }

    fn num_residuals(&self) -> usize {
        self.y.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = Vec3::new(x[0], x[1], x[2]);
        let (sp, cp) = x[3].sin_cos();
        let (st, ct) = x[4].sin_cos();
        let o = Vec3::new(cp * st, sp * st, ct);
        DVector::from_iterator(
            self.y.len(),
            self.topology
                .anchors()
                .iter()
                .zip(self.y)
                .map(|(a, y)| match link_geometry(&p, a) {
                    Ok(g) => self.rho / g.distance.powi(3) * g.scaled_field.dot(&o) - y,
                    Err(_) => f64::NAN,
                }),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let p = Vec3::new(x[0], x[1], x[2]);
        let mut jac = DMatrix::zeros(self.y.len(), 5);
        for (row, a) in self.topology.anchors().iter().enumerate() {
            let g = gradient_at(&p, x[3], x[4], a, self.rho).ok()?;
            jac.set_row(row, &g.transpose());
        }
        Some(jac)
    }
}

/// Position-only problem with the orientation eliminated. `scaled` selects
/// the distance-scaled (WLS) metric.
struct ReducedProblem<'a> {
    y: &'a [f64],
    topology: &'a AnchorTopology,
    rho: f64,
    scaled: bool,
    penalty: f64,
}

impl ReducedProblem<'_> {
    fn try_residuals(&self, p: &Vec3) -> Result<(DVector<f64>, SphericalOrientation)> {
        if self.scaled {
            let (b_t, d) = field_design(p, self.topology)?;
            let j_hat = DVector::from_iterator(
                self.y.len(),
                self.y.iter().zip(&d).map(|(y, d)| d.powi(3) * y / self.rho),
            );
            let sol = orientation_given_position_scaled(p, &j_hat, self.topology)?;
            let r = b_t * sol.o_hat.into_inner() - j_hat;
            Ok((r, crate::physics::spherical_from_orientation(&sol.o_hat)))
        } else {
            let y = MeasurementVector::new(self.y.to_vec());
            let sol = orientation_given_position(p, &y, self.topology, self.rho)?;
            let (b_t, d) = field_design(p, self.topology)?;
            let o = sol.o_hat.into_inner();
            let r = DVector::from_iterator(
                self.y.len(),
                b_t.row_iter().zip(&d).zip(self.y).map(|((b, d), y)| {
                    self.rho / d.powi(3) * (b[0] * o.x + b[1] * o.y + b[2] * o.z) - y
                }),
            );
            Ok((r, crate::physics::spherical_from_orientation(&sol.o_hat)))
        }
    }

    fn reference_cost(&self) -> f64 {
        if self.scaled {
            self.y.len() as f64
        } else {
            self.y.iter().map(|v| v * v).sum()
        }
    }
}

impl ResidualProblem for ReducedProblem<'_> {
    fn num_params(&self) -> usize {
        3
    }

    fn num_residuals(&self) -> usize {
        self.y.len()
    }

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.try_residuals(&Vec3::new(x[0], x[1], x[2])) {
            Ok((r, _)) if r.iter().all(|v| v.is_finite()) => r,
            _ => DVector::from_element(self.y.len(), (self.penalty / self.y.len() as f64).sqrt()),
        }
    }
}

fn check_inputs(
    y: &MeasurementVector,
    topology: &AnchorTopology,
    min_anchors: usize,
) -> Result<()> {
    y.check_len(topology)?;
    if topology.len() < min_anchors {
        return Err(invalid(
            "topology",
            format!(
                "need at least {min_anchors} anchors, got {}",
                topology.len()
            ),
        ));
    }
    if !y.values.iter().all(|v| v.is_finite()) {
        return Err(invalid("y", "measurements must be finite"));
    }
    Ok(())
}

/// Full 5D maximum-likelihood fit from `init`. Angles are optimized
/// unconstrained and canonicalized on output.
pub fn ml5d(
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    init: &Pose,
    options: &SolverOptions,
) -> Result<PoseEstimate> {
    check_inputs(y, topology, 5)?;
    let problem = Ml5dProblem {
        y: y.as_slice(),
        topology,
        rho,
    };
    let x0 = DVector::from_column_slice(&init.to_array());
    let res = lm::solve(&problem, &x0, options)?;
    let x = &res.argmin;
    Ok(PoseEstimate {
        algorithm: Algorithm::Ml5d,
        position: Vec3::new(x[0], x[1], x[2]),
        orientation: Some(SphericalOrientation::canonical(x[3], x[4])),
        residual_cost: res.cost,
        iterations: res.iterations,
        termination: Some(res.termination),
    })
}

fn reduced(
    algorithm: Algorithm,
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    init_p: &Vec3,
    options: &SolverOptions,
) -> Result<PoseEstimate> {
    check_inputs(y, topology, 3)?;
    let mut problem = ReducedProblem {
        y: y.as_slice(),
        topology,
        rho,
        scaled: algorithm == Algorithm::Wls,
        penalty: 0.0,
    };
    // Initial hypothesis must be evaluable; later failures get the penalty.
    let (r0, _) = problem.try_residuals(init_p)?;
    problem.penalty = PENALTY_FACTOR * r0.norm_squared().max(problem.reference_cost());
    let x0 = DVector::from_column_slice(init_p.as_slice());
    let res = lm::solve(&problem, &x0, options)?;
    let p = Vec3::new(res.argmin[0], res.argmin[1], res.argmin[2]);
    let (r, orientation) = problem.try_residuals(&p)?;
    Ok(PoseEstimate {
        algorithm,
        position: p,
        orientation: Some(orientation),
        residual_cost: r.norm_squared(),
        iterations: res.iterations,
        termination: Some(res.termination),
    })
}

/// Maximum likelihood over position with the orientation step inside the
/// residual.
pub fn ml3d(
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    init_p: &Vec3,
    options: &SolverOptions,
) -> Result<PoseEstimate> {
    reduced(Algorithm::Ml3d, y, topology, rho, init_p, options)
}

/// Least squares on the distance-scaled observations. `residual_cost` is in
/// the scaled metric.
pub fn wls(
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    init_p: &Vec3,
    options: &SolverOptions,
) -> Result<PoseEstimate> {
    reduced(Algorithm::Wls, y, topology, rho, init_p, options)
}

/// [`wls`] followed by [`ml3d`] from the WLS position. Iterations add up and
/// the cost is the unscaled ML cost.
pub fn cascade(
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    init_p: &Vec3,
    options: &SolverOptions,
) -> Result<PoseEstimate> {
    let first = wls(y, topology, rho, init_p, options)?;
    let second = ml3d(y, topology, rho, &first.position, options)?;
    Ok(PoseEstimate {
        algorithm: Algorithm::Cascade,
        iterations: first.iterations + second.iterations,
        ..second
    })
}

/// Position of the anchor with the largest received power; ties go to the
/// lowest index.
pub fn strongest_anchor(y: &MeasurementVector, topology: &AnchorTopology) -> Result<PoseEstimate> {
    y.check_len(topology)?;
    let mut best = 0;
    for (i, v) in y.values.iter().enumerate() {
        if v * v > y.values[best] * y.values[best] {
            best = i;
        }
    }
    Ok(PoseEstimate {
        algorithm: Algorithm::Baseline,
        position: topology.anchors()[best].position,
        orientation: None,
        residual_cost: f64::INFINITY,
        iterations: 0,
        termination: None,
    })
}

/// Runs one estimator from `init`. Reduced estimators use only the position.
pub fn run(
    algorithm: Algorithm,
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    init: &Pose,
    options: &SolverOptions,
) -> Result<PoseEstimate> {
    match algorithm {
        Algorithm::Ml5d => ml5d(y, topology, rho, init, options),
        Algorithm::Ml3d => ml3d(y, topology, rho, &init.position, options),
        Algorithm::Wls => wls(y, topology, rho, &init.position, options),
        Algorithm::Cascade => cascade(y, topology, rho, &init.position, options),
        Algorithm::Baseline => strongest_anchor(y, topology),
    }
}

/// Draws initial poses uniformly in an axis-aligned box with orientations
/// uniform on the sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSampler {
    pub lower: Vec3,
    pub upper: Vec3,
    pub seed: u64,
}

impl InitSampler {
    pub fn new(lower: Vec3, upper: Vec3, seed: u64) -> Result<Self> {
        if !(0..3).all(|i| lower[i] < upper[i]) {
            return Err(invalid(
                "init box",
                "lower corner must be below upper corner",
            ));
        }
        Ok(Self { lower, upper, seed })
    }

    /// The first `k` draws; every draw consumes a position and an
    /// orientation so sequences agree across algorithms.
    pub fn draws(&self, k: usize) -> Vec<Pose> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..k)
            .map(|_| {
                let p = Vec3::from_fn(|i, _| rng.random_range(self.lower[i]..self.upper[i]));
                let o = sample_unit_vector(&mut rng);
                Pose::from_vector(p, &o)
            })
            .collect()
    }
}

/// Best of `k` runs from sampled initializations, by the algorithm's own
/// residual cost. Failed runs are skipped.
pub fn multi_start(
    algorithm: Algorithm,
    y: &MeasurementVector,
    topology: &AnchorTopology,
    rho: f64,
    options: &SolverOptions,
    k: usize,
    sampler: &InitSampler,
) -> Result<PoseEstimate> {
    if k == 0 {
        return Err(invalid("k", "need at least one start"));
    }
    let mut best: Option<PoseEstimate> = None;
    for init in sampler.draws(k) {
        let Ok(est) = run(algorithm, y, topology, rho, &init, options) else {
            continue;
        };
        if best.map_or(true, |b| est.residual_cost < b.residual_cost) {
            best = Some(est);
        }
    }
    best.ok_or(Error::AllRunsFailed { runs: k })
}
