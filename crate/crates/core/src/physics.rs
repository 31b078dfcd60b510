//! Geometry and the magnetic dipole coupling model.
//!
//! An agent coil at `p_ag` with unit normal `o_ag` couples to an anchor coil
//! at `p_n` with unit normal `o_n`. With `d = |p_ag - p_n|` and
//! `e = (p_ag - p_n) / d`, the anchor produces the unitless scaled field
//!
//! ```text
//! b = (3/2 e e^T - 1/2 I) o_n,        1/2 <= |b| <= 1
//! ```
//!
//! at the agent, and the noiseless received amplitude (unit sqrt(W)) is
//! `s = rho / d^3 * b^T o_ag`. `rho^2` is the power received over a coaxial
//! link at 1 m.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Unit, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;
pub type UnitVec3 = Unit<Vector3<f64>>;

/// Below this `|sin(theta)|` an orientation is treated as a pole and `phi = 0`.
pub const POLE_EPS: f64 = 1e-12;

/// Positions closer than this are considered coincident.
pub const COINCIDENCE_EPS: f64 = 1e-12;

pub fn watts_to_dbm(p: f64) -> f64 {
    10.0 * p.log10() + 30.0
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn ratio_to_db(r: f64) -> f64 {
    10.0 * r.log10()
}

/// Azimuth `phi` in `[0, 2pi)` and polar angle `theta` in `[0, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalOrientation {
    pub phi: f64,
    pub theta: f64,
}

impl SphericalOrientation {
    pub fn new(phi: f64, theta: f64) -> Result<Self> {
        if !(phi.is_finite() && (0.0..TAU).contains(&phi)) {
            return Err(invalid("phi", format!("{phi} not in [0, 2pi)")));
        }
        if !(theta.is_finite() && (0.0..=PI).contains(&theta)) {
            return Err(invalid("theta", format!("{theta} not in [0, pi]")));
        }
        Ok(Self { phi, theta })
    }

    /// Maps arbitrary (e.g. unconstrained optimizer) angles onto the
    /// canonical ranges, preserving the orientation vector.
    pub fn canonical(phi: f64, theta: f64) -> Self {
        spherical_from_orientation(&unit_from_angles(phi, theta))
    }

    pub fn to_unit(&self) -> UnitVec3 {
        orientation_from_spherical(self)
    }

    /// The opposite orientation.
    pub fn antipodal(&self) -> Self {
        spherical_from_orientation(&-self.to_unit())
    }
}

fn unit_from_angles(phi: f64, theta: f64) -> UnitVec3 {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Unit::new_normalize(Vec3::new(cp * st, sp * st, ct))
}

/// `o = [cos(phi) sin(theta), sin(phi) sin(theta), cos(theta)]`.
pub fn orientation_from_spherical(angles: &SphericalOrientation) -> UnitVec3 {
    unit_from_angles(angles.phi, angles.theta)
}

/// Inverse of [`orientation_from_spherical`]. At the poles `phi = 0`.
pub fn spherical_from_orientation(o: &UnitVec3) -> SphericalOrientation {
    let z = o.z.clamp(-1.0, 1.0);
    let rho_xy = o.x.hypot(o.y);
    let theta = rho_xy.atan2(z);
    if rho_xy < POLE_EPS {
        return SphericalOrientation {
            phi: 0.0,
            theta: if z >= 0.0 { 0.0 } else { PI },
        };
    }
    let mut phi = o.y.atan2(o.x);
    if phi < 0.0 {
        phi += TAU;
    }
    if phi >= TAU {
        phi = 0.0;
    }
    SphericalOrientation { phi, theta }
}

/// Position plus coil orientation: the 5D parameter `[p; phi; theta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: SphericalOrientation,
}

impl Pose {
    pub fn new(position: Vec3, orientation: SphericalOrientation) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn from_vector(position: Vec3, o: &UnitVec3) -> Self {
        Self::new(position, spherical_from_orientation(o))
    }

    pub fn orientation_vector(&self) -> UnitVec3 {
        self.orientation.to_unit()
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.orientation.phi,
            self.orientation.theta,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoilSpec {
    pub surface_area_m2: f64,
    pub turns: u32,
    pub resistance_ohm: f64,
}

impl CoilSpec {
    fn validate(&self, name: &'static str) -> Result<()> {
        if !(self.surface_area_m2 > 0.0 && self.surface_area_m2.is_finite()) {
            return Err(invalid(name, "surface area must be positive"));
        }
        if self.turns == 0 {
            return Err(invalid(name, "turn number must be positive"));
        }
        if !(self.resistance_ohm > 0.0 && self.resistance_ohm.is_finite()) {
            return Err(invalid(name, "resistance must be positive"));
        }
        Ok(())
    }
}

/// Coil, circuit and noise constants. The two dBm overrides, when present,
/// replace the closed-form `rho^2` and `sigma^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    pub permeability_h_per_m: f64,
    pub angular_frequency_rad_per_s: f64,
    pub agent_coil: CoilSpec,
    pub anchor_coil: CoilSpec,
    pub transmit_power_watts: f64,
    pub temperature_kelvin: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_linear: f64,
    pub boltzmann_j_per_k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_squared_dbm_override: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_squared_dbm_override: Option<f64>,
}

pub const BOLTZMANN: f64 = 1.380_649e-23;

/// Tabulated received power over a coaxial 1 m link.
pub const REFERENCE_RHO_SQUARED_DBM: f64 = -50.4;
/// Tabulated thermal noise floor.
pub const REFERENCE_SIGMA_SQUARED_DBM: f64 = -128.8;

impl PhysicalParams {
    /// 13.56 MHz NFC-class agent antenna, 15 x 10 cm 50-turn anchors, 10 dBm,
    /// 500 Hz, 8 dB noise figure, with the tabulated powers as overrides.
    pub fn reference() -> Self {
        Self {
            rho_squared_dbm_override: Some(REFERENCE_RHO_SQUARED_DBM),
            sigma_squared_dbm_override: Some(REFERENCE_SIGMA_SQUARED_DBM),
            ..Self::reference_closed_form()
        }
    }

    /// Same constants as [`PhysicalParams::reference`] without overrides.
    pub fn reference_closed_form() -> Self {
        Self {
            permeability_h_per_m: 4.0 * PI * 1e-7,
            angular_frequency_rad_per_s: TAU * 13.56e6,
            agent_coil: CoilSpec {
                surface_area_m2: 0.050 * 0.035,
                turns: 4,
                resistance_ohm: 4.0,
            },
            anchor_coil: CoilSpec {
                surface_area_m2: 0.150 * 0.100,
                turns: 50,
                resistance_ohm: 17.0,
            },
            transmit_power_watts: dbm_to_watts(10.0),
            temperature_kelvin: 300.0,
            bandwidth_hz: 500.0,
            noise_figure_linear: db_to_ratio(8.0),
            boltzmann_j_per_k: BOLTZMANN,
            rho_squared_dbm_override: None,
            sigma_squared_dbm_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("permeability_h_per_m", self.permeability_h_per_m),
            (
                "angular_frequency_rad_per_s",
                self.angular_frequency_rad_per_s,
            ),
            ("transmit_power_watts", self.transmit_power_watts),
            ("temperature_kelvin", self.temperature_kelvin),
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_figure_linear", self.noise_figure_linear),
            ("boltzmann_j_per_k", self.boltzmann_j_per_k),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(
                    name,
                    format!("must be positive and finite, got {v}"),
                ));
            }
        }
        self.agent_coil.validate("agent_coil")?;
        self.anchor_coil.validate("anchor_coil")?;
        for (name, v) in [
            ("rho_squared_dbm_override", self.rho_squared_dbm_override),
            (
                "sigma_squared_dbm_override",
                self.sigma_squared_dbm_override,
            ),
        ] {
            if matches!(v, Some(x) if !x.is_finite()) {
                return Err(invalid(name, "must be finite"));
            }
        }
        Ok(())
    }

    /// Effective coupling amplitude in sqrt(W), honoring the override.
    pub fn rho(&self) -> Result<f64> {
        match self.rho_squared_dbm_override {
            Some(dbm) => Ok(dbm_to_watts(dbm).sqrt()),
            None => coupling_constant(self),
        }
    }

    /// Effective noise power in W, honoring the override.
    pub fn sigma2(&self) -> Result<f64> {
        match self.sigma_squared_dbm_override {
            Some(dbm) => Ok(dbm_to_watts(dbm)),
            None => noise_variance(self),
        }
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }
}

/// Closed-form `rho = w mu S_ag S_anc N_ag N_anc sqrt(P_t) / (4 pi sqrt(R_ag R_anc))`.
/// Ignores any override.
pub fn coupling_constant(params: &PhysicalParams) -> Result<f64> {
    params.validate()?;
    let ag = &params.agent_coil;
    let an = &params.anchor_coil;
    Ok(params.angular_frequency_rad_per_s
        * params.permeability_h_per_m
        * ag.surface_area_m2
        * an.surface_area_m2
        * f64::from(ag.turns)
        * f64::from(an.turns)
        * params.transmit_power_watts.sqrt()
        / (4.0 * PI * (ag.resistance_ohm * an.resistance_ohm).sqrt()))
}

/// Thermal noise power `k_B T F B`. Ignores any override.
pub fn noise_variance(params: &PhysicalParams) -> Result<f64> {
    params.validate()?;
    Ok(params.boltzmann_j_per_k
        * params.temperature_kelvin
        * params.noise_figure_linear
        * params.bandwidth_hz)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub index: usize,
    pub position: Vec3,
    pub orientation: UnitVec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTopology {
    anchors: Vec<Anchor>,
}

impl AnchorTopology {
    pub fn new(anchors: Vec<Anchor>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(invalid("anchors", "topology needs at least one anchor"));
        }
        for (i, a) in anchors.iter().enumerate() {
            if !a.position.iter().all(|v| v.is_finite()) {
                return Err(invalid(
                    "anchors",
                    format!("anchor {} position not finite", a.index),
                ));
            }
            for b in &anchors[..i] {
                if a.index == b.index {
                    return Err(invalid("anchors", format!("duplicate index {}", a.index)));
                }
                if (a.position - b.position).norm() < COINCIDENCE_EPS {
                    return Err(invalid(
                        "anchors",
                        format!("anchors {} and {} share a position", b.index, a.index),
                    ));
                }
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkGeometry {
    pub distance: f64,
    pub direction: UnitVec3,
    pub scaled_field: Vec3,
}

pub fn link_geometry(agent_pos: &Vec3, anchor: &Anchor) -> Result<LinkGeometry> {
    let delta = agent_pos - anchor.position;
    let distance = delta.norm();
    if !(distance >= COINCIDENCE_EPS) {
        return Err(Error::SingularGeometry {
            anchor: anchor.index,
        });
    }
    let e = delta / distance;
    let o_n = anchor.orientation.into_inner();
    let scaled_field = 1.5 * e * e.dot(&o_n) - 0.5 * o_n;
    Ok(LinkGeometry {
        distance,
        direction: Unit::new_unchecked(e),
        scaled_field,
    })
}

/// The 3x3 field matrix `3/2 e e^T - 1/2 I`.
pub fn field_matrix(e: &Vec3) -> Matrix3<f64> {
    1.5 * e * e.transpose() - 0.5 * Matrix3::identity()
}

pub fn signal(agent: &Pose, anchor: &Anchor, rho: f64) -> Result<f64> {
    let g = link_geometry(&agent.position, anchor)?;
    Ok(rho / g.distance.powi(3) * g.scaled_field.dot(&agent.orientation_vector()))
}

/// Observed (or noiseless) amplitudes at the N anchors, unit sqrt(W).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementVector {
    pub values: Vec<f64>,
}

impl MeasurementVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn check_len(&self, topology: &AnchorTopology) -> Result<()> {
        if self.len() != topology.len() {
            return Err(Error::DimensionMismatch {
                expected: topology.len(),
                actual: self.len(),
            });
        }
        Ok(())
    }
}

impl std::ops::Neg for MeasurementVector {
    type Output = Self;

    fn neg(self) -> Self {
        Self::new(self.values.into_iter().map(|v| -v).collect())
    }
}

/// Noiseless signal vector `rho D^-3 B^T o`.
pub fn forward_model(
    agent: &Pose,
    topology: &AnchorTopology,
    rho: f64,
) -> Result<MeasurementVector> {
    let o = agent.orientation_vector();
    topology
        .anchors()
        .iter()
        .map(|a| {
            let g = link_geometry(&agent.position, a)?;
            Ok(rho / g.distance.powi(3) * g.scaled_field.dot(&o))
        })
        .collect::<Result<Vec<_>>>()
        .map(MeasurementVector::new)
}

/// Dipole-model mutual inductance `mu/(2 pi) S_ag S_anc N_ag N_anc d^-3 b^T o_ag`.
pub fn mutual_inductance(agent: &Pose, anchor: &Anchor, params: &PhysicalParams) -> Result<f64> {
    params.validate()?;
    let g = link_geometry(&agent.position, anchor)?;
    let ag = &params.agent_coil;
    let an = &params.anchor_coil;
    Ok(params.permeability_h_per_m / TAU
        * ag.surface_area_m2
        * an.surface_area_m2
        * f64::from(ag.turns)
        * f64::from(an.turns)
        / g.distance.powi(3)
        * g.scaled_field.dot(&agent.orientation_vector()))
}

/// Uniform direction on the sphere from a normalized isotropic Gaussian draw.
pub fn sample_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> UnitVec3 {
    loop {
        let v = Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        // A zero draw has probability zero but would break normalization.
        if let Some(u) = Unit::try_new(v, 1e-300) {
            return u;
        }
    }
}

/// Monte Carlo `q`-quantile of the power alignment factor `(b^T o_ag)^2` in
/// dB relative to a coaxial link, with `e`, `o_n` and `o_ag` independent and
/// uniform on the sphere.
pub fn alignment_loss_percentile(q: f64, samples: usize, seed: u64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid("q", format!("{q} not in (0, 1)")));
    }
    if samples < 10_000 {
        return Err(invalid("samples", "need at least 10^4 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut factors: Vec<f64> = (0..samples)
        .map(|_| {
            let e = sample_unit_vector(&mut rng).into_inner();
            let o_n = sample_unit_vector(&mut rng).into_inner();
            let o_ag = sample_unit_vector(&mut rng).into_inner();
            let b = 1.5 * e * e.dot(&o_n) - 0.5 * o_n;
            b.dot(&o_ag).powi(2)
        })
        .collect();
    // nearest-rank quantile
    let k = ((q * samples as f64).ceil() as usize).clamp(1, samples) - 1;
    let (_, v, _) = factors.select_nth_unstable_by(k, f64::total_cmp);
    Ok(ratio_to_db(*v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerCurveRow {
    pub distance_m: f64,
    pub coaxial_dbm: f64,
    pub misaligned_dbm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerCurve {
    pub rows: Vec<PowerCurveRow>,
    pub rho_squared_dbm: f64,
    pub noise_dbm: f64,
    pub alignment_db: f64,
    /// Coaxial SNR = 0 dB distance `(rho^2 / sigma^2)^(1/6)`.
    pub coaxial_crossing_m: f64,
    /// Coaxial SNR = 10 dB distance.
    pub coaxial_crossing_10db_m: f64,
    /// Misaligned SNR = 0 dB distance.
    pub misaligned_crossing_m: f64,
    /// Misaligned SNR = 10 dB distance.
    pub misaligned_crossing_10db_m: f64,
}

/// Received power `rho^2 / d^6` over a distance grid, coaxial and attenuated
/// by `alignment_db`.
pub fn power_curve(
    params: &PhysicalParams,
    d_grid: &[f64],
    alignment_db: f64,
) -> Result<PowerCurve> {
    let rho2 = params.rho()?.powi(2);
    let sigma2 = params.sigma2()?;
    if let Some(d) = d_grid.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(invalid("d_grid", format!("distance {d} must be positive")));
    }
    let rho2_dbm = watts_to_dbm(rho2);
    let rows = d_grid
        .iter()
        .map(|&d| {
            let coaxial_dbm = rho2_dbm - 60.0 * d.log10();
            PowerCurveRow {
                distance_m: d,
                coaxial_dbm,
                misaligned_dbm: coaxial_dbm + alignment_db,
            }
        })
        .collect();
    let crossing = |snr_db: f64, offset_db: f64| {
        (rho2 * db_to_ratio(offset_db) / (sigma2 * db_to_ratio(snr_db))).powf(1.0 / 6.0)
    };
    Ok(PowerCurve {
        rows,
        rho_squared_dbm: rho2_dbm,
        noise_dbm: watts_to_dbm(sigma2),
        alignment_db,
        coaxial_crossing_m: crossing(0.0, 0.0),
        coaxial_crossing_10db_m: crossing(10.0, 0.0),
        misaligned_crossing_m: crossing(0.0, alignment_db),
        misaligned_crossing_10db_m: crossing(10.0, alignment_db),
    })
}
