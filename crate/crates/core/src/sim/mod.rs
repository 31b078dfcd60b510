//! Monte Carlo harness: anchor layouts, random deployments, noisy
//! measurements and the experiment drivers behind the CLI.

mod config;
mod experiments;
mod table;

pub use config::{ExperimentConfig, Room};
pub use experiments::{
    run_algo_compare, run_crlb_cdf, run_peb_sweep, run_power_curve, run_topology,
    AlgoCompareOutput, AlgoRecord, AlgoSummary, CrlbCdfOutput, CrlbRecord, ExperimentOutput,
    PebSweepOutput, PebSweepPoint, PowerCurveOutput,
};
pub use table::{Cell, Format, Table};

use nalgebra::Unit;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::physics::{
    forward_model, sample_unit_vector, Anchor, AnchorTopology, MeasurementVector, Pose, Vec3,
};

/// Recorded in experiment metadata.
pub const RNG_ALGORITHM: &str =
    "ChaCha8 (rand_chacha 0.9), per-trial seeds = splitmix64(seed, stream, trial)";

/// Per-trial random streams.
pub const STREAM_DEPLOYMENT: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_ALIGNMENT: u64 = 4;

/// Interior margin kept between sampled agents and the walls.
pub const DEFAULT_MARGIN_M: f64 = 0.2;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `(stream, index)` derived from the experiment seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

pub fn trial_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Deterministic wall layout: anchors go round-robin to the four walls,
/// evenly spaced along each wall, with mounting heights cycling through
/// 1/6, 1/2 and 5/6 of the room height. Each coil faces into the room.
pub fn generate_topology(n: usize, room: &Room) -> Result<AnchorTopology> {
    if n == 0 {
        return Err(crate::error::invalid(
            "anchor_count",
            "need at least one anchor",
        ));
    }
    room.validate()?;
    let (sx, sy, h) = (room.side_x_m, room.side_y_m, room.height_m);
    let per_wall: [usize; 4] = std::array::from_fn(|w| (n + 3 - w) / 4);
    let heights = [0.5 / 3.0, 1.5 / 3.0, 2.5 / 3.0].map(|f| f * h);
    let anchors = (0..n)
        .map(|k| {
            let wall = k % 4;
            let frac = ((k / 4) as f64 + 0.5) / per_wall[wall] as f64;
            let z = heights[k % 3];
            let (position, normal) = match wall {
                0 => (Vec3::new(frac * sx, 0.0, z), Vec3::y()),
                1 => (Vec3::new(sx, frac * sy, z), -Vec3::x()),
                2 => (Vec3::new(sx - frac * sx, sy, z), -Vec3::y()),
                _ => (Vec3::new(0.0, sy - frac * sy, z), Vec3::x()),
            };
            Anchor {
                index: k,
                position,
                orientation: Unit::new_unchecked(normal),
            }
        })
        .collect();
    AnchorTopology::new(anchors)
}

/// Uniform position inside the room shrunk by `margin` on every side, with
/// an orientation uniform on the sphere.
pub fn sample_deployment<R: Rng + ?Sized>(rng: &mut R, room: &Room, margin: f64) -> Pose {
    let hi = [room.side_x_m, room.side_y_m, room.height_m];
    let p = Vec3::from_fn(|i, _| rng.random_range(margin..hi[i] - margin));
    Pose::from_vector(p, &sample_unit_vector(rng))
}

/// Noiseless signals plus i.i.d. `N(0, sigma2)` noise.
pub fn simulate_measurement<R: Rng + ?Sized>(
    rng: &mut R,
    pose: &Pose,
    topology: &AnchorTopology,
    rho: f64,
    sigma2: f64,
) -> Result<MeasurementVector> {
    let mut y = forward_model(pose, topology, rho)?;
    let sigma = sigma2.sqrt();
    for v in &mut y.values {
        let w: f64 = rng.sample(StandardNormal);
        *v += sigma * w;
    }
    Ok(y)
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile of the finite values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}
