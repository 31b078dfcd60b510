//! Experiment drivers. Every trial draws from its own seeded streams, so
//! results do not depend on execution order or thread count.

use std::f64::consts::PI;

use rayon::prelude::*;

use super::{
    derive_seed, generate_topology, median, quantile, sample_deployment, simulate_measurement,
    trial_rng, Cell, ExperimentConfig, Room, Table, STREAM_ALIGNMENT, STREAM_DEPLOYMENT,
    STREAM_INIT, STREAM_NOISE,
};
use crate::error::Result;
use crate::estimators::{self, Algorithm, InitSampler, PoseEstimate};
use crate::fisher::{bounds_with_cap, known_orientation_peb, BoundReport};
use crate::lm::Termination;
use crate::physics::{
    alignment_loss_percentile, power_curve, AnchorTopology, Pose, PowerCurve, Vec3,
};

/// Tables produced by one experiment, in output order.
pub trait ExperimentOutput {
    fn tables(&self) -> Vec<Table>;
}

pub fn run_topology(config: &ExperimentConfig) -> Result<Table> {
    config.validate()?;
    let topology = generate_topology(config.anchor_count, &config.room)?;
    Ok(topology_table(&topology))
}

fn topology_table(topology: &AnchorTopology) -> Table {
    let mut t = Table::new(
        "topology",
        &[
            "index",
            "x_m",
            "y_m",
            "z_m",
            "orientation_x",
            "orientation_y",
            "orientation_z",
        ],
    );
    for a in topology.anchors() {
        t.push(vec![
            a.index.into(),
            a.position.x.into(),
            a.position.y.into(),
            a.position.z.into(),
            a.orientation.x.into(),
            a.orientation.y.into(),
            a.orientation.z.into(),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerCurveOutput {
    pub curve: PowerCurve,
    /// Monte Carlo alignment loss used for the misaligned curve, dB.
    pub alignment_loss_db: f64,
    /// Fitted slope of the coaxial curve over the whole grid, dB per decade.
    pub slope_db_per_decade: f64,
}

impl ExperimentOutput for PowerCurveOutput {
    fn tables(&self) -> Vec<Table> {
        let c = &self.curve;
        let mut rows = Table::new(
            "power_curve",
            &[
                "distance_m",
                "coaxial_dbm",
                "misaligned_dbm",
                "noise_dbm",
                "noise_plus_10db_dbm",
            ],
        );
        for r in &c.rows {
            rows.push(vec![
                r.distance_m.into(),
                r.coaxial_dbm.into(),
                r.misaligned_dbm.into(),
                c.noise_dbm.into(),
                (c.noise_dbm + 10.0).into(),
            ]);
        }
        let mut summary = Table::new("power_curve_summary", &["quantity", "value", "unit"]);
        for (k, v, u) in [
            ("rho_squared", c.rho_squared_dbm, "dBm"),
            ("sigma_squared", c.noise_dbm, "dBm"),
            ("alignment_loss", self.alignment_loss_db, "dB"),
            ("coaxial_crossing_snr_0db", c.coaxial_crossing_m, "m"),
            ("coaxial_crossing_snr_10db", c.coaxial_crossing_10db_m, "m"),
            ("misaligned_crossing_snr_0db", c.misaligned_crossing_m, "m"),
            (
                "misaligned_crossing_snr_10db",
                c.misaligned_crossing_10db_m,
                "m",
            ),
            ("slope", self.slope_db_per_decade, "dB/decade"),
        ] {
            summary.push(vec![k.into(), v.into(), u.into()]);
        }
        vec![rows, summary]
    }
}

pub fn run_power_curve(config: &ExperimentConfig) -> Result<PowerCurveOutput> {
    config.validate()?;
    let alignment_loss_db = alignment_loss_percentile(
        config.alignment_quantile,
        config.alignment_samples,
        derive_seed(config.seed, STREAM_ALIGNMENT, 0),
    )?;
    let curve = power_curve(&config.params, &config.distance_grid(), alignment_loss_db)?;
    let first = curve.rows.first().expect("nonempty grid");
    let last = curve.rows.last().expect("nonempty grid");
    let decades = (last.distance_m / first.distance_m).log10();
    let slope_db_per_decade = if decades > 0.0 {
        (last.coaxial_dbm - first.coaxial_dbm) / decades
    } else {
        f64::NAN
    };
    Ok(PowerCurveOutput {
        curve,
        alignment_loss_db,
        slope_db_per_decade,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PebSweepPoint {
    pub side_length_m: f64,
    pub anchor_count: usize,
    /// Per-trial 5D PEB (unknown orientation); `None` if unbounded.
    pub peb_unknown_m: Vec<Option<f64>>,
    /// Per-trial PEB with the orientation known and vertical.
    pub peb_known_vertical_m: Vec<Option<f64>>,
}

impl PebSweepPoint {
    fn summarize(values: &[Option<f64>]) -> (usize, usize, f64) {
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        (ok.len(), values.len() - ok.len(), median(&ok))
    }

    pub fn median_unknown(&self) -> f64 {
        Self::summarize(&self.peb_unknown_m).2
    }

    pub fn median_known_vertical(&self) -> f64 {
        Self::summarize(&self.peb_known_vertical_m).2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PebSweepOutput {
    pub points: Vec<PebSweepPoint>,
}

impl ExperimentOutput for PebSweepOutput {
    fn tables(&self) -> Vec<Table> {
        let mut summary = Table::new(
            "peb_sweep",
            &[
                "side_length_m",
                "anchor_count",
                "trials",
                "emitted_unknown",
                "excluded_unknown",
                "median_peb_unknown_m",
                "emitted_known_vertical",
                "excluded_known_vertical",
                "median_peb_known_vertical_m",
            ],
        );
        let mut trials = Table::new(
            "peb_sweep_trials",
            &[
                "side_length_m",
                "anchor_count",
                "trial",
                "peb_unknown_m",
                "peb_known_vertical_m",
            ],
        );
        let opt = |v: Option<f64>| Cell::Float(v.unwrap_or(f64::NAN));
        for p in &self.points {
            let (eu, xu, mu) = PebSweepPoint::summarize(&p.peb_unknown_m);
            let (ek, xk, mk) = PebSweepPoint::summarize(&p.peb_known_vertical_m);
            summary.push(vec![
                p.side_length_m.into(),
                p.anchor_count.into(),
                p.peb_unknown_m.len().into(),
                eu.into(),
                xu.into(),
                mu.into(),
                ek.into(),
                xk.into(),
                mk.into(),
            ]);
            for (i, (u, k)) in p
                .peb_unknown_m
                .iter()
                .zip(&p.peb_known_vertical_m)
                .enumerate()
            {
                trials.push(vec![
                    p.side_length_m.into(),
                    p.anchor_count.into(),
                    i.into(),
                    opt(*u),
                    opt(*k),
                ]);
            }
        }
        vec![summary, trials]
    }
}

pub fn run_peb_sweep(config: &ExperimentConfig) -> Result<PebSweepOutput> {
    config.validate()?;
    let rho = config.params.rho()?;
    let sigma2 = config.params.sigma2()?;
    let mut points = Vec::new();
    for &side in &config.side_lengths_m {
        let room = Room::new(side, side, config.room.height_m);
        for &n in &config.anchor_counts {
            let topology = generate_topology(n, &room)?;
            let per_trial: Vec<(Option<f64>, Option<f64>)> = (0..config.trials)
                .into_par_iter()
                .map(|i| {
                    let mut rng = trial_rng(config.seed, STREAM_DEPLOYMENT, i as u64);
                    let pose = sample_deployment(&mut rng, &room, config.margin_m);
                    let unknown =
                        bounds_with_cap(&pose, &topology, rho, sigma2, config.condition_cap)
                            .ok()
                            .map(|b| b.peb_m);
                    let known =
                        known_orientation_peb(&pose.position, &Vec3::z(), &topology, rho, sigma2)
                            .ok();
                    (unknown, known)
                })
                .collect();
            let (peb_unknown_m, peb_known_vertical_m) = per_trial.into_iter().unzip();
            points.push(PebSweepPoint {
                side_length_m: side,
                anchor_count: n,
                peb_unknown_m,
                peb_known_vertical_m,
            });
        }
    }
    Ok(PebSweepOutput { points })
}

/// Bounds and ML-at-truth statistics for one deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct CrlbRecord {
    pub trial: usize,
    pub truth: Pose,
    pub bounds: BoundReport,
    /// Noise realizations whose ML run finished without a numerical failure.
    pub ml_runs: usize,
    pub ml_rms_position_m: f64,
    pub ml_rms_phi_rad: f64,
    pub ml_rms_theta_rad: f64,
    /// `sqrt(mean(dphi^2 + dtheta^2))`.
    pub ml_rms_angle_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrlbCdfOutput {
    pub records: Vec<CrlbRecord>,
    /// Trials whose Fisher matrix was singular or ill-conditioned.
    pub excluded: usize,
    pub trials: usize,
}

fn fraction(values: impl Iterator<Item = bool>) -> f64 {
    let (hits, total) = values.fold((0usize, 0usize), |(h, t), b| (h + usize::from(b), t + 1));
    if total == 0 {
        f64::NAN
    } else {
        hits as f64 / total as f64
    }
}

impl CrlbCdfOutput {
    pub fn median_peb_m(&self) -> f64 {
        median(
            &self
                .records
                .iter()
                .map(|r| r.bounds.peb_m)
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_peb_over_naive(&self) -> f64 {
        median(
            &self
                .records
                .iter()
                .map(|r| r.bounds.peb_m / r.bounds.naive_peb_m)
                .collect::<Vec<_>>(),
        )
    }

    pub fn fraction_peb_below(&self, threshold_m: f64) -> f64 {
        fraction(self.records.iter().map(|r| r.bounds.peb_m < threshold_m))
    }

    /// Fractions of deployments with the azimuth, polar and combined RMS
    /// angle bounds below `threshold_rad`.
    pub fn fraction_angle_bound_below(&self, threshold_rad: f64) -> [f64; 3] {
        [
            fraction(
                self.records
                    .iter()
                    .map(|r| r.bounds.angle_bound_phi_rad < threshold_rad),
            ),
            fraction(
                self.records
                    .iter()
                    .map(|r| r.bounds.angle_bound_theta_rad < threshold_rad),
            ),
            fraction(
                self.records
                    .iter()
                    .map(|r| r.bounds.angle_bound_rms_rad < threshold_rad),
            ),
        ]
    }

    /// Median over deployments of (ML-at-truth RMS position error / PEB).
    pub fn median_ml_over_peb(&self) -> f64 {
        median(
            &self
                .records
                .iter()
                .filter(|r| r.ml_runs > 0)
                .map(|r| r.ml_rms_position_m / r.bounds.peb_m)
                .collect::<Vec<_>>(),
        )
    }
}

impl ExperimentOutput for CrlbCdfOutput {
    fn tables(&self) -> Vec<Table> {
        let mut columns = vec!["trial", "x_m", "y_m", "z_m", "phi_rad", "theta_rad"];
        columns.extend(BoundReport::CSV_HEADER);
        columns.extend([
            "ml_runs",
            "ml_rms_position_m",
            "ml_rms_phi_rad",
            "ml_rms_theta_rad",
            "ml_rms_angle_rad",
        ]);
        let mut rows = Table::new("crlb_cdf", &columns);
        for r in &self.records {
            let mut row: Vec<Cell> = vec![
                r.trial.into(),
                r.truth.position.x.into(),
                r.truth.position.y.into(),
                r.truth.position.z.into(),
                r.truth.orientation.phi.into(),
                r.truth.orientation.theta.into(),
            ];
            row.extend(r.bounds.fields().map(Cell::Float));
            row.extend([
                r.ml_runs.into(),
                r.ml_rms_position_m.into(),
                r.ml_rms_phi_rad.into(),
                r.ml_rms_theta_rad.into(),
                r.ml_rms_angle_rad.into(),
            ]);
            rows.push(row);
        }
        let one_degree = PI / 180.0;
        let [phi, theta, rms] = self.fraction_angle_bound_below(one_degree);
        let mut summary = Table::new("crlb_cdf_summary", &["quantity", "value"]);
        for (k, v) in [
            ("trials", Cell::from(self.trials)),
            ("emitted", self.records.len().into()),
            ("excluded", self.excluded.into()),
            ("median_peb_m", self.median_peb_m().into()),
            (
                "median_peb_over_naive_peb",
                self.median_peb_over_naive().into(),
            ),
            (
                "fraction_peb_below_0.1m",
                self.fraction_peb_below(0.1).into(),
            ),
            ("fraction_phi_bound_below_1deg", phi.into()),
            ("fraction_theta_bound_below_1deg", theta.into()),
            ("fraction_rms_angle_bound_below_1deg", rms.into()),
            ("median_ml_rms_over_peb", self.median_ml_over_peb().into()),
        ] {
            summary.push(vec![k.into(), v]);
        }
        vec![rows, summary]
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

pub fn run_crlb_cdf(config: &ExperimentConfig) -> Result<CrlbCdfOutput> {
    config.validate()?;
    let rho = config.params.rho()?;
    let sigma2 = config.params.sigma2()?;
    let topology = generate_topology(config.anchor_count, &config.room)?;
    let per_trial: Vec<Result<Option<CrlbRecord>>> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(config.seed, STREAM_DEPLOYMENT, i as u64);
            let truth = sample_deployment(&mut rng, &config.room, config.margin_m);
            let Ok(bounds) = bounds_with_cap(&truth, &topology, rho, sigma2, config.condition_cap)
            else {
                return Ok(None);
            };
            let mut noise = trial_rng(config.seed, STREAM_NOISE, i as u64);
            let (mut se_p, mut se_phi, mut se_theta, mut runs) = (0.0, 0.0, 0.0, 0usize);
            for _ in 0..config.noise_realizations {
                let y = simulate_measurement(&mut noise, &truth, &topology, rho, sigma2)?;
                let Ok(est) = estimators::ml5d(&y, &topology, rho, &truth, &config.solver) else {
                    continue;
                };
                if est.termination == Some(Termination::NumericalFailure) {
                    continue;
                }
                let o = est.orientation.expect("ML5D estimates orientation");
                se_p += (est.position - truth.position).norm_squared();
                se_phi += wrap_angle(o.phi - truth.orientation.phi).powi(2);
                se_theta += (o.theta - truth.orientation.theta).powi(2);
                runs += 1;
            }
            let rms = |s: f64| {
                if runs > 0 {
                    (s / runs as f64).sqrt()
                } else {
                    f64::NAN
                }
            };
            Ok(Some(CrlbRecord {
                trial: i,
                truth,
                bounds,
                ml_runs: runs,
                ml_rms_position_m: rms(se_p),
                ml_rms_phi_rad: rms(se_phi),
                ml_rms_theta_rad: rms(se_theta),
                ml_rms_angle_rad: rms(se_phi + se_theta),
            }))
        })
        .collect();
    let mut records = Vec::new();
    let mut excluded = 0;
    for r in per_trial {
        match r? {
            Some(rec) => records.push(rec),
            None => excluded += 1,
        }
    }
    Ok(CrlbCdfOutput {
        records,
        excluded,
        trials: config.trials,
    })
}

/// One estimator run in the algorithm comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgoRecord {
    pub trial: usize,
    pub algorithm: Algorithm,
    /// Number of random initializations; 0 marks the run initialized at
    /// the true pose.
    pub inits: usize,
    pub init_seed: u64,
    /// `None` when the estimator returned an error.
    pub estimate: Option<PoseEstimate>,
    pub error_m: f64,
}

impl AlgoRecord {
    pub fn success(&self, threshold_m: f64) -> bool {
        self.error_m < threshold_m
    }

    pub fn iterations(&self) -> Option<usize> {
        self.estimate.map(|e| e.iterations)
    }

    pub fn termination(&self) -> &'static str {
        match &self.estimate {
            None => "error",
            Some(PoseEstimate {
                termination: None, ..
            }) => "none",
            Some(PoseEstimate {
                termination: Some(t),
                ..
            }) => t.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoSummary {
    pub algorithm: Algorithm,
    pub inits: usize,
    pub runs: usize,
    pub failures: usize,
    pub success_rate: f64,
    pub median_error_m: f64,
    /// RMS error over this algorithm's successful trials.
    pub rms_error_success_m: f64,
    /// RMS error of the truth-initialized ML fit over the same trials.
    pub reference_rms_m: f64,
    pub median_iterations: f64,
    pub p97_iterations: f64,
    /// Fraction of runs that stopped at the iteration cap.
    pub cap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgoCompareOutput {
    pub records: Vec<AlgoRecord>,
    pub summaries: Vec<AlgoSummary>,
    pub success_threshold_m: f64,
}

impl AlgoCompareOutput {
    pub fn summary(&self, algorithm: Algorithm, inits: usize) -> Option<&AlgoSummary> {
        self.summaries
            .iter()
            .find(|s| s.algorithm == algorithm && s.inits == inits)
    }
}

impl ExperimentOutput for AlgoCompareOutput {
    fn tables(&self) -> Vec<Table> {
        let mut rows = Table::new(
            "algo_compare",
            &[
                "trial",
                "algorithm",
                "inits",
                "seed",
                "error_m",
                "x_hat_m",
                "y_hat_m",
                "z_hat_m",
                "iterations",
                "cost",
                "termination",
                "success",
            ],
        );
        for r in &self.records {
            rows.push(vec![
                r.trial.into(),
                r.algorithm.as_str().into(),
                r.inits.into(),
                r.init_seed.into(),
                r.error_m.into(),
                r.estimate.map_or(f64::NAN, |e| e.position.x).into(),
                r.estimate.map_or(f64::NAN, |e| e.position.y).into(),
                r.estimate.map_or(f64::NAN, |e| e.position.z).into(),
                r.iterations().map_or(Cell::Text(String::new()), Cell::from),
                r.estimate.map_or(f64::NAN, |e| e.residual_cost).into(),
                r.termination().into(),
                r.success(self.success_threshold_m).into(),
            ]);
        }
        let mut summary = Table::new(
            "algo_compare_summary",
            &[
                "algorithm",
                "inits",
                "runs",
                "failures",
                "success_rate",
                "median_error_m",
                "rms_error_success_m",
                "reference_rms_m",
                "median_iterations",
                "p97_iterations",
                "cap_fraction",
            ],
        );
        for s in &self.summaries {
            summary.push(vec![
                s.algorithm.as_str().into(),
                s.inits.into(),
                s.runs.into(),
                s.failures.into(),
                s.success_rate.into(),
                s.median_error_m.into(),
                s.rms_error_success_m.into(),
                s.reference_rms_m.into(),
                s.median_iterations.into(),
                s.p97_iterations.into(),
                s.cap_fraction.into(),
            ]);
        }
        vec![rows, summary]
    }
}

fn record(
    trial: usize,
    algorithm: Algorithm,
    inits: usize,
    init_seed: u64,
    result: Result<PoseEstimate>,
    truth: &Vec3,
) -> AlgoRecord {
    let estimate = result.ok();
    AlgoRecord {
        trial,
        algorithm,
        inits,
        init_seed,
        error_m: estimate.map_or(f64::NAN, |e| e.position_error(truth)),
        estimate,
    }
}

fn compare_trial(
    config: &ExperimentConfig,
    topology: &AnchorTopology,
    rho: f64,
    sigma2: f64,
    i: usize,
) -> Result<Vec<AlgoRecord>> {
    let mut rng = trial_rng(config.seed, STREAM_DEPLOYMENT, i as u64);
    let truth = sample_deployment(&mut rng, &config.room, config.margin_m);
    let y = simulate_measurement(
        &mut trial_rng(config.seed, STREAM_NOISE, i as u64),
        &truth,
        topology,
        rho,
        sigma2,
    )?;
    let init_seed = derive_seed(config.seed, STREAM_INIT, i as u64);
    let sampler = InitSampler::new(Vec3::zeros(), config.room.upper_corner(), init_seed)?;
    let first = sampler.draws(1)[0];
    let p = &truth.position;

    let mut out = vec![record(
        i,
        Algorithm::Ml5d,
        0,
        init_seed,
        estimators::ml5d(&y, topology, rho, &truth, &config.solver),
        p,
    )];
    for &algo in &config.algorithms {
        out.push(record(
            i,
            algo,
            1,
            init_seed,
            estimators::run(algo, &y, topology, rho, &first, &config.solver),
            p,
        ));
    }
    if config.init_count > 1 {
        for &algo in config
            .algorithms
            .iter()
            .filter(|a| **a != Algorithm::Baseline)
        {
            out.push(record(
                i,
                algo,
                config.init_count,
                init_seed,
                estimators::multi_start(
                    algo,
                    &y,
                    topology,
                    rho,
                    &config.solver,
                    config.init_count,
                    &sampler,
                ),
                p,
            ));
        }
    }
    Ok(out)
}

fn summarize(records: &[AlgoRecord], threshold: f64) -> Vec<AlgoSummary> {
    let mut keys: Vec<(Algorithm, usize)> =
        records.iter().map(|r| (r.algorithm, r.inits)).collect();
    keys.sort();
    keys.dedup();
    let reference: std::collections::HashMap<usize, f64> = records
        .iter()
        .filter(|r| r.inits == 0)
        .map(|r| (r.trial, r.error_m))
        .collect();
    keys.into_iter()
        .map(|(algorithm, inits)| {
            let group: Vec<&AlgoRecord> = records
                .iter()
                .filter(|r| r.algorithm == algorithm && r.inits == inits)
                .collect();
            let runs = group.len();
            let failures = group.iter().filter(|r| r.estimate.is_none()).count();
            let errors: Vec<f64> = group.iter().map(|r| r.error_m).collect();
            let successes: Vec<&&AlgoRecord> =
                group.iter().filter(|r| r.success(threshold)).collect();
            let rms = |v: &mut dyn Iterator<Item = f64>| {
                let (s, n) = v.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
                if n == 0 {
                    f64::NAN
                } else {
                    (s / n as f64).sqrt()
                }
            };
            let rms_error_success_m = rms(&mut successes.iter().map(|r| r.error_m));
            let reference_rms_m = rms(&mut successes
                .iter()
                .filter_map(|r| reference.get(&r.trial).copied())
                .filter(|e| e.is_finite()));
            let iterations: Vec<f64> = group
                .iter()
                .filter_map(|r| r.iterations())
                .map(|n| n as f64)
                .collect();
            let capped = group
                .iter()
                .filter(|r| r.termination() == Termination::MaxIterations.as_str())
                .count();
            AlgoSummary {
                algorithm,
                inits,
                runs,
                failures,
                success_rate: successes.len() as f64 / runs as f64,
                median_error_m: median(&errors),
                rms_error_success_m,
                reference_rms_m,
                median_iterations: median(&iterations),
                p97_iterations: quantile(&iterations, 0.97),
                cap_fraction: capped as f64 / runs as f64,
            }
        })
        .collect()
}

pub fn run_algo_compare(config: &ExperimentConfig) -> Result<AlgoCompareOutput> {
    config.validate()?;
    let rho = config.params.rho()?;
    let sigma2 = config.params.sigma2()?;
    let topology = generate_topology(config.anchor_count, &config.room)?;
    let per_trial: Vec<Result<Vec<AlgoRecord>>> = (0..config.trials)
        .into_par_iter()
        .map(|i| compare_trial(config, &topology, rho, sigma2, i))
        .collect();
    let mut records = Vec::new();
    for r in per_trial {
        records.extend(r?);
    }
    let summaries = summarize(&records, config.success_threshold_m);
    Ok(AlgoCompareOutput {
        records,
        summaries,
        success_threshold_m: config.success_threshold_m,
    })
}
