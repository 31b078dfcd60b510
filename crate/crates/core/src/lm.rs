//! A small Levenberg-Marquardt minimizer for `sum_i r_i(x)^2`.
//!
//! Each iteration solves `(J^T J + lambda I) dx = -J^T r`. A step that lowers
//! the cost is accepted and `lambda` shrinks by `damping_decrease`; otherwise
//! `lambda` grows by `damping_increase` and the step is retried. Retries are
//! not counted as iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A least-squares problem in `k` parameters with `m >= k` residuals.
pub trait ResidualProblem {
    fn num_params(&self) -> usize;

    fn num_residuals(&self) -> usize;

    fn residuals(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Analytic `m x k` Jacobian. `None` selects forward differences.
    fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Terminate once a proposed update is shorter than this (Euclidean).
    pub min_step: f64,
    /// Initial `lambda` relative to the mean diagonal of `J^T J`.
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    /// Terminate once every Jacobian column is this close to orthogonal to
    /// the residual (cosine).
    pub gradient_tolerance: f64,
    /// Relative forward-difference step when no Jacobian is supplied.
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            min_step: 1e-6,
            initial_damping: 1e-3,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            gradient_tolerance: 1e-10,
            fd_step: 1e-7,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.min_step > 0.0
            && self.initial_damping > 0.0
            && self.damping_increase > 1.0
            && self.damping_decrease > 1.0
            && self.gradient_tolerance > 0.0
            && self.fd_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::error::invalid("solver options", format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Termination {
    StepTolerance,
    GradientTolerance,
    MaxIterations,
    NumericalFailure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::StepTolerance => "step-tolerance",
            Termination::GradientTolerance => "gradient-tolerance",
            Termination::MaxIterations => "max-iterations",
            Termination::NumericalFailure => "numerical-failure",
        }
    }
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverResult {
    pub argmin: DVector<f64>,
    /// `sum_i r_i(argmin)^2`.
    pub cost: f64,
    /// Accepted parameter updates.
    pub iterations: usize,
    pub termination: Termination,
}

// Consecutive rejected steps after which no progress is deemed possible.
const MAX_RETRIES: usize = 80;

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn forward_difference<P: ResidualProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    r: &DVector<f64>,
    rel_step: f64,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(r.len(), x.len());
    let mut xh = x.clone();
    for j in 0..x.len() {
        let h = rel_step * x[j].abs().max(1.0);
        xh[j] = x[j] + h;
        let rh = problem.residuals(&xh);
        jac.set_column(j, &((rh - r) / h));
        xh[j] = x[j];
    }
    jac
}

fn jacobian<P: ResidualProblem + ?Sized>(
    problem: &P,
    x: &DVector<f64>,
    r: &DVector<f64>,
    options: &SolverOptions,
) -> DMatrix<f64> {
    problem
        .jacobian(x)
        .unwrap_or_else(|| forward_difference(problem, x, r, options.fd_step))
}

/// Largest cosine between a Jacobian column and the residual vector.
fn gradient_cosine(jac: &DMatrix<f64>, r: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    let rn = r.norm();
    if rn == 0.0 {
        return 0.0;
    }
    (0..jac.ncols())
        .filter_map(|j| {
            let cn = jac.column(j).norm();
            (cn > 0.0).then(|| grad[j].abs() / (cn * rn))
        })
        .fold(0.0, f64::max)
}

pub fn solve<P: ResidualProblem + ?Sized>(
    problem: &P,
    x0: &DVector<f64>,
    options: &SolverOptions,
) -> Result<SolverResult> {
    options.validate()?;
    let k = problem.num_params();
    let m = problem.num_residuals();
    if x0.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: x0.len(),
        });
    }
    if m < k {
        return Err(Error::Solver(format!("{m} residuals for {k} parameters")));
    }
    if !all_finite(x0) {
        return Err(Error::Solver("initial point is not finite".into()));
    }

    let mut x = x0.clone();
    let mut r = problem.residuals(&x);
    if r.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: r.len(),
        });
    }
    if !all_finite(&r) {
        return Ok(SolverResult {
            argmin: x,
            cost: f64::INFINITY,
            iterations: 0,
            termination: Termination::NumericalFailure,
        });
    }
    let mut cost = r.norm_squared();
    let mut iterations = 0;
    let mut lambda: Option<f64> = None;

    let finish = |x: DVector<f64>, cost: f64, iterations: usize, termination| {
        Ok(SolverResult {
            argmin: x,
            cost,
            iterations,
            termination,
        })
    };

    loop {
        let jac = jacobian(problem, &x, &r, options);
        if !jac.iter().all(|v| v.is_finite()) {
            return finish(x, cost, iterations, Termination::NumericalFailure);
        }
        let grad = jac.transpose() * &r;
        if cost == 0.0 || gradient_cosine(&jac, &r, &grad) <= options.gradient_tolerance {
            return finish(x, cost, iterations, Termination::GradientTolerance);
        }
        if iterations >= options.max_iterations {
            return finish(x, cost, iterations, Termination::MaxIterations);
        }
        let jtj = jac.transpose() * &jac;
        let mean_diag = jtj.trace() / k as f64;
        let floor = 1e-15 * mean_diag;
        let mut lam = lambda
            .unwrap_or(options.initial_damping * mean_diag)
            .max(floor);

        let mut accepted = false;
        for _ in 0..MAX_RETRIES {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lam;
            }
            let Some(chol) = a.cholesky() else {
                lam *= options.damping_increase;
                continue;
            };
            let step = -chol.solve(&grad);
            if step.norm() < options.min_step {
                return finish(x, cost, iterations, Termination::StepTolerance);
            }
            let x_new = &x + &step;
            let r_new = problem.residuals(&x_new);
            if !all_finite(&r_new) {
                return finish(x, cost, iterations, Termination::NumericalFailure);
            }
            let cost_new = r_new.norm_squared();
            if cost_new < cost {
                x = x_new;
                r = r_new;
                cost = cost_new;
                iterations += 1;
                lambda = Some((lam / options.damping_decrease).max(floor));
                accepted = true;
                break;
            }
            lam *= options.damping_increase;
        }
        if !accepted {
            return finish(x, cost, iterations, Termination::StepTolerance);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::RefCell;

    struct Linear {
        a: DVector<f64>,
    }

    impl ResidualProblem for Linear {
        fn num_params(&self) -> usize {
            self.a.len()
        }
        fn num_residuals(&self) -> usize {
            self.a.len()
        }
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            x - &self.a
        }
        fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::identity(self.a.len(), self.a.len()))
        }
    }

    struct Rosenbrock {
        analytic: bool,
    }

    impl ResidualProblem for Rosenbrock {
        fn num_params(&self) -> usize {
            2
        }
        fn num_residuals(&self) -> usize {
            2
        }
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
        fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
            self.analytic
                .then(|| DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]))
        }
    }

    /// Affine residual `M x - c` whose minimizer solves the normal equations.
    struct Affine {
        m: DMatrix<f64>,
        c: DVector<f64>,
    }

    impl ResidualProblem for Affine {
        fn num_params(&self) -> usize {
            self.m.ncols()
        }
        fn num_residuals(&self) -> usize {
            self.m.nrows()
        }
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            &self.m * x - &self.c
        }
        fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(self.m.clone())
        }
    }

    #[test]
    fn linear_problem_converges_in_two_iterations() {
        let p = Linear {
            a: DVector::from_vec(vec![1.0, -2.0, 0.5]),
        };
        let r = solve(
            &p,
            &DVector::from_vec(vec![3.0, 4.0, -1.0]),
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(r.iterations <= 2, "{r:?}");
        assert!(r.cost < 1e-12);
        assert_relative_eq!(r.argmin, p.a, epsilon = 1e-6);
    }

    #[test]
    fn rosenbrock_minimum() {
        for analytic in [true, false] {
            let r = solve(
                &Rosenbrock { analytic },
                &DVector::from_vec(vec![-1.2, 1.0]),
                &SolverOptions::default(),
            )
            .unwrap();
            assert_ne!(r.termination, Termination::MaxIterations);
            assert_relative_eq!(r.argmin, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-8);
        }
    }

    #[test]
    fn random_affine_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (m, k) = (8, 4);
            let mat = DMatrix::from_fn(m, k, |_, _| rng.random_range(-1.0..1.0));
            let x_star = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
            let c = &mat * &x_star;
            let oracle = (mat.transpose() * &mat)
                .lu()
                .solve(&(mat.transpose() * &c))
                .unwrap();
            assert_relative_eq!(oracle, x_star, epsilon = 1e-10);
            let p = Affine { m: mat, c };
            let opts = SolverOptions {
                min_step: 1e-13,
                ..Default::default()
            };
            let r = solve(&p, &DVector::zeros(k), &opts).unwrap();
            assert_relative_eq!(r.argmin, oracle, epsilon = 1e-10);
            assert_ne!(r.termination, Termination::MaxIterations);
        }
    }

    struct Recording<'a, P> {
        inner: &'a P,
        costs: RefCell<Vec<f64>>,
    }

    impl<P: ResidualProblem> ResidualProblem for Recording<'_, P> {
        fn num_params(&self) -> usize {
            self.inner.num_params()
        }
        fn num_residuals(&self) -> usize {
            self.inner.num_residuals()
        }
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            let r = self.inner.residuals(x);
            self.costs.borrow_mut().push(r.norm_squared());
            r
        }
        fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
            self.inner.jacobian(x)
        }
    }

    #[test]
    fn accepted_cost_never_increases() {
        let inner = Rosenbrock { analytic: true };
        let p = Recording {
            inner: &inner,
            costs: RefCell::new(Vec::new()),
        };
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let r = solve(&p, &x0, &SolverOptions::default()).unwrap();
        // The running minimum of evaluated costs is what the solver accepts.
        let costs = p.costs.borrow();
        let mut best = costs[0];
        let mut accepted = 0;
        for &c in costs.iter().skip(1) {
            if c < best {
                best = c;
                accepted += 1;
            }
        }
        assert_eq!(accepted, r.iterations);
        assert_eq!(best, r.cost);
        assert!(r.cost <= costs[0]);
    }

    #[test]
    fn analytic_and_finite_difference_agree() {
        let opts = SolverOptions::default();
        let a = solve(
            &Rosenbrock { analytic: true },
            &DVector::from_vec(vec![0.3, -0.4]),
            &opts,
        )
        .unwrap();
        let b = solve(
            &Rosenbrock { analytic: false },
            &DVector::from_vec(vec![0.3, -0.4]),
            &opts,
        )
        .unwrap();
        assert_relative_eq!(a.argmin, b.argmin, epsilon = 1e-6);
    }

    struct Blows;

    impl ResidualProblem for Blows {
        fn num_params(&self) -> usize {
            1
        }
        fn num_residuals(&self) -> usize {
            1
        }
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            let v = if x[0] < 0.5 { x[0] - 1.0 } else { f64::NAN };
            DVector::from_element(1, v)
        }
        fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_element(1, 1, 1.0))
        }
    }

    #[test]
    fn non_finite_residual_stops_at_last_good_iterate() {
        let r = solve(
            &Blows,
            &DVector::from_element(1, 0.0),
            &SolverOptions::default(),
        )
        .unwrap();
        assert_eq!(r.termination, Termination::NumericalFailure);
        assert_eq!(r.argmin[0], 0.0);
        assert_eq!(r.cost, 1.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Linear {
            a: DVector::from_vec(vec![1.0, 2.0]),
        };
        assert!(solve(
            &p,
            &DVector::from_vec(vec![f64::NAN, 0.0]),
            &SolverOptions::default()
        )
        .is_err());
        assert!(solve(&p, &DVector::from_vec(vec![0.0]), &SolverOptions::default()).is_err());
        let bad = SolverOptions {
            min_step: 0.0,
            ..Default::default()
        };
        assert!(solve(&p, &DVector::zeros(2), &bad).is_err());
    }
}
