//! Elastic-net linear regression by covariance-update coordinate descent,
//! with the penalty chosen by K-fold cross-validation.
//!
//! The objective, on standardized features and a centered response, is
//! `(1/2n)‖y − Xb‖² + λ[α‖b‖₁ + (1−α)/2‖b‖²]`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::RatioError;
use crate::rng::{streams, SeedTree};

/// `y ~ N(intercept + coefficients·features, noise_variance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianLinearModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub noise_variance: f64,
}

impl GaussianLinearModel {
    pub fn predict(&self, features: &[f64]) -> Result<f64, RatioError> {
        if features.len() != self.coefficients.len() {
            return Err(RatioError::DimensionMismatch {
                expected: self.coefficients.len(),
                found: features.len(),
            });
        }
        Ok(self.predict_unchecked(features))
    }

    pub(crate) fn predict_unchecked(&self, features: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(features).map(|(b, f)| b * f).sum::<f64>()
    }

    /// Prediction on `[x, z...]` without materializing the concatenation.
    pub(crate) fn predict_xz(&self, x: f64, z: &[f64]) -> f64 {
        let (bx, bz) = self.coefficients.split_first().expect("model has an x coefficient");
        self.intercept + bx * x + bz.iter().zip(z).map(|(b, f)| b * f).sum::<f64>()
    }
}

/// Per-feature centering and scaling applied before coordinate descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Population standard deviations; `1.0` for constant features.
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElasticNetOptions {
    pub mixing: f64,
    /// Penalty values to search; `None` builds the default log-spaced grid.
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: usize,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for ElasticNetOptions {
    fn default() -> Self {
        ElasticNetOptions {
            mixing: 0.5,
            lambda_grid: None,
            folds: 5,
            tolerance: 1e-7,
            max_sweeps: 100_000,
        }
    }
}

impl ElasticNetOptions {
    pub fn with_grid(mut self, grid: Vec<f64>) -> Self {
        self.lambda_grid = Some(grid);
        self
    }

    pub fn with_mixing(mut self, mixing: f64) -> Self {
        self.mixing = mixing;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticNetFit {
    pub model: GaussianLinearModel,
    pub lambda_chosen: f64,
    pub mixing: f64,
    pub cv_folds: usize,
    pub standardization: Standardization,
    /// Searched penalties, in path order (decreasing).
    pub lambda_grid: Vec<f64>,
    /// Mean held-out squared error per grid value.
    pub cv_errors: Vec<f64>,
}

/// Sufficient statistics of a block of rows.
#[derive(Clone)]
struct Moments {
    n: f64,
    sx: DVector<f64>,
    sxx: DMatrix<f64>,
    sy: f64,
    sxy: DVector<f64>,
    syy: f64,
}

impl Moments {
    fn of_rows(x: &DMatrix<f64>, y: &[f64], rows: &[usize]) -> Self {
        let p = x.ncols();
        let sub = DMatrix::from_fn(rows.len(), p, |i, j| x[(rows[i], j)]);
        let ys = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
        Moments {
            n: rows.len() as f64,
            sx: DVector::from_fn(p, |j, _| sub.column(j).sum()),
            sxx: sub.tr_mul(&sub),
            sy: ys.sum(),
            sxy: sub.tr_mul(&ys),
            syy: ys.dot(&ys),
        }
    }

    fn minus(&self, other: &Moments) -> Moments {
        Moments {
            n: self.n - other.n,
            sx: &self.sx - &other.sx,
            sxx: &self.sxx - &other.sxx,
            sy: self.sy - other.sy,
            sxy: &self.sxy - &other.sxy,
            syy: self.syy - other.syy,
        }
    }

    fn standardization(&self) -> Standardization {
        let p = self.sx.len();
        let means: Vec<f64> = (0..p).map(|j| self.sx[j] / self.n).collect();
        let scales = (0..p)
            .map(|j| {
                let var = self.sxx[(j, j)] / self.n - means[j] * means[j];
                let sd = var.max(0.0).sqrt();
                if sd > 1e-12 * (1.0 + means[j].abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardization { means, scales }
    }

    /// Gram matrix, cross-covariance, and centered response energy on the
    /// standardized scale given by `st`.
    fn problem(&self, st: &Standardization) -> Problem {
        let p = self.sx.len();
        let n = self.n;
        let ybar = self.sy / n;
        let mut gram = DMatrix::zeros(p, p);
        let mut cov = DVector::zeros(p);
        for j in 0..p {
            let (mj, sj) = (st.means[j], st.scales[j]);
            for k in 0..=j {
                let (mk, sk) = (st.means[k], st.scales[k]);
                let raw = self.sxx[(j, k)] - mj * self.sx[k] - mk * self.sx[j] + n * mj * mk;
                let g = raw / (n * sj * sk);
                gram[(j, k)] = g;
                gram[(k, j)] = g;
            }
            cov[j] = (self.sxy[j] - mj * self.sy - ybar * self.sx[j] + n * mj * ybar) / (n * sj);
        }
        let yy = (self.syy - n * ybar * ybar) / n;
        Problem { gram, cov, yy, ybar }
    }
}

/// Quadratic form of the standardized least-squares problem.
pub struct Problem {
    pub gram: DMatrix<f64>,
    pub cov: DVector<f64>,
    /// `‖y − ȳ‖² / n`.
    pub yy: f64,
    pub ybar: f64,
}

impl Problem {
    /// Builds the problem directly from already-standardized data.
    pub fn from_standardized(x: &DMatrix<f64>, y: &[f64]) -> Self {
        let n = x.nrows() as f64;
        let ybar = y.iter().sum::<f64>() / n;
        let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - ybar));
        Problem { gram: x.tr_mul(x) / n, cov: x.tr_mul(&yc) / n, yy: yc.dot(&yc) / n, ybar }
    }

    pub fn objective(&self, b: &DVector<f64>, lambda: f64, mixing: f64) -> f64 {
        let quad = 0.5 * self.yy - self.cov.dot(b) + 0.5 * b.dot(&(&self.gram * b));
        let l1: f64 = b.iter().map(|v| v.abs()).sum();
        quad + lambda * (mixing * l1 + 0.5 * (1.0 - mixing) * b.dot(b))
    }
}

pub fn soft_threshold(value: f64, threshold: f64) -> f64 {
    if value > threshold {
        value - threshold
    } else if value < -threshold {
        value + threshold
    } else {
        0.0
    }
}

/// Outcome of coordinate descent at a single penalty.
pub struct DescentResult {
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after each sweep when tracing was requested.
    pub trace: Vec<f64>,
}

/// Runs covariance-update coordinate descent from the warm start `b`.
pub fn coordinate_descent(
    problem: &Problem,
    b: &mut DVector<f64>,
    lambda: f64,
    mixing: f64,
    tolerance: f64,
    max_sweeps: usize,
    trace: bool,
) -> DescentResult {
    let p = b.len();
    let mut gb = &problem.gram * &*b;
    let l1 = lambda * mixing;
    let l2 = lambda * (1.0 - mixing);
    let mut out = DescentResult { sweeps: 0, converged: false, trace: Vec::new() };
    #[cfg(debug_assertions)]
    let mut previous = problem.objective(b, lambda, mixing);
    while out.sweeps < max_sweeps {
        out.sweeps += 1;
        let mut max_step = 0.0f64;
        for j in 0..p {
            let gjj = problem.gram[(j, j)];
            let denom = gjj + l2;
            let old = b[j];
            let new = if denom > 0.0 {
                soft_threshold(problem.cov[j] - gb[j] + gjj * old, l1) / denom
            } else {
                0.0
            };
            let step = new - old;
            if step != 0.0 {
                b[j] = new;
                gb.axpy(step, &problem.gram.column(j), 1.0);
                max_step = max_step.max(step.abs());
            }
        }
        #[cfg(debug_assertions)]
        {
            let current = problem.objective(b, lambda, mixing);
            debug_assert!(
                current <= previous + 1e-12 * (1.0 + previous.abs()),
                "objective increased: {previous} -> {current}"
            );
            previous = current;
        }
        if trace {
            out.trace.push(problem.objective(b, lambda, mixing));
        }
        if max_step < tolerance {
            out.converged = true;
            break;
        }
    }
    out
}

fn default_grid(problem: &Problem, mixing: f64) -> Vec<f64> {
    let lambda_max = problem.cov.iter().fold(0.0f64, |m, c| m.max(c.abs())) / mixing.max(1e-3);
    if lambda_max <= 0.0 {
        return vec![0.0];
    }
    let count = 100;
    let ratio = 1e-4f64;
    (0..count)
        .map(|i| lambda_max * ratio.powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// Walks the penalty path from the start of `grid` up to and including
/// `stop`, returning the coefficients at each visited penalty.
fn solve_path(
    problem: &Problem,
    grid: &[f64],
    stop: usize,
    opts: &ElasticNetOptions,
) -> Result<Vec<DVector<f64>>, RatioError> {
    let mut b = DVector::zeros(problem.cov.len());
    let mut path = Vec::with_capacity(stop + 1);
    for &lambda in &grid[..=stop] {
        let res = coordinate_descent(problem, &mut b, lambda, opts.mixing, opts.tolerance, opts.max_sweeps, false);
        if !res.converged {
            return Err(RatioError::NonConvergence { lambda, sweeps: res.sweeps, coefficients: b.iter().copied().collect() });
        }
        path.push(b.clone());
    }
    Ok(path)
}

fn to_original_scale(b: &DVector<f64>, st: &Standardization, ybar: f64) -> (Vec<f64>, f64) {
    let coefficients: Vec<f64> = b.iter().zip(&st.scales).map(|(v, s)| v / s).collect();
    let intercept = ybar - coefficients.iter().zip(&st.means).map(|(c, m)| c * m).sum::<f64>();
    (coefficients, intercept)
}

fn validate(x: &DMatrix<f64>, y: &[f64], opts: &ElasticNetOptions) -> Result<(), RatioError> {
    if x.nrows() != y.len() {
        return Err(RatioError::DimensionMismatch { expected: x.nrows(), found: y.len() });
    }
    if !(0.0..=1.0).contains(&opts.mixing) {
        return Err(RatioError::InvalidOption(format!("mixing must lie in [0, 1], got {}", opts.mixing)));
    }
    if opts.folds < 2 {
        return Err(RatioError::InvalidOption(format!("need at least 2 folds, got {}", opts.folds)));
    }
    if let Some(grid) = &opts.lambda_grid {
        if grid.is_empty() || grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(RatioError::InvalidOption("lambda grid must be nonempty, finite and nonnegative".into()));
        }
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(RatioError::NonFinite);
    }
    Ok(())
}

/// Fits the elastic net, picking λ by minimum mean cross-validated squared
/// error over `opts.folds` folds drawn from `seed`.
pub fn fit_elastic_net(
    x: &DMatrix<f64>,
    y: &[f64],
    opts: &ElasticNetOptions,
    seed: u64,
) -> Result<ElasticNetFit, RatioError> {
    validate(x, y, opts)?;
    let n = x.nrows();
    let folds = opts.folds;
    if n / folds < 2 || n - n / folds < 2 {
        return Err(RatioError::SingularDesign { rows: n, folds });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedTree::new(seed).child(streams::CV_FOLDS).rng());
    let fold_rows: Vec<Vec<usize>> = (0..folds)
        .map(|f| {
            let mut rows: Vec<usize> = order.iter().skip(f).step_by(folds).copied().collect();
            rows.sort_unstable();
            rows
        })
        .collect();

    let all: Vec<usize> = (0..n).collect();
    let total = Moments::of_rows(x, y, &all);
    let standardization = total.standardization();
    let full = total.problem(&standardization);

    let mut grid = match &opts.lambda_grid {
        Some(g) => g.clone(),
        None => default_grid(&full, opts.mixing),
    };
    grid.sort_by(|a, b| b.total_cmp(a));

    let mut cv_errors = vec![0.0; grid.len()];
    for rows in &fold_rows {
        let train = total.minus(&Moments::of_rows(x, y, rows));
        let st = train.standardization();
        let problem = train.problem(&st);
        let path = solve_path(&problem, &grid, grid.len() - 1, opts)?;
        for (err, b) in cv_errors.iter_mut().zip(&path) {
            let (coef, intercept) = to_original_scale(b, &st, problem.ybar);
            let sse: f64 = rows
                .iter()
                .map(|&i| {
                    let pred = intercept + x.row(i).iter().zip(&coef).map(|(a, c)| a * c).sum::<f64>();
                    (y[i] - pred).powi(2)
                })
                .sum();
            *err += sse / rows.len() as f64 / folds as f64;
        }
    }

    let chosen = cv_errors
        .iter()
        .enumerate()
        .fold(0, |best, (i, e)| if *e < cv_errors[best] { i } else { best });

    let model = final_model(x, y, &standardization, &grid, chosen, opts)?;
    Ok(ElasticNetFit {
        model,
        lambda_chosen: grid[chosen],
        mixing: opts.mixing,
        cv_folds: folds,
        standardization,
        lambda_grid: grid,
        cv_errors,
    })
}

fn final_model(
    x: &DMatrix<f64>,
    y: &[f64],
    st: &Standardization,
    grid: &[f64],
    chosen: usize,
    opts: &ElasticNetOptions,
) -> Result<GaussianLinearModel, RatioError> {
    let all: Vec<usize> = (0..x.nrows()).collect();
    let problem = Moments::of_rows(x, y, &all).problem(st);
    let path = solve_path(&problem, grid, chosen, opts)?;
    let b = &path[chosen];
    let (coefficients, intercept) = to_original_scale(b, st, problem.ybar);
    let nonzero = b.iter().filter(|v| **v != 0.0).count();
    let rss: f64 = (0..x.nrows())
        .map(|i| {
            let pred = intercept + x.row(i).iter().zip(&coefficients).map(|(a, c)| a * c).sum::<f64>();
            (y[i] - pred).powi(2)
        })
        .sum();
    let dof = (x.nrows() as f64 - nonzero as f64 - 1.0).max(1.0);
    Ok(GaussianLinearModel { coefficients, intercept, noise_variance: (rss / dof).max(1e-8) })
}

/// Refits at the stored penalty using the stored standardization.
pub fn refit(fit: &ElasticNetFit, x: &DMatrix<f64>, y: &[f64]) -> Result<GaussianLinearModel, RatioError> {
    let opts = ElasticNetOptions {
        mixing: fit.mixing,
        lambda_grid: Some(fit.lambda_grid.clone()),
        folds: fit.cv_folds,
        ..ElasticNetOptions::default()
    };
    validate(x, y, &opts)?;
    let chosen = fit
        .lambda_grid
        .iter()
        .position(|&l| l == fit.lambda_chosen)
        .ok_or_else(|| RatioError::InvalidOption("chosen lambda is not on the grid".into()))?;
    final_model(x, y, &fit.standardization, &fit.lambda_grid, chosen, &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_design(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = SeedTree::new(seed).rng();
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = (0..n)
            .map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 1)] + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, y)
    }

    #[test]
    fn predict_is_a_dot_product() {
        let zero = GaussianLinearModel { coefficients: vec![0.0; 3], intercept: 0.7, noise_variance: 1.0 };
        assert_eq!(zero.predict(&[1.0, 2.0, 3.0]).unwrap(), 0.7);
        let cancel = GaussianLinearModel { coefficients: vec![1.0, -1.0], intercept: 0.3, noise_variance: 1.0 };
        assert_eq!(cancel.predict(&[3.0, 3.0]).unwrap(), 0.3);
        let m = GaussianLinearModel {
            coefficients: vec![0.5, -1.25, 2.0, 0.0, 3.5],
            intercept: -0.5,
            noise_variance: 1.0,
        };
        let f = [1.5, 2.0, -0.25, 9.0, 0.5];
        let hand = -0.5 + 0.75 - 2.5 - 0.5 + 0.0 + 1.75;
        assert!((m.predict(&f).unwrap() - hand).abs() < 1e-15);
        assert!(m.predict(&[1.0]).is_err());
    }

    #[test]
    fn exact_linear_relation_is_recovered_without_penalty() {
        let mut rng = SeedTree::new(1).rng();
        let x = DMatrix::from_fn(50, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let fit = fit_elastic_net(&x, &y, &ElasticNetOptions::default().with_grid(vec![0.0]), 3).unwrap();
        assert!((fit.model.coefficients[0] - 2.0).abs() < 1e-6);
        assert!(fit.model.intercept.abs() < 1e-6);
        assert_eq!(fit.model.noise_variance, 1e-8);
    }

    #[test]
    fn large_lasso_penalty_zeroes_every_coefficient() {
        let (x, y) = random_design(80, 4, 2);
        let all: Vec<usize> = (0..80).collect();
        let m = Moments::of_rows(&x, &y, &all);
        let p = m.problem(&m.standardization());
        let lambda_max = p.cov.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        let opts = ElasticNetOptions::default().with_mixing(1.0).with_grid(vec![lambda_max * 1.01]);
        let fit = fit_elastic_net(&x, &y, &opts, 0).unwrap();
        assert!(fit.model.coefficients.iter().all(|c| *c == 0.0));
    }

    /// Columns of a 4-level Hadamard pattern: centered, orthogonal, unit population variance.
    pub(crate) fn orthonormal_design(reps: usize) -> DMatrix<f64> {
        let h = [[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]];
        DMatrix::from_fn(4 * reps, 3, |i, j| h[i % 4][j])
    }

    #[test]
    fn orthonormal_lasso_is_soft_thresholded_ols() {
        let x = orthonormal_design(10);
        let mut rng = SeedTree::new(4).rng();
        let y: Vec<f64> = (0..40)
            .map(|i| 0.8 * x[(i, 0)] - 0.3 * x[(i, 1)] + 0.05 * x[(i, 2)] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let n = 40.0;
        let ybar = y.iter().sum::<f64>() / n;
        let ols: Vec<f64> = (0..3).map(|j| (0..40).map(|i| x[(i, j)] * (y[i] - ybar)).sum::<f64>() / n).collect();
        for lambda in [0.0, 0.1, 0.25, 0.5] {
            let opts = ElasticNetOptions::default().with_mixing(1.0).with_grid(vec![lambda]);
            let fit = fit_elastic_net(&x, &y, &opts, 1).unwrap();
            for j in 0..3 {
                let oracle = soft_threshold(ols[j], lambda);
                assert!((fit.model.coefficients[j] - oracle).abs() < 1e-6, "λ={lambda} j={j}");
            }
        }
    }

    #[test]
    fn objective_trace_never_increases() {
        let (x, y) = random_design(120, 8, 5);
        let problem = Problem::from_standardized(&x, &y);
        for (lambda, mixing) in [(0.0, 0.5), (0.05, 0.5), (0.2, 1.0), (0.1, 0.0)] {
            let mut b = DVector::zeros(8);
            let res = coordinate_descent(&problem, &mut b, lambda, mixing, 1e-12, 10_000, true);
            assert!(res.converged);
            assert!(res.trace.windows(2).all(|w| w[1] <= w[0] + 1e-14));
        }
    }

    #[test]
    fn cv_choice_is_on_grid_and_refit_reproduces() {
        let (x, y) = random_design(200, 6, 6);
        let fit = fit_elastic_net(&x, &y, &ElasticNetOptions::default(), 7).unwrap();
        assert!(fit.lambda_grid.contains(&fit.lambda_chosen));
        assert_eq!(fit.lambda_grid.len(), 100);
        let again = refit(&fit, &x, &y).unwrap();
        for (a, b) in again.coefficients.iter().zip(&fit.model.coefficients) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((fit.model.coefficients[0] - 2.0).abs() < 0.2);
        assert!((fit.model.coefficients[1] + 1.0).abs() < 0.2);
        assert_eq!(fit, fit_elastic_net(&x, &y, &ElasticNetOptions::default(), 7).unwrap());
    }

    #[test]
    fn too_few_rows_per_fold() {
        let (x, y) = random_design(7, 2, 8);
        assert!(matches!(
            fit_elastic_net(&x, &y, &ElasticNetOptions::default(), 0),
            Err(RatioError::SingularDesign { .. })
        ));
    }

    #[test]
    fn constant_feature_is_ignored() {
        let (mut x, y) = random_design(60, 3, 9);
        x.column_mut(2).fill(4.0);
        let fit = fit_elastic_net(&x, &y, &ElasticNetOptions::default(), 0).unwrap();
        assert_eq!(fit.model.coefficients[2], 0.0);
    }
}
