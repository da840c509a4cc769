//! Iso-FLOP banding, least-squares fits with parameter covariance, error
//! propagation, compute-optimal allocation and iso-loss comparisons.

use crate::ledger::{self, ModelShape};
use crate::synth::AgentType;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

/// Published reference values recorded next to our own fits in reports.
pub mod reference {
    pub const PARAMS_EXPONENT: (f64, f64) = (0.63, 0.08);
    pub const EXAMPLES_EXPONENT: (f64, f64) = (0.44, 0.06);
    /// Observed miles and the equivalent range of demonstrated miles.
    pub const OBSERVED_MILES: f64 = 10.0;
    pub const DEMONSTRATED_MILES: (f64, f64) = (2.0, 3.0);
}

const MAX_ITERATIONS: usize = 200;
const REL_TOL: f64 = 1e-10;
const LAMBDA_INIT: f64 = 1e-3;
const LAMBDA_FACTOR: f64 = 10.0;
const LAMBDA_MAX: f64 = 1e12;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("need at least {need} distinct x values")]
    NotEnoughDistinct { need: usize },
    #[error("x values must be positive and finite")]
    InvalidX,
    #[error("non-finite input value")]
    NonFinite,
    #[error("parabola has no interior minimum (a = {a})")]
    DegenerateParabola { a: f64, fit: Box<FitResult> },
    #[error("fit did not converge after {iterations} iterations")]
    NotConverged {
        iterations: usize,
        fit: Box<FitResult>,
    },
    #[error("covariance is not symmetric positive semidefinite")]
    NotPsd,
    #[error("design is rank deficient: {0}")]
    RankDeficient(&'static str),
    #[error("no records")]
    NoRecords,
    #[error("need at least {need} usable bands, got {got}")]
    TooFewBands { need: usize, got: usize },
    #[error("loss ranges of the two fits do not overlap")]
    EmptyRange,
    #[error("budget {budget:e} is below the smallest feasible model")]
    Infeasible { budget: f64 },
    #[error("wrong fit form: expected {0}")]
    WrongForm(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitForm {
    /// `a (ln x - b)^2 + c`: `b` is the log of the minimizer, `c` the minimum.
    ParabolaLogX,
    /// `a x^b`
    Power,
    /// `a x^b + c`
    PowerConst,
    /// `E + A / N^alpha + B / D^beta` with params `[E, A, alpha, B, beta]`.
    Surface,
}

impl FitForm {
    pub fn name(self) -> &'static str {
        match self {
            FitForm::ParabolaLogX => "parabola-logx",
            FitForm::Power => "power",
            FitForm::PowerConst => "power+const",
            FitForm::Surface => "chinchilla-surface",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub form: FitForm,
    pub params: Vec<f64>,
    /// Row-major `p x p` covariance.
    pub covariance: Vec<Vec<f64>>,
    pub residual_variance: f64,
    /// Weighted sum of squared residuals.
    pub ssr: f64,
    pub samples: usize,
    pub converged: bool,
    /// Parabola minimum lies at or beyond the sampled range.
    pub edge_minimum: bool,
}

impl FitResult {
    pub fn cov(&self) -> DMatrix<f64> {
        let p = self.params.len();
        DMatrix::from_fn(p, p, |i, j| self.covariance[i][j])
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.covariance[i][i].max(0.0).sqrt()
    }

    /// Value at a single abscissa (not defined for surfaces).
    pub fn eval(&self, x: f64) -> f64 {
        let p = &self.params;
        match self.form {
            FitForm::ParabolaLogX => p[0] * (x.ln() - p[1]).powi(2) + p[2],
            FitForm::Power => p[0] * x.powf(p[1]),
            FitForm::PowerConst => p[0] * x.powf(p[1]) + p[2],
            FitForm::Surface => f64::NAN,
        }
    }

    /// Partial derivatives with respect to the parameters at `x`.
    pub fn partials(&self, x: f64) -> Vec<f64> {
        let p = &self.params;
        match self.form {
            FitForm::ParabolaLogX => {
                let u = x.ln() - p[1];
                vec![u * u, -2.0 * p[0] * u, 1.0]
            }
            FitForm::Power => {
                let xb = x.powf(p[1]);
                vec![xb, p[0] * xb * x.ln()]
            }
            FitForm::PowerConst => {
                let xb = x.powf(p[1]);
                vec![xb, p[0] * xb * x.ln(), 1.0]
            }
            FitForm::Surface => vec![f64::NAN; 5],
        }
    }

    pub fn surface_eval(&self, n: f64, d: f64) -> f64 {
        let p = &self.params;
        p[0] + p[1] * n.powf(-p[2]) + p[3] * d.powf(-p[4])
    }
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt

struct LmOutcome {
    params: Vec<f64>,
    ssr: f64,
    /// `J^T W J` at the solution.
    normal: DMatrix<f64>,
    converged: bool,
    iterations: usize,
}

fn jacobian_and_residuals<F>(
    model: &F,
    xs: &[Vec<f64>],
    ys: &[f64],
    p: &[f64],
) -> (DMatrix<f64>, DVector<f64>)
where
    F: Fn(&[f64], &[f64]) -> (f64, Vec<f64>),
{
    let n = ys.len();
    let k = p.len();
    let mut j = DMatrix::zeros(n, k);
    let mut r = DVector::zeros(n);
    for i in 0..n {
        let (f, g) = model(&xs[i], p);
        r[i] = ys[i] - f;
        for c in 0..k {
            j[(i, c)] = g[c];
        }
    }
    (j, r)
}

fn weighted_ssr(r: &DVector<f64>, w: &[f64]) -> f64 {
    r.iter().zip(w).map(|(r, w)| w * r * r).sum()
}

/// Damped Gauss-Newton: lambda scales the diagonal of `J^T W J`, grows by
/// 10 on rejected steps and shrinks by 10 on accepted ones.
fn levenberg_marquardt<F>(
    model: &F,
    xs: &[Vec<f64>],
    ys: &[f64],
    w: &[f64],
    init: Vec<f64>,
) -> LmOutcome
where
    F: Fn(&[f64], &[f64]) -> (f64, Vec<f64>),
{
    let k = init.len();
    let mut p = init;
    let (mut j, mut r) = jacobian_and_residuals(model, xs, ys, &p);
    let mut ssr = weighted_ssr(&r, w);
    let mut lambda = LAMBDA_INIT;
    let mut converged = false;
    let mut iterations = 0;
    let wsqrt = DVector::from_iterator(w.len(), w.iter().map(|x| x.sqrt()));
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        if ssr == 0.0 {
            converged = true;
            break;
        }
        let jw = DMatrix::from_fn(j.nrows(), k, |i, c| j[(i, c)] * wsqrt[i]);
        let rw = r.component_mul(&wsqrt);
        let a = jw.transpose() * &jw;
        let g = jw.transpose() * rw;
        let mut accepted = None;
        while lambda <= LAMBDA_MAX {
            let mut damped = a.clone();
            for c in 0..k {
                let d = a[(c, c)];
                damped[(c, c)] += lambda * if d > 0.0 { d } else { 1.0 };
            }
            if let Some(step) = damped.lu().solve(&g) {
                let cand: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                if cand.iter().all(|x| x.is_finite()) {
                    let (j2, r2) = jacobian_and_residuals(model, xs, ys, &cand);
                    let s2 = weighted_ssr(&r2, w);
                    if s2.is_finite() && s2 <= ssr {
                        accepted = Some((cand, j2, r2, s2));
                        break;
                    }
                }
            }
            lambda *= LAMBDA_FACTOR;
        }
        match accepted {
            Some((cand, j2, r2, s2)) => {
                let rel = (ssr - s2) / ssr.max(f64::MIN_POSITIVE);
                p = cand;
                j = j2;
                r = r2;
                ssr = s2;
                lambda = (lambda / LAMBDA_FACTOR).max(1e-15);
                if rel < REL_TOL {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent direction left at any damping
                converged = true;
                break;
            }
        }
    }
    let jw = DMatrix::from_fn(j.nrows(), k, |i, c| j[(i, c)] * wsqrt[i]);
    LmOutcome {
        params: p,
        ssr,
        normal: jw.transpose() * jw,
        converged,
        iterations,
    }
}

fn covariance_from_normal(
    normal: &DMatrix<f64>,
    ssr: f64,
    n: usize,
) -> Result<(DMatrix<f64>, f64), FitError> {
    let k = normal.nrows();
    let sigma2 = if n > k { ssr / (n - k) as f64 } else { 0.0 };
    let inv = normal
        .clone()
        .try_inverse()
        .ok_or(FitError::RankDeficient("singular normal matrix"))?;
    let mut cov = inv * sigma2;
    symmetrize(&mut cov);
    Ok((cov, sigma2))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn check_xy(points: &[(f64, f64)]) -> Result<(), FitError> {
    if points
        .iter()
        .any(|(x, y)| !(x.is_finite() && y.is_finite()))
    {
        return Err(FitError::NonFinite);
    }
    if points.iter().any(|(x, _)| *x <= 0.0) {
        return Err(FitError::InvalidX);
    }
    Ok(())
}

fn distinct_x(points: &[(f64, f64)]) -> usize {
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    xs.len()
}

/// Points sorted by (x, y) so that every fitter is independent of input order.
fn canonical(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
    });
    p
}

// ---------------------------------------------------------------------------
// Parabola

/// Least-squares parabola in `ln x`, reparameterized to
/// `a (ln x - ln x_opt)^2 + L_opt` with the covariance pushed through the
/// reparameterization Jacobian.
pub fn fit_parabola(points: &[(f64, f64)]) -> Result<FitResult, FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints {
            need: 3,
            got: points.len(),
        });
    }
    check_xy(points)?;
    if distinct_x(points) < 3 {
        return Err(FitError::NotEnoughDistinct { need: 3 });
    }
    let pts = canonical(points);
    let n = pts.len();
    // center z for conditioning, then undo the shift in b
    let zbar = pts.iter().map(|p| p.0.ln()).sum::<f64>() / n as f64;
    let x = DMatrix::from_fn(n, 3, |i, c| (pts[i].0.ln() - zbar).powi(c as i32));
    let y = DVector::from_iterator(n, pts.iter().map(|p| p.1));
    let xtx = x.transpose() * &x;
    let xtx_inv = xtx
        .clone()
        .try_inverse()
        .ok_or(FitError::RankDeficient("collinear design"))?;
    let beta = &xtx_inv * (x.transpose() * &y);
    let resid = &y - &x * &beta;
    let ssr = resid.norm_squared();
    let sigma2 = if n > 3 { ssr / (n - 3) as f64 } else { 0.0 };
    let cov_beta = &xtx_inv * sigma2;
    let (p0, p1, p2) = (beta[0], beta[1], beta[2]);
    let a = p2;
    let b = -p1 / (2.0 * p2) + zbar;
    let c = p0 - p1 * p1 / (4.0 * p2);
    let jac = DMatrix::from_row_slice(
        3,
        3,
        &[
            0.0,
            0.0,
            1.0,
            0.0,
            -1.0 / (2.0 * p2),
            p1 / (2.0 * p2 * p2),
            1.0,
            -p1 / (2.0 * p2),
            p1 * p1 / (4.0 * p2 * p2),
        ],
    );
    let mut cov = &jac * cov_beta * jac.transpose();
    symmetrize(&mut cov);
    let zmin = pts.first().unwrap().0.ln();
    let zmax = pts.last().unwrap().0.ln();
    let fit = FitResult {
        form: FitForm::ParabolaLogX,
        params: vec![a, b, c],
        covariance: to_rows(&cov),
        residual_variance: sigma2,
        ssr,
        samples: n,
        converged: true,
        edge_minimum: !(b > zmin && b < zmax),
    };
    if !(a > 0.0) || !b.is_finite() {
        return Err(FitError::DegenerateParabola {
            a,
            fit: Box::new(fit),
        });
    }
    Ok(fit)
}

// ---------------------------------------------------------------------------
// Power laws

fn power_model(x: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let xb = x[0].powf(p[1]);
    (p[0] * xb, vec![xb, p[0] * xb * x[0].ln()])
}

fn power_const_model(x: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let xb = x[0].powf(p[1]);
    (p[0] * xb + p[2], vec![xb, p[0] * xb * x[0].ln(), 1.0])
}

/// Ordinary regression of `ln y` on `ln x`; returns (a, b).
fn log_log_init(points: &[(f64, f64)], offset: f64) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, y)| y - offset > 0.0)
        .map(|(x, y)| (x.ln(), (y - offset).ln()))
        .collect();
    if pairs.len() < 2 {
        let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
        return (mean, 0.0);
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    ((my - b * mx).exp(), b)
}

fn finish(form: FitForm, out: LmOutcome, n: usize) -> Result<FitResult, FitError> {
    let (cov, sigma2) = covariance_from_normal(&out.normal, out.ssr, n)?;
    let fit = FitResult {
        form,
        params: out.params,
        covariance: to_rows(&cov),
        residual_variance: sigma2,
        ssr: out.ssr,
        samples: n,
        converged: out.converged,
        edge_minimum: false,
    };
    if !fit.converged {
        return Err(FitError::NotConverged {
            iterations: out.iterations,
            fit: Box::new(fit),
        });
    }
    Ok(fit)
}

/// Fits `a x^b` (or `a x^b + c`) by log-log initialization and
/// Levenberg-Marquardt refinement.
pub fn fit_power(points: &[(f64, f64)], with_constant: bool) -> Result<FitResult, FitError> {
    fit_power_weighted(points, None, with_constant)
}

/// As [`fit_power`], weighting each point by `1 / sigma^2` when given.
pub fn fit_power_weighted(
    points: &[(f64, f64)],
    sigmas: Option<&[f64]>,
    with_constant: bool,
) -> Result<FitResult, FitError> {
    let need = if with_constant { 4 } else { 3 };
    if points.len() < need {
        return Err(FitError::TooFewPoints {
            need,
            got: points.len(),
        });
    }
    check_xy(points)?;
    // canonical order with weights carried along
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .0
            .partial_cmp(&points[b].0)
            .unwrap()
            .then(points[a].1.partial_cmp(&points[b].1).unwrap())
    });
    let pts: Vec<(f64, f64)> = idx.iter().map(|&i| points[i]).collect();
    let w: Vec<f64> = match sigmas {
        Some(s) => {
            if s.len() != points.len() {
                return Err(FitError::TooFewPoints {
                    need: points.len(),
                    got: s.len(),
                });
            }
            let w: Vec<f64> = idx.iter().map(|&i| 1.0 / (s[i] * s[i])).collect();
            if w.iter().all(|x| x.is_finite() && *x > 0.0) {
                w
            } else {
                vec![1.0; pts.len()]
            }
        }
        None => vec![1.0; pts.len()],
    };
    let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0]).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let n = pts.len();
    let (a0, b0) = log_log_init(&pts, 0.0);
    let pure = levenberg_marquardt(&power_model, &xs, &ys, &w, vec![a0, b0]);
    if !with_constant {
        return finish(FitForm::Power, pure, n);
    }
    let min_y = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let c0 = if min_y > 0.0 {
        0.9 * min_y
    } else {
        min_y - 1.0
    };
    let (a1, b1) = log_log_init(&pts, c0);
    let from_log = levenberg_marquardt(&power_const_model, &xs, &ys, &w, vec![a1, b1, c0]);
    let from_pure = levenberg_marquardt(
        &power_const_model,
        &xs,
        &ys,
        &w,
        vec![pure.params[0], pure.params[1], 0.0],
    );
    let best = if from_pure.ssr < from_log.ssr {
        from_pure
    } else {
        from_log
    };
    finish(FitForm::PowerConst, best, n)
}

// ---------------------------------------------------------------------------
// Error propagation

fn check_psd(cov: &DMatrix<f64>) -> Result<(), FitError> {
    let p = cov.nrows();
    let scale = (0..p).map(|i| cov[(i, i)].abs()).fold(0.0, f64::max);
    for i in 0..p {
        for j in 0..p {
            if !cov[(i, j)].is_finite()
                || (cov[(i, j)] - cov[(j, i)]).abs() > 1e-9 * scale.max(1e-300)
            {
                return Err(FitError::NotPsd);
            }
        }
    }
    if scale == 0.0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(FitError::NotPsd);
    }
    Ok(())
}

/// First-order standard deviation of the fitted curve at each `x`:
/// `sigma_f^2 = g^T Sigma g` with `g` the parameter partials.
pub fn propagate_band(fit: &FitResult, xs: &[f64]) -> Result<Vec<f64>, FitError> {
    if fit.form == FitForm::Surface {
        return Err(FitError::WrongForm("a one-dimensional fit"));
    }
    let cov = fit.cov();
    check_psd(&cov)?;
    Ok(xs
        .iter()
        .map(|&x| {
            let g = DVector::from_vec(fit.partials(x));
            (g.transpose() * &cov * &g)[(0, 0)].max(0.0).sqrt()
        })
        .collect())
}

/// Plot data with `±3 sigma` bands.
pub fn write_band_csv<W: Write>(
    mut w: W,
    fit: &FitResult,
    points: &[(f64, f64)],
    grid: &[f64],
) -> Result<(), FitError> {
    let sig = propagate_band(fit, grid)?;
    writeln!(w, "x,y,fit,lower,upper")?;
    for (x, y) in points {
        writeln!(w, "{:.6e},{:.6e},,,", x, y)?;
    }
    for (x, s) in grid.iter().zip(sig) {
        let f = fit.eval(*x);
        writeln!(
            w,
            "{:.6e},,{:.6e},{:.6e},{:.6e}",
            x,
            f,
            f - 3.0 * s,
            f + 3.0 * s
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run records and iso-FLOP bands

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub shape: ModelShape,
    /// Non-embedding parameters.
    pub params: u64,
    /// Training examples.
    pub examples: u64,
    /// Training FLOPs.
    pub flops: u64,
    pub eval_loss: f64,
    pub per_type_losses: BTreeMap<AgentType, f64>,
    pub min_ade: Option<f64>,
    pub w_ade: Option<f64>,
    /// Miles covered by the training data.
    pub miles: f64,
}

impl RunRecord {
    /// Checks the accounting invariants and loss finiteness.
    pub fn validate(&self) -> Result<(), String> {
        let n = ledger::param_count(&self.shape).map_err(|e| e.to_string())?;
        if n != self.params {
            return Err(format!("params {} != {}", self.params, n));
        }
        let c = ledger::train_flops(&self.shape, self.examples).map_err(|e| e.to_string())?;
        if c != self.flops {
            return Err(format!("flops {} != {}", self.flops, c));
        }
        if !(self.eval_loss.is_finite() && self.eval_loss > 0.0)
            || self
                .per_type_losses
                .values()
                .any(|l| !(l.is_finite() && *l > 0.0))
        {
            return Err("losses must be finite and positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub budget: f64,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Banding {
    pub bands: Vec<Band>,
    pub unassigned: Vec<RunRecord>,
    /// Budgets that received no records.
    pub empty: Vec<f64>,
}

/// Assigns each record to the nearest budget in log space if within
/// `ln(1 + rel_tol)`. Bands keep the input budget order.
pub fn band_runs(
    records: &[RunRecord],
    budgets: &[f64],
    rel_tol: f64,
) -> Result<Banding, FitError> {
    if records.is_empty() {
        return Err(FitError::NoRecords);
    }
    let tol = (1.0 + rel_tol).ln();
    let mut bands: Vec<Band> = budgets
        .iter()
        .map(|&b| Band {
            budget: b,
            records: Vec::new(),
        })
        .collect();
    let mut unassigned = Vec::new();
    for r in records {
        let lc = (r.flops as f64).ln();
        let best = budgets
            .iter()
            .enumerate()
            .map(|(i, b)| (i, (lc - b.ln()).abs()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        match best {
            Some((i, d)) if d <= tol + 1e-12 => bands[i].records.push(r.clone()),
            _ => unassigned.push(r.clone()),
        }
    }
    let empty = bands
        .iter()
        .filter(|b| b.records.is_empty())
        .map(|b| b.budget)
        .collect();
    Ok(Banding {
        bands,
        unassigned,
        empty,
    })
}

/// Optimum extracted from one band's parabola.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandOptimum {
    pub budget: f64,
    pub params_opt: f64,
    /// Standard deviation of the params optimum (delta method).
    pub params_sigma: f64,
    pub examples_opt: f64,
    pub examples_sigma: f64,
    pub loss_opt: f64,
    pub loss_sigma: f64,
    pub params_fit: FitResult,
    pub examples_fit: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedBand {
    pub budget: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalScaling {
    pub optima: Vec<BandOptimum>,
    pub excluded: Vec<ExcludedBand>,
    /// `N_opt = a C^b`
    pub params_fit: FitResult,
    /// `D_opt = a C^b`
    pub examples_fit: FitResult,
    pub loss_fit: FitResult,
    pub loss_const_fit: Option<FitResult>,
}

fn band_parabola(points: Vec<(f64, f64)>) -> Result<FitResult, String> {
    match fit_parabola(&points) {
        Ok(f) if f.edge_minimum => Err("minimum at band edge".into()),
        Ok(f) => Ok(f),
        Err(e) => Err(e.to_string()),
    }
}

/// Per-band parabola optima of loss against params and against examples,
/// then weighted power laws in compute.
pub fn optimal_scaling(bands: &[Band]) -> Result<OptimalScaling, FitError> {
    optimal_scaling_by(bands, |r| r.eval_loss)
}

/// As [`optimal_scaling`] with an arbitrary per-run metric.
pub fn optimal_scaling_by(
    bands: &[Band],
    metric: impl Fn(&RunRecord) -> f64,
) -> Result<OptimalScaling, FitError> {
    let mut optima = Vec::new();
    let mut excluded = Vec::new();
    for band in bands {
        let pn: Vec<(f64, f64)> = band
            .records
            .iter()
            .map(|r| (r.params as f64, metric(r)))
            .collect();
        let pd: Vec<(f64, f64)> = band
            .records
            .iter()
            .map(|r| (r.examples as f64, metric(r)))
            .collect();
        match (band_parabola(pn), band_parabola(pd)) {
            (Ok(fnn), Ok(fd)) => {
                let n_opt = fnn.params[1].exp();
                let d_opt = fd.params[1].exp();
                optima.push(BandOptimum {
                    budget: band.budget,
                    params_opt: n_opt,
                    params_sigma: n_opt * fnn.sigma(1),
                    examples_opt: d_opt,
                    examples_sigma: d_opt * fd.sigma(1),
                    loss_opt: fnn.params[2],
                    loss_sigma: fnn.sigma(2),
                    params_fit: fnn,
                    examples_fit: fd,
                });
            }
            (a, b) => {
                let reason = [a.err(), b.err()]
                    .into_iter()
                    .flatten()
                    .collect::<Vec<_>>()
                    .join("; ");
                excluded.push(ExcludedBand {
                    budget: band.budget,
                    reason,
                });
            }
        }
    }
    if optima.len() < 3 {
        return Err(FitError::TooFewBands {
            need: 3,
            got: optima.len(),
        });
    }
    let pick = |f: fn(&BandOptimum) -> (f64, f64, f64)| -> (Vec<(f64, f64)>, Vec<f64>) {
        optima
            .iter()
            .map(|o| {
                let (x, y, s) = f(o);
                ((x, y), s)
            })
            .unzip()
    };
    let (pn, sn) = pick(|o| (o.budget, o.params_opt, o.params_sigma));
    let (pd, sd) = pick(|o| (o.budget, o.examples_opt, o.examples_sigma));
    let (pl, sl) = pick(|o| (o.budget, o.loss_opt, o.loss_sigma));
    let params_fit = fit_power_weighted(&pn, Some(&sn), false)?;
    let examples_fit = fit_power_weighted(&pd, Some(&sd), false)?;
    let loss_fit = fit_power_weighted(&pl, Some(&sl), false)?;
    let loss_const_fit = if pl.len() >= 4 {
        Some(fit_power_weighted(&pl, Some(&sl), true)?)
    } else {
        None
    };
    Ok(OptimalScaling {
        optima,
        excluded,
        params_fit,
        examples_fit,
        loss_fit,
        loss_const_fit,
    })
}

// ---------------------------------------------------------------------------
// Loss surface

fn surface_model(x: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    // x = [N / n_ref, D / d_ref]
    let na = x[0].powf(-p[2]);
    let db = x[1].powf(-p[4]);
    (
        p[0] + p[1] * na + p[3] * db,
        vec![1.0, na, -p[1] * na * x[0].ln(), db, -p[3] * db * x[1].ln()],
    )
}

fn geo_mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x.ln(), n + 1));
    (s / n as f64).exp()
}

/// Fits `E + A / N^alpha + B / D^beta` from `(N, D, L)` triples with a
/// multi-start grid over the exponents and the constant.
pub fn fit_surface(points: &[(f64, f64, f64)]) -> Result<FitResult, FitError> {
    if points.len() < 8 {
        return Err(FitError::TooFewPoints {
            need: 8,
            got: points.len(),
        });
    }
    if points
        .iter()
        .any(|(n, d, l)| !(n.is_finite() && d.is_finite() && l.is_finite()))
    {
        return Err(FitError::NonFinite);
    }
    if points.iter().any(|(n, d, _)| *n <= 0.0 || *d <= 0.0) {
        return Err(FitError::InvalidX);
    }
    let distinct = |f: fn(&(f64, f64, f64)) -> f64| {
        let mut v: Vec<f64> = points.iter().map(f).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v.len()
    };
    if distinct(|p| p.0) < 3 {
        return Err(FitError::RankDeficient("fewer than 3 distinct N"));
    }
    if distinct(|p| p.1) < 3 {
        return Err(FitError::RankDeficient("fewer than 3 distinct D"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.partial_cmp(&b.2).unwrap())
    });
    let n_ref = geo_mean(pts.iter().map(|p| p.0));
    let d_ref = geo_mean(pts.iter().map(|p| p.1));
    let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0 / n_ref, p.1 / d_ref]).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.2).collect();
    let w = vec![1.0; ys.len()];
    let min_l = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let grid = [0.2, 0.5, 1.0];
    let mut best: Option<LmOutcome> = None;
    for &alpha in &grid {
        for &beta in &grid {
            for e in [0.0, 0.5 * min_l] {
                // A and B by linear least squares on the residual after E
                let m = DMatrix::from_fn(ys.len(), 2, |i, c| {
                    if c == 0 {
                        xs[i][0].powf(-alpha)
                    } else {
                        xs[i][1].powf(-beta)
                    }
                });
                let rhs = DVector::from_iterator(ys.len(), ys.iter().map(|y| y - e));
                let Some(ab) = (m.transpose() * &m).lu().solve(&(m.transpose() * rhs)) else {
                    continue;
                };
                let out = levenberg_marquardt(
                    &surface_model,
                    &xs,
                    &ys,
                    &w,
                    vec![e, ab[0], alpha, ab[1], beta],
                );
                if best.as_ref().is_none_or(|b| out.ssr < b.ssr) {
                    best = Some(out);
                }
            }
        }
    }
    let best = best.ok_or(FitError::RankDeficient("no usable start"))?;
    let n = ys.len();
    let (cov_scaled, sigma2) = covariance_from_normal(&best.normal, best.ssr, n)?;
    // back to unnormalized A and B
    let p = &best.params;
    let (a, b) = (p[1] * n_ref.powf(p[2]), p[3] * d_ref.powf(p[4]));
    let mut jac = DMatrix::<f64>::identity(5, 5);
    jac[(1, 1)] = n_ref.powf(p[2]);
    jac[(1, 2)] = a * n_ref.ln();
    jac[(3, 3)] = d_ref.powf(p[4]);
    jac[(3, 4)] = b * d_ref.ln();
    let mut cov = &jac * cov_scaled * jac.transpose();
    symmetrize(&mut cov);
    let fit = FitResult {
        form: FitForm::Surface,
        params: vec![p[0], a, p[2], b, p[4]],
        covariance: to_rows(&cov),
        residual_variance: sigma2,
        ssr: best.ssr,
        samples: n,
        converged: best.converged,
        edge_minimum: false,
    };
    if !fit.converged {
        return Err(FitError::NotConverged {
            iterations: best.iterations,
            fit: Box::new(fit),
        });
    }
    Ok(fit)
}

/// Model family with fixed depth and token counts; width varies with N.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeFamily {
    pub enc_layers: f64,
    pub dec_layers: f64,
    pub scene_tokens: f64,
    pub query_tokens: f64,
}

impl ShapeFamily {
    pub fn width_for_params(&self, n: f64) -> f64 {
        (n / (12.0 * self.enc_layers + 16.0 * self.dec_layers)).sqrt()
    }

    pub fn flops_per_example(&self, n: f64) -> f64 {
        ledger::flops_per_example_f64(
            self.enc_layers,
            self.dec_layers,
            self.width_for_params(n),
            self.scene_tokens,
            self.query_tokens,
        )
    }
}

/// Compute-optimal `(N, D)` for `budget` under the surface fit, searching
/// `ln N` over `[n_min, n_max]` by golden section with
/// `D = budget / flops_per_example(N)`.
pub fn optimal_allocation(
    surface: &FitResult,
    budget: f64,
    flops_per_example: impl Fn(f64) -> f64,
    n_min: f64,
    n_max: f64,
) -> Result<(f64, f64), FitError> {
    if surface.form != FitForm::Surface {
        return Err(FitError::WrongForm("a surface fit"));
    }
    if !(budget > 0.0) || budget < flops_per_example(n_min) {
        return Err(FitError::Infeasible { budget });
    }
    let objective = |ln_n: f64| {
        let n = ln_n.exp();
        let d = budget / flops_per_example(n);
        if d < 1.0 {
            f64::INFINITY
        } else {
            surface.surface_eval(n, d)
        }
    };
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (n_min.ln(), n_max.ln());
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (objective(x1), objective(x2));
    for _ in 0..200 {
        if hi - lo < 1e-12 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    let n = (0.5 * (lo + hi)).exp();
    Ok((n, budget / flops_per_example(n)))
}

// ---------------------------------------------------------------------------
// Iso-loss miles equivalence

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoLossPoint {
    pub loss: f64,
    pub observed_miles: f64,
    pub demonstrated_miles: f64,
    /// observed / demonstrated
    pub ratio: f64,
    pub ratio_sigma: f64,
}

/// Miles needed to reach `loss` under `L = a m^b + c`, with the gradient of
/// `ln m` with respect to `(a, b, c)`.
fn invert_power_const(fit: &FitResult, loss: f64) -> Option<(f64, [f64; 3])> {
    let (a, b, c) = (fit.params[0], fit.params[1], fit.params[2]);
    let u = (loss - c) / a;
    if !(u > 0.0) || b == 0.0 {
        return None;
    }
    let ln_m = u.ln() / b;
    Some((
        ln_m.exp(),
        [-1.0 / (a * b), -ln_m / b, -1.0 / (b * (loss - c))],
    ))
}

/// Losses of `fit` at the smallest and largest sampled `x`. Noisy extremes
/// of the raw losses overshoot the curve and push the range into
/// extrapolation.
pub fn fitted_loss_range(fit: &FitResult, points: &[(f64, f64)]) -> Result<(f64, f64), FitError> {
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(FitError::EmptyRange);
    }
    let (a, b) = (fit.eval(lo), fit.eval(hi));
    Ok((a.min(b), a.max(b)))
}

/// Ratio of observed-data miles to demonstrated-data miles that reach the
/// same loss, over `steps` losses spanning the overlap of the two loss
/// ranges. Fits are independent, so the log-ratio variances add.
pub fn iso_loss_equivalence(
    observed: &FitResult,
    demonstrated: &FitResult,
    observed_range: (f64, f64),
    demonstrated_range: (f64, f64),
    steps: usize,
) -> Result<Vec<IsoLossPoint>, FitError> {
    if observed.form != FitForm::PowerConst || demonstrated.form != FitForm::PowerConst {
        return Err(FitError::WrongForm("power+const fits"));
    }
    let lo = observed_range
        .0
        .min(observed_range.1)
        .max(demonstrated_range.0.min(demonstrated_range.1))
        .max(observed.params[2].max(demonstrated.params[2]));
    let hi = observed_range
        .0
        .max(observed_range.1)
        .min(demonstrated_range.0.max(demonstrated_range.1));
    if !(hi > lo) || steps == 0 {
        return Err(FitError::EmptyRange);
    }
    let (co, cd) = (observed.cov(), demonstrated.cov());
    let mut out = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = if steps == 1 {
            0.5
        } else {
            i as f64 / (steps - 1) as f64
        };
        // stay strictly inside when the range touches an asymptote
        let loss = lo + t * (hi - lo);
        let (Some((mo, go)), Some((md, gd))) = (
            invert_power_const(observed, loss),
            invert_power_const(demonstrated, loss),
        ) else {
            continue;
        };
        let go = DVector::from_row_slice(&go);
        let gd = DVector::from_row_slice(&gd);
        let var = (go.transpose() * &co * &go)[(0, 0)] + (gd.transpose() * &cd * &gd)[(0, 0)];
        let ratio = mo / md;
        out.push(IsoLossPoint {
            loss,
            observed_miles: mo,
            demonstrated_miles: md,
            ratio,
            ratio_sigma: ratio * var.max(0.0).sqrt(),
        });
    }
    if out.is_empty() {
        return Err(FitError::EmptyRange);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn three_point_parabola_is_exact() {
        let f = fit_parabola(&[(E, 7.0), (E * E, 5.0), (E * E * E, 7.0)]).unwrap();
        assert!((f.params[0] - 2.0).abs() < 1e-12);
        assert!((f.params[1] - 2.0).abs() < 1e-12);
        assert!((f.params[2] - 5.0).abs() < 1e-12);
        assert!(!f.edge_minimum);
        assert!(f.covariance.iter().flatten().all(|c| *c == 0.0));
    }

    #[test]
    fn parabola_shift_and_scale_invariance() {
        let pts: Vec<(f64, f64)> = (0..7)
            .map(|i| {
                let z = 1.0 + 0.5 * i as f64;
                (z.exp(), 0.3 * (z - 2.2f64).powi(2) + 1.0)
            })
            .collect();
        let base = fit_parabola(&pts).unwrap();
        let shifted: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (*x, y + 4.0)).collect();
        assert!((fit_parabola(&shifted).unwrap().params[1] - base.params[1]).abs() < 1e-9);
        let scaled: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x * 1000.0, *y)).collect();
        let s = fit_parabola(&scaled).unwrap();
        assert!((s.params[1] - base.params[1] - 1000f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn concave_parabola_is_degenerate() {
        let r = fit_parabola(&[(1.0, 1.0), (2.0, 3.0), (4.0, 1.0)]);
        assert!(matches!(r, Err(FitError::DegenerateParabola { .. })));
        assert!(fit_parabola(&[(1.0, 1.0), (1.0, 2.0), (2.0, 1.0)]).is_err());
    }

    #[test]
    fn monotone_band_flags_edge_minimum() {
        let pts: Vec<(f64, f64)> = (1..=5)
            .map(|i| (i as f64, (i as f64).ln().powi(2) + 0.1 * (i as f64).ln()))
            .collect();
        let f = fit_parabola(&pts).unwrap();
        assert!(f.edge_minimum);
    }

    #[test]
    fn exact_power_laws() {
        let f = fit_power(&[(1.0, 3.0), (4.0, 1.5), (16.0, 0.75)], false).unwrap();
        assert!((f.params[0] - 3.0).abs() < 1e-9 && (f.params[1] + 0.5).abs() < 1e-9);
        assert!(f.ssr < 1e-20);
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&x| (x, 2.0 / x + 1.0))
            .collect();
        let g = fit_power(&pts, true).unwrap();
        assert!((g.params[0] - 2.0).abs() < 1e-6, "{:?}", g.params);
        assert!((g.params[1] + 1.0).abs() < 1e-6);
        assert!((g.params[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn power_fit_is_order_independent() {
        let pts = vec![(3.0, 2.1), (1.0, 4.2), (9.0, 1.3), (27.0, 0.9), (2.0, 3.0)];
        let mut rev = pts.clone();
        rev.reverse();
        assert_eq!(
            fit_power(&pts, true).unwrap(),
            fit_power(&rev, true).unwrap()
        );
    }

    #[test]
    fn propagation_power_at_unity() {
        let fit = FitResult {
            form: FitForm::PowerConst,
            params: vec![2.0, -0.3, 1.0],
            covariance: vec![
                vec![0.01, 0.0, 0.0],
                vec![0.0, 0.04, 0.0],
                vec![0.0, 0.0, 0.0],
            ],
            residual_variance: 0.0,
            ssr: 0.0,
            samples: 4,
            converged: true,
            edge_minimum: false,
        };
        let s = propagate_band(&fit, &[1.0]).unwrap();
        assert!((s[0] - 0.1).abs() < 1e-15);
        let zero = FitResult {
            covariance: vec![vec![0.0; 3]; 3],
            ..fit.clone()
        };
        assert_eq!(propagate_band(&zero, &[0.5, 2.0]).unwrap(), vec![0.0, 0.0]);
        let bad = FitResult {
            covariance: vec![
                vec![1.0, 2.0, 0.0],
                vec![2.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            ..fit
        };
        assert!(matches!(
            propagate_band(&bad, &[2.0]),
            Err(FitError::NotPsd)
        ));
    }

    #[test]
    fn propagation_matches_expanded_sum() {
        // parabola with a full covariance, expanded by hand term by term
        let (a, b, c) = (0.7, 1.3, 2.0);
        let cov = [
            [0.02, 0.003, -0.001],
            [0.003, 0.05, 0.002],
            [-0.001, 0.002, 0.01],
        ];
        let fit = FitResult {
            form: FitForm::ParabolaLogX,
            params: vec![a, b, c],
            covariance: cov.iter().map(|r| r.to_vec()).collect(),
            residual_variance: 0.0,
            ssr: 0.0,
            samples: 5,
            converged: true,
            edge_minimum: false,
        };
        let x = 7.5f64;
        let z = x.ln();
        let fa = (z - b).powi(2);
        let fb = -2.0 * a * (z - b);
        let fc = 1.0;
        let expanded = fa * fa * cov[0][0]
            + fb * fb * cov[1][1]
            + fc * fc * cov[2][2]
            + 2.0 * fa * fb * cov[0][1]
            + 2.0 * fa * fc * cov[0][2]
            + 2.0 * fb * fc * cov[1][2];
        let s = propagate_band(&fit, &[x]).unwrap()[0];
        assert!((s * s - expanded).abs() < 1e-14);
    }

    fn record(params: u64, examples: u64, flops: u64, loss: f64) -> RunRecord {
        RunRecord {
            run_id: format!("{params}-{examples}"),
            seed: 0,
            shape: ModelShape::new(1, 1, 1, 1, 1).unwrap(),
            params,
            examples,
            flops,
            eval_loss: loss,
            per_type_losses: BTreeMap::new(),
            min_ade: None,
            w_ade: None,
            miles: 0.0,
        }
    }

    #[test]
    fn banding() {
        let recs = vec![
            record(1, 1, 1000, 1.0),
            record(1, 1, 10_000, 1.0),
            record(1, 1, 1100, 1.0),
        ];
        let b = band_runs(&recs, &[1000.0, 10_000.0, 1e5], 0.05).unwrap();
        assert_eq!(b.bands[0].records.len(), 1);
        assert_eq!(b.bands[1].records.len(), 1);
        assert_eq!(b.unassigned.len(), 1);
        assert_eq!(b.empty, vec![1e5]);
        assert!(band_runs(&[], &[1.0], 0.1).is_err());
    }

    #[test]
    fn surface_exact_recovery() {
        let mut pts = Vec::new();
        for n in [1e4f64, 3e4, 1e5, 3e5] {
            for d in [1e3f64, 1e4, 1e5] {
                pts.push((n, d, 1.0 + 2.0 / n.powf(0.3) + 3.0 / d.powf(0.4)));
            }
        }
        let f = fit_surface(&pts).unwrap();
        let truth = [1.0, 2.0, 0.3, 3.0, 0.4];
        for (p, t) in f.params.iter().zip(truth) {
            assert!((p - t).abs() < 1e-5 * t.max(1.0), "{:?}", f.params);
        }
        assert!(f.ssr < 1e-20);
        let flat: Vec<(f64, f64, f64)> = pts.iter().map(|p| (1e4, p.1, p.2)).collect();
        assert!(matches!(
            fit_surface(&flat),
            Err(FitError::RankDeficient(_))
        ));
    }

    fn surface(e: f64, a: f64, alpha: f64, b: f64, beta: f64) -> FitResult {
        FitResult {
            form: FitForm::Surface,
            params: vec![e, a, alpha, b, beta],
            covariance: vec![vec![0.0; 5]; 5],
            residual_variance: 0.0,
            ssr: 0.0,
            samples: 8,
            converged: true,
            edge_minimum: false,
        }
    }

    #[test]
    fn allocation_exponents() {
        let fpe = |n: f64| 6.0 * n;
        let sym = surface(1.0, 2.0, 0.5, 3.0, 0.5);
        let (n1, _) = optimal_allocation(&sym, 1e12, fpe, 1.0, 1e12).unwrap();
        let (n2, _) = optimal_allocation(&sym, 1e16, fpe, 1.0, 1e12).unwrap();
        assert!(((n2 / n1).ln() / 1e4f64.ln() - 0.5).abs() < 1e-6);
        let asym = surface(1.0, 2.0, 0.5, 3.0, 1.0);
        let (n1, _) = optimal_allocation(&asym, 1e12, fpe, 1.0, 1e12).unwrap();
        let (n2, _) = optimal_allocation(&asym, 1e16, fpe, 1.0, 1e12).unwrap();
        assert!(((n2 / n1).ln() / 1e4f64.ln() - 2.0 / 3.0).abs() < 1e-6);
        assert!(optimal_allocation(&asym, 1.0, fpe, 10.0, 1e6).is_err());
    }

    #[test]
    fn allocation_matches_grid_search() {
        let s = surface(1.5, 400.0, 0.34, 410.0, 0.28);
        let fam = ShapeFamily {
            enc_layers: 2.0,
            dec_layers: 2.0,
            scene_tokens: 64.0,
            query_tokens: 176.0,
        };
        let budget = 1e15;
        let (n, _) =
            optimal_allocation(&s, budget, |n| fam.flops_per_example(n), 1e3, 1e9).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=60_000 {
            let ln_n = 1e3f64.ln() + (1e9f64.ln() - 1e3f64.ln()) * i as f64 / 60_000.0;
            let nn = ln_n.exp();
            let l = s.surface_eval(nn, budget / fam.flops_per_example(nn));
            if l < best.0 {
                best = (l, nn);
            }
        }
        assert!((n / best.1 - 1.0).abs() < 0.01);
    }

    #[test]
    fn iso_loss_identity_and_uniform_ratio() {
        let demo = FitResult {
            form: FitForm::PowerConst,
            params: vec![5.0, -0.4, 1.0],
            covariance: vec![vec![0.0; 3]; 3],
            residual_variance: 0.0,
            ssr: 0.0,
            samples: 6,
            converged: true,
            edge_minimum: false,
        };
        let same = iso_loss_equivalence(&demo, &demo, (1.2, 3.0), (1.2, 3.0), 20).unwrap();
        assert!(same.iter().all(|p| (p.ratio - 1.0).abs() < 1e-12));
        // a (m/4)^b + c needs 4x the miles for the same loss
        let obs = FitResult {
            params: vec![5.0 * 4f64.powf(0.4), -0.4, 1.0],
            ..demo.clone()
        };
        let r = iso_loss_equivalence(&obs, &demo, (1.1, 2.5), (1.3, 3.0), 20).unwrap();
        assert!(r.iter().all(|p| (p.ratio - 4.0).abs() < 1e-9));
        assert!((r[0].loss - 1.3).abs() < 1e-12 && (r[19].loss - 2.5).abs() < 1e-12);
        assert!(matches!(
            iso_loss_equivalence(&obs, &demo, (1.1, 1.2), (1.3, 3.0), 5),
            Err(FitError::EmptyRange)
        ));
    }
}
