//! Slope estimators.
//!
//! All estimators share one shape: apply a linear operator to the observed
//! x and y channels, then take the no-intercept least-squares ratio
//! sum(op x * op y) / sum(op x * op x). The operators range from the identity
//! (plain OLS) through repeated differences and discrete Laplacians to
//! spacing-weighted differences on irregular designs, local averaging
//! followed by differencing on nested designs, generalized least squares
//! under a working covariance, and a two-stage procedure that removes the
//! rough component shared by two exposures before estimating each slope.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::covmodels::{CovModel, MaternParams};
use crate::error::{Error, Result};
use crate::fields::{assemble_joint, Design, DesignMeta, FieldSample};
use crate::linalg::{dot, CholFactor};

// ---------------------------------------------------------------------------
// Difference / Laplacian operators
// ---------------------------------------------------------------------------

/// p-fold scaled forward difference on a regular grid: one application maps
/// z_i to (z_{i+1} - z_i)/h, so polynomials of degree < p go to exact zero
/// and s^p maps to p!.
pub fn diff(values: &[f64], p: usize, h: f64) -> Result<Vec<f64>> {
    if values.len() <= p {
        return Err(Error::InsufficientData(format!(
            "need more than {p} values for order-{p} differences"
        )));
    }
    let mut out = values.to_vec();
    for _ in 0..p {
        for i in 0..out.len() - 1 {
            out[i] = (out[i + 1] - out[i]) / h;
        }
        out.pop();
    }
    Ok(out)
}

/// p-fold raw increments (no spacing normalization), used on irregular
/// designs where no single h exists. The least-squares ratio is unaffected
/// by any global scaling.
fn raw_diff(values: &[f64], p: usize) -> Result<Vec<f64>> {
    diff(values, p, 1.0)
}

/// m-fold discrete Laplacian. On a 2D lattice one application maps z at an
/// interior site to (sum of the 4 axis neighbors - 4 z)/h^2 and the valid
/// window shrinks by one ring; on a 1D grid it is the centered second
/// difference, so the m-fold operator equals diff with p = 2m elementwise.
pub fn laplacian(values: &[f64], m: usize, design: &Design) -> Result<Vec<f64>> {
    if m == 0 {
        return Ok(values.to_vec());
    }
    match &design.meta {
        DesignMeta::Grid1d { h } => diff(values, 2 * m, *h),
        DesignMeta::Grid2d { h, side_points } => {
            let p = *side_points;
            if p < 2 * m + 1 {
                return Err(Error::InsufficientData(format!(
                    "order-{m} Laplacian needs at least {} points per side",
                    2 * m + 1
                )));
            }
            if values.len() != p * p {
                return Err(Error::Config(
                    "value count does not match the lattice".into(),
                ));
            }
            let h2 = h * h;
            let mut cur = values.to_vec();
            let mut width = p;
            for _ in 0..m {
                let w = width - 2;
                let mut next = vec![0.0; w * w];
                for iy in 1..width - 1 {
                    for ix in 1..width - 1 {
                        let c = cur[iy * width + ix];
                        let s = cur[iy * width + ix + 1]
                            + cur[iy * width + ix - 1]
                            + cur[(iy + 1) * width + ix]
                            + cur[(iy - 1) * width + ix];
                        next[(iy - 1) * w + (ix - 1)] = (s - 4.0 * c) / h2;
                    }
                }
                cur = next;
                width = w;
            }
            Ok(cur)
        }
        _ => Err(Error::Config(
            "laplacian requires a regular 1D or 2D grid".into(),
        )),
    }
}

/// Smallest difference order that dominates a smoothness exponent alpha:
/// in 1D the smallest p with 2p > alpha, in 2D the smallest Laplacian order
/// m with 4m > alpha.
pub fn order_from_alpha(alpha: f64, d: usize) -> usize {
    let step = if d == 2 { 4.0 } else { 2.0 };
    let mut k = (alpha / step).floor() as usize + 1;
    if k == 0 {
        k = 1;
    }
    k
}

// ---------------------------------------------------------------------------
// Ratio estimators
// ---------------------------------------------------------------------------

/// No-intercept least squares: sum(x y) / sum(x^2).
pub fn ols(x: &[f64], y: &[f64]) -> Result<f64> {
    let (num, den) = ratio_parts(x, y)?;
    Ok(num / den)
}

fn ratio_parts(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InsufficientData(
            "ratio needs equal-length nonempty inputs".into(),
        ));
    }
    let num = dot(x, y);
    let den = dot(x, x);
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok((num, den))
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimatorReport {
    pub estimator_id: &'static str,
    /// Difference or Laplacian order (0 for operators without one).
    pub order: usize,
    pub beta_hat: f64,
    /// Second slope for the two-exposure procedure.
    pub beta2_hat: Option<f64>,
    pub numerator: f64,
    pub denominator: f64,
    /// Observations surviving boundary trimming.
    pub n_effective: usize,
    /// Shared-roughness coefficient from the two-stage procedure.
    pub c_hat: Option<f64>,
    /// First-stage slope before the shared-roughness correction.
    pub beta1_star: Option<f64>,
    /// (sigma2, rho, nu) chosen by the fitted GLS search.
    pub fitted_params: Option<(f64, f64, f64)>,
}

fn report(id: &'static str, order: usize, num: f64, den: f64, n_eff: usize) -> EstimatorReport {
    EstimatorReport {
        estimator_id: id,
        order,
        beta_hat: num / den,
        beta2_hat: None,
        numerator: num,
        denominator: den,
        n_effective: n_eff,
        c_hat: None,
        beta1_star: None,
        fitted_params: None,
    }
}

/// Extract the channel pair an estimator regresses (noisy versions when
/// present) plus, for nested designs, nothing else; callers handle layout.
fn observed(sample: &FieldSample) -> (&[f64], &[f64]) {
    (sample.observed_x(), sample.observed_y())
}

/// Difference both observed channels p times and return the least-squares
/// ratio. Works on 1D grids, on irregular 1D designs (raw increments,
/// ignoring the spacings), and on nested designs (using only the cluster
/// centers, which form a regular coarse grid). p = 0 is plain OLS.
pub fn ols_diff(sample: &FieldSample, p: usize) -> Result<EstimatorReport> {
    let (x, y) = observed(sample);
    let id = if p == 0 { "ols" } else { "ols_diff" };
    match &sample.design.meta {
        DesignMeta::Grid1d { h } => {
            let dx = diff(x, p, *h)?;
            let dy = diff(y, p, *h)?;
            let (num, den) = ratio_parts(&dx, &dy)?;
            Ok(report(id, p, num, den, dx.len()))
        }
        DesignMeta::Grid2d { .. } => {
            if p == 0 {
                let (num, den) = ratio_parts(x, y)?;
                Ok(report(id, 0, num, den, x.len()))
            } else {
                Err(Error::Config(
                    "use ols_lap for differencing on 2D grids".into(),
                ))
            }
        }
        DesignMeta::Irregular1d { .. } => {
            let dx = raw_diff(x, p)?;
            let dy = raw_diff(y, p)?;
            let (num, den) = ratio_parts(&dx, &dy)?;
            Ok(report(id, p, num, den, dx.len()))
        }
        DesignMeta::Nested1d { c, coarse_h, .. } => {
            let centers = |v: &[f64]| -> Vec<f64> {
                v.iter()
                    .skip(*c)
                    .step_by(2 * c + 1)
                    .copied()
                    .collect()
            };
            let dx = diff(&centers(x), p, *coarse_h)?;
            let dy = diff(&centers(y), p, *coarse_h)?;
            let (num, den) = ratio_parts(&dx, &dy)?;
            Ok(report(id, p, num, den, dx.len()))
        }
    }
}

/// Apply the m-fold Laplacian to both observed channels and return the
/// least-squares ratio.
pub fn ols_lap(sample: &FieldSample, m: usize) -> Result<EstimatorReport> {
    let (x, y) = observed(sample);
    let lx = laplacian(x, m, &sample.design)?;
    let ly = laplacian(y, m, &sample.design)?;
    let (num, den) = ratio_parts(&lx, &ly)?;
    Ok(report("ols_lap", m, num, den, lx.len()))
}

/// Nested-design estimator: average the fine cluster around each coarse
/// site for both channels (shrinking iid noise variance by the cluster
/// size), then difference the averaged series p times on the coarse grid.
pub fn avg_then_diff(sample: &FieldSample, p: usize) -> Result<EstimatorReport> {
    let (c, coarse_h) = match &sample.design.meta {
        DesignMeta::Nested1d { c, coarse_h, .. } => (*c, *coarse_h),
        _ => {
            return Err(Error::Config(
                "avg_then_diff needs a nested design".into(),
            ))
        }
    };
    let cluster = 2 * c + 1;
    let (x, y) = observed(sample);
    let avg = |v: &[f64]| -> Vec<f64> {
        v.chunks_exact(cluster)
            .map(|ch| ch.iter().sum::<f64>() / cluster as f64)
            .collect()
    };
    let dx = diff(&avg(x), p, coarse_h)?;
    let dy = diff(&avg(y), p, coarse_h)?;
    let (num, den) = ratio_parts(&dx, &dy)?;
    Ok(report("avg_then_diff", p, num, den, dx.len()))
}

/// Second-order difference weighted by the local spacings, for irregular 1D
/// designs: (Dz)_i = [(z_{i+1}-z_i)/h_i - (z_i-z_{i-1})/h_{i-1}] / h~_i with
/// h~_i = (h_{i-1}+h_i)/2. Annihilates affine functions exactly on any
/// spacings and maps s^2 to the constant 2.
pub fn spacing_weighted_second(sample: &FieldSample) -> Result<EstimatorReport> {
    let spacings = irregular_spacings(&sample.design)?;
    let (x, y) = observed(sample);
    let dx = weighted_second(x, spacings)?;
    let dy = weighted_second(y, spacings)?;
    let (num, den) = ratio_parts(&dx, &dy)?;
    Ok(report("spacing_weighted_second", 2, num, den, dx.len()))
}

/// First differences divided by the local spacing, for irregular designs;
/// mainly a baseline against the second-order weighted operator.
pub fn spacing_weighted_first(sample: &FieldSample) -> Result<EstimatorReport> {
    let spacings = irregular_spacings(&sample.design)?;
    let (x, y) = observed(sample);
    let d = |v: &[f64]| -> Vec<f64> {
        (0..v.len() - 1)
            .map(|i| (v[i + 1] - v[i]) / spacings[i])
            .collect()
    };
    let (dx, dy) = (d(x), d(y));
    let (num, den) = ratio_parts(&dx, &dy)?;
    Ok(report("spacing_weighted_first", 1, num, den, dx.len()))
}

fn irregular_spacings(design: &Design) -> Result<&[f64]> {
    match &design.meta {
        DesignMeta::Irregular1d { spacings, .. } => Ok(spacings),
        _ => Err(Error::Config(
            "spacing-weighted estimators need an irregular 1D design".into(),
        )),
    }
}

fn weighted_second(v: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if v.len() < 3 {
        return Err(Error::InsufficientData(
            "spacing-weighted second difference needs at least 3 sites".into(),
        ));
    }
    Ok((1..v.len() - 1)
        .map(|i| {
            let left = (v[i] - v[i - 1]) / h[i - 1];
            let right = (v[i + 1] - v[i]) / h[i];
            let ht = (h[i - 1] + h[i]) / 2.0;
            (right - left) / ht
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Generalized least squares
// ---------------------------------------------------------------------------

/// Application of an inverse working covariance. Implementations must apply
/// Sigma^{-1} through closed forms or factorization solves, never an
/// explicit dense inverse.
pub trait PrecisionOp {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

pub struct IdentityPrecision;

impl PrecisionOp for IdentityPrecision {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(v.to_vec())
    }
}

/// Tridiagonal inverse of the exponential (AR-type) working covariance
/// C_ij = rho^{|i-j|} with rho = exp(-lambda h): Sigma^{-1} = Q/(1-rho^2)
/// where Q has unit first/last diagonal entries, 1+rho^2 inside, and -rho
/// off the diagonal.
#[derive(Clone, Debug)]
pub struct TridiagPrecision {
    pub n: usize,
    pub rho: f64,
}

impl TridiagPrecision {
    /// Dense Sigma^{-1} (test/diagnostic use).
    pub fn dense(&self) -> Vec<f64> {
        let n = self.n;
        let r = self.rho;
        let s = 1.0 / (1.0 - r * r);
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            let d = if i == 0 || i == n - 1 { 1.0 } else { 1.0 + r * r };
            m[i * n + i] = d * s;
            if i + 1 < n {
                m[i * n + i + 1] = -r * s;
                m[(i + 1) * n + i] = -r * s;
            }
        }
        m
    }
}

impl PrecisionOp for TridiagPrecision {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if v.len() != n {
            return Err(Error::Config("precision size mismatch".into()));
        }
        let r = self.rho;
        let s = 1.0 / (1.0 - r * r);
        let mut out = vec![0.0; n];
        for i in 0..n {
            let d = if i == 0 || i == n - 1 { 1.0 } else { 1.0 + r * r };
            let mut acc = d * v[i];
            if i > 0 {
                acc -= r * v[i - 1];
            }
            if i + 1 < n {
                acc -= r * v[i + 1];
            }
            out[i] = s * acc;
        }
        Ok(out)
    }
}

/// Closed-form precision of the exponential working covariance on a regular
/// 1D grid.
pub fn gls_exp_precision(design: &Design, lambda: f64) -> Result<TridiagPrecision> {
    let h = match &design.meta {
        DesignMeta::Grid1d { h } => *h,
        _ => {
            return Err(Error::Config(
                "exponential working precision needs a regular 1D grid".into(),
            ))
        }
    };
    if !(lambda > 0.0) {
        return Err(Error::Config("lambda must be > 0".into()));
    }
    Ok(TridiagPrecision {
        n: design.n_sites(),
        rho: (-lambda * h).exp(),
    })
}

/// Dense working precision backed by a Cholesky factor of Sigma.
pub struct DensePrecision<'a>(pub &'a CholFactor);

impl PrecisionOp for DensePrecision<'_> {
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = v.to_vec();
        self.0.solve_in_place(&mut out);
        Ok(out)
    }
}

/// Generalized least squares: x' Sigma^{-1} y / x' Sigma^{-1} x.
pub fn gls(x: &[f64], y: &[f64], prec: &dyn PrecisionOp) -> Result<EstimatorReport> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::InsufficientData(
            "gls needs equal-length nonempty inputs".into(),
        ));
    }
    let sy = prec.apply(y)?;
    let sx = prec.apply(x)?;
    let num = dot(x, &sy);
    let den = dot(x, &sx);
    if den == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    Ok(report("gls", 0, num, den, x.len()))
}

/// GLS under the exponential working covariance. With `lambda = None` the
/// decay rate is chosen by minimizing the Gaussian profile likelihood of
/// the residuals (an O(n) objective thanks to the closed-form precision and
/// determinant), searched by golden section on the log scale.
pub fn gls_exp(sample: &FieldSample, lambda: Option<f64>) -> Result<EstimatorReport> {
    let (x, y) = observed(sample);
    let design = &sample.design;
    let h = match &design.meta {
        DesignMeta::Grid1d { h } => *h,
        _ => {
            return Err(Error::Config(
                "gls_exp needs a regular 1D grid".into(),
            ))
        }
    };
    let n = design.n_sites();
    let run = |lam: f64| -> Result<EstimatorReport> {
        let prec = gls_exp_precision(design, lam)?;
        let mut rep = gls(x, y, &prec)?;
        rep.estimator_id = "gls_exp";
        Ok(rep)
    };
    let lam = match lambda {
        Some(l) => l,
        None => {
            // Profile negative log-likelihood at decay rate lambda.
            let nll = |lam: f64| -> f64 {
                let prec = TridiagPrecision {
                    n,
                    rho: (-lam * h).exp(),
                };
                let (Ok(sy), Ok(sx)) = (prec.apply(y), prec.apply(x)) else {
                    return f64::INFINITY;
                };
                let den = dot(x, &sx);
                if den == 0.0 {
                    return f64::INFINITY;
                }
                let beta = dot(x, &sy) / den;
                let r: Vec<f64> = (0..n).map(|i| y[i] - beta * x[i]).collect();
                let sr = prec.apply(&r).unwrap();
                let q = dot(&r, &sr).max(1e-300);
                // log det Sigma = (n-1) log(1 - rho^2) for the unit-variance
                // exponential correlation.
                let rho = (-lam * h).exp();
                (n as f64) * (q / n as f64).ln() + (n as f64 - 1.0) * (1.0 - rho * rho).ln()
            };
            let lo = (0.1 / (h * n as f64)).max(1e-3);
            let hi = 10.0 / h;
            golden_min(&|t: f64| nll(t.exp()), lo.ln(), hi.ln(), 60).exp()
        }
    };
    let mut rep = run(lam)?;
    if lambda.is_none() {
        rep.estimator_id = "gls_exp_fitted";
        rep.fitted_params = Some((1.0, 1.0 / lam, 0.5));
    }
    Ok(rep)
}

/// Golden-section minimizer on [a, b]; deterministic, fixed iteration count.
fn golden_min(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let inv_phi = 0.618_033_988_749_894_8;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlsProfile {
    /// Use the supplied working parameters as-is.
    Fixed,
    /// Estimate (sigma2, rho, nu) from the data by profile likelihood.
    Fitted,
}

/// GLS under a Matern working covariance on the sample's own design. The
/// fitted profile scans a deterministic grid over smoothness and log-spaced
/// ranges (variance profiled out in closed form), then refines the range by
/// golden section at the best smoothness.
pub fn gls_matern(
    sample: &FieldSample,
    w_params: &MaternParams,
    profile: GlsProfile,
) -> Result<EstimatorReport> {
    let (x, y) = observed(sample);
    let design = &sample.design;
    match profile {
        GlsProfile::Fixed => {
            let factor = matern_working_factor(design, w_params)?;
            let mut rep = gls(x, y, &DensePrecision(&factor))?;
            rep.estimator_id = "gls_matern";
            Ok(rep)
        }
        GlsProfile::Fitted => {
            let n = design.n_sites();
            let span = domain_span(design);
            let nll = |rho: f64, nu: f64| -> f64 {
                let Ok(p) = MaternParams::new(1.0, rho, nu) else {
                    return f64::INFINITY;
                };
                let Ok(factor) = matern_working_factor(design, &p) else {
                    return f64::INFINITY;
                };
                let prec = DensePrecision(&factor);
                let (Ok(sy), Ok(sx)) = (prec.apply(y), prec.apply(x)) else {
                    return f64::INFINITY;
                };
                let den = dot(x, &sx);
                if den == 0.0 {
                    return f64::INFINITY;
                }
                let beta = dot(x, &sy) / den;
                let r: Vec<f64> = (0..n).map(|i| y[i] - beta * x[i]).collect();
                let Ok(sr) = prec.apply(&r) else {
                    return f64::INFINITY;
                };
                let q = dot(&r, &sr).max(1e-300);
                (n as f64) * (q / n as f64).ln() + factor.logdet()
            };
            let nus: Vec<f64> = (0..11).map(|i| 0.5 + 0.25 * i as f64).collect();
            let rho_lo = span / (n as f64);
            let rho_hi = 2.0 * span;
            let rhos: Vec<f64> = (0..8)
                .map(|i| rho_lo * (rho_hi / rho_lo).powf(i as f64 / 7.0))
                .collect();
            let mut best = (f64::INFINITY, rhos[0], nus[0]);
            for &nu in &nus {
                for &rho in &rhos {
                    let v = nll(rho, nu);
                    if v < best.0 {
                        best = (v, rho, nu);
                    }
                }
            }
            let nu = best.2;
            let lrho = golden_min(
                &|t: f64| nll(t.exp(), nu),
                rho_lo.ln(),
                rho_hi.ln(),
                24,
            );
            let rho = lrho.exp();
            let p = MaternParams::new(1.0, rho, nu)?;
            let factor = matern_working_factor(design, &p)?;
            let prec = DensePrecision(&factor);
            let mut rep = gls(x, y, &prec)?;
            // Recover the profiled variance for reporting.
            let r: Vec<f64> = (0..n).map(|i| y[i] - rep.beta_hat * x[i]).collect();
            let sr = prec.apply(&r)?;
            let sigma2 = dot(&r, &sr) / n as f64;
            rep.estimator_id = "gls_matern_fitted";
            rep.fitted_params = Some((sigma2, rho, nu));
            Ok(rep)
        }
    }
}

fn matern_working_factor(design: &Design, params: &MaternParams) -> Result<CholFactor> {
    let model = CovModel::Matern(*params);
    let jc = assemble_joint(&model, Arc::new(design.clone()))?;
    Ok(jc.factor)
}

fn domain_span(design: &Design) -> f64 {
    let n = design.n_sites();
    if n == 0 {
        return 1.0;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let s = design.site(i)[0];
        lo = lo.min(s);
        hi = hi.max(s);
    }
    (hi - lo).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// Two-exposure two-stage estimator
// ---------------------------------------------------------------------------

/// Two-stage slope estimation with two exposures on a fine 1D grid.
///
/// Stage 1 runs order-p differencing on the fine grid: the shared-roughness
/// coefficient c_hat is the ratio of differenced x2 on differenced x, and
/// beta1_star regresses differenced y on differenced x. Stage 2 removes the
/// first exposure: y* = y - beta1_star x and x2* = x2 - c_hat x, subsamples
/// every `coarse_stride`-th site, differences on that coarse grid, and
/// regresses to get beta2. Finally beta1 = beta1_star - c_hat * beta2.
pub fn multivariate_two_stage(
    sample: &FieldSample,
    p: usize,
    coarse_stride: usize,
) -> Result<EstimatorReport> {
    let x2 = sample
        .x2
        .as_deref()
        .ok_or_else(|| Error::Config("two-stage estimator needs an x2 channel".into()))?;
    let h = match &sample.design.meta {
        DesignMeta::Grid1d { h } => *h,
        _ => {
            return Err(Error::Config(
                "two-stage estimator needs a regular 1D grid".into(),
            ))
        }
    };
    if coarse_stride < 2 {
        return Err(Error::Config("coarse_stride must be >= 2".into()));
    }
    let (x, y) = observed(sample);
    let n = x.len();
    if n / coarse_stride <= p + 1 {
        return Err(Error::InsufficientData(
            "coarse grid too small for the requested order".into(),
        ));
    }

    let dx = diff(x, p, h)?;
    let dx2 = diff(x2, p, h)?;
    let dy = diff(y, p, h)?;
    let (cn, cd) = ratio_parts(&dx, &dx2)?;
    let c_hat = cn / cd;
    let (num1, den1) = ratio_parts(&dx, &dy)?;
    let beta1_star = num1 / den1;

    let ystar: Vec<f64> = (0..n).map(|i| y[i] - beta1_star * x[i]).collect();
    let x2star: Vec<f64> = (0..n).map(|i| x2[i] - c_hat * x[i]).collect();
    let coarse = |v: &[f64]| -> Vec<f64> { v.iter().step_by(coarse_stride).copied().collect() };
    let ch = h * coarse_stride as f64;
    let d2x = diff(&coarse(&x2star), p, ch)?;
    let d2y = diff(&coarse(&ystar), p, ch)?;
    let (num2, den2) = ratio_parts(&d2x, &d2y)?;
    let beta2 = num2 / den2;

    let mut rep = report("two_stage", p, num1, den1, dx.len());
    rep.beta_hat = beta1_star - c_hat * beta2;
    rep.beta2_hat = Some(beta2);
    rep.c_hat = Some(c_hat);
    rep.beta1_star = Some(beta1_star);
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Config-facing estimator selection
// ---------------------------------------------------------------------------

/// Serializable choice of estimator, as it appears in experiment configs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "name", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Ols,
    OlsDiff { p: usize },
    OlsLap { m: usize },
    AvgThenDiff { p: usize },
    SpacingWeightedFirst,
    SpacingWeightedSecond,
    GlsExp { lambda: Option<f64> },
    GlsMatern {
        params: MaternParams,
        #[serde(default)]
        fitted: bool,
    },
    TwoStage { p: usize, coarse_stride: usize },
}

impl EstimatorSpec {
    pub fn id(&self) -> &'static str {
        match self {
            EstimatorSpec::Ols => "ols",
            EstimatorSpec::OlsDiff { .. } => "ols_diff",
            EstimatorSpec::OlsLap { .. } => "ols_lap",
            EstimatorSpec::AvgThenDiff { .. } => "avg_then_diff",
            EstimatorSpec::SpacingWeightedFirst => "spacing_weighted_first",
            EstimatorSpec::SpacingWeightedSecond => "spacing_weighted_second",
            EstimatorSpec::GlsExp { lambda: Some(_) } => "gls_exp",
            EstimatorSpec::GlsExp { lambda: None } => "gls_exp_fitted",
            EstimatorSpec::GlsMatern { fitted: false, .. } => "gls_matern",
            EstimatorSpec::GlsMatern { fitted: true, .. } => "gls_matern_fitted",
            EstimatorSpec::TwoStage { .. } => "two_stage",
        }
    }

    pub fn order(&self) -> usize {
        match self {
            EstimatorSpec::OlsDiff { p }
            | EstimatorSpec::AvgThenDiff { p }
            | EstimatorSpec::TwoStage { p, .. } => *p,
            EstimatorSpec::OlsLap { m } => *m,
            EstimatorSpec::SpacingWeightedFirst => 1,
            EstimatorSpec::SpacingWeightedSecond => 2,
            _ => 0,
        }
    }

    /// Precompute anything reusable across replicates on a fixed design
    /// (currently the dense working-covariance factorization).
    pub fn prepare(&self, design: &Design) -> Result<PreparedEstimator> {
        let factor = match self {
            EstimatorSpec::GlsMatern {
                params,
                fitted: false,
            } => Some(matern_working_factor(design, params)?),
            _ => None,
        };
        Ok(PreparedEstimator {
            spec: self.clone(),
            factor,
        })
    }
}

/// An estimator bound to a design, with shared factorizations hoisted out of
/// the per-replicate path.
pub struct PreparedEstimator {
    spec: EstimatorSpec,
    factor: Option<CholFactor>,
}

impl PreparedEstimator {
    pub fn spec(&self) -> &EstimatorSpec {
        &self.spec
    }

    pub fn run(&self, sample: &FieldSample) -> Result<EstimatorReport> {
        match &self.spec {
            EstimatorSpec::Ols => ols_diff(sample, 0),
            EstimatorSpec::OlsDiff { p } => ols_diff(sample, *p),
            EstimatorSpec::OlsLap { m } => ols_lap(sample, *m),
            EstimatorSpec::AvgThenDiff { p } => avg_then_diff(sample, *p),
            EstimatorSpec::SpacingWeightedFirst => spacing_weighted_first(sample),
            EstimatorSpec::SpacingWeightedSecond => spacing_weighted_second(sample),
            EstimatorSpec::GlsExp { lambda } => gls_exp(sample, *lambda),
            EstimatorSpec::GlsMatern { params, fitted } => {
                if *fitted {
                    gls_matern(sample, params, GlsProfile::Fitted)
                } else if let Some(f) = &self.factor {
                    let (x, y) = observed(sample);
                    let mut rep = gls(x, y, &DensePrecision(f))?;
                    rep.estimator_id = "gls_matern";
                    Ok(rep)
                } else {
                    gls_matern(sample, params, GlsProfile::Fixed)
                }
            }
            EstimatorSpec::TwoStage { p, coarse_stride } => {
                multivariate_two_stage(sample, *p, *coarse_stride)
            }
        }
    }
}
