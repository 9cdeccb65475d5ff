//! Estimability classification.
//!
//! Whether the slope can be estimated consistently depends on how the
//! exposure's small-scale roughness compares with the disturbance's: the
//! exposure must be rough enough relative to the disturbance (in a
//! dimension-adjusted sense), and the cross structure must not be rougher
//! than the exposure itself. This module implements those parameter-space
//! rules per covariance family, the spectral tail integral that corroborates
//! them, a data-driven estimator of the roughness exponents, and a
//! recommendation layer that turns the estimated exponents into an
//! estimator choice.

use serde::Serialize;

use crate::covmodels::{matern_spectral, MaternParams};
use crate::error::{Error, Result};
use crate::estimators::order_from_alpha;
use crate::fields::{Design, DesignMeta, FieldSample};

// ---------------------------------------------------------------------------
// Region classification
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "min_order")]
pub enum RegionStatus {
    /// Consistent estimation possible; carries the minimal difference order
    /// (p in 1D, Laplacian order m in 2D).
    Estimable(usize),
    NotEstimable,
    /// Exactly on the smoothness boundary; no claim either way.
    Boundary,
    /// The cross structure is at least as rough as the exposure, violating
    /// the standing smoothness ordering.
    CrossSmoothnessViolated,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegionVerdict {
    #[serde(flatten)]
    pub status: RegionStatus,
    pub d: usize,
    /// Which rule fired, in plain words.
    pub rationale: &'static str,
    /// Family-specific warning (e.g. a power-law tail too heavy to be
    /// integrable in this dimension).
    pub caveat: Option<&'static str>,
}

impl RegionVerdict {
    pub fn min_order(&self) -> Option<usize> {
        match self.status {
            RegionStatus::Estimable(k) => Some(k),
            _ => None,
        }
    }

    pub fn status_str(&self) -> &'static str {
        match self.status {
            RegionStatus::Estimable(_) => "estimable",
            RegionStatus::NotEstimable => "not_estimable",
            RegionStatus::Boundary => "boundary",
            RegionStatus::CrossSmoothnessViolated => "cross_violated",
        }
    }
}

/// Classify a bivariate Matern configuration. The exposure is estimable
/// when nu_x < nu_w + d/2 (strictly) and the cross smoothness exceeds the
/// exposure smoothness; the minimal order makes the operator kill the
/// exposure's roughness exponent 2 nu_x.
pub fn matern_region(nu_x: f64, nu_w: f64, nu_xw: f64, d: usize) -> RegionVerdict {
    debug_assert!(nu_x > 0.0 && nu_w > 0.0 && nu_xw > 0.0);
    let bound = nu_w + d as f64 / 2.0;
    let status;
    let rationale;
    if nu_x == bound {
        status = RegionStatus::Boundary;
        rationale = "nu_x equals nu_w + d/2 exactly";
    } else if nu_x > bound {
        status = RegionStatus::NotEstimable;
        rationale = "exposure smoother than disturbance allows (nu_x > nu_w + d/2)";
    } else if nu_xw <= nu_x {
        status = RegionStatus::CrossSmoothnessViolated;
        rationale = "cross smoothness must exceed the exposure smoothness";
    } else {
        status = RegionStatus::Estimable(order_from_alpha(2.0 * nu_x, d));
        rationale = "nu_x < nu_w + d/2 and nu_xw > nu_x";
    }
    RegionVerdict {
        status,
        d,
        rationale,
        caveat: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Powexp,
    Gencauchy,
    Lmc,
}

/// Exponent inputs for the non-Matern families: the principal-irregular-term
/// exponents of exposure and disturbance, optionally the cross exponent, and
/// for the heavy-tail family the delta*kappa products that govern spectral
/// integrability.
#[derive(Clone, Copy, Debug, Default)]
pub struct FamilyExponents {
    pub delta_x: f64,
    pub delta_w: f64,
    pub delta_xw: Option<f64>,
    pub dk_x: Option<f64>,
    pub dk_w: Option<f64>,
}

/// Classify the power-exponential, heavy-tail, and linear-coregionalization
/// families. In 1D all three share the comparison delta_x < delta_w + gap
/// with gap 1 (componentwise families) or d (coregionalization); the
/// heavy-tail family in dimension above one is always estimable, with a
/// caveat flag when a delta*kappa product fails the d-integrability check.
pub fn family_region(family: Family, e: &FamilyExponents, d: usize) -> RegionVerdict {
    let caveat = match family {
        Family::Gencauchy => {
            let bad = |v: Option<f64>| v.is_some_and(|dk| dk <= d as f64);
            (bad(e.dk_x) || bad(e.dk_w))
                .then_some("delta*kappa <= d: spectral density not integrable in this dimension")
        }
        _ => None,
    };
    if family == Family::Gencauchy && d > 1 {
        return RegionVerdict {
            status: RegionStatus::Estimable(order_from_alpha(e.delta_x, d)),
            d,
            rationale: "heavy-tail family above dimension one is always estimable",
            caveat,
        };
    }
    let gap = match family {
        Family::Powexp | Family::Gencauchy => 1.0,
        Family::Lmc => d as f64,
    };
    let bound = e.delta_w + gap;
    let status;
    let rationale;
    if e.delta_x == bound {
        status = RegionStatus::Boundary;
        rationale = "delta_x equals the family's smoothness bound exactly";
    } else if e.delta_x > bound {
        status = RegionStatus::NotEstimable;
        rationale = "exposure exponent exceeds the family's smoothness bound";
    } else if e.delta_xw.is_some_and(|dxw| dxw <= e.delta_x) {
        status = RegionStatus::CrossSmoothnessViolated;
        rationale = "cross exponent must exceed the exposure exponent";
    } else {
        status = RegionStatus::Estimable(order_from_alpha(e.delta_x, d));
        rationale = "exposure rough enough relative to the disturbance";
    }
    RegionVerdict {
        status,
        d,
        rationale,
        caveat,
    }
}

// ---------------------------------------------------------------------------
// Spectral tail test
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TailVerdict {
    /// The spectral ratio integral converges: no consistent estimator.
    IntegralFinite,
    IntegralDivergent,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TailTest {
    /// e such that f_X / f_W decays like omega^{-e}.
    pub ratio_tail_exponent: f64,
    pub verdict: TailVerdict,
}

/// Analytic tail test: with f_X ~ omega^{-e_x} and f_W ~ omega^{-e_w}, the
/// radial integral of the ratio over d-space is finite iff e_x - e_w > d.
pub fn tail_test(fx_tail_exponent: f64, fw_tail_exponent: f64, d: usize) -> TailTest {
    let e = fx_tail_exponent - fw_tail_exponent;
    TailTest {
        ratio_tail_exponent: e,
        verdict: if e > d as f64 {
            TailVerdict::IntegralFinite
        } else {
            TailVerdict::IntegralDivergent
        },
    }
}

/// Numeric tail test for Matern densities: integrate the actual spectral
/// ratio over [0, 2^k Omega0] for k = 0..8 and call the integral divergent
/// when the last three doubling increments each add more than 50% of the
/// total accumulated before them.
pub fn tail_test_numeric_matern(px: &MaternParams, pw: &MaternParams, d: usize) -> TailTest {
    let a_max = (2.0 * px.nu).sqrt() / px.rho;
    let b_max = (2.0 * pw.nu).sqrt() / pw.rho;
    let omega0 = 32.0 * a_max.max(b_max);
    let integrand = |w: f64| -> f64 {
        let r = matern_spectral(w, px, d) / matern_spectral(w, pw, d);
        if d == 2 {
            r * w
        } else {
            r
        }
    };
    let mut totals = Vec::with_capacity(9);
    let mut total = 0.0;
    let mut lo = 0.0f64;
    for k in 0..9 {
        let hi = omega0 * (1u64 << k) as f64;
        total += simpson(&integrand, lo, hi, 4096);
        totals.push(total);
        lo = hi;
    }
    let n = totals.len();
    let divergent = (n - 3..n).all(|k| {
        let before = totals[k - 1];
        let inc = totals[k] - before;
        inc > 0.5 * before
    });
    TailTest {
        ratio_tail_exponent: 2.0 * (px.nu - pw.nu),
        verdict: if divergent {
            TailVerdict::IntegralDivergent
        } else {
            TailVerdict::IntegralFinite
        },
    }
}

/// Composite Simpson's rule with n (even) panels.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

// ---------------------------------------------------------------------------
// Roughness exponent estimation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AlphaEstimate {
    pub alpha_hat: f64,
    /// Difference order the accepted slope came from.
    pub order: usize,
    /// The dyadic lag ladder used, in domain units.
    pub lags: Vec<f64>,
    /// R-squared of the accepted log-log regression.
    pub r2: f64,
}

const LAG_MULTIPLIERS: [usize; 4] = [1, 2, 4, 8];

/// Estimate the roughness exponent alpha from one or more equally spaced
/// series sharing grid spacing h: regress the log mean squared raw p-th
/// increments against log lag over the dyadic ladder {h, 2h, 4h, 8h},
/// escalating the order p until the fitted slope drops below 2p - 0.1
/// (a slope pinned at 2p means the operator order is too low to expose the
/// roughness). Increments that vanish to rounding noise make the estimate
/// inconclusive: the input is too smooth for increment-based estimation.
pub fn estimate_alpha_pooled(
    series: &[&[f64]],
    h: f64,
    max_order: usize,
) -> Result<AlphaEstimate> {
    let n_total: usize = series.iter().map(|s| s.len()).sum();
    if n_total < 256 {
        return Err(Error::InsufficientData(
            "exponent estimation needs at least 256 points".into(),
        ));
    }
    if !(h > 0.0) {
        return Err(Error::Config("grid spacing must be positive".into()));
    }
    let mean_sq: f64 = series
        .iter()
        .flat_map(|s| s.iter())
        .map(|v| v * v)
        .sum::<f64>()
        / n_total as f64;
    let floor = mean_sq * 1e-26 + f64::MIN_POSITIVE;

    let mut last_slope = f64::NAN;
    for p in 1..=max_order.max(1) {
        let mut lags = Vec::with_capacity(4);
        let mut logs = Vec::with_capacity(4);
        let mut degenerate = false;
        for &ell in &LAG_MULTIPLIERS {
            let mut sum = 0.0;
            let mut count = 0usize;
            for s in series {
                let (ms, c) = mean_sq_increments(s, p, ell);
                sum += ms * c as f64;
                count += c;
            }
            if count == 0 {
                return Err(Error::InsufficientData(
                    "series too short for the lag ladder".into(),
                ));
            }
            let ms = sum / count as f64;
            if ms <= floor {
                degenerate = true;
                break;
            }
            lags.push(ell as f64 * h);
            logs.push(ms.ln());
        }
        if degenerate {
            return Err(Error::Inconclusive(
                "increments vanish at this order; the input looks deterministic/smooth".into(),
            ));
        }
        let (slope, r2) = line_fit(&lags.iter().map(|l| l.ln()).collect::<Vec<_>>(), &logs);
        last_slope = slope;
        if slope < 2.0 * p as f64 - 0.1 {
            return Ok(AlphaEstimate {
                alpha_hat: slope,
                order: p,
                lags,
                r2,
            });
        }
    }
    Err(Error::Inconclusive(format!(
        "log-log slope stayed at the smooth boundary ({last_slope:.3}) up to the maximum order"
    )))
}

/// Single-series convenience wrapper (regular 1D grid).
pub fn estimate_alpha(values: &[f64], h: f64, max_order: usize) -> Result<AlphaEstimate> {
    estimate_alpha_pooled(&[values], h, max_order)
}

/// Mean squared raw p-th increments at index lag ell, and their count.
fn mean_sq_increments(v: &[f64], p: usize, ell: usize) -> (f64, usize) {
    let span = p * ell;
    if v.len() <= span {
        return (0.0, 0);
    }
    let coeffs = binomial_signs(p);
    let count = v.len() - span;
    let mut acc = 0.0;
    for i in 0..count {
        let mut inc = 0.0;
        for (k, c) in coeffs.iter().enumerate() {
            inc += c * v[i + k * ell];
        }
        acc += inc * inc;
    }
    (acc / count as f64, count)
}

/// Signed binomial coefficients (-1)^k C(p, k), k = 0..=p.
fn binomial_signs(p: usize) -> Vec<f64> {
    let mut c = vec![1.0f64];
    for _ in 0..p {
        let mut next = vec![1.0; c.len() + 1];
        for i in 1..c.len() {
            next[i] = c[i - 1].abs() + c[i].abs();
        }
        c = next;
    }
    c.iter_mut().enumerate().for_each(|(k, v)| {
        if k % 2 == 1 {
            *v = -*v;
        }
    });
    c
}

/// Least-squares line fit returning (slope, r2).
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let fit = my + slope * (a - mx);
            (b - fit) * (b - fit)
        })
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (slope, r2)
}

// ---------------------------------------------------------------------------
// Recommendation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct Recommendation {
    pub feasible: bool,
    /// Estimator id to use when feasible.
    pub estimator: &'static str,
    pub order: usize,
    pub alpha_xx: f64,
    pub alpha_yy: f64,
    pub note: String,
}

/// Estimate the roughness exponents of the observed x and y channels and
/// turn them into an estimator choice: infeasible when the outcome is
/// rougher than the exposure by more than the dimension allows
/// (alpha_yy < alpha_xx - d), otherwise the minimal-order differencing
/// (1D) or Laplacian (2D) estimator.
pub fn recommend(sample: &FieldSample) -> Result<Recommendation> {
    let design = &sample.design;
    let (series_x, series_y, h, d) = channel_series(design, sample)?;
    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|s| s.as_slice()).collect()
    }
    let ax = estimate_alpha_pooled(&refs(&series_x), h, 4)?;
    let ay = estimate_alpha_pooled(&refs(&series_y), h, 4)?;
    let threshold = ax.alpha_hat - d as f64;
    if ay.alpha_hat < threshold {
        return Ok(Recommendation {
            feasible: false,
            estimator: "none",
            order: 0,
            alpha_xx: ax.alpha_hat,
            alpha_yy: ay.alpha_hat,
            note: format!(
                "outcome exponent {:.2} falls below exposure exponent minus dimension ({:.2})",
                ay.alpha_hat, threshold
            ),
        });
    }
    let (estimator, order) = if d == 2 {
        ("ols_lap", order_from_alpha(ax.alpha_hat, 2))
    } else {
        ("ols_diff", order_from_alpha(ax.alpha_hat, 1))
    };
    Ok(Recommendation {
        feasible: true,
        estimator,
        order,
        alpha_xx: ax.alpha_hat,
        alpha_yy: ay.alpha_hat,
        note: format!(
            "minimal order with operator exponent exceeding alpha_xx = {:.2}",
            ax.alpha_hat
        ),
    })
}

/// Split observed channels into equally spaced series: the whole series for
/// a 1D grid, one series per lattice row for a 2D grid.
fn channel_series(
    design: &Design,
    sample: &FieldSample,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64, usize)> {
    let x = sample.observed_x();
    let y = sample.observed_y();
    match &design.meta {
        DesignMeta::Grid1d { h } => Ok((vec![x.to_vec()], vec![y.to_vec()], *h, 1)),
        DesignMeta::Grid2d { h, side_points } => {
            let p = *side_points;
            let rows = |v: &[f64]| -> Vec<Vec<f64>> {
                (0..p).map(|iy| v[iy * p..(iy + 1) * p].to_vec()).collect()
            };
            Ok((rows(x), rows(y), *h, 2))
        }
        _ => Err(Error::Config(
            "exponent estimation needs a regular grid".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Region raster
// ---------------------------------------------------------------------------

/// Rule for choosing the cross smoothness at each raster cell.
#[derive(Clone, Copy, Debug)]
pub enum NuXwRule {
    /// Arithmetic mean of nu_x and nu_w.
    Mean,
    /// nu_x + offset (cross condition holds by construction when offset > 0).
    XPlus(f64),
    /// Fixed value.
    Fixed(f64),
}

impl NuXwRule {
    fn value(&self, nu_x: f64, nu_w: f64) -> f64 {
        match self {
            NuXwRule::Mean => 0.5 * (nu_x + nu_w),
            NuXwRule::XPlus(off) => nu_x + off,
            NuXwRule::Fixed(v) => *v,
        }
    }

    /// Parse "mean", "x+0.25", or a bare number.
    pub fn parse(s: &str) -> Result<NuXwRule> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("mean") {
            return Ok(NuXwRule::Mean);
        }
        if let Some(rest) = t.strip_prefix("x+") {
            let off: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad cross-smoothness rule '{s}'")))?;
            return Ok(NuXwRule::XPlus(off));
        }
        t.parse::<f64>()
            .map(NuXwRule::Fixed)
            .map_err(|_| Error::Config(format!("bad cross-smoothness rule '{s}'")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegionCell {
    pub nu_x: f64,
    pub nu_w: f64,
    pub status: &'static str,
    /// 0 when not estimable/boundary.
    pub min_order: usize,
}

/// Evaluate the Matern region over a (nu_x, nu_w) grid.
pub fn region_map(d: usize, nu_x: &[f64], nu_w: &[f64], rule: NuXwRule) -> Vec<RegionCell> {
    let mut out = Vec::with_capacity(nu_x.len() * nu_w.len());
    for &nx in nu_x {
        for &nw in nu_w {
            let v = matern_region(nx, nw, rule.value(nx, nw), d);
            out.push(RegionCell {
                nu_x: nx,
                nu_w: nw,
                status: v.status_str(),
                min_order: v.min_order().unwrap_or(0),
            });
        }
    }
    out
}

/// Write a region raster as CSV with header nu_x,nu_w,status,min_order.
pub fn write_region_csv<W: std::io::Write>(mut w: W, cells: &[RegionCell]) -> Result<()> {
    writeln!(w, "nu_x,nu_w,status,min_order").map_err(|e| Error::Config(e.to_string()))?;
    for c in cells {
        writeln!(w, "{},{},{},{}", c.nu_x, c.nu_w, c.status, c.min_order)
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}
