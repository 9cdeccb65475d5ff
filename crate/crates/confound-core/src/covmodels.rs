//! Covariance families for the simulated field pairs (and triples): Matern,
//! power-exponential, generalized Cauchy, a shared-range bivariate Matern,
//! linear coregionalization, plus two nonstationary constructions (warped
//! coordinates and locally-varying scale/range kernels).
//!
//! Every family also reports, per block, the exponent and coefficient of the
//! leading non-analytic ("principal irregular") term of its covariance at
//! small lags — the quantity that drives path roughness and therefore which
//! differencing orders can recover the slope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{bessel_k, bessel_k_scaled, gamma, gamma_reflect, ln_gamma};

const LN_2: f64 = std::f64::consts::LN_2;
const PI: f64 = std::f64::consts::PI;

fn invalid(name: &'static str, value: f64, why: &'static str) -> Error {
    Error::InvalidParam { name, value, why }
}

// ---------------------------------------------------------------------------
// Blocks of a multivariate covariance
// ---------------------------------------------------------------------------

/// Identifies one block of the joint covariance over up to three fields
/// (field 1 = exposure X, field 2 = disturbance W, field 3 = second exposure).
/// Cross blocks are symmetric, so (2,1) is served as B12, etc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    B11,
    B12,
    B22,
    B13,
    B23,
    B33,
}

impl Block {
    /// Canonical block for an unordered field pair (0-based indices).
    pub fn from_pair(k: usize, l: usize) -> Block {
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        match (a, b) {
            (0, 0) => Block::B11,
            (0, 1) => Block::B12,
            (1, 1) => Block::B22,
            (0, 2) => Block::B13,
            (1, 2) => Block::B23,
            (2, 2) => Block::B33,
            _ => panic!("field index out of range: ({k},{l})"),
        }
    }

    pub fn is_marginal(self) -> bool {
        matches!(self, Block::B11 | Block::B22 | Block::B33)
    }

    fn max_field(self) -> usize {
        match self {
            Block::B11 => 1,
            Block::B12 | Block::B22 => 2,
            Block::B13 | Block::B23 | Block::B33 => 3,
        }
    }
}

/// Principal irregular term of a covariance block near lag zero:
/// K(t) = analytic(t) + c * t^alpha (+ log factor on the boundary).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitDescriptor {
    pub alpha: f64,
    pub c: f64,
    /// Set when alpha is an even integer, where the leading irregular term
    /// carries a log factor and the clean power-law theory does not apply.
    pub boundary: bool,
}

// ---------------------------------------------------------------------------
// Univariate stationary families
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaternParams {
    pub sigma2: f64,
    pub rho: f64,
    pub nu: f64,
}

impl MaternParams {
    pub fn new(sigma2: f64, rho: f64, nu: f64) -> Result<Self> {
        let p = MaternParams { sigma2, rho, nu };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma2", self.sigma2), ("rho", self.rho), ("nu", self.nu)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, v, "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// Matern covariance sigma2 * 2^(1-nu)/Gamma(nu) * z^nu K_nu(z) with
/// z = sqrt(2 nu) h / rho. Continuous at h = 0 with value sigma2.
pub fn matern_cov(h: f64, p: &MaternParams) -> f64 {
    debug_assert!(h >= 0.0 && h.is_finite());
    if h == 0.0 {
        return p.sigma2;
    }
    let z = (2.0 * p.nu).sqrt() * h / p.rho;
    if z > 30.0 {
        // Log-space evaluation rides through the exponential decay without
        // underflowing the z^nu * K_nu(z) product.
        let ln = p.sigma2.ln() + (1.0 - p.nu) * LN_2 - ln_gamma(p.nu) + p.nu * z.ln() - z
            + bessel_k_scaled(p.nu, z).ln();
        ln.exp()
    } else {
        p.sigma2 * (2.0f64.powf(1.0 - p.nu) / gamma(p.nu)) * z.powf(p.nu) * bessel_k(p.nu, z)
    }
}

/// Isotropic spectral density of the Matern family in dimension d, with
/// total mass sigma2 (Bochner normalization): f(w) =
/// sigma2 * Gamma(nu + d/2) a^(2 nu) / (Gamma(nu) pi^(d/2) (a^2 + w^2)^(nu + d/2)),
/// a = sqrt(2 nu)/rho. Tail order w^(-2 nu - d).
pub fn matern_spectral(omega: f64, p: &MaternParams, d: usize) -> f64 {
    debug_assert!(omega >= 0.0);
    debug_assert!(d == 1 || d == 2);
    let a = (2.0 * p.nu).sqrt() / p.rho;
    let df = d as f64;
    let norm = p.sigma2 * gamma(p.nu + df / 2.0) * a.powf(2.0 * p.nu)
        / (gamma(p.nu) * PI.powf(df / 2.0));
    norm * (a * a + omega * omega).powf(-(p.nu + df / 2.0))
}

fn matern_pit(p: &MaternParams, cross_scale: f64) -> PitDescriptor {
    let alpha = 2.0 * p.nu;
    let a = (2.0 * p.nu).sqrt() / p.rho;
    let integer_nu = p.nu.fract() == 0.0;
    let c = if integer_nu {
        // Even-integer alpha: the irregular term is c * t^(2 nu) * log t.
        let sign = if (p.nu as i64) % 2 == 0 { -1.0 } else { 1.0 };
        sign * cross_scale * a.powf(2.0 * p.nu)
            / (2.0f64.powf(2.0 * p.nu - 1.0) * gamma(p.nu) * gamma(p.nu + 1.0))
    } else {
        cross_scale * gamma_reflect(-p.nu) / (gamma(p.nu) * 2.0f64.powf(2.0 * p.nu))
            * a.powf(2.0 * p.nu)
    };
    PitDescriptor {
        alpha,
        c,
        boundary: integer_nu,
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowExpParams {
    pub sigma2: f64,
    pub phi: f64,
    pub delta: f64,
}

impl PowExpParams {
    pub fn new(sigma2: f64, phi: f64, delta: f64) -> Result<Self> {
        let p = PowExpParams { sigma2, phi, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma2", self.sigma2), ("phi", self.phi)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, v, "must be finite and > 0"));
            }
        }
        if !(self.delta > 0.0 && self.delta <= 2.0) {
            return Err(invalid("delta", self.delta, "must lie in (0, 2]"));
        }
        Ok(())
    }

    /// delta = 2 gives an analytic-path process, outside the range of the
    /// differencing theory; reported so downstream classification can flag it.
    pub fn analytic(&self) -> bool {
        self.delta == 2.0
    }
}

/// Power-exponential covariance sigma2 * exp(-phi h^delta).
pub fn powexp_cov(h: f64, p: &PowExpParams) -> f64 {
    debug_assert!(h >= 0.0 && h.is_finite());
    p.sigma2 * (-p.phi * h.powf(p.delta)).exp()
}

fn powexp_pit(p: &PowExpParams, cross_scale: f64) -> PitDescriptor {
    PitDescriptor {
        alpha: p.delta,
        c: -cross_scale * p.phi,
        boundary: p.delta == 2.0,
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenCauchyParams {
    pub sigma2: f64,
    pub phi: f64,
    pub delta: f64,
    pub kappa: f64,
}

impl GenCauchyParams {
    pub fn new(sigma2: f64, phi: f64, delta: f64, kappa: f64) -> Result<Self> {
        let p = GenCauchyParams {
            sigma2,
            phi,
            delta,
            kappa,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("phi", self.phi),
            ("kappa", self.kappa),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(name, v, "must be finite and > 0"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 2.0) {
            return Err(invalid("delta", self.delta, "must lie in (0, 2)"));
        }
        Ok(())
    }

    /// The spectral density is integrable alongside a power-law tail only
    /// when delta * kappa exceeds the dimension.
    pub fn integrable(&self, d: usize) -> bool {
        self.delta * self.kappa > d as f64
    }
}

/// Generalized Cauchy covariance sigma2 * (1 + phi h^delta)^(-kappa).
pub fn gencauchy_cov(h: f64, p: &GenCauchyParams) -> f64 {
    debug_assert!(h >= 0.0 && h.is_finite());
    p.sigma2 * (1.0 + p.phi * h.powf(p.delta)).powf(-p.kappa)
}

fn gencauchy_pit(p: &GenCauchyParams, cross_scale: f64) -> PitDescriptor {
    PitDescriptor {
        alpha: p.delta,
        c: -cross_scale * p.kappa * p.phi,
        boundary: false,
    }
}

// ---------------------------------------------------------------------------
// Positive scalar functions on [0, L] (for the nonstationary families)
// ---------------------------------------------------------------------------

/// Closed-form positive function families so nonstationary configs stay
/// serializable: no arbitrary user code.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum PosFunc {
    Constant { value: f64 },
    Affine { a: f64, b: f64 },
    /// Piecewise-linear interpolation through (knots_s[i], knots_v[i]);
    /// knots must span the domain.
    Piecewise { knots_s: Vec<f64>, knots_v: Vec<f64> },
}

impl PosFunc {
    pub fn validate(&self, domain_len: f64) -> Result<()> {
        match self {
            PosFunc::Constant { value } => {
                if !(*value > 0.0) || !value.is_finite() {
                    return Err(invalid("value", *value, "must be finite and > 0"));
                }
            }
            PosFunc::Affine { a, b } => {
                if !a.is_finite() || !b.is_finite() {
                    return Err(invalid("a/b", *a, "must be finite"));
                }
                if !(*a > 0.0) || !(*a + *b * domain_len > 0.0) {
                    return Err(invalid(
                        "affine",
                        *a,
                        "must be positive on the whole domain",
                    ));
                }
            }
            PosFunc::Piecewise { knots_s, knots_v } => {
                if knots_s.len() < 2 || knots_s.len() != knots_v.len() {
                    return Err(Error::Config(
                        "piecewise function needs >= 2 matching knots".into(),
                    ));
                }
                if knots_s[0] != 0.0 || *knots_s.last().unwrap() != domain_len {
                    return Err(Error::Config(
                        "piecewise knots must span [0, domain_len]".into(),
                    ));
                }
                for w in knots_s.windows(2) {
                    if !(w[1] > w[0]) {
                        return Err(Error::Config(
                            "piecewise knots must be strictly increasing".into(),
                        ));
                    }
                }
                for &v in knots_v {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(invalid("knot value", v, "must be finite and > 0"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            PosFunc::Constant { value } => *value,
            PosFunc::Affine { a, b } => a + b * s,
            PosFunc::Piecewise { knots_s, knots_v } => {
                if s <= knots_s[0] {
                    return knots_v[0];
                }
                if s >= *knots_s.last().unwrap() {
                    return *knots_v.last().unwrap();
                }
                let i = knots_s.partition_point(|&k| k <= s) - 1;
                let t = (s - knots_s[i]) / (knots_s[i + 1] - knots_s[i]);
                knots_v[i] + t * (knots_v[i + 1] - knots_v[i])
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Monotone warp maps on [0, L]
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum WarpSpec {
    Identity,
    Affine { a: f64, b: f64 },
    /// Monotone piecewise-linear map through (knots_s[i], knots_f[i]).
    PiecewiseAffine { knots_s: Vec<f64>, knots_f: Vec<f64> },
    /// Normalized logistic bend fixing f(0) = 0 and f(L) = L;
    /// center in (0, 1) (as a fraction of L), width > 0.
    Sigmoid { center: f64, width: f64 },
}

impl WarpSpec {
    pub fn validate(&self, domain_len: f64) -> Result<()> {
        match self {
            WarpSpec::Identity => Ok(()),
            WarpSpec::Affine { a, b } => {
                if !(*b > 0.0) || !a.is_finite() || !b.is_finite() {
                    return Err(invalid("b", *b, "warp slope must be finite and > 0"));
                }
                let f0 = *a;
                let f1 = *a + *b * domain_len;
                if f0 < 0.0 || f1 > domain_len {
                    return Err(Error::Config(
                        "affine warp must map the domain into itself".into(),
                    ));
                }
                Ok(())
            }
            WarpSpec::PiecewiseAffine { knots_s, knots_f } => {
                if knots_s.len() < 2 || knots_s.len() != knots_f.len() {
                    return Err(Error::Config(
                        "piecewise warp needs >= 2 matching knots".into(),
                    ));
                }
                if knots_s[0] != 0.0 || *knots_s.last().unwrap() != domain_len {
                    return Err(Error::Config(
                        "warp knots must span [0, domain_len]".into(),
                    ));
                }
                for w in knots_s.windows(2) {
                    if !(w[1] > w[0]) {
                        return Err(Error::Config(
                            "warp knots must be strictly increasing".into(),
                        ));
                    }
                }
                for w in knots_f.windows(2) {
                    if !(w[1] > w[0]) {
                        return Err(Error::Config("warp must be strictly increasing".into()));
                    }
                }
                if knots_f[0] < 0.0 || *knots_f.last().unwrap() > domain_len {
                    return Err(Error::Config(
                        "warp values must stay inside [0, domain_len]".into(),
                    ));
                }
                Ok(())
            }
            WarpSpec::Sigmoid { center, width } => {
                if !(*center > 0.0 && *center < 1.0) {
                    return Err(invalid("center", *center, "must lie in (0, 1)"));
                }
                if !(*width > 0.0) || !width.is_finite() {
                    return Err(invalid("width", *width, "must be finite and > 0"));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, s: f64, domain_len: f64) -> f64 {
        match self {
            WarpSpec::Identity => s,
            WarpSpec::Affine { a, b } => a + b * s,
            WarpSpec::PiecewiseAffine { knots_s, knots_f } => {
                if s <= knots_s[0] {
                    return knots_f[0];
                }
                if s >= *knots_s.last().unwrap() {
                    return *knots_f.last().unwrap();
                }
                let i = knots_s.partition_point(|&k| k <= s) - 1;
                let t = (s - knots_s[i]) / (knots_s[i + 1] - knots_s[i]);
                knots_f[i] + t * (knots_f[i + 1] - knots_f[i])
            }
            WarpSpec::Sigmoid { center, width } => {
                let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
                let u = s / domain_len;
                let lo = sig(-center / width);
                let hi = sig((1.0 - center) / width);
                domain_len * (sig((u - center) / width) - lo) / (hi - lo)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// JSON-facing model description
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BivariateMaternSpec {
    pub k11: MaternParams,
    pub k22: MaternParams,
    pub nu12: f64,
    pub rho12: f64,
    pub shared_range: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmcComponentSpec {
    pub model: ModelSpec,
    pub a: f64,
    pub b: f64,
    /// Weight on the optional third field; any component carrying `c` makes
    /// the whole model trivariate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmcSpec {
    pub components: Vec<LmcComponentSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpedSpec {
    pub base: Box<ModelSpec>,
    pub warp: WarpSpec,
    pub domain_len: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaciorekSpec {
    /// Stationary correlation shapes per block (their own sills are
    /// normalized away; scale comes from sigma1/sigma2).
    pub base11: Box<ModelSpec>,
    pub base12: Box<ModelSpec>,
    pub base22: Box<ModelSpec>,
    pub rho12: f64,
    pub sigma1: PosFunc,
    pub sigma2: PosFunc,
    /// Local squared-range functions per block.
    pub phi11: PosFunc,
    pub phi12: PosFunc,
    pub phi22: PosFunc,
    pub domain_len: f64,
}

/// Serializable model description; `build` validates and returns an
/// evaluator. Parsing is strict: unknown fields and unknown families fail.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum ModelSpec {
    Matern(MaternParams),
    Powexp(PowExpParams),
    Gencauchy(GenCauchyParams),
    BivariateMatern(BivariateMaternSpec),
    Lmc(LmcSpec),
    Warped(WarpedSpec),
    Paciorek(PaciorekSpec),
}

impl ModelSpec {
    pub fn build(&self) -> Result<CovModel> {
        CovModel::from_spec(self)
    }

    pub fn from_json(json: &str) -> Result<ModelSpec> {
        Ok(serde_json::from_str(json)?)
    }
}

// ---------------------------------------------------------------------------
// Validated evaluators
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BivMatern {
    pub k11: MaternParams,
    pub k22: MaternParams,
    pub nu12: f64,
    pub rho12: f64,
    pub shared_range: bool,
    /// Range used by the cross block: the shared range, or the geometric
    /// mean of the marginal ranges when they differ.
    cross_rho: f64,
}

#[derive(Clone, Debug)]
pub struct LmcComp {
    pub cov: Box<CovModel>,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

#[derive(Clone, Debug)]
pub struct Lmc {
    pub comps: Vec<LmcComp>,
    pub trivariate: bool,
}

#[derive(Clone, Debug)]
pub struct Warped {
    pub base: Box<CovModel>,
    pub warp: WarpSpec,
    pub domain_len: f64,
}

#[derive(Clone, Debug)]
pub struct Paciorek {
    base11: Box<CovModel>,
    base12: Box<CovModel>,
    base22: Box<CovModel>,
    pub rho12: f64,
    pub sigma1: PosFunc,
    pub sigma2: PosFunc,
    pub phi11: PosFunc,
    pub phi12: PosFunc,
    pub phi22: PosFunc,
    pub domain_len: f64,
}

/// A validated covariance model over 1, 2, or 3 fields.
#[derive(Clone, Debug)]
pub enum CovModel {
    Matern(MaternParams),
    Powexp(PowExpParams),
    Gencauchy(GenCauchyParams),
    BivariateMatern(BivMatern),
    Lmc(Lmc),
    Warped(Warped),
    Paciorek(Paciorek),
}

impl CovModel {
    pub fn from_spec(spec: &ModelSpec) -> Result<CovModel> {
        match spec {
            ModelSpec::Matern(p) => {
                p.validate()?;
                Ok(CovModel::Matern(*p))
            }
            ModelSpec::Powexp(p) => {
                p.validate()?;
                Ok(CovModel::Powexp(*p))
            }
            ModelSpec::Gencauchy(p) => {
                p.validate()?;
                Ok(CovModel::Gencauchy(*p))
            }
            ModelSpec::BivariateMatern(s) => {
                s.k11.validate()?;
                s.k22.validate()?;
                if !(s.nu12 > 0.0) || !s.nu12.is_finite() {
                    return Err(invalid("nu12", s.nu12, "must be finite and > 0"));
                }
                if !(s.rho12 >= -1.0 && s.rho12 <= 1.0) {
                    return Err(invalid("rho12", s.rho12, "must lie in [-1, 1]"));
                }
                if s.shared_range && s.k11.rho != s.k22.rho {
                    return Err(Error::Config(
                        "shared_range requires k11.rho == k22.rho".into(),
                    ));
                }
                let cross_rho = if s.shared_range {
                    s.k11.rho
                } else {
                    (s.k11.rho * s.k22.rho).sqrt()
                };
                Ok(CovModel::BivariateMatern(BivMatern {
                    k11: s.k11,
                    k22: s.k22,
                    nu12: s.nu12,
                    rho12: s.rho12,
                    shared_range: s.shared_range,
                    cross_rho,
                }))
            }
            ModelSpec::Lmc(s) => {
                if s.components.is_empty() {
                    return Err(Error::Config("lmc needs at least one component".into()));
                }
                let mut comps = Vec::with_capacity(s.components.len());
                let mut any_c = false;
                for cs in &s.components {
                    let cov = cs.model.build()?;
                    if cov.n_fields() != 1 {
                        return Err(Error::Config(
                            "lmc components must be univariate models".into(),
                        ));
                    }
                    for (name, v) in [("a", cs.a), ("b", cs.b)] {
                        if !v.is_finite() {
                            return Err(invalid(name, v, "must be finite"));
                        }
                    }
                    if let Some(c) = cs.c {
                        if !c.is_finite() {
                            return Err(invalid("c", c, "must be finite"));
                        }
                        any_c = true;
                    }
                    comps.push(LmcComp {
                        cov: Box::new(cov),
                        a: cs.a,
                        b: cs.b,
                        c: cs.c.unwrap_or(0.0),
                    });
                }
                if !comps.iter().any(|c| c.a != 0.0) || !comps.iter().any(|c| c.b != 0.0) {
                    return Err(Error::Config(
                        "lmc needs at least one nonzero weight on each of the first two fields"
                            .into(),
                    ));
                }
                if any_c && !comps.iter().any(|c| c.c != 0.0) {
                    return Err(Error::Config(
                        "third-field weights are present but all zero".into(),
                    ));
                }
                Ok(CovModel::Lmc(Lmc {
                    comps,
                    trivariate: any_c,
                }))
            }
            ModelSpec::Warped(s) => {
                if !(s.domain_len > 0.0) {
                    return Err(invalid("domain_len", s.domain_len, "must be > 0"));
                }
                s.warp.validate(s.domain_len)?;
                let base = s.base.build()?;
                if base.n_fields() != 2 {
                    return Err(Error::Config(
                        "warped base must be a bivariate stationary model".into(),
                    ));
                }
                if !base.is_stationary() {
                    return Err(Error::Config("warped base must be stationary".into()));
                }
                Ok(CovModel::Warped(Warped {
                    base: Box::new(base),
                    warp: s.warp.clone(),
                    domain_len: s.domain_len,
                }))
            }
            ModelSpec::Paciorek(s) => {
                if !(s.domain_len > 0.0) {
                    return Err(invalid("domain_len", s.domain_len, "must be > 0"));
                }
                if !(s.rho12 >= -1.0 && s.rho12 <= 1.0) {
                    return Err(invalid("rho12", s.rho12, "must lie in [-1, 1]"));
                }
                for f in [&s.sigma1, &s.sigma2, &s.phi11, &s.phi12, &s.phi22] {
                    f.validate(s.domain_len)?;
                }
                let b11 = s.base11.build()?;
                let b12 = s.base12.build()?;
                let b22 = s.base22.build()?;
                for b in [&b11, &b12, &b22] {
                    if b.n_fields() != 1 {
                        return Err(Error::Config(
                            "paciorek base blocks must be univariate correlation shapes".into(),
                        ));
                    }
                }
                Ok(CovModel::Paciorek(Paciorek {
                    base11: Box::new(b11),
                    base12: Box::new(b12),
                    base22: Box::new(b22),
                    rho12: s.rho12,
                    sigma1: s.sigma1.clone(),
                    sigma2: s.sigma2.clone(),
                    phi11: s.phi11.clone(),
                    phi12: s.phi12.clone(),
                    phi22: s.phi22.clone(),
                    domain_len: s.domain_len,
                }))
            }
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            CovModel::Matern(_) => "matern",
            CovModel::Powexp(_) => "powexp",
            CovModel::Gencauchy(_) => "gencauchy",
            CovModel::BivariateMatern(_) => "bivariate_matern",
            CovModel::Lmc(_) => "lmc",
            CovModel::Warped(_) => "warped",
            CovModel::Paciorek(_) => "paciorek",
        }
    }

    pub fn n_fields(&self) -> usize {
        match self {
            CovModel::Matern(_) | CovModel::Powexp(_) | CovModel::Gencauchy(_) => 1,
            CovModel::BivariateMatern(_) => 2,
            CovModel::Lmc(l) => {
                if l.trivariate {
                    3
                } else {
                    2
                }
            }
            CovModel::Warped(_) | CovModel::Paciorek(_) => 2,
        }
    }

    pub fn is_stationary(&self) -> bool {
        !matches!(self, CovModel::Warped(_) | CovModel::Paciorek(_))
    }

    fn check_block(&self, block: Block) -> Result<()> {
        if block.max_field() > self.n_fields() {
            return Err(Error::Config(format!(
                "block {block:?} undefined for a {}-field model",
                self.n_fields()
            )));
        }
        Ok(())
    }

    /// Stationary evaluation by lag distance. Errors for nonstationary
    /// families, which need full coordinates.
    pub fn block_stationary(&self, block: Block, h: f64) -> Result<f64> {
        self.check_block(block)?;
        match self {
            CovModel::Matern(p) => Ok(matern_cov(h, p)),
            CovModel::Powexp(p) => Ok(powexp_cov(h, p)),
            CovModel::Gencauchy(p) => Ok(gencauchy_cov(h, p)),
            CovModel::BivariateMatern(m) => Ok(match block {
                Block::B11 => matern_cov(h, &m.k11),
                Block::B22 => matern_cov(h, &m.k22),
                Block::B12 => {
                    let cross = MaternParams {
                        sigma2: 1.0,
                        rho: m.cross_rho,
                        nu: m.nu12,
                    };
                    m.rho12
                        * (m.k11.sigma2 * m.k22.sigma2).sqrt()
                        * matern_cov(h, &cross)
                }
                _ => unreachable!("checked above"),
            }),
            CovModel::Lmc(l) => {
                let mut acc = 0.0;
                for comp in &l.comps {
                    let w = lmc_weight(comp, block);
                    if w != 0.0 {
                        acc += w * comp.cov.block_stationary(Block::B11, h)?;
                    }
                }
                Ok(acc)
            }
            CovModel::Warped(_) | CovModel::Paciorek(_) => Err(Error::Config(
                "nonstationary model requires coordinates, not a lag".into(),
            )),
        }
    }

    /// General evaluation at coordinate pairs (d = 1 or 2; nonstationary
    /// families are 1D). Symmetric in (s, s') by construction.
    pub fn block_cov(&self, block: Block, s: &[f64], sp: &[f64]) -> Result<f64> {
        match self {
            CovModel::Warped(w) => {
                self.check_block(block)?;
                let fs = w.warp.eval(s[0], w.domain_len);
                let fsp = w.warp.eval(sp[0], w.domain_len);
                w.base.block_stationary(block, (fs - fsp).abs())
            }
            CovModel::Paciorek(p) => {
                self.check_block(block)?;
                let (s, sp) = (s[0], sp[0]);
                let (scale, phi, base) = match block {
                    Block::B11 => (
                        p.sigma1.eval(s) * p.sigma1.eval(sp),
                        &p.phi11,
                        &p.base11,
                    ),
                    Block::B22 => (
                        p.sigma2.eval(s) * p.sigma2.eval(sp),
                        &p.phi22,
                        &p.base22,
                    ),
                    Block::B12 => {
                        // Geometric-mean site scales keep the cross block an
                        // exactly symmetric function of (s, s'); group the
                        // site product before applying rho12 so the rounding
                        // is symmetric too.
                        let m = |t: f64| (p.sigma1.eval(t) * p.sigma2.eval(t)).sqrt();
                        (p.rho12 * (m(s) * m(sp)), &p.phi12, &p.base12)
                    }
                    _ => unreachable!("checked above"),
                };
                let ps = phi.eval(s);
                let psp = phi.eval(sp);
                let mean = 0.5 * (ps + psp);
                let prefactor = (ps * psp).powf(0.25) / mean.sqrt();
                let q = (s - sp) * (s - sp) / mean;
                let corr =
                    base.block_stationary(Block::B11, q.sqrt())? / base_sill(base);
                Ok(scale * prefactor * corr)
            }
            _ => {
                let h = dist(s, sp);
                self.block_stationary(block, h)
            }
        }
    }

    /// Principal irregular term descriptor for a block.
    pub fn pit(&self, block: Block) -> Result<PitDescriptor> {
        self.check_block(block)?;
        match self {
            CovModel::Matern(p) => Ok(matern_pit(p, p.sigma2)),
            CovModel::Powexp(p) => Ok(powexp_pit(p, p.sigma2)),
            CovModel::Gencauchy(p) => Ok(gencauchy_pit(p, p.sigma2)),
            CovModel::BivariateMatern(m) => Ok(match block {
                Block::B11 => matern_pit(&m.k11, m.k11.sigma2),
                Block::B22 => matern_pit(&m.k22, m.k22.sigma2),
                Block::B12 => {
                    let cross = MaternParams {
                        sigma2: 1.0,
                        rho: m.cross_rho,
                        nu: m.nu12,
                    };
                    matern_pit(
                        &cross,
                        m.rho12 * (m.k11.sigma2 * m.k22.sigma2).sqrt(),
                    )
                }
                _ => unreachable!("checked above"),
            }),
            CovModel::Lmc(l) => {
                // Exponent of a weighted sum: the smallest exponent among
                // components that actually load on the block; coefficients
                // of exponent ties add up.
                let mut entries: Vec<(PitDescriptor, f64)> = Vec::new();
                for comp in &l.comps {
                    let w = lmc_weight(comp, block);
                    if w != 0.0 {
                        entries.push((comp.cov.pit(Block::B11)?, w));
                    }
                }
                if entries.is_empty() {
                    return Err(Error::Inconclusive(format!(
                        "block {block:?} is identically zero; no irregular term"
                    )));
                }
                let alpha = entries
                    .iter()
                    .map(|(p, _)| p.alpha)
                    .fold(f64::INFINITY, f64::min);
                let mut c = 0.0;
                let mut boundary = false;
                for (p, w) in &entries {
                    if p.alpha == alpha {
                        c += w * p.c;
                        boundary |= p.boundary;
                    }
                }
                Ok(PitDescriptor { alpha, c, boundary })
            }
            // Warping and local scale/range variation leave the small-lag
            // exponent unchanged; the reported coefficient is the base
            // model's and should be read as location-averaged.
            CovModel::Warped(w) => w.base.pit(block),
            CovModel::Paciorek(p) => {
                let base = match block {
                    Block::B11 => &p.base11,
                    Block::B12 => &p.base12,
                    Block::B22 => &p.base22,
                    _ => unreachable!("checked above"),
                };
                base.pit(Block::B11)
            }
        }
    }
}

fn dist(s: &[f64], sp: &[f64]) -> f64 {
    debug_assert_eq!(s.len(), sp.len());
    match s.len() {
        1 => (s[0] - sp[0]).abs(),
        2 => {
            let dx = s[0] - sp[0];
            let dy = s[1] - sp[1];
            (dx * dx + dy * dy).sqrt()
        }
        _ => s
            .iter()
            .zip(sp)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
    }
}

fn lmc_weight(comp: &LmcComp, block: Block) -> f64 {
    match block {
        Block::B11 => comp.a * comp.a,
        Block::B12 => comp.a * comp.b,
        Block::B22 => comp.b * comp.b,
        Block::B13 => comp.a * comp.c,
        Block::B23 => comp.b * comp.c,
        Block::B33 => comp.c * comp.c,
    }
}

fn base_sill(m: &CovModel) -> f64 {
    match m {
        CovModel::Matern(p) => p.sigma2,
        CovModel::Powexp(p) => p.sigma2,
        CovModel::Gencauchy(p) => p.sigma2,
        _ => 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    fn matern(sigma2: f64, rho: f64, nu: f64) -> MaternParams {
        MaternParams::new(sigma2, rho, nu).unwrap()
    }

    #[test]
    fn matern_values_match_closed_forms() {
        assert_eq!(matern_cov(0.0, &matern(1.0, 1.0, 0.5)), 1.0);
        // nu = 1/2: sigma2 * exp(-h/rho).
        assert!(rel_err(matern_cov(1.0, &matern(1.0, 1.0, 0.5)), (-1.0f64).exp()) < 1e-12);
        // nu = 3/2: (1 + sqrt(3) h/rho) exp(-sqrt(3) h/rho).
        let s3 = 3.0f64.sqrt();
        let expect = (1.0 + s3) * (-s3).exp();
        assert!(rel_err(matern_cov(1.0, &matern(1.0, 1.0, 1.5)), expect) < 1e-10);
        // nu = 5/2 closed form at a few lags and scales.
        for &(h, rho) in &[(0.3, 1.0), (1.7, 0.4), (5.0, 2.0)] {
            let z = 5.0f64.sqrt() * h / rho;
            let expect = (1.0 + z + z * z / 3.0) * (-z).exp();
            assert!(
                rel_err(matern_cov(h, &matern(1.0, rho, 2.5)), expect) < 1e-10,
                "h={h} rho={rho}"
            );
        }
    }

    #[test]
    fn matern_large_lag_path_is_continuous_and_positive() {
        let p = matern(2.0, 0.1, 1.2);
        // Straddle the log-space cutover and go deep into the tail while the
        // true value is still representable (z stays below ~700).
        let mut prev = matern_cov(0.0, &p);
        for &h in &[0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0] {
            let v = matern_cov(h, &p);
            assert!(v > 0.0 && v < prev, "h={h}");
            prev = v;
        }
        // Past the representable range the value saturates to zero instead
        // of producing junk.
        assert_eq!(matern_cov(200.0, &p), 0.0);
    }

    #[test]
    fn powexp_and_gencauchy_values() {
        let p = PowExpParams::new(2.0, 1.0, 1.3).unwrap();
        assert_eq!(powexp_cov(0.0, &p), 2.0);
        let p = PowExpParams::new(2.0, 1.0, 1.0).unwrap();
        assert!(rel_err(powexp_cov(1.0, &p), 2.0 * (-1.0f64).exp()) < 1e-14);
        let p = PowExpParams::new(1.0, 0.5, 2.0).unwrap();
        assert!(p.analytic());
        assert!(rel_err(powexp_cov(2.0, &p), (-2.0f64).exp()) < 1e-14);

        let g = GenCauchyParams::new(1.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(gencauchy_cov(0.0, &g), 1.0);
        assert!(rel_err(gencauchy_cov(1.0, &g), 0.5) < 1e-14);
        let g = GenCauchyParams::new(1.0, 1.0, 1.0, 2.0).unwrap();
        assert!(rel_err(gencauchy_cov(1.0, &g), 0.25) < 1e-14);
        assert!(g.integrable(1));
        assert!(!GenCauchyParams::new(1.0, 1.0, 0.5, 1.0).unwrap().integrable(1));
    }

    #[test]
    fn parameter_validation_rejects_bad_inputs() {
        assert!(MaternParams::new(-1.0, 1.0, 0.5).is_err());
        assert!(MaternParams::new(1.0, 0.0, 0.5).is_err());
        assert!(PowExpParams::new(1.0, 1.0, 2.5).is_err());
        assert!(PowExpParams::new(1.0, 1.0, 0.0).is_err());
        assert!(GenCauchyParams::new(1.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn stationary_marginals_are_monotone_on_a_lag_ladder() {
        let mp = matern(1.3, 0.4, 0.9);
        let pe = PowExpParams::new(1.0, 2.0, 1.4).unwrap();
        let gc = GenCauchyParams::new(1.0, 1.0, 1.2, 1.5).unwrap();
        let mut prev = [f64::INFINITY; 3];
        for k in 0..1000 {
            let h = 3.0 * (k as f64) / 999.0;
            let vals = [matern_cov(h, &mp), powexp_cov(h, &pe), gencauchy_cov(h, &gc)];
            for (i, v) in vals.iter().enumerate() {
                // Tiny relative slack for float noise in the Bessel path.
                assert!(
                    *v <= prev[i] * (1.0 + 1e-12),
                    "family {i} increased at h={h}"
                );
                prev[i] = *v;
            }
        }
    }

    #[test]
    fn matern_pit_limit_matches_coefficient_formula() {
        // Independent check of the small-lag expansion: the numeric limit of
        // (C(0) - C(h)) / h^(2 nu) must approach -c computed from the gamma
        // closed form, with stabilizing dyadic ratios. The analytic h^2 part
        // contributes a relative h^(2 - 2 nu) correction, so the ladder for
        // the rougher field starts earlier.
        for &(nu, k_start) in &[(0.35, 5), (0.7, 8)] {
            let p = matern(1.0, 1.0, nu);
            let pit = CovModel::Matern(p).pit(Block::B11).unwrap();
            assert_eq!(pit.alpha, 2.0 * nu);
            assert!(!pit.boundary);
            let mut prev = f64::NAN;
            for k in k_start..=20 {
                let h = 2.0f64.powi(-k);
                let ratio = (matern_cov(0.0, &p) - matern_cov(h, &p)) / h.powf(2.0 * nu);
                if k > k_start {
                    assert!(
                        (ratio / prev - 1.0).abs() < 0.02,
                        "nu={nu} k={k} ratio drift"
                    );
                }
                prev = ratio;
            }
            assert!(
                rel_err(prev, -pit.c) < 0.01,
                "nu={nu}: ladder {prev} vs formula {}",
                -pit.c
            );
        }
    }

    #[test]
    fn pit_exponents_per_family() {
        let m = CovModel::Matern(matern(1.0, 1.0, 0.7));
        assert_eq!(m.pit(Block::B11).unwrap().alpha, 1.4);
        let p = CovModel::Powexp(PowExpParams::new(1.0, 1.0, 1.3).unwrap());
        assert_eq!(p.pit(Block::B11).unwrap().alpha, 1.3);
        // Integer smoothness sits on the even-exponent boundary.
        let b = CovModel::Matern(matern(1.0, 1.0, 1.0)).pit(Block::B11).unwrap();
        assert!(b.boundary && b.alpha == 2.0 && b.c != 0.0);
        let pe2 = CovModel::Powexp(PowExpParams::new(1.0, 1.0, 2.0).unwrap());
        assert!(pe2.pit(Block::B11).unwrap().boundary);
    }

    fn lmc_two(alpha1: f64, alpha2: f64, a: [f64; 2], b: [f64; 2]) -> CovModel {
        // Matern components with nu = alpha/2 so the component exponents are
        // exactly the requested alphas.
        let comp = |alpha: f64, a: f64, b: f64| LmcComponentSpec {
            model: ModelSpec::Matern(matern(1.0, 1.0, alpha / 2.0)),
            a,
            b,
            c: None,
        };
        ModelSpec::Lmc(LmcSpec {
            components: vec![comp(alpha1, a[0], b[0]), comp(alpha2, a[1], b[1])],
        })
        .build()
        .unwrap()
    }

    #[test]
    fn lmc_exponents_follow_min_rule() {
        let m = lmc_two(1.0, 2.4, [1.0, 1.0], [0.0, 1.0]);
        assert_eq!(m.pit(Block::B11).unwrap().alpha, 1.0);
        assert_eq!(m.pit(Block::B22).unwrap().alpha, 2.4);
        assert_eq!(m.pit(Block::B12).unwrap().alpha, 2.4);
    }

    #[test]
    fn lmc_exponent_rule_exhaustive_two_component_patterns() {
        // All sign patterns of (a1,a2) x (b1,b2) with at least one nonzero
        // weight per field: the block exponent is always the min over
        // components supported by that block.
        let alphas = [0.8, 1.6];
        for mask in 0..16u32 {
            let a = [
                if mask & 1 != 0 { 1.0 } else { 0.0 },
                if mask & 2 != 0 { 0.7 } else { 0.0 },
            ];
            let b = [
                if mask & 4 != 0 { -0.5 } else { 0.0 },
                if mask & 8 != 0 { 1.2 } else { 0.0 },
            ];
            if (a[0] == 0.0 && a[1] == 0.0) || (b[0] == 0.0 && b[1] == 0.0) {
                continue;
            }
            let m = lmc_two(alphas[0], alphas[1], a, b);
            for (block, wa, wb) in [
                (Block::B11, a[0] * a[0], a[1] * a[1]),
                (Block::B12, a[0] * b[0], a[1] * b[1]),
                (Block::B22, b[0] * b[0], b[1] * b[1]),
            ] {
                let supported: Vec<f64> = [(wa, alphas[0]), (wb, alphas[1])]
                    .iter()
                    .filter(|(w, _)| *w != 0.0)
                    .map(|(_, al)| *al)
                    .collect();
                match m.pit(block) {
                    Ok(pit) => {
                        let expect = supported.iter().cloned().fold(f64::INFINITY, f64::min);
                        assert_eq!(pit.alpha, expect, "mask={mask} block={block:?}");
                    }
                    Err(_) => assert!(supported.is_empty(), "mask={mask} block={block:?}"),
                }
            }
        }
    }

    #[test]
    fn bivariate_matern_blocks_and_cross_sill() {
        let spec = ModelSpec::BivariateMatern(BivariateMaternSpec {
            k11: matern(2.0, 0.3, 0.7),
            k22: matern(0.5, 0.3, 1.0),
            nu12: 0.95,
            rho12: 0.5,
            shared_range: true,
        });
        let m = spec.build().unwrap();
        // Cross block at zero lag is rho12 * sigmaX * sigmaW.
        let expect = 0.5 * (2.0f64 * 0.5).sqrt();
        assert!(rel_err(m.block_stationary(Block::B12, 0.0).unwrap(), expect) < 1e-14);
        assert_eq!(m.block_stationary(Block::B11, 0.0).unwrap(), 2.0);
        assert_eq!(m.block_stationary(Block::B22, 0.0).unwrap(), 0.5);
        // Mismatched ranges with the shared flag must fail.
        let bad = ModelSpec::BivariateMatern(BivariateMaternSpec {
            k11: matern(1.0, 0.3, 0.7),
            k22: matern(1.0, 0.4, 1.0),
            nu12: 0.95,
            rho12: 0.5,
            shared_range: true,
        });
        assert!(bad.build().is_err());
    }

    #[test]
    fn warped_identity_equals_base_and_symmetry_holds() {
        let base = ModelSpec::BivariateMatern(BivariateMaternSpec {
            k11: matern(1.0, 0.2, 0.7),
            k22: matern(1.0, 0.2, 1.0),
            nu12: 0.95,
            rho12: 0.5,
            shared_range: true,
        });
        let warped = ModelSpec::Warped(WarpedSpec {
            base: Box::new(base.clone()),
            warp: WarpSpec::Identity,
            domain_len: 1.0,
        })
        .build()
        .unwrap();
        let flat = base.build().unwrap();
        for &(s, sp) in &[(0.1, 0.6), (0.0, 1.0), (0.33, 0.34)] {
            for block in [Block::B11, Block::B12, Block::B22] {
                let w = warped.block_cov(block, &[s], &[sp]).unwrap();
                let f = flat.block_cov(block, &[s], &[sp]).unwrap();
                assert_eq!(w, f);
                assert_eq!(w, warped.block_cov(block, &[sp], &[s]).unwrap());
            }
        }
        // A genuine warp changes values but keeps s = s' at the sill.
        let bent = ModelSpec::Warped(WarpedSpec {
            base: Box::new(base),
            warp: WarpSpec::Sigmoid {
                center: 0.5,
                width: 0.1,
            },
            domain_len: 1.0,
        })
        .build()
        .unwrap();
        assert!(rel_err(bent.block_cov(Block::B11, &[0.3], &[0.3]).unwrap(), 1.0) < 1e-12);
        assert!(
            bent.block_cov(Block::B11, &[0.1], &[0.2]).unwrap()
                != flat.block_cov(Block::B11, &[0.1], &[0.2]).unwrap()
        );
    }

    #[test]
    fn warp_maps_validate_and_evaluate() {
        assert!(WarpSpec::Affine { a: 0.0, b: 1.1 }.validate(1.0).is_err());
        assert!(WarpSpec::Affine { a: 0.1, b: 0.8 }.validate(1.0).is_ok());
        let pw = WarpSpec::PiecewiseAffine {
            knots_s: vec![0.0, 0.5, 1.0],
            knots_f: vec![0.0, 0.2, 1.0],
        };
        pw.validate(1.0).unwrap();
        assert!(rel_err(pw.eval(0.25, 1.0), 0.1) < 1e-14);
        assert!(rel_err(pw.eval(0.75, 1.0), 0.6) < 1e-14);
        let sg = WarpSpec::Sigmoid {
            center: 0.4,
            width: 0.15,
        };
        sg.validate(1.0).unwrap();
        assert!(sg.eval(0.0, 1.0).abs() < 1e-15);
        assert!(rel_err(sg.eval(1.0, 1.0), 1.0) < 1e-12);
        let mut prev = -1.0;
        for k in 0..=100 {
            let v = sg.eval(k as f64 / 100.0, 1.0);
            assert!(v > prev);
            prev = v;
        }
    }

    fn paciorek_const(phi0: f64) -> CovModel {
        let unit_matern = |nu: f64| Box::new(ModelSpec::Matern(matern(1.0, 1.0, nu)));
        ModelSpec::Paciorek(PaciorekSpec {
            base11: unit_matern(0.7),
            base12: unit_matern(0.95),
            base22: unit_matern(1.2),
            rho12: 0.5,
            sigma1: PosFunc::Constant { value: 1.0 },
            sigma2: PosFunc::Constant { value: 1.0 },
            phi11: PosFunc::Constant { value: phi0 },
            phi12: PosFunc::Constant { value: phi0 },
            phi22: PosFunc::Constant { value: phi0 },
            domain_len: 1.0,
        })
        .build()
        .unwrap()
    }

    #[test]
    fn paciorek_with_constant_functions_reduces_to_stationary() {
        let phi0 = 0.04;
        let m = paciorek_const(phi0);
        let base11 = matern(1.0, 1.0, 0.7);
        for &(s, sp) in &[(0.1, 0.7), (0.0, 1.0), (0.42, 0.43)] {
            let got = m.block_cov(Block::B11, &[s], &[sp]).unwrap();
            let expect = matern_cov((s - sp).abs() / phi0.sqrt(), &base11);
            assert!(rel_err(got, expect) < 1e-12, "s={s} sp={sp}");
        }
        // Cross block at s = s' is rho12 * sigma1 * sigma2.
        assert!(rel_err(m.block_cov(Block::B12, &[0.3], &[0.3]).unwrap(), 0.5) < 1e-14);
    }

    #[test]
    fn paciorek_varying_functions_stay_symmetric() {
        let unit_matern = |nu: f64| Box::new(ModelSpec::Matern(matern(1.0, 1.0, nu)));
        let m = ModelSpec::Paciorek(PaciorekSpec {
            base11: unit_matern(0.7),
            base12: unit_matern(0.95),
            base22: unit_matern(1.2),
            rho12: 0.4,
            sigma1: PosFunc::Affine { a: 0.5, b: 1.0 },
            sigma2: PosFunc::Piecewise {
                knots_s: vec![0.0, 0.3, 1.0],
                knots_v: vec![1.0, 2.0, 0.5],
            },
            phi11: PosFunc::Affine { a: 0.02, b: 0.05 },
            phi12: PosFunc::Constant { value: 0.04 },
            phi22: PosFunc::Constant { value: 0.06 },
            domain_len: 1.0,
        })
        .build()
        .unwrap();
        for block in [Block::B11, Block::B12, Block::B22] {
            for &(s, sp) in &[(0.05, 0.9), (0.2, 0.21), (0.0, 0.5)] {
                let a = m.block_cov(block, &[s], &[sp]).unwrap();
                let b = m.block_cov(block, &[sp], &[s]).unwrap();
                assert_eq!(a, b, "block {block:?} asymmetric at ({s},{sp})");
            }
        }
        // Local variance at a site is sigma1(s)^2.
        let s = 0.6;
        let var = m.block_cov(Block::B11, &[s], &[s]).unwrap();
        assert!(rel_err(var, (0.5f64 + 1.0 * s).powi(2)) < 1e-12);
    }

    #[test]
    fn spectral_tail_order_and_normalization() {
        let p = matern(1.0, 0.5, 0.8);
        // Tail ratio -> 2^-(2 nu + d).
        for d in [1usize, 2] {
            let w = 1e3 / p.rho;
            let ratio = matern_spectral(2.0 * w, &p, d) / matern_spectral(w, &p, d);
            let expect = 2.0f64.powf(-(2.0 * p.nu + d as f64));
            assert!(
                (ratio / expect - 1.0).abs() < 0.01,
                "d={d} ratio {ratio} vs {expect}"
            );
        }

        // Bochner normalization: the density integrates to sigma2.
        let p = matern(2.0, 0.7, 1.5);
        let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize| -> f64 {
            // n even panels
            let h = (b - a) / n as f64;
            let mut acc = f(a) + f(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(a + i as f64 * h);
            }
            acc * h / 3.0
        };
        // d = 1: integral over the whole line = 2 * integral over [0, inf).
        let total =
            2.0 * simpson(&|w| matern_spectral(w, &p, 1), 0.0, 800.0, 200_000);
        assert!((total - p.sigma2).abs() < 1e-6, "d=1 mass {total}");
        // d = 2: radial integral of 2 pi w f(w). nu = 1.5 gives an w^-4
        // integrand tail, so truncation at 1200 is below the tolerance.
        let p2 = matern(1.5, 0.4, 1.5);
        let total2 = simpson(
            &|w| 2.0 * PI * w * matern_spectral(w, &p2, 2),
            0.0,
            1200.0,
            400_000,
        );
        assert!((total2 - p2.sigma2).abs() < 1e-6, "d=2 mass {total2}");
    }

    #[test]
    fn spectral_density_matches_fourier_quadrature_for_exponential() {
        // For nu = 1/2 (exponential covariance) in d = 1 the density is
        // a / (pi (a^2 + w^2)); cross-check against direct cosine-transform
        // quadrature of the covariance.
        let p = matern(1.0, 1.0, 0.5);
        for &w in &[0.0, 0.5, 2.0] {
            let n = 400_000usize;
            let b = 40.0;
            let h = b / n as f64;
            // Simpson on [0, 40] of cos(w h) e^{-h} / pi.
            let f = |t: f64| (w * t).cos() * (-t).exp() / PI;
            let mut acc = f(0.0) + f(b);
            for i in 1..n {
                let wgt = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += wgt * f(i as f64 * h);
            }
            let quad = acc * h / 3.0;
            assert!(
                (matern_spectral(w, &p, 1) - quad).abs() < 1e-8,
                "w={w}"
            );
        }
    }

    #[test]
    fn model_json_round_trip_and_strictness() {
        let json = r#"{"family":"matern","params":{"sigma2":1.0,"rho":0.2,"nu":0.7}}"#;
        let spec = ModelSpec::from_json(json).unwrap();
        let built = spec.build().unwrap();
        assert_eq!(built.family(), "matern");
        // Round trip: serialize -> parse -> identical JSON value.
        let dumped = serde_json::to_string(&spec).unwrap();
        let re: serde_json::Value = serde_json::from_str(&dumped).unwrap();
        let orig: serde_json::Value = serde_json::from_str(json).unwrap();
        assert_eq!(re, orig);

        // Unknown family rejected.
        assert!(ModelSpec::from_json(
            r#"{"family":"spherical","params":{"sigma2":1.0}}"#
        )
        .is_err());
        // Unknown parameter key rejected.
        assert!(ModelSpec::from_json(
            r#"{"family":"matern","params":{"sigma2":1.0,"rho":0.2,"nu":0.7,"extra":1}}"#
        )
        .is_err());
        // Wrong arithmetic domain caught at build, not parse.
        let bad = ModelSpec::from_json(
            r#"{"family":"matern","params":{"sigma2":-1.0,"rho":0.2,"nu":0.7}}"#,
        )
        .unwrap();
        assert!(bad.build().is_err());

        // Nested specs parse too.
        let lmc = r#"{"family":"lmc","params":{"components":[
            {"model":{"family":"matern","params":{"sigma2":1.0,"rho":0.2,"nu":0.5}},"a":1.0,"b":0.5},
            {"model":{"family":"matern","params":{"sigma2":1.0,"rho":0.2,"nu":1.2}},"a":0.0,"b":1.0}
        ]}}"#;
        let m = ModelSpec::from_json(lmc).unwrap().build().unwrap();
        assert_eq!(m.n_fields(), 2);
        // Adding `c` weights makes it trivariate.
        let lmc3 = r#"{"family":"lmc","params":{"components":[
            {"model":{"family":"matern","params":{"sigma2":1.0,"rho":0.2,"nu":0.5}},"a":1.0,"b":0.5,"c":0.3}
        ]}}"#;
        assert_eq!(ModelSpec::from_json(lmc3).unwrap().build().unwrap().n_fields(), 3);
    }

    #[test]
    fn block_symmetry_of_stationary_families_is_exact() {
        let m = ModelSpec::BivariateMatern(BivariateMaternSpec {
            k11: matern(1.0, 0.2, 0.7),
            k22: matern(1.3, 0.2, 1.0),
            nu12: 0.95,
            rho12: -0.4,
            shared_range: true,
        })
        .build()
        .unwrap();
        for block in [Block::B11, Block::B12, Block::B22] {
            for &(s, sp) in &[(0.0, 0.3), (0.11, 0.77)] {
                assert_eq!(
                    m.block_cov(block, &[s], &[sp]).unwrap(),
                    m.block_cov(block, &[sp], &[s]).unwrap()
                );
            }
        }
    }

    #[test]
    fn blocks_out_of_range_are_rejected() {
        let uni = CovModel::Matern(matern(1.0, 1.0, 0.5));
        assert!(uni.block_stationary(Block::B12, 0.1).is_err());
        let biv = ModelSpec::BivariateMatern(BivariateMaternSpec {
            k11: matern(1.0, 0.2, 0.7),
            k22: matern(1.0, 0.2, 1.0),
            nu12: 0.95,
            rho12: 0.5,
            shared_range: true,
        })
        .build()
        .unwrap();
        assert!(biv.block_stationary(Block::B13, 0.1).is_err());
    }
}
