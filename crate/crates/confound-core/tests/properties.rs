//! Randomized and exhaustive invariant checks: covariance closed forms,
//! operator algebra, estimator identities, estimability classification,
//! and summary decompositions.
//!
//! Exactness notes. Identities that hold in exact arithmetic are asserted
//! bitwise only where IEEE-754 guarantees them: inputs are built from
//! integers and dyadic rationals (grids with power-of-two spacing), and
//! outcome rescalings use powers of two, which commute with rounding.
//! Identities whose float evaluation genuinely rounds (adding two scaled
//! outcomes, shifting by a non-representable constant) are asserted to
//! 1e-12 relative instead.

use std::sync::Arc;

use confound_core::covmodels::{matern_cov, MaternParams, ModelSpec};
use confound_core::estimability::{
    estimate_alpha, matern_region, region_map, tail_test, NuXwRule, RegionStatus, TailVerdict,
};
use confound_core::estimators::{
    avg_then_diff, diff, gls, gls_exp_precision, laplacian, ols, ols_diff, ols_lap,
    order_from_alpha, spacing_weighted_first, spacing_weighted_second, PrecisionOp,
    TridiagPrecision,
};
use confound_core::fields::{
    build_sampler, make_design, Design, DesignSpec, FieldSample, SampleOptions,
};
use confound_core::harness::{preset, preset_names, summarize, ExperimentConfig};
use confound_core::linalg::factor_spd;
use confound_core::Result;
use proptest::prelude::*;

// ---------------------------------------------------------------------------
// Construction helpers
// ---------------------------------------------------------------------------

fn grid1d(n_cells: usize) -> Arc<Design> {
    Arc::new(make_design(&DesignSpec::Grid1d { n_cells, len: 1.0 }).unwrap())
}

fn grid2d(n_cells: usize) -> Arc<Design> {
    Arc::new(make_design(&DesignSpec::Grid2d { n_cells, len: 1.0 }).unwrap())
}

fn irregular(n_sites: usize, seed: u64) -> Arc<Design> {
    Arc::new(
        make_design(&DesignSpec::Irregular1d {
            n_sites,
            len: 1.0,
            oversample: 5,
            seed,
        })
        .unwrap(),
    )
}

fn nested(n: usize) -> Arc<Design> {
    Arc::new(
        make_design(&DesignSpec::Nested1d {
            n,
            rho: 0.5,
            len: 1.0,
        })
        .unwrap(),
    )
}

/// Wrap explicit channel values in a sample on the given design.
fn sample_on(design: &Arc<Design>, x: Vec<f64>, y: Vec<f64>) -> FieldSample {
    let n = design.n_sites();
    assert_eq!(x.len(), n);
    assert_eq!(y.len(), n);
    FieldSample {
        design: design.clone(),
        w: vec![0.0; n],
        x,
        y,
        x2: None,
        x_noisy: None,
        y_noisy: None,
        seed: 0,
    }
}

/// Strategy: a vector of small-integer-valued f64s (exact in arithmetic
/// whose intermediate magnitudes stay far below 2^53).
fn int_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-1000i32..=1000).prop_map(f64::from), len)
}

/// Strategy: finite floats of moderate magnitude (no subnormals, so that
/// power-of-two rescaling is exact).
fn moderate_values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![(-1.0e3..1.0e3f64), (-1.0..1.0f64)].prop_filter("nonzero", |v| v.abs() > 1e-6),
        len,
    )
}

/// The slope estimators sharing the `(x, y) -> beta` shape, each on a
/// design appropriate to it.
enum Est {
    Ols,
    Diff(usize),
    Lap(usize),
    SpacingSecond,
    Gls,
}

impl Est {
    fn all() -> [Est; 5] {
        [
            Est::Ols,
            Est::Diff(2),
            Est::Lap(1),
            Est::SpacingSecond,
            Est::Gls,
        ]
    }

    fn design(&self) -> Arc<Design> {
        match self {
            Est::Lap(_) => grid2d(7), // 64 sites
            Est::SpacingSecond => irregular(64, 9),
            _ => grid1d(63), // 64 sites
        }
    }

    fn run(&self, design: &Arc<Design>, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Est::Ols => ols(x, y),
            Est::Diff(p) => {
                Ok(ols_diff(&sample_on(design, x.to_vec(), y.to_vec()), *p)?.beta_hat)
            }
            Est::Lap(m) => Ok(ols_lap(&sample_on(design, x.to_vec(), y.to_vec()), *m)?.beta_hat),
            Est::SpacingSecond => {
                Ok(spacing_weighted_second(&sample_on(design, x.to_vec(), y.to_vec()))?.beta_hat)
            }
            Est::Gls => {
                let prec = TridiagPrecision {
                    n: x.len(),
                    rho: 0.5,
                };
                Ok(gls(x, y, &prec)?.beta_hat)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Covariance closed forms
// ---------------------------------------------------------------------------

proptest! {
    /// At half-integer smoothness the kernel has an elementary closed form;
    /// the Bessel evaluation must reproduce it to 1e-10 relative.
    #[test]
    fn matern_half_integer_matches_closed_forms(
        h in 1e-4..5.0f64,
        sigma2 in 0.1..4.0f64,
        range in 0.05..2.0f64,
    ) {
        let cases: [(f64, fn(f64) -> f64); 3] = [
            (0.5, |z| (-z).exp()),
            (1.5, |z| (1.0 + z) * (-z).exp()),
            (2.5, |z| (1.0 + z + z * z / 3.0) * (-z).exp()),
        ];
        for (nu, closed) in cases {
            let p = MaternParams { sigma2, rho: range, nu };
            let z = (2.0 * nu).sqrt() * h / range;
            let want = sigma2 * closed(z);
            let got = matern_cov(h, &p);
            let tol = 1e-10 * want.abs().max(1e-300);
            prop_assert!(
                (got - want).abs() <= tol,
                "nu={nu} h={h}: got {got}, closed form {want}"
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Operator algebra
// ---------------------------------------------------------------------------

proptest! {
    /// p-fold differencing annihilates polynomials of degree < p exactly.
    /// Integer coefficients on a power-of-two grid keep every intermediate
    /// value dyadic, so the zeros are bitwise.
    #[test]
    fn differencing_kills_low_degree_polynomials(
        coeffs in prop::collection::vec((-8i32..=8).prop_map(f64::from), 3),
        p in 1usize..=3,
    ) {
        let design = grid1d(64); // h = 1/64
        let h = design.grid_h().unwrap();
        let values: Vec<f64> = (0..design.n_sites())
            .map(|i| {
                let s = design.site(i)[0];
                // Degree p-1 polynomial, Horner form over exact dyadics.
                coeffs[..p].iter().rev().fold(0.0, |acc, c| acc * s + c)
            })
            .collect();
        let out = diff(&values, p, h).unwrap();
        prop_assert!(out.iter().all(|&v| v == 0.0), "diff({p}) left {out:?}");
    }

    /// The five-point Laplacian (any fold) annihilates affine surfaces
    /// exactly on a power-of-two lattice with dyadic coefficients.
    #[test]
    fn laplacian_kills_affine_surfaces(
        a in (-32i32..=32).prop_map(|v| f64::from(v) * 0.25),
        b in (-32i32..=32).prop_map(|v| f64::from(v) * 0.25),
        c in (-32i32..=32).prop_map(|v| f64::from(v) * 0.25),
        m in 1usize..=2,
    ) {
        let design = grid2d(8); // h = 1/8, 81 sites
        let values: Vec<f64> = (0..design.n_sites())
            .map(|i| {
                let s = design.site(i);
                a + b * s[0] + c * s[1]
            })
            .collect();
        let out = laplacian(&values, m, &design).unwrap();
        prop_assert!(out.iter().all(|&v| v == 0.0), "laplacian({m}) left {out:?}");
    }

    /// On a 1D grid the order-m Laplacian is the 2m-fold difference,
    /// elementwise and bitwise.
    #[test]
    fn laplacian_1d_is_double_differencing(
        values in moderate_values(40),
        m in 1usize..=3,
    ) {
        let design = grid1d(39);
        let h = design.grid_h().unwrap();
        let lap = laplacian(&values, m, &design).unwrap();
        let dd = diff(&values, 2 * m, h).unwrap();
        prop_assert_eq!(lap, dd);
    }
}

/// The spacing-weighted second difference maps affine functions to exact
/// zero. Bitwise zero is checked on the two constructions where float
/// evaluation is itself exact: arbitrary spacings with a power-of-two
/// slope through the origin, and arbitrary constants.
#[test]
fn spacing_weighted_kills_affine_exactly() {
    for seed in [1u64, 2, 3, 4, 5] {
        let design = irregular(80, seed);
        let rough: Vec<f64> = (0..80).map(|i| ((i * 37 + 11) % 19) as f64 - 9.0).collect();
        for slope in [2.0, -0.5, 8.0, -0.25] {
            let y: Vec<f64> = (0..80).map(|i| slope * design.site(i)[0]).collect();
            let rep = spacing_weighted_second(&sample_on(&design, rough.clone(), y)).unwrap();
            assert_eq!(rep.numerator, 0.0, "slope {slope} seed {seed}");
            assert_eq!(rep.beta_hat, 0.0);
        }
        for constant in [3.7, -123.456, 1e6] {
            let y = vec![constant; 80];
            let rep = spacing_weighted_second(&sample_on(&design, rough.clone(), y)).unwrap();
            assert_eq!(rep.numerator, 0.0, "constant {constant} seed {seed}");
        }
    }
}

// ---------------------------------------------------------------------------
// Estimator identities
// ---------------------------------------------------------------------------

proptest! {
    /// Rescaling the outcome by a power of two rescales every estimate
    /// bitwise: the scaling commutes with each rounding step.
    #[test]
    fn outcome_scaling_is_exact(
        x in moderate_values(64),
        y in moderate_values(64),
        k in -2i32..=3,
    ) {
        let factor = 2.0f64.powi(k);
        for est in Est::all() {
            let design = est.design();
            let scaled: Vec<f64> = y.iter().map(|v| factor * v).collect();
            let base = est.run(&design, &x, &y);
            let rescaled = est.run(&design, &x, &scaled);
            if let (Ok(b), Ok(r)) = (base, rescaled) {
                prop_assert_eq!(factor * b, r);
            }
        }
    }

    /// Full linearity in the outcome, checked to 1e-12 relative: the
    /// recombination a*E1 + b*E2 rounds, so bitwise equality is not a
    /// float-level guarantee for arbitrary a and b.
    #[test]
    fn outcome_linearity_holds(
        x in int_values(64),
        y1 in int_values(64),
        y2 in int_values(64),
        a in (-8i32..=8).prop_map(f64::from),
        b in (-8i32..=8).prop_map(f64::from),
    ) {
        for est in Est::all() {
            let design = est.design();
            let combo: Vec<f64> = y1.iter().zip(&y2).map(|(u, v)| a * u + b * v).collect();
            let (e1, e2, ec) = (
                est.run(&design, &x, &y1),
                est.run(&design, &x, &y2),
                est.run(&design, &x, &combo),
            );
            if let (Ok(e1), Ok(e2), Ok(ec)) = (e1, e2, ec) {
                let want = a * e1 + b * e2;
                let tol = 1e-12 * want.abs().max(1.0);
                prop_assert!(
                    (ec - want).abs() <= tol,
                    "combo {ec} vs {want} (a={a}, b={b})"
                );
            }
        }
    }

    /// Regressing any channel on itself returns exactly 1: numerator and
    /// denominator are the same accumulation.
    #[test]
    fn self_regression_is_exactly_one(x in moderate_values(64)) {
        for est in Est::all() {
            let design = est.design();
            if let Ok(beta) = est.run(&design, &x, &x) {
                prop_assert_eq!(beta, 1.0);
            }
        }
    }

    /// Adding a constant to the outcome leaves every differencing-type
    /// estimate unchanged to 1e-12 relative.
    #[test]
    fn intercept_invariance(
        x in moderate_values(64),
        y in moderate_values(64),
        shift in prop_oneof![(-100.0..100.0f64), (-1.0..1.0f64)],
    ) {
        let shifted: Vec<f64> = y.iter().map(|v| v + shift).collect();
        let check = |a: Result<f64>, b: Result<f64>, label: &str| -> std::result::Result<(), TestCaseError> {
            if let (Ok(a), Ok(b)) = (a, b) {
                let tol = 1e-12 * a.abs().max(1.0);
                prop_assert!((a - b).abs() <= tol, "{label}: {a} vs {b}");
            }
            Ok(())
        };

        let g = grid1d(63);
        for p in [1usize, 2] {
            check(
                ols_diff(&sample_on(&g, x.clone(), y.clone()), p).map(|r| r.beta_hat),
                ols_diff(&sample_on(&g, x.clone(), shifted.clone()), p).map(|r| r.beta_hat),
                "ols_diff",
            )?;
        }
        let g2 = grid2d(7);
        check(
            ols_lap(&sample_on(&g2, x.clone(), y.clone()), 1).map(|r| r.beta_hat),
            ols_lap(&sample_on(&g2, x.clone(), shifted.clone()), 1).map(|r| r.beta_hat),
            "ols_lap",
        )?;
        let ir = irregular(64, 13);
        check(
            spacing_weighted_second(&sample_on(&ir, x.clone(), y.clone())).map(|r| r.beta_hat),
            spacing_weighted_second(&sample_on(&ir, x.clone(), shifted.clone())).map(|r| r.beta_hat),
            "spacing_weighted_second",
        )?;
        check(
            spacing_weighted_first(&sample_on(&ir, x.clone(), y.clone())).map(|r| r.beta_hat),
            spacing_weighted_first(&sample_on(&ir, x.clone(), shifted.clone())).map(|r| r.beta_hat),
            "spacing_weighted_first",
        )?;
        // The nested design has its own site count; reuse values cyclically.
        let nd = nested(12);
        let nn = nd.n_sites();
        let cyc = |v: &[f64]| (0..nn).map(|i| v[i % v.len()]).collect::<Vec<_>>();
        let ys = cyc(&y);
        let ys_shift: Vec<f64> = ys.iter().map(|v| v + shift).collect();
        check(
            avg_then_diff(&sample_on(&nd, cyc(&x), ys), 1).map(|r| r.beta_hat),
            avg_then_diff(&sample_on(&nd, cyc(&x), ys_shift), 1).map(|r| r.beta_hat),
            "avg_then_diff",
        )?;
    }
}

/// The closed-form tridiagonal precision of the exponential working
/// covariance matches a dense factorization solve to 1e-10.
#[test]
fn tridiag_precision_matches_dense_solve() {
    for n in [5usize, 20, 50] {
        let design = grid1d(n - 1);
        let h = design.grid_h().unwrap();
        for lambda in [0.5, 1.0, 5.0] {
            let prec = gls_exp_precision(&design, lambda).unwrap();
            let rho = (-lambda * h).exp();
            let mut sigma = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    sigma[i * n + j] = rho.powi((i as i32 - j as i32).abs());
                }
            }
            let chol = factor_spd(sigma, n).unwrap();
            let v: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let fast = prec.apply(&v).unwrap();
            let mut dense = v.clone();
            chol.solve_in_place(&mut dense);
            for i in 0..n {
                assert!(
                    (fast[i] - dense[i]).abs() <= 1e-10 * dense[i].abs().max(1.0),
                    "n={n} lambda={lambda} i={i}: {} vs {}",
                    fast[i],
                    dense[i]
                );
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Estimability classification
// ---------------------------------------------------------------------------

/// The closed-form region rule and the spectral tail test agree cell by
/// cell on a 100x100 smoothness grid in both dimensions (off the exact
/// boundary, with the cross smoothness kept admissible).
#[test]
fn region_and_tail_test_agree_on_dense_grid() {
    for d in [1usize, 2] {
        let mut checked = 0usize;
        for i in 1..=100 {
            for j in 1..=100 {
                let nu_x = i as f64 * 0.05;
                let nu_w = j as f64 * 0.05;
                if (nu_x - nu_w - d as f64 / 2.0).abs() < 1e-9 {
                    continue;
                }
                let verdict = matern_region(nu_x, nu_w, nu_x + 0.5, d);
                let tail = tail_test(2.0 * nu_x + d as f64, 2.0 * nu_w + d as f64, d);
                assert!(!matches!(verdict.status, RegionStatus::Boundary
                        | RegionStatus::CrossSmoothnessViolated));
                let region_says_no = verdict.status == RegionStatus::NotEstimable;
                let tail_says_no = tail.verdict == TailVerdict::IntegralFinite;
                assert_eq!(
                    region_says_no, tail_says_no,
                    "d={d} nu_x={nu_x} nu_w={nu_w}: {:?} vs {:?}",
                    verdict.status, tail.verdict
                );
                checked += 1;
            }
        }
        assert!(checked > 9_000, "d={d}: only {checked} cells checked");
    }
}

/// Fixing the exposure and cross smoothness, a smoother disturbance never
/// destroys estimability.
#[test]
fn smoother_disturbance_never_hurts() {
    for i in 1..=60 {
        let nu_x = i as f64 * 0.05;
        let nu_xw = nu_x + 0.3;
        let mut was_estimable = false;
        for j in 1..=120 {
            let nu_w = j as f64 * 0.025;
            let status = matern_region(nu_x, nu_w, nu_xw, 1).status;
            if was_estimable {
                assert!(
                    !matches!(status, RegionStatus::NotEstimable),
                    "nu_x={nu_x}: estimable flipped off at nu_w={nu_w}"
                );
            }
            if matches!(status, RegionStatus::Estimable(_)) {
                was_estimable = true;
            }
        }
    }
}

proptest! {
    /// The returned order is minimal: 2p > alpha in 1D (4m > alpha in 2D)
    /// and the next-lower order fails.
    #[test]
    fn recommended_order_is_minimal(alpha in 0.01..6.0f64) {
        let p = order_from_alpha(alpha, 1);
        prop_assert!(p >= 1 && 2 * p > alpha.ceil() as usize - 1);
        prop_assert!(2.0 * p as f64 > alpha);
        prop_assert!(p == 1 || 2.0 * (p - 1) as f64 <= alpha);
        let m = order_from_alpha(alpha, 2);
        prop_assert!(4.0 * m as f64 > alpha);
        prop_assert!(m == 1 || 4.0 * (m - 1) as f64 <= alpha);
    }
}

/// The roughness probe is invariant to rescaling the field: a constant
/// factor only shifts the log-log intercept.
#[test]
fn alpha_estimate_is_scale_invariant() {
    let design = grid1d(1023);
    let model = ModelSpec::Matern(MaternParams {
        sigma2: 1.0,
        rho: 0.2,
        nu: 0.75,
    })
    .build()
    .unwrap();
    let sampler = build_sampler(&model, design.clone(), &[0.0], SampleOptions::default()).unwrap();
    let sample = sampler.draw(41);
    let h = design.grid_h().unwrap();
    let base = estimate_alpha(&sample.x, h, 4).unwrap();
    for c in [0.25, 4.0, 1024.0] {
        let scaled: Vec<f64> = sample.x.iter().map(|v| c * v).collect();
        let est = estimate_alpha(&scaled, h, 4).unwrap();
        assert_eq!(est.order, base.order);
        assert!(
            (est.alpha_hat - base.alpha_hat).abs() <= 1e-9,
            "c={c}: {} vs {}",
            est.alpha_hat,
            base.alpha_hat
        );
    }
}

/// The raster helper agrees with the pointwise rule on every cell.
#[test]
fn region_map_matches_pointwise_rule() {
    let nu_x: Vec<f64> = (1..=12).map(|i| i as f64 * 0.25).collect();
    let nu_w: Vec<f64> = (1..=12).map(|i| i as f64 * 0.25).collect();
    let rule = NuXwRule::parse("x+0.25").unwrap();
    let cells = region_map(1, &nu_x, &nu_w, rule);
    assert_eq!(cells.len(), 144);
    for cell in &cells {
        let direct = matern_region(cell.nu_x, cell.nu_w, cell.nu_x + 0.25, 1);
        assert_eq!(cell.status, direct.status_str());
        assert_eq!(cell.min_order, direct.min_order().unwrap_or(0));
    }
}

// ---------------------------------------------------------------------------
// Harness summaries and reproducibility
// ---------------------------------------------------------------------------

proptest! {
    /// The reported (rmse, bias, sd) always satisfies the exact
    /// decomposition rmse^2 = bias^2 + sd^2.
    #[test]
    fn summary_decomposition_is_exact(
        estimates in prop::collection::vec(-50.0..50.0f64, 2..200),
        beta in -10.0..10.0f64,
    ) {
        let (rmse, bias, sd) = summarize(&estimates, beta).unwrap();
        let lhs = rmse * rmse;
        let rhs = bias * bias + sd * sd;
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
        prop_assert!(rmse >= bias.abs() && rmse >= sd);
    }
}

/// Serializing a parsed configuration is a fixpoint: parse(to_json(c))
/// serializes to the identical string, for every shipped preset.
#[test]
fn config_json_round_trip_is_fixpoint() {
    for name in preset_names() {
        let cfg = preset(&name).unwrap();
        let once = cfg.to_json().unwrap();
        let reparsed = ExperimentConfig::from_json(&once).unwrap();
        let twice = reparsed.to_json().unwrap();
        assert_eq!(once, twice, "preset {name}");
    }
}
