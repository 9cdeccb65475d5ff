//! Observation designs, joint covariance assembly, and exact Gaussian field
//! simulation.
//!
//! Designs cover the four layouts the estimators need: regular 1D and 2D
//! grids, an irregular 1D design subsampled from a fine lattice, and a
//! two-scale nested design (a coarse grid with a tight symmetric cluster of
//! fine-spaced points around every coarse site).
//!
//! Sampling is exact dense Cholesky: the joint covariance over all stacked
//! fields is assembled (with a lag-class fast path for the regular designs),
//! factored once, and then whole batches of replicates are produced with a
//! single matrix product. Optional post-processing multiplies fields by a
//! smooth positive random scale (heavy-tailed marginals) and adds iid
//! observation noise on dedicated RNG streams.

use std::path::Path;
use std::sync::Arc;

use rand::distributions::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::covmodels::{Block, CovModel, PowExpParams};
use crate::error::{io_err, Error, Result};
use crate::linalg::{factor_spd, CholFactor};

// ---------------------------------------------------------------------------
// Designs
// ---------------------------------------------------------------------------

fn default_oversample() -> usize {
    5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignSpec {
    /// n_cells + 1 equispaced points spanning [0, len].
    Grid1d { n_cells: usize, len: f64 },
    /// (n_cells + 1)^2 lattice points spanning [0, len]^2, row-major.
    Grid2d { n_cells: usize, len: f64 },
    /// n_sites drawn without replacement from a fine grid of
    /// oversample * n_sites equispaced points, then sorted.
    Irregular1d {
        n_sites: usize,
        len: f64,
        #[serde(default = "default_oversample")]
        oversample: usize,
        seed: u64,
    },
    /// Coarse grid of n + 1 sites at spacing len/n; around each coarse site
    /// a symmetric cluster of 2 ceil(n^rho) + 1 points at fine spacing
    /// len * n^-(rho + 2). Boundary clusters spill slightly outside [0, len].
    Nested1d { n: usize, rho: f64, len: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DesignKind {
    Grid1d,
    Grid2d,
    Irregular1d,
    Nested1d,
}

#[derive(Clone, Debug)]
pub enum DesignMeta {
    Grid1d {
        h: f64,
    },
    Grid2d {
        h: f64,
        side_points: usize,
    },
    Irregular1d {
        /// spacings[i] = s_{i+1} - s_i (length n_sites - 1).
        spacings: Vec<f64>,
        fine_h: f64,
        /// Index of each site on the generating fine grid (empty when the
        /// design was inferred from raw coordinates).
        fine_idx: Vec<usize>,
        /// Realized bounds m, M with m/n <= h_i <= M/n for all i.
        min_nh: f64,
        max_nh: f64,
    },
    Nested1d {
        n: usize,
        /// Cluster half-width in points.
        c: usize,
        coarse_h: f64,
        fine_h: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Design {
    pub kind: DesignKind,
    pub dim: usize,
    /// Flat coordinates, site-major: site i occupies sites[i*dim .. (i+1)*dim].
    pub sites: Vec<f64>,
    pub meta: DesignMeta,
}

impl Design {
    pub fn n_sites(&self) -> usize {
        self.sites.len() / self.dim
    }

    pub fn site(&self, i: usize) -> &[f64] {
        &self.sites[i * self.dim..(i + 1) * self.dim]
    }

    /// Grid spacing for the regular designs.
    pub fn grid_h(&self) -> Option<f64> {
        match &self.meta {
            DesignMeta::Grid1d { h } => Some(*h),
            DesignMeta::Grid2d { h, .. } => Some(*h),
            _ => None,
        }
    }
}

pub fn make_design(spec: &DesignSpec) -> Result<Design> {
    match spec {
        DesignSpec::Grid1d { n_cells, len } => {
            if *n_cells < 4 || !(*len > 0.0) {
                return Err(Error::Config(
                    "grid1d needs n_cells >= 4 and len > 0".into(),
                ));
            }
            let h = len / *n_cells as f64;
            let sites: Vec<f64> = (0..=*n_cells).map(|i| i as f64 * h).collect();
            Ok(Design {
                kind: DesignKind::Grid1d,
                dim: 1,
                sites,
                meta: DesignMeta::Grid1d { h },
            })
        }
        DesignSpec::Grid2d { n_cells, len } => {
            if *n_cells < 2 || !(*len > 0.0) {
                return Err(Error::Config(
                    "grid2d needs n_cells >= 2 and len > 0".into(),
                ));
            }
            let h = len / *n_cells as f64;
            let p = n_cells + 1;
            let mut sites = Vec::with_capacity(p * p * 2);
            for iy in 0..p {
                for ix in 0..p {
                    sites.push(ix as f64 * h);
                    sites.push(iy as f64 * h);
                }
            }
            Ok(Design {
                kind: DesignKind::Grid2d,
                dim: 2,
                sites,
                meta: DesignMeta::Grid2d { h, side_points: p },
            })
        }
        DesignSpec::Irregular1d {
            n_sites,
            len,
            oversample,
            seed,
        } => {
            if *n_sites < 4 || *oversample < 2 || !(*len > 0.0) {
                return Err(Error::Config(
                    "irregular1d needs n_sites >= 4, oversample >= 2, len > 0".into(),
                ));
            }
            let fine_n = n_sites * oversample;
            let fine_h = len / (fine_n - 1) as f64;
            let mut rng = ChaCha12Rng::seed_from_u64(*seed);
            let mut idx = rand::seq::index::sample(&mut rng, fine_n, *n_sites).into_vec();
            idx.sort_unstable();
            let sites: Vec<f64> = idx.iter().map(|&i| i as f64 * fine_h).collect();
            let spacings: Vec<f64> = sites.windows(2).map(|w| w[1] - w[0]).collect();
            let nf = *n_sites as f64;
            let min_nh = spacings.iter().cloned().fold(f64::INFINITY, f64::min) * nf;
            let max_nh = spacings.iter().cloned().fold(0.0, f64::max) * nf;
            Ok(Design {
                kind: DesignKind::Irregular1d,
                dim: 1,
                sites,
                meta: DesignMeta::Irregular1d {
                    spacings,
                    fine_h,
                    fine_idx: idx,
                    min_nh,
                    max_nh,
                },
            })
        }
        DesignSpec::Nested1d { n, rho, len } => {
            if *n < 4 || !(*rho > 0.0 && *rho < 1.0) || !(*len > 0.0) {
                return Err(Error::Config(
                    "nested1d needs n >= 4, rho in (0,1), len > 0".into(),
                ));
            }
            let c = (*n as f64).powf(*rho).ceil() as usize;
            let coarse_h = len / *n as f64;
            let fine_h = len * (*n as f64).powf(-(rho + 2.0));
            let mut sites = Vec::with_capacity((n + 1) * (2 * c + 1));
            for i in 0..=*n {
                let center = i as f64 * coarse_h;
                for k in -(c as i64)..=(c as i64) {
                    sites.push(center + k as f64 * fine_h);
                }
            }
            Ok(Design {
                kind: DesignKind::Nested1d,
                dim: 1,
                sites,
                meta: DesignMeta::Nested1d {
                    n: *n,
                    c,
                    coarse_h,
                    fine_h,
                },
            })
        }
    }
}

/// Rebuild a design from raw 1D/2D coordinates (used when reading a sample
/// CSV without its metadata sidecar). 1D coordinates must be strictly
/// increasing; equal spacings (to 1e-8 relative) give a regular grid,
/// anything else an irregular design. 2D coordinates must form a full
/// row-major lattice.
pub fn infer_design(coords: &[f64], dim: usize) -> Result<Design> {
    if dim == 1 {
        let sites = coords.to_vec();
        if sites.len() < 4 {
            return Err(Error::InsufficientData("need at least 4 sites".into()));
        }
        let spacings: Vec<f64> = sites.windows(2).map(|w| w[1] - w[0]).collect();
        if spacings.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Config(
                "1D sites must be strictly increasing".into(),
            ));
        }
        let hmin = spacings.iter().cloned().fold(f64::INFINITY, f64::min);
        let hmax = spacings.iter().cloned().fold(0.0, f64::max);
        if (hmax - hmin) / hmax < 1e-8 {
            let h = (sites[sites.len() - 1] - sites[0]) / (sites.len() - 1) as f64;
            Ok(Design {
                kind: DesignKind::Grid1d,
                dim: 1,
                sites,
                meta: DesignMeta::Grid1d { h },
            })
        } else {
            let nf = sites.len() as f64;
            let min_nh = hmin * nf;
            let max_nh = hmax * nf;
            Ok(Design {
                kind: DesignKind::Irregular1d,
                dim: 1,
                sites,
                meta: DesignMeta::Irregular1d {
                    spacings,
                    fine_h: hmin,
                    fine_idx: Vec::new(),
                    min_nh,
                    max_nh,
                },
            })
        }
    } else if dim == 2 {
        let n = coords.len() / 2;
        let p = (n as f64).sqrt().round() as usize;
        if p * p != n || p < 3 {
            return Err(Error::Config(
                "2D data must form a square lattice".into(),
            ));
        }
        let h = coords[2]; // second site's x coordinate on a row-major lattice
        let tol = 1e-9 * h.abs().max(1.0) * p as f64;
        for iy in 0..p {
            for ix in 0..p {
                let i = iy * p + ix;
                if (coords[2 * i] - ix as f64 * h).abs() > tol
                    || (coords[2 * i + 1] - iy as f64 * h).abs() > tol
                {
                    return Err(Error::Config(
                        "2D data must be a row-major regular lattice".into(),
                    ));
                }
            }
        }
        Ok(Design {
            kind: DesignKind::Grid2d,
            dim: 2,
            sites: coords.to_vec(),
            meta: DesignMeta::Grid2d { h, side_points: p },
        })
    } else {
        Err(Error::Config("only 1D and 2D designs supported".into()))
    }
}

// ---------------------------------------------------------------------------
// Joint covariance assembly
// ---------------------------------------------------------------------------

/// Assemble the dense joint covariance over all model fields stacked
/// site-block-wise: rows/cols ordered (field0 at all sites, field1 at all
/// sites, ...). No jitter is applied here.
pub fn assemble_matrix(model: &CovModel, design: &Design) -> Result<Vec<f64>> {
    let n = design.n_sites();
    let nf = model.n_fields();
    if !model.is_stationary() && design.dim != 1 {
        return Err(Error::Config(
            "nonstationary models are defined on 1D designs only".into(),
        ));
    }
    let tot = nf * n;
    let mut m = vec![0.0f64; tot * tot];

    // One closure per block; regular designs go through a lag-class table so
    // each distinct lag is evaluated exactly once.
    for k in 0..nf {
        for l in k..nf {
            let block = Block::from_pair(k, l);
            let vals: BlockValues = block_values(model, design, block)?;
            for i in 0..n {
                let jstart = if k == l { i } else { 0 };
                for j in jstart..n {
                    let v = vals.get(design, i, j);
                    m[(k * n + i) * tot + (l * n + j)] = v;
                    m[(l * n + j) * tot + (k * n + i)] = v;
                    if k != l {
                        continue;
                    }
                    m[(k * n + j) * tot + (l * n + i)] = v;
                    m[(l * n + i) * tot + (k * n + j)] = v;
                }
            }
        }
    }
    Ok(m)
}

enum BlockValues {
    /// Indexed by |i - j| (1D grids).
    Lag1d(Vec<f64>),
    /// Indexed by (|dix|, |diy|) on a P x P lattice.
    Lag2d { tab: Vec<f64>, p: usize },
    /// Indexed by fine-grid index difference.
    LagFine(Vec<f64>, Vec<usize>),
    /// Indexed by (coarse diff, fine diff + 2c) for the nested design.
    LagNested {
        tab: Vec<f64>,
        c: usize,
        cluster: usize,
    },
    /// Direct evaluation (nonstationary or inferred irregular designs).
    Dense(Vec<f64>),
}

impl BlockValues {
    #[inline]
    fn get(&self, design: &Design, i: usize, j: usize) -> f64 {
        match self {
            BlockValues::Lag1d(tab) => tab[i.abs_diff(j)],
            BlockValues::Lag2d { tab, p } => {
                let (ix, iy) = (i % p, i / p);
                let (jx, jy) = (j % p, j / p);
                tab[iy.abs_diff(jy) * p + ix.abs_diff(jx)]
            }
            BlockValues::LagFine(tab, idx) => tab[idx[i].abs_diff(idx[j])],
            BlockValues::LagNested { tab, c, cluster } => {
                let (ci, ki) = (i / cluster, (i % cluster) as i64);
                let (cj, kj) = (j / cluster, (j % cluster) as i64);
                // Order so the coarse difference is nonnegative.
                let (di, dk) = if ci >= cj {
                    (ci - cj, ki - kj)
                } else {
                    (cj - ci, kj - ki)
                };
                tab[di * (4 * c + 1) + (dk + 2 * *c as i64) as usize]
            }
            BlockValues::Dense(vals) => {
                let n = design.n_sites();
                vals[i * n + j]
            }
        }
    }
}

fn block_values(model: &CovModel, design: &Design, block: Block) -> Result<BlockValues> {
    let n = design.n_sites();
    if model.is_stationary() {
        match &design.meta {
            DesignMeta::Grid1d { h } => {
                let tab = (0..n)
                    .map(|l| model.block_stationary(block, l as f64 * h))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(BlockValues::Lag1d(tab))
            }
            DesignMeta::Grid2d { h, side_points } => {
                let p = *side_points;
                let mut tab = vec![0.0; p * p];
                for dy in 0..p {
                    for dx in 0..p {
                        let lag = h * ((dx * dx + dy * dy) as f64).sqrt();
                        tab[dy * p + dx] = model.block_stationary(block, lag)?;
                    }
                }
                Ok(BlockValues::Lag2d { tab, p })
            }
            DesignMeta::Irregular1d {
                fine_h, fine_idx, ..
            } if fine_idx.len() == n => {
                let max_d = fine_idx[n - 1] - fine_idx[0];
                let tab = (0..=max_d)
                    .map(|l| model.block_stationary(block, l as f64 * fine_h))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(BlockValues::LagFine(tab, fine_idx.clone()))
            }
            DesignMeta::Nested1d {
                n: nc,
                c,
                coarse_h,
                fine_h,
            } => {
                let cluster = 2 * c + 1;
                let mut tab = vec![0.0; (nc + 1) * (4 * c + 1)];
                for di in 0..=*nc {
                    for dk in -(2 * *c as i64)..=(2 * *c as i64) {
                        let lag = (di as f64 * coarse_h + dk as f64 * fine_h).abs();
                        tab[di * (4 * c + 1) + (dk + 2 * *c as i64) as usize] =
                            model.block_stationary(block, lag)?;
                    }
                }
                Ok(BlockValues::LagNested {
                    tab,
                    c: *c,
                    cluster,
                })
            }
            _ => {
                // Irregular design without fine-grid bookkeeping: dense.
                let mut vals = vec![0.0; n * n];
                for i in 0..n {
                    for j in i..n {
                        let v = model.block_cov(block, design.site(i), design.site(j))?;
                        vals[i * n + j] = v;
                        vals[j * n + i] = v;
                    }
                }
                Ok(BlockValues::Dense(vals))
            }
        }
    } else {
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if j < i {
                    continue;
                }
                let v = model.block_cov(block, design.site(i), design.site(j))?;
                vals[i * n + j] = v;
                vals[j * n + i] = v;
            }
        }
        Ok(BlockValues::Dense(vals))
    }
}

/// A factored joint covariance ready to produce samples.
pub struct JointCovariance {
    pub design: Arc<Design>,
    pub n_fields: usize,
    pub factor: CholFactor,
    /// Absolute diagonal inflation that was needed (0 for a cleanly positive
    /// definite model).
    pub jitter_used: f64,
}

/// Relative jitter ladder tried before declaring the model invalid.
const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

pub fn assemble_joint(model: &CovModel, design: Arc<Design>) -> Result<JointCovariance> {
    let n = design.n_sites();
    let tot = model.n_fields() * n;
    let mut last_err = Error::NotPositiveDefinite;
    for &rel in &JITTER_LADDER {
        let mut m = assemble_matrix(model, &design)?;
        let max_diag = (0..tot)
            .map(|i| m[i * tot + i])
            .fold(0.0f64, f64::max);
        let jitter = rel * max_diag;
        if jitter > 0.0 {
            for i in 0..tot {
                m[i * tot + i] += jitter;
            }
        }
        match factor_spd(m, tot) {
            Ok(factor) => {
                return Ok(JointCovariance {
                    design,
                    n_fields: model.n_fields(),
                    factor,
                    jitter_used: jitter,
                })
            }
            Err(e @ Error::NotPositiveDefinite) => last_err = e,
            Err(e) => return Err(e),
        }
    }
    Err(last_err)
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Marginal law of the squared scale field used for heavy-tailed variants.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleMarginal {
    /// sigma^2 ~ InverseGamma(kappa/2, kappa/2): Student-t(kappa) marginals.
    InvGamma { kappa: f64 },
    /// sigma^2 ~ Exponential(rate): Laplace-type marginals.
    Exponential { rate: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub marginal: ScaleMarginal,
    /// Range of the smooth squared-exponential field driving the scales.
    pub g_range: f64,
}

impl ScaleSpec {
    fn validate(&self) -> Result<()> {
        if !(self.g_range > 0.0) {
            return Err(Error::Config("scale g_range must be > 0".into()));
        }
        match self.marginal {
            ScaleMarginal::InvGamma { kappa } if !(kappa > 0.0) => {
                Err(Error::Config("inv_gamma kappa must be > 0".into()))
            }
            ScaleMarginal::Exponential { rate } if !(rate > 0.0) => {
                Err(Error::Config("exponential rate must be > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// sigma(s) from the driving Gaussian value g via the probability
    /// integral transform of the squared scale.
    fn sigma_from_g(&self, g: f64) -> f64 {
        let u = statrs::distribution::Normal::new(0.0, 1.0)
            .unwrap()
            .cdf(g)
            .clamp(1e-15, 1.0 - 1e-15);
        let var = match self.marginal {
            ScaleMarginal::InvGamma { kappa } => {
                statrs::distribution::InverseGamma::new(kappa / 2.0, kappa / 2.0)
                    .unwrap()
                    .inverse_cdf(u)
            }
            ScaleMarginal::Exponential { rate } => -(1.0 - u).ln() / rate,
        };
        var.sqrt()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleOptions {
    /// Variance of iid noise added to the observed x channel (0 = off).
    pub noise_x_var: f64,
    /// Variance of iid noise added to the observed y channel (0 = off).
    pub noise_y_var: f64,
    pub heavy_tail_x: Option<ScaleSpec>,
    pub heavy_tail_w: Option<ScaleSpec>,
}

impl SampleOptions {
    pub fn validate(&self) -> Result<()> {
        if self.noise_x_var < 0.0 || self.noise_y_var < 0.0 {
            return Err(Error::Config("noise variances must be >= 0".into()));
        }
        if let Some(s) = &self.heavy_tail_x {
            s.validate()?;
        }
        if let Some(s) = &self.heavy_tail_w {
            s.validate()?;
        }
        Ok(())
    }
}

/// One simulated draw of all fields on a design. The structural identity
/// y = beta * x + w (+ beta2 * x2) holds exactly on the clean channels;
/// noisy channels are present only when requested.
#[derive(Clone, Debug)]
pub struct FieldSample {
    pub design: Arc<Design>,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub x2: Option<Vec<f64>>,
    pub x_noisy: Option<Vec<f64>>,
    pub y_noisy: Option<Vec<f64>>,
    pub seed: u64,
}

impl FieldSample {
    /// The x channel an estimator should treat as observed.
    pub fn observed_x(&self) -> &[f64] {
        self.x_noisy.as_deref().unwrap_or(&self.x)
    }

    pub fn observed_y(&self) -> &[f64] {
        self.y_noisy.as_deref().unwrap_or(&self.y)
    }
}

// Sub-stream layout for one replicate seed.
const STREAM_FIELDS: u64 = 0;
const STREAM_NOISE_X: u64 = 1;
const STREAM_NOISE_Y: u64 = 2;
const STREAM_SCALE_X: u64 = 3;
const STREAM_SCALE_W: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything needed to draw replicates: the factored joint covariance plus
/// factored covariances for any scale fields, and the noise settings.
pub struct FieldSampler {
    pub joint: JointCovariance,
    pub beta: Vec<f64>,
    opts: SampleOptions,
    scale_x: Option<CholFactor>,
    scale_w: Option<CholFactor>,
}

/// Build the sampler: factor the joint covariance and, if heavy tails are
/// requested, the smooth driving-field covariances.
pub fn build_sampler(
    model: &CovModel,
    design: Arc<Design>,
    beta: &[f64],
    opts: SampleOptions,
) -> Result<FieldSampler> {
    opts.validate()?;
    let nf = model.n_fields();
    if nf < 1 {
        return Err(Error::Config("model has no fields".into()));
    }
    let expected_beta = if nf == 3 { 2 } else { 1 };
    if beta.len() != expected_beta {
        return Err(Error::Config(format!(
            "beta must have {expected_beta} entries for a {nf}-field model"
        )));
    }
    let joint = assemble_joint(model, design.clone())?;
    let scale_factor = |spec: &Option<ScaleSpec>| -> Result<Option<CholFactor>> {
        match spec {
            None => Ok(None),
            Some(s) => {
                // Smooth driver: unit-variance squared-exponential field.
                let g_model = CovModel::Powexp(PowExpParams::new(
                    1.0,
                    1.0 / (s.g_range * s.g_range),
                    2.0,
                )?);
                let jc = assemble_joint(&g_model, design.clone())?;
                Ok(Some(jc.factor))
            }
        }
    };
    let scale_x = scale_factor(&opts.heavy_tail_x)?;
    let scale_w = scale_factor(&opts.heavy_tail_w)?;
    Ok(FieldSampler {
        joint,
        beta: beta.to_vec(),
        opts,
        scale_x,
        scale_w,
    })
}

impl FieldSampler {
    pub fn design(&self) -> &Arc<Design> {
        &self.joint.design
    }

    /// Draw one replicate.
    pub fn draw(&self, seed: u64) -> FieldSample {
        self.draw_batch(seed, 1).pop().unwrap()
    }

    /// Draw `reps` replicates with seeds base_seed, base_seed + 1, ... in one
    /// matrix product. Each replicate's normals come from its own seeded
    /// generator, so results are index-derived and independent of batch
    /// splitting of the estimator work that follows.
    pub fn draw_batch(&self, base_seed: u64, reps: usize) -> Vec<FieldSample> {
        let n = self.design().n_sites();
        let nf = self.joint.n_fields;
        let tot = nf * n;
        let mut z = vec![0.0f64; tot * reps];
        for r in 0..reps {
            let mut rng = stream_rng(base_seed + r as u64, STREAM_FIELDS);
            for i in 0..tot {
                z[i * reps + r] = standard_normal(&mut rng);
            }
        }
        let mut vals = vec![0.0f64; tot * reps];
        self.joint.factor.sample_mul(&z, reps, &mut vals);
        (0..reps)
            .map(|r| {
                let col = |f: usize| -> Vec<f64> {
                    (0..n).map(|i| vals[(f * n + i) * reps + r]).collect()
                };
                // A single-field model means "no confounder": w is identically zero.
                let w = if nf >= 2 { col(1) } else { vec![0.0; n] };
                self.finish(col(0), w, (nf == 3).then(|| col(2)), base_seed + r as u64)
            })
            .collect()
    }

    /// Apply heavy-tail scaling, form y, and add noise channels.
    fn finish(
        &self,
        mut x: Vec<f64>,
        mut w: Vec<f64>,
        x2: Option<Vec<f64>>,
        seed: u64,
    ) -> FieldSample {
        let n = x.len();
        if let (Some(spec), Some(f)) = (&self.opts.heavy_tail_x, &self.scale_x) {
            apply_scale(&mut x, spec, f, seed, STREAM_SCALE_X);
        }
        if let (Some(spec), Some(f)) = (&self.opts.heavy_tail_w, &self.scale_w) {
            apply_scale(&mut w, spec, f, seed, STREAM_SCALE_W);
        }
        let mut y: Vec<f64> = (0..n).map(|i| self.beta[0] * x[i] + w[i]).collect();
        if let Some(x2v) = &x2 {
            for i in 0..n {
                y[i] += self.beta[1] * x2v[i];
            }
        }
        let x_noisy = (self.opts.noise_x_var > 0.0).then(|| {
            let sd = self.opts.noise_x_var.sqrt();
            let mut rng = stream_rng(seed, STREAM_NOISE_X);
            x.iter().map(|&v| v + sd * standard_normal(&mut rng)).collect()
        });
        let y_noisy = (self.opts.noise_y_var > 0.0).then(|| {
            let sd = self.opts.noise_y_var.sqrt();
            let mut rng = stream_rng(seed, STREAM_NOISE_Y);
            y.iter().map(|&v| v + sd * standard_normal(&mut rng)).collect()
        });
        FieldSample {
            design: self.design().clone(),
            x,
            w,
            y,
            x2,
            x_noisy,
            y_noisy,
            seed,
        }
    }
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

fn apply_scale(vals: &mut [f64], spec: &ScaleSpec, factor: &CholFactor, seed: u64, stream: u64) {
    let n = vals.len();
    let mut rng = stream_rng(seed, stream);
    let z: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
    let mut g = vec![0.0; n];
    factor.sample_mul(&z, 1, &mut g);
    for i in 0..n {
        vals[i] *= spec.sigma_from_g(g[i]);
    }
}

/// Convenience wrapper: assemble, factor, and draw a single sample.
pub fn sample_fields(
    model: &CovModel,
    design: Arc<Design>,
    beta: &[f64],
    seed: u64,
    opts: SampleOptions,
) -> Result<FieldSample> {
    let sampler = build_sampler(model, design, beta, opts)?;
    Ok(sampler.draw(seed))
}

// ---------------------------------------------------------------------------
// Sampler verification
// ---------------------------------------------------------------------------

/// Monte Carlo check of the sampler against the assembled covariance.
/// Returns the largest entrywise deviation measured in units of its own
/// Monte Carlo standard error (Wick formula for Gaussian fourth moments),
/// so a correct sampler should stay below ~4.
pub fn empirical_cov_check(
    model: &CovModel,
    design: Arc<Design>,
    n_reps: usize,
    seed: u64,
) -> Result<f64> {
    let n = design.n_sites();
    let nf = model.n_fields();
    let tot = nf * n;
    if n > 64 {
        return Err(Error::Config(
            "empirical_cov_check is meant for small designs (N <= 64)".into(),
        ));
    }
    let truth = assemble_matrix(model, &design)?;
    let joint = assemble_joint(model, design)?;

    let mut acc = vec![0.0f64; tot * tot];
    let chunk = 4096usize;
    let mut done = 0usize;
    let mut z = Vec::new();
    let mut vals = Vec::new();
    while done < n_reps {
        let reps = chunk.min(n_reps - done);
        z.clear();
        z.resize(tot * reps, 0.0);
        for r in 0..reps {
            let mut rng = stream_rng(seed + (done + r) as u64, STREAM_FIELDS);
            for i in 0..tot {
                z[i * reps + r] = standard_normal(&mut rng);
            }
        }
        vals.clear();
        vals.resize(tot * reps, 0.0);
        joint.factor.sample_mul(&z, reps, &mut vals);
        // acc += V V^T
        unsafe {
            matrixmultiply::dgemm(
                tot,
                reps,
                tot,
                1.0,
                vals.as_ptr(),
                reps as isize,
                1,
                vals.as_ptr(),
                1,
                reps as isize,
                1.0,
                acc.as_mut_ptr(),
                tot as isize,
                1,
            );
        }
        done += reps;
    }

    let rf = n_reps as f64;
    let mut worst = 0.0f64;
    for i in 0..tot {
        for j in 0..tot {
            let emp = acc[i * tot + j] / rf;
            let kij = truth[i * tot + j];
            let se = ((truth[i * tot + i] * truth[j * tot + j] + kij * kij) / rf).sqrt();
            if se > 0.0 {
                worst = worst.max((emp - kij).abs() / se);
            }
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// CSV serialization
// ---------------------------------------------------------------------------

/// Write a sample as CSV: coordinate columns (s, or sx/sy), then x, w, y and
/// any optional channels. Values print in shortest round-trip form.
pub fn write_sample_csv(path: &Path, s: &FieldSample) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(Error::Csv)?;
    let d = &s.design;
    let mut header: Vec<&str> = if d.dim == 1 {
        vec!["s"]
    } else {
        vec!["sx", "sy"]
    };
    header.extend(["x", "w", "y"]);
    if s.x2.is_some() {
        header.push("x2");
    }
    if s.x_noisy.is_some() {
        header.push("x_noisy");
    }
    if s.y_noisy.is_some() {
        header.push("y_noisy");
    }
    wtr.write_record(&header).map_err(Error::Csv)?;
    let n = d.n_sites();
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..n {
        rec.clear();
        for c in d.site(i) {
            rec.push(format!("{c}"));
        }
        rec.push(format!("{}", s.x[i]));
        rec.push(format!("{}", s.w[i]));
        rec.push(format!("{}", s.y[i]));
        if let Some(v) = &s.x2 {
            rec.push(format!("{}", v[i]));
        }
        if let Some(v) = &s.x_noisy {
            rec.push(format!("{}", v[i]));
        }
        if let Some(v) = &s.y_noisy {
            rec.push(format!("{}", v[i]));
        }
        wtr.write_record(rec.iter()).map_err(Error::Csv)?;
    }
    wtr.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Read a sample CSV written by `write_sample_csv` (or hand-made data with
/// at least coordinate, x, and y columns). A missing w column reads as
/// zeros. When `design` is given it overrides coordinate-based inference
/// (needed for nested designs, whose structure raw coordinates cannot
/// express unambiguously).
pub fn read_sample_csv(path: &Path, design: Option<Design>) -> Result<FieldSample> {
    let mut rdr = csv::Reader::from_path(path).map_err(Error::Csv)?;
    let headers = rdr.headers().map_err(Error::Csv)?.clone();
    let idx_of = |name: &str| headers.iter().position(|h| h == name);
    let dim = if idx_of("s").is_some() {
        1
    } else if idx_of("sx").is_some() && idx_of("sy").is_some() {
        2
    } else {
        return Err(Error::Config(
            "sample CSV needs an 's' column (1D) or 'sx','sy' columns (2D)".into(),
        ));
    };
    let ix = idx_of("x").ok_or_else(|| Error::Config("missing 'x' column".into()))?;
    let iy = idx_of("y").ok_or_else(|| Error::Config("missing 'y' column".into()))?;
    let iw = idx_of("w");
    let ix2 = idx_of("x2");
    let ixn = idx_of("x_noisy");
    let iyn = idx_of("y_noisy");
    let coord_idx: Vec<usize> = if dim == 1 {
        vec![idx_of("s").unwrap()]
    } else {
        vec![idx_of("sx").unwrap(), idx_of("sy").unwrap()]
    };

    let mut coords = Vec::new();
    let (mut x, mut w, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let (mut x2, mut xn, mut yn) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(Error::Csv)?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Config("short CSV record".into()))?
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad number in CSV: {e}")))
        };
        for &ci in &coord_idx {
            coords.push(get(ci)?);
        }
        x.push(get(ix)?);
        y.push(get(iy)?);
        w.push(match iw {
            Some(i) => get(i)?,
            None => 0.0,
        });
        if let Some(i) = ix2 {
            x2.push(get(i)?);
        }
        if let Some(i) = ixn {
            xn.push(get(i)?);
        }
        if let Some(i) = iyn {
            yn.push(get(i)?);
        }
    }
    let design = match design {
        Some(d) => d,
        None => infer_design(&coords, dim)?,
    };
    if design.n_sites() != x.len() {
        return Err(Error::Config(format!(
            "design has {} sites but CSV has {} rows",
            design.n_sites(),
            x.len()
        )));
    }
    Ok(FieldSample {
        design: Arc::new(design),
        x,
        w,
        y,
        x2: ix2.map(|_| x2),
        x_noisy: ixn.map(|_| xn),
        y_noisy: iyn.map(|_| yn),
        seed: 0,
    })
}
