//! Reproducible experiments: convergence rates of the occupation measure and
//! of its smoothed version in W2, the Girsanov cross-check of the path-space
//! KL divergence, and the bump-family diagnostics behind the lower bound.
//!
//! All randomness is derived from one master seed through
//! [`derive_seed`] with the path `(T index, replica, role)`, so rows do not
//! depend on scheduling or on the order in which replicas run.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{
    kl_quadrature, kl_quadrature_on, make_bump_family, make_density, Density, DensitySpec, KlWeight,
};
use crate::diffusion::{
    girsanov_log_ratio, into_occupation_measure, simulate, simulate_streaming, step_count,
    GeneratorSpec, Initial, SdeConfig,
};
use crate::error::{invalid, parse_err, Error, Result};
use crate::estimator::{
    bandwidth_rule, guard_condition, smooth, variance_guard, PositivityRule, SmoothingMethod,
};
use crate::geometry::{DistanceMode, Manifold, QuadratureGrid};
use crate::kernels::{make_profile, KernelFamily, KernelProfile, NormalizedKernel};
use crate::quad::linear_fit;
use crate::seeding::{self, derive_seed, Role};
use crate::spec_string::parse_tuple;
use crate::transport::{risk_w2, solve_transport, DiscreteMeasure, SolverSpec, W2Protocol};

/// Version of the CSV and JSON layouts written by this module.
/// Fewer replicas leave the per-horizon means too noisy to fit a slope.
pub const MIN_REPLICAS: usize = 8;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Occupation,
    Smoothed,
}

impl std::fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorMode::Occupation => "occupation",
            EstimatorMode::Smoothed => "smoothed",
        })
    }
}

/// Configuration of a rate experiment. Every model object is given by its
/// spec string so that a config file is flat key-value text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifold: String,
    pub density: String,
    pub generator: String,
    pub horizons: Vec<f64>,
    pub replicas: usize,
    pub dt: f64,
    /// `invariant`, `uniform` or `point:(x1,…)` in intrinsic coordinates.
    pub initial: String,
    pub modes: Vec<EstimatorMode>,
    pub kernel: String,
    pub ell: u32,
    pub bandwidth_c: f64,
    /// Optional cap on the bandwidth rule.
    pub h_max: Option<f64>,
    /// Nodes per axis of the estimate grid.
    pub grid: usize,
    pub positivity: PositivityRule,
    pub smoothing: SmoothingMethod,
    pub n_ref: usize,
    pub n_est: usize,
    pub solver: String,
    pub repeats: usize,
    pub paired_floor: bool,
    /// Constant `c` of the guard conditions `T h^d ≥ c ln T`.
    pub guard_c: f64,
    pub seed: u64,
    /// Worker threads; zero uses the global pool.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifold: "circle:c=1".into(),
            density: "uniform".into(),
            generator: "langevin".into(),
            horizons: vec![64.0, 128.0, 256.0, 512.0],
            replicas: 8,
            dt: 0.01,
            initial: "invariant".into(),
            modes: vec![EstimatorMode::Occupation],
            kernel: "poly:r=4".into(),
            ell: 2,
            bandwidth_c: 1.0,
            h_max: None,
            grid: 16,
            positivity: PositivityRule::Certified,
            smoothing: SmoothingMethod::Binned,
            n_ref: 1000,
            n_est: 1000,
            solver: "exact".into(),
            repeats: 1,
            paired_floor: true,
            guard_c: 1.0,
            seed: 1,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn protocol(&self) -> Result<W2Protocol> {
        let p = W2Protocol {
            n_ref: self.n_ref,
            n_est: self.n_est,
            solver: self.solver.parse::<SolverSpec>()?,
            repeats: self.repeats,
            paired_floor: self.paired_floor,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizons.len() < 4 {
            return invalid("a rate experiment needs at least four horizons");
        }
        if self.horizons.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("horizons must be strictly increasing");
        }
        if self.replicas < MIN_REPLICAS {
            return invalid(format!("slope fits need at least {MIN_REPLICAS} replicas per horizon"));
        }
        if self.modes.is_empty() {
            return invalid("at least one estimator mode is required");
        }
        if !(self.dt > 0.0) || self.horizons[0] < self.dt {
            return invalid("dt must be positive and below the smallest horizon");
        }
        self.protocol()?;
        Ok(())
    }

    /// Total number of Euler steps the experiment will simulate.
    pub fn total_steps(&self) -> u64 {
        self.horizons
            .iter()
            .map(|&t| step_count(t, self.dt) as u64)
            .sum::<u64>()
            * self.replicas as u64
    }
}

pub fn parse_initial(s: &str, m: &Manifold) -> Result<Initial> {
    match s.trim() {
        "invariant" => Ok(Initial::Invariant),
        "uniform" => Ok(Initial::Uniform),
        other => {
            let inner = other
                .strip_prefix("point:")
                .ok_or_else(|| parse_err(s, "expected 'invariant', 'uniform' or 'point:(…)'"))?;
            let c = parse_tuple(s, inner)?;
            Ok(Initial::Point(m.point(&c)?))
        }
    }
}

/// One `(T, replica, mode)` measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub horizon: f64,
    pub t_index: usize,
    pub replica: usize,
    pub seed: u64,
    pub mode: EstimatorMode,
    pub bandwidth: Option<f64>,
    pub positivity_ok: Option<bool>,
    /// `T h^d ≥ c ln T`.
    pub guard_density: Option<bool>,
    /// `T h^{d-2} ≥ c ln T`.
    pub guard_variance: Option<bool>,
    pub w2_raw: f64,
    pub w2_floor: f64,
    pub w2_corrected: f64,
    pub error: Option<String>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeFit {
    pub mode: EstimatorMode,
    /// Slope of log mean raw W2² against log T; `None` when the fit failed.
    pub slope_raw: Option<f64>,
    pub stderr_raw: Option<f64>,
    /// Slope of log mean floor-corrected W2²; `None` when a mean is not
    /// positive.
    pub slope_corrected: Option<f64>,
    pub stderr_corrected: Option<f64>,
    pub theoretical: f64,
    /// Horizons with at least one successful replica, aligned with the means.
    pub horizons: Vec<f64>,
    pub mean_raw: Vec<f64>,
    pub mean_corrected: Vec<f64>,
    pub positivity_rate: Option<f64>,
    /// Why a slope could not be fitted.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub total_steps: u64,
    pub rows: Vec<RateRow>,
    pub fits: Vec<ModeFit>,
}

impl RateReport {
    pub fn fit(&self, mode: EstimatorMode) -> Option<&ModeFit> {
        self.fits.iter().find(|f| f.mode == mode)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| Error::InvalidInput(format!("CSV output failed: {e}")))?;
        }
        w.flush()
            .map_err(|e| Error::InvalidInput(format!("CSV output failed: {e}")))?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV is UTF-8"))
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema_version": self.schema_version,
            "config": self.config,
            "total_steps": self.total_steps,
            "fits": self.fits,
        })
    }
}

/// Rate predicted for the mean W2² of the occupation measure.
pub fn occupation_slope(d: usize) -> f64 {
    if d <= 4 {
        -1.0
    } else {
        -2.0 / (d as f64 - 2.0)
    }
}

/// Rate predicted for the smoothed estimator with an `H^ℓ` density.
pub fn smoothed_slope(d: usize, ell: u32) -> f64 {
    let l = ell as f64;
    -(2.0 * l + 2.0) / (2.0 * l + d as f64 - 2.0)
}

/// Least-squares slope of `log y` against `log T` with its standard error.
pub fn fit_slope(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    let mut ts: Vec<f64> = points.iter().map(|p| p.0).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    if ts.len() < 4 {
        return invalid(format!(
            "need at least four distinct horizons, got {}",
            ts.len()
        ));
    }
    if let Some(p) = points.iter().find(|p| !(p.0 > 0.0 && p.1 > 0.0)) {
        return invalid(format!(
            "log-log fit needs positive values, got ({}, {})",
            p.0, p.1
        ));
    }
    let x: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let f = linear_fit(&x, &y);
    Ok((f.slope, f.stderr))
}

struct Context {
    cfg: ExperimentConfig,
    manifold: Manifold,
    density: Density,
    generator: GeneratorSpec,
    initial: Initial,
    protocol: W2Protocol,
    profile: Option<Arc<KernelProfile>>,
    grid: Option<Arc<QuadratureGrid>>,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let manifold: Manifold = cfg.manifold.parse()?;
        let density = make_density(manifold, &cfg.density.parse::<DensitySpec>()?)?;
        let generator = GeneratorSpec::parse(&cfg.generator, density.clone())?;
        let initial = parse_initial(&cfg.initial, &manifold)?;
        let protocol = cfg.protocol()?;
        let (profile, grid) = if cfg.modes.contains(&EstimatorMode::Smoothed) {
            let family: KernelFamily = cfg.kernel.parse()?;
            let profile = Arc::new(make_profile(family, manifold.intrinsic_dim())?);
            (
                Some(profile),
                Some(Arc::new(manifold.quadrature_grid(cfg.grid)?)),
            )
        } else {
            (None, None)
        };
        Ok(Context {
            cfg: cfg.clone(),
            manifold,
            density,
            generator,
            initial,
            protocol,
            profile,
            grid,
        })
    }

    fn replica(&self, t_index: usize, replica: usize) -> Vec<RateRow> {
        let horizon = self.cfg.horizons[t_index];
        let (ti, ri) = (t_index as u64, replica as u64);
        let path_seed = derive_seed(self.cfg.seed, &[ti, ri, Role::Path as u64]);
        let risk_seed = derive_seed(self.cfg.seed, &[ti, ri, Role::Reference as u64]);
        let blank = |mode: EstimatorMode| RateRow {
            horizon,
            t_index,
            replica,
            seed: path_seed,
            mode,
            bandwidth: None,
            positivity_ok: None,
            guard_density: None,
            guard_variance: None,
            w2_raw: f64::NAN,
            w2_floor: f64::NAN,
            w2_corrected: f64::NAN,
            error: None,
            wall_ms: 0.0,
        };
        let start = Instant::now();
        let sde = SdeConfig::new(
            self.generator.clone(),
            horizon,
            self.cfg.dt,
            self.initial.clone(),
            path_seed,
        );
        let occupation = simulate(&sde).and_then(into_occupation_measure);
        let sim_ms = start.elapsed().as_secs_f64() * 1e3;
        let occupation = match occupation {
            Ok(o) => o,
            Err(e) => {
                return self
                    .cfg
                    .modes
                    .iter()
                    .map(|&m| RateRow {
                        error: Some(e.to_string()),
                        wall_ms: sim_ms,
                        ..blank(m)
                    })
                    .collect()
            }
        };
        let mut rows = Vec::new();
        for &mode in &self.cfg.modes {
            let t0 = Instant::now();
            let mut row = blank(mode);
            let outcome = match mode {
                EstimatorMode::Occupation => {
                    risk_w2(&occupation, &self.density, &self.protocol, risk_seed)
                }
                EstimatorMode::Smoothed => self.smoothed(&occupation, horizon, &mut row, risk_seed),
            };
            match outcome {
                Ok(r) => {
                    row.w2_raw = r.raw;
                    row.w2_floor = r.floor;
                    row.w2_corrected = r.corrected();
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row.wall_ms = sim_ms + t0.elapsed().as_secs_f64() * 1e3;
            rows.push(row);
        }
        rows
    }

    fn smoothed(
        &self,
        occupation: &DiscreteMeasure,
        horizon: f64,
        row: &mut RateRow,
        risk_seed: u64,
    ) -> Result<crate::transport::RiskEstimate> {
        let d = self.manifold.intrinsic_dim();
        let profile = self.profile.as_ref().expect("smoothed mode has a kernel");
        let grid = self.grid.as_ref().expect("smoothed mode has a grid");
        let h = bandwidth_rule(
            horizon,
            d,
            self.cfg.ell,
            self.cfg.bandwidth_c,
            self.cfg.h_max,
        )?;
        row.bandwidth = Some(h);
        row.guard_density = Some(guard_condition(horizon, h, d, self.cfg.guard_c));
        row.guard_variance = Some(variance_guard(horizon, h, d, self.cfg.guard_c));
        let nk = NormalizedKernel::new(
            self.manifold,
            Arc::clone(profile),
            h,
            DistanceMode::Geodesic,
        )?;
        let method = if self.manifold.is_flat() {
            self.cfg.smoothing
        } else {
            SmoothingMethod::Direct
        };
        let est = smooth(occupation, &nk, grid, self.cfg.positivity, method)?;
        row.positivity_ok = Some(est.positivity_ok());
        risk_w2(&est, &self.density, &self.protocol, risk_seed)
    }
}

/// Runs every `(T, replica)` job, in parallel, and fits the rates.
pub fn run_rate_experiment(cfg: &ExperimentConfig) -> Result<RateReport> {
    let ctx = Context::new(cfg)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.horizons.len())
        .flat_map(|t| (0..cfg.replicas).map(move |r| (t, r)))
        .collect();
    let run = || -> Vec<RateRow> {
        jobs.par_iter()
            .flat_map_iter(|&(t, r)| ctx.replica(t, r))
            .collect()
    };
    let mut rows = if cfg.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    };
    rows.sort_by_key(|r| (r.t_index, r.replica, r.mode as u8));
    let d = ctx.manifold.intrinsic_dim();
    let fits = cfg
        .modes
        .iter()
        .map(|&mode| {
            let theoretical = match mode {
                EstimatorMode::Occupation => occupation_slope(d),
                EstimatorMode::Smoothed => smoothed_slope(d, cfg.ell),
            };
            fit_mode(&rows, mode, &cfg.horizons, theoretical)
        })
        .collect();
    Ok(RateReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        total_steps: cfg.total_steps(),
        rows,
        fits,
    })
}

fn fit_mode(rows: &[RateRow], mode: EstimatorMode, horizons: &[f64], theoretical: f64) -> ModeFit {
    let mut mean_raw = Vec::new();
    let mut mean_corrected = Vec::new();
    let mut fit_t = Vec::new();
    let mut pos = (0usize, 0usize);
    let mut error = None;
    for (ti, &t) in horizons.iter().enumerate() {
        let ok: Vec<&RateRow> = rows
            .iter()
            .filter(|r| r.mode == mode && r.t_index == ti && r.error.is_none())
            .collect();
        if ok.is_empty() {
            error.get_or_insert_with(|| format!("every {mode} replica failed at T = {t}"));
            continue;
        }
        let k = ok.len() as f64;
        fit_t.push(t);
        mean_raw.push(ok.iter().map(|r| r.w2_raw).sum::<f64>() / k);
        mean_corrected.push(ok.iter().map(|r| r.w2_corrected).sum::<f64>() / k);
        for r in &ok {
            if let Some(p) = r.positivity_ok {
                pos.0 += p as usize;
                pos.1 += 1;
            }
        }
    }
    let pts = |v: &[f64]| {
        fit_t
            .iter()
            .cloned()
            .zip(v.iter().cloned())
            .collect::<Vec<_>>()
    };
    let raw = match fit_slope(&pts(&mean_raw)) {
        Ok(f) => Some(f),
        Err(e) => {
            error.get_or_insert_with(|| e.to_string());
            None
        }
    };
    let corrected = fit_slope(&pts(&mean_corrected)).ok();
    ModeFit {
        mode,
        slope_raw: raw.map(|c| c.0),
        stderr_raw: raw.map(|c| c.1),
        slope_corrected: corrected.map(|c| c.0),
        stderr_corrected: corrected.map(|c| c.1),
        theoretical,
        horizons: fit_t,
        mean_raw,
        mean_corrected,
        positivity_rate: (pos.1 > 0).then(|| pos.0 as f64 / pos.1 as f64),
        error,
    }
}

// ---------------------------------------------------------------------------
// Girsanov cross-check

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlCheckConfig {
    pub manifold: String,
    pub p: String,
    pub q: String,
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
}

impl Default for KlCheckConfig {
    fn default() -> Self {
        KlCheckConfig {
            manifold: "circle:c=1".into(),
            p: "trig:a1=0.3".into(),
            q: "uniform".into(),
            horizon: 10.0,
            dt: 1e-3,
            paths: 200,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KlReport {
    pub schema_version: u32,
    pub config: KlCheckConfig,
    /// Control-variate Monte Carlo mean of the log-likelihood ratio.
    pub mc_mean: f64,
    pub mc_se: f64,
    /// Plain Monte Carlo mean and standard error.
    pub plain_mean: f64,
    pub plain_se: f64,
    /// Fitted control-variate coefficient on the martingale part.
    pub beta: f64,
    pub quadrature_p: f64,
    pub quadrature_p_squared: f64,
    pub z_p: f64,
    pub z_p_squared: f64,
    /// Weight modes within two standard errors of the Monte Carlo mean.
    pub matches: Vec<KlWeight>,
    /// The unique matching mode, if exactly one matches.
    pub matching_mode: Option<KlWeight>,
    pub max_normal_residual: f64,
}

/// Compares the Monte Carlo mean of `log dP_p/dP_q` along stationary
/// Langevin paths of `p` with the quadrature formula in both weight modes.
/// The KL divergence of the initial laws is not included on either side.
pub fn run_kl_check(cfg: &KlCheckConfig) -> Result<KlReport> {
    if cfg.paths < 2 {
        return invalid("need at least two paths");
    }
    let m: Manifold = cfg.manifold.parse()?;
    if !(m.is_flat() && m.intrinsic_dim() <= 2) {
        return invalid("the KL check runs on the circle or a torus of dimension at most two");
    }
    let p = make_density(m, &cfg.p.parse()?)?;
    let q = make_density(m, &cfg.q.parse()?)?;
    let gen = GeneratorSpec::langevin(p.clone());
    let terms: Vec<_> = (0..cfg.paths)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, &[i as u64, Role::Path as u64]);
            let sde = SdeConfig::new(gen.clone(), cfg.horizon, cfg.dt, Initial::Invariant, seed);
            let path = simulate(&sde)?;
            girsanov_log_ratio(&path, &p, &q)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    let total: Vec<f64> = terms.iter().map(|t| t.total()).collect();
    let mart: Vec<f64> = terms.iter().map(|t| t.martingale).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mt, mm) = (mean(&total), mean(&mart));
    let cov: f64 = total
        .iter()
        .zip(&mart)
        .map(|(a, b)| (a - mt) * (b - mm))
        .sum::<f64>()
        / (n - 1.0);
    let var_m: f64 = mart.iter().map(|b| (b - mm).powi(2)).sum::<f64>() / (n - 1.0);
    let beta = if var_m > 0.0 { cov / var_m } else { 0.0 };
    // The martingale part has mean exactly zero, so subtracting β times it
    // keeps the estimator unbiased.
    let adjusted: Vec<f64> = total.iter().zip(&mart).map(|(a, b)| a - beta * b).collect();
    let se = |v: &[f64]| {
        let mu = mean(v);
        (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    };
    let (mc_mean, mc_se) = (mean(&adjusted), se(&adjusted));
    let quadrature_p = kl_quadrature(&p, &q, cfg.horizon, KlWeight::P)?;
    let quadrature_p_squared = kl_quadrature(&p, &q, cfg.horizon, KlWeight::PSquared)?;
    let z = |v: f64| {
        if mc_se > 0.0 {
            (mc_mean - v) / mc_se
        } else if mc_mean == v {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let (z_p, z_p_squared) = (z(quadrature_p), z(quadrature_p_squared));
    let mut matches = Vec::new();
    if z_p.abs() <= 2.0 {
        matches.push(KlWeight::P);
    }
    if z_p_squared.abs() <= 2.0 {
        matches.push(KlWeight::PSquared);
    }
    let matching_mode = (matches.len() == 1).then(|| matches[0]);
    Ok(KlReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        mc_mean,
        mc_se,
        plain_mean: mt,
        plain_se: se(&total),
        beta,
        quadrature_p,
        quadrature_p_squared,
        z_p,
        z_p_squared,
        matches,
        matching_mode,
        max_normal_residual: terms
            .iter()
            .map(|t| t.max_normal_residual)
            .fold(0.0, f64::max),
    })
}

// ---------------------------------------------------------------------------
// Bump-family diagnostics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimaxConfig {
    pub dim: usize,
    pub side: f64,
    pub epsilons: Vec<f64>,
    /// Amplitudes as fractions of `ε^ℓ`.
    pub amplitude_fractions: Vec<f64>,
    pub order: u32,
    pub horizon: f64,
    /// Random sign pairs per `(ε, v)`.
    pub pairs: usize,
    /// Largest Hamming distance among the sampled pairs.
    pub max_flips: usize,
    /// Nodes per axis of the grid on which W1 is computed.
    pub grid: usize,
    /// Nodes per axis for the KL quadrature; zero reuses `grid`.
    pub kl_grid: usize,
    pub seed: u64,
}

impl Default for MinimaxConfig {
    fn default() -> Self {
        MinimaxConfig {
            dim: 1,
            side: 1.0,
            epsilons: vec![0.05, 0.1],
            amplitude_fractions: vec![0.25, 0.5, 1.0],
            order: 2,
            horizon: 10.0,
            pairs: 4,
            max_flips: 3,
            grid: 4096,
            kl_grid: 0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimaxEntry {
    pub epsilon: f64,
    pub amplitude: f64,
    pub kappa: f64,
    pub bumps: usize,
    pub hamming: usize,
    pub w1: f64,
    /// `v ε^{d+1} / κ² · d_H`.
    pub lower_form: f64,
    pub ratio: f64,
    /// Path-space KL between the laws of the two stationary processes.
    pub kl: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinimaxReport {
    pub schema_version: u32,
    pub config: MinimaxConfig,
    pub entries: Vec<MinimaxEntry>,
    /// `W1(2v) / W1(v)` averaged over comparable pairs.
    pub w1_doubling_ratio: Option<f64>,
    /// Fitted exponent of the single-flip KL in `v` and in `ε`.
    pub kl_exponent_v: f64,
    pub kl_exponent_eps: Option<f64>,
}

/// W1 between two densities given on a grid, computed from the positive and
/// negative parts of their difference (W1 depends on the difference only).
pub fn w1_grid_difference(p1: &[f64], p2: &[f64], grid: &QuadratureGrid) -> Result<f64> {
    let d = grid.manifold().intrinsic_dim();
    let w = grid.weights();
    let (mut pos_c, mut pos_w, mut neg_c, mut neg_w) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for j in 0..grid.len() {
        let diff = (p1[j] - p2[j]) * w[j];
        if diff > 0.0 {
            pos_c.extend_from_slice(grid.coords(j));
            pos_w.push(diff);
        } else if diff < 0.0 {
            neg_c.extend_from_slice(grid.coords(j));
            neg_w.push(-diff);
        }
    }
    let (mp, mn): (f64, f64) = (pos_w.iter().sum(), neg_w.iter().sum());
    if mp == 0.0 && mn == 0.0 {
        return Ok(0.0);
    }
    if pos_w.len() * neg_w.len() > crate::transport::EXACT_BUDGET {
        return Err(Error::TooLarge(format!(
            "{} × {} difference support",
            pos_w.len(),
            neg_w.len()
        )));
    }
    let mass = 0.5 * (mp + mn);
    let a: Vec<f64> = pos_w.iter().map(|x| x / mp).collect();
    let b: Vec<f64> = neg_w.iter().map(|x| x / mn).collect();
    let m = grid.manifold();
    let mut cost = Vec::with_capacity(a.len() * b.len());
    for x in pos_c.chunks(d) {
        for y in neg_c.chunks(d) {
            cost.push(m.intrinsic_geodesic(x, y));
        }
    }
    Ok(mass * solve_transport(&a, &b, &cost)?.cost)
}

pub fn run_minimax_diagnostic(cfg: &MinimaxConfig) -> Result<MinimaxReport> {
    if !(cfg.dim == 1 || cfg.dim == 2) {
        return invalid("the bump diagnostic runs on tori of dimension one or two");
    }
    let m = if cfg.dim == 1 {
        Manifold::circle(cfg.side)?
    } else {
        Manifold::torus(2, cfg.side)?
    };
    let grid = m.quadrature_grid(cfg.grid)?;
    let kl_grid = m.quadrature_grid(if cfg.kl_grid > 0 {
        cfg.kl_grid
    } else {
        cfg.grid
    })?;
    let d = cfg.dim as i32;
    let mut rng = seeding::rng(derive_seed(cfg.seed, &[Role::Resample as u64]));
    let mut entries = Vec::new();
    let mut doubling = Vec::new();
    let mut kl_v: Vec<(f64, f64, f64)> = Vec::new();
    let mut kl_eps: Vec<(f64, f64)> = Vec::new();
    for &eps in &cfg.epsilons {
        let eps_l = eps.powi(cfg.order as i32);
        let base_family = make_bump_family(m, eps, cfg.order, eps_l)?;
        let j = base_family.len();
        let pairs: Vec<(Vec<i8>, Vec<i8>)> = (0..cfg.pairs)
            .map(|_| {
                let tau: Vec<i8> = (0..j)
                    .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
                    .collect();
                let flips = rng.gen_range(1..=cfg.max_flips.clamp(1, j));
                let mut idx: Vec<usize> = (0..j).collect();
                idx.shuffle(&mut rng);
                let mut other = tau.clone();
                for &i in &idx[..flips] {
                    other[i] = -other[i];
                }
                (tau, other)
            })
            .collect();
        let mut w1_by_v = Vec::new();
        for &frac in &cfg.amplitude_fractions {
            let v = frac * eps_l;
            let fam = make_bump_family(m, eps, cfg.order, v)?;
            let kappa = fam.kappa();
            let mut w1s = Vec::new();
            for (tau, other) in &pairs {
                let a = fam.member(tau)?;
                let b = fam.member(other)?;
                let pa: Vec<f64> = (0..grid.len()).map(|k| a.eval_at(grid.coords(k))).collect();
                let pb: Vec<f64> = (0..grid.len()).map(|k| b.eval_at(grid.coords(k))).collect();
                let w1 = w1_grid_difference(&pa, &pb, &grid)?;
                let hamming = tau.iter().zip(other).filter(|(x, y)| x != y).count();
                let lower_form = v * eps.powi(d + 1) / (kappa * kappa) * hamming as f64;
                let kl = kl_quadrature_on(&a, &b, cfg.horizon, KlWeight::P, &kl_grid)?;
                entries.push(MinimaxEntry {
                    epsilon: eps,
                    amplitude: v,
                    kappa,
                    bumps: j,
                    hamming,
                    w1,
                    lower_form,
                    ratio: if lower_form > 0.0 {
                        w1 / lower_form
                    } else {
                        f64::NAN
                    },
                    kl,
                });
                w1s.push(w1);
            }
            w1_by_v.push((v, w1s));
            // Single flip of the first bump from the all-plus configuration.
            let plus = vec![1i8; j];
            let mut one = plus.clone();
            one[0] = -1;
            let kl = kl_quadrature_on(
                &fam.member(&plus)?,
                &fam.member(&one)?,
                cfg.horizon,
                KlWeight::P,
                &kl_grid,
            )?;
            if kl > 0.0 {
                kl_v.push((eps, v, kl));
                if (frac - 1.0).abs() < 1e-12 {
                    kl_eps.push((eps, kl));
                }
            }
        }
        for (v, w) in &w1_by_v {
            if let Some((_, w2)) = w1_by_v.iter().find(|(u, _)| (u / v - 2.0).abs() < 1e-9) {
                for (a, b) in w.iter().zip(w2) {
                    if *a > 0.0 {
                        doubling.push(b / a);
                    }
                }
            }
        }
    }
    let exponent = |pts: &[(f64, f64)]| -> Option<f64> {
        let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        xs.dedup();
        if xs.len() < 2 {
            return None;
        }
        let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        Some(linear_fit(&x, &y).slope)
    };
    // The v-exponent is fitted within each ε and averaged.
    let v_exps: Vec<f64> = cfg
        .epsilons
        .iter()
        .filter_map(|&eps| {
            let pts: Vec<(f64, f64)> = kl_v
                .iter()
                .filter(|p| p.0 == eps)
                .map(|p| (p.1, p.2))
                .collect();
            exponent(&pts)
        })
        .collect();
    if v_exps.is_empty() {
        return invalid("need at least two amplitudes to fit the KL exponent");
    }
    Ok(MinimaxReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        entries,
        w1_doubling_ratio: (!doubling.is_empty())
            .then(|| doubling.iter().sum::<f64>() / doubling.len() as f64),
        kl_exponent_v: v_exps.iter().sum::<f64>() / v_exps.len() as f64,
        kl_exponent_eps: exponent(&kl_eps),
    })
}

/// Simulates without storing the path and returns the final point, for
/// quick smoke runs of long horizons.
pub fn final_point(cfg: &SdeConfig) -> Result<Vec<f64>> {
    let mut last = Vec::new();
    simulate_streaming(cfg, |_, _, x| {
        last.clear();
        last.extend_from_slice(x);
    })?;
    Ok(last)
}
