//! Simulation of reversible diffusions on the model manifolds, occupation
//! measures of simulated paths and discretised Girsanov log-likelihood
//! ratios.
//!
//! Two generators are supported. The Langevin generator
//! `L f = Δf + ⟨∇ln p, ∇f⟩` and the weighted generator
//! `A f = q Δf + ⟨q ∇ln(pq), ∇f⟩` for a positive field `q`, both reversible
//! with respect to `p dvol`. In Itô form the dynamics read
//! `dX = (q ∇ln p + ∇q) dt + √(2q) dW` (with `q ≡ 1` for Langevin), and each
//! step is an Euler–Maruyama increment in the tangent space followed by the
//! exact exponential map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::densities::{make_density, Density, DensitySpec};
use crate::error::{invalid, parse_err, Error, Result};
use crate::geometry::{wrap, wrapped_diff, Manifold, ManifoldPoint};
use crate::seeding;
use crate::transport::DiscreteMeasure;

/// A positive field `q = scale · V · shape`, where `shape` is a density and
/// `V` the volume, so that `q = scale · (1 + …)` for the trig shapes.
#[derive(Clone, Debug)]
pub struct ScalarField {
    shape: Density,
    scale: f64,
}

impl ScalarField {
    pub fn new(shape: Density, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return invalid(format!("field scale must be positive, got {scale}"));
        }
        Ok(ScalarField { shape, scale })
    }

    fn factor(&self) -> f64 {
        self.scale * self.shape.manifold().total_volume()
    }

    pub fn eval_at(&self, x: &[f64]) -> f64 {
        self.factor() * self.shape.eval_at(x)
    }

    /// Value and gradient (frame components) at `x`.
    pub fn eval_grad_at(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.eval_at(x);
        self.shape.grad_log_at(x, grad);
        grad.iter_mut().for_each(|g| *g *= v);
        v
    }

    pub fn min(&self) -> f64 {
        self.factor() * self.shape.p_min()
    }

    pub fn max(&self) -> f64 {
        self.factor() * self.shape.p_max()
    }

    pub fn label(&self) -> String {
        if self.scale == 1.0 {
            self.shape.label().to_string()
        } else {
            format!("{}@{}", self.shape.label(), self.scale)
        }
    }
}

#[derive(Clone, Debug)]
pub enum GeneratorKind {
    Langevin,
    Apq(ScalarField),
}

/// A generator together with its invariant density.
#[derive(Clone, Debug)]
pub struct GeneratorSpec {
    kind: GeneratorKind,
    density: Density,
}

impl GeneratorSpec {
    pub fn langevin(density: Density) -> Self {
        GeneratorSpec {
            kind: GeneratorKind::Langevin,
            density,
        }
    }

    pub fn apq(density: Density, q: ScalarField) -> Result<Self> {
        if q.shape.manifold() != density.manifold() {
            return Err(Error::ManifoldMismatch(
                "q and p live on different manifolds".into(),
            ));
        }
        Ok(GeneratorSpec {
            kind: GeneratorKind::Apq(q),
            density,
        })
    }

    /// Parses `langevin` or `apq:<density spec>[@scale]`.
    pub fn parse(s: &str, density: Density) -> Result<Self> {
        let s = s.trim();
        if s == "langevin" {
            return Ok(Self::langevin(density));
        }
        let rest = s
            .strip_prefix("apq:")
            .ok_or_else(|| parse_err(s, "expected 'langevin' or 'apq:<field>'"))?;
        let (shape, scale) = match rest.rsplit_once('@') {
            Some((a, b)) => (a, b.parse::<f64>().map_err(|_| parse_err(s, "bad scale"))?),
            None => (rest, 1.0),
        };
        let spec = DensitySpec::from_str(shape)?;
        let shape = make_density(*density.manifold(), &spec)?;
        Self::apq(density, ScalarField::new(shape, scale)?)
    }

    pub fn kind(&self) -> &GeneratorKind {
        &self.kind
    }

    pub fn density(&self) -> &Density {
        &self.density
    }

    pub fn manifold(&self) -> &Manifold {
        self.density.manifold()
    }

    /// Lower ellipticity bound: `Γ(f, f) ≥ κ_min |∇f|²`.
    pub fn kappa_min(&self) -> f64 {
        match &self.kind {
            GeneratorKind::Langevin => 1.0,
            GeneratorKind::Apq(q) => q.min(),
        }
    }

    pub fn kappa_max(&self) -> f64 {
        match &self.kind {
            GeneratorKind::Langevin => 1.0,
            GeneratorKind::Apq(q) => q.max(),
        }
    }

    /// Itô drift (frame components) and diffusivity `q` at `x`.
    fn drift_at(&self, x: &[f64], drift: &mut [f64], scratch: &mut [f64]) -> f64 {
        self.density.grad_log_at(x, drift);
        match &self.kind {
            GeneratorKind::Langevin => 1.0,
            GeneratorKind::Apq(q) => {
                let qv = q.eval_grad_at(x, scratch);
                for (d, g) in drift.iter_mut().zip(scratch.iter()) {
                    *d = qv * *d + g;
                }
                qv
            }
        }
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            GeneratorKind::Langevin => f.write_str("langevin"),
            GeneratorKind::Apq(q) => write!(f, "apq:{}", q.label()),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Initial {
    Point(ManifoldPoint),
    /// One exact draw from the invariant density.
    Invariant,
    /// One draw from the normalised volume.
    Uniform,
}

impl fmt::Display for Initial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Initial::Point(p) => {
                let c: Vec<String> = p.intrinsic().iter().map(|x| format!("{x}")).collect();
                write!(f, "point({})", c.join(","))
            }
            Initial::Invariant => f.write_str("invariant"),
            Initial::Uniform => f.write_str("uniform"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdeConfig {
    pub generator: GeneratorSpec,
    pub horizon: f64,
    pub dt: f64,
    pub initial: Initial,
    pub seed: u64,
}

/// Largest number of stored path points before callers must stream.
pub const MAX_STORED_STEPS: usize = 10_000_000;

impl SdeConfig {
    pub fn new(
        generator: GeneratorSpec,
        horizon: f64,
        dt: f64,
        initial: Initial,
        seed: u64,
    ) -> Self {
        SdeConfig {
            generator,
            horizon,
            dt,
            initial,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon.is_finite() && self.dt <= self.horizon) {
            return invalid(format!(
                "need dt ≤ T, got dt={} T={}",
                self.dt, self.horizon
            ));
        }
        if let Initial::Point(p) = &self.initial {
            self.generator.manifold().check_point(p)?;
        }
        Ok(())
    }

    /// Number of steps `ceil(T/dt)`, treating ratios within `1e-9` of an
    /// integer as exact.
    pub fn steps(&self) -> usize {
        step_count(self.horizon, self.dt)
    }

    pub fn provenance(&self) -> String {
        format!(
            "manifold={} density={} generator={} T={} dt={} initial={} seed={}",
            self.generator.manifold(),
            self.generator.density().label(),
            self.generator,
            self.horizon,
            self.dt,
            self.initial,
            self.seed
        )
    }
}

pub(crate) fn step_count(horizon: f64, dt: f64) -> usize {
    let r = horizon / dt;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * r.max(1.0) {
        (n as usize).max(1)
    } else {
        r.ceil() as usize
    }
}

/// A simulated path, with intrinsic coordinates stored flat.
#[derive(Clone, Debug)]
pub struct DiffusionPath {
    manifold: Manifold,
    coords: Vec<f64>,
    dt: f64,
    horizon: f64,
    seed: u64,
    provenance: String,
}

impl DiffusionPath {
    /// Builds a path from stored coordinates, e.g. one read back from disk.
    pub fn from_coords(
        manifold: Manifold,
        coords: Vec<f64>,
        dt: f64,
        horizon: f64,
        seed: u64,
        provenance: String,
    ) -> Result<Self> {
        let d = manifold.intrinsic_dim();
        if coords.is_empty() || coords.len() % d != 0 {
            return invalid("path coordinates must be a nonempty multiple of the dimension");
        }
        let n = coords.len() / d;
        if n != step_count(horizon, dt) + 1 {
            return invalid(format!(
                "path has {n} points but T={horizon}, dt={dt} implies {}",
                step_count(horizon, dt) + 1
            ));
        }
        for c in coords.chunks(d) {
            manifold.point(c)?;
        }
        Ok(DiffusionPath {
            manifold,
            coords,
            dt,
            horizon,
            seed,
            provenance,
        })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    /// Number of stored points (steps + 1).
    pub fn len(&self) -> usize {
        self.coords.len() / self.manifold.intrinsic_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn coords(&self, i: usize) -> &[f64] {
        let d = self.manifold.intrinsic_dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn flat_coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> ManifoldPoint {
        self.manifold
            .point(self.coords(i))
            .expect("path points are valid")
    }

    pub fn time(&self, i: usize) -> f64 {
        if i + 1 == self.len() {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }
}

/// Simulates and stores a path.
pub fn simulate(cfg: &SdeConfig) -> Result<DiffusionPath> {
    cfg.validate()?;
    let n = cfg.steps();
    if n > MAX_STORED_STEPS {
        return Err(Error::TooLarge(format!(
            "{n} steps exceed the stored-path budget; use simulate_streaming"
        )));
    }
    let m = *cfg.generator.manifold();
    let mut coords = Vec::with_capacity((n + 1) * m.intrinsic_dim());
    simulate_streaming(cfg, |_, _, x| coords.extend_from_slice(x))?;
    Ok(DiffusionPath {
        manifold: m,
        coords,
        dt: cfg.dt,
        horizon: cfg.horizon,
        seed: cfg.seed,
        provenance: cfg.provenance(),
    })
}

/// Largest number of sub-steps an oversized Euler step is split into.
const MAX_SUBSTEPS: usize = 1024;

struct Stepper<'a> {
    m: Manifold,
    gen: &'a GeneratorSpec,
    uniform_langevin: bool,
    drift: Vec<f64>,
    scratch: Vec<f64>,
    step: Vec<f64>,
}

impl Stepper<'_> {
    /// Writes the tangent Euler step from `x` for the noise increment `dw`
    /// over time `h` into `self.step` and returns its length.
    fn propose(&mut self, x: &[f64], dw: &[f64], h: f64) -> f64 {
        let qv = if self.uniform_langevin {
            self.drift.iter_mut().for_each(|v| *v = 0.0);
            1.0
        } else {
            self.gen.drift_at(x, &mut self.drift, &mut self.scratch)
        };
        let sigma = (2.0 * qv).sqrt();
        match self.m {
            Manifold::Sphere { .. } => {
                // Project the ambient increment onto the tangent plane.
                let basis = self.m.tangent_basis_at(x);
                for k in 0..2 {
                    let c: f64 = basis[k].iter().zip(dw).map(|(b, z)| b * z).sum();
                    self.step[k] = sigma * c + self.drift[k] * h;
                }
            }
            _ => {
                for k in 0..self.step.len() {
                    self.step[k] = sigma * dw[k] + self.drift[k] * h;
                }
            }
        }
        self.step.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Simulates a path and hands each point `(index, time, coords)` to
/// `visit` without storing the path. Returns the number of points visited.
pub fn simulate_streaming(
    cfg: &SdeConfig,
    mut visit: impl FnMut(usize, f64, &[f64]),
) -> Result<usize> {
    cfg.validate()?;
    let gen = &cfg.generator;
    let m = *gen.manifold();
    let d = m.intrinsic_dim();
    let n = cfg.steps();
    let mut rng = seeding::rng(cfg.seed);
    let mut x = Vec::with_capacity(d);
    match &cfg.initial {
        Initial::Point(p) => x.extend_from_slice(p.intrinsic()),
        Initial::Invariant => {
            gen.density().sample_into(&mut rng, &mut x);
        }
        Initial::Uniform => m.sample_uniform_into(&mut rng, &mut x),
    }
    visit(0, 0.0, &x);
    let inj = m.injectivity_radius();
    let noise_dim = if matches!(m, Manifold::Sphere { .. }) {
        3
    } else {
        d
    };
    let mut stepper = Stepper {
        m,
        gen,
        uniform_langevin: matches!(gen.kind, GeneratorKind::Langevin) && gen.density().is_uniform(),
        drift: vec![0.0; d],
        scratch: vec![0.0; d],
        step: vec![0.0; d],
    };
    let mut dw = vec![0.0; noise_dim];
    let mut parts_buf = Vec::new();
    let mut trial = Vec::with_capacity(d);
    for i in 0..n {
        let t0 = i as f64 * cfg.dt;
        let h = if i + 1 == n { cfg.horizon - t0 } else { cfg.dt };
        let sqrt_h = h.sqrt();
        for w in dw.iter_mut() {
            *w = sqrt_h * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        if stepper.propose(&x, &dw, h) < inj {
            advance(&m, &mut x, &stepper.step);
        } else {
            // Redo the step on a finer mesh. The sub-increments are a
            // Brownian bridge pinned to `dw`, so the total noise is unchanged.
            let mut parts = 2usize;
            loop {
                if parts > MAX_SUBSTEPS {
                    return Err(Error::Numerical(format!(
                        "step {i} stays longer than the injectivity radius {inj} after {MAX_SUBSTEPS} subdivisions; reduce dt"
                    )));
                }
                let hs = h / parts as f64;
                parts_buf.clear();
                for _ in 0..parts * noise_dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    parts_buf.push(hs.sqrt() * z);
                }
                for k in 0..noise_dim {
                    let total: f64 = (0..parts).map(|j| parts_buf[j * noise_dim + k]).sum();
                    let shift = (total - dw[k]) / parts as f64;
                    for j in 0..parts {
                        parts_buf[j * noise_dim + k] -= shift;
                    }
                }
                trial.clear();
                trial.extend_from_slice(&x);
                let ok = parts_buf.chunks(noise_dim).all(|inc| {
                    if stepper.propose(&trial, inc, hs) < inj {
                        advance(&m, &mut trial, &stepper.step);
                        true
                    } else {
                        false
                    }
                });
                if ok {
                    x.clear();
                    x.extend_from_slice(&trial);
                    break;
                }
                parts *= 2;
            }
        }
        let t1 = if i + 1 == n {
            cfg.horizon
        } else {
            (i + 1) as f64 * cfg.dt
        };
        visit(i + 1, t1, &x);
    }
    Ok(n + 1)
}

/// Moves `x` along the geodesic with initial velocity given by frame
/// components `v`.
fn advance(m: &Manifold, x: &mut [f64], v: &[f64]) {
    match *m {
        Manifold::Sphere { .. } => {
            let p = m.point(x).expect("valid point");
            let basis = m.tangent_basis_at(x);
            let amb: Vec<f64> = (0..3)
                .map(|i| v[0] * basis[0][i] + v[1] * basis[1][i])
                .collect();
            let y = m.exp_map(&p, &amb).expect("tangent step");
            x.copy_from_slice(y.intrinsic());
        }
        _ => {
            let s = m.flat_period().unwrap_or(1.0);
            for (xi, vi) in x.iter_mut().zip(v) {
                *xi = wrap(*xi + vi, s);
            }
        }
    }
}

/// Trapezoid weights of the time grid of a path, normalised by `T`.
pub fn occupation_weights(n_points: usize, dt: f64, horizon: f64) -> Vec<f64> {
    if n_points == 1 {
        return vec![1.0];
    }
    let steps = n_points - 1;
    let last = horizon - (steps - 1) as f64 * dt;
    let mut w = vec![dt; n_points];
    w[0] = 0.5 * dt;
    w[steps] = 0.5 * last;
    if steps == 1 {
        w[0] = 0.5 * last;
    } else {
        w[steps - 1] = 0.5 * (dt + last);
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// The occupation measure `μ_T = (1/T) ∫_0^T δ_{X_t} dt`, discretised with
/// the trapezoid rule on the simulation grid.
pub fn occupation_measure(path: &DiffusionPath) -> Result<DiscreteMeasure> {
    if path.is_empty() {
        return invalid("empty path");
    }
    let w = occupation_weights(path.len(), path.dt, path.horizon);
    DiscreteMeasure::from_flat(path.manifold, path.coords.clone(), w)
}

/// Like [`occupation_measure`] but reuses the path storage.
pub fn into_occupation_measure(path: DiffusionPath) -> Result<DiscreteMeasure> {
    if path.is_empty() {
        return invalid("empty path");
    }
    let w = occupation_weights(path.len(), path.dt, path.horizon);
    DiscreteMeasure::from_flat(path.manifold, path.coords, w)
}

/// Decomposition of a discretised Girsanov log-likelihood ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GirsanovTerms {
    /// `Σ ⟨Δb, ΔW⟩/√2`, a martingale under the law of `p`.
    pub martingale: f64,
    /// `¼ Σ |Δb|² Δt`.
    pub compensator: f64,
    /// Largest normal component of a reconstructed increment.
    pub max_normal_residual: f64,
}

impl GirsanovTerms {
    pub fn total(&self) -> f64 {
        self.martingale + self.compensator
    }
}

/// `log dP_p/dP_q` along a Langevin path simulated under `p`, restricted to
/// the steps `[start, end)`.
pub fn girsanov_log_ratio_range(
    path: &DiffusionPath,
    p: &Density,
    q: &Density,
    start: usize,
    end: usize,
) -> Result<GirsanovTerms> {
    if p.manifold() != path.manifold() || q.manifold() != path.manifold() {
        return Err(Error::ManifoldMismatch(
            "densities and path live on different manifolds".into(),
        ));
    }
    if start > end || end + 1 > path.len() {
        return invalid(format!(
            "step range {start}..{end} outside path with {} steps",
            path.len() - 1
        ));
    }
    let m = path.manifold;
    let d = m.intrinsic_dim();
    let mut gp = vec![0.0; d];
    let mut gq = vec![0.0; d];
    let mut inc = vec![0.0; d];
    let mut out = GirsanovTerms::default();
    let root2 = std::f64::consts::SQRT_2;
    for i in start..end {
        let x = path.coords(i);
        let y = path.coords(i + 1);
        let h = path.time(i + 1) - path.time(i);
        match m {
            Manifold::Sphere { .. } => {
                let v = m.log_map(&m.point(x)?, &m.point(y)?)?;
                let basis = m.tangent_basis_at(x);
                let mut residual: Vec<f64> = v.to_vec();
                for (k, b) in basis.iter().enumerate() {
                    let c: f64 = b.iter().zip(v.iter()).map(|(a, c)| a * c).sum();
                    inc[k] = c;
                    for (r, bi) in residual.iter_mut().zip(b.iter()) {
                        *r -= c * bi;
                    }
                }
                let normal = residual.iter().map(|r| r * r).sum::<f64>().sqrt();
                out.max_normal_residual = out.max_normal_residual.max(normal);
            }
            _ => {
                let s = m.flat_period().unwrap_or(1.0);
                for k in 0..d {
                    inc[k] = wrapped_diff(x[k], y[k], s);
                }
            }
        }
        p.grad_log_at(x, &mut gp);
        q.grad_log_at(x, &mut gq);
        let mut mart = 0.0;
        let mut comp = 0.0;
        for k in 0..d {
            let db = gp[k] - gq[k];
            let dw = (inc[k] - gp[k] * h) / root2;
            mart += db * dw;
            comp += db * db;
        }
        out.martingale += mart / root2;
        out.compensator += 0.25 * comp * h;
    }
    Ok(out)
}

pub fn girsanov_log_ratio(path: &DiffusionPath, p: &Density, q: &Density) -> Result<GirsanovTerms> {
    girsanov_log_ratio_range(path, p, q, 0, path.len() - 1)
}

/// Draws an initial point according to `initial` (exposed for tests).
pub fn draw_initial<R: Rng + ?Sized>(
    gen: &GeneratorSpec,
    initial: &Initial,
    rng: &mut R,
) -> Vec<f64> {
    let mut x = Vec::new();
    match initial {
        Initial::Point(p) => x.extend_from_slice(p.intrinsic()),
        Initial::Invariant => {
            gen.density().sample_into(rng, &mut x);
        }
        Initial::Uniform => gen.manifold().sample_uniform_into(rng, &mut x),
    }
    x
}

/// Writes a path as CSV: `#`-prefixed `key=value` header lines giving the
/// manifold, generator, `dt`, `T` and seed, one column-name row, then one row
/// of intrinsic coordinates per stored point.
pub fn write_path_csv<W: std::io::Write>(path: &DiffusionPath, mut out: W) -> Result<()> {
    let io = |e: std::io::Error| Error::InvalidInput(format!("writing path: {e}"));
    writeln!(out, "# manifold={}", path.manifold).map_err(io)?;
    writeln!(out, "# dt={}", path.dt).map_err(io)?;
    writeln!(out, "# T={}", path.horizon).map_err(io)?;
    writeln!(out, "# seed={}", path.seed).map_err(io)?;
    writeln!(out, "# provenance={}", path.provenance).map_err(io)?;
    let d = path.manifold.intrinsic_dim();
    let names: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    writeln!(out, "{}", names.join(",")).map_err(io)?;
    let mut line = String::new();
    for c in path.coords.chunks(d) {
        line.clear();
        for (k, v) in c.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&format!("{v}"));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Reads a path written by [`write_path_csv`].
pub fn read_path_csv<R: std::io::BufRead>(input: R) -> Result<DiffusionPath> {
    let mut header = std::collections::HashMap::new();
    let mut coords = Vec::new();
    let mut columns = None;
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::InvalidInput(format!("reading path: {e}")))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if columns.is_none() {
            columns = Some(line.split(',').count());
            continue;
        }
        let before = coords.len();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::InvalidInput(format!("line {}: '{field}' is not a number", lineno + 1))
            })?;
            coords.push(v);
        }
        if Some(coords.len() - before) != columns {
            return invalid(format!("line {}: wrong number of columns", lineno + 1));
        }
    }
    let get = |k: &str| {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("path header lacks '{k}'")))
    };
    let manifold: Manifold = get("manifold")?.parse()?;
    let num = |k: &str| -> Result<f64> {
        let v = get(k)?;
        v.parse()
            .map_err(|_| parse_err(&v, format!("'{k}' is not a number")))
    };
    let seed = get("seed")?;
    let seed: u64 = seed
        .parse()
        .map_err(|_| parse_err(&seed, "seed is not an integer"))?;
    let provenance = header.get("provenance").cloned().unwrap_or_default();
    if columns != Some(manifold.intrinsic_dim()) {
        return invalid(format!(
            "{manifold} needs {} columns",
            manifold.intrinsic_dim()
        ));
    }
    DiffusionPath::from_coords(manifold, coords, num("dt")?, num("T")?, seed, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn circle_cfg(density: &str, horizon: f64, dt: f64, seed: u64) -> SdeConfig {
        let m = Manifold::circle(1.0).unwrap();
        let p = make_density(m, &density.parse().unwrap()).unwrap();
        SdeConfig::new(
            GeneratorSpec::langevin(p),
            horizon,
            dt,
            Initial::Uniform,
            seed,
        )
    }

    #[test]
    fn occupation_weights_are_trapezoid() {
        let w = occupation_weights(3, 0.5, 1.0);
        assert_eq!(w, vec![0.25, 0.5, 0.25]);
        let w = occupation_weights(4, 0.4, 1.0);
        // Steps 0.4, 0.4, 0.2.
        let expect = [0.2, 0.4, 0.3, 0.1];
        for (a, b) in w.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_eq!(occupation_weights(1, 0.1, 0.1), vec![1.0]);
    }

    #[test]
    fn uniform_langevin_has_zero_drift() {
        let cfg = circle_cfg("uniform", 1.0, 0.01, 1);
        let mut drift = [7.0];
        let mut scratch = [0.0];
        let qv = cfg.generator.drift_at(&[0.3], &mut drift, &mut scratch);
        assert_eq!(qv, 1.0);
        assert_eq!(drift, [0.0]);
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = circle_cfg("trig:a1=0.5", 2.0, 0.01, 9);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.flat_coords(), b.flat_coords());
        assert_eq!(a.len(), 201);
        assert_eq!(a.time(200), 2.0);
    }

    #[test]
    fn non_integer_horizon_has_short_last_step() {
        let cfg = circle_cfg("uniform", 0.105, 0.01, 2);
        let p = simulate(&cfg).unwrap();
        assert_eq!(p.len(), 12);
        assert_abs_diff_eq!(p.time(11) - p.time(10), 0.005, epsilon = 1e-12);
    }

    #[test]
    fn girsanov_vanishes_for_equal_densities_and_is_additive() {
        let cfg = circle_cfg("trig:a1=0.3", 5.0, 0.01, 4);
        let path = simulate(&cfg).unwrap();
        let p = cfg.generator.density().clone();
        let g = girsanov_log_ratio(&path, &p, &p).unwrap();
        assert!(g.total().abs() <= 1e-10);
        let q = Density::uniform(*p.manifold());
        let n = path.len() - 1;
        let whole = girsanov_log_ratio(&path, &p, &q).unwrap().total();
        let a = girsanov_log_ratio_range(&path, &p, &q, 0, n / 2)
            .unwrap()
            .total();
        let b = girsanov_log_ratio_range(&path, &p, &q, n / 2, n)
            .unwrap()
            .total();
        assert_abs_diff_eq!(whole, a + b, epsilon = 1e-10);
    }

    #[test]
    fn generator_strings() {
        let m = Manifold::torus(2, 1.0).unwrap();
        let p = Density::uniform(m);
        let g = GeneratorSpec::parse("langevin", p.clone()).unwrap();
        assert_eq!(g.to_string(), "langevin");
        let g = GeneratorSpec::parse("apq:trig:a1=0.2@2", p.clone()).unwrap();
        assert_abs_diff_eq!(g.kappa_min(), 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(g.kappa_max(), 2.4, epsilon = 1e-12);
        assert!(GeneratorSpec::parse("brownian", p).is_err());
    }

    #[test]
    fn oversized_steps_are_subdivided() {
        // Step standard deviation √2 against an injectivity radius of 0.5,
        // so every step is redone on a finer mesh. The uniform law must
        // still be invariant: time averages of cos and sin vanish.
        let cfg = circle_cfg("uniform", 4000.0, 1.0, 3);
        let path = simulate(&cfg).unwrap();
        assert_eq!(path.len(), 4001);
        let n = path.len() as f64;
        let tau = std::f64::consts::TAU;
        let c: f64 = (0..path.len())
            .map(|i| (tau * path.coords(i)[0]).cos())
            .sum::<f64>()
            / n;
        let s: f64 = (0..path.len())
            .map(|i| (tau * path.coords(i)[0]).sin())
            .sum::<f64>()
            / n;
        assert!(c.abs() < 0.05 && s.abs() < 0.05, "({c}, {s})");
        assert_eq!(simulate(&cfg).unwrap().flat_coords(), path.flat_coords());
    }

    #[test]
    fn path_csv_round_trip() {
        let m = Manifold::torus(2, 1.0).unwrap();
        let gen = GeneratorSpec::langevin(Density::uniform(m));
        let path = simulate(&SdeConfig::new(gen, 0.05, 0.01, Initial::Uniform, 3)).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&path, &mut buf).unwrap();
        let back = read_path_csv(&buf[..]).unwrap();
        assert_eq!(back.flat_coords(), path.flat_coords());
        assert_eq!((back.dt(), back.horizon(), back.seed()), (0.01, 0.05, 3));
        assert_eq!(back.provenance(), path.provenance());
        let text = String::from_utf8(buf).unwrap().replace("x1,x2", "x1");
        assert!(read_path_csv(text.as_bytes()).is_err());
    }
}
