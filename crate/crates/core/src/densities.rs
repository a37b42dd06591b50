//! Target densities on the model manifolds, rejection sampling from them,
//! the bump families used for minimax lower bounds, and quadrature of the
//! path-space KL divergence between two Langevin diffusions.
//!
//! Densities are taken with respect to the (unnormalised) volume measure, so
//! the uniform density on a manifold of volume `V` equals `1/V`. Gradients
//! are returned as components in the orthonormal tangent frame of
//! [`Manifold::tangent_basis_at`] by the `_at` methods and as ambient vectors
//! by the point-based methods.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, parse_err, Error, Result};
use crate::geometry::{wrapped_diff, Manifold, ManifoldPoint, QuadratureGrid, Vector};
use crate::quad::{unit_sphere_area, CompositeRule};
use crate::seeding;
use crate::spec_string::{self, parse_int_tuple, parse_tuple};

/// One cosine term `amp · cos(2π⟨wave, x⟩/s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub wave: Vec<i32>,
    pub amp: f64,
}

/// Parsed form of a density description string such as `trig:a1=0.3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DensitySpec {
    Uniform,
    /// `1 + Σ a_k cos(2π⟨k, x⟩/s)`, normalised by the volume.
    Trig {
        terms: Vec<TrigTerm>,
    },
    /// `1 + β z/r` on the sphere of radius `r`, normalised by the area.
    SpherePoly {
        beta: f64,
    },
}

impl FromStr for DensitySpec {
    type Err = Error;

    /// Accepted forms: `uniform`; `trig:a1=0.5` (frequency 1 along the base
    /// direction, also `a2=…` etc.); `trig:a=(0.3,0.1)` (frequencies 1, 2, …);
    /// an optional `k=(k1,…,kd)` sets the base wave vector (default the first
    /// axis); `sphere_poly:beta=0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let spec = spec_string::split(s)?;
        match spec.name {
            "uniform" => {
                spec.only_keys(&[])?;
                Ok(DensitySpec::Uniform)
            }
            "sphere_poly" => {
                spec.only_keys(&["beta"])?;
                Ok(DensitySpec::SpherePoly {
                    beta: spec.f64("beta")?,
                })
            }
            "trig" => {
                let base = match spec.get("k") {
                    Some(v) => parse_int_tuple(s, v)?,
                    None => vec![1],
                };
                let mut terms = Vec::new();
                for (key, val) in &spec.args {
                    if *key == "k" {
                        continue;
                    }
                    if *key == "a" {
                        for (i, a) in parse_tuple(s, val)?.into_iter().enumerate() {
                            let n = i as i32 + 1;
                            terms.push(TrigTerm {
                                wave: base.iter().map(|b| b * n).collect(),
                                amp: a,
                            });
                        }
                    } else if let Some(num) = key.strip_prefix('a') {
                        let n: i32 = num
                            .parse()
                            .map_err(|_| parse_err(s, format!("unknown argument '{key}'")))?;
                        if n <= 0 {
                            return Err(parse_err(s, "frequencies must be positive"));
                        }
                        let a = spec_string::parse_f64(s, val)?;
                        terms.push(TrigTerm {
                            wave: base.iter().map(|b| b * n).collect(),
                            amp: a,
                        });
                    } else {
                        return Err(parse_err(s, format!("unknown argument '{key}'")));
                    }
                }
                if terms.is_empty() {
                    return Err(parse_err(s, "trig density needs at least one coefficient"));
                }
                Ok(DensitySpec::Trig { terms })
            }
            other => Err(parse_err(s, format!("unknown density kind '{other}'"))),
        }
    }
}

impl fmt::Display for DensitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensitySpec::Uniform => f.write_str("uniform"),
            DensitySpec::SpherePoly { beta } => write!(f, "sphere_poly:beta={beta}"),
            DensitySpec::Trig { terms } => write!(f, "trig:{}", trig_label(terms)),
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Uniform,
    Trig {
        freqs: Vec<(Vec<f64>, f64)>,
    },
    SpherePoly {
        beta: f64,
    },
    Bump {
        family: Arc<BumpFamily>,
        weights: Vec<f64>,
    },
}

/// A strictly positive density with analytic gradient of its logarithm.
#[derive(Clone, Debug)]
pub struct Density {
    manifold: Manifold,
    kind: Kind,
    label: String,
    inv_volume: f64,
    p_min: f64,
    p_max: f64,
    c1_norm: f64,
    sobolev_order: Option<u32>,
}

/// Weight in the path-space KL functional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlWeight {
    /// `∫ |∇ln p − ∇ln q|² p`.
    P,
    /// `∫ |∇ln p − ∇ln q|² p²`.
    PSquared,
}

impl fmt::Display for KlWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlWeight::P => "p",
            KlWeight::PSquared => "p_squared",
        })
    }
}

/// Instantiates a density from its parsed description.
pub fn make_density(manifold: Manifold, spec: &DensitySpec) -> Result<Density> {
    let inv_volume = 1.0 / manifold.total_volume();
    match spec {
        DensitySpec::Uniform => Ok(Density {
            manifold,
            kind: Kind::Uniform,
            label: spec.to_string(),
            inv_volume,
            p_min: inv_volume,
            p_max: inv_volume,
            c1_norm: inv_volume,
            sobolev_order: None,
        }),
        DensitySpec::Trig { terms } => {
            let s = manifold.flat_period().ok_or_else(|| {
                Error::InvalidInput("trig densities are defined on the circle and flat tori".into())
            })?;
            let d = manifold.intrinsic_dim();
            let mut freqs = Vec::with_capacity(terms.len());
            let mut abs_sum = 0.0;
            let mut grad_sum = 0.0;
            for t in terms {
                if !t.amp.is_finite() {
                    return invalid("non-finite trig amplitude");
                }
                let mut wave = t.wave.clone();
                if wave.len() < d {
                    wave.resize(d, 0);
                }
                if wave.len() != d {
                    return invalid(format!(
                        "wave vector {:?} has more than {d} entries",
                        t.wave
                    ));
                }
                if wave.iter().all(|&k| k == 0) {
                    return invalid("wave vector must be nonzero");
                }
                let omega: Vec<f64> = wave.iter().map(|&k| 2.0 * PI * k as f64 / s).collect();
                let om = omega.iter().map(|w| w * w).sum::<f64>().sqrt();
                abs_sum += t.amp.abs();
                grad_sum += t.amp.abs() * om;
                freqs.push((omega, t.amp));
            }
            if abs_sum >= 1.0 {
                return invalid(format!(
                    "trig density is not positive: Σ|a_k| = {abs_sum} ≥ 1"
                ));
            }
            let p_max = (1.0 + abs_sum) * inv_volume;
            Ok(Density {
                manifold,
                kind: Kind::Trig { freqs },
                label: spec.to_string(),
                inv_volume,
                p_min: (1.0 - abs_sum) * inv_volume,
                p_max,
                c1_norm: p_max.max(grad_sum * inv_volume),
                sobolev_order: None,
            })
        }
        DensitySpec::SpherePoly { beta } => {
            let Manifold::Sphere { radius } = manifold else {
                return invalid("sphere_poly densities are defined on the sphere");
            };
            if !(beta.abs() < 1.0) {
                return invalid(format!("sphere_poly needs |β| < 1, got {beta}"));
            }
            Ok(Density {
                manifold,
                kind: Kind::SpherePoly { beta: *beta },
                label: spec.to_string(),
                inv_volume,
                p_min: (1.0 - beta.abs()) * inv_volume,
                p_max: (1.0 + beta.abs()) * inv_volume,
                c1_norm: ((1.0 + beta.abs()) * inv_volume).max(beta.abs() * inv_volume / radius),
                sobolev_order: None,
            })
        }
    }
}

/// Canonical label; parseable whenever all wave vectors are positive
/// multiples of one base vector.
fn trig_label(terms: &[TrigTerm]) -> String {
    let base = common_base(terms);
    match base {
        Some((base, mults)) => {
            let mut parts: Vec<String> = terms
                .iter()
                .zip(&mults)
                .map(|(t, n)| format!("a{n}={}", t.amp))
                .collect();
            if base.iter().skip(1).any(|&k| k != 0) || base.first() != Some(&1) {
                let k: Vec<String> = base.iter().map(|w| w.to_string()).collect();
                parts.push(format!("k=({})", k.join(",")));
            }
            parts.join(",")
        }
        None => terms
            .iter()
            .map(|t| {
                let k: Vec<String> = t.wave.iter().map(|w| w.to_string()).collect();
                format!("{}*({})", t.amp, k.join(","))
            })
            .collect::<Vec<_>>()
            .join("+"),
    }
}

fn gcd(a: i32, b: i32) -> i32 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn common_base(terms: &[TrigTerm]) -> Option<(Vec<i32>, Vec<i32>)> {
    let first = &terms.first()?.wave;
    let g = first.iter().fold(0, |g, &k| gcd(g, k));
    if g == 0 {
        return None;
    }
    let base: Vec<i32> = first.iter().map(|k| k / g).collect();
    let lead = base.iter().position(|&k| k != 0)?;
    let mut mults = Vec::with_capacity(terms.len());
    for t in terms {
        let mut w = t.wave.clone();
        w.resize(base.len().max(w.len()), 0);
        let mut b = base.clone();
        b.resize(w.len(), 0);
        let n = w[lead] / b[lead];
        if n <= 0 || w.iter().zip(&b).any(|(wi, bi)| *wi != n * bi) {
            return None;
        }
        mults.push(n);
    }
    Some((base, mults))
}

impl Density {
    pub fn uniform(manifold: Manifold) -> Density {
        make_density(manifold, &DensitySpec::Uniform).expect("uniform density is always valid")
    }

    pub fn trig(manifold: Manifold, terms: Vec<TrigTerm>) -> Result<Density> {
        make_density(manifold, &DensitySpec::Trig { terms })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn c1_norm(&self) -> f64 {
        self.c1_norm
    }

    /// Sobolev smoothness used for bandwidth rules; `None` for analytic
    /// densities.
    pub fn sobolev_order(&self) -> Option<u32> {
        self.sobolev_order
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self.kind, Kind::Uniform)
    }

    /// Density value at intrinsic coordinates.
    pub fn eval_at(&self, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Uniform => self.inv_volume,
            Kind::Trig { freqs } => {
                let mut v = 1.0;
                for (omega, a) in freqs {
                    v += a * omega.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>().cos();
                }
                v * self.inv_volume
            }
            Kind::SpherePoly { beta } => (1.0 + beta * x[0].cos()) * self.inv_volume,
            Kind::Bump { family, weights } => {
                (1.0 + family.weighted_sum(weights, x, None)) * self.inv_volume
            }
        }
    }

    /// Gradient of `ln p` at intrinsic coordinates, as frame components.
    pub fn grad_log_at(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Uniform => out.iter_mut().for_each(|o| *o = 0.0),
            Kind::Trig { freqs } => {
                let mut v = 1.0;
                out.iter_mut().for_each(|o| *o = 0.0);
                for (omega, a) in freqs {
                    let (sn, cs) = omega
                        .iter()
                        .zip(x)
                        .map(|(w, xi)| w * xi)
                        .sum::<f64>()
                        .sin_cos();
                    v += a * cs;
                    for (o, w) in out.iter_mut().zip(omega) {
                        *o -= a * w * sn;
                    }
                }
                out.iter_mut().for_each(|o| *o /= v);
            }
            Kind::SpherePoly { beta } => {
                let Manifold::Sphere { radius } = self.manifold else {
                    unreachable!()
                };
                let (st, ct) = x[0].sin_cos();
                out[0] = -beta * st / (radius * (1.0 + beta * ct));
                out[1] = 0.0;
            }
            Kind::Bump { family, weights } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let v = 1.0 + family.weighted_sum(weights, x, Some(out));
                out.iter_mut().for_each(|o| *o /= v);
            }
        }
    }

    pub fn eval(&self, x: &ManifoldPoint) -> Result<f64> {
        self.manifold.check_point(x)?;
        Ok(self.eval_at(x.intrinsic()))
    }

    /// Gradient of `ln p` as an ambient tangent vector.
    pub fn grad_log(&self, x: &ManifoldPoint) -> Result<Vector> {
        self.manifold.check_point(x)?;
        let d = self.manifold.intrinsic_dim();
        let mut comps = vec![0.0; d];
        self.grad_log_at(x.intrinsic(), &mut comps);
        let basis = self.manifold.tangent_basis_at(x.intrinsic());
        let mut out: Vector = smallvec::SmallVec::from_elem(0.0, self.manifold.ambient_dim());
        for (c, b) in comps.iter().zip(&basis) {
            for (o, bi) in out.iter_mut().zip(b.iter()) {
                *o += c * bi;
            }
        }
        Ok(out)
    }

    /// Grid resolution used for normalisation checks and KL quadrature.
    pub fn reference_grid(&self) -> Result<QuadratureGrid> {
        reference_grid(&self.manifold)
    }

    /// Draws one point by rejection against the uniform envelope, appending
    /// intrinsic coordinates; returns the number of proposals used.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) -> u64 {
        let start = out.len();
        let mut proposals = 0;
        loop {
            proposals += 1;
            out.truncate(start);
            self.manifold.sample_uniform_into(rng, out);
            if self.is_uniform() {
                return proposals;
            }
            let u: f64 = rng.gen();
            if u * self.p_max <= self.eval_at(&out[start..]) {
                return proposals;
            }
        }
    }
}

/// A reference grid fine enough for the smooth densities used here.
pub fn reference_grid(m: &Manifold) -> Result<QuadratureGrid> {
    let res = match *m {
        Manifold::Circle { .. } => 4096,
        Manifold::Sphere { .. } => 256,
        Manifold::FlatTorus { dim, .. } => match dim {
            1 => 4096,
            2 => 256,
            3 => 64,
            4 => 24,
            _ => ((2e6f64).powf(1.0 / dim as f64).floor() as usize).max(4),
        },
    };
    m.quadrature_grid(res)
}

/// Result of drawing i.i.d. samples from a density.
#[derive(Clone, Debug)]
pub struct Samples {
    pub points: Vec<ManifoldPoint>,
    pub proposals: u64,
}

/// `n` i.i.d. draws from `p dvol`, exact by rejection sampling.
pub fn sample_mu(density: &Density, n: usize, seed: u64) -> Vec<ManifoldPoint> {
    sample_mu_with_stats(density, n, seed).points
}

pub fn sample_mu_with_stats(density: &Density, n: usize, seed: u64) -> Samples {
    let mut rng = seeding::rng(seed);
    let d = density.manifold.intrinsic_dim();
    let mut buf = Vec::with_capacity(d);
    let mut proposals = 0;
    let points = (0..n)
        .map(|_| {
            buf.clear();
            proposals += density.sample_into(&mut rng, &mut buf);
            density
                .manifold
                .point(&buf)
                .expect("sampled coordinates are valid")
        })
        .collect();
    Samples { points, proposals }
}

/// Flat-coordinate variant used by the transport protocol.
pub fn sample_mu_coords<R: Rng + ?Sized>(density: &Density, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * density.manifold.intrinsic_dim());
    for _ in 0..n {
        density.sample_into(rng, &mut out);
    }
    out
}

/// `T/4 · ∫ |∇ln p − ∇ln q|² w dvol` on the reference grid.
pub fn kl_quadrature(p: &Density, q: &Density, horizon: f64, weight: KlWeight) -> Result<f64> {
    let grid = p.reference_grid()?;
    kl_quadrature_on(p, q, horizon, weight, &grid)
}

pub fn kl_quadrature_on(
    p: &Density,
    q: &Density,
    horizon: f64,
    weight: KlWeight,
    grid: &QuadratureGrid,
) -> Result<f64> {
    if p.manifold != q.manifold || *grid.manifold() != p.manifold {
        return Err(Error::ManifoldMismatch(format!(
            "KL between densities on {} and {} (grid on {})",
            p.manifold,
            q.manifold,
            grid.manifold()
        )));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return invalid("time horizon must be finite and nonnegative");
    }
    let d = p.manifold.intrinsic_dim();
    let mut gp = vec![0.0; d];
    let mut gq = vec![0.0; d];
    let mut acc = 0.0;
    for (j, w) in grid.weights().iter().enumerate() {
        let x = grid.coords(j);
        p.grad_log_at(x, &mut gp);
        q.grad_log_at(x, &mut gq);
        let diff: f64 = gp.iter().zip(&gq).map(|(a, b)| (a - b) * (a - b)).sum();
        let pv = p.eval_at(x);
        let wt = match weight {
            KlWeight::P => pv,
            KlWeight::PSquared => pv * pv,
        };
        acc += w * diff * wt;
    }
    Ok(0.25 * horizon * acc)
}

// ---------------------------------------------------------------------------
// Bump families

/// Smooth transition from 0 (u ≤ 0) to 1 (u ≥ 1) built from `exp(-1/u)`,
/// with its first derivative.
fn smooth_step(u: f64) -> (f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0);
    }
    if u >= 1.0 {
        return (1.0, 0.0);
    }
    let f = |t: f64| (-1.0 / t).exp();
    let (a, b) = (f(u), f(1.0 - u));
    let (da, db) = (a / (u * u), b / ((1.0 - u) * (1.0 - u)));
    let s = a + b;
    (a / s, (da * b + a * db) / (s * s))
}

/// The radial mother profile: equal to one on `[0, 1/6]`, a negative ring
/// on `[0.21, 0.5]` weighted so the `d`-dimensional integral vanishes, and
/// zero beyond `1/2`.
#[derive(Clone, Debug)]
pub struct MotherBump {
    dim: usize,
    ring_weight: f64,
}

const CORE_FLAT: f64 = 1.0 / 6.0;
const CORE_END: f64 = 0.21;
const RING_TOP: f64 = 0.27;
const RING_FALL: f64 = 0.45;
const SUPPORT: f64 = 0.5;

impl MotherBump {
    pub fn new(dim: usize) -> Self {
        let rule = radial_rule();
        let r = |t: f64| t.powi(dim as i32 - 1);
        let core = rule.integrate(|t| Self::core(t).0 * r(t));
        let ring = rule.integrate(|t| Self::ring(t).0 * r(t));
        MotherBump {
            dim,
            ring_weight: core / ring,
        }
    }

    fn core(t: f64) -> (f64, f64) {
        let w = CORE_END - CORE_FLAT;
        let (s, ds) = smooth_step((t - CORE_FLAT) / w);
        (1.0 - s, -ds / w)
    }

    fn ring(t: f64) -> (f64, f64) {
        let w1 = RING_TOP - CORE_END;
        let w2 = SUPPORT - RING_FALL;
        let (a, da) = smooth_step((t - CORE_END) / w1);
        let (b, db) = smooth_step((t - RING_FALL) / w2);
        (a * (1.0 - b), da / w1 * (1.0 - b) - a * db / w2)
    }

    /// Profile value and radial derivative.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        if t >= SUPPORT {
            return (0.0, 0.0);
        }
        let (c, dc) = Self::core(t);
        let (r, dr) = Self::ring(t);
        (c - self.ring_weight * r, dc - self.ring_weight * dr)
    }

    pub fn ring_weight(&self) -> f64 {
        self.ring_weight
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

fn radial_rule() -> CompositeRule {
    // Panel edges line up with the breakpoints of the profile.
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    let edges = [0.0, CORE_FLAT, CORE_END, RING_TOP, RING_FALL, SUPPORT];
    for w in edges.windows(2) {
        let r = CompositeRule::new(w[0], w[1], 64, 16);
        nodes.extend(r.nodes);
        weights.extend(r.weights);
    }
    CompositeRule { nodes, weights }
}

/// A family of zero-mean bumps with disjoint supports on a flat manifold.
#[derive(Clone, Debug)]
pub struct BumpFamily {
    manifold: Manifold,
    epsilon: f64,
    order: u32,
    amplitude: f64,
    kappa: f64,
    scale: f64,
    mother: MotherBump,
    centers: Vec<f64>,
}

impl BumpFamily {
    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn len(&self) -> usize {
        self.centers.len() / self.manifold.intrinsic_dim()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn center(&self, j: usize) -> ManifoldPoint {
        let d = self.manifold.intrinsic_dim();
        self.manifold
            .point(&self.centers[j * d..(j + 1) * d])
            .expect("centers are valid")
    }

    pub fn centers(&self) -> Vec<ManifoldPoint> {
        (0..self.len()).map(|j| self.center(j)).collect()
    }

    pub fn mother(&self) -> &MotherBump {
        &self.mother
    }

    /// Value of bump `j` at intrinsic coordinates.
    pub fn bump_at(&self, j: usize, x: &[f64]) -> f64 {
        let d = self.manifold.intrinsic_dim();
        let c = &self.centers[j * d..(j + 1) * d];
        let r = self.manifold.intrinsic_geodesic(c, x);
        self.scale * self.mother.eval(r / self.epsilon).0
    }

    /// `Σ_j w_j φ_j(x)`, optionally accumulating its gradient (frame
    /// components) into `grad`.
    fn weighted_sum(&self, weights: &[f64], x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let d = self.manifold.intrinsic_dim();
        let s = self
            .manifold
            .flat_period()
            .expect("bump families live on flat manifolds");
        let reach = SUPPORT * self.epsilon;
        let mut acc = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let c = &self.centers[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            let mut far = false;
            for k in 0..d {
                let dk = wrapped_diff(c[k], x[k], s);
                if dk.abs() >= reach {
                    far = true;
                    break;
                }
                r2 += dk * dk;
            }
            if far || r2 >= reach * reach {
                continue;
            }
            let r = r2.sqrt();
            let (v, dv) = self.mother.eval(r / self.epsilon);
            acc += w * self.scale * v;
            if let Some(g) = grad.as_deref_mut() {
                if r > 0.0 {
                    let coef = w * self.scale * dv / (self.epsilon * r);
                    for k in 0..d {
                        g[k] += coef * wrapped_diff(c[k], x[k], s);
                    }
                }
            }
        }
        acc
    }

    /// The density `p_τ = (1 + v/(2κ) Σ τ_j φ_j)/V`.
    pub fn member(self: &Arc<Self>, signs: &[i8]) -> Result<Density> {
        if signs.len() != self.len() {
            return invalid(format!(
                "expected {} signs, got {}",
                self.len(),
                signs.len()
            ));
        }
        if signs.iter().any(|&t| t != 1 && t != -1) {
            return invalid("signs must be ±1");
        }
        let coef = self.amplitude / (2.0 * self.kappa);
        let weights: Vec<f64> = signs.iter().map(|&t| coef * t as f64).collect();
        let inv_volume = 1.0 / self.manifold.total_volume();
        let sup = self.scale * 1.0f64.max(self.mother.ring_weight);
        let dev = coef * sup;
        let label: String = signs
            .iter()
            .map(|&t| if t > 0 { '+' } else { '-' })
            .collect();
        Ok(Density {
            manifold: self.manifold,
            kind: Kind::Bump {
                family: Arc::clone(self),
                weights,
            },
            label: format!("bump:eps={},signs={label}", self.epsilon),
            inv_volume,
            p_min: (1.0 - dev) * inv_volume,
            p_max: (1.0 + dev) * inv_volume,
            c1_norm: (1.0 + dev).max(coef * self.kappa / self.epsilon) * inv_volume,
            sobolev_order: Some(self.order),
        })
    }
}

/// Builds a bump family with centers at pairwise geodesic distance at least
/// `2ε`, placed by a first-fit scan of a fine product grid in lexicographic
/// order. Bumps are scaled so that `∫ φ_j² = ε^d`.
pub fn make_bump_family(
    manifold: Manifold,
    epsilon: f64,
    order: u32,
    amplitude: f64,
) -> Result<Arc<BumpFamily>> {
    let s = manifold.flat_period().ok_or_else(|| {
        Error::InvalidInput("bump families are available on the circle and flat tori".into())
    })?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return invalid("ε must be positive");
    }
    if epsilon > s / 4.0 {
        return invalid(format!(
            "ε = {epsilon} is too large to place two bumps (limit s/4 = {})",
            s / 4.0
        ));
    }
    let eps_l = epsilon.powi(order as i32);
    if !(0.0..=eps_l * (1.0 + 1e-12)).contains(&amplitude) {
        return invalid(format!("amplitude must lie in [0, ε^ℓ] = [0, {eps_l}]"));
    }
    let d = manifold.intrinsic_dim();
    let per_axis = ((20.0 * s / epsilon).ceil() as usize).max(8);
    let candidates = (per_axis as f64).powi(d as i32);
    if candidates > 2e7 {
        return Err(Error::TooLarge(format!(
            "packing grid with {per_axis}^{d} candidates; use a larger ε or lower dimension"
        )));
    }
    let grid = manifold.quadrature_grid(per_axis)?;
    let min_sep = 2.0 * epsilon * (1.0 - 1e-9);
    let mut centers: Vec<f64> = Vec::new();
    for j in 0..grid.len() {
        let x = grid.coords(j);
        let ok = centers
            .chunks(d)
            .all(|c| manifold.intrinsic_geodesic(c, x) >= min_sep);
        if ok {
            centers.extend_from_slice(x);
        }
    }
    if centers.len() / d < 2 {
        return invalid("ε too large: fewer than two centers fit");
    }
    let mother = MotherBump::new(d);
    let rule = radial_rule();
    let l2 =
        unit_sphere_area(d) * rule.integrate(|t| mother.eval(t).0.powi(2) * t.powi(d as i32 - 1));
    let scale = 1.0 / l2.sqrt();
    let kappa = scale * profile_derivative_bound(&mother, order);
    Ok(Arc::new(BumpFamily {
        manifold,
        epsilon,
        order,
        amplitude,
        kappa,
        scale,
        mother,
        centers,
    }))
}

/// `max_{i ≤ ℓ}` of the sup norm of the `i`-th derivative of the radial
/// profile, measured by finite differences on a fine grid. For `i ≥ 2` the
/// radial term `φ'(t)/t` of the Hessian is included as well.
fn profile_derivative_bound(mother: &MotherBump, order: u32) -> f64 {
    let n = 20_000usize;
    let h = SUPPORT / n as f64;
    let mut vals: Vec<f64> = (0..=n + 8).map(|i| mother.eval(i as f64 * h).0).collect();
    let mut best = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut derivative_one = 0.0f64;
    let mut over_t = 0.0f64;
    for i in 1..=n {
        let t = i as f64 * h;
        let (_, dv) = mother.eval(t);
        derivative_one = derivative_one.max(dv.abs());
        over_t = over_t.max((dv / t).abs());
    }
    if order >= 1 {
        best = best.max(derivative_one);
    }
    if order >= 2 {
        best = best.max(over_t);
    }
    for k in 1..=order as usize {
        let next: Vec<f64> = vals.windows(2).map(|w| (w[1] - w[0]) / h).collect();
        vals = next;
        if k >= 2 {
            let sup = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            best = best.max(sup);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn circle() -> Manifold {
        Manifold::circle(1.0).unwrap()
    }

    #[test]
    fn documented_examples() {
        let t2 = Manifold::torus(2, 1.0).unwrap();
        let u = make_density(t2, &DensitySpec::Uniform).unwrap();
        assert_eq!(u.p_min(), 1.0);
        assert_eq!(u.p_max(), 1.0);
        let mut g = [1.0, 1.0];
        u.grad_log_at(&[0.3, 0.4], &mut g);
        assert_eq!(g, [0.0, 0.0]);

        let p = make_density(circle(), &"trig:a1=0.5".parse().unwrap()).unwrap();
        assert_eq!(p.p_min(), 0.5);
        assert_eq!(p.p_max(), 1.5);

        let s = Manifold::sphere(1.0).unwrap();
        let sp = make_density(s, &"sphere_poly:beta=0.5".parse().unwrap()).unwrap();
        let grid = s.quadrature_grid(256).unwrap();
        let vals: Vec<f64> = (0..grid.len())
            .map(|j| sp.eval_at(grid.coords(j)))
            .collect();
        assert_abs_diff_eq!(grid.integrate(&vals), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(
            sp.eval_at(&[PI / 2.0, 0.3]),
            1.0 / (4.0 * PI),
            epsilon = 1e-15
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(make_density(circle(), &"trig:a=(0.6,0.4)".parse().unwrap()).is_err());
        assert!(make_density(circle(), &"sphere_poly:beta=0.1".parse().unwrap()).is_err());
        let s = Manifold::sphere(1.0).unwrap();
        assert!(make_density(s, &"sphere_poly:beta=1.0".parse().unwrap()).is_err());
        assert!(make_density(s, &"trig:a1=0.1".parse().unwrap()).is_err());
        assert!("trig".parse::<DensitySpec>().is_err());
        assert!("trig:b1=0.3".parse::<DensitySpec>().is_err());
        assert!("gauss:s=1".parse::<DensitySpec>().is_err());
    }

    #[test]
    fn spec_parsing_forms() {
        let a: DensitySpec = "trig:a=(0.3,0.1)".parse().unwrap();
        assert_eq!(
            a,
            DensitySpec::Trig {
                terms: vec![
                    TrigTerm {
                        wave: vec![1],
                        amp: 0.3
                    },
                    TrigTerm {
                        wave: vec![2],
                        amp: 0.1
                    }
                ]
            }
        );
        let b: DensitySpec = "trig:a1=0.2,k=(0,1)".parse().unwrap();
        assert_eq!(
            b,
            DensitySpec::Trig {
                terms: vec![TrigTerm {
                    wave: vec![0, 1],
                    amp: 0.2
                }]
            }
        );
    }

    #[test]
    fn kl_closed_form_on_circle() {
        // For p = 1 + a cos(2πx) on the unit circle and uniform q:
        // ∫ sin²(2πx)/(1 + a cos(2πx)) dx = (1 − √(1 − a²))/a².
        let a: f64 = 0.3;
        let p = make_density(circle(), &"trig:a1=0.3".parse().unwrap()).unwrap();
        let q = Density::uniform(circle());
        let pref = 0.25 * (2.0 * PI * a).powi(2);
        let p_mode = pref * (1.0 - (1.0 - a * a).sqrt()) / (a * a);
        let p2_mode = pref * 0.5;
        assert_abs_diff_eq!(
            kl_quadrature(&p, &q, 1.0, KlWeight::P).unwrap(),
            p_mode,
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(
            kl_quadrature(&p, &q, 1.0, KlWeight::PSquared).unwrap(),
            p2_mode,
            epsilon = 1e-10
        );
        let ten = kl_quadrature(&p, &q, 10.0, KlWeight::P).unwrap();
        assert_abs_diff_eq!(ten, 10.0 * p_mode, epsilon = 1e-9);
        assert_eq!(kl_quadrature(&p, &p, 1.0, KlWeight::P).unwrap(), 0.0);
    }

    #[test]
    fn mother_bump_shape() {
        for d in 1..=3 {
            let m = MotherBump::new(d);
            assert_eq!(m.eval(0.0).0, 1.0);
            assert_eq!(m.eval(CORE_FLAT).0, 1.0);
            assert_eq!(m.eval(SUPPORT).0, 0.0);
            assert!(
                m.ring_weight() > 0.0 && m.ring_weight() <= 1.0,
                "d={d}: {}",
                m.ring_weight()
            );
            // Derivative agrees with finite differences.
            for t in [0.18, 0.2, 0.23, 0.3, 0.46, 0.49] {
                let h = 1e-6;
                let fd = (m.eval(t + h).0 - m.eval(t - h).0) / (2.0 * h);
                assert_abs_diff_eq!(m.eval(t).1, fd, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn circle_packing_example() {
        let t = Manifold::torus(1, 1.0).unwrap();
        let fam = make_bump_family(t, 0.1, 2, 0.01).unwrap();
        assert_eq!(fam.len(), 5);
        let c: Vec<f64> = fam.centers().iter().map(|p| p.intrinsic()[0]).collect();
        for (i, x) in c.iter().enumerate() {
            assert_abs_diff_eq!(*x, 0.2 * i as f64, epsilon = 1e-12);
        }
        assert!(make_bump_family(t, 0.3, 2, 0.0).is_err());
        assert!(make_bump_family(t, 0.1, 2, 0.5).is_err());
        assert!(make_bump_family(Manifold::sphere(1.0).unwrap(), 0.1, 2, 0.0).is_err());
    }
}
