//! Radial kernel profiles of prescribed order and their normalisation on a
//! manifold.
//!
//! A profile is a function `K` on `[0, 1]`, extended by zero, such that
//! `u ↦ K(‖u‖)` integrates to one over `R^d`. Profiles of order `r` in
//! addition have vanishing moments `∫ K(‖u‖) u^β du = 0` for
//! `1 ≤ |β| < r`; by radial symmetry only the even radial moments
//! `∫ K(‖u‖)‖u‖^{2k} du`, `1 ≤ k < r/2`, need to be enforced. The
//! polynomial family uses `(Σ_j c_j t^{2j}) (1 − t²)^e` with `e = max(2, r+1)`
//! so that the kernel is `C^r` across the boundary of its support.
//!
//! On a manifold the kernel is `K_h(x, y) = K(dist(x, y)/h) / η_h(x)` with
//! `η_h(x) = ∫ K(dist(x, y)/h) dy`. All three model manifolds are
//! homogeneous (their isometry groups act transitively), so `η_h` does not
//! depend on `x`; it is computed once in normal coordinates at a base point.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, parse_err, Error, Result};
use crate::geometry::{DistanceMode, Manifold, ManifoldPoint, QuadratureGrid};
use crate::quad::{beta_poly_moment, gauss_legendre, unit_sphere_area, CompositeRule};
use crate::spec_string;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    /// `c (1 − t)`.
    Triangular,
    /// `c (1 − t²)`.
    Epanechnikov,
    /// Polynomial kernel of the given even order.
    Poly { order: u32 },
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = spec_string::split(s)?;
        match spec.name {
            "triangular" => {
                spec.only_keys(&[])?;
                Ok(KernelFamily::Triangular)
            }
            "epanechnikov" | "epanechnikov_like" => {
                spec.only_keys(&[])?;
                Ok(KernelFamily::Epanechnikov)
            }
            "poly" => {
                spec.only_keys(&["r"])?;
                Ok(KernelFamily::Poly {
                    order: spec.usize("r")? as u32,
                })
            }
            other => Err(parse_err(s, format!("unknown kernel '{other}'"))),
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelFamily::Triangular => f.write_str("triangular"),
            KernelFamily::Epanechnikov => f.write_str("epanechnikov"),
            KernelFamily::Poly { order } => write!(f, "poly:r={order}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
enum Envelope {
    OneMinusT,
    OneMinusT2 { power: u32 },
}

/// A radial kernel profile for a fixed ambient dimension `d` of the
/// integration variable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelProfile {
    family: KernelFamily,
    dim: usize,
    coeffs: Vec<f64>,
    envelope: Envelope,
    order: u32,
    smoothness: u32,
    lipschitz: f64,
    sup_norm: f64,
    nonneg: bool,
}

/// Builds a profile of the given family for integration over `R^d`.
pub fn make_profile(family: KernelFamily, dim: usize) -> Result<KernelProfile> {
    if !(1..=6).contains(&dim) {
        return invalid(format!("kernel dimension must be in 1..=6, got {dim}"));
    }
    let area = unit_sphere_area(dim);
    let d = dim as f64;
    let (coeffs, envelope, order, smoothness) = match family {
        KernelFamily::Triangular => {
            // ∫_0^1 (1 − t) t^{d−1} dt = 1/(d(d+1)).
            (vec![d * (d + 1.0) / area], Envelope::OneMinusT, 2, 0)
        }
        KernelFamily::Epanechnikov => (
            vec![1.0 / (area * beta_poly_moment(d - 1.0, 1))],
            Envelope::OneMinusT2 { power: 1 },
            2,
            0,
        ),
        KernelFamily::Poly { order } => {
            if order == 0 || order % 2 != 0 || order > 8 {
                return invalid(format!(
                    "polynomial kernel order must be even in 2..=8, got {order}"
                ));
            }
            let power = (order + 1).max(2);
            let m = (order / 2) as usize;
            // Row k: Σ_j c_j area ∫ t^{d−1+2j+2k}(1−t²)^e dt = δ_{k0}.
            let mut a = DMatrix::<f64>::zeros(m, m);
            for k in 0..m {
                for j in 0..m {
                    a[(k, j)] = area * beta_poly_moment(d - 1.0 + 2.0 * (j + k) as f64, power);
                }
            }
            let mut rhs = DVector::<f64>::zeros(m);
            rhs[0] = 1.0;
            let lu = a.clone().lu();
            let sol = lu.solve(&rhs).ok_or_else(|| {
                Error::Construction(format!(
                    "singular moment system for order {order} in d={dim}"
                ))
            })?;
            let resid = (&a * &sol - &rhs).amax();
            if !resid.is_finite() || resid > 1e-9 {
                return Err(Error::Construction(format!(
                    "moment system for order {order} in d={dim} is ill-conditioned (residual {resid:.2e})"
                )));
            }
            (
                sol.iter().copied().collect(),
                Envelope::OneMinusT2 { power },
                order,
                power - 1,
            )
        }
    };
    let mut profile = KernelProfile {
        family,
        dim,
        coeffs,
        envelope,
        order,
        smoothness,
        lipschitz: 0.0,
        sup_norm: 0.0,
        nonneg: true,
    };
    profile.measure_constants();
    Ok(profile)
}

impl KernelProfile {
    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Moment order: all moments of degree `1..order` vanish.
    pub fn order(&self) -> u32 {
        self.order
    }

    /// The profile is `C^k` on `[0, ∞)` for this `k`.
    pub fn smoothness(&self) -> u32 {
        self.smoothness
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn nonneg(&self) -> bool {
        self.nonneg
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// Exponent `e` of the `(1 − t²)^e` envelope, or `None` for the
    /// triangular profile.
    pub fn envelope_power(&self) -> Option<u32> {
        match self.envelope {
            Envelope::OneMinusT => None,
            Envelope::OneMinusT2 { power } => Some(power),
        }
    }

    #[inline]
    fn poly(&self, t2: f64) -> (f64, f64) {
        // Value and derivative with respect to t² of Σ c_j t^{2j}.
        let mut v = 0.0;
        let mut dv = 0.0;
        for c in self.coeffs.iter().rev() {
            dv = dv * t2 + v;
            v = v * t2 + c;
        }
        (v, dv)
    }

    /// `K(t)`, zero outside `[0, 1]`.
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        if !(0.0..1.0).contains(&t) {
            return 0.0;
        }
        match self.envelope {
            Envelope::OneMinusT => self.coeffs[0] * (1.0 - t),
            Envelope::OneMinusT2 { power } => {
                let t2 = t * t;
                self.poly(t2).0 * (1.0 - t2).powi(power as i32)
            }
        }
    }

    /// `K'(t)` (one-sided at the kinks of the non-smooth profiles).
    pub fn derivative(&self, t: f64) -> f64 {
        if !(0.0..1.0).contains(&t) {
            return 0.0;
        }
        match self.envelope {
            Envelope::OneMinusT => -self.coeffs[0],
            Envelope::OneMinusT2 { power } => {
                let t2 = t * t;
                let (p, dp) = self.poly(t2);
                let e = power as i32;
                let base = 1.0 - t2;
                2.0 * t * (dp * base.powi(e) - p * e as f64 * base.powi(e - 1))
            }
        }
    }

    /// `∫_{R^d} K(‖u‖) ‖u‖^{2k} du` in closed form.
    pub fn radial_moment(&self, k: u32) -> f64 {
        let area = unit_sphere_area(self.dim);
        let a = self.dim as f64 - 1.0 + 2.0 * k as f64;
        match self.envelope {
            Envelope::OneMinusT => area * self.coeffs[0] * (1.0 / (a + 1.0) - 1.0 / (a + 2.0)),
            Envelope::OneMinusT2 { power } => {
                area * self
                    .coeffs
                    .iter()
                    .enumerate()
                    .map(|(j, c)| c * beta_poly_moment(a + 2.0 * j as f64, power))
                    .sum::<f64>()
            }
        }
    }

    fn measure_constants(&mut self) {
        let n = 10_000;
        let mut sup = 0.0f64;
        let mut lip = 0.0f64;
        let mut min = f64::INFINITY;
        let mut prev = self.value(0.0);
        for i in 0..=n {
            let t = i as f64 / n as f64;
            let v = if i == n { 0.0 } else { self.value(t) };
            sup = sup.max(v.abs());
            min = min.min(v);
            lip = lip.max(self.derivative(t.min(1.0 - 1e-15)).abs());
            if i > 0 {
                lip = lip.max((v - prev).abs() * n as f64);
            }
            prev = v;
        }
        self.sup_norm = sup;
        self.lipschitz = lip;
        self.nonneg = min >= 0.0;
    }
}

impl fmt::Display for KernelProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.family)
    }
}

/// `K_h` on a manifold with its (constant) normaliser.
#[derive(Clone, Debug)]
pub struct NormalizedKernel {
    manifold: Manifold,
    profile: Arc<KernelProfile>,
    h: f64,
    mode: DistanceMode,
    eta: f64,
}

impl NormalizedKernel {
    pub fn new(
        manifold: Manifold,
        profile: Arc<KernelProfile>,
        h: f64,
        mode: DistanceMode,
    ) -> Result<Self> {
        if profile.dim != manifold.intrinsic_dim() {
            return Err(Error::ManifoldMismatch(format!(
                "kernel built for d={} used on {manifold}",
                profile.dim
            )));
        }
        if !(h > 0.0 && h.is_finite()) {
            return invalid(format!("bandwidth must be positive, got {h}"));
        }
        let inj = manifold.injectivity_radius();
        if h >= inj {
            return Err(Error::BandwidthTooLarge(format!(
                "h = {h} is not below the injectivity radius {inj}"
            )));
        }
        let eta = local_eta(&manifold, &profile, h, mode)?;
        if !(eta > 0.0) {
            return Err(Error::BandwidthTooLarge(format!(
                "normaliser η_h = {eta:.3e} is not positive at h = {h}"
            )));
        }
        Ok(NormalizedKernel {
            manifold,
            profile,
            h,
            mode,
            eta,
        })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn profile(&self) -> &KernelProfile {
        &self.profile
    }

    pub fn profile_arc(&self) -> Arc<KernelProfile> {
        Arc::clone(&self.profile)
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn mode(&self) -> DistanceMode {
        self.mode
    }

    /// `η_h`, identical at every point.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn eta_at(&self, x: &ManifoldPoint) -> Result<f64> {
        self.manifold.check_point(x)?;
        Ok(self.eta)
    }

    /// `η_h` at every node of a grid.
    pub fn eta_on_grid(&self, grid: &QuadratureGrid) -> Result<Vec<f64>> {
        if *grid.manifold() != self.manifold {
            return Err(Error::ManifoldMismatch(
                "grid and kernel manifolds differ".into(),
            ));
        }
        Ok(vec![self.eta; grid.len()])
    }

    /// `Σ_j w_j K(dist(x, node_j)/h)`: the grid quadrature of `η_h(x)`.
    pub fn eta_by_grid(&self, x: &[f64], grid: &QuadratureGrid) -> f64 {
        let mut acc = 0.0;
        let w = grid.weights();
        grid.for_each_in_box(x, self.box_half_width(), |j| {
            let r = self
                .manifold
                .intrinsic_distance(x, grid.coords(j), self.mode);
            acc += w[j] * self.profile.value(r / self.h);
        });
        acc
    }

    /// Unnormalised `K(dist(x, y)/h)` between intrinsic coordinates.
    #[inline]
    pub fn raw_at(&self, x: &[f64], y: &[f64]) -> f64 {
        let r = self.manifold.intrinsic_distance(x, y, self.mode);
        self.profile.value(r / self.h)
    }

    /// `K_h(x, y)` between intrinsic coordinates.
    #[inline]
    pub fn eval_at(&self, x: &[f64], y: &[f64]) -> f64 {
        self.raw_at(x, y) / self.eta
    }

    pub fn eval(&self, x: &ManifoldPoint, y: &ManifoldPoint) -> Result<f64> {
        let r = self.manifold.distance(x, y, self.mode)?;
        Ok(self.profile.value(r / self.h) / self.eta)
    }

    /// Half-width, per intrinsic coordinate, of a box containing the kernel
    /// support on the flat manifolds.
    pub fn box_half_width(&self) -> f64 {
        match (self.mode, self.manifold.flat_period()) {
            (DistanceMode::Geodesic, _) => self.h,
            (DistanceMode::Ambient, Some(s)) => {
                let a = std::f64::consts::PI * self.h / s;
                if a >= 1.0 {
                    0.5 * s
                } else {
                    s / std::f64::consts::PI * a.asin()
                }
            }
            (DistanceMode::Ambient, None) => self.h,
        }
    }

    /// Sup norm of `K_h`.
    pub fn sup_norm(&self) -> f64 {
        self.profile.sup_norm / self.eta
    }
}

/// `η_h` computed in normal coordinates around a base point.
pub fn local_eta(m: &Manifold, k: &KernelProfile, h: f64, mode: DistanceMode) -> Result<f64> {
    let d = m.intrinsic_dim();
    let area = unit_sphere_area(d);
    let radial = |upper: f64, f: &dyn Fn(f64) -> f64| -> f64 {
        CompositeRule::new(0.0, upper, 64, 20).integrate(f)
    };
    use std::f64::consts::PI;
    let eta = match (*m, mode) {
        (Manifold::Sphere { radius }, mode) => {
            let chord = |rho: f64| 2.0 * radius * (0.5 * rho / radius).sin();
            let upper = match mode {
                DistanceMode::Geodesic => h,
                DistanceMode::Ambient => {
                    if h >= 2.0 * radius {
                        PI * radius
                    } else {
                        2.0 * radius * (0.5 * h / radius).asin()
                    }
                }
            };
            let dist = |rho: f64| match mode {
                DistanceMode::Geodesic => rho,
                DistanceMode::Ambient => chord(rho),
            };
            2.0 * PI
                * radial(upper, &|rho| {
                    k.value(dist(rho) / h) * radius * (rho / radius).sin()
                })
        }
        (_, DistanceMode::Geodesic) => {
            h.powi(d as i32) * area * radial(1.0, &|t| k.value(t) * t.powi(d as i32 - 1))
        }
        (_, DistanceMode::Ambient) => {
            let s = m.flat_period().unwrap_or(1.0);
            if d == 1 {
                let a = PI * h / s;
                let upper = if a >= 1.0 { 0.5 * s } else { s / PI * a.asin() };
                2.0 * radial(upper, &|rho| k.value(s / PI * (PI * rho / s).sin() / h))
            } else {
                if PI * h >= s {
                    return Err(Error::BandwidthTooLarge(format!(
                        "ambient-mode kernel support wraps around the torus for h = {h} ≥ s/π"
                    )));
                }
                // Per-axis substitution w_i = (s/π) sin(π v_i/s) turns the
                // chord into a Euclidean norm with Jacobian Π(1 − (πw_i/s)²)^{-1/2}.
                let c = PI / s;
                let dirs = sphere_directions(d, 20);
                let rule = CompositeRule::new(0.0, h, 16, 20);
                let mut acc = 0.0;
                for (rho, wr) in rule.nodes.iter().zip(&rule.weights) {
                    let kv = k.value(rho / h) * rho.powi(d as i32 - 1);
                    if kv == 0.0 {
                        continue;
                    }
                    let mut ang = 0.0;
                    for (dir, wd) in &dirs {
                        let mut jac = 1.0;
                        for th in dir {
                            let x = c * rho * th;
                            jac /= (1.0 - x * x).sqrt();
                        }
                        ang += wd * jac;
                    }
                    acc += wr * kv * ang;
                }
                acc
            }
        }
    };
    Ok(eta)
}

/// Product quadrature on the unit sphere `S^{d-1}` in hyperspherical
/// coordinates; weights sum to its area.
pub fn sphere_directions(d: usize, n: usize) -> Vec<(Vec<f64>, f64)> {
    use std::f64::consts::PI;
    if d == 1 {
        return vec![(vec![1.0], 1.0), (vec![-1.0], 1.0)];
    }
    let (gx, gw) = gauss_legendre(n);
    let polar: Vec<(f64, f64)> = gx
        .iter()
        .zip(&gw)
        .map(|(x, w)| (0.5 * PI * (x + 1.0), 0.5 * PI * w))
        .collect();
    let n_az = 2 * n;
    let mut out = Vec::new();
    let mut angles = vec![0usize; d - 2];
    loop {
        let mut weight = 1.0;
        let mut prefix = Vec::with_capacity(d);
        let mut sin_prod = 1.0;
        for (k, &a) in angles.iter().enumerate() {
            let (phi, w) = polar[a];
            weight *= w * phi.sin().powi((d - 2 - k) as i32);
            prefix.push(sin_prod * phi.cos());
            sin_prod *= phi.sin();
        }
        for b in 0..n_az {
            let phi = 2.0 * PI * b as f64 / n_az as f64;
            let mut dir = prefix.clone();
            dir.push(sin_prod * phi.cos());
            dir.push(sin_prod * phi.sin());
            out.push((dir, weight * 2.0 * PI / n_az as f64));
        }
        let mut k = angles.len();
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            angles[k] += 1;
            if angles[k] < n {
                break;
            }
            angles[k] = 0;
        }
    }
}

/// One multi-index moment `∫_{R^d} K(‖u‖) u^β du`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Moment {
    pub beta: Vec<u32>,
    pub value: f64,
}

/// Every moment with `1 ≤ |β| ≤ max_degree`, plus the mass at `β = 0`, by
/// numerical quadrature that does not use the closed forms of the
/// construction: composite Gauss-Legendre in the radius applied to
/// [`KernelProfile::value`], and the [`sphere_directions`] rule for the
/// angular part.
pub fn moment_check(profile: &KernelProfile, max_degree: u32) -> Vec<Moment> {
    let d = profile.dim();
    let rule = CompositeRule::new(0.0, 1.0, 64, 12);
    let dirs = sphere_directions(d, 24);
    let mut out = Vec::new();
    let mut beta = vec![0u32; d];
    loop {
        let deg: u32 = beta.iter().sum();
        if deg <= max_degree {
            let radial =
                rule.integrate(|t| profile.value(t) * t.powi((deg as usize + d - 1) as i32));
            let angular: f64 = dirs
                .iter()
                .map(|(w, a)| {
                    a * w
                        .iter()
                        .zip(&beta)
                        .map(|(x, &b)| x.powi(b as i32))
                        .product::<f64>()
                })
                .sum();
            out.push(Moment {
                beta: beta.clone(),
                value: radial * angular,
            });
        }
        // Odometer over all β with entries in 0..=max_degree.
        let mut k = 0;
        loop {
            if k == d {
                return out;
            }
            beta[k] += 1;
            if beta[k] <= max_degree {
                break;
            }
            beta[k] = 0;
            k += 1;
        }
    }
}

/// Largest `h` of the dyadic sequence `h_max, h_max/2, …` with
/// `h^{-d} η_h ≥ 1/2`.
pub fn critical_bandwidth(
    m: &Manifold,
    profile: &KernelProfile,
    mode: DistanceMode,
    h_max: f64,
) -> Result<f64> {
    let d = m.intrinsic_dim() as i32;
    let mut h = h_max.min(0.999 * m.injectivity_radius());
    for _ in 0..60 {
        if let Ok(eta) = local_eta(m, profile, h, mode) {
            if eta / h.powi(d) >= 0.5 {
                return Ok(h);
            }
        }
        h *= 0.5;
    }
    Err(Error::Numerical(
        "no bandwidth with h^{-d} η_h ≥ 1/2 found".into(),
    ))
}
