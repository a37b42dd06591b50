//! Model manifolds: the circle, the round 2-sphere and flat tori, with their
//! embeddings, tangent projections, closed-form geodesics and quadrature grids.
//!
//! Intrinsic coordinates:
//! * circle of circumference `c`: arc length in `[0, c)`;
//! * sphere of radius `r`: `(polar, azimuth)` with polar in `[0, π]`;
//! * flat torus of side `s`: coordinates in `[0, s)^d`.
//!
//! The circle and the torus are embedded coordinate-wise as circles of
//! circumference `s` (radius `s / 2π`), the sphere as the usual round sphere
//! in `R³`. Their intrinsic coordinates are arc-length coordinates, so on the
//! flat manifolds an intrinsic increment is also the tangent vector expressed
//! in the orthonormal frame returned by [`Manifold::tangent_basis`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{invalid, parse_err, Error, Result};
use crate::seeding;
use crate::spec_string;

/// Small inline vector used for coordinates; spills to the heap above ten
/// entries (flat tori of dimension six and up in ambient space).
pub type Vector = SmallVec<[f64; 10]>;

const POINT_TOL: f64 = 1e-12;
const TANGENT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Manifold {
    Circle { circumference: f64 },
    Sphere { radius: f64 },
    FlatTorus { dim: usize, side: f64 },
}

/// Which distance enters the kernel: the geodesic one, or the chord length
/// in the ambient space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DistanceMode {
    #[default]
    Geodesic,
    Ambient,
}

impl FromStr for DistanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "geodesic" => Ok(DistanceMode::Geodesic),
            "ambient" => Ok(DistanceMode::Ambient),
            other => Err(parse_err(other, "expected 'geodesic' or 'ambient'")),
        }
    }
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMode::Geodesic => "geodesic",
            DistanceMode::Ambient => "ambient",
        })
    }
}

/// A point on a model manifold. The ambient coordinates are always computed
/// from the intrinsic ones through [`Manifold::embed`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    intrinsic: Vector,
    ambient: Vector,
}

impl ManifoldPoint {
    pub fn intrinsic(&self) -> &[f64] {
        &self.intrinsic
    }

    pub fn ambient(&self) -> &[f64] {
        &self.ambient
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return invalid(format!("{name} must be positive and finite, got {v}"));
    }
    Ok(())
}

/// Reduces `x` into `[0, period)`.
#[inline]
pub(crate) fn wrap(x: f64, period: f64) -> f64 {
    let r = x.rem_euclid(period);
    if r >= period {
        0.0
    } else {
        r
    }
}

/// Shortest signed displacement from `a` to `b` on a circle of the given
/// period, in `[-period/2, period/2)`.
#[inline]
pub(crate) fn wrapped_diff(a: f64, b: f64, period: f64) -> f64 {
    let mut d = (b - a).rem_euclid(period);
    if d >= 0.5 * period {
        d -= period;
    }
    d
}

impl Manifold {
    pub fn circle(circumference: f64) -> Result<Self> {
        check_positive("circumference", circumference)?;
        Ok(Manifold::Circle { circumference })
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        check_positive("radius", radius)?;
        Ok(Manifold::Sphere { radius })
    }

    pub fn torus(dim: usize, side: f64) -> Result<Self> {
        if dim == 0 {
            return invalid("torus dimension must be at least 1");
        }
        check_positive("side", side)?;
        Ok(Manifold::FlatTorus { dim, side })
    }

    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            Manifold::Circle { .. } => 1,
            Manifold::Sphere { .. } => 2,
            Manifold::FlatTorus { dim, .. } => dim,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match *self {
            Manifold::Circle { .. } => 2,
            Manifold::Sphere { .. } => 3,
            Manifold::FlatTorus { dim, .. } => 2 * dim,
        }
    }

    /// Period of the intrinsic coordinates for the flat manifolds, `None`
    /// for the sphere.
    pub fn flat_period(&self) -> Option<f64> {
        match *self {
            Manifold::Circle { circumference } => Some(circumference),
            Manifold::FlatTorus { side, .. } => Some(side),
            Manifold::Sphere { .. } => None,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.flat_period().is_some()
    }

    pub fn injectivity_radius(&self) -> f64 {
        match *self {
            Manifold::Circle { circumference } => 0.5 * circumference,
            Manifold::Sphere { radius } => PI * radius,
            Manifold::FlatTorus { side, .. } => 0.5 * side,
        }
    }

    pub fn diameter(&self) -> f64 {
        match *self {
            Manifold::Circle { circumference } => 0.5 * circumference,
            Manifold::Sphere { radius } => PI * radius,
            Manifold::FlatTorus { dim, side } => 0.5 * side * (dim as f64).sqrt(),
        }
    }

    pub fn total_volume(&self) -> f64 {
        match *self {
            Manifold::Circle { circumference } => circumference,
            Manifold::Sphere { radius } => 4.0 * PI * radius * radius,
            Manifold::FlatTorus { dim, side } => side.powi(dim as i32),
        }
    }

    /// Maps intrinsic coordinates to ambient coordinates.
    pub fn embed(&self, intrinsic: &[f64]) -> Vector {
        match *self {
            Manifold::Sphere { radius } => {
                let (st, ct) = intrinsic[0].sin_cos();
                let (sp, cp) = intrinsic[1].sin_cos();
                SmallVec::from_slice(&[radius * st * cp, radius * st * sp, radius * ct])
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                let rho = s / (2.0 * PI);
                let mut out = Vector::with_capacity(2 * intrinsic.len());
                for &x in intrinsic {
                    let (sa, ca) = (2.0 * PI * x / s).sin_cos();
                    out.push(rho * ca);
                    out.push(rho * sa);
                }
                out
            }
        }
    }

    /// Builds a point from intrinsic coordinates, wrapping periodic ones.
    pub fn point(&self, intrinsic: &[f64]) -> Result<ManifoldPoint> {
        let d = self.intrinsic_dim();
        if intrinsic.len() != d {
            return Err(Error::ManifoldMismatch(format!(
                "expected {d} intrinsic coordinates, got {}",
                intrinsic.len()
            )));
        }
        if intrinsic.iter().any(|x| !x.is_finite()) {
            return invalid("non-finite coordinate");
        }
        let coords: Vector = match *self {
            Manifold::Sphere { .. } => {
                let theta = intrinsic[0];
                if !(-1e-12..=PI + 1e-12).contains(&theta) {
                    return invalid(format!("polar angle {theta} outside [0, π]"));
                }
                SmallVec::from_slice(&[theta.clamp(0.0, PI), wrap(intrinsic[1], 2.0 * PI)])
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                intrinsic.iter().map(|&x| wrap(x, s)).collect()
            }
        };
        let ambient = self.embed(&coords);
        Ok(ManifoldPoint {
            intrinsic: coords,
            ambient,
        })
    }

    /// Builds a point from ambient coordinates lying on (or within `1e-9`
    /// relative distance of) the embedded manifold.
    pub fn point_from_ambient(&self, ambient: &[f64]) -> Result<ManifoldPoint> {
        if ambient.len() != self.ambient_dim() {
            return Err(Error::ManifoldMismatch(format!(
                "expected {} ambient coordinates, got {}",
                self.ambient_dim(),
                ambient.len()
            )));
        }
        match *self {
            Manifold::Sphere { radius } => {
                let n = norm(ambient);
                if (n - radius).abs() > 1e-9 * radius.max(1.0) {
                    return invalid(format!(
                        "point at distance {n} from origin, radius {radius}"
                    ));
                }
                let theta = (ambient[2] / n).clamp(-1.0, 1.0).acos();
                let phi = ambient[1].atan2(ambient[0]);
                self.point(&[theta, wrap(phi, 2.0 * PI)])
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                let rho = s / (2.0 * PI);
                let mut coords = Vector::new();
                for pair in ambient.chunks(2) {
                    let n = pair[0].hypot(pair[1]);
                    if (n - rho).abs() > 1e-9 * rho.max(1.0) {
                        return invalid("ambient point is off the embedded torus");
                    }
                    coords.push(wrap(pair[1].atan2(pair[0]) * s / (2.0 * PI), s));
                }
                self.point(&coords)
            }
        }
    }

    /// Confirms that `x` is a valid point of this manifold.
    pub fn check_point(&self, x: &ManifoldPoint) -> Result<()> {
        if x.intrinsic.len() != self.intrinsic_dim() || x.ambient.len() != self.ambient_dim() {
            return Err(Error::ManifoldMismatch(format!(
                "point with {} intrinsic / {} ambient coordinates does not belong to {self}",
                x.intrinsic.len(),
                x.ambient.len()
            )));
        }
        let emb = self.embed(&x.intrinsic);
        let scale = self.diameter().max(1.0);
        if emb
            .iter()
            .zip(x.ambient.iter())
            .any(|(a, b)| (a - b).abs() > POINT_TOL * scale)
        {
            return Err(Error::ManifoldMismatch(format!("point is not on {self}")));
        }
        Ok(())
    }

    /// Geodesic distance between intrinsic coordinate vectors, unchecked.
    #[inline]
    pub fn intrinsic_geodesic(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Manifold::Sphere { radius } => {
                let pa = self.embed(a);
                let pb = self.embed(b);
                radius * sphere_angle(&pa, &pb)
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let d = wrapped_diff(*x, *y, s);
                    acc += d * d;
                }
                acc.sqrt()
            }
        }
    }

    /// Chord length between intrinsic coordinate vectors, unchecked.
    #[inline]
    pub fn intrinsic_chord(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Manifold::Sphere { radius } => {
                let ang = self.intrinsic_geodesic(a, b) / radius;
                2.0 * radius * (0.5 * ang).sin()
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                let c = s / PI;
                let mut acc = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let d = c * (PI * (y - x) / s).sin();
                    acc += d * d;
                }
                acc.sqrt()
            }
        }
    }

    #[inline]
    pub fn intrinsic_distance(&self, a: &[f64], b: &[f64], mode: DistanceMode) -> f64 {
        match mode {
            DistanceMode::Geodesic => self.intrinsic_geodesic(a, b),
            DistanceMode::Ambient => self.intrinsic_chord(a, b),
        }
    }

    pub fn geodesic_distance(&self, x: &ManifoldPoint, y: &ManifoldPoint) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(match *self {
            Manifold::Sphere { radius } => radius * sphere_angle(&x.ambient, &y.ambient),
            _ => self.intrinsic_geodesic(&x.intrinsic, &y.intrinsic),
        })
    }

    pub fn ambient_distance(&self, x: &ManifoldPoint, y: &ManifoldPoint) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(x.ambient
            .iter()
            .zip(y.ambient.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn distance(
        &self,
        x: &ManifoldPoint,
        y: &ManifoldPoint,
        mode: DistanceMode,
    ) -> Result<f64> {
        match mode {
            DistanceMode::Geodesic => self.geodesic_distance(x, y),
            DistanceMode::Ambient => self.ambient_distance(x, y),
        }
    }

    /// Orthonormal basis of the tangent space at the point with the given
    /// intrinsic coordinates, as ambient vectors.
    pub fn tangent_basis_at(&self, intrinsic: &[f64]) -> Vec<Vector> {
        match *self {
            Manifold::Sphere { .. } => {
                let (st, ct) = intrinsic[0].sin_cos();
                let (sp, cp) = intrinsic[1].sin_cos();
                vec![
                    SmallVec::from_slice(&[ct * cp, ct * sp, -st]),
                    SmallVec::from_slice(&[-sp, cp, 0.0]),
                ]
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                let d = intrinsic.len();
                (0..d)
                    .map(|i| {
                        let mut v: Vector = SmallVec::from_elem(0.0, 2 * d);
                        let (sa, ca) = (2.0 * PI * intrinsic[i] / s).sin_cos();
                        v[2 * i] = -sa;
                        v[2 * i + 1] = ca;
                        v
                    })
                    .collect()
            }
        }
    }

    pub fn tangent_basis(&self, x: &ManifoldPoint) -> Result<Vec<Vector>> {
        self.check_point(x)?;
        Ok(self.tangent_basis_at(&x.intrinsic))
    }

    /// Orthogonal projector of `R^m` onto the tangent space at `x`.
    pub fn tangent_projection(&self, x: &ManifoldPoint) -> Result<DMatrix<f64>> {
        let basis = self.tangent_basis(x)?;
        let m = self.ambient_dim();
        let mut p = DMatrix::zeros(m, m);
        for b in &basis {
            for i in 0..m {
                for j in 0..m {
                    p[(i, j)] += b[i] * b[j];
                }
            }
        }
        Ok(p)
    }

    /// Projects an ambient vector onto the tangent space at `intrinsic`.
    pub fn project_tangent_at(&self, intrinsic: &[f64], v: &[f64]) -> Vector {
        let basis = self.tangent_basis_at(intrinsic);
        let mut out: Vector = SmallVec::from_elem(0.0, v.len());
        for b in &basis {
            let c = dot(b, v);
            for (o, bi) in out.iter_mut().zip(b.iter()) {
                *o += c * bi;
            }
        }
        out
    }

    /// Components of an ambient tangent vector in the orthonormal frame.
    pub(crate) fn frame_components(&self, intrinsic: &[f64], v: &[f64]) -> Result<Vector> {
        if v.len() != self.ambient_dim() {
            return Err(Error::ManifoldMismatch(format!(
                "tangent vector has {} components, ambient dimension is {}",
                v.len(),
                self.ambient_dim()
            )));
        }
        let basis = self.tangent_basis_at(intrinsic);
        let comps: Vector = basis.iter().map(|b| dot(b, v)).collect();
        let mut residual: Vector = v.iter().copied().collect();
        for (b, c) in basis.iter().zip(comps.iter()) {
            for (r, bi) in residual.iter_mut().zip(b.iter()) {
                *r -= c * bi;
            }
        }
        let normal = norm(&residual);
        if normal > TANGENT_TOL * norm(v).max(1.0) {
            return invalid(format!(
                "vector is not tangent (normal component {normal:.3e})"
            ));
        }
        Ok(comps)
    }

    /// Exponential map with closed-form geodesics.
    pub fn exp_map(&self, x: &ManifoldPoint, v: &[f64]) -> Result<ManifoldPoint> {
        self.check_point(x)?;
        let comps = self.frame_components(&x.intrinsic, v)?;
        match *self {
            Manifold::Sphere { radius } => {
                let t = norm(v);
                if t == 0.0 {
                    return Ok(x.clone());
                }
                let ang = t / radius;
                let (sa, ca) = ang.sin_cos();
                let y: Vector = x
                    .ambient
                    .iter()
                    .zip(v.iter())
                    .map(|(p, vi)| ca * p + sa * radius * vi / t)
                    .collect();
                sphere_point_from_vec(self, &y)
            }
            _ => {
                let moved: Vector = x
                    .intrinsic
                    .iter()
                    .zip(comps.iter())
                    .map(|(a, b)| a + b)
                    .collect();
                self.point(&moved)
            }
        }
    }

    /// Inverse of the exponential map: the tangent vector at `x` of the
    /// minimising geodesic to `y`. Fails at the cut locus of the sphere.
    pub fn log_map(&self, x: &ManifoldPoint, y: &ManifoldPoint) -> Result<Vector> {
        self.check_point(x)?;
        self.check_point(y)?;
        match *self {
            Manifold::Sphere { radius } => {
                let ang = sphere_angle(&x.ambient, &y.ambient);
                if ang < 1e-300 {
                    return Ok(SmallVec::from_elem(0.0, 3));
                }
                if PI - ang < 1e-9 {
                    return invalid("log map undefined at antipodal points");
                }
                // Expand y in the tangent frame at x so that the result is
                // tangent to rounding, even close to the cut locus.
                let basis = self.tangent_basis_at(&x.intrinsic);
                let comps: Vec<f64> = basis.iter().map(|b| dot(b, &y.ambient)).collect();
                let n = comps.iter().map(|c| c * c).sum::<f64>().sqrt();
                let mut u: Vector = SmallVec::from_elem(0.0, 3);
                for (b, c) in basis.iter().zip(&comps) {
                    for (ui, bi) in u.iter_mut().zip(b.iter()) {
                        *ui += bi * c * radius * ang / n;
                    }
                }
                Ok(u)
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                let basis = self.tangent_basis_at(&x.intrinsic);
                let mut out: Vector = SmallVec::from_elem(0.0, self.ambient_dim());
                for (i, b) in basis.iter().enumerate() {
                    let d = wrapped_diff(x.intrinsic[i], y.intrinsic[i], s);
                    for (o, bi) in out.iter_mut().zip(b.iter()) {
                        *o += d * bi;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Draws one volume-uniform point and appends its intrinsic coordinates.
    pub fn sample_uniform_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>) {
        match *self {
            Manifold::Sphere { .. } => {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                out.push(z.clamp(-1.0, 1.0).acos());
                out.push(phi);
            }
            _ => {
                let s = self.flat_period().unwrap_or(1.0);
                for _ in 0..self.intrinsic_dim() {
                    out.push(wrap(rng.gen_range(0.0..s), s));
                }
            }
        }
    }

    /// `n` i.i.d. points uniform with respect to the volume measure.
    pub fn sample_volume(&self, n: usize, seed: u64) -> Vec<ManifoldPoint> {
        let mut rng = seeding::rng(seed);
        let d = self.intrinsic_dim();
        let mut buf = Vec::with_capacity(d);
        (0..n)
            .map(|_| {
                buf.clear();
                self.sample_uniform_into(&mut rng, &mut buf);
                self.point(&buf).expect("sampled coordinates are valid")
            })
            .collect()
    }

    pub fn quadrature_grid(&self, resolution: usize) -> Result<QuadratureGrid> {
        QuadratureGrid::new(*self, resolution)
    }
}

fn sphere_point_from_vec(m: &Manifold, y: &[f64]) -> Result<ManifoldPoint> {
    let n = norm(y);
    let theta = (y[2] / n).clamp(-1.0, 1.0).acos();
    let phi = y[1].atan2(y[0]);
    m.point(&[theta, wrap(phi, 2.0 * PI)])
}

/// Angle between two ambient vectors, accurate for nearly parallel inputs.
fn sphere_angle(a: &[f64], b: &[f64]) -> f64 {
    let cx = a[1] * b[2] - a[2] * b[1];
    let cy = a[2] * b[0] - a[0] * b[2];
    let cz = a[0] * b[1] - a[1] * b[0];
    let cross = (cx * cx + cy * cy + cz * cz).sqrt();
    cross.atan2(dot(a, b))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

impl fmt::Display for Manifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Manifold::Circle { circumference } => {
                write!(f, "circle:c={}", spec_string::fmt_f64(circumference))
            }
            Manifold::Sphere { radius } => write!(f, "sphere:r={}", spec_string::fmt_f64(radius)),
            Manifold::FlatTorus { dim, side } => {
                write!(f, "torus:d={dim},s={}", spec_string::fmt_f64(side))
            }
        }
    }
}

impl FromStr for Manifold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = spec_string::split(s)?;
        match spec.name {
            "circle" => {
                spec.only_keys(&["c"])?;
                Manifold::circle(spec.f64("c")?)
            }
            "sphere" => {
                spec.only_keys(&["r"])?;
                Manifold::sphere(spec.f64("r")?)
            }
            "torus" => {
                spec.only_keys(&["d", "s"])?;
                Manifold::torus(spec.usize("d")?, spec.f64("s")?)
            }
            other => Err(parse_err(s, format!("unknown manifold kind '{other}'"))),
        }
    }
}

/// Node layout of a quadrature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridLayout {
    /// `per_axis^d` nodes at `i·s/per_axis`, row-major with the last axis
    /// varying fastest.
    Product { per_axis: usize },
    /// Cell-centred latitude-longitude grid with `n_polar × n_azimuth` cells.
    LatLong { n_polar: usize, n_azimuth: usize },
}

/// Quadrature nodes and volume weights. Coordinates are stored flat,
/// `d` consecutive entries per node.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    manifold: Manifold,
    resolution: usize,
    layout: GridLayout,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(manifold: Manifold, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return invalid(format!(
                "grid resolution must be at least 2, got {resolution}"
            ));
        }
        match manifold {
            Manifold::Sphere { radius } => {
                let n_polar = resolution;
                let n_azimuth = 2 * resolution;
                let dphi = 2.0 * PI / n_azimuth as f64;
                let mut coords = Vec::with_capacity(2 * n_polar * n_azimuth);
                let mut weights = Vec::with_capacity(n_polar * n_azimuth);
                for i in 0..n_polar {
                    let lo = i as f64 * PI / n_polar as f64;
                    let hi = (i + 1) as f64 * PI / n_polar as f64;
                    let theta = 0.5 * (lo + hi);
                    let w = radius * radius * (lo.cos() - hi.cos()) * dphi;
                    for k in 0..n_azimuth {
                        coords.push(theta);
                        coords.push((k as f64 + 0.5) * dphi);
                        weights.push(w);
                    }
                }
                Ok(QuadratureGrid {
                    manifold,
                    resolution,
                    layout: GridLayout::LatLong { n_polar, n_azimuth },
                    coords,
                    weights,
                })
            }
            _ => {
                let d = manifold.intrinsic_dim();
                let s = manifold.flat_period().unwrap_or(1.0);
                let total = (resolution as u128)
                    .checked_pow(d as u32)
                    .unwrap_or(u128::MAX);
                if total > 50_000_000 {
                    return Err(Error::TooLarge(format!(
                        "grid with {resolution}^{d} nodes exceeds the 5e7 node budget"
                    )));
                }
                let total = total as usize;
                let mesh = s / resolution as f64;
                let w = mesh.powi(d as i32);
                let mut coords = Vec::with_capacity(total * d);
                let mut idx = vec![0usize; d];
                for _ in 0..total {
                    coords.extend(idx.iter().map(|&i| i as f64 * mesh));
                    for k in (0..d).rev() {
                        idx[k] += 1;
                        if idx[k] < resolution {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
                Ok(QuadratureGrid {
                    manifold,
                    resolution,
                    layout: GridLayout::Product {
                        per_axis: resolution,
                    },
                    coords,
                    weights: vec![w; total],
                })
            }
        }
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn layout(&self) -> GridLayout {
        self.layout
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coords(&self, j: usize) -> &[f64] {
        let d = self.manifold.intrinsic_dim();
        &self.coords[j * d..(j + 1) * d]
    }

    pub fn flat_coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn node(&self, j: usize) -> ManifoldPoint {
        self.manifold
            .point(self.coords(j))
            .expect("grid nodes are valid points")
    }

    pub fn nodes(&self) -> Vec<ManifoldPoint> {
        (0..self.len()).map(|j| self.node(j)).collect()
    }

    /// Mesh width of a product grid.
    pub fn mesh(&self) -> Option<f64> {
        match self.layout {
            GridLayout::Product { per_axis } => {
                Some(self.manifold.flat_period().unwrap_or(1.0) / per_axis as f64)
            }
            GridLayout::LatLong { .. } => None,
        }
    }

    /// Quadrature of `f` evaluated at the nodes.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// Draws a point uniformly (with respect to volume) from the cell of node
    /// `j` and appends its intrinsic coordinates.
    pub fn sample_in_cell<R: Rng + ?Sized>(&self, j: usize, rng: &mut R, out: &mut Vec<f64>) {
        match self.layout {
            GridLayout::Product { .. } => {
                let mesh = self.mesh().unwrap_or(1.0);
                let s = self.manifold.flat_period().unwrap_or(1.0);
                for &c in self.coords(j) {
                    out.push(wrap(c + mesh * (rng.gen::<f64>() - 0.5), s));
                }
            }
            GridLayout::LatLong { n_polar, n_azimuth } => {
                let c = self.coords(j);
                let half_t = 0.5 * PI / n_polar as f64;
                let half_p = PI / n_azimuth as f64;
                let (zlo, zhi) = ((c[0] + half_t).cos(), (c[0] - half_t).cos());
                let z = zlo + (zhi - zlo) * rng.gen::<f64>();
                out.push(z.clamp(-1.0, 1.0).acos());
                out.push(wrap(
                    c[1] + half_p * (2.0 * rng.gen::<f64>() - 1.0),
                    2.0 * PI,
                ));
            }
        }
    }

    /// Calls `f(j)` for every node whose per-axis wrapped offset from
    /// `center` is at most `half_width`, each node at most once. On
    /// latitude-longitude grids every node is visited.
    pub fn for_each_in_box(&self, center: &[f64], half_width: f64, mut f: impl FnMut(usize)) {
        let per_axis = match self.layout {
            GridLayout::Product { per_axis } => per_axis,
            GridLayout::LatLong { .. } => {
                (0..self.len()).for_each(f);
                return;
            }
        };
        let d = self.manifold.intrinsic_dim();
        let mesh = self.mesh().unwrap_or(1.0);
        let n = per_axis as i64;
        let mut lo = vec![0i64; d];
        let mut cnt = vec![0i64; d];
        for k in 0..d {
            let a = ((center[k] - half_width) / mesh).ceil() as i64;
            let b = ((center[k] + half_width) / mesh).floor() as i64;
            if b - a + 1 >= n {
                lo[k] = 0;
                cnt[k] = n;
            } else {
                lo[k] = a;
                cnt[k] = (b - a + 1).max(0);
            }
        }
        if cnt.contains(&0) {
            return;
        }
        let mut off = vec![0i64; d];
        loop {
            let mut j = 0usize;
            for k in 0..d {
                j = j * per_axis + (lo[k] + off[k]).rem_euclid(n) as usize;
            }
            f(j);
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                off[k] += 1;
                if off[k] < cnt[k] {
                    break;
                }
                off[k] = 0;
            }
        }
    }
}
