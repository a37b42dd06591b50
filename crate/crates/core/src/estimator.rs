//! Kernel smoothing of occupation measures.
//!
//! An estimate lives on a quadrature grid. Each atom of the occupation
//! measure spreads its mass with the kernel `K(ρ/h)` renormalised by its own
//! grid quadrature `Σ_j w_j K(ρ(x, node_j)/h)`, so that the grid mass is one
//! to rounding whatever the resolution. The continuum normaliser `η_h` is the
//! limit of that quadrature and is used for the positivity margin.

use std::sync::Arc;

use rand::distributions::{Distribution, WeightedIndex};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::densities::Density;
use crate::error::{invalid, Error, Result};
use crate::geometry::{GridLayout, Manifold, ManifoldPoint, QuadratureGrid};
use crate::kernels::NormalizedKernel;
use crate::seeding;
use crate::spectral::fft_nd;
use crate::transport::{DiscreteMeasure, Resample};

/// How the event "the estimate is nonnegative everywhere" is decided.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivityRule {
    /// Grid minimum at least the Lipschitz margin `2 Lip(K) mesh / (h η_h)`,
    /// which certifies nonnegativity between the nodes.
    #[default]
    Certified,
    /// Grid minimum nonnegative.
    GridOnly,
}

/// How the kernel sum is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMethod {
    /// Exact sum over atoms and nodes within the kernel support.
    #[default]
    Direct,
    /// Multilinear deposit of the atoms on a product grid followed by a
    /// circular FFT convolution. Only for flat manifolds.
    Binned,
}

#[derive(Clone, Debug)]
pub struct SmoothedEstimate {
    grid: Arc<QuadratureGrid>,
    values: Vec<f64>,
    positivity_ok: bool,
    grid_min: f64,
    margin: f64,
    fallback: ManifoldPoint,
    bandwidth: f64,
    horizon: Option<f64>,
    kernel: String,
    rule: PositivityRule,
}

impl SmoothedEstimate {
    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn positivity_ok(&self) -> bool {
        self.positivity_ok
    }

    pub fn grid_min(&self) -> f64 {
        self.grid_min
    }

    /// Lipschitz margin the grid minimum was compared against.
    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn fallback_point(&self) -> &ManifoldPoint {
        &self.fallback
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn horizon(&self) -> Option<f64> {
        self.horizon
    }

    pub fn kernel_label(&self) -> &str {
        &self.kernel
    }

    pub fn rule(&self) -> PositivityRule {
        self.rule
    }

    /// `Σ values · weights`.
    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// The nodes weighted by `values · weights` when positivity holds, else
    /// the unit mass at the fallback point.
    pub fn measure(&self) -> Result<DiscreteMeasure> {
        let m = *self.grid.manifold();
        if !self.positivity_ok {
            return DiscreteMeasure::dirac(&self.fallback, m);
        }
        let w: Vec<f64> = self
            .values
            .iter()
            .zip(self.grid.weights())
            .map(|(v, w)| (v * w).max(0.0))
            .collect();
        let total: f64 = w.iter().sum();
        DiscreteMeasure::from_flat(
            m,
            self.grid.flat_coords().to_vec(),
            w.iter().map(|x| x / total).collect(),
        )
    }

    pub fn set_horizon(&mut self, horizon: f64) {
        self.horizon = Some(horizon);
    }

    pub fn to_dump(&self, provenance: impl Into<String>) -> EstimateDump {
        EstimateDump {
            manifold: self.grid.manifold().to_string(),
            resolution: self.grid.resolution(),
            values: self.values.clone(),
            positivity_ok: self.positivity_ok,
            grid_min: self.grid_min,
            margin: self.margin,
            fallback: self.fallback.intrinsic().to_vec(),
            bandwidth: self.bandwidth,
            horizon: self.horizon,
            kernel: self.kernel.clone(),
            rule: self.rule,
            mass: self.mass(),
            provenance: provenance.into(),
        }
    }

    /// Rebuilds an estimate from its dump, regenerating the grid from the
    /// manifold and resolution.
    pub fn from_dump(dump: &EstimateDump) -> Result<Self> {
        let m: Manifold = dump.manifold.parse()?;
        let grid = Arc::new(m.quadrature_grid(dump.resolution)?);
        if dump.values.len() != grid.len() {
            return invalid(format!(
                "{} values for a grid of {} nodes",
                dump.values.len(),
                grid.len()
            ));
        }
        Ok(SmoothedEstimate {
            fallback: m.point(&dump.fallback)?,
            grid,
            values: dump.values.clone(),
            positivity_ok: dump.positivity_ok,
            grid_min: dump.grid_min,
            margin: dump.margin,
            bandwidth: dump.bandwidth,
            horizon: dump.horizon,
            kernel: dump.kernel.clone(),
            rule: dump.rule,
        })
    }
}

/// Serializable form of a [`SmoothedEstimate`]. The grid is identified by
/// the manifold spec and the resolution passed to `quadrature_grid`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateDump {
    pub manifold: String,
    pub resolution: usize,
    pub values: Vec<f64>,
    pub positivity_ok: bool,
    pub grid_min: f64,
    pub margin: f64,
    pub fallback: Vec<f64>,
    pub bandwidth: f64,
    pub horizon: Option<f64>,
    pub kernel: String,
    pub rule: PositivityRule,
    pub mass: f64,
    pub provenance: String,
}

/// Resampling draws a cell with probability `values · weights` and then a
/// volume-uniform point inside it, i.e. samples the piecewise-constant
/// density carried by the grid.
impl Resample for SmoothedEstimate {
    fn manifold(&self) -> &Manifold {
        self.grid.manifold()
    }

    fn resample_into(&self, n: usize, rng: &mut seeding::Rng, out: &mut Vec<f64>) {
        out.clear();
        if !self.positivity_ok {
            for _ in 0..n {
                out.extend_from_slice(self.fallback.intrinsic());
            }
            return;
        }
        let w: Vec<f64> = self
            .values
            .iter()
            .zip(self.grid.weights())
            .map(|(v, w)| (v * w).max(0.0))
            .collect();
        let pick = WeightedIndex::new(&w).expect("positive estimate has positive mass");
        for _ in 0..n {
            self.grid.sample_in_cell(pick.sample(rng), rng, out);
        }
    }
}

fn check_inputs(nk: &NormalizedKernel, grid: &QuadratureGrid, m: &Manifold) -> Result<()> {
    if grid.manifold() != m || nk.manifold() != m {
        return Err(Error::ManifoldMismatch(
            "kernel, grid and measure must share a manifold".into(),
        ));
    }
    Ok(())
}

/// Smooths a weighted point set (typically an occupation measure).
pub fn smooth(
    occupation: &DiscreteMeasure,
    nk: &NormalizedKernel,
    grid: &Arc<QuadratureGrid>,
    rule: PositivityRule,
    method: SmoothingMethod,
) -> Result<SmoothedEstimate> {
    if occupation.is_empty() {
        return invalid("cannot smooth an empty measure");
    }
    check_inputs(nk, grid, occupation.manifold())?;
    let values = match method {
        SmoothingMethod::Direct => {
            smooth_direct(occupation.flat_coords(), occupation.weights(), nk, grid)
        }
        SmoothingMethod::Binned => {
            smooth_binned(occupation.flat_coords(), occupation.weights(), nk, grid)?
        }
    };
    Ok(finish(values, nk, grid, rule))
}

fn finish(
    values: Vec<f64>,
    nk: &NormalizedKernel,
    grid: &Arc<QuadratureGrid>,
    rule: PositivityRule,
) -> SmoothedEstimate {
    let grid_min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let margin = positivity_margin(nk, grid);
    let positivity_ok = if nk.profile().nonneg() {
        true
    } else {
        match rule {
            PositivityRule::Certified => grid_min >= margin,
            PositivityRule::GridOnly => grid_min >= 0.0,
        }
    };
    SmoothedEstimate {
        grid: Arc::clone(grid),
        values,
        positivity_ok,
        grid_min,
        margin,
        fallback: grid.node(0),
        bandwidth: nk.bandwidth(),
        horizon: None,
        kernel: nk.profile().to_string(),
        rule,
    }
}

/// `2 Lip(K) δ / (h η_h)` where `δ` is the largest distance from a point to
/// the nearest node.
pub fn positivity_margin(nk: &NormalizedKernel, grid: &QuadratureGrid) -> f64 {
    let d = grid.manifold().intrinsic_dim() as f64;
    let reach = match grid.layout() {
        GridLayout::Product { .. } => 0.5 * grid.mesh().unwrap_or(0.0) * d.sqrt(),
        GridLayout::LatLong { n_polar, .. } => {
            let r = match grid.manifold() {
                Manifold::Sphere { radius } => *radius,
                _ => 1.0,
            };
            // Half-diagonal of an equatorial cell, the largest one.
            r * std::f64::consts::PI / n_polar as f64 * std::f64::consts::FRAC_1_SQRT_2
        }
    };
    2.0 * nk.profile().lipschitz() * reach / (nk.bandwidth() * nk.eta())
}

fn smooth_direct(
    coords: &[f64],
    weights: &[f64],
    nk: &NormalizedKernel,
    grid: &QuadratureGrid,
) -> Vec<f64> {
    let m = nk.manifold();
    let d = m.intrinsic_dim();
    let mut values = vec![0.0; grid.len()];
    let gw = grid.weights();
    let hw = nk.box_half_width();
    let mut touched: Vec<(usize, f64)> = Vec::new();
    for (x, &w) in coords.chunks(d).zip(weights) {
        if w == 0.0 {
            continue;
        }
        touched.clear();
        let mut z = 0.0;
        grid.for_each_in_box(x, hw, |j| {
            let k = nk.raw_at(x, grid.coords(j));
            if k != 0.0 {
                z += gw[j] * k;
                touched.push((j, k));
            }
        });
        if z == 0.0 {
            continue;
        }
        let scale = w / z;
        for &(j, k) in &touched {
            values[j] += scale * k;
        }
    }
    values
}

fn product_shape(grid: &QuadratureGrid) -> Result<(usize, usize)> {
    match grid.layout() {
        GridLayout::Product { per_axis } => Ok((per_axis, grid.manifold().intrinsic_dim())),
        GridLayout::LatLong { .. } => {
            invalid("binned smoothing needs a product grid on a flat manifold")
        }
    }
}

fn smooth_binned(
    coords: &[f64],
    weights: &[f64],
    nk: &NormalizedKernel,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    let (n, d) = product_shape(grid)?;
    let s = grid.manifold().flat_period().unwrap_or(1.0);
    let mesh = s / n as f64;
    let len = grid.len();
    // Multilinear deposit.
    let mut bins = vec![0.0; len];
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0; d];
    for (x, &w) in coords.chunks(d).zip(weights) {
        for k in 0..d {
            let u = x[k] / mesh;
            let f = u.floor();
            base[k] = (f as i64).rem_euclid(n as i64) as usize;
            frac[k] = u - f;
        }
        for corner in 0..(1usize << d) {
            let mut j = 0;
            let mut c = w;
            for k in 0..d {
                let hi = corner >> (d - 1 - k) & 1 == 1;
                let idx = if hi { (base[k] + 1) % n } else { base[k] };
                c *= if hi { frac[k] } else { 1.0 - frac[k] };
                j = j * n + idx;
            }
            bins[j] += c;
        }
    }
    let kernel = kernel_table(nk, grid, n, d, s)?;
    let mut a: Vec<Complex<f64>> = bins.iter().map(|&b| Complex::new(b, 0.0)).collect();
    let mut b: Vec<Complex<f64>> = kernel.iter().map(|&k| Complex::new(k, 0.0)).collect();
    let shape = vec![n; d];
    fft_nd(&mut a, &shape, false);
    fft_nd(&mut b, &shape, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    fft_nd(&mut a, &shape, true);
    let scale = 1.0 / len as f64;
    Ok(a.iter().map(|c| c.re * scale).collect())
}

/// Kernel sampled at grid offsets from the origin, divided by its grid
/// quadrature.
fn kernel_table(
    nk: &NormalizedKernel,
    grid: &QuadratureGrid,
    n: usize,
    d: usize,
    s: f64,
) -> Result<Vec<f64>> {
    let origin = vec![0.0; d];
    let mut table = vec![0.0; grid.len()];
    let mut z = 0.0;
    let w = grid.weights();
    grid.for_each_in_box(&origin, nk.box_half_width(), |j| {
        let k = nk.raw_at(&origin, grid.coords(j));
        table[j] = k;
        z += w[j] * k;
    });
    if !(z > 0.0) {
        return Err(Error::BandwidthTooLarge(format!(
            "kernel has no positive mass on a grid of {n} nodes per axis (side {s})"
        )));
    }
    table.iter_mut().for_each(|v| *v /= z);
    Ok(table)
}

/// `p_h = ∫ K_h(z, ·) p(z) dz` at the grid nodes, by quadrature on the same
/// grid with the same per-atom normalisation as [`smooth`].
pub fn population_smooth(
    p: &Density,
    nk: &NormalizedKernel,
    grid: &QuadratureGrid,
) -> Result<Vec<f64>> {
    check_inputs(nk, grid, p.manifold())?;
    let w: Vec<f64> = (0..grid.len())
        .map(|j| p.eval_at(grid.coords(j)) * grid.weights()[j])
        .collect();
    match grid.layout() {
        GridLayout::Product { .. }
            if grid.manifold().is_flat() && grid.manifold().intrinsic_dim() > 1 =>
        {
            smooth_binned(grid.flat_coords(), &w, nk, grid)
        }
        _ => Ok(smooth_direct(grid.flat_coords(), &w, nk, grid)),
    }
}

/// `h = c T^{-1/(2ℓ+d-2)}`, capped at `h_max` when given.
pub fn bandwidth_rule(horizon: f64, d: usize, ell: u32, c: f64, h_max: Option<f64>) -> Result<f64> {
    check_rule_inputs(horizon, c)?;
    let denom = 2 * ell as i64 + d as i64 - 2;
    if denom <= 0 {
        return invalid(format!("2ℓ + d − 2 = {denom} must be positive"));
    }
    Ok(cap(c * horizon.powf(-1.0 / denom as f64), h_max))
}

/// Bandwidth for comparing with the empirical measure through a nonnegative
/// kernel: `c T^{-1/2}` for `d ≤ 4` and `c T^{-1/(d-2)}` for `d ≥ 5`.
pub fn empirical_bandwidth(horizon: f64, d: usize, c: f64, h_max: Option<f64>) -> Result<f64> {
    check_rule_inputs(horizon, c)?;
    let e = if d <= 4 { 0.5 } else { 1.0 / (d as f64 - 2.0) };
    Ok(cap(c * horizon.powf(-e), h_max))
}

fn check_rule_inputs(horizon: f64, c: f64) -> Result<()> {
    if !(horizon >= 2.0) {
        return invalid(format!("horizon must be at least 2, got {horizon}"));
    }
    if !(c > 0.0) {
        return invalid(format!("bandwidth constant must be positive, got {c}"));
    }
    Ok(())
}

fn cap(h: f64, h_max: Option<f64>) -> f64 {
    match h_max {
        Some(m) => h.min(m),
        None => h,
    }
}

/// `T h^d ≥ c ln T`.
pub fn guard_condition(horizon: f64, h: f64, d: usize, c: f64) -> bool {
    horizon * h.powi(d as i32) >= c * horizon.ln()
}

/// `T h^{d-2} ≥ c ln T`, the weaker form used for the variance bound.
pub fn variance_guard(horizon: f64, h: f64, d: usize, c: f64) -> bool {
    horizon * h.powi(d as i32 - 2) >= c * horizon.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DistanceMode;
    use crate::kernels::{make_profile, KernelFamily};
    use approx::assert_abs_diff_eq;

    fn kernel(m: Manifold, family: KernelFamily, h: f64) -> NormalizedKernel {
        let p = Arc::new(make_profile(family, m.intrinsic_dim()).unwrap());
        NormalizedKernel::new(m, p, h, DistanceMode::Geodesic).unwrap()
    }

    #[test]
    fn bandwidth_examples() {
        assert_abs_diff_eq!(
            bandwidth_rule(1024.0, 5, 2, 1.0, None).unwrap(),
            1024f64.powf(-1.0 / 7.0),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            bandwidth_rule(1024.0, 5, 2, 1.0, None).unwrap(),
            0.3715,
            epsilon = 1e-4
        );
        assert_abs_diff_eq!(
            empirical_bandwidth(100.0, 3, 1.0, None).unwrap(),
            0.1,
            epsilon = 1e-15
        );
        assert!(
            bandwidth_rule(2048.0, 5, 2, 1.0, None).unwrap()
                < bandwidth_rule(1024.0, 5, 2, 1.0, None).unwrap()
        );
        assert!(bandwidth_rule(100.0, 1, 0, 1.0, None).is_err());
        assert_eq!(bandwidth_rule(4.0, 5, 2, 10.0, Some(0.4)).unwrap(), 0.4);
    }

    #[test]
    fn guard_examples() {
        assert!(guard_condition(1e4, 0.3, 5, 1.0));
        assert!(!guard_condition(10.0, 0.01, 5, 1.0));
        // T h^d = ln T exactly at h = (ln T / T)^{1/d}.
        let t: f64 = 50.0;
        let h = (t.ln() / t).powf(0.5) * (1.0 + 1e-12);
        assert!(guard_condition(t, h, 2, 1.0));
        assert!(!guard_condition(t, h * (1.0 - 1e-9), 2, 1.0));
    }

    #[test]
    fn dirac_with_nonnegative_kernel_gives_the_kernel() {
        let m = Manifold::circle(1.0).unwrap();
        let grid = Arc::new(m.quadrature_grid(512).unwrap());
        let nk = kernel(m, KernelFamily::Epanechnikov, 0.1);
        let x = m.point(&[0.3]).unwrap();
        let occ = DiscreteMeasure::dirac(&x, m).unwrap();
        let est = smooth(
            &occ,
            &nk,
            &grid,
            PositivityRule::Certified,
            SmoothingMethod::Direct,
        )
        .unwrap();
        assert!(est.positivity_ok());
        assert_abs_diff_eq!(est.mass(), 1.0, epsilon = 1e-12);
        for j in 0..grid.len() {
            let k = nk.eval_at(&[0.3], grid.coords(j));
            assert_abs_diff_eq!(est.values()[j], k, epsilon = 1e-4 * nk.sup_norm());
        }
    }

    #[test]
    fn binned_and_direct_agree_on_nodes() {
        let m = Manifold::torus(2, 1.0).unwrap();
        let grid = Arc::new(m.quadrature_grid(32).unwrap());
        let nk = kernel(m, KernelFamily::Poly { order: 4 }, 0.2);
        // Atoms exactly on nodes deposit without interpolation.
        let coords: Vec<f64> = [3usize, 7, 100, 511, 1000]
            .iter()
            .flat_map(|&j| grid.coords(j).to_vec())
            .collect();
        let occ = DiscreteMeasure::uniform(m, coords).unwrap();
        let a = smooth(
            &occ,
            &nk,
            &grid,
            PositivityRule::GridOnly,
            SmoothingMethod::Direct,
        )
        .unwrap();
        let b = smooth(
            &occ,
            &nk,
            &grid,
            PositivityRule::GridOnly,
            SmoothingMethod::Binned,
        )
        .unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(b.mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn dump_round_trip_on_the_sphere() {
        let m = Manifold::sphere(1.0).unwrap();
        let grid = Arc::new(m.quadrature_grid(24).unwrap());
        let nk = kernel(m, KernelFamily::Poly { order: 2 }, 0.5);
        let x = m.point(&[1.0, 2.0]).unwrap();
        let occ = DiscreteMeasure::dirac(&x, m).unwrap();
        let est = smooth(
            &occ,
            &nk,
            &grid,
            PositivityRule::Certified,
            SmoothingMethod::Direct,
        )
        .unwrap();
        let dump = est.to_dump("test");
        let json = serde_json::to_string(&dump).unwrap();
        let back = SmoothedEstimate::from_dump(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.values(), est.values());
        assert_eq!(back.grid().len(), grid.len());
        assert_eq!(back.positivity_ok(), est.positivity_ok());
        assert_abs_diff_eq!(dump.mass, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn negative_estimates_fall_back_to_a_dirac() {
        let m = Manifold::circle(1.0).unwrap();
        let grid = Arc::new(m.quadrature_grid(256).unwrap());
        let nk = kernel(m, KernelFamily::Poly { order: 4 }, 0.2);
        let x = m.point(&[0.5]).unwrap();
        let occ = DiscreteMeasure::dirac(&x, m).unwrap();
        let est = smooth(
            &occ,
            &nk,
            &grid,
            PositivityRule::GridOnly,
            SmoothingMethod::Direct,
        )
        .unwrap();
        assert!(!est.positivity_ok());
        assert_abs_diff_eq!(est.mass(), 1.0, epsilon = 1e-12);
        let mu = est.measure().unwrap();
        assert_eq!(mu.len(), 1);
        assert_eq!(mu.coords(0), grid.coords(0));
    }

    #[test]
    fn uniform_population_smoothing_is_flat() {
        let m = Manifold::torus(2, 1.0).unwrap();
        let grid = m.quadrature_grid(64).unwrap();
        let nk = kernel(m, KernelFamily::Poly { order: 4 }, 0.15);
        let ph = population_smooth(&Density::uniform(m), &nk, &grid).unwrap();
        for v in ph {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-10);
        }
    }
}
