//! Fourier analysis on the circle and the flat torus: Laplace eigenvalues,
//! the negative Sobolev norm `‖(−Δ)^{-1/2} f‖`, the resulting upper bound
//! for W2², and a finite-difference check of `Δ = Σ_α P_α²` with the
//! projected ambient directions `P_α`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::densities::Density;
use crate::error::{invalid, Error, Result};
use crate::estimator::population_smooth;
use crate::geometry::{GridLayout, Manifold, ManifoldPoint, QuadratureGrid};
use crate::kernels::{KernelProfile, NormalizedKernel};
use crate::quad::linear_fit;

/// In-place unnormalised multidimensional DFT of a row-major array. The
/// inverse transform is not divided by the length.
pub fn fft_nd(data: &mut [Complex<f64>], shape: &[usize], inverse: bool) {
    let total: usize = shape.iter().product();
    assert_eq!(data.len(), total, "data length must match the shape");
    let mut planner = FftPlanner::new();
    let mut stride = 1;
    let mut line = Vec::new();
    for axis in (0..shape.len()).rev() {
        let n = shape[axis];
        let fft = if inverse {
            planner.plan_fft_inverse(n)
        } else {
            planner.plan_fft_forward(n)
        };
        let block = n * stride;
        line.resize(n, Complex::new(0.0, 0.0));
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let start = outer + inner;
                for k in 0..n {
                    line[k] = data[start + k * stride];
                }
                fft.process(&mut line);
                for k in 0..n {
                    data[start + k * stride] = line[k];
                }
            }
        }
        stride = block;
    }
}

/// Laplace eigenbasis `e^{2πi k·x/s} / s^{d/2}` on a flat manifold,
/// restricted to `|k|_∞ ≤ k_max`.
#[derive(Clone, Debug)]
pub struct FourierBasis {
    manifold: Manifold,
    resolution: usize,
    k_max: usize,
}

impl FourierBasis {
    /// Basis resolved by a product grid with `resolution` nodes per axis:
    /// `k_max = resolution/2 − 1`.
    pub fn new(manifold: Manifold, resolution: usize) -> Result<Self> {
        if !manifold.is_flat() {
            return invalid("Fourier analysis is available on the circle and flat tori only");
        }
        if resolution < 4 {
            return invalid("resolution must be at least 4");
        }
        Ok(FourierBasis {
            manifold,
            resolution,
            k_max: resolution / 2 - 1,
        })
    }

    pub fn for_grid(grid: &QuadratureGrid) -> Result<Self> {
        match grid.layout() {
            GridLayout::Product { per_axis } => Self::new(*grid.manifold(), per_axis),
            GridLayout::LatLong { .. } => invalid("Fourier analysis needs a product grid"),
        }
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    fn side(&self) -> f64 {
        self.manifold.flat_period().unwrap_or(1.0)
    }

    /// `λ_k = (2π/s)² |k|²`.
    pub fn eigenvalue(&self, k: &[i64]) -> f64 {
        let base = 2.0 * PI / self.side();
        base * base * k.iter().map(|&v| (v * v) as f64).sum::<f64>()
    }

    /// Smallest positive eigenvalue, `(2π/s)²`.
    pub fn spectral_gap(&self) -> f64 {
        let b = 2.0 * PI / self.side();
        b * b
    }

    /// Coefficients `f̂_k = ∫ f φ̄_k` from grid values, with the signed
    /// frequency vector of each entry.
    pub fn coefficients(&self, values: &[f64]) -> Result<Vec<(Vec<i64>, Complex<f64>)>> {
        let n = self.resolution;
        let d = self.manifold.intrinsic_dim();
        let total = n.pow(d as u32);
        if values.len() != total {
            return invalid(format!(
                "expected {total} grid values, got {}",
                values.len()
            ));
        }
        let mut data: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft_nd(&mut data, &vec![n; d], false);
        let s = self.side();
        let w = (s / n as f64).powi(d as i32);
        let norm = w / s.powf(0.5 * d as f64);
        let mut out = Vec::with_capacity(total);
        let mut k = vec![0i64; d];
        for (idx, c) in data.iter().enumerate() {
            let mut r = idx;
            for a in (0..d).rev() {
                let i = (r % n) as i64;
                r /= n;
                k[a] = if i > (n / 2) as i64 { i - n as i64 } else { i };
            }
            out.push((k.clone(), c * norm));
        }
        Ok(out)
    }

    /// `Σ_k |f̂_k|²` over every grid frequency.
    pub fn parseval_sum(&self, values: &[f64]) -> Result<f64> {
        Ok(self
            .coefficients(values)?
            .iter()
            .map(|(_, c)| c.norm_sqr())
            .sum())
    }

    fn resolved(&self, k: &[i64]) -> bool {
        k.iter().all(|v| v.unsigned_abs() as usize <= self.k_max)
    }

    /// `‖(−Δ)^{-1/2} f‖_{L²} = (Σ_{k≠0} |f̂_k|²/λ_k)^{1/2}` for a zero-mean
    /// grid function.
    pub fn neg_sobolev_half(&self, values: &[f64], weights: &[f64]) -> Result<f64> {
        let mean: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
        let scale = values
            .iter()
            .zip(weights)
            .map(|(v, w)| v.abs() * w)
            .sum::<f64>()
            .max(1.0);
        if mean.abs() > 1e-8 * scale {
            return invalid(format!("function has nonzero mean {mean:.3e}"));
        }
        let mut acc = 0.0;
        for (k, c) in self.coefficients(values)? {
            if k.iter().all(|&v| v == 0) || !self.resolved(&k) {
                continue;
            }
            acc += c.norm_sqr() / self.eigenvalue(&k);
        }
        Ok(acc.sqrt())
    }
}

/// `‖(−Δ)^{-1/2} f‖_{L²}` for grid values on a product grid.
pub fn neg_sobolev_half(values: &[f64], grid: &QuadratureGrid) -> Result<f64> {
    FourierBasis::for_grid(grid)?.neg_sobolev_half(values, grid.weights())
}

/// `(4/p_min) ‖(−Δ)^{-1/2}(p1 − p2)‖²`, an upper bound for
/// `W2²(p1 dx, p2 dx)` when `p1 ≥ p_min`.
pub fn peyre_bound(p1: &[f64], p2: &[f64], grid: &QuadratureGrid, p_min: f64) -> Result<f64> {
    if !(p_min > 0.0) {
        return invalid(format!("p_min must be positive, got {p_min}"));
    }
    if p1.len() != p2.len() {
        return invalid("density grids differ in length");
    }
    let diff: Vec<f64> = p1.iter().zip(p2).map(|(a, b)| a - b).collect();
    let n = neg_sobolev_half(&diff, grid)?;
    Ok(4.0 / p_min * n * n)
}

/// A test function with a closed-form Laplacian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    Constant(f64),
    /// The ambient height `z` on a sphere, an eigenfunction with eigenvalue
    /// `2/r²`.
    SphereHeight,
    /// `cos(2π k x_axis / s)` on a flat manifold.
    FlatCosine {
        axis: usize,
        freq: u32,
    },
}

impl TestFunction {
    pub fn eval(&self, m: &Manifold, x: &ManifoldPoint) -> f64 {
        match *self {
            TestFunction::Constant(c) => c,
            TestFunction::SphereHeight => x.ambient()[2],
            TestFunction::FlatCosine { axis, freq } => {
                let s = m.flat_period().unwrap_or(1.0);
                (2.0 * PI * freq as f64 * x.intrinsic()[axis] / s).cos()
            }
        }
    }

    pub fn laplacian(&self, m: &Manifold, x: &ManifoldPoint) -> f64 {
        match *self {
            TestFunction::Constant(_) => 0.0,
            TestFunction::SphereHeight => {
                let r = match m {
                    Manifold::Sphere { radius } => *radius,
                    _ => 1.0,
                };
                -2.0 / (r * r) * x.ambient()[2]
            }
            TestFunction::FlatCosine { freq, .. } => {
                let s = m.flat_period().unwrap_or(1.0);
                let w = 2.0 * PI * freq as f64 / s;
                -w * w * self.eval(m, x)
            }
        }
    }

    fn check(&self, m: &Manifold) -> Result<()> {
        match *self {
            TestFunction::Constant(_) => Ok(()),
            TestFunction::SphereHeight if matches!(m, Manifold::Sphere { .. }) => Ok(()),
            TestFunction::FlatCosine { axis, .. } if m.is_flat() && axis < m.intrinsic_dim() => {
                Ok(())
            }
            _ => Err(Error::ManifoldMismatch(format!(
                "{self:?} is not defined on {m}"
            ))),
        }
    }
}

/// `Σ_α P_α(P_α f)(x)` by nested central differences along the geodesics
/// in the directions `P(y) e_α`, with one Richardson step (spacings `step`
/// and `step/2`) to cancel the leading `O(step²)` error.
pub fn sum_projected_second_derivatives(
    m: &Manifold,
    f: &dyn Fn(&ManifoldPoint) -> f64,
    x: &ManifoldPoint,
    step: f64,
) -> Result<f64> {
    m.check_point(x)?;
    let coarse = nested_differences(m, f, x, step)?;
    let fine = nested_differences(m, f, x, 0.5 * step)?;
    Ok((4.0 * fine - coarse) / 3.0)
}

fn nested_differences(
    m: &Manifold,
    f: &dyn Fn(&ManifoldPoint) -> f64,
    x: &ManifoldPoint,
    step: f64,
) -> Result<f64> {
    let n = m.ambient_dim();
    let shift = |y: &ManifoldPoint, alpha: usize, t: f64| -> Result<ManifoldPoint> {
        let mut e = vec![0.0; n];
        e[alpha] = t;
        let v = m.project_tangent_at(y.intrinsic(), &e);
        m.exp_map(y, &v)
    };
    let first = |y: &ManifoldPoint, alpha: usize| -> Result<f64> {
        let a = f(&shift(y, alpha, step)?);
        let b = f(&shift(y, alpha, -step)?);
        Ok((a - b) / (2.0 * step))
    };
    let mut acc = 0.0;
    for alpha in 0..n {
        let plus = first(&shift(x, alpha, step)?, alpha)?;
        let minus = first(&shift(x, alpha, -step)?, alpha)?;
        acc += (plus - minus) / (2.0 * step);
    }
    Ok(acc)
}

/// `|Σ_α P_α² f(x) − Δf(x)|`.
pub fn laplacian_identity_check(
    m: &Manifold,
    f: TestFunction,
    x: &ManifoldPoint,
    step: f64,
) -> Result<f64> {
    f.check(m)?;
    let eval = |y: &ManifoldPoint| f.eval(m, y);
    let fd = sum_projected_second_derivatives(m, &eval, x, step)?;
    Ok((fd - f.laplacian(m, x)).abs())
}

#[derive(Clone, Debug, Serialize)]
pub struct BiasDecay {
    pub bandwidths: Vec<f64>,
    /// `‖(−Δ)^{-1/2}(p_h − p)‖²` per bandwidth.
    pub norms_sq: Vec<f64>,
    pub exponent: f64,
    pub stderr: f64,
}

/// Fits the exponent of `‖(−Δ)^{-1/2}(p_h − p)‖²` against `h`.
pub fn bias_decay_check(
    p: &Density,
    profile: &Arc<KernelProfile>,
    bandwidths: &[f64],
    grid: &QuadratureGrid,
) -> Result<BiasDecay> {
    if bandwidths.len() < 2 {
        return invalid("need at least two bandwidths");
    }
    let basis = FourierBasis::for_grid(grid)?;
    let m = *p.manifold();
    let pv: Vec<f64> = (0..grid.len()).map(|j| p.eval_at(grid.coords(j))).collect();
    let mut norms = Vec::with_capacity(bandwidths.len());
    for &h in bandwidths {
        let nk = NormalizedKernel::new(m, Arc::clone(profile), h, crate::DistanceMode::Geodesic)?;
        let ph = population_smooth(p, &nk, grid)?;
        let mut diff: Vec<f64> = ph.iter().zip(&pv).map(|(a, b)| a - b).collect();
        // Remove the quadrature mean so that the input lies in L²₀.
        let mean = grid.integrate(&diff) / m.total_volume();
        diff.iter_mut().for_each(|v| *v -= mean);
        let n = basis.neg_sobolev_half(&diff, grid.weights())?;
        norms.push(n * n);
    }
    let lx: Vec<f64> = bandwidths.iter().map(|h| h.ln()).collect();
    let ly: Vec<f64> = norms
        .iter()
        .map(|v| v.max(f64::MIN_POSITIVE).ln())
        .collect();
    let fit = linear_fit(&lx, &ly);
    Ok(BiasDecay {
        bandwidths: bandwidths.to_vec(),
        norms_sq: norms,
        exponent: fit.slope,
        stderr: fit.stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn circle_values(grid: &QuadratureGrid, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..grid.len()).map(|j| f(grid.coords(j)[0])).collect()
    }

    #[test]
    fn single_cosine_mode() {
        let m = Manifold::circle(1.0).unwrap();
        let g = m.quadrature_grid(64).unwrap();
        let v = circle_values(&g, |x| (2.0 * PI * x).cos());
        let n = neg_sobolev_half(&v, &g).unwrap();
        assert_abs_diff_eq!(
            n,
            std::f64::consts::FRAC_1_SQRT_2 / (2.0 * PI),
            epsilon = 1e-14
        );
        assert_eq!(neg_sobolev_half(&vec![0.0; 64], &g).unwrap(), 0.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
        assert!(neg_sobolev_half(&shifted, &g).is_err());
    }

    #[test]
    fn peyre_single_mode() {
        let m = Manifold::circle(1.0).unwrap();
        let g = m.quadrature_grid(128).unwrap();
        let p1 = circle_values(&g, |x| 1.0 + 0.3 * (2.0 * PI * x).cos());
        let p2 = vec![1.0; 128];
        let b = peyre_bound(&p1, &p2, &g, 0.7).unwrap();
        assert_abs_diff_eq!(b, 4.0 / 0.7 * 0.045 / (4.0 * PI * PI), epsilon = 1e-14);
        assert_eq!(peyre_bound(&p1, &p1, &g, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn spectral_gap_and_eigenvalues() {
        let m = Manifold::torus(3, 2.0).unwrap();
        let b = FourierBasis::new(m, 8).unwrap();
        assert_abs_diff_eq!(b.spectral_gap(), PI * PI, epsilon = 1e-14);
        assert_abs_diff_eq!(b.eigenvalue(&[1, 0, -1]), 2.0 * PI * PI, epsilon = 1e-13);
        assert_eq!(b.eigenvalue(&[0, 0, 0]), 0.0);
        assert!(FourierBasis::new(Manifold::sphere(1.0).unwrap(), 8).is_err());
    }

    #[test]
    fn fft_round_trip() {
        let shape = [4usize, 6, 5];
        let orig: Vec<Complex<f64>> = (0..120)
            .map(|i| Complex::new((i as f64).sin(), (i as f64 * 0.3).cos()))
            .collect();
        let mut d = orig.clone();
        fft_nd(&mut d, &shape, false);
        fft_nd(&mut d, &shape, true);
        for (a, b) in d.iter().zip(&orig) {
            assert_abs_diff_eq!(a.re / 120.0, b.re, epsilon = 1e-13);
            assert_abs_diff_eq!(a.im / 120.0, b.im, epsilon = 1e-13);
        }
    }

    #[test]
    fn laplacian_identity_examples() {
        let s = Manifold::sphere(1.0).unwrap();
        let x = s.point(&[1.0, 0.4]).unwrap();
        assert!(
            laplacian_identity_check(&s, TestFunction::SphereHeight, &x, 1e-3).unwrap() <= 1e-4
        );
        assert!(
            laplacian_identity_check(&s, TestFunction::Constant(2.0), &x, 1e-3).unwrap() <= 1e-10
        );
        let t = Manifold::torus(2, 1.0).unwrap();
        let y = t.point(&[0.3, 0.8]).unwrap();
        let f = TestFunction::FlatCosine { axis: 0, freq: 1 };
        let r = laplacian_identity_check(&t, f, &y, 1e-3).unwrap();
        assert!(r <= 1e-4, "torus residual {r}");
        assert!(laplacian_identity_check(&t, TestFunction::SphereHeight, &y, 1e-3).is_err());
    }

    #[test]
    fn bias_decay_of_smooth_and_uniform_densities() {
        use crate::densities::TrigTerm;
        use crate::kernels::{make_profile, KernelFamily};
        let m = Manifold::circle(1.0).unwrap();
        let g = m.quadrature_grid(2048).unwrap();
        let k = Arc::new(make_profile(KernelFamily::Poly { order: 4 }, 1).unwrap());
        let hs = [0.2, 0.1, 0.05, 0.025];
        let flat = bias_decay_check(&Density::uniform(m), &k, &hs, &g).unwrap();
        assert!(flat.norms_sq.iter().all(|&v| v < 1e-28), "{:?}", flat.norms_sq);
        let p = Density::trig(m, vec![TrigTerm { wave: vec![1], amp: 0.3 }]).unwrap();
        let r = bias_decay_check(&p, &k, &hs, &g).unwrap();
        // A single analytic mode: the bias of an order-4 kernel is h⁴ times
        // the fourth derivative, so the squared norm falls like h⁸.
        assert!(r.exponent > 7.5 && r.exponent < 8.5, "exponent {}", r.exponent);
        for w in r.norms_sq.windows(2) {
            assert!(w[0] > w[1]);
        }
        assert!(bias_decay_check(&p, &k, &[0.1], &g).is_err());
    }
}
