use occkde::seeding::{derive_seed, rng};
use occkde::transport::{w1_exact, w2_entropic, w2_exact, DiscreteMeasure, SinkhornOptions};
use occkde::Manifold;
use rand::Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn uniform_weights_match_the_best_assignment() {
    // With equal uniform weights an optimal plan is a permutation.
    let m = Manifold::torus(2, 1.0).unwrap();
    for trial in 0..30 {
        let mut r = rng(derive_seed(5, &[trial]));
        let n = 5;
        let a: Vec<f64> = (0..2 * n).map(|_| r.gen()).collect();
        let b: Vec<f64> = (0..2 * n).map(|_| r.gen()).collect();
        let ma = DiscreteMeasure::uniform(m, a.clone()).unwrap();
        let mb = DiscreteMeasure::uniform(m, b.clone()).unwrap();
        let best = permutations(n)
            .iter()
            .map(|p| {
                (0..n)
                    .map(|i| {
                        m.intrinsic_geodesic(&a[2 * i..2 * i + 2], &b[2 * p[i]..2 * p[i] + 2])
                            .powi(2)
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .fold(f64::INFINITY, f64::min);
        let got = w2_exact(&ma, &mb).unwrap();
        assert!(
            (got.cost - best).abs() < 1e-12,
            "trial {trial}: {} vs {best}",
            got.cost
        );
        assert!(got.marginal_residual < 1e-12);
    }
}

#[test]
fn w1_on_the_circle_is_the_cdf_distance() {
    // On the circle W1 = min_c ∫ |F − G − c|, evaluated here on a fine grid of atoms.
    let m = Manifold::circle(1.0).unwrap();
    let n = 40;
    let mut r = rng(9);
    let wa: Vec<f64> = (0..n).map(|_| r.gen::<f64>() + 0.1).collect();
    let wb: Vec<f64> = (0..n).map(|_| r.gen::<f64>() + 0.1).collect();
    let (sa, sb): (f64, f64) = (wa.iter().sum(), wb.iter().sum());
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let a = DiscreteMeasure::from_flat(m, xs.clone(), wa.iter().map(|w| w / sa).collect()).unwrap();
    let b = DiscreteMeasure::from_flat(m, xs, wb.iter().map(|w| w / sb).collect()).unwrap();
    let mut diffs = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        acc += a.weights()[i] - b.weights()[i];
        diffs.push(acc);
    }
    let mut sorted = diffs.clone();
    sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let median = sorted[n / 2];
    let oracle: f64 = diffs.iter().map(|d| (d - median).abs()).sum::<f64>() / n as f64;
    let got = w1_exact(&a, &b).unwrap().cost;
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn debiased_entropic_tracks_the_exact_cost() {
    let m = Manifold::torus(2, 1.0).unwrap();
    let mut r = rng(3);
    let n = 300;
    let a: Vec<f64> = (0..2 * n).map(|_| r.gen::<f64>() * 0.5).collect();
    let b: Vec<f64> = (0..2 * n).map(|_| 0.25 + r.gen::<f64>() * 0.5).collect();
    let ma = DiscreteMeasure::uniform(m, a).unwrap();
    let mb = DiscreteMeasure::uniform(m, b).unwrap();
    let exact = w2_exact(&ma, &mb).unwrap().cost;
    let opts = SinkhornOptions {
        eps: 1e-3,
        max_iter: 5000,
        tol: 1e-8,
    };
    let ent = w2_entropic(&ma, &mb, opts).unwrap();
    assert!(ent.converged);
    assert!(
        (ent.cost - exact).abs() < 0.05 * exact,
        "{} vs {exact}",
        ent.cost
    );
}
