use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use occkde::densities::{make_density, DensitySpec};
use occkde::diffusion::{into_occupation_measure, read_path_csv, simulate, write_path_csv, GeneratorSpec, SdeConfig};
use occkde::estimator::{smooth, EstimateDump, PositivityRule, SmoothedEstimate, SmoothingMethod};
use occkde::experiments::{
    parse_initial, run_kl_check, run_minimax_diagnostic, run_rate_experiment, ExperimentConfig, KlCheckConfig,
    MinimaxConfig, SCHEMA_VERSION,
};
use occkde::kernels::{make_profile, moment_check, KernelFamily, NormalizedKernel};
use occkde::spectral::{peyre_bound, FourierBasis};
use occkde::transport::{w2_entropic, w2_exact, DiscreteMeasure, SinkhornOptions, SolverSpec};
use occkde::{DistanceMode, Manifold};

#[derive(Parser)]
#[command(name = "occkde", version, about = "Stationary-density estimation from a single diffusion path")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a diffusion path and write it as CSV.
    Simulate {
        #[arg(long)]
        manifold: String,
        #[arg(long, default_value = "uniform")]
        density: String,
        #[arg(long, default_value = "langevin")]
        generator: String,
        #[arg(long = "T")]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// `invariant`, `uniform` or `point:(x1,…)`.
        #[arg(long, default_value = "invariant")]
        initial: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smooth the occupation measure of a stored path.
    Estimate {
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value = "poly:r=4")]
        kernel: String,
        #[arg(long)]
        h: f64,
        #[arg(long, default_value_t = 64)]
        grid: usize,
        #[arg(long, value_enum, default_value = "certified")]
        positivity: Positivity,
        #[arg(long, value_enum, default_value = "direct")]
        smoothing: Smoothing,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transport cost between two measures given as estimate JSON, path CSV
    /// or point CSV.
    W2 {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "exact")]
        solver: String,
        #[arg(long)]
        eps: Option<f64>,
        /// Manifold of point files without a `# manifold=` header.
        #[arg(long)]
        manifold: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Negative-Sobolev upper bound on W2² between two densities.
    Peyre {
        #[arg(long, default_value = "circle:c=1")]
        manifold: String,
        #[arg(long)]
        p1: String,
        #[arg(long)]
        p2: String,
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// Write the per-mode contributions as CSV.
        #[arg(long)]
        modes: Option<PathBuf>,
    },
    /// Convergence-rate experiment from a TOML config.
    Rate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// Print the planned step count and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Monte Carlo check of the path-space KL formula.
    KlCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separation and KL diagnostics of the bump family.
    Minimax {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Moments of a kernel profile by numerical quadrature.
    KernelCheck {
        #[arg(long, default_value = "poly:r=4")]
        kernel: String,
        #[arg(long, value_delimiter = ',', default_value = "2,3,5")]
        dims: Vec<usize>,
        /// Highest total degree checked; defaults to the kernel order minus one.
        #[arg(long)]
        max_degree: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Positivity {
    Certified,
    GridOnly,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Smoothing {
    Direct,
    Binned,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { manifold, density, generator, horizon, dt, seed, initial, out } => {
            let m: Manifold = manifold.parse()?;
            let p = make_density(m, &density.parse::<DensitySpec>()?)?;
            let gen = GeneratorSpec::parse(&generator, p)?;
            let cfg = SdeConfig::new(gen, horizon, dt, parse_initial(&initial, &m)?, seed);
            eprintln!("simulating {} steps", cfg.steps());
            let path = simulate(&cfg)?;
            write_path_csv(&path, output(out.as_deref())?)?;
        }
        Command::Estimate { path, kernel, h, grid, positivity, smoothing, out } => {
            let p = read_path_csv(BufReader::new(open(&path)?))?;
            let horizon = p.horizon();
            let provenance = p.provenance().to_string();
            let m = *p.manifold();
            let occ = into_occupation_measure(p)?;
            let profile = Arc::new(make_profile(kernel.parse::<KernelFamily>()?, m.intrinsic_dim())?);
            let nk = NormalizedKernel::new(m, profile, h, DistanceMode::Geodesic)?;
            let g = Arc::new(m.quadrature_grid(grid)?);
            let rule = match positivity {
                Positivity::Certified => PositivityRule::Certified,
                Positivity::GridOnly => PositivityRule::GridOnly,
            };
            let method = match smoothing {
                Smoothing::Direct => SmoothingMethod::Direct,
                Smoothing::Binned => SmoothingMethod::Binned,
            };
            let mut est = smooth(&occ, &nk, &g, rule, method)?;
            est.set_horizon(horizon);
            let dump = est.to_dump(provenance);
            write_json(out.as_deref(), &json!({ "schema_version": SCHEMA_VERSION, "estimate": dump }))?;
        }
        Command::W2 { a, b, solver, eps, manifold, out } => {
            let override_m = manifold.map(|s| s.parse::<Manifold>()).transpose()?;
            let ma = load_measure(&a, override_m)?;
            let mb = load_measure(&b, override_m)?;
            let spec: SolverSpec = solver.parse()?;
            let result = match (spec, eps) {
                (SolverSpec::Exact, None) => w2_exact(&ma, &mb)?,
                (SolverSpec::Exact, Some(_)) => bail!("--eps only applies to the entropic solver"),
                (SolverSpec::Entropic { eps: e }, flag) => {
                    let mut opts = SinkhornOptions::for_manifold(ma.manifold());
                    if let Some(e) = flag.or(e) {
                        opts.eps = e;
                    }
                    w2_entropic(&ma, &mb, opts)?
                }
            };
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "cost": result.cost,
                "solver": result.solver,
                "marginal_residual": result.marginal_residual,
                "iterations": result.iterations,
                "converged": result.converged,
                "sizes": [ma.len(), mb.len()],
            });
            write_json(out.as_deref(), &report)?;
        }
        Command::Peyre { manifold, p1, p2, grid, modes } => {
            let m: Manifold = manifold.parse()?;
            let d1 = make_density(m, &p1.parse::<DensitySpec>()?)?;
            let d2 = make_density(m, &p2.parse::<DensitySpec>()?)?;
            let g = m.quadrature_grid(grid)?;
            let v1: Vec<f64> = (0..g.len()).map(|j| d1.eval_at(g.coords(j))).collect();
            let v2: Vec<f64> = (0..g.len()).map(|j| d2.eval_at(g.coords(j))).collect();
            let p_min = d1.p_min();
            let bound = peyre_bound(&v1, &v2, &g, p_min)?;
            if let Some(path) = modes {
                let basis = FourierBasis::for_grid(&g)?;
                let diff: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a - b).collect();
                let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                writeln!(w, "k,eigenvalue,coefficient_sq,contribution")?;
                for (k, c) in basis.coefficients(&diff)? {
                    let lam = basis.eigenvalue(&k);
                    let resolved = k.iter().all(|v| v.unsigned_abs() as usize <= basis.k_max());
                    if lam == 0.0 || !resolved || c.norm_sqr() < 1e-30 {
                        continue;
                    }
                    let label: Vec<String> = k.iter().map(|v| v.to_string()).collect();
                    let contribution = 4.0 / p_min * c.norm_sqr() / lam;
                    writeln!(w, "{},{},{},{}", label.join(" "), lam, c.norm_sqr(), contribution)?;
                }
                w.flush()?;
            }
            let report = json!({ "schema_version": SCHEMA_VERSION, "bound": bound, "p_min": p_min, "grid": grid });
            write_json(None, &report)?;
        }
        Command::Rate { config, csv, json: json_out, dry_run } => {
            let cfg: ExperimentConfig = read_toml(&config)?;
            cfg.validate()?;
            eprintln!(
                "rate experiment: {} horizons × {} replicas, {} Euler steps in total",
                cfg.horizons.len(),
                cfg.replicas,
                cfg.total_steps()
            );
            if dry_run {
                return Ok(());
            }
            let report = run_rate_experiment(&cfg)?;
            match csv {
                Some(p) => report.write_csv(File::create(&p).with_context(|| format!("creating {}", p.display()))?)?,
                None => report.write_csv(io::stdout().lock())?,
            }
            let show = |v: Option<f64>| v.map_or("n/a".to_string(), |s| format!("{s:.3}"));
            for fit in &report.fits {
                eprintln!(
                    "{}: slope {} ± {} (floor-corrected {}), predicted {:.3}",
                    fit.mode,
                    show(fit.slope_raw),
                    show(fit.stderr_raw),
                    show(fit.slope_corrected),
                    fit.theoretical
                );
                if let Some(e) = &fit.error {
                    eprintln!("{}: {e}", fit.mode);
                }
            }
            if let Some(p) = json_out {
                write_json(Some(&p), &report.summary_json())?;
            }
        }
        Command::KlCheck { config, out } => {
            let cfg: KlCheckConfig = config.map(|p| read_toml(&p)).transpose()?.unwrap_or_default();
            write_json(out.as_deref(), &run_kl_check(&cfg)?)?;
        }
        Command::Minimax { config, out } => {
            let cfg: MinimaxConfig = config.map(|p| read_toml(&p)).transpose()?.unwrap_or_default();
            write_json(out.as_deref(), &run_minimax_diagnostic(&cfg)?)?;
        }
        Command::KernelCheck { kernel, dims, max_degree, out } => {
            let family: KernelFamily = kernel.parse()?;
            let mut per_dim = Vec::new();
            for d in dims {
                let profile = make_profile(family, d)?;
                let deg = max_degree.unwrap_or(profile.order().saturating_sub(1));
                let moments = moment_check(&profile, deg);
                let worst = moments
                    .iter()
                    .map(|m| {
                        let target = if m.beta.iter().all(|&b| b == 0) { 1.0 } else { 0.0 };
                        (m.value - target).abs()
                    })
                    .fold(0.0, f64::max);
                per_dim.push(json!({
                    "dim": d,
                    "order": profile.order(),
                    "max_degree": deg,
                    "max_deviation": worst,
                    "moments": moments,
                }));
            }
            write_json(out.as_deref(), &json!({ "schema_version": SCHEMA_VERSION, "kernel": kernel, "dims": per_dim }))?;
        }
    }
    Ok(())
}

fn open(p: &Path) -> Result<File> {
    File::open(p).with_context(|| format!("opening {}", p.display()))
}

fn output(p: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match p {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize + ?Sized>(p: Option<&Path>, value: &T) -> Result<()> {
    let mut w = output(p)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

/// Loads an estimate JSON (as written by `estimate`), a path CSV (as written
/// by `simulate`, giving its occupation measure) or a point CSV with one row
/// of intrinsic coordinates per atom and an optional `weight` column.
fn load_measure(p: &Path, manifold: Option<Manifold>) -> Result<DiscreteMeasure> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    if p.extension().is_some_and(|e| e == "json") {
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let dump: EstimateDump = serde_json::from_value(value.get("estimate").cloned().unwrap_or(value))?;
        return Ok(SmoothedEstimate::from_dump(&dump)?.measure()?);
    }
    let header_value = |key: &str| {
        text.lines()
            .filter_map(|l| l.strip_prefix('#'))
            .filter_map(|l| l.trim().split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
    };
    if header_value("dt").is_some() {
        return Ok(into_occupation_measure(read_path_csv(text.as_bytes())?)?);
    }
    let m = match (header_value("manifold"), manifold) {
        (Some(s), _) => s.parse::<Manifold>()?,
        (None, Some(m)) => m,
        (None, None) => bail!("{} has no '# manifold=' header; pass --manifold", p.display()),
    };
    let mut rows = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let names: Vec<&str> = rows.next().context("empty point file")?.split(',').map(str::trim).collect();
    let d = m.intrinsic_dim();
    let weighted = names.last() == Some(&"weight");
    if names.len() != d + weighted as usize {
        bail!("{} needs {d} coordinate columns", m);
    }
    let (mut coords, mut weights) = (Vec::new(), Vec::new());
    for (i, row) in rows.enumerate() {
        let vals: Vec<f64> = row
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("row {} of {}", i + 1, p.display()))?;
        if vals.len() != names.len() {
            bail!("row {} of {} has {} fields", i + 1, p.display(), vals.len());
        }
        coords.extend_from_slice(&vals[..d]);
        if weighted {
            weights.push(vals[d]);
        }
    }
    if weighted {
        let total: f64 = weights.iter().sum();
        Ok(DiscreteMeasure::from_flat(m, coords, weights.iter().map(|w| w / total).collect())?)
    } else {
        Ok(DiscreteMeasure::uniform(m, coords)?)
    }
}
