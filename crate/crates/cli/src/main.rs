use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lattice_htst::harness::{
    self, atomic_write, emit, fit_rate, read_table_json, richardson, FitMode, OutputFormat, RunConfig,
};
use lattice_htst::lattice::{build_supercell, write_field_csv, PeriodicField};
use lattice_htst::potentials::PotentialModel;
use lattice_htst::spectral::{kernel_fn, KernelTable};
use lattice_htst::stationary::{
    find_saddle, kicked_guess, mirror_midpoint, relax_minimum, save_point, StationaryPoint,
};
use lattice_htst::thermo::{
    delta_s_saddle, entropy_total, product_form, rate_at, site_entropies, RateReport, ThermoOptions,
};

/// Default output root when neither --out nor the config sets one.
const OUT_ENV: &str = "LATTICE_HTST_OUT";
const BLAS_ENV: &str = "OPENBLAS_CORETYPE";

#[derive(Parser, Debug)]
#[command(name = "lattice-htst", version, about = "Defect free energies and HTST rates on periodic lattice supercells")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Concurrent sweep rows.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "both")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate the model and scan the symbol for lattice stability.
    Check {
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Relax the defect minimum at one supercell size.
    Relax {
        #[arg(long)]
        n: usize,
    },
    /// Minimum, then the index-1 saddle between its mirror images.
    Saddle {
        #[arg(long)]
        n: usize,
    },
    /// Entropy of the minimum, with its site profile.
    Entropy {
        #[arg(long)]
        n: usize,
        /// Also decompose the saddle entropy.
        #[arg(long)]
        saddle: bool,
    },
    /// HTST rate at one supercell size for the configured β values.
    Rate {
        #[arg(long)]
        n: usize,
    },
    /// Full convergence sweep over the configured N list.
    Sweep,
    /// Refit convergence rates of a stored table.
    Fit {
        /// table.json written by `sweep`.
        #[arg(long)]
        table: PathBuf,
        /// Divide out log^q N before fitting.
        #[arg(long)]
        log_power: Option<f64>,
    },
}

fn main() -> ExitCode {
    if std::env::var_os(BLAS_ENV).is_none() {
        return reexec_with_blas_pin();
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// OpenBLAS must select its Haswell kernels before it initialises; the
/// only reliable way is to set the variable for a fresh process.
fn reexec_with_blas_pin() -> ExitCode {
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot locate own executable: {e}");
            return ExitCode::from(2);
        }
    };
    let status = std::process::Command::new(exe)
        .args(std::env::args_os().skip(1))
        .env(BLAS_ENV, "Haswell")
        .status();
    match status {
        Ok(s) => ExitCode::from(s.code().unwrap_or(2).clamp(0, 255) as u8),
        Err(e) => {
            eprintln!("error: re-exec failed: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.as_ref().context("--config is required for this command")?;
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.out_dir = Some(out_dir(cli, &cfg));
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("lattice-htst-out"))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, format: Format) -> Result<()> {
    if matches!(format, Format::Json | Format::Both) {
        let p = dir.join(name);
        atomic_write(&p, &serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

struct Setup {
    model: PotentialModel,
    f: KernelTable,
    cell: std::sync::Arc<lattice_htst::lattice::Supercell>,
}

fn setup(cfg: &RunConfig, n: usize) -> Result<Setup> {
    let model = cfg.build_model()?;
    let cell = build_supercell(model.spec().clone(), n)?;
    let f = kernel_fn(&model, &cell)?;
    Ok(Setup { model, f, cell })
}

fn minimum(cfg: &RunConfig, s: &Setup) -> Result<StationaryPoint> {
    let guess = match &cfg.kick {
        Some(k) if s.model.has_defect() => kicked_guess(&s.cell, k)?,
        _ => PeriodicField::zeros(s.cell.clone()),
    };
    Ok(relax_minimum(&s.model, &guess, &s.f, &cfg.solver)?)
}

fn saddle(cfg: &RunConfig, s: &Setup, min: &StationaryPoint) -> Result<StationaryPoint> {
    if !s.model.has_defect() {
        bail!("the model has no defect, so there is no transition");
    }
    Ok(find_saddle(&s.model, &mirror_midpoint(&s.model, &min.u)?, &s.f, &cfg.solver)?)
}

fn report_point(p: &StationaryPoint) -> String {
    let c = &p.certificate;
    format!(
        "{:?} N={} E={:.12} |g|={:.2e} iters={} {:?} modes(neg {}, zero {}) lowest={:.8} sigma=[{:.6}, {:.6}]",
        p.kind,
        p.u.cell().n(),
        p.energy,
        p.gradient_norm,
        p.iterations,
        p.method,
        c.classification.negative,
        c.classification.zero,
        c.lowest.value,
        c.sigma.0,
        c.sigma.1
    )
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Check { resolution } => {
            let cfg = load_config(&cli)?;
            let model = cfg.build_model()?;
            let rep = model.stability(*resolution);
            println!(
                "model {} ({}): c0 = {:.6e}, c1 = {:.6e} at resolution {}, minimum at k = {:?}: {}",
                model.name(),
                cfg.model_hash(),
                rep.c0,
                rep.c1,
                rep.resolution,
                rep.k_min,
                if rep.pass { "stable" } else { "UNSTABLE" }
            );
            Ok(rep.pass)
        }
        Command::Relax { n } => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli, &cfg);
            let s = setup(&cfg, *n)?;
            let min = minimum(&cfg, &s)?;
            save_point(&min, &dir.join(format!("min_n{n}")), &cfg.model_hash())?;
            println!("{}", report_point(&min));
            Ok(true)
        }
        Command::Saddle { n } => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli, &cfg);
            let s = setup(&cfg, *n)?;
            let min = minimum(&cfg, &s)?;
            let sad = saddle(&cfg, &s, &min)?;
            save_point(&min, &dir.join(format!("min_n{n}")), &cfg.model_hash())?;
            save_point(&sad, &dir.join(format!("saddle_n{n}")), &cfg.model_hash())?;
            let mut buf = Vec::new();
            let phi = PeriodicField::from_values(s.cell.clone(), sad.certificate.lowest.vector.clone())?;
            write_field_csv(&phi, &mut buf)?;
            atomic_write(&dir.join(format!("unstable_mode_n{n}.csv")), &buf)?;
            println!("{}", report_point(&min));
            println!("{}", report_point(&sad));
            Ok(true)
        }
        Command::Entropy { n, saddle: with_saddle } => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli, &cfg);
            let s = setup(&cfg, *n)?;
            let min = minimum(&cfg, &s)?;
            let total = entropy_total(&s.model, &min)?;
            let prof = site_entropies(&s.model, &min.u, min.kind, &s.f)?;
            write_profile(&dir.join(format!("site_entropy_min_n{n}.csv")), &prof)?;
            write_json(&dir, &format!("site_entropy_min_n{n}.json"), &prof, cli.format)?;
            println!("S_N = {total:.12} (site sum {:.12})", prof.total);
            if *with_saddle {
                let sad = saddle(&cfg, &s, &min)?;
                let prof = site_entropies(&s.model, &sad.u, sad.kind, &s.f)?;
                write_profile(&dir.join(format!("site_entropy_saddle_n{n}.csv")), &prof)?;
                write_json(&dir, &format!("site_entropy_saddle_n{n}.json"), &prof, cli.format)?;
                println!("S_N(saddle) = {:.12}, sum of S+ = {:.12}", entropy_total(&s.model, &sad)?, prof.total);
            }
            Ok(true)
        }
        Command::Rate { n } => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli, &cfg);
            let s = setup(&cfg, *n)?;
            let min = minimum(&cfg, &s)?;
            let sad = saddle(&cfg, &s, &min)?;
            let opts: &ThermoOptions = &cfg.thermo;
            let ds = delta_s_saddle(&s.model, &min, &sad, &s.f, opts)?;
            let product = if s.cell.dofs() <= opts.dense_max_dofs {
                Some(product_form(&s.model, &min, &sad)?)
            } else {
                None
            };
            let reports: Vec<RateReport> = cfg
                .betas
                .iter()
                .map(|&b| rate_at(&min, &sad, &ds, product.as_ref(), b))
                .collect::<lattice_htst::Result<_>>()?;
            for r in &reports {
                println!(
                    "beta={} dE={:.10} dS={:.10} log K={:.10} K={:.6e} lambda={:.8} mu={:.8}{}",
                    r.beta,
                    r.delta_e,
                    r.delta_s,
                    r.log_k,
                    r.k,
                    r.lambda_bar,
                    r.mu_bar,
                    r.product_rel_diff.map(|d| format!(" product-form rel diff {d:.1e}")).unwrap_or_default()
                );
            }
            write_json(&dir, &format!("rate_n{n}.json"), &(&ds, &reports), cli.format)?;
            Ok(reports.iter().all(|r| !r.direction_warning))
        }
        Command::Sweep => {
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli, &cfg);
            let table = harness::sweep(&cfg)?;
            let files = emit(&table, &dir, cli.format.into())?;
            for r in &table.rows {
                let status = if r.errors.is_empty() { "ok".to_string() } else { r.errors.join("; ") };
                println!(
                    "N={:>3} E={} S={} dE={} dS={} lambda={} mu={} : {status}",
                    r.n,
                    opt(r.minimum.as_ref().map(|p| p.energy)),
                    opt(r.s_min),
                    opt(r.delta_e),
                    opt(r.delta_s),
                    opt(r.lambda_bar()),
                    opt(r.mu_bar)
                );
            }
            for f in &table.fits {
                match &f.fit {
                    Some(fit) => println!(
                        "{:<16} exponent {:+.3} ± {:.3}{}",
                        f.quantity,
                        fit.exponent,
                        fit.interval,
                        f.note.as_ref().map(|n| format!(" ({n})")).unwrap_or_default()
                    ),
                    None => println!("{:<16} {}", f.quantity, f.note.as_deref().unwrap_or("no fit")),
                }
            }
            for p in files {
                println!("wrote {}", p.display());
            }
            let model = cfg.build_model()?;
            Ok(table.all_certified(model.has_defect()))
        }
        Command::Fit { table, log_power } => {
            let t = read_table_json(table).with_context(|| format!("reading {}", table.display()))?;
            let mode = match log_power {
                Some(q) => FitMode::PowerWithLog { q: *q },
                None => FitMode::PurePower,
            };
            for f in &t.fits {
                let pts: Vec<(f64, f64)> = f.errors.iter().map(|&(n, e)| (n as f64, e)).collect();
                let line = match fit_rate(&pts, mode) {
                    Ok(r) => format!("exponent {:+.4} ± {:.4} (residual {:.2e})", r.exponent, r.interval, r.residual),
                    Err(e) => format!("undefined: {e}"),
                };
                let ext = f
                    .extrapolation
                    .as_ref()
                    .map(|e| format!(" limit {:.10} ± {:.1e}", e.limit, e.uncertainty))
                    .unwrap_or_default();
                println!("{:<16} {line}{ext}", f.quantity);
            }
            // recompute limits from the rows as a consistency check
            let pts: Vec<(f64, f64)> = t
                .rows
                .iter()
                .filter_map(|r| r.minimum.as_ref().map(|p| (r.n as f64, p.energy)))
                .collect();
            if let Ok(e) = richardson(&pts, t.dim as f64) {
                println!("energy_min limit from rows {:.10}", e.limit);
            }
            Ok(true)
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.8}")).unwrap_or_else(|| "-".into())
}

fn write_profile(path: &Path, prof: &lattice_htst::thermo::EntropyProfile) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["site", "radius", "s"])?;
        for ((p, r), v) in prof.sites.iter().zip(&prof.radii).zip(&prof.values) {
            let coords: Vec<String> = p.coords(prof.dim).iter().map(|c| c.to_string()).collect();
            w.write_record([coords.join(" "), format!("{r}"), format!("{v:e}")])?;
        }
        w.flush()?;
    }
    atomic_write(path, &buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
