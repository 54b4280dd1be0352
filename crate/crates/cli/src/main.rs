use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use dtbc_core::coeffs::EnergyNormParams;
use dtbc_core::config::{parse_config, RunConfig};
use dtbc_core::dtbc::{DtbcKernel, ModeCoefficients};
use dtbc_core::stepper::{run, write_norms_csv, write_snapshots_csv, BoundaryMode};
use dtbc_core::verify::{convergence_study, positivity_study, stability_study, tbc_exactness, ErrorNorm};

#[derive(Parser)]
#[command(name = "schro-dtbc", version, about = "Crank-Nicolson FEM with discrete transparent boundaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-step one configuration and write snapshots and norms.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write the boundary kernels R_q^m.
    Kernel {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma list of transverse mode indices.
        #[arg(long, default_value = "all")]
        modes: String,
        /// Kernel length; defaults to time.steps of the config.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Compare the transparent-boundary run with a big-domain reference.
    VerifyTbc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 48.0)]
        xbig: f64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Joint refinement study in τ and h.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        /// Norm whose order is judged: l2rho, energy-sdiff or energy.
        #[arg(long, default_value = "l2rho")]
        norm: String,
        /// Expected order; 2 for l2rho and energy-sdiff, 1 for energy.
        #[arg(long)]
        expect: Option<f64>,
        /// Allowed distance from the expected order.
        #[arg(long)]
        band: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Slacks of both stability bounds over random forcings.
    Stability {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Random trace histories for the boundary positivity forms.
    Lemma1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        max_steps: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut f = create(dir, name)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn verdict(pass: bool, line: String) -> bool {
    println!("{} {line}", if pass { "PASS" } else { "FAIL" });
    pass
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config: &'a RunConfig,
    energy: EnergyNormParams,
    mode: BoundaryMode,
    steps: usize,
    dofs: usize,
    elapsed_seconds: f64,
}

#[derive(Serialize)]
struct ModeRecord {
    q: usize,
    weight: f64,
    coefficients: ModeCoefficients,
}

fn parse_norm(s: &str) -> Result<ErrorNorm> {
    ErrorNorm::ALL
        .into_iter()
        .find(|n| n.name() == s)
        .with_context(|| format!("unknown norm {s:?}; use l2rho, energy-sdiff or energy"))
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run { config, out } => {
            let c = load(&config)?.filled()?;
            let r = run(&c)?;
            write_snapshots_csv(&r, &mut create(&out, "snapshots.csv")?)?;
            write_norms_csv(&r, &mut create(&out, "norms.csv")?)?;
            write_json(
                &out,
                "meta.json",
                &RunMeta {
                    config: &c,
                    energy: r.energy,
                    mode: r.mode,
                    steps: r.steps,
                    dofs: r.mesh.dofs(),
                    elapsed_seconds: r.elapsed_seconds,
                },
            )?;
            let last = r.norms.last().expect("initial norm is always recorded");
            println!("{} steps, final L2 norm {:.6e}, {:.2} s", r.steps, last.l2rho, r.elapsed_seconds);
            Ok(true)
        }
        Command::Kernel { config, modes, steps, out } => {
            let c = load(&config)?;
            let sc = c.build()?;
            let steps = steps.unwrap_or(sc.time.steps());
            if steps == 0 {
                bail!("kernel needs at least one step");
            }
            let kernel = DtbcKernel::new(sc.field.physics(), &sc.mesh, sc.time.final_time() / steps as f64, steps)?;
            let selected: Vec<usize> = if modes == "all" {
                kernel.modes().iter().map(|m| m.q).collect()
            } else {
                modes
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad mode index {s:?}")))
                    .collect::<Result<_>>()?
            };
            let mut f = create(&out, "kernel.csv")?;
            writeln!(f, "q,m,re,im,abs")?;
            let mut records = Vec::new();
            for q in selected {
                let mk = kernel
                    .modes()
                    .iter()
                    .find(|m| m.q == q)
                    .with_context(|| format!("mode {q} does not exist on this mesh"))?;
                for (m, r) in mk.values.iter().enumerate() {
                    writeln!(f, "{q},{m},{:e},{:e},{:e}", r.re, r.im, r.norm())?;
                }
                records.push(ModeRecord { q, weight: mk.weight, coefficients: mk.coefficients });
            }
            write_json(&out, "modes.json", &records)?;
            println!("{} modes, {} terms each", records.len(), steps + 1);
            Ok(true)
        }
        Command::VerifyTbc { config, xbig, tol, out } => {
            let sc = load(&config)?.build()?;
            let r = tbc_exactness(&sc, xbig, tol)?;
            write_json(&out, "exactness.json", &r)?;
            let a = verdict(
                r.pass,
                format!(
                    "exactness: max deviation {:.3e}, tolerance {:.1e}, reference floor {:.1e}{}",
                    r.max_deviation,
                    r.tolerance,
                    r.floor,
                    if r.reference_resolved { "" } else { " (big domain too small; raise --xbig)" }
                ),
            );
            let b = verdict(
                r.control_pass,
                format!("control: Dirichlet run deviates by {:.3e} (needs > 1e-2)", r.control_max_deviation),
            );
            Ok(a && b)
        }
        Command::Converge { config, levels, norm, expect, band, out } => {
            let norm = parse_norm(&norm)?;
            let sc = load(&config)?.build()?;
            let r = convergence_study(&sc, levels)?;
            let mut f = create(&out, "convergence.csv")?;
            writeln!(f, "level,tau,h,l2rho,energy_sdiff,energy")?;
            for l in &r.levels {
                writeln!(f, "{},{:e},{:e},{:e},{:e},{:e}", l.level, l.tau, l.h, l.l2rho, l.energy_sdiff, l.energy)?;
            }
            write_json(&out, "convergence.json", &r)?;
            let expect = expect.unwrap_or(if norm == ErrorNorm::Energy { 1.0 } else { 2.0 });
            let band = band.unwrap_or(match norm {
                ErrorNorm::L2rho | ErrorNorm::Energy => 0.2,
                ErrorNorm::EnergySdiff => 0.25,
            });
            let fit = r.fit(norm);
            let drop = fit.order_without_coarsest.unwrap_or(fit.order);
            Ok(verdict(
                (fit.order - expect).abs() <= band && (fit.order - drop).abs() <= 0.1,
                format!(
                    "{} order {:.3} (95% CI {:.3}..{:.3}, without coarsest {:.3}), expected {expect} ± {band}",
                    norm.name(),
                    fit.order,
                    fit.ci_low,
                    fit.ci_high,
                    drop
                ),
            ))
        }
        Command::Stability { config, seeds, out } => {
            let c = load(&config)?;
            let reports = stability_study(&c, seeds)?;
            let mut f = create(&out, "slacks.csv")?;
            writeln!(f, "seed,l2_max,l2_bound,l2_slack,energy_max,energy_bound,energy_slack,pass")?;
            let mut all = true;
            for r in &reports {
                let ok = r.passes(1e-10);
                all &= ok;
                writeln!(
                    f,
                    "{},{:e},{:e},{:e},{:e},{:e},{:e},{ok}",
                    r.seed, r.l2_max, r.l2_bound, r.l2_slack, r.energy_max, r.energy_bound, r.energy_slack
                )?;
            }
            let min_rel = reports
                .iter()
                .map(|r| (r.l2_slack / r.l2_bound).min(r.energy_slack / r.energy_bound))
                .fold(f64::INFINITY, f64::min);
            Ok(verdict(all, format!("{} forcings, smallest relative slack {min_rel:.3e}", reports.len())))
        }
        Command::Lemma1 { config, samples, max_steps, out } => {
            let c = load(&config)?;
            if max_steps == 0 {
                bail!("--max-steps must be >= 1");
            }
            let rows = positivity_study(samples, c.seed, c.dimension, max_steps)?;
            let mut f = create(&out, "lemma1.csv")?;
            writeln!(f, "sample,dimension,steps,s1_min,s2_min")?;
            let mut worst = f64::INFINITY;
            for r in &rows {
                worst = worst.min(r.s1_min).min(r.s2_min);
                writeln!(f, "{},{},{},{:e},{:e}", r.sample, r.dimension, r.steps, r.s1_min, r.s2_min)?;
            }
            Ok(verdict(worst >= -1e-12, format!("{} histories, smallest S/scale {worst:.3e}", rows.len())))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("SCHRO_DTBC_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not cap threads: {e}");
                }
            }
            _ => {
                eprintln!("error: SCHRO_DTBC_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
