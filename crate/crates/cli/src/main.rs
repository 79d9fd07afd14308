//! `varlab`: command-line driver for corpus generation, sampler fitting,
//! training, variance decomposition, sampler benchmarks, the two-group token
//! checks and run reports.
//!
//! Every command writes `manifest.json` with its fully resolved
//! configuration into `--out`. Exit codes: 0 success, 1 invalid input, 2
//! numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use varlab::corpus::dump_corpus;
use varlab::denoiser::Denoiser;
use varlab::lab::{bench_samplers, report, BenchConfig, RunRecord};
use varlab::plot;
use varlab::ppots::{estimate_scatter, fit_epr, FitArtifact};
use varlab::syrm_lab::{syrm_report, GroupModel};
use varlab::trainer::{fmt_f64, method_config, run_matrix, train_from, TrainConfig, TrainSetup, METHODS};
use varlab::variance::decompose;
use varlab::{LabError, Result, RngStream};

#[derive(Parser)]
#[command(name = "varlab", version, about = "Variance-reduction laboratory for masked diffusion training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Root seed; overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic chain corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
    },
    /// Estimate the rate scatter on a model and fit the EPR density.
    FitPpots {
        #[command(flatten)]
        common: Common,
        /// Training config supplying corpus, model size, eligibility and fit settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model checkpoint; defaults to the seeded initialization.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named method preset applied on top of the config.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train every (method, seed) pair.
    RunMatrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated method presets (default: all).
        #[arg(long)]
        methods: Option<String>,
        /// Comma-separated seeds (default: 42,731,20231, or --seed alone).
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Split loss variance into pattern, rate and data components.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        a: usize,
        #[arg(long, default_value_t = 32)]
        b: usize,
        #[arg(long, default_value_t = 32)]
        c: usize,
    },
    /// Compare rate samplers analytically and by simulation.
    BenchSamplers {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check the response-versus-syntax masking variance results on a group model.
    SyrmCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
    },
    /// Aggregate run directories into a per-seed table and loss plot.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directories, each holding run.json and runlog.csv.
        #[arg(long = "runs", num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                LabError::Numerical(_) => 2,
                _ => 1,
            })
        }
    }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn prepare(common: &Common, command: &str, seed: u64, config: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(&common.out)?;
    write_json(
        &common.out.join("manifest.json"),
        &json!({
            "command": command,
            "seed": seed,
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
        }),
    )
}

fn load_model(path: &Path) -> Result<Denoiser> {
    Denoiser::load(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn train_config(common: &Common, config: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenCorpus { common, n, seq_len } => {
            let seed = common.seed.unwrap_or(0);
            prepare(&common, "gen-corpus", seed, json!({ "n": n, "seq_len": seq_len }))?;
            let corpus = varlab::corpus::generate_corpus(n, seq_len, &RngStream::root(seed).derive("corpus", 0))?;
            dump_corpus(&corpus, std::fs::File::create(common.out.join("corpus.tsv"))?)?;
            Ok(())
        }
        Cmd::FitPpots { common, config, model } => {
            let cfg = train_config(&common, config.as_deref())?;
            prepare(&common, "fit-ppots", cfg.seed, json!({ "train": cfg, "model": model }))?;
            let mut setup = TrainSetup::new(&cfg)?;
            if let Some(m) = &model {
                setup.model = load_model(m)?;
            }
            let root = RngStream::root(cfg.seed);
            let p = cfg.ppots;
            let scatter = estimate_scatter(
                &setup.model,
                &setup.corpus,
                &setup.vocab,
                cfg.eligibility,
                p.a.min(setup.corpus.len()),
                p.b,
                p.c,
                &root.derive("ppots-scatter", 0),
            )?;
            let fit = fit_epr(&scatter.points, p.restarts, &root.derive("ppots-fit", 0))?;
            let art = FitArtifact::new(&fit, &scatter.points);
            write_json(&common.out.join("fit.json"), &art)?;
            let mut csv = String::from("t,g,v,p,g_stderr\n");
            for (pt, se) in scatter.points.iter().zip(&scatter.g_stderr) {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fmt_f64(pt.t),
                    fmt_f64(pt.g_hat),
                    fmt_f64(pt.v_hat),
                    fmt_f64(pt.p_hat),
                    fmt_f64(*se)
                ));
            }
            std::fs::write(common.out.join("scatter.csv"), csv)?;
            let density = fit.params.density()?;
            let b = scatter.points.len() as f64;
            let ts: Vec<f64> = scatter.points.iter().map(|p| p.t).collect();
            let ps: Vec<f64> = scatter.points.iter().map(|p| p.p_hat * b).collect();
            let curve = plot::Series {
                name: "EPR fit".into(),
                points: (0..=200)
                    .map(|i| {
                        let t = i as f64 / 200.0;
                        (t, varlab::tsampler::Density::pdf(&density, t))
                    })
                    .collect(),
            };
            std::fs::write(common.out.join("fit.svg"), plot::scatter_vs_fit(&ts, &ps, vec![curve]))?;
            Ok(())
        }
        Cmd::Train { common, config, method } => {
            let mut cfg = train_config(&common, config.as_deref())?;
            if let Some(m) = &method {
                cfg = method_config(&cfg, m)?;
            }
            prepare(&common, "train", cfg.seed, json!({ "train": cfg, "method": method }))?;
            let label = method.clone().unwrap_or_else(|| "custom".into());
            write_run(&common.out, &cfg, &label, "matched")
        }
        Cmd::RunMatrix { common, config, methods, seeds } => {
            let cfg = train_config(&common, config.as_deref())?;
            let methods: Vec<String> = match methods {
                Some(m) => m.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                None => METHODS.iter().map(|s| s.to_string()).collect(),
            };
            let seeds: Vec<u64> = match (seeds, common.seed) {
                (Some(s), _) => s
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| LabError::Invalid(format!("bad seed `{x}`"))))
                    .collect::<Result<_>>()?,
                (None, Some(s)) => vec![s],
                (None, None) => vec![42, 731, 20231],
            };
            prepare(
                &common,
                "run-matrix",
                cfg.seed,
                json!({ "train": cfg, "methods": methods, "seeds": seeds }),
            )?;
            let started = Instant::now();
            let matrix = run_matrix(&methods, &seeds, &cfg)?;
            std::fs::write(common.out.join("matrix.csv"), matrix.to_csv())?;
            write_json(&common.out.join("synergy.json"), &matrix.synergy())?;
            let spreads: Vec<_> = methods
                .iter()
                .map(|m| json!({ "method": m, "mean_last5": matrix.mean_last5(m), "spread_last5": matrix.spread_last5(m) }))
                .collect();
            write_json(&common.out.join("methods.json"), &spreads)?;
            let timings: Vec<_> = matrix
                .rows
                .iter()
                .map(|r| json!({ "method": r.method, "seed": r.seed, "budget": r.budget, "wall_seconds": r.wall_seconds }))
                .collect();
            write_json(
                &common.out.join("timings.json"),
                &json!({ "rows": timings, "wall_seconds": started.elapsed().as_secs_f64() }),
            )?;
            let mut dirs = Vec::new();
            for r in &matrix.rows {
                let dir = common.out.join("runs").join(format!("{}-{}-{}", r.method.replace('+', "_"), r.seed, r.budget));
                std::fs::create_dir_all(&dir)?;
                if let Some(log) = &r.log {
                    std::fs::write(dir.join("runlog.csv"), log.to_csv())?;
                }
                write_json(
                    &dir.join("run.json"),
                    &RunRecord { method: r.method.clone(), seed: r.seed, budget: r.budget.clone(), summary: r.summary.clone() },
                )?;
                write_json(&dir.join("timings.json"), &json!({ "wall_seconds": r.wall_seconds }))?;
                dirs.push(dir);
            }
            let rep = report(&dirs)?;
            std::fs::write(common.out.join("report.csv"), rep.table_csv())?;
            write_json(&common.out.join("report_timings.json"), &rep.timings())?;
            std::fs::write(common.out.join("loss_curves.svg"), rep.loss_svg())?;
            Ok(())
        }
        Cmd::Decompose { common, config, model, a, b, c } => {
            let cfg = train_config(&common, config.as_deref())?;
            prepare(
                &common,
                "decompose",
                cfg.seed,
                json!({ "train": cfg, "model": model, "a": a, "b": b, "c": c }),
            )?;
            let mut setup = TrainSetup::new(&cfg)?;
            if let Some(m) = &model {
                setup.model = load_model(m)?;
            }
            let rep = decompose(
                &setup.model,
                &setup.corpus,
                &setup.vocab,
                cfg.eligibility,
                a.min(setup.corpus.len()),
                b,
                c,
                &RngStream::root(cfg.seed).derive("decompose-run", 0),
            )?;
            write_json(&common.out.join("decomposition.json"), &rep)?;
            let csv = format!(
                "component,value,stderr\npattern,{},{}\nrate,{},{}\ndata,{},{}\ntotal,{},\nsum,{},{}\n",
                fmt_f64(rep.comp_a),
                fmt_f64(rep.stderr_a),
                fmt_f64(rep.comp_b),
                fmt_f64(rep.stderr_b),
                fmt_f64(rep.comp_c),
                fmt_f64(rep.stderr_c),
                fmt_f64(rep.total),
                fmt_f64(rep.sum()),
                fmt_f64(rep.combined_stderr())
            );
            std::fs::write(common.out.join("decomposition.csv"), csv)?;
            Ok(())
        }
        Cmd::BenchSamplers { common, config } => {
            let mut cfg: BenchConfig = read_config(config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            prepare(&common, "bench-samplers", cfg.seed, serde_json::to_value(&cfg)?)?;
            let rep = bench_samplers(&cfg)?;
            std::fs::write(common.out.join("bench.csv"), rep.to_csv())?;
            write_json(&common.out.join("fit.json"), &rep.fit)?;
            std::fs::write(common.out.join("scatter_fit.svg"), &rep.svg)?;
            Ok(())
        }
        Cmd::SyrmCheck { common, config, draws } => {
            let gm: GroupModel = read_config(config.as_deref())?;
            let seed = common.seed.unwrap_or(0);
            prepare(&common, "syrm-check", seed, json!({ "model": gm, "draws": draws }))?;
            let rep = syrm_report(&gm, draws, &RngStream::root(seed).derive("syrm-check", 0))?;
            write_json(&common.out.join("verdict.json"), &rep)?;
            Ok(())
        }
        Cmd::Report { common, runs } => {
            let seed = common.seed.unwrap_or(0);
            prepare(&common, "report", seed, json!({ "runs": runs }))?;
            let rep = report(&runs)?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::write(common.out.join("report.csv"), rep.table_csv())?;
            write_json(&common.out.join("report_timings.json"), &rep.timings())?;
            std::fs::write(common.out.join("loss_curves.svg"), rep.loss_svg())?;
            Ok(())
        }
    }
}

/// Train and write `runlog.csv`, `summary.json`, `run.json`, `model.bin`,
/// `loss.svg` and `timings.json` (plus `fit.json` for fitted samplers).
fn write_run(out: &Path, cfg: &TrainConfig, method: &str, budget: &str) -> Result<()> {
    let started = Instant::now();
    let setup = TrainSetup::new(cfg)?;
    let (model, log) = train_from(cfg, setup)?;
    let wall = started.elapsed().as_secs_f64();
    std::fs::write(out.join("runlog.csv"), log.to_csv())?;
    write_json(&out.join("summary.json"), &log.summary)?;
    write_json(
        &out.join("run.json"),
        &RunRecord { method: method.into(), seed: cfg.seed, budget: budget.into(), summary: log.summary.clone() },
    )?;
    if let Some(fit) = &log.fit {
        write_json(&out.join("fit.json"), fit)?;
    }
    model.save(std::io::BufWriter::new(std::fs::File::create(out.join("model.bin"))?))?;
    let curve: Vec<f64> = log.steps.iter().map(|r| r.loss).collect();
    std::fs::write(
        out.join("loss.svg"),
        plot::loss_curves(&[(method.into(), curve, log.summary.first5_mean, log.summary.last5_mean)]),
    )?;
    write_json(&out.join("timings.json"), &json!({ "wall_seconds": wall }))?;
    Ok(())
}
