use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fadnest::engine::EngineConfig;
use fadnest::fad::check_trace;
use fadnest::modeling::{Mlp, MlpConfig};
use fadnest::ops::{FadClass, Registry, Saved};
use fadnest::{static_graph, Mode};
use fadnest_bench::{batch_for, BenchConfig, ConfigError, Format};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Footprint and op-count benchmarks for the fadnest engine"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured grid under each mode and emit a report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config file's output format.
        #[arg(long)]
        format: Option<Format>,
        /// Overrides the config file's output path; stdout if neither is set.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Rewrite fad subgraphs of a static graph file.
    Rewrite {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the op registry.
    Ops,
    /// Dump the state-machine trace of each grid entry in fad mode.
    Trace {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some()
            || matches!(
                c.downcast_ref::<fadnest::Error>(),
                Some(
                    fadnest::Error::Parse { .. }
                        | fadnest::Error::Config(_)
                        | fadnest::Error::Graph(_)
                )
            )
    })
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            config,
            format,
            out,
        } => {
            let cfg = BenchConfig::load(&config)?;
            let report = fadnest_bench::run(&cfg)?;
            let format = format.unwrap_or(cfg.output.format);
            let path = out.or_else(|| cfg.output.path.as_ref().map(PathBuf::from));
            match path {
                Some(p) => {
                    let f = fs::File::create(&p)
                        .with_context(|| format!("creating {}", p.display()))?;
                    report.write(format, io::BufWriter::new(f))
                }
                None => report.write(format, io::stdout().lock()),
            }
        }
        Cmd::Gradcheck { config, eps } => {
            let cfg = BenchConfig::load(&config)?;
            let mut out = io::stdout().lock();
            for c in cfg.cells() {
                let model = Mlp::new(&c)?;
                let r = fadnest::gradcheck::check_mlp(&model, c.mode, &batch_for(&c), eps)?;
                writeln!(
                    out,
                    "{} {} {} params={} max_rel_error={:e}",
                    c.mode.name(),
                    c.activation,
                    c.widths
                        .iter()
                        .map(|w| w.to_string())
                        .collect::<Vec<_>>()
                        .join("-"),
                    r.params,
                    r.max_rel_error
                )?;
            }
            Ok(())
        }
        Cmd::Rewrite { input, out } => {
            let text = fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let g = static_graph::parse(&text).with_context(|| input.display().to_string())?;
            let (r, summary) = static_graph::optimize(&g)?;
            fs::write(&out, static_graph::write(&r))
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "{} subgraphs, {} rewritten, save-edges {} -> {}",
                summary.subgraphs,
                summary.rewritten.len(),
                summary.save_edges_before,
                summary.save_edges_after
            );
            Ok(())
        }
        Cmd::Ops => {
            let mut out = io::stdout().lock();
            for k in Registry::builtin().iter() {
                let d = k.def();
                let class = match d.fad_class {
                    FadClass::FadUnary => "fad-unary",
                    FadClass::FadBinary => "fad-binary",
                    FadClass::Nfad => "nfad",
                };
                let saves: Vec<String> = d
                    .saves_for_vjp
                    .iter()
                    .map(|s| match s {
                        Saved::Input(j) => format!("in{j}"),
                        Saved::Output => "out".to_string(),
                    })
                    .collect();
                let saves = if saves.is_empty() {
                    "-".to_string()
                } else {
                    saves.join(",")
                };
                writeln!(out, "{:<12} {:<11} {saves}", d.name, class)?;
            }
            Ok(())
        }
        Cmd::Trace { config } => {
            let cfg = BenchConfig::load(&config)?;
            let mut out = io::stdout().lock();
            for e in &cfg.grid {
                let c = MlpConfig::new(e.widths.clone(), e.activation, e.batch, e.seed, Mode::Fad);
                let model = Mlp::new(&c)?;
                let (_, engine) =
                    model.pass_with(EngineConfig::new(Mode::Fad).with_trace(), &batch_for(&c))?;
                writeln!(out, "# {} {:?}", c.activation, c.widths)?;
                for r in engine.trace() {
                    writeln!(out, "{}", r.line())?;
                }
                match check_trace(engine.trace(), true) {
                    Ok(()) => writeln!(out, "# trace ok")?,
                    Err(v) => anyhow::bail!("trace violation at {v}"),
                }
            }
            Ok(())
        }
    }
}
