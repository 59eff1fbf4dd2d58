use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use plora_core::config::RunConfig;
use plora_core::engine::{self, PolicyKind};
use plora_core::experiment::{self, SweepParam, COMPARISON_HEADER, SWEEP_HEADER};
use plora_core::memory::AllocatorKind;
use plora_core::report;

#[derive(Parser)]
#[command(
    name = "plora",
    version,
    about = "Adapter serving simulator with predictive prefetch and paged memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its reports.
    Run(Common),
    /// Run several policy/allocator cells on the same workload.
    Compare {
        #[command(flatten)]
        common: Common,
        /// ablation, frag, policies, or a comma list like `reactive+block,oracle+prefetch+paged`.
        #[arg(long, default_value = "ablation")]
        matrix: String,
    },
    /// Repeat a run over several values of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// window (seconds), theta, rate or page_size (bytes).
        #[arg(long)]
        param: String,
        /// Comma-separated numbers.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; keys not given fall back to config/defaults.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long, value_enum)]
    allocator: Option<AllocatorArg>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the decision log.
    #[arg(long)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Reactive,
    Predictive,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum AllocatorArg {
    Paged,
    Block,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.policy {
            cfg.policy.kind = match p {
                PolicyArg::Reactive => PolicyKind::Reactive,
                PolicyArg::Predictive => PolicyKind::Predictive,
                PolicyArg::Oracle => PolicyKind::Oracle,
            };
        }
        if let Some(a) = self.allocator {
            cfg.allocator.kind = match a {
                AllocatorArg::Paged => AllocatorKind::Paged,
                AllocatorArg::Block => AllocatorKind::Block,
            };
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if self.verbose {
            cfg.output.verbose = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_run(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let requests = cfg.build_workload()?;
    let catalog = cfg.build_catalog(&requests)?;
    let result = engine::run(&cfg.engine_config(), &catalog, &requests)?;
    let files = report::write_run(&cfg.out_dir, &result, &cfg.to_toml(), cfg.output.verbose)?;
    let m = &result.metrics;
    println!(
        "{}: {}/{} requests, {:.2} req/s, ttft p50 {:.1} ms, cold starts {} (p50 {:.1} ms), hit rate {:.3}",
        m.label,
        m.completed,
        m.requests,
        m.throughput_rps,
        m.ttft.p50_ms,
        m.cold_start.count,
        m.cold_start_median_ms(),
        m.resident_hit_rate,
    );
    if let Some(a) = &m.accuracy {
        println!(
            "prediction accuracy {:.3} over {} intervals",
            a.accuracy, a.intervals
        );
    }
    println!(
        "wrote {}",
        files.metrics.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(())
}

fn slug(cell: &str) -> String {
    let s: String = cell
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

fn cmd_compare(common: &Common, spec: &str) -> Result<()> {
    let cfg = common.load()?;
    let cells = experiment::matrix(spec, &cfg.engine_config())?;
    let requests = cfg.build_workload()?;
    let catalog = cfg.build_catalog(&requests)?;
    let cmp = experiment::compare_policies(&cells, &catalog, &requests)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    for (cell, (name, result)) in cells.iter().zip(&cmp.runs) {
        let mut cell_cfg = cfg.clone();
        cell_cfg.policy = cell.config.policy.clone();
        cell_cfg.allocator = cell.config.allocator.clone();
        report::write_run(
            &cfg.out_dir.join(slug(name)),
            result,
            &cell_cfg.to_toml(),
            cfg.output.verbose,
        )?;
    }
    let path = cfg.out_dir.join("comparison.csv");
    report::write_table(&path, COMPARISON_HEADER, &cmp.rows())?;
    print!("{cmp}");
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_values(text: &str) -> Result<Vec<f64>> {
    let values = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .with_context(|| format!("--values: `{s}` is not a number"))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("--values: need at least one value");
    }
    Ok(values)
}

fn cmd_sweep(common: &Common, param: &str, values: &str) -> Result<()> {
    let param: SweepParam = param.parse().context("--param")?;
    let values = parse_values(values)?;
    let cfg = common.load()?;
    let sweep = experiment::sweep(&cfg, param, &values)?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join("sweep.csv");
    let rows = sweep.rows();
    report::write_table(&path, SWEEP_HEADER, &rows)?;
    let cols = [0, 1, 4, 5, 6, 8, 9, 11];
    let header: Vec<&str> = cols.iter().map(|&c| SWEEP_HEADER[c]).collect();
    let widths: Vec<usize> = cols
        .iter()
        .zip(&header)
        .map(|(&c, h)| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([h.len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    println!("{param}");
    for (h, w) in header.iter().zip(&widths) {
        print!("{h:>w$} ");
    }
    println!();
    for r in &rows {
        for (&c, w) in cols.iter().zip(&widths) {
            print!("{:>w$} ", r[c]);
        }
        println!();
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(common) => cmd_run(common),
        Command::Compare { common, matrix } => cmd_compare(common, matrix),
        Command::Sweep {
            common,
            param,
            values,
        } => cmd_sweep(common, param, values),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
