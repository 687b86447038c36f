use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use martingale_products::commutator::{kq_certify, KqConstant, KqCorpus, OpKind};
use martingale_products::harness::{
    decomposition_summary, emit_report, read_step_function, read_tree, run_all, run_suite, suite_names,
    CorpusConfig, ReportFormat, WORKERS_ENV,
};
use martingale_products::operators::WalshContext;
use martingale_products::Result;

#[derive(Parser)]
#[command(name = "mprod", version, about = "Martingale products, paraproducts and commutators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one verification suite, or `all`.
    Verify {
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict the suites to a single tree depth.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
    },
    /// Print the norms of Π₁(f,g), Π₂(f,g) and L(f,g).
    Decompose {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        f: PathBuf,
        #[arg(long)]
        g: PathBuf,
    },
    /// Estimate the commutator certificate constants of an operator.
    Certify {
        #[arg(long)]
        op: OpKind,
        /// Defaults to the operator's natural exponent.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        depths: Option<Vec<usize>>,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the certificate as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump a Walsh–Dirichlet or Fejér kernel as CSV (index, value).
    Kernel {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        depth: usize,
        #[arg(long, value_enum, default_value_t = Kernel::Fejer)]
        kind: Kernel,
        /// Dump Walsh coefficients instead of point values.
        #[arg(long)]
        spectrum: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kernel {
    Dirichlet,
    Fejer,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify {
            suite,
            config,
            seed,
            depth,
            format,
            out,
            workers,
        } => {
            let mut cfg = match config {
                Some(p) => CorpusConfig::from_file(p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = depth {
                cfg = cfg.with_depth(d);
            }
            if workers.is_some() {
                cfg.workers = workers;
            }
            let records = if suite == "all" {
                run_all(&cfg)?
            } else {
                run_suite(&suite, &cfg).inspect_err(|_e| {
                    eprintln!("known suites: all, {}", suite_names().join(", "));
                })?
            };
            match out {
                Some(p) => martingale_products::harness::write_report(&records, format, p)?,
                None => emit_report(&records, format, io::stdout().lock())?,
            }
            let failed = records.iter().filter(|r| !r.pass).count();
            eprintln!("{} records, {failed} failing", records.len());
            Ok(failed == 0)
        }
        Command::Decompose { tree, f, g } => {
            let tree = read_tree(tree)?;
            let f = read_step_function(&tree, f)?.martingale();
            let g = read_step_function(&tree, g)?.martingale();
            let mut out = io::stdout().lock();
            for (name, v) in decomposition_summary(&f, &g)? {
                writeln!(out, "{name:<28} {v:.12e}")?;
            }
            Ok(true)
        }
        Command::Certify {
            op,
            q,
            depths,
            samples,
            seed,
            out,
        } => {
            let corpus = KqCorpus {
                depths: depths.unwrap_or_else(|| match op {
                    OpKind::Fractional => vec![4, 6, 8],
                    _ => KqCorpus::default().depths,
                }),
                samples,
                seed,
                ..KqCorpus::default()
            };
            let cert = kq_certify(op, q.unwrap_or(op.default_q()), &corpus)?;
            let mut w = io::stdout().lock();
            writeln!(w, "operator {} with q = {}", cert.op, cert.q)?;
            write!(w, "{:<18}", "constant")?;
            for row in &cert.rows {
                write!(w, " {:>12}", format!("depth {}", row.depth))?;
            }
            writeln!(w, " {:>10}", "max/min")?;
            for c in KqConstant::ALL {
                write!(w, "{:<18}", c.name())?;
                for v in cert.values(c) {
                    write!(w, " {v:>12.5e}")?;
                }
                writeln!(w, " {:>10.4}", cert.spread(c))?;
            }
            if let Some(e) = cert.max_shortcut_error() {
                writeln!(w, "commuting identity defect {e:.3e}")?;
            }
            if let Some(p) = out {
                std::fs::write(p, serde_json::to_string_pretty(&cert)?)?;
            }
            Ok(cert.all_finite())
        }
        Command::Kernel {
            n,
            depth,
            kind,
            spectrum,
        } => {
            let ctx = WalshContext::new(depth)?;
            let values = match (kind, spectrum) {
                (Kernel::Dirichlet, false) => ctx.dirichlet_kernel(n)?.into_values(),
                (Kernel::Fejer, false) => ctx.fejer_kernel(n)?.into_values(),
                (Kernel::Dirichlet, true) => ctx.fwht(&ctx.dirichlet_kernel(n)?)?,
                (Kernel::Fejer, true) => ctx.fejer_spectrum(n)?,
            };
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record(["index", "value"])?;
            for (i, v) in values.iter().enumerate() {
                w.write_record([i.to_string(), v.to_string()])?;
            }
            w.flush()?;
            Ok(true)
        }
    }
}
