use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dadm::harness::{
    emit_losses, emit_runs, emit_slice, emit_table, run_experiment, run_experiment_with_losses, run_once,
    sig6, verify, ExperimentConfig, Preset, RunReport, CONFIG_ENV,
};
use dadm::schemes::Scheme;
use dadm::Result;

/// Exit code when the experiment ran but the majority of runs diverged.
const EXIT_NOT_CONVERGED: u8 = 3;
/// Exit code when a verification check failed.
const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "dadm", version, about = "Deep BSDE solvers and their benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run R seeded solves of one scheme and write the summary table.
    Solve(Common),
    /// Run every scheme on the same problem and write one table row per scheme.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated schemes to include.
        #[arg(long, default_value = "dadm,dbdp1,dbdp2,deepbsde")]
        schemes: String,
    },
    /// Train once (seed of run 0) and write Û_i, Ẑ_i along the diagonal through x0.
    Slice {
        #[command(flatten)]
        common: Common,
        /// Time step of the slice.
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Half-width of the slice around x0.
        #[arg(long, default_value_t = 2.0)]
        width: f64,
        #[arg(long, default_value_t = 101)]
        points: usize,
    },
    /// Run the gradient, derivative-bound, PDE-residual and quadrature checks.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Flat key=value file; defaults to the path in the environment variable DADM_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Budget preset applied before the config file: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long = "T")]
    t: Option<String>,
    #[arg(long = "N")]
    n: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other setting, e.g. `--set lr=0.005 --set x0=1,1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.preset {
            cfg.apply_preset(p.parse::<Preset>()?);
        }
        let path = self.config.clone().or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        if let Some(path) = path {
            cfg.apply_file(&path)?;
        }
        let named = [
            ("problem", &self.problem),
            ("scheme", &self.scheme),
            ("d", &self.d),
            ("T", &self.t),
            ("N", &self.n),
            ("runs", &self.runs),
            ("seed", &self.seed),
            ("out", &self.out),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| dadm::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(r: &RunReport) {
    eprintln!(
        "{} on {}: avg {} std {} rel_err {}% converged {}/{} wall {:.1}s {}",
        r.scheme,
        r.problem,
        sig6(r.mean),
        sig6(r.std),
        r.rel_err_pct.map(sig6).unwrap_or_else(|| "-".into()),
        r.converged_runs,
        r.runs.len(),
        r.total_wall_time().as_secs_f64(),
        r.notes()
    );
}

fn write_outputs(reports: &[RunReport], out: &Path) -> Result<()> {
    emit_table(reports, &out.join("table.csv"))?;
    emit_runs(reports, &out.join("runs.csv"))?;
    eprintln!("wrote {}", out.join("table.csv").display());
    Ok(())
}

fn exit_for(reports: &[RunReport]) -> ExitCode {
    if reports.iter().any(RunReport::not_converged) {
        ExitCode::from(EXIT_NOT_CONVERGED)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve(common) => {
            let cfg = common.load()?;
            let (report, losses) = run_experiment_with_losses(&cfg)?;
            print_report(&report);
            let reports = [report];
            write_outputs(&reports, &cfg.out_dir)?;
            if cfg.solver.record_losses {
                for (r, l) in losses.iter().enumerate() {
                    emit_losses(l, &cfg.out_dir.join(format!("losses_run{r}.csv")))?;
                }
            }
            Ok(exit_for(&reports))
        }
        Command::Bench { common, schemes } => {
            let base = common.load()?;
            let mut reports = Vec::new();
            for s in schemes.split(',') {
                let mut cfg = base.clone();
                cfg.scheme = s.parse::<Scheme>()?;
                let report = run_experiment(&cfg)?;
                print_report(&report);
                reports.push(report);
            }
            write_outputs(&reports, &base.out_dir)?;
            Ok(exit_for(&reports))
        }
        Command::Slice { common, step, width, points } => {
            let mut cfg = common.load()?;
            cfg.solver.record_losses = true;
            let run = run_once(&cfg, 0)?;
            let stack = run.stack.ok_or_else(|| {
                dadm::Error::Unsupported(format!("{} trains no backward stack to slice", cfg.scheme))
            })?;
            if step >= stack.n_steps() {
                return Err(dadm::Error::Config(format!("step must lie in 0..{}", stack.n_steps())));
            }
            let path = cfg.out_dir.join(format!("slice_{}_step{step}.csv", cfg.scheme));
            let meta = format!("problem={} scheme={} step={step} t={}", cfg.problem, cfg.scheme, stack.grid().time(step));
            emit_slice(&stack, step, width, points, &path, Some(&meta))?;
            emit_losses(&run.result.losses, &cfg.out_dir.join(format!("losses_{}.csv", cfg.scheme)))?;
            eprintln!("wrote {}", path.display());
            Ok(if run.result.converged { ExitCode::SUCCESS } else { ExitCode::from(EXIT_NOT_CONVERGED) })
        }
        Command::Verify { seed, out } => {
            let lines = verify::run_suite(seed)?;
            for l in &lines {
                println!("{}", l.render());
            }
            verify::write_summary(&lines, &out.join("verify.csv"))?;
            Ok(if lines.iter().all(|l| l.passed) { ExitCode::SUCCESS } else { ExitCode::from(EXIT_VERIFY_FAILED) })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
