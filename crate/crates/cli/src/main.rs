use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use deeplcc::experiments::{
    collect_data, compare, mean_costs, read_collected, report_dir, standard_conditions, sweep_imperfect, write_collected,
    write_degradation, write_run, write_summary, write_timing, ClosedLoop, Mode, RunRecord, ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "deeplcc", version, about = "Data-enabled predictive leading cruise control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect offline excitation data and write the logs.
    Collect(Common),
    /// Run one closed-loop experiment.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Directory written by `collect`; data is collected afresh when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run all controllers over several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Degradation of the distributed controller under iteration caps and delay.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Re-verify the runs in a directory and rewrite summaries and plot data.
    Report {
        /// Directory holding `*.run.json` files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML). Overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// moderate, large_5, large_10 or large_20.
    #[arg(long, default_value = "moderate")]
    preset: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Sets all scenario seeds (first seed for multi-seed commands).
    #[arg(long)]
    seed: Option<u64>,
    /// ADMM iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Message delay in control steps.
    #[arg(long)]
    delay_steps: Option<usize>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Central,
    Distributed,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::None => Mode::None,
            ModeArg::Central => Mode::Central,
            ModeArg::Distributed => Mode::Distributed,
        }
    }
}

impl Common {
    fn scenario(&self) -> Result<ScenarioConfig> {
        let mut cfg = match &self.config {
            Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ScenarioConfig::preset(&self.preset)?,
        };
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(k) = self.max_iter {
            cfg.admm.policy.max_iterations = k;
        }
        if let Some(d) = self.delay_steps {
            cfg.admm.policy.delay_steps = d;
        }
        if self.duration.is_some() {
            cfg.duration = self.duration;
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out)?;
        cfg.save(&self.out.join("scenario.toml"))?;
        Ok(cfg)
    }

    fn seeds(&self, count: u64) -> Vec<u64> {
        let first = self.seed.unwrap_or(1);
        (first..first + count).collect()
    }
}

fn print_record(r: &RunRecord) {
    println!(
        "{:<12} {:<11} seed {:<4} cost {:>12.4e}  fuel {:>10.2} mL  iters {:>6.2}  solve {:>8.4} s",
        r.name, r.mode, r.seed, r.real_cost, r.fuel, r.mean_iterations, r.mean_solve_time
    );
}

fn collect(common: &Common) -> Result<()> {
    let cfg = common.scenario()?;
    let data = collect_data(&cfg)?;
    write_collected(&data, &common.out)?;
    println!(
        "collected {} subsystem logs ({} samples){} in {} attempt(s) -> {}",
        data.local.len(),
        cfg.data.local,
        data.central.as_ref().map_or(String::new(), |c| format!(" and a centralized log ({} samples)", c.len())),
        data.attempts,
        common.out.display()
    );
    Ok(())
}

fn run(common: &Common, mode: Option<ModeArg>, data_dir: Option<&Path>) -> Result<()> {
    let cfg = common.scenario()?;
    let mode = mode.map(Mode::from).unwrap_or(cfg.mode);
    let data = match data_dir {
        Some(d) => read_collected(d)?,
        None => collect_data(&cfg)?,
    };
    let mut sim = ClosedLoop::new(&cfg, mode, &data)?;
    let outcome = sim.run();
    let rec = write_run(&sim.metrics(), &common.out)?;
    if let Err(e) = outcome {
        bail!("run aborted after {} steps ({e}); partial trajectory written to {}", rec.steps, common.out.display());
    }
    write_summary(std::slice::from_ref(&rec), &common.out.join("summary.csv"))?;
    write_timing(std::slice::from_ref(&rec), &common.out.join("timing.csv"))?;
    print_record(&rec);
    Ok(())
}

fn compare_cmd(common: &Common, seeds: u64) -> Result<()> {
    let cfg = common.scenario()?;
    let runs = compare(&cfg, &common.seeds(seeds), &Mode::ALL)?;
    let mut records = Vec::with_capacity(runs.len());
    for m in &runs {
        let r = write_run(m, &common.out)?;
        print_record(&r);
        records.push(r);
    }
    write_summary(&records, &common.out.join("summary.csv"))?;
    write_timing(&records, &common.out.join("timing.csv"))?;
    for (mode, cost) in mean_costs(&runs, &Mode::ALL) {
        println!("mean real cost {mode:<11} {cost:.4e}");
    }
    Ok(())
}

fn sweep(common: &Common, seeds: u64) -> Result<()> {
    let cfg = common.scenario()?;
    let conditions = standard_conditions(cfg.admm.policy.max_iterations);
    let table = sweep_imperfect(&cfg, &conditions, &common.seeds(seeds))?;
    write_degradation(&table, &common.out.join("degradation.csv"))?;
    println!("ideal mean cost {:.4e} over {} seeds", table.ideal_cost, table.seeds.len());
    for r in &table.rows {
        println!(
            "max {:>3} iterations, delay {:.2} s: cost {:.4e} ({:+.2}%)",
            r.condition.max_iterations,
            r.condition.delay_seconds(),
            r.mean_cost,
            r.degradation_percent
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Collect(c) => collect(&c),
        Command::Run { common, mode, data } => run(&common, mode, data.as_deref()),
        Command::Compare { common, seeds } => compare_cmd(&common, seeds),
        Command::Sweep { common, seeds } => sweep(&common, seeds),
        Command::Report { out } => {
            let records = report_dir(&out)?;
            if records.is_empty() {
                bail!("no runs found in {}", out.display());
            }
            for r in &records {
                print_record(r);
            }
            println!("{} runs verified", records.len());
            Ok(())
        }
    }
}
