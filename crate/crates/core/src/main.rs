use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cran_sim::sim::{self, ExperimentConfig, Scheme, Summary, Sweep, SweepParameter};
use cran_sim::{dbm_to_watts, Result};

#[derive(Parser)]
#[command(name = "cran-sim", version, about = "Queue-aware hybrid CoMP simulator for fronthaul-limited C-RAN clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration for every selected scheme.
    Run(Common),
    /// Run a grid over one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// arrival_rate, max_power_dbm or max_fronthaul_mbps.
        #[arg(long)]
        parameter: SweepParameter,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Trace one UE's learned value table during a QAH-CoMP run.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        ue: usize,
        /// Snapshot interval in frames.
        #[arg(long, default_value_t = 100)]
        every: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON experiment file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "CRAN_SIM_OUTPUT_DIR", default_value = "results")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<Scheme>>,
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// CSIT error standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    rrhs: Option<usize>,
    #[arg(long)]
    tx_antennas: Option<usize>,
    #[arg(long)]
    rx_antennas: Option<usize>,
    #[arg(long)]
    bandwidth_hz: Option<f64>,
    #[arg(long)]
    frame_duration_s: Option<f64>,
    #[arg(long)]
    noise_dbm: Option<f64>,
    #[arg(long)]
    link_gain_db: Option<f64>,
    /// Packets per second for every UE.
    #[arg(long)]
    arrival_rate: Option<f64>,
    #[arg(long)]
    mean_packet_bits: Option<f64>,
    #[arg(long)]
    buffer_bits: Option<u64>,
    #[arg(long)]
    max_power_dbm: Option<f64>,
    #[arg(long)]
    max_fronthaul_mbps: Option<f64>,
    #[arg(long)]
    baseline_horizon_frames: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.rrhs {
            c.cluster.rrhs = v;
        }
        if let Some(v) = self.tx_antennas {
            c.cluster.tx_antennas = v;
        }
        if let Some(v) = self.rx_antennas {
            c.cluster.rx_antennas = v;
        }
        let m = c.cluster.rrhs;
        if c.traffic.ues() != m {
            let t = &c.traffic;
            c.traffic = cran_sim::queueing::TrafficConfig::uniform(m, t.arrival_rate[0], t.mean_packet_bits, t.buffer_bits);
        }
        if c.constraints.max_power_w.len() != m {
            let k = &c.constraints;
            c.constraints = cran_sim::allocator::ConstraintConfig::uniform(m, k.max_power_w[0], k.max_fronthaul_bps[0]);
        }
        if let Some(v) = &self.schemes {
            c.schemes = v.clone();
        }
        if let Some(v) = self.frames {
            c.frames = v;
        }
        if self.warmup.is_some() {
            c.warmup = self.warmup;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.replications {
            c.replications = v;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if let Some(v) = self.sigma {
            c.sigma = v;
        }
        if let Some(v) = self.bandwidth_hz {
            c.cluster.bandwidth_hz = v;
        }
        if let Some(v) = self.frame_duration_s {
            c.cluster.frame_duration_s = v;
        }
        if let Some(v) = self.noise_dbm {
            c.cluster.noise_power_w = dbm_to_watts(v);
        }
        if let Some(v) = self.link_gain_db {
            c.cluster.link_gain_db = v;
        }
        if let Some(v) = self.arrival_rate {
            c.traffic.arrival_rate = vec![v; m];
        }
        if let Some(v) = self.mean_packet_bits {
            c.traffic.mean_packet_bits = v;
        }
        if let Some(v) = self.buffer_bits {
            c.traffic.buffer_bits = v;
        }
        if let Some(v) = self.max_power_dbm {
            c.constraints.max_power_w = vec![dbm_to_watts(v); m];
        }
        if let Some(v) = self.max_fronthaul_mbps {
            c.constraints.max_fronthaul_bps = vec![v * 1e6; m];
        }
        if let Some(v) = self.baseline_horizon_frames {
            c.baseline_horizon_frames = v;
        }
        Ok(c)
    }
}

fn print_summary(summary: &Summary) {
    println!("{:<10} {:>12} {:>12} {:>10} {:>10} {:>12} {:>8}", "scheme", "value", "delay_s", "+/-", "power_mW", "fh_Mbps", "drop");
    for p in &summary.points {
        println!(
            "{:<10} {:>12} {:>12.4} {:>10.4} {:>10.3} {:>12.3} {:>8.4}",
            p.scheme.name(),
            p.value,
            p.delay_s.mean,
            p.delay_s.half_width,
            p.power_w.mean * 1e3,
            p.fronthaul_bps.mean / 1e6,
            p.drop_rate.mean
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.config()?;
            let rows = sim::run_experiment(&cfg)?;
            let summary = sim::export_metrics(&cfg, &rows, &common.out)?;
            print_summary(&summary);
        }
        Command::Sweep { common, parameter, values } => {
            let mut cfg = common.config()?;
            cfg.sweep = Some(Sweep { parameter, values });
            let rows = sim::run_experiment(&cfg)?;
            let summary = sim::export_metrics(&cfg, &rows, &common.out)?;
            print_summary(&summary);
        }
        Command::Convergence { common, ue, every } => {
            let cfg = common.config()?;
            let trace = sim::convergence_trace(&cfg, ue, every)?;
            std::fs::create_dir_all(&common.out)
                .map_err(|e| cran_sim::Error::Io { path: common.out.clone(), source: e })?;
            let path = common.out.join("convergence.csv");
            trace.write_csv(&path)?;
            println!("{} snapshots, max change after frame 1000: {:.4}", trace.frames.len(), trace.max_change_after(1000));
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
