//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::autodiff::AutodiffError;
use crate::config::{ConfigError, ExperimentConfig, Method};
use crate::data::{
    ingest_csv, load_dataset, save_dataset, CityDataset, DataError, NormStats, RegionGrid, AUXILIARY, INFLOW, OUTFLOW,
};
use crate::eval::{emit_plot_data, evaluate, read_results, write_results, EvalError, Runner};
use crate::matching::{match_auxiliary, match_service, MatchSource, MatchingError, RegionMatching};
use crate::network::{load_checkpoint, save_checkpoint, NetworkError};
use crate::synthgen::{generate, resolve_scenario, SynthError};
use crate::transfer::{finetune, pretrain_source, regiontrans_train, TrainConfig, TrainReport, TransferError};

#[derive(Debug, Parser)]
#[command(
    name = "regiontrans",
    version,
    about = "Cross-city region-matched transfer for crowd flow prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MatchMode {
    Service,
    Aux,
}

impl From<MatchMode> for MatchSource {
    fn from(m: MatchMode) -> Self {
        match m {
            MatchMode::Service => MatchSource::Service,
            MatchMode::Aux => MatchSource::Auxiliary,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Split {
    /// Held-out continuation of a scenario, or the last 20% of a dataset's windows.
    Test,
    /// Training range of a scenario, or the first 80% of a dataset's windows.
    Train,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario directory.
    Gen {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's embedded seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build a region matching between two cities.
    Match {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_enum)]
        mode: MatchMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh network on a source city.
    Pretrain {
        #[arg(long)]
        source: PathBuf,
        /// Config file or bundled profile (`desk`, `paper`).
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch losses as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Continue training a checkpoint on target data.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Region-matched transfer from a pre-trained checkpoint.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        matching: PathBuf,
        /// How the matching file was built; recorded on the loaded matching.
        #[arg(long, value_enum, default_value = "service")]
        match_mode: MatchMode,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Teacher-forced one-step RMSE in raw units.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// A scenario directory or a dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 6)]
        k: usize,
    },
    /// Run methods over seeds on a scenario and write results.csv.
    Experiment {
        #[arg(long)]
        scenario: String,
        /// Comma-separated; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated w values; defaults to the config's sweep.
        #[arg(long, value_delimiter = ',')]
        w_sweep: Option<Vec<f64>>,
        #[arg(long)]
        no_sweep: bool,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Summarize results.csv into table1.csv and fig3.csv.
    PlotData {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a dataset from `timestamp,i,j,value` CSV files.
    Ingest {
        #[arg(long)]
        inflow: PathBuf,
        #[arg(long)]
        outflow: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        #[arg(long, default_value = "city")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(DataError, MatchingError, SynthError, ConfigError, std::io::Error);

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Shape(a) => a.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TransferError> for CliError {
    fn from(e: TransferError) -> Self {
        match e {
            TransferError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TransferError::Autodiff(a) => a.into(),
            TransferError::Network(n) => n.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Transfer(t) => t.into(),
            EvalError::Network(n) => n.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    execute(cli.command, out)
}

pub fn main_with_args() -> ExitCode {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(std::env::args_os(), &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message().trim_end());
            ExitCode::from(e.code())
        }
    }
}

fn train_config(
    config: &str,
    seed: Option<u64>,
    pick: impl Fn(&ExperimentConfig) -> &TrainConfig,
) -> Result<(ExperimentConfig, TrainConfig), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let mut t = pick(&cfg).clone();
    if let Some(s) = seed {
        t.seed = s;
    }
    Ok((cfg, t))
}

fn write_report(report: &TrainReport, path: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    if let Some(p) = path {
        fs::write(p, report.to_csv())?;
    }
    writeln!(
        out,
        "epochs={} windows={} final_loss={}",
        report.epochs.len(),
        report.windows,
        report.final_loss().unwrap_or(f64::NAN)
    )?;
    Ok(())
}

fn is_scenario_dir(dir: &Path) -> bool {
    dir.join("target_test").is_dir() && dir.join("target").is_dir()
}

fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Gen {
            scenario,
            out: dir,
            seed,
        } => {
            let mut spec = resolve_scenario(&scenario)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let sc = generate(&spec)?;
            sc.save(&dir)?;
            writeln!(
                out,
                "wrote scenario '{}' (seed {}) to {}",
                spec.name,
                spec.seed,
                dir.display()
            )?;
        }
        Command::Match {
            target,
            source,
            mode,
            out: file,
        } => {
            let t = load_dataset(&target)?;
            let s = load_dataset(&source)?;
            let m = match mode {
                MatchMode::Service => match_service(&t, &s)?,
                MatchMode::Aux => match_auxiliary(&t, &s)?,
            };
            m.save(&file)?;
            let mean = m.entries().iter().map(|e| e.rho).sum::<f64>() / m.entries().len() as f64;
            writeln!(out, "matched {} regions, mean rho {mean:.4}", m.entries().len())?;
        }
        Command::Pretrain {
            source,
            config,
            out: ckpt,
            seed,
            report,
        } => {
            let (cfg, t) = train_config(&config, seed, |c| &c.pretrain)?;
            let s = load_dataset(&source)?;
            let r = pretrain_source(&s, &cfg.network, &t)?;
            save_checkpoint(&r.params, &ckpt)?;
            write_report(&r, report.as_deref(), out)?;
        }
        Command::Finetune {
            ckpt,
            target,
            out: dest,
            config,
            seed,
            report,
        } => {
            let (_, t) = train_config(&config, seed, |c| &c.transfer)?;
            let params = load_checkpoint(&ckpt)?;
            let tgt = load_dataset(&target)?;
            let r = finetune(&params, &tgt, &tgt.norm, &t)?;
            save_checkpoint(&r.params, &dest)?;
            write_report(&r, report.as_deref(), out)?;
        }
        Command::Transfer {
            ckpt,
            target,
            source,
            matching,
            match_mode,
            w,
            out: dest,
            config,
            seed,
            report,
        } => {
            let (_, mut t) = train_config(&config, seed, |c| &c.transfer)?;
            if let Some(w) = w {
                t.w = w;
            }
            let params = load_checkpoint(&ckpt)?;
            let tgt = load_dataset(&target)?;
            let src = load_dataset(&source)?;
            let m = RegionMatching::load(&matching, tgt.grid(), src.grid(), match_mode.into())?;
            let r = regiontrans_train(&params, &tgt, &src, &m, &t)?;
            save_checkpoint(&r.params, &dest)?;
            write_report(&r, report.as_deref(), out)?;
        }
        Command::Eval { ckpt, data, split, k } => {
            let params = load_checkpoint(&ckpt)?;
            let (ds, ends): (CityDataset, Option<Vec<i64>>) = if is_scenario_dir(&data) {
                match split {
                    Split::Test => (load_dataset(&data.join("target_test"))?, None),
                    Split::Train => (load_dataset(&data.join("target"))?, None),
                    Split::All => (
                        concat(
                            &load_dataset(&data.join("target"))?,
                            &load_dataset(&data.join("target_test"))?,
                        )?,
                        None,
                    ),
                }
            } else {
                let ds = load_dataset(&data)?;
                let all = ds.service[0].window_timestamps(k);
                let cut = all.len() - all.len() / 5;
                let ends = match split {
                    Split::Test => Some(all[cut..].to_vec()),
                    Split::Train => Some(all[..cut].to_vec()),
                    Split::All => None,
                };
                (ds, ends)
            };
            let ev = evaluate(&params, &ds, &ds.norm, k, ends.as_deref())?;
            for (c, v) in ev.per_channel_rmse()? {
                writeln!(out, "{c}_rmse={v}")?;
            }
            writeln!(out, "rmse={}", ev.avg_rmse()?)?;
            writeln!(out, "windows={}", ev.timestamps.len())?;
        }
        Command::Experiment {
            scenario,
            methods,
            seeds,
            w_sweep,
            no_sweep,
            config,
            out: dir,
            quiet,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let spec = resolve_scenario(&scenario)?;
            let methods: Vec<Method> = match methods {
                Some(list) => list.iter().map(|m| m.parse()).collect::<Result<_, _>>()?,
                None => cfg.experiment.methods.clone(),
            };
            let seeds = seeds.unwrap_or_else(|| cfg.experiment.seeds.clone());
            let sweep = if no_sweep {
                Vec::new()
            } else {
                w_sweep.unwrap_or_else(|| cfg.experiment.w_sweep.clone())
            };
            if let Some(w) = sweep.iter().find(|w| !(0.0..=1.0).contains(*w)) {
                return Err(CliError::Usage(format!("w-sweep value {w} is outside [0, 1]")));
            }
            let mut runner = Runner::new(cfg);
            runner.verbose = !quiet;
            let rows = runner.run(&spec, &methods, &seeds, &sweep)?;
            fs::create_dir_all(&dir)?;
            write_results(&rows, &dir.join("results.csv"))?;
            writeln!(
                out,
                "wrote {} rows to {}",
                rows.len(),
                dir.join("results.csv").display()
            )?;
        }
        Command::PlotData { results, out: dir } => {
            let path = if results.is_dir() {
                results.join("results.csv")
            } else {
                results
            };
            let rows = read_results(&path)?;
            emit_plot_data(&rows, &dir)?;
            writeln!(out, "wrote table1.csv and fig3.csv to {}", dir.display())?;
        }
        Command::Ingest {
            inflow,
            outflow,
            aux,
            width,
            height,
            name,
            out: dir,
        } => {
            let grid = RegionGrid::new(width, height)?;
            let read = |p: &Path, ch: &str| -> Result<_, CliError> {
                let f = fs::File::open(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                Ok(ingest_csv(f, grid, ch)?)
            };
            let service = vec![read(&inflow, INFLOW)?, read(&outflow, OUTFLOW)?];
            let auxiliary = aux.map(|p| read(&p, AUXILIARY)).transpose()?;
            let norm = NormStats::from_series(&service);
            let ds = CityDataset::new(name, service, auxiliary, None, norm)?;
            save_dataset(&ds, &dir)?;
            writeln!(out, "wrote {} timestamps to {}", ds.len(), dir.display())?;
        }
    }
    Ok(())
}

/// Appends `b` to `a`; the two must be contiguous.
fn concat(a: &CityDataset, b: &CityDataset) -> Result<CityDataset, CliError> {
    if b.t_start() != a.t_end() + 1 {
        return Err(CliError::Data("train and test ranges are not contiguous".into()));
    }
    let service = a
        .service
        .iter()
        .zip(&b.service)
        .map(|(x, y)| {
            let mut data = x.frames().data().to_vec();
            data.extend_from_slice(y.frames().data());
            let g = x.grid();
            let frames = crate::autodiff::Tensor::new(vec![x.len() + y.len(), g.width(), g.height()], data)?;
            Ok(crate::data::UrbanImageTimeSeries::new(
                g,
                x.t_start(),
                frames,
                x.channel(),
            )?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let external = match (&a.external, &b.external) {
        (Some(x), Some(y)) => {
            let mut data = x.data().to_vec();
            data.extend_from_slice(y.data());
            Some(crate::autodiff::Tensor::new(
                vec![x.shape()[0] + y.shape()[0], x.shape()[1]],
                data,
            )?)
        }
        _ => None,
    };
    Ok(CityDataset::new(
        a.name.clone(),
        service,
        None,
        external,
        a.norm.clone(),
    )?)
}
