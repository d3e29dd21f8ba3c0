//! The `spatrf` command line: fit, predict, cv, simulate and bench.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::archive::{load_model, save_model, ModelArchive};
use crate::baselines::SpatialModel;
use crate::bench::{bench_split_scoring, log_log_slope, write_bench_csv};
use crate::cv::cross_validate;
use crate::error::{Result, SpatialError};
use crate::forest::{default_delta_grid, KnotStrategy};
use crate::geometry::{BasisConfig, BasisKind};
use crate::io::{load_csv, write_predictions, CsvLayout};
use crate::model::{fit_method, Method, MethodConfig};
use crate::simulation::{run_experiment, ExperimentConfig, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping the worker-thread count (0 = all cores).
pub const THREADS_ENV: &str = "SPATRF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "spatrf", version, about = "Random spatial forests and spatial baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model on a CSV file and save it as an archive.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Output archive path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict with a saved model; writes `id,prediction` rows.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Identifier column copied to the output.
        #[arg(long)]
        id: Option<String>,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeated k-fold cross-validation.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Simulation study comparing methods on synthetic surfaces.
    Simulate {
        #[arg(long, default_value_t = 20)]
        surfaces: usize,
        #[arg(long, default_value_t = 5)]
        replicates: usize,
        #[arg(long, value_enum, default_value_t = ScenarioArg::Both)]
        scenario: ScenarioArg,
        /// Comma-separated methods (default: all).
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Option<Vec<Method>>,
        #[arg(long, default_value_t = 150)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_validate: usize,
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory for results.csv and summary.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time split scoring against the naive refit for several sizes.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
        sizes: Vec<usize>,
        /// Candidates timed per size on the naive path.
        #[arg(long, default_value_t = 2)]
        naive_candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated coordinate columns.
    #[arg(long, value_delimiter = ',', default_value = "x,y")]
    coords: Vec<String>,
    #[arg(long)]
    response: String,
    /// Identifier column (kept as text, not used as a covariate).
    #[arg(long)]
    id: Option<String>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long, value_parser = parse_method, default_value = "sprf-np")]
    method: Method,
    #[arg(long, default_value_t = 200)]
    trees: usize,
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long, default_value_t = 5)]
    min_node: usize,
    /// Number of basis knots (default: min(50, n/4)).
    #[arg(long)]
    knots: Option<usize>,
    #[arg(long, value_enum, default_value_t = BasisArg::ThinPlate)]
    basis: BasisArg,
    /// Gaussian RBF length scale (default: mean nearest-knot distance).
    #[arg(long)]
    rbf_scale: Option<f64>,
    #[arg(long, value_enum, default_value_t = KnotArg::PerBag)]
    knot_strategy: KnotArg,
    /// Comma-separated delta values in [0, 1), strictly increasing.
    #[arg(long, value_delimiter = ',')]
    delta_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BasisArg {
    ThinPlate,
    GaussianRbf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KnotArg {
    PerBag,
    Shared,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Strong,
    Weak,
    Both,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

impl ModelArgs {
    fn config(&self) -> MethodConfig {
        MethodConfig {
            n_trees: self.trees,
            mtry: self.mtry,
            min_node_size: self.min_node,
            basis: BasisConfig {
                kind: match self.basis {
                    BasisArg::ThinPlate => BasisKind::ThinPlate,
                    BasisArg::GaussianRbf => BasisKind::GaussianRbf,
                },
                n_knots: self.knots,
                scale: self.rbf_scale,
            },
            delta_grid: self.delta_grid.clone().unwrap_or_else(default_delta_grid),
            knots: match self.knot_strategy {
                KnotArg::PerBag => KnotStrategy::PerBag,
                KnotArg::Shared => KnotStrategy::Shared,
            },
            lambda_grid: None,
            seed: self.seed,
        }
    }
}

impl DataArgs {
    fn layout(&self) -> CsvLayout {
        CsvLayout {
            coords: self.coords.clone(),
            response: Some(self.response.clone()),
            id: self.id.clone(),
        }
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a nonnegative integer, got {raw:?}"))?;
    // A pool may already exist when called in-process more than once.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit { data, model, out } => {
            let ds = load_csv(&data.data, &data.layout())?;
            let config = model.config();
            let fitted = fit_method(model.method, &ds, &config)?;
            if let Some(profile) = fitted.delta_profile() {
                println!("selected delta: {}", profile.selected());
            }
            let archive = ModelArchive::new(
                model.method,
                config,
                fitted,
                ds.coord_names.clone(),
                ds.covariate_names.clone(),
                ds.response_name.clone(),
            );
            save_model(&archive, &out)?;
            println!("saved {} model to {}", model.method, out.display());
        }
        Command::Predict { model, data, id, out } => {
            let archive = load_model(&model)?;
            let layout = CsvLayout {
                coords: archive.coord_names.clone(),
                response: None,
                id,
            };
            let ds = load_csv(&data, &layout)?;
            let columns: Vec<usize> = archive
                .covariate_names
                .iter()
                .map(|name| {
                    ds.covariate_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| SpatialError::MissingColumn(name.clone()))
                })
                .collect::<Result<_>>()?;
            let x = ds.x.select_columns(&columns);
            let preds = archive.model.predict(&x, &ds.coords)?;
            write_predictions(&ds.ids, &preds, output(&out)?)?;
        }
        Command::Cv {
            data,
            model,
            folds,
            repeats,
        } => {
            let ds = load_csv(&data.data, &data.layout())?;
            let result = cross_validate(&ds, model.method, &model.config(), folds, repeats, model.seed)?;
            for (r, v) in result.repeat_r2.iter().enumerate() {
                match v {
                    Some(v) => println!("repeat {r}: r2 = {v}"),
                    None => println!("repeat {r}: failed"),
                }
            }
            println!("mean r2 = {}", result.mean_r2);
        }
        Command::Simulate {
            surfaces,
            replicates,
            scenario,
            methods,
            n_train,
            n_validate,
            model,
            out,
        } => {
            let config = ExperimentConfig {
                n_surfaces: surfaces,
                n_replicates: replicates,
                scenarios: match scenario {
                    ScenarioArg::Strong => vec![Scenario::Strong],
                    ScenarioArg::Weak => vec![Scenario::Weak],
                    ScenarioArg::Both => vec![Scenario::Strong, Scenario::Weak],
                },
                methods: methods.unwrap_or_else(|| Method::ALL.to_vec()),
                method_config: model.config(),
                n_train,
                n_validate,
                seed: model.seed,
                ..Default::default()
            };
            let result = run_experiment(&config)?;
            fs::create_dir_all(&out)?;
            result.write_results_csv(&out.join("results.csv"))?;
            result.write_summary_csv(&out.join("summary.csv"))?;
            for row in &result.summary {
                println!(
                    "{:<10} {:<6} mean r2 = {:.4} ({} ok, {} failed)",
                    row.method, row.scenario, row.mean_r2, row.n_ok, row.n_failed
                );
            }
        }
        Command::Bench {
            sizes,
            naive_candidates,
            seed,
            out,
        } => {
            let rows = bench_split_scoring(&sizes, naive_candidates, seed)?;
            write_bench_csv(&rows, output(&out)?)?;
            if rows.len() >= 2 {
                let n: Vec<usize> = rows.iter().map(|r| r.n).collect();
                let sweep: Vec<f64> = rows.iter().map(|r| r.sweep_seconds).collect();
                let naive: Vec<f64> = rows.iter().map(|r| r.naive_seconds_per_candidate).collect();
                eprintln!(
                    "log-log slope: incremental sweep {:.2}, naive per candidate {:.2}",
                    log_log_slope(&n, &sweep),
                    log_log_slope(&n, &naive)
                );
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 1 on usage errors and 2 on runtime errors.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
