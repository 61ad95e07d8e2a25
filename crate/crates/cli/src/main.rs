use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use crossre::estimate::Method;
use crossre::simlab::TableFormat;
use crossre::uncertainty::{MseMethod, SECOND_ORDER_LIMIT};
use crossre_cli::commands::{
    run_fit, run_generate, run_predict, run_report, run_simulate, write_analysis, FitArgs, GenerateArgs, PredictArgs,
    SimulateArgs,
};
use crossre_cli::ingest::{parse_roles, Schema};
use crossre_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "crossre", version, about = "Crossed random-effects models on balanced two-way layouts")]
struct Cli {
    /// Worker threads for simulations (defaults to all cores).
    #[arg(long, env = "CROSSRE_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Reml,
    Ml,
}

#[derive(Clone, Copy, ValueEnum)]
enum MseArg {
    Lsw,
    Kh,
    Pr,
}

#[derive(Clone, Copy, ValueEnum)]
enum InteractionArg {
    Auto,
    Yes,
    No,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Csv,
    Json,
}

impl From<FormatArg> for TableFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => TableFormat::Text,
            FormatArg::Csv => TableFormat::Csv,
            FormatArg::Json => TableFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a long-format CSV file and print (or save) the estimates as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Covariates as `name=role,...` with role row, column, interaction, within or auto.
        #[arg(long, default_value = "")]
        roles: String,
        #[arg(long, value_enum, default_value = "reml")]
        method: MethodArg,
        /// Include the row x column interaction (auto: only with replicates).
        #[arg(long, value_enum, default_value = "auto")]
        interaction: InteractionArg,
        #[arg(long, default_value = "row")]
        row_id: String,
        #[arg(long, default_value = "col")]
        col_id: String,
        /// Replicate label column; omit for one observation per cell.
        #[arg(long)]
        rep_id: Option<String>,
        #[arg(long, default_value = "y")]
        response: String,
        /// z-score covariates before fitting.
        #[arg(long)]
        standardize: bool,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict random effects with intervals from a saved fit.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        /// Data file, if it moved since the fit.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "lsw")]
        mse: MseArg,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Largest n for KH and PR.
        #[arg(long, default_value_t = SECOND_ORDER_LIMIT)]
        max_n: usize,
        /// Directory for report.json, effects.csv and qq.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation study described by a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
    /// Print the table of a finished simulation.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: FormatArg,
    },
    /// Write one simulated data set as long-format CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        /// Also write the true effects as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn emit(out: &Option<PathBuf>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::io(path, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::io("stdout", e)),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Usage("worker count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set worker count: {e}")))?;
    }
    match cli.command {
        Command::Fit { data, roles, method, interaction, row_id, col_id, rep_id, response, standardize, out } => {
            let schema = Schema { row_id, col_id, rep_id, response, covariates: parse_roles(&roles)?, standardize };
            let args = FitArgs {
                data,
                schema,
                method: match method {
                    MethodArg::Reml => Method::Reml,
                    MethodArg::Ml => Method::Ml,
                },
                interaction: match interaction {
                    InteractionArg::Auto => None,
                    InteractionArg::Yes => Some(true),
                    InteractionArg::No => Some(false),
                },
            };
            let report = run_fit(&args)?;
            let mut text = serde_json::to_string_pretty(&report).expect("fit report serializes");
            text.push('\n');
            emit(&out, &text)
        }
        Command::Predict { fit, data, mse, level, max_n, out } => {
            let args = PredictArgs {
                fit,
                data,
                mse: match mse {
                    MseArg::Lsw => MseMethod::Lsw,
                    MseArg::Kh => MseMethod::Kh,
                    MseArg::Pr => MseMethod::Pr,
                },
                level,
                max_n,
                out,
            };
            let report = run_predict(&args)?;
            write_analysis(&report, &args.out)
        }
        Command::Simulate { config, out, seed, format } => {
            let table = run_simulate(&SimulateArgs { config, out, seed, format: format.into() })?;
            emit(&None, &table)
        }
        Command::Report { input, format } => emit(&None, &run_report(&input, format.into())?),
        Command::Generate { config, out, seed, scenario, replicate, truth } => {
            run_generate(&GenerateArgs { config, out, seed, scenario, replicate, truth }).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
