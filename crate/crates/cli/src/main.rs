use clap::{Args, Parser, Subcommand};
use dmove_cli::{
    cmd_analyze, cmd_fuse, cmd_layouts, cmd_pipeline, cmd_select, cmd_validate, CliError, CommonOptions, GraphSource,
    PipelineOptions, VariantChoice,
};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

/// Data-movement analysis and layout selection for transformer training graphs.
#[derive(Parser)]
#[command(name = "dmove", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Use the built-in BERT-large encoder layer.
    #[arg(long, conflicts_with = "graph")]
    bert: bool,
    /// Graph-spec JSON file.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Dimension override, e.g. B=96. Repeatable.
    #[arg(long = "dim", value_name = "S=N")]
    dims: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// Cost CSV: op_id,config_id,runtime_us,source.
    #[arg(long)]
    costs: Option<PathBuf>,
    /// Device JSON with peak_contraction_flops, peak_scalar_flops, peak_bandwidth_bytes.
    #[arg(long)]
    device: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Flop and data-movement table with class summary.
    Analyze(Common),
    /// Algebraic fusion and the fusion pass.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "auto", value_parser = ["unfused", "qk", "kv", "qkv", "auto"])]
        variant: String,
    },
    /// Layout configurations and cost distributions per operator.
    Layouts {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        costs: CostArgs,
    },
    /// Global configuration by shortest path.
    Select {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        costs: CostArgs,
        /// Fail if any operator lacks an ingested cost.
        #[arg(long)]
        costs_required: bool,
        /// Fix the encoder input layout, e.g. B,J,I (free by default).
        #[arg(long, value_name = "DIMS")]
        input_layout: Option<String>,
    },
    /// Numerical checks with the reference executor (toy dimensions with --bert).
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Analyze, fuse, enumerate layouts and select in one run.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        costs: CostArgs,
        #[arg(long, default_value = "auto", value_parser = ["unfused", "qk", "kv", "qkv", "auto"])]
        variant: String,
        /// Fail if any operator lacks an ingested cost.
        #[arg(long)]
        costs_required: bool,
        /// Fix the encoder input layout, e.g. B,J,I (free by default).
        #[arg(long, value_name = "DIMS")]
        input_layout: Option<String>,
    },
}

fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

fn common(c: Common) -> CommonOptions {
    CommonOptions {
        source: GraphSource {
            bert: c.bert,
            graph: c.graph,
            dims: c.dims,
        },
        out: c.out,
        timestamp: timestamp(),
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let variant = |s: &str| VariantChoice::parse(s).expect("validated by clap");
    match cli.command {
        Command::Analyze(c) => cmd_analyze(&common(c)),
        Command::Fuse { common: c, variant: v } => cmd_fuse(&common(c), variant(&v)),
        Command::Layouts { common: c, costs } => cmd_layouts(&common(c), costs.costs.as_deref(), costs.device.as_deref()),
        Command::Select {
            common: c,
            costs,
            costs_required,
            input_layout,
        } => cmd_select(&common(c), costs.costs.as_deref(), costs.device.as_deref(), costs_required, input_layout.as_deref()),
        Command::Validate {
            common: c,
            trials,
            samples,
        } => cmd_validate(&common(c), trials, samples),
        Command::Pipeline {
            common: c,
            costs,
            variant: v,
            costs_required,
            input_layout,
        } => cmd_pipeline(&PipelineOptions {
            common: common(c),
            costs: costs.costs,
            device: costs.device,
            variant: variant(&v),
            costs_required,
            input_layout,
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dmove: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
