use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use direct_store::experiment::{self, ExperimentSpec, ReadMode, System};

#[derive(Parser)]
#[command(name = "direct-store", version, about = "Run corruption-recovery experiments and print CSV results")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment spec; flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Error rate(s) per bit, comma separated.
    #[arg(long, value_delimiter = ',')]
    uber: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form and Monte Carlo read-error probabilities.
    Model {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// A replicated LSM shard group under bit corruption.
    KvCluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        replicas: Option<usize>,
        /// Client operations.
        #[arg(long)]
        ops: Option<usize>,
        #[arg(long)]
        key_space: Option<usize>,
        /// Fraction of operations that are reads.
        #[arg(long)]
        read_fraction: Option<f64>,
    },
    /// Block reads under at-rest corruption.
    Blockfs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        files: Option<usize>,
        /// Block size in bytes.
        #[arg(long)]
        block_size: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        reads: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Direct,
    Legacy,
    Both,
}

fn base_spec(system: System, common: &Common) -> Result<ExperimentSpec, experiment::ExperimentError> {
    let mut spec = match &common.spec {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::new(system),
    };
    spec.system = system;
    if !common.uber.is_empty() {
        spec.ubers = common.uber.clone();
    }
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if common.output.is_some() {
        spec.output = common.output.clone();
    }
    Ok(spec)
}

fn build(cmd: &Command) -> Result<ExperimentSpec, experiment::ExperimentError> {
    match cmd {
        Command::Model { common, trials } => {
            let mut spec = base_spec(System::Model, common)?;
            if let Some(t) = trials {
                spec.model.mc_trials = *t;
            }
            Ok(spec)
        }
        Command::KvCluster { common, replicas, ops, key_space, read_fraction } => {
            let mut spec = base_spec(System::Kv, common)?;
            let kv = &mut spec.kv;
            kv.replicas = replicas.unwrap_or(kv.replicas);
            kv.ops = ops.unwrap_or(kv.ops);
            kv.key_space = key_space.unwrap_or(kv.key_space);
            kv.read_fraction = read_fraction.unwrap_or(kv.read_fraction);
            Ok(spec)
        }
        Command::Blockfs { common, files, block_size, mode, reads } => {
            let mut spec = base_spec(System::Blockfs, common)?;
            let b = &mut spec.blockfs;
            b.files = files.unwrap_or(b.files);
            b.block_size = block_size.unwrap_or(b.block_size);
            b.reads = reads.unwrap_or(b.reads);
            match mode {
                Some(ModeArg::Direct) => b.modes = vec![ReadMode::Direct],
                Some(ModeArg::Legacy) => b.modes = vec![ReadMode::Legacy],
                Some(ModeArg::Both) => b.modes = vec![ReadMode::Direct, ReadMode::Legacy],
                None => {}
            }
            Ok(spec)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = build(&cli.command).and_then(|spec| {
        let outcome = experiment::run(&spec)?;
        match &spec.output {
            Some(path) => outcome.write_to(path)?,
            None => print!("{}", outcome.csv),
        }
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            for c in &outcome.checks {
                eprintln!("{c}");
            }
            if outcome.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
