use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dqrm::config::RunConfig;
use dqrm::core::comm::comm_report;
use dqrm::core::data::generate_synthetic;
use dqrm::core::quantizer::Granularity;
use dqrm::criteo::{load_samples, write_criteo};
use dqrm::format::{export_model, import_model, requantize};
use dqrm::inspect::{summary_text, table_histogram};
use dqrm::train::{evaluate_frozen, load_dataset, train_to_dir, EvalStats, LOG_FILE, MODEL_FILE};
use dqrm::{Error, Result};
use flate2::write::GzEncoder;
use flate2::Compression;

#[derive(Parser)]
#[command(
    name = "dqrm",
    version,
    about = "Quantization-aware DLRM training with quantized data-parallel gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the log, model file and histograms to the output directory.
    Train(RunArgs),
    /// Score a saved model on a Criteo file or on the configured synthetic test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Criteo TSV (optionally gzipped); defaults to the synthetic test split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-encode a saved model at other bit widths.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embedding and MLP bit widths as `EMB,MLP` or a single width for both.
        #[arg(long, default_value = "4")]
        bits: String,
        #[arg(long, default_value = "channel")]
        granularity: String,
    },
    /// Print a model summary, or a weight histogram of one table.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        histogram: Option<usize>,
        #[arg(long, default_value_t = 50)]
        bins: usize,
    },
    /// Write the configured synthetic data set as Criteo TSV (gzip if the name ends in .gz).
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Closed-form per-node gradient bytes per iteration.
    CommReport(RunArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key, repeatable: `--set key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    grad_bits: Option<u32>,
    #[arg(long)]
    ec: Option<String>,
    #[arg(long)]
    sparse_emb: Option<String>,
    #[arg(long)]
    emb_bits: Option<u32>,
    #[arg(long)]
    mlp_bits: Option<u32>,
    #[arg(long)]
    pretrain_epochs: Option<u32>,
    #[arg(long)]
    period: Option<u32>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    simulated: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut opt = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.into(), v));
            }
        };
        opt("nodes", self.nodes.map(|v| v.to_string()));
        opt("grad_bits", self.grad_bits.map(|v| v.to_string()));
        opt("ec", self.ec.clone());
        opt("sparse_emb", self.sparse_emb.clone());
        opt("emb_bits", self.emb_bits.map(|v| v.to_string()));
        opt("mlp_bits", self.mlp_bits.map(|v| v.to_string()));
        opt("pretrain_epochs", self.pretrain_epochs.map(|v| v.to_string()));
        opt("update_period", self.period.map(|v| v.to_string()));
        opt("epochs", self.epochs.map(|v| v.to_string()));
        opt("batch_size", self.batch_size.map(|v| v.to_string()));
        opt("seed", self.seed.map(|v| v.to_string()));
        opt("simulated", self.simulated.then(|| "on".to_string()));
        opt("out_dir", self.out.as_ref().map(|p| p.display().to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            pairs.push((k.trim().into(), v.trim().into()));
        }
        cfg.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_bits(text: &str) -> Result<(u32, u32)> {
    let num = |s: &str| {
        s.trim()
            .parse::<u32>()
            .map_err(|_| Error::Config(format!("bad bit width {s:?}")))
    };
    match text.split_once(',') {
        Some((e, m)) => Ok((num(e)?, num(m)?)),
        None => num(text).map(|b| (b, b)),
    }
}

fn parse_granularity(text: &str) -> Result<Granularity> {
    match text {
        "channel" => Ok(Granularity::PerChannel),
        "matrix" | "tensor" => Ok(Granularity::PerTensor),
        _ => Err(Error::Config(format!(
            "granularity {text:?}: expected channel or matrix"
        ))),
    }
}

fn print_eval(name: &str, s: &EvalStats) {
    let auc = s.auc.map_or_else(|| "undefined".to_string(), |a| format!("{a:.6}"));
    println!("{name}: accuracy {:.6} auc {auc} loss {:.6}", s.accuracy, s.loss);
}

fn write_synth(path: &Path, cfg: &RunConfig) -> Result<u64> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let records = generate_synthetic(cfg.synth_spec())?.map(|r| r.to_raw());
    let gz = path.extension().is_some_and(|e| e == "gz");
    let written = if gz {
        let mut w = GzEncoder::new(BufWriter::new(file), Compression::default());
        let n = write_criteo(&mut w, records)?;
        w.finish().and_then(|mut b| b.flush()).map_err(|e| Error::io(path, e))?;
        n
    } else {
        let mut w = BufWriter::new(file);
        let n = write_criteo(&mut w, records)?;
        w.flush().map_err(|e| Error::io(path, e))?;
        n
    };
    Ok(written)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let out = train_to_dir(&cfg)?;
            print_eval("train", &out.final_train);
            if let Some(t) = &out.final_test {
                print_eval("test", t);
            }
            println!(
                "wrote {} and {} ({} bytes) to {}",
                LOG_FILE,
                MODEL_FILE,
                out.model_bytes.len(),
                cfg.out_dir.display()
            );
        }
        Command::Eval { model, data, run } => {
            let frozen = import_model(&model)?;
            let samples = match data {
                Some(p) => load_samples(&p, frozen.config.dense_in, &frozen.config.table_rows)?,
                None => {
                    let mut cfg = run.resolve()?;
                    cfg.table_rows = frozen.config.table_rows.clone();
                    cfg.dense_in = frozen.config.dense_in;
                    load_dataset(&cfg)?.test
                }
            };
            print_eval("eval", &evaluate_frozen(&frozen, &samples)?);
        }
        Command::Export {
            model,
            out,
            bits,
            granularity,
        } => {
            let (emb, mlp) = parse_bits(&bits)?;
            let frozen = requantize(&import_model(&model)?, emb, mlp, parse_granularity(&granularity)?)?;
            let n = export_model(&frozen, &out)?;
            println!("wrote {} ({n} bytes)", out.display());
        }
        Command::Inspect { model, histogram, bins } => {
            let frozen = import_model(&model)?;
            match histogram {
                Some(t) => print!("{}", table_histogram(&frozen, t, bins, None)?),
                None => print!("{}", summary_text(&frozen)),
            }
        }
        Command::Synth { output, run } => {
            let cfg = run.resolve()?;
            let n = write_synth(&output, &cfg)?;
            println!("wrote {n} records to {}", output.display());
        }
        Command::CommReport(args) => {
            let cfg = args.resolve()?;
            let rows = comm_report(&cfg.model_config(), cfg.batch_size, &cfg.dp_config())?;
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "setting\tbytes_per_node").ok();
            for r in rows {
                writeln!(stdout, "{}\t{}", r.setting, r.bytes_per_node).ok();
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DQRM_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_kind() as u8)
        }
    }
}
