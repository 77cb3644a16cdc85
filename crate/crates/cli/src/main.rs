use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fastscan_cli::bench::{self, BenchSettings};
use fastscan_cli::failure::write_file;
use fastscan_cli::forward::{self, ForwardArgs};
use fastscan_cli::models::parse_models;
use fastscan_cli::verify::Fault;
use fastscan_cli::{flops_table, gradcheck, verify, CmdResult, Failure, EXIT_PROPERTY};
use fastscan_core::encoder::{EncoderConfig, Variant};

/// Pooled selective-scan toolkit: invariant checks, gradient checks, FLOP
/// tables, timing benchmarks and encoder forward passes.
///
/// Exit codes: 0 success, 1 property failure, 2 I/O or corrupt file,
/// 3 configuration, usage or manifest error.
#[derive(Debug, Parser)]
#[command(name = "fastscan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    FlipScanSign,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Dense,
    Masked,
    Channel,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the invariant suite and print a JSON report.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Inject a known defect; the suite must then fail.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate analytic FLOP counts.
    ///
    /// CSV columns: resolution,model,component,flops (one `total` row per
    /// model and resolution). JSON adds totals and pooled-vs-unpooled
    /// reductions.
    Flops {
        #[arg(long, value_delimiter = ',', default_value = "vim-t,fastvim-t")]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "224,512,1024,2048")]
        resolutions: Vec<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time one block's components per model and resolution.
    ///
    /// CSV columns: model,resolution,component,median_ns,depth,pooled_len.
    /// Components: scan, projection, pool, repeat, skip, conv, block_total.
    /// Unpooled models report 0 for pool and repeat.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "vim-t,fastvim-t")]
        models: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "224,448,896")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = bench::DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, default_value_t = bench::DEFAULT_WARMUPS)]
        warmups: usize,
        #[arg(long, env = "FASTSCAN_THREADS", default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the encoder and write features as an FVT1 tensor [B, D]; the
    /// per-block trace is printed as JSON.
    Forward {
        /// Weights directory containing manifest.json.
        #[arg(long, conflicts_with = "random_init")]
        weights: Option<PathBuf>,
        /// Use seeded random weights.
        #[arg(long, required_unless_present = "weights")]
        random_init: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// FVT1 image tensor [B, C, H, W] or [C, H, W]; random when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// JSON encoder config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON mask ({h, w, ratio, seed, coords}) for the masked variant.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        no_alternate: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write seeded random weights as a directory of FVT1 tensors.
    InitWeights {
        /// JSON encoder config; `--model` picks a preset instead.
        #[arg(long, conflicts_with = "model")]
        config: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit(text: &str, out: Option<&PathBuf>) -> CmdResult<()> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> CmdResult<bool> {
    match cli.command {
        Command::Verify { seed, fault, out } => {
            let fault = fault.map(|FaultArg::FlipScanSign| Fault::FlipScanSign);
            let report = verify::run_verify(seed, fault);
            let text = report.to_json() + "\n";
            print!("{text}");
            if let Some(p) = out {
                write_file(&p, &text)?;
            }
            Ok(report.all_pass)
        }
        Command::Gradcheck { seed, out } => {
            let report = gradcheck::run_gradcheck(seed);
            let text = report.to_json() + "\n";
            print!("{text}");
            if let Some(p) = out {
                write_file(&p, &text)?;
            }
            Ok(report.all_pass)
        }
        Command::Flops {
            models,
            resolutions,
            format,
            out,
        } => {
            let models = parse_models(&models)?;
            let table = flops_table::flop_table(&models, &resolutions)?;
            let text = match format {
                Format::Json => flops_table::to_json(&table) + "\n",
                Format::Csv => {
                    let mut buf = Vec::new();
                    flops_table::write_csv(&table, &mut buf)?;
                    String::from_utf8(buf).expect("csv is utf-8")
                }
            };
            emit(&text, out.as_ref())?;
            Ok(true)
        }
        Command::Bench {
            models,
            resolutions,
            repeats,
            warmups,
            threads,
            seed,
            out,
        } => {
            let models = parse_models(&models)?;
            let settings = BenchSettings {
                resolutions,
                warmups,
                repeats,
                threads,
                seed,
            };
            let records = bench::run_bench(&models, &settings)?;
            let mut buf = Vec::new();
            bench::write_csv(&records, &mut buf)?;
            emit(&String::from_utf8(buf).expect("csv is utf-8"), out.as_ref())?;
            Ok(true)
        }
        Command::Forward {
            weights,
            random_init: _,
            seed,
            input,
            config,
            mask,
            variant,
            ratio,
            no_alternate,
            out,
        } => {
            let args = ForwardArgs {
                weights,
                seed,
                input,
                config,
                mask,
                variant: variant.map(|v| match v {
                    VariantArg::Dense => Variant::Dense,
                    VariantArg::Masked => Variant::Masked,
                    VariantArg::Channel => Variant::Channel,
                }),
                ratio,
                no_alternate,
            };
            let outcome = forward::run_forward(&args)?;
            outcome.features.write(&out)?;
            println!("{}", serde_json::to_string_pretty(&outcome.trace).expect("trace serializes"));
            Ok(true)
        }
        Command::InitWeights {
            config,
            model,
            seed,
            out,
        } => {
            let config = match (config, model) {
                (Some(p), _) => forward::read_config(&p)?,
                (None, Some(m)) => EncoderConfig::from_model_name(&m)?,
                (None, None) => EncoderConfig::default(),
            };
            forward::init_weights(&config, seed, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(fastscan_cli::EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PROPERTY),
        Err(Failure { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
