use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prism_core::config::ExperimentConfig;
use prism_core::cost::{cost_of, original_cost};
use prism_core::data::{synth_blobs, write_idx, SynthSpec};
use prism_core::decomposition::effective_rank;
use prism_core::experiment;
use prism_core::nn::by_name;
use prism_core::plot::{read_series, render_svg, Metric};
use prism_core::rng::{domain, RandomStream, StreamKey};
use prism_core::sampler::Method;
use prism_core::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(
    name = "prism",
    version,
    about = "Federated sub-model training over principal kernels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment.
    Run {
        /// TOML config; defaults apply when omitted.
        config: Option<PathBuf>,
        /// Output directory (else `output_dir`, `$PRISM_OUTPUT_DIR`, `./prism-out`).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Override a config key, e.g. `--set fed.rounds=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        keep: Option<f64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Only print the summary.
        #[arg(short, long)]
        quiet: bool,
    },
    /// Print parameter, MAC and activation-memory costs of sub-models.
    Cost {
        #[arg(long, default_value = "resnet18-cifar")]
        model: String,
        #[arg(long, default_value = "prism")]
        method: String,
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.6,0.4,0.2")]
        keep: Vec<f64>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Input as C,H,W (ignored for resnet18-cifar).
        #[arg(long, value_delimiter = ',', default_value = "1,28,28")]
        input: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
    /// Print singular-value spectra and effective ranks of a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        /// Singular values shown per layer.
        #[arg(long, default_value_t = 8)]
        top: usize,
    },
    /// Draw an SVG chart from run directories or metrics files.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long, default_value = "plot.svg")]
        output: PathBuf,
        /// accuracy, loss, or rank.
        #[arg(long, default_value = "accuracy")]
        metric: String,
    },
    /// Write a synthetic dataset as IDX files.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 10_000)]
        train: usize,
        #[arg(long, default_value_t = 2_000)]
        test: usize,
        #[arg(long, default_value_t = 12)]
        size: usize,
        #[arg(long, default_value_t = 3.0)]
        separation: f64,
        #[arg(long, default_value_t = 1)]
        shift: usize,
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s).ok_or_else(|| {
        Error::config(
            "method",
            format!("unknown method `{s}`, expected prism, prism-o2, origdrop, orthdrop, fullfedavg"),
        )
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Run {
            config,
            output,
            mut set,
            method,
            keep,
            rounds,
            seed,
            quiet,
        } => {
            if let Some(m) = method {
                set.push(format!("fed.method={}", parse_method(&m)?));
            }
            if let Some(k) = keep {
                set.push(format!("fed.keep_ratio={k:?}"));
            }
            if let Some(r) = rounds {
                set.push(format!("fed.rounds={r}"));
            }
            if let Some(s) = seed {
                set.push(format!("fed.seed={s}"));
            }
            let cfg = ExperimentConfig::load(config.as_deref(), &set)?;
            let out = output.unwrap_or_else(|| cfg.resolved_output_dir());
            let summary = experiment::run(&cfg, &out, |r| {
                if !quiet {
                    let acc = r.eval_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                    let loss: Vec<f64> = r.clients.iter().filter_map(|c| c.loss).collect();
                    let mean = loss.iter().sum::<f64>() / loss.len().max(1) as f64;
                    eprintln!(
                        "round {:>4}  train loss {mean:.4}  accuracy {acc}  {:.2}s",
                        r.round,
                        r.timings.submodel
                            + r.timings.training
                            + r.timings.aggregation
                            + r.timings.svd
                            + r.timings.evaluation
                    );
                }
            })?;
            print!("{}", experiment::render_summary(&summary));
            println!("artifacts in {}", out.display());
        }
        Command::Cost {
            model,
            method,
            keep,
            batch,
            input,
            classes,
        } => {
            let method = parse_method(&method)?;
            let input: [usize; 3] = input
                .try_into()
                .map_err(|_| Error::config("input", "expected three values C,H,W"))?;
            let input = if model == "resnet18-cifar" { [3, 32, 32] } else { input };
            let arch = by_name(&model, input, classes, false)?;
            let full = original_cost(&arch, batch)?;
            println!("{model}, batch {batch}, {method}");
            println!(
                "{:>6} {:>12} {:>7} {:>16} {:>7} {:>14} {:>7}",
                "keep", "params", "%", "MACs", "%", "memory", "%"
            );
            println!(
                "{:>6} {:>12} {:>7.1} {:>16} {:>7.1} {:>14} {:>7.1}",
                "full", full.params, 100.0, full.macs, 100.0, full.activation_mem, 100.0
            );
            for k in keep {
                let c = cost_of(&arch, method, k, method.out_factor(), batch)?;
                let r = c.ratios(&full);
                println!(
                    "{:>6.2} {:>12} {:>7.1} {:>16} {:>7.1} {:>14} {:>7.1}",
                    k, c.params, r[0], c.macs, r[1], c.activation_mem, r[2]
                );
            }
        }
        Command::Inspect { checkpoint: path, top } => {
            let (server, seed) = checkpoint::load(&path)?;
            println!(
                "{}  seed {seed}  rounds {}  params {}",
                server.arch.name,
                server.round,
                server.num_params()
            );
            for node in server.factorized_nodes() {
                let pks = server.kernels[node].as_ref().expect("refreshed on load");
                let shown: Vec<String> = pks.sigma.iter().take(top).map(|s| format!("{s:.4}")).collect();
                println!(
                    "{:<16} p={:<4} effective rank {:>8.2}  sigma {}",
                    server.arch.nodes[node].name,
                    pks.num_kernels(),
                    effective_rank(&pks.sigma)?,
                    shown.join(" ")
                );
            }
        }
        Command::Plot { runs, output, metric } => {
            let metric =
                Metric::parse(&metric).ok_or_else(|| Error::config("metric", "expected accuracy, loss, or rank"))?;
            let mut series = Vec::new();
            for r in &runs {
                let file = if r.is_dir() { r.join("metrics.jsonl") } else { r.clone() };
                let label = r
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| r.display().to_string());
                series.push(read_series(&file, metric, &label)?);
            }
            std::fs::write(&output, render_svg(&series, metric)).map_err(|e| Error::io(&output, e))?;
            println!("wrote {}", output.display());
        }
        Command::Synth {
            output,
            classes,
            train,
            test,
            size,
            separation,
            shift,
            noise,
            seed,
        } => {
            let spec = SynthSpec {
                num_classes: classes,
                samples: train + test,
                shape: [1, size, size],
                separation,
                max_shift: shift,
                noise,
            };
            let mut stream = RandomStream::new(seed, StreamKey::new(0, domain::DATA, 0));
            let all = synth_blobs(&spec, &mut stream)?;
            std::fs::create_dir_all(&output).map_err(|e| Error::io(&output, e))?;
            let tr: Vec<usize> = (0..train).collect();
            let te: Vec<usize> = (train..train + test).collect();
            write_idx(
                &all.subset(&tr),
                output.join("train-images.idx"),
                output.join("train-labels.idx"),
            )?;
            write_idx(
                &all.subset(&te),
                output.join("test-images.idx"),
                output.join("test-labels.idx"),
            )?;
            println!("wrote {train} training and {test} test samples to {}", output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
