use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use uasr::checkpoint::checkpoint_load;
use uasr::corpus::{synth_dataset_generate, DatasetManifest, Split};
use uasr::features::{read_features, write_features};
use uasr::model::ModelConfig;
use uasr::streaming::stream_open;
use uasr::training::{evaluate, format_reports, train, EvalMode, TrainOptions};

#[derive(Parser)]
#[command(name = "uasr", about = "Streaming two-pass speech recognizer on a synthetic aligned corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by a manifest and write it out.
    GenData {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Overrides the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch, writing checkpoints and metrics.tsv into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate on at most this many dev utterances at each log point.
        #[arg(long)]
        dev_limit: Option<usize>,
    },
    /// Token error rate of a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Chunk sizes to evaluate; defaults to every trained size.
        #[arg(long = "chunk-size")]
        chunk_size: Vec<usize>,
        #[arg(long, default_value = "both")]
        mode: String,
    },
    /// Stream a feature file chunk by chunk, printing partial and final hypotheses.
    Stream {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long = "chunk-size")]
        chunk_size: usize,
    },
}

fn load_manifest(path: Option<&Path>) -> Result<DatasetManifest> {
    match path {
        None => Ok(DatasetManifest::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading manifest {}", p.display()))?;
            Ok(DatasetManifest::from_text(&text).with_context(|| format!("parsing manifest {}", p.display()))?)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Ok(ModelConfig::from_text(&text).with_context(|| format!("parsing config {}", p.display()))?)
        }
    }
}

fn tokens(t: &[usize]) -> String {
    t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn gen_data(manifest: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut m = load_manifest(manifest)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    let data = synth_dataset_generate(&m)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.txt"), m.to_text())?;
    for (name, split) in [("train", Split::Train), ("dev", Split::Dev), ("test", Split::Test)] {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let mut index = String::from("utterance\tframes\ttranscript\tspans\n");
        for (i, u) in data.split(split).iter().enumerate() {
            write_features(&u.features, &dir.join(format!("{i:05}.feat")))?;
            let spans = u.spans.iter().map(|s| format!("{}-{}", s.start, s.end)).collect::<Vec<_>>().join(" ");
            writeln!(index, "{i:05}\t{}\t{}\t{spans}", u.frames(), tokens(&u.transcript))?;
        }
        fs::write(out.join(format!("{name}.tsv")), index)?;
        println!("{name}: {} utterances", data.split(split).len());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { manifest, seed, out } => gen_data(manifest.as_deref(), seed, &out)?,
        Command::Train {
            config,
            manifest,
            seed,
            steps,
            out,
            dev_limit,
        } => {
            let cfg = load_config(config.as_deref())?;
            let m = load_manifest(manifest.as_deref())?;
            if m.d_input != cfg.d_input || m.vocab_size + uasr::model::FIRST_TOKEN != cfg.vocab_size {
                bail!(
                    "manifest (d_input {}, {} tokens) does not fit config (d_input {}, vocab_size {})",
                    m.d_input,
                    m.vocab_size,
                    cfg.d_input,
                    cfg.vocab_size
                );
            }
            let data = synth_dataset_generate(&m)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            let opts = TrainOptions {
                steps,
                seed,
                out_dir: Some(out.clone()),
                dev_limit,
            };
            let started = Instant::now();
            println!("{}", uasr::training::MetricsRow::HEADER);
            let outcome = train(&cfg, &data, &opts, |row| println!("{}", row.to_line()))?;
            eprintln!(
                "trained {steps} steps in {:.1}s; last checkpoint {}",
                started.elapsed().as_secs_f64(),
                outcome.checkpoints.last().map_or("-".into(), |p| p.display().to_string())
            );
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            chunk_size,
            mode,
        } => {
            let (params, cfg) = checkpoint_load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let mode: EvalMode = mode.parse()?;
            let split: Split = split.parse()?;
            let data = synth_dataset_generate(&load_manifest(manifest.as_deref())?)?;
            let sizes = if chunk_size.is_empty() {
                cfg.chunk_sizes.clone()
            } else {
                chunk_size
            };
            let reports = sizes
                .iter()
                .map(|&c| evaluate(&params, &cfg, data.split(split), c, mode))
                .collect::<uasr::Result<Vec<_>>>()?;
            print!("{}", format_reports(&reports, cfg.frame_period_ms));
        }
        Command::Stream {
            checkpoint,
            features,
            chunk_size,
        } => {
            let (params, cfg) = checkpoint_load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let x = read_features(&features).with_context(|| format!("reading {}", features.display()))?;
            let started = Instant::now();
            let mut session = stream_open(&params, &cfg, chunk_size)?;
            let mut start = 0;
            while start < x.rows() {
                let len = chunk_size.min(x.rows() - start);
                let r = session.push_chunk(&x.slice_rows(start, len))?;
                println!(
                    "chunk {}\temitted [{}]\thypothesis [{}]",
                    r.chunk_index,
                    tokens(&r.emitted),
                    tokens(&r.hypothesis)
                );
                start += len;
            }
            let fin = session.finalize()?;
            let audio_s = fin.latency.frames as f64 * cfg.frame_period_ms / 1000.0;
            println!("online [{}]", tokens(&fin.online));
            println!("rectified [{}]", tokens(&fin.rectified));
            println!(
                "max_delay_ms {}\trtf {:.4}",
                fin.latency.max_delay_ms,
                started.elapsed().as_secs_f64() / audio_s.max(f64::EPSILON)
            );
        }
    }
    Ok(())
}
