use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use stbd_cli::commands::{self, DecodeRequest};
use stbd_cli::config::{parse_search_mode, RunConfig};
use stbd_cli::{exit, exit_code};

/// Speech transformer with a shared-weight bidirectional decoder.
#[derive(Parser)]
#[command(name = "stbd", version)]
struct Cli {
    /// TOML run configuration (defaults apply to anything left out).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for decoding.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy corpus, its splits and CMVN statistics.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes per-epoch checkpoints, curve.csv and averaged.ckpt.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// stbd, st-l2r or st-r2l.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Beam-search a split and report CER and direction statistics.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// bidirectional, bs-l2r or bs-r2l.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        /// Best-hypothesis CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for per-utterance ranked hypothesis pools.
        #[arg(long)]
        hyps_dir: Option<PathBuf>,
        /// Decode with beams 1, 2, 4 and 8 and write the sweep CSV here.
        #[arg(long)]
        beam_sweep: Option<PathBuf>,
    },
    /// Score a decode CSV against a split's references.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        hyps: PathBuf,
        /// Per-utterance CER table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export cross-attention heatmaps (CSV and PGM) for one utterance.
    InspectAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        utt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average checkpoints elementwise.
    Average {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        /// Keep only the N inputs with the lowest dev CER.
        #[arg(long)]
        best: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Generate { out } => {
            let [tr, dv, te] = commands::cmd_generate(&cfg, &out)?;
            println!("generated {tr} train / {dv} dev / {te} test utterances in {}", out.display());
        }
        Command::Train {
            data,
            out,
            mode,
            epochs,
        } => {
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let s = commands::cmd_train(&cfg, &data, &out)?;
            let best = s.history.iter().map(|r| r.dev_cer).fold(f64::INFINITY, f64::min);
            println!(
                "trained {} epochs; best epoch dev CER {best:.4}; averaged epochs {:?} dev CER {:.4}; wrote {}",
                s.history.len(),
                s.averaged_epochs,
                s.averaged_dev_cer,
                s.checkpoint.display()
            );
        }
        Command::Decode {
            data,
            checkpoint,
            split,
            mode,
            beam,
            out,
            hyps_dir,
            beam_sweep,
        } => {
            let req = DecodeRequest {
                data,
                checkpoint,
                split,
                mode: mode.as_deref().map(parse_search_mode).transpose()?,
                beam,
                out,
                hyps_dir,
                jobs: cli.jobs,
            };
            if let Some(path) = beam_sweep {
                for r in commands::cmd_beam_sweep(&cfg, &req, &[1, 2, 4, 8], &path)? {
                    println!("beam {}: CER {:.4}, backward fraction {:.4}", r.beam, r.cer, r.backward_fraction);
                }
            } else {
                println!("{}", commands::cmd_decode(&cfg, &req)?.summary());
            }
        }
        Command::Eval {
            data,
            split,
            hyps,
            out,
        } => {
            let r = commands::cmd_eval(&data, &split, &hyps, out.as_deref())?;
            println!("{} utterances: corpus CER {:.4}", r.rows.len(), r.cer);
        }
        Command::InspectAttention {
            data,
            checkpoint,
            split,
            utt,
            out,
        } => {
            for r in commands::cmd_inspect_attention(&cfg, &data, &split, &checkpoint, &utt, Some(&out))? {
                let shape = r.attention.shape();
                println!(
                    "{} {}: {} tokens x {} frames, monotone fraction {:.4}",
                    utt, r.direction, shape[0], shape[1], r.monotone_fraction
                );
            }
        }
        Command::Average { checkpoints, best, out } => {
            let avg = commands::cmd_average(&checkpoints, best, &out)?;
            println!(
                "averaged [{}] into {}",
                avg.metadata.get("averaged_from").map_or("", String::as_str),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STBD_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
