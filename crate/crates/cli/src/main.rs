use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use sepkit::metrics::EstimateSource;
use sepkit_cli::*;

#[derive(Parser)]
#[command(name = "sepkit", version, about = "Speaker-conditioned single-channel speech separation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oracle {
    /// Score the true target.
    Target,
    /// Score the unprocessed mixture.
    Mixture,
}

#[derive(Subcommand)]
enum Command {
    /// Mix an interference recording into a target at a given SNR.
    Mix {
        target: PathBuf,
        interference: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus manifest.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// JSON run configuration; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Final checkpoint path; the loss log and resolved config are
        /// written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separate a mixture with a trained checkpoint.
    Separate {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        target_context: PathBuf,
        #[arg(long)]
        interference_context: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score an evaluation manifest with SDR, SAR and SIR.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        oracle: Option<Oracle>,
        #[arg(long, default_value_t = sepkit::metrics::DEFAULT_FILTER_LEN)]
        filter_len: usize,
        /// Per-pair CSV; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a log-magnitude spectrogram as a PGM image.
    Spectrogram {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize a corpus of stand-in speakers and its manifest.
    MakeCorpus {
        #[arg(long)]
        out_dir: PathBuf,
        /// `harmonic:F0` or `noise:LOW:HIGH`, repeatable. Defaults to a
        /// 220 Hz harmonic speaker and a 3-5 kHz noise speaker.
        #[arg(long = "speaker")]
        speakers: Vec<String>,
        #[arg(long, default_value_t = 8)]
        per_speaker: usize,
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Freeze an evaluation set of cross-speaker pairs.
    EvalSet {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// SNRs cycled over the pairs.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snrs: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Mix {
            target,
            interference,
            snr,
            out,
        } => {
            let gain = cmd_mix(&target, &interference, snr, &out)?;
            println!("gain {gain}");
        }
        Command::Train {
            corpus,
            config,
            steps,
            seed,
            lr,
            batch_size,
            checkpoint_every,
            out,
        } => {
            let mut rc = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            rc.corpus = corpus.or(rc.corpus);
            rc.out = out.or(rc.out);
            rc.train.steps = steps.unwrap_or(rc.train.steps);
            rc.train.seed = seed.unwrap_or(rc.train.seed);
            rc.train.lr = lr.unwrap_or(rc.train.lr);
            rc.train.batch_size = batch_size.unwrap_or(rc.train.batch_size);
            rc.checkpoint_every = checkpoint_every.unwrap_or(rc.checkpoint_every);
            let s = cmd_train(rc)?;
            if let (Some(first), Some(last)) = (s.losses.first(), s.losses.last()) {
                eprintln!("{} steps, loss {first:.5} -> {last:.5}", s.losses.len());
            }
            println!("{}", s.checkpoint.display());
        }
        Command::Separate {
            mixture,
            target_context,
            interference_context,
            ckpt,
            out_dir,
        } => {
            let (t, i) = cmd_separate(&mixture, &target_context, &interference_context, &ckpt, &out_dir)?;
            println!("{}\n{}", t.display(), i.display());
        }
        Command::Evaluate {
            manifest,
            ckpt,
            oracle,
            filter_len,
            out,
        } => {
            let oracle = oracle.map(|o| match o {
                Oracle::Target => EstimateSource::OracleTarget,
                Oracle::Mixture => EstimateSource::OracleMixture,
            });
            let report = cmd_evaluate(&manifest, ckpt.as_deref(), oracle, filter_len, out.as_deref())?;
            if out.is_none() {
                print!("{}", report.to_csv());
            }
            let m = report.mean;
            eprintln!(
                "{} pairs: SDR {:.3} dB, SAR {:.3} dB, SIR {:.3} dB",
                report.pairs.len(),
                m.sdr,
                m.sar,
                m.sir
            );
        }
        Command::Spectrogram { wav, out } => {
            let (w, h) = cmd_spectrogram(&wav, &out)?;
            eprintln!("{w}x{h} image");
        }
        Command::MakeCorpus {
            out_dir,
            speakers,
            per_speaker,
            duration,
            seed,
        } => {
            let speakers = if speakers.is_empty() {
                default_speakers()
            } else {
                speakers
                    .iter()
                    .enumerate()
                    .map(|(k, s)| Ok((format!("spk{k}"), parse_speaker(s)?)))
                    .collect::<Result<_>>()?
            };
            println!("{}", cmd_make_corpus(&out_dir, &speakers, per_speaker, duration, seed)?.display());
        }
        Command::EvalSet {
            manifest,
            out,
            snrs,
            seed,
        } => {
            let snrs = snrs.unwrap_or_else(|| sepkit::datagen::EVAL_SNRS.to_vec());
            let n = cmd_eval_set(&manifest, &snrs, seed, &out)?;
            eprintln!("{n} pairs");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().context("configuring threads").and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
