//! Batch commands behind the `sepkit` binary.
//!
//! Every command is a plain function so the integration tests can drive it
//! without spawning a process. Machine outputs go to files or to the
//! returned value; the binary prints human-facing summaries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use sepkit::datagen::{build_eval_set, eval_set_from_json, eval_set_to_json, EVAL_SNRS};
use sepkit::dsp;
use sepkit::metrics::{evaluate_model, EstimateSource, EvalReport, DEFAULT_FILTER_LEN};
use sepkit::train::{train, TrainOptions};
use sepkit::{read_wav, synth_speaker, write_wav, Corpus, CorpusManifest, ModelConfig, SeparationModel, SpeakerKind, SAMPLE_RATE};

/// Environment variable bounding the worker pool.
pub const THREADS_ENV: &str = "SEPKIT_THREADS";

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    /// SNRs cycled over evaluation pairs.
    pub eval_snrs: Vec<f64>,
    pub filter_len: usize,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainOptions::default(),
            eval_snrs: EVAL_SNRS.to_vec(),
            filter_len: DEFAULT_FILTER_LEN,
            checkpoint_every: 0,
            corpus: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fills derived model fields and checks everything.
    pub fn resolve(&mut self) -> Result<()> {
        self.model.resolve();
        self.model.validate()?;
        if self.filter_len == 0 {
            bail!("filter_len must be positive");
        }
        if self.eval_snrs.is_empty() || self.train.snrs.is_empty() {
            bail!("SNR sets must be non-empty");
        }
        Ok(())
    }
}

/// Sizes the global thread pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("{THREADS_ENV}={v:?} is not a positive integer"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

/// Mixes `interference` into `target` at `snr_db` and writes the mixture.
/// Returns the gain applied to the interference.
pub fn cmd_mix(target: &Path, interference: &Path, snr_db: f64, out: &Path) -> Result<f64> {
    let t = read_wav(target)?;
    let i = read_wav(interference)?;
    t.ensure_rate(SAMPLE_RATE)?;
    i.ensure_rate(SAMPLE_RATE)?;
    let (mix, gain) = dsp::mix_at_snr(&t, &i, snr_db)?;
    write_wav(out, &mix)?;
    Ok(gain)
}

/// Outcome of [`cmd_train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub run_config: PathBuf,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

/// `<ckpt>.loss.csv`
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".loss.csv")
}

/// `<ckpt>.run.json`
pub fn run_config_path(checkpoint: &Path) -> PathBuf {
    sibling(checkpoint, ".run.json")
}

/// `<ckpt>.step<N>`
pub fn periodic_checkpoint_path(checkpoint: &Path, step: usize) -> PathBuf {
    sibling(checkpoint, &format!(".step{step:06}"))
}

/// Trains from `config.corpus` and writes the final checkpoint to
/// `config.out`, plus a `step,loss` log and the resolved run config.
pub fn cmd_train(mut config: RunConfig) -> Result<TrainSummary> {
    config.resolve()?;
    let corpus_path = config.corpus.clone().context("no corpus manifest given")?;
    let out = config.out.clone().context("no output checkpoint path given")?;
    let manifest = CorpusManifest::load(&corpus_path)
        .with_context(|| format!("loading corpus manifest {}", corpus_path.display()))?;
    let corpus = Arc::new(Corpus::load(&manifest)?);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let run_config = run_config_path(&out);
    fs::write(&run_config, serde_json::to_string_pretty(&config)?)?;

    let loss_log = loss_log_path(&out);
    let mut log = std::io::BufWriter::new(fs::File::create(&loss_log)?);
    writeln!(log, "step,loss")?;
    let mut model = SeparationModel::<f32>::new(&config.model, config.train.seed)?;
    let every = config.checkpoint_every;
    let losses = train(&mut model, corpus, &config.train, |step, loss, m| {
        writeln!(log, "{step},{loss}")?;
        if every > 0 && step % every == 0 && step < config.train.steps {
            log.flush()?;
            m.save(periodic_checkpoint_path(&out, step))?;
        }
        Ok(())
    })?;
    log.flush()?;
    model.save(&out)?;
    Ok(TrainSummary {
        losses,
        checkpoint: out,
        loss_log,
        run_config,
    })
}

/// Separates a mixture given one recording of each speaker and writes
/// `target.wav` and `interference.wav` into `out_dir`.
pub fn cmd_separate(
    mixture: &Path,
    target_context: &Path,
    interference_context: &Path,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    let model = SeparationModel::<f32>::load(checkpoint, None)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let mix = read_wav(mixture)?;
    let tc = read_wav(target_context)?;
    let ic = read_wav(interference_context)?;
    let sep = model.separate_utterance(&mix, &tc, &ic)?;
    fs::create_dir_all(out_dir)?;
    let (t, i) = (out_dir.join("target.wav"), out_dir.join("interference.wav"));
    write_wav(&t, &sep.target)?;
    write_wav(&i, &sep.interference)?;
    Ok((t, i))
}

/// Scores an evaluation manifest. With `oracle` set, no checkpoint is
/// needed. Writes the per-pair CSV to `out` when given.
pub fn cmd_evaluate(
    manifest: &Path,
    checkpoint: Option<&Path>,
    oracle: Option<EstimateSource>,
    filter_len: usize,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let pairs = eval_set_from_json(&text)?;
    let model = match (checkpoint, oracle) {
        (Some(c), _) => Some(SeparationModel::<f32>::load(c, None).with_context(|| format!("loading checkpoint {}", c.display()))?),
        (None, Some(_)) => None,
        (None, None) => bail!("evaluation needs --ckpt unless --oracle is given"),
    };
    let report = evaluate_model(&pairs, model.as_ref(), oracle.unwrap_or(EstimateSource::Model), filter_len)?;
    if let Some(out) = out {
        fs::write(out, report.to_csv())?;
    }
    Ok(report)
}

/// Writes the log-magnitude spectrogram of a WAV file as a PGM image.
/// Returns `(width, height)`.
pub fn cmd_spectrogram(wav: &Path, out: &Path) -> Result<(usize, usize)> {
    let w = read_wav(wav)?;
    let (spec, _) = dsp::stft(&w)?;
    let lm = dsp::log_magnitude(&spec);
    dsp::export_spectrogram_image(&lm, out)?;
    Ok(lm.shape())
}

/// Parses `harmonic:F0` or `noise:LOW:HIGH`.
pub fn parse_speaker(spec: &str) -> Result<SpeakerKind> {
    let parts: Vec<&str> = spec.split(':').collect();
    let num = |s: &str| -> Result<f64> { s.parse().with_context(|| format!("bad number `{s}` in speaker `{spec}`")) };
    match parts.as_slice() {
        ["harmonic", f0] => Ok(SpeakerKind::Harmonic { f0: num(f0)? }),
        ["noise", lo, hi] => Ok(SpeakerKind::FilteredNoise {
            low: num(lo)?,
            high: num(hi)?,
        }),
        _ => bail!("speaker `{spec}` is neither harmonic:F0 nor noise:LOW:HIGH"),
    }
}

/// The two stand-in speakers used by default.
pub fn default_speakers() -> Vec<(String, SpeakerKind)> {
    vec![
        ("harmonic220".into(), SpeakerKind::Harmonic { f0: 220.0 }),
        (
            "noise3k5k".into(),
            SpeakerKind::FilteredNoise {
                low: 3000.0,
                high: 5000.0,
            },
        ),
    ]
}

/// Synthesizes a WAV corpus under `out_dir` and writes
/// `out_dir/manifest.json` with relative paths.
pub fn cmd_make_corpus(
    out_dir: &Path,
    speakers: &[(String, SpeakerKind)],
    per_speaker: usize,
    duration: f64,
    seed: u64,
) -> Result<PathBuf> {
    if !(duration > 0.0) || per_speaker == 0 {
        bail!("need a positive duration and at least one utterance per speaker");
    }
    let corpus = Corpus::synthetic(speakers, per_speaker, duration, seed);
    let mut manifest = CorpusManifest::default();
    for (id, utts) in &corpus.speakers {
        fs::create_dir_all(out_dir.join(id))?;
        let mut paths = Vec::new();
        for (k, u) in utts.iter().enumerate() {
            let rel = PathBuf::from(id).join(format!("{k:03}.wav"));
            write_wav(out_dir.join(&rel), u)?;
            paths.push(rel);
        }
        manifest.speakers.push((id.clone(), paths));
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// Freezes an evaluation set from a corpus manifest.
pub fn cmd_eval_set(manifest: &Path, snrs: &[f64], seed: u64, out: &Path) -> Result<usize> {
    let m = CorpusManifest::load(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let pairs = build_eval_set(&m, snrs, seed)?;
    fs::write(out, eval_set_to_json(&pairs)?)?;
    Ok(pairs.len())
}

/// Mean SNR of the pairs in `report`.
pub fn mean_snr(report: &EvalReport) -> f64 {
    report.pairs.iter().map(|p| p.snr_db).sum::<f64>() / report.pairs.len() as f64
}

/// Writes one stand-in speaker utterance.
pub fn synth_utterance(kind: SpeakerKind, duration: f64, seed: u64, out: &Path) -> Result<()> {
    write_wav(out, &synth_speaker(kind, duration, seed))?;
    Ok(())
}
