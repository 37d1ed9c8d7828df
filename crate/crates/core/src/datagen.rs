//! Training-example sampling and frozen evaluation sets.
//!
//! Every example is a pure function of the corpus and a `u64` seed, so a
//! training run is reproducible from its run seed alone.

use std::path::PathBuf;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, synth_speaker, CorpusManifest, SpeakerKind, Waveform, SAMPLE_RATE};
use crate::dsp::{self, LogMagSpectrogram};
use crate::error::{Error, Result};

/// Mixing SNRs for training examples, in dB.
pub const TRAIN_SNRS: [f64; 6] = [-5.0, 0.0, 5.0, 10.0, 15.0, 25.0];
/// Mixing SNRs for evaluation pairs, in dB, assigned cyclically.
pub const EVAL_SNRS: [f64; 7] = [-5.0, -3.0, -1.0, 0.0, 1.0, 3.0, 5.0];
/// Draws per example before giving up on too-short utterances.
pub const MAX_ATTEMPTS: usize = 100;

/// Decoded utterances grouped by speaker.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub speakers: Vec<(String, Vec<Waveform>)>,
}

impl Corpus {
    /// Reads every file listed in the manifest; all must be 16 kHz.
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        manifest.validate()?;
        let speakers = manifest
            .speakers
            .iter()
            .map(|(id, paths)| {
                let utts = paths
                    .iter()
                    .map(|p| {
                        let w = read_wav(p)?;
                        w.ensure_rate(SAMPLE_RATE)?;
                        Ok(w)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((id.clone(), utts))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { speakers })
    }

    /// `per_speaker` synthetic utterances of `duration` seconds for each
    /// speaker; utterance `u` of speaker `s` uses seed `seed + 1000 s + u`.
    pub fn synthetic(speakers: &[(String, SpeakerKind)], per_speaker: usize, duration: f64, seed: u64) -> Self {
        let speakers = speakers
            .iter()
            .enumerate()
            .map(|(s, (id, kind))| {
                let utts = (0..per_speaker)
                    .map(|u| synth_speaker(*kind, duration, seed + 1000 * s as u64 + u as u64))
                    .collect();
                (id.clone(), utts)
            })
            .collect();
        Self { speakers }
    }

    fn usable_speakers(&self) -> Vec<usize> {
        (0..self.speakers.len()).filter(|&i| !self.speakers[i].1.is_empty()).collect()
    }
}

/// How training examples are cut.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub segment_frames: usize,
    pub context_frames: usize,
    pub snrs: Vec<f64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            segment_frames: 100,
            context_frames: 35,
            snrs: TRAIN_SNRS.to_vec(),
        }
    }
}

/// Provenance of a training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub target_id: String,
    pub interference_id: String,
    pub target_utterance: usize,
    pub interference_utterance: usize,
    pub snr_db: f64,
    /// Applied to the interference before mixing.
    pub gain: f64,
    /// Common length of both sources after head-aligned truncation.
    pub num_samples: usize,
    pub segment_start: usize,
    pub target_context_start: usize,
    pub interference_context_start: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub mixture_segment: LogMagSpectrogram,
    pub target_context: LogMagSpectrogram,
    pub interference_context: LogMagSpectrogram,
    pub label_frame: Vec<f64>,
    pub meta: ExampleMeta,
}

impl TrainingExample {
    /// Rebuilds the truncated target and the scaled interference exactly as
    /// they were mixed.
    pub fn components(&self, corpus: &Corpus) -> Result<(Waveform, Waveform)> {
        let find = |id: &str, u: usize| {
            corpus
                .speakers
                .iter()
                .find(|(s, _)| s == id)
                .and_then(|(_, utts)| utts.get(u))
                .ok_or_else(|| Error::InvalidManifest(format!("no utterance {u} for speaker `{id}`")))
        };
        let m = &self.meta;
        let target = find(&m.target_id, m.target_utterance)?.truncated(m.num_samples);
        let mut interf = find(&m.interference_id, m.interference_utterance)?.truncated(m.num_samples);
        interf.samples.iter_mut().for_each(|v| *v *= m.gain);
        Ok((target, interf))
    }
}

/// Start positions of `len`-frame windows inside `frames` frames that do
/// not intersect `[seg, seg + seg_len)`.
fn context_starts(frames: usize, len: usize, seg: usize, seg_len: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = if seg >= len { (0..=seg - len).collect() } else { Vec::new() };
    let after = seg + seg_len;
    if after + len <= frames {
        starts.extend(after..=frames - len);
    }
    starts
}

/// Draws one training example; deterministic in `seed`.
pub fn sample_training_example(corpus: &Corpus, params: &SamplingParams, seed: u64) -> Result<TrainingExample> {
    let usable = corpus.usable_speakers();
    if usable.len() < 2 {
        return Err(Error::NotEnoughSpeakers(usable.len()));
    }
    if params.snrs.is_empty() {
        return Err(Error::Config("no training SNRs".into()));
    }
    let (s_len, c_len) = (params.segment_frames, params.context_frames);
    let needed_frames = s_len + c_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let tp = rng.random_range(0..usable.len());
        let mut ip = rng.random_range(0..usable.len() - 1);
        if ip >= tp {
            ip += 1;
        }
        let (ti, ii) = (usable[tp], usable[ip]);
        let (tid, tutts) = &corpus.speakers[ti];
        let (iid, iutts) = &corpus.speakers[ii];
        let tu = rng.random_range(0..tutts.len());
        let iu = rng.random_range(0..iutts.len());
        let snr = params.snrs[rng.random_range(0..params.snrs.len())];
        let n = tutts[tu].len().min(iutts[iu].len());
        let frames = dsp::frame_count(n);
        if frames < needed_frames {
            continue;
        }
        let target = tutts[tu].truncated(n);
        let interf = iutts[iu].truncated(n);
        if target.power() == 0.0 || interf.power() == 0.0 {
            continue;
        }
        // segment starts that leave room for a disjoint context
        let valid: Vec<usize> = (0..=frames - s_len)
            .filter(|&s| s >= c_len || s + s_len + c_len <= frames)
            .collect();
        let seg = valid[rng.random_range(0..valid.len())];
        let starts = context_starts(frames, c_len, seg, s_len);
        let tc = starts[rng.random_range(0..starts.len())];
        let ic = starts[rng.random_range(0..starts.len())];

        let (mixture, gain) = dsp::mix_at_snr(&target, &interf, snr)?;
        let lm = |w: &Waveform, start: usize, len: usize| -> Result<LogMagSpectrogram> {
            Ok(dsp::log_magnitude(&dsp::stft_frames(w, start, len)?))
        };
        return Ok(TrainingExample {
            mixture_segment: lm(&mixture, seg, s_len)?,
            target_context: lm(&target, tc, c_len)?,
            // taken before the mixing gain
            interference_context: lm(&interf, ic, c_len)?,
            label_frame: lm(&target, seg + s_len / 2, 1)?.row(0).to_vec(),
            meta: ExampleMeta {
                target_id: tid.clone(),
                interference_id: iid.clone(),
                target_utterance: tu,
                interference_utterance: iu,
                snr_db: snr,
                gain,
                num_samples: n,
                segment_start: seg,
                target_context_start: tc,
                interference_context_start: ic,
                seed,
            },
        });
    }
    Err(Error::TooShortUtterance {
        attempts: MAX_ATTEMPTS,
        needed_frames,
    })
}

/// Seeds for the examples of each step, drawn from one run seed.
#[derive(Debug, Clone)]
pub struct SeedStream(ChaCha8Rng);

impl SeedStream {
    pub fn new(run_seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(run_seed))
    }

    pub fn batch(&mut self, size: usize) -> Vec<u64> {
        (0..size).map(|_| self.0.next_u64()).collect()
    }
}

/// Builds one batch, generating examples in parallel.
pub fn sample_batch(corpus: &Corpus, params: &SamplingParams, seeds: &[u64]) -> Result<Vec<TrainingExample>> {
    seeds
        .par_iter()
        .map(|&s| sample_training_example(corpus, params, s))
        .collect()
}

/// Background producer of training batches over a bounded queue.
///
/// Batches arrive in order; the sequence is identical to calling
/// [`sample_batch`] with successive [`SeedStream::batch`] seeds.
pub struct Prefetcher {
    rx: Receiver<Result<Vec<TrainingExample>>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(
        corpus: Arc<Corpus>,
        params: SamplingParams,
        run_seed: u64,
        batch_size: usize,
        batches: usize,
        depth: usize,
    ) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let handle = std::thread::spawn(move || {
            let mut seeds = SeedStream::new(run_seed);
            for _ in 0..batches {
                let batch = sample_batch(&corpus, &params, &seeds.batch(batch_size));
                let failed = batch.is_err();
                if tx.send(batch).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }
}

impl Iterator for Prefetcher {
    type Item = Result<Vec<TrainingExample>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the producer before joining
        let (_, dead) = sync_channel(1);
        drop(std::mem::replace(&mut self.rx, dead));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// One frozen evaluation mixture. Contexts are the first frames of each
/// source utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub pair_id: usize,
    pub target_id: String,
    pub interference_id: String,
    pub target_path: PathBuf,
    pub interference_path: PathBuf,
    pub snr_db: f64,
    pub target_context_start: usize,
    pub interference_context_start: usize,
    pub seed: u64,
}

/// Sources of an evaluation pair, truncated to a common length and mixed.
#[derive(Debug, Clone)]
pub struct RenderedPair {
    pub pair_id: usize,
    pub snr_db: f64,
    pub target: Waveform,
    /// Interference after the mixing gain.
    pub interference: Waveform,
    pub mixture: Waveform,
    /// Unscaled interference, used for its context.
    pub interference_clean: Waveform,
}

impl RenderedPair {
    pub fn mix(pair_id: usize, target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<Self> {
        let n = target.len().min(interference.len());
        let target = target.truncated(n);
        let clean = interference.truncated(n);
        let (mixture, gain) = dsp::mix_at_snr(&target, &clean, snr_db)?;
        let mut scaled = clean.clone();
        scaled.samples.iter_mut().for_each(|v| *v *= gain);
        Ok(Self {
            pair_id,
            snr_db,
            target,
            interference: scaled,
            mixture,
            interference_clean: clean,
        })
    }
}

impl EvalPair {
    pub fn render(&self) -> Result<RenderedPair> {
        let t = read_wav(&self.target_path)?;
        let i = read_wav(&self.interference_path)?;
        t.ensure_rate(SAMPLE_RATE)?;
        i.ensure_rate(SAMPLE_RATE)?;
        RenderedPair::mix(self.pair_id, &t, &i, self.snr_db)
    }
}

/// Seeded pairing of utterances across speakers with cyclic SNRs.
///
/// Each round pairs an utterance of the speaker with the most unpaired
/// utterances with one of the runner-up, which yields a perfect matching
/// whenever no speaker holds more than half of the utterances. Leftovers
/// are dropped.
pub fn build_eval_set(manifest: &CorpusManifest, snrs: &[f64], seed: u64) -> Result<Vec<EvalPair>> {
    manifest.validate()?;
    if snrs.is_empty() {
        return Err(Error::Config("no evaluation SNRs".into()));
    }
    if manifest.speakers.len() < 2 {
        return Err(Error::NotEnoughSpeakers(manifest.speakers.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<(usize, Vec<&PathBuf>)> = manifest
        .speakers
        .iter()
        .enumerate()
        .map(|(i, (_, utts))| {
            let mut u: Vec<&PathBuf> = utts.iter().collect();
            u.shuffle(&mut rng);
            (i, u)
        })
        .collect();
    let mut pairs = Vec::new();
    loop {
        // largest pools first; ties broken by speaker index
        pools.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        if pools.len() < 2 || pools[1].1.is_empty() {
            break;
        }
        let a = pools[0].1.pop().expect("non-empty");
        let b = pools[1].1.pop().expect("non-empty");
        let (sa, sb) = (pools[0].0, pools[1].0);
        let ((ts, tp), (is, ip)) = if rng.random_bool(0.5) {
            ((sa, a), (sb, b))
        } else {
            ((sb, b), (sa, a))
        };
        pairs.push((ts, tp.clone(), is, ip.clone()));
    }
    pairs.shuffle(&mut rng);
    Ok(pairs
        .into_iter()
        .enumerate()
        .map(|(k, (ts, tp, is, ip))| EvalPair {
            pair_id: k,
            target_id: manifest.speakers[ts].0.clone(),
            interference_id: manifest.speakers[is].0.clone(),
            target_path: tp,
            interference_path: ip,
            snr_db: snrs[k % snrs.len()],
            target_context_start: 0,
            interference_context_start: 0,
            seed: rng.next_u64(),
        })
        .collect())
}

pub fn eval_set_to_json(pairs: &[EvalPair]) -> Result<String> {
    Ok(serde_json::to_string_pretty(pairs)?)
}

pub fn eval_set_from_json(text: &str) -> Result<Vec<EvalPair>> {
    let pairs: Vec<EvalPair> = serde_json::from_str(text)?;
    if let Some(p) = pairs.iter().find(|p| p.target_id == p.interference_id) {
        return Err(Error::InvalidManifest(format!("pair {} mixes a speaker with itself", p.pair_id)));
    }
    Ok(pairs)
}
