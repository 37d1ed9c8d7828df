//! WAV input/output, corpus manifests and deterministic synthetic speakers.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only sample rate the pipeline operates at.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono signal. Amplitudes are nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn truncated(&self, len: usize) -> Waveform {
        Waveform::new(
            self.samples[..len.min(self.samples.len())].to_vec(),
            self.sample_rate,
        )
    }

    pub fn ensure_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate != expected {
            return Err(Error::WrongSampleRate {
                expected,
                actual: self.sample_rate,
            });
        }
        Ok(())
    }
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => crate::error::at(path)(e),
        hound::Error::FormatError(reason) => Error::NotWav {
            path: path.to_owned(),
            reason: reason.to_string(),
        },
        other => Error::UnsupportedEncoding {
            path: path.to_owned(),
            detail: other.to_string(),
        },
    }
}

/// Reads a 16-bit PCM mono WAV file, scaling samples by 1/32768.
///
/// The sample rate is taken from the header and not checked here.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding {
            path: path.to_owned(),
            detail: format!("{:?} with {} bits", spec.sample_format, spec.bits_per_sample),
        });
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedEncoding {
            path: path.to_owned(),
            detail: format!("{} channels", spec.channels),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Quantizes one sample the way [`write_wav`] stores it.
pub fn quantize(x: f64) -> i16 {
    let scaled = (x.clamp(-1.0, 1.0) * 32768.0).round();
    scaled.clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// Writes 16-bit PCM mono. Out-of-range samples are clipped, not rejected.
pub fn write_wav(path: impl AsRef<Path>, wf: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &x in &wf.samples {
        writer
            .write_sample(quantize(x))
            .map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))?;
    Ok(())
}

/// Kinds of deterministic stand-in speakers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpeakerKind {
    /// First five harmonics of `f0` with random phases.
    Harmonic { f0: f64 },
    /// White noise band-limited to `[low, high]` Hz.
    FilteredNoise { low: f64, high: f64 },
}

const SYNTH_RMS: f64 = 0.1;
const FIR_TAPS: usize = 129;

/// Synthesizes `duration` seconds of a stand-in speaker at 16 kHz, RMS 0.1.
///
/// Output is a pure function of `(kind, duration, seed)`.
pub fn synth_speaker(kind: SpeakerKind, duration: f64, seed: u64) -> Waveform {
    assert!(duration > 0.0, "duration must be positive");
    let len = ((duration * SAMPLE_RATE as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f64;
    let mut samples = match kind {
        SpeakerKind::Harmonic { f0 } => {
            let phases: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
            (0..len)
                .map(|t| {
                    let time = t as f64 / sr;
                    phases
                        .iter()
                        .enumerate()
                        .map(|(h, ph)| (2.0 * PI * (h + 1) as f64 * f0 * time + ph).sin())
                        .sum()
                })
                .collect::<Vec<f64>>()
        }
        SpeakerKind::FilteredNoise { low, high } => {
            let taps = bandpass_fir(low, high, sr, FIR_TAPS);
            let noise: Vec<f64> = (0..len + FIR_TAPS - 1)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            // valid part of the convolution only, so no start-up transient
            (0..len)
                .map(|t| {
                    taps.iter()
                        .enumerate()
                        .map(|(k, h)| h * noise[t + FIR_TAPS - 1 - k])
                        .sum()
                })
                .collect()
        }
    };
    let rms = (samples.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        let g = SYNTH_RMS / rms;
        samples.iter_mut().for_each(|x| *x *= g);
    }
    Waveform::new(samples, SAMPLE_RATE)
}

/// Hann-windowed sinc band-pass filter.
fn bandpass_fir(low: f64, high: f64, sr: f64, taps: usize) -> Vec<f64> {
    let mid = (taps - 1) as f64 / 2.0;
    let (fl, fh) = (low / sr, high / sr);
    let sinc_lp = |fc: f64, n: f64| {
        if n == 0.0 {
            2.0 * fc
        } else {
            (2.0 * PI * fc * n).sin() / (PI * n)
        }
    };
    (0..taps)
        .map(|k| {
            let n = k as f64 - mid;
            let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / (taps - 1) as f64).cos();
            (sinc_lp(fh, n) - sinc_lp(fl, n)) * w
        })
        .collect()
}

/// A list of speakers and their utterance files.
///
/// Serialized as a JSON object mapping speaker id to an array of WAV paths.
/// Relative paths are resolved against the manifest's directory on load.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusManifest {
    pub speakers: Vec<(String, Vec<PathBuf>)>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (id, utts) in &self.speakers {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate speaker id `{id}`")));
            }
            if utts.is_empty() {
                return Err(Error::InvalidManifest(format!("speaker `{id}` has no utterances")));
            }
        }
        Ok(())
    }

    pub fn num_utterances(&self) -> usize {
        self.speakers.iter().map(|(_, u)| u.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let map: BTreeMap<&str, &Vec<PathBuf>> =
            self.speakers.iter().map(|(id, u)| (id.as_str(), u)).collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, Vec<PathBuf>> = serde_json::from_str(text)?;
        let manifest = Self {
            speakers: map.into_iter().collect(),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut manifest = Self::from_json(&std::fs::read_to_string(path).map_err(crate::error::at(path))?)?;
        if let Some(dir) = path.parent() {
            for (_, utts) in &mut manifest.speakers {
                for p in utts.iter_mut() {
                    if p.is_relative() {
                        *p = dir.join(&*p);
                    }
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(crate::error::at(path))?;
        Ok(())
    }

    /// Seeded speaker-disjoint split into `(train, validation, test)`.
    pub fn split(&self, n_valid: usize, n_test: usize, seed: u64) -> Result<(Self, Self, Self)> {
        use rand::seq::SliceRandom;
        if n_valid + n_test >= self.speakers.len() {
            return Err(Error::InvalidManifest(format!(
                "cannot hold out {} speakers from {}",
                n_valid + n_test,
                self.speakers.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.speakers.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            Self {
                speakers: idx.iter().map(|&i| self.speakers[i].clone()).collect(),
            }
        };
        Ok((
            pick(&order[n_valid + n_test..]),
            pick(&order[..n_valid]),
            pick(&order[n_valid..n_valid + n_test]),
        ))
    }
}
