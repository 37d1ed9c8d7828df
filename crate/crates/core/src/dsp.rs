//! Spectral front end: periodic-Hann STFT with 400-sample frames and a
//! 160-sample hop, log-magnitude features, WOLA resynthesis, SNR mixing and
//! spectrogram image export.

use std::f64::consts::PI;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use num_traits::Zero;
use realfft::num_complex::Complex64;
use realfft::RealFftPlanner;

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const WIN_LEN: usize = 400;
pub const HOP: usize = 160;
pub const N_BINS: usize = WIN_LEN / 2 + 1;
/// Added to magnitudes before taking the logarithm.
pub const MAG_FLOOR: f64 = 1e-5;

/// Number of complete frames in a signal of `num_samples`.
pub fn frame_count(num_samples: usize) -> usize {
    if num_samples < WIN_LEN {
        0
    } else {
        (num_samples - WIN_LEN) / HOP + 1
    }
}

/// Row-major `frames × bins` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TfMatrix<T> {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<T>,
}

impl<T: Clone> TfMatrix<T> {
    pub fn filled(frames: usize, bins: usize, value: T) -> Self {
        Self {
            frames,
            bins,
            data: vec![value; frames * bins],
        }
    }

    pub fn from_vec(frames: usize, bins: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {frames}x{bins} matrix",
                data.len()
            )));
        }
        Ok(Self { frames, bins, data })
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [T] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, k: usize) -> &T {
        &self.data[t * self.bins + k]
    }

    /// Copy of frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        Self {
            frames: len,
            bins: self.bins,
            data: self.data[start * self.bins..(start + len) * self.bins].to_vec(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.bins)
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> TfMatrix<U> {
        TfMatrix {
            frames: self.frames,
            bins: self.bins,
            data: self.data.iter().map(f).collect(),
        }
    }
}

pub type ComplexSpectrogram = TfMatrix<Complex64>;
pub type MagnitudeMatrix = TfMatrix<f64>;

/// Natural-log magnitude, floored at `ln(MAG_FLOOR)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMagSpectrogram(pub TfMatrix<f64>);

impl Deref for LogMagSpectrogram {
    type Target = TfMatrix<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

impl LogMagSpectrogram {
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        Self(self.0.slice_frames(start, len))
    }
}

/// Per-bin phase in radians, in (-π, π].
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMatrix(pub TfMatrix<f64>);

impl Deref for PhaseMatrix {
    type Target = TfMatrix<f64>;
    fn deref(&self) -> &Self::Target {
        &self.0
    }
}

/// Periodic Hann window, `w[k] = 0.5 (1 - cos(2πk/n))`.
pub fn hann_window(n: usize) -> Vec<f64> {
    assert!(n >= 2, "window length must be at least 2");
    (0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect()
}

/// Short-time Fourier transform of a 16 kHz waveform. Trailing samples that
/// do not fill a frame are dropped.
pub fn stft(wf: &Waveform) -> Result<(ComplexSpectrogram, PhaseMatrix)> {
    wf.ensure_rate(SAMPLE_RATE)?;
    let frames = frame_count(wf.len());
    if frames == 0 {
        return Err(Error::TooShort {
            what: "waveform for STFT".into(),
            needed: WIN_LEN,
            actual: wf.len(),
        });
    }
    let spec = stft_frames(wf, 0, frames)?;
    let phase = PhaseMatrix(spec.map(|c| c.arg()));
    Ok((spec, phase))
}

/// Frames `start..start + len` of [`stft`], without the phase.
pub fn stft_frames(wf: &Waveform, start: usize, len: usize) -> Result<ComplexSpectrogram> {
    wf.ensure_rate(SAMPLE_RATE)?;
    let frames = frame_count(wf.len());
    if start + len > frames {
        return Err(Error::TooShort {
            what: format!("waveform for STFT frames {start}..{}", start + len),
            needed: (start + len - 1) * HOP + WIN_LEN,
            actual: wf.len(),
        });
    }
    let window = hann_window(WIN_LEN);
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(WIN_LEN);
    let mut scratch = fft.make_scratch_vec();
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut spec = TfMatrix::filled(len, N_BINS, Complex64::zero());
    for t in 0..len {
        let chunk = &wf.samples[(start + t) * HOP..(start + t) * HOP + WIN_LEN];
        for ((dst, x), w) in input.iter_mut().zip(chunk).zip(&window) {
            *dst = x * w;
        }
        fft.process_with_scratch(&mut input, &mut output, &mut scratch)
            .expect("buffer sizes come from the plan");
        spec.row_mut(t).copy_from_slice(&output);
    }
    Ok(spec)
}

/// `ln(|X| + 1e-5)` elementwise.
pub fn log_magnitude(spec: &ComplexSpectrogram) -> LogMagSpectrogram {
    LogMagSpectrogram(spec.map(|c| (c.norm() + MAG_FLOOR).ln()))
}

/// Inverse of [`log_magnitude`], clamped at zero for values under the floor.
pub fn inv_log_magnitude(lm: &TfMatrix<f64>) -> MagnitudeMatrix {
    lm.map(|v| (v.exp() - MAG_FLOOR).max(0.0))
}

/// Weighted overlap-add resynthesis with squared-window normalization,
/// truncated or zero-padded to `out_len` samples.
pub fn istft(mag: &MagnitudeMatrix, phase: &PhaseMatrix, out_len: usize) -> Result<Waveform> {
    if mag.shape() != phase.shape() || mag.bins != N_BINS {
        return Err(Error::ShapeMismatch(format!(
            "magnitude {:?} vs phase {:?} (bins must be {N_BINS})",
            mag.shape(),
            phase.shape()
        )));
    }
    let window = hann_window(WIN_LEN);
    let ifft = RealFftPlanner::<f64>::new().plan_fft_inverse(WIN_LEN);
    let mut scratch = ifft.make_scratch_vec();
    let mut spectrum = ifft.make_input_vec();
    let mut frame = ifft.make_output_vec();
    let ola_len = if mag.frames == 0 {
        0
    } else {
        (mag.frames - 1) * HOP + WIN_LEN
    };
    let mut acc = vec![0.0; ola_len.max(out_len)];
    let mut wsum = vec![0.0; ola_len.max(out_len)];
    let norm = 1.0 / WIN_LEN as f64;
    for t in 0..mag.frames {
        for (k, s) in spectrum.iter_mut().enumerate() {
            *s = Complex64::from_polar(*mag.get(t, k), *phase.get(t, k));
        }
        // a real signal has purely real DC and Nyquist bins
        spectrum[0].im = 0.0;
        spectrum[N_BINS - 1].im = 0.0;
        ifft.process_with_scratch(&mut spectrum, &mut frame, &mut scratch)
            .expect("DC/Nyquist imaginary parts are zeroed");
        let start = t * HOP;
        for (j, (x, w)) in frame.iter().zip(&window).enumerate() {
            acc[start + j] += x * norm * w;
            wsum[start + j] += w * w;
        }
    }
    let samples = acc
        .iter()
        .zip(&wsum)
        .take(out_len)
        .map(|(a, w)| if *w > 1e-10 { a / w } else { 0.0 })
        .collect();
    Ok(Waveform::new(samples, SAMPLE_RATE))
}

/// Scales `interference` so the target-to-interference power ratio is
/// exactly `snr_db`, returning the mixture and the applied gain.
pub fn mix_at_snr(target: &Waveform, interference: &Waveform, snr_db: f64) -> Result<(Waveform, f64)> {
    if target.len() != interference.len() {
        return Err(Error::ShapeMismatch(format!(
            "target has {} samples, interference {}",
            target.len(),
            interference.len()
        )));
    }
    let pt = target.power();
    let pi = interference.power();
    if pt <= 0.0 {
        return Err(Error::ZeroPower("target"));
    }
    if pi <= 0.0 {
        return Err(Error::ZeroPower("interference"));
    }
    let gain = (pt / (pi * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = target
        .samples
        .iter()
        .zip(&interference.samples)
        .map(|(t, i)| t + gain * i)
        .collect();
    Ok((Waveform::new(samples, target.sample_rate), gain))
}

/// Power ratio of two signals in dB.
pub fn snr_db(signal: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (signal.power() / noise.power()).log10()
}

/// Writes a binary PGM with time on the x axis and the highest bin on the
/// top row, min-max normalized to 0..=255.
pub fn export_spectrogram_image(lm: &TfMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(crate::error::at(path))?;
    let mut out = std::io::BufWriter::new(file);
    out.write_all(&spectrogram_pgm(lm))?;
    out.flush()?;
    Ok(())
}

/// PGM bytes for [`export_spectrogram_image`].
pub fn spectrogram_pgm(lm: &TfMatrix<f64>) -> Vec<u8> {
    let (lo, hi) = lm
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let mut bytes = format!("P5 {} {} 255\n", lm.frames, lm.bins).into_bytes();
    bytes.reserve(lm.frames * lm.bins);
    for k in (0..lm.bins).rev() {
        for t in 0..lm.frames {
            let px = if range > 0.0 {
                ((lm.get(t, k) - lo) / range * 255.0).round() as u8
            } else {
                0
            };
            bytes.push(px);
        }
    }
    bytes
}

/// Mean STFT magnitude per frequency bin.
pub fn mean_magnitude_spectrum(wf: &Waveform) -> Result<Vec<f64>> {
    let (spec, _) = stft(wf)?;
    let mut mean = vec![0.0; N_BINS];
    for t in 0..spec.frames {
        for (m, c) in mean.iter_mut().zip(spec.row(t)) {
            *m += c.norm();
        }
    }
    mean.iter_mut().for_each(|m| *m /= spec.frames as f64);
    Ok(mean)
}
