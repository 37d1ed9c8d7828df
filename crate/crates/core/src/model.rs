//! The separation network: two independent residual speaker-embedding
//! subnetworks and a residual separation subnetwork conditioned on both
//! embeddings at every convolution.
//!
//! Feature maps are laid out `[N, C, time, freq]`. The separation subnetwork
//! predicts a correction `o` for the center frame of a mixture segment; the
//! estimated target frame is `center + o` and the estimated interference
//! frame is `center - estimated_target`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::datagen::TrainingExample;
use crate::dsp::{self, LogMagSpectrogram, TfMatrix, HOP, N_BINS, WIN_LEN};
use crate::error::{Error, Result};
use crate::nn::{self, checkpoint, join_name, same_padding, BatchNorm, Conv2d, Linear, Mode, Parameterized, Scalar, Tape, Tensor, Var};

/// Kernel `(time, freq)`, stride `(time, freq)` and output channel count of
/// one residual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub channels: usize,
}

const fn block(kernel: (usize, usize), stride: (usize, usize), channels: usize) -> BlockSpec {
    BlockSpec {
        kernel,
        stride,
        channels,
    }
}

/// Embedding subnetwork blocks.
pub const EMBED_BLOCKS: [BlockSpec; 4] = [
    block((8, 4), (3, 2), 64),
    block((8, 4), (3, 2), 128),
    block((4, 4), (1, 1), 256),
    block((4, 4), (1, 2), 512),
];

/// Separation subnetwork blocks.
pub const SEP_BLOCKS: [BlockSpec; 8] = [
    block((4, 4), (1, 1), 64),
    block((4, 4), (1, 1), 64),
    block((4, 4), (2, 2), 128),
    block((4, 4), (1, 1), 128),
    block((3, 3), (2, 2), 256),
    block((3, 3), (1, 1), 256),
    block((3, 3), (2, 2), 512),
    block((3, 3), (1, 1), 512),
];

/// Where the projected embeddings are added relative to batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionPoint {
    /// Directly on the convolution output, before batch normalization.
    PostConv,
    /// After batch normalization, before the ReLU.
    PostBn,
}

/// Every architectural hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_blocks: Vec<BlockSpec>,
    pub sep_blocks: Vec<BlockSpec>,
    /// Length of a speaker embedding; 0 means "derive from the last
    /// embedding block".
    pub embed_dim: usize,
    pub segment_frames: usize,
    pub context_frames: usize,
    pub n_freq: usize,
    /// Multiplies every channel count (rounded up).
    pub width_scale: f64,
    pub injection_point: InjectionPoint,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Multiplies the flattened features entering the final layer; 0 means
    /// `1 / sqrt(time * freq)` of the last separation feature map.
    pub fc_input_scale: f64,
    /// Logarithm used for features. Only `"natural"` is produced.
    pub feature_log: String,
    pub feature_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_blocks: EMBED_BLOCKS.to_vec(),
            sep_blocks: SEP_BLOCKS.to_vec(),
            embed_dim: 0,
            segment_frames: 100,
            context_frames: 35,
            n_freq: N_BINS,
            width_scale: 1.0,
            injection_point: InjectionPoint::PostBn,
            bn_eps: BatchNorm::<f32>::EPS,
            bn_momentum: BatchNorm::<f32>::MOMENTUM,
            fc_input_scale: 0.0,
            feature_log: "natural".into(),
            feature_floor: dsp::MAG_FLOOR,
        }
    }
}

impl ModelConfig {
    /// Default architecture with every channel count scaled by `width_scale`.
    pub fn with_width(width_scale: f64) -> Self {
        let mut c = Self {
            width_scale,
            ..Self::default()
        };
        c.resolve();
        c
    }

    pub fn channels(&self, nominal: usize) -> usize {
        ((nominal as f64 * self.width_scale).ceil() as usize).max(1)
    }

    /// Fills derived fields.
    pub fn resolve(&mut self) {
        if self.embed_dim == 0 {
            if let Some(last) = self.embed_blocks.last() {
                self.embed_dim = self.channels(last.channels);
            }
        }
        if self.fc_input_scale == 0.0 && !self.sep_blocks.is_empty() && self.segment_frames > 0 {
            let (_, h, w) = *self.sep_ladder().last().expect("non-empty");
            self.fc_input_scale = 1.0 / ((h * w) as f64).sqrt();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.width_scale > 0.0 && self.width_scale <= 1.0) {
            return bad(format!("width_scale {} not in (0, 1]", self.width_scale));
        }
        if self.embed_blocks.is_empty() || self.sep_blocks.is_empty() {
            return bad("both subnetworks need at least one block".into());
        }
        for b in self.embed_blocks.iter().chain(&self.sep_blocks) {
            if b.kernel.0 == 0 || b.kernel.1 == 0 || b.stride.0 == 0 || b.stride.1 == 0 || b.channels == 0 {
                return bad(format!("degenerate block {b:?}"));
            }
        }
        let last = self.channels(self.embed_blocks.last().expect("non-empty").channels);
        if self.embed_dim != last {
            return bad(format!(
                "embed_dim {} must equal the last embedding block's channel count {last}",
                self.embed_dim
            ));
        }
        if self.segment_frames == 0 || self.context_frames == 0 || self.n_freq == 0 {
            return bad("segment_frames, context_frames and n_freq must be positive".into());
        }
        if !(self.fc_input_scale > 0.0 && self.fc_input_scale.is_finite()) {
            return bad(format!("fc_input_scale {} must be positive", self.fc_input_scale));
        }
        if self.feature_log != "natural" || self.feature_floor != dsp::MAG_FLOOR {
            return bad("features are natural-log magnitudes with a 1e-5 floor".into());
        }
        Ok(())
    }

    /// Index of the predicted frame within a segment.
    pub fn center_frame(&self) -> usize {
        self.segment_frames / 2
    }

    fn ladder(&self, blocks: &[BlockSpec], mut h: usize, mut w: usize) -> Vec<(usize, usize, usize)> {
        blocks
            .iter()
            .map(|b| {
                h = same_padding(h, b.kernel.0, b.stride.0).0;
                w = same_padding(w, b.kernel.1, b.stride.1).0;
                (self.channels(b.channels), h, w)
            })
            .collect()
    }

    /// `(channels, time, freq)` after each embedding block.
    pub fn embed_ladder(&self) -> Vec<(usize, usize, usize)> {
        self.ladder(&self.embed_blocks, self.context_frames, self.n_freq)
    }

    /// `(channels, time, freq)` after each separation block.
    pub fn sep_ladder(&self) -> Vec<(usize, usize, usize)> {
        self.ladder(&self.sep_blocks, self.segment_frames, self.n_freq)
    }

    /// Input size of the final fully-connected layer.
    pub fn flatten_size(&self) -> usize {
        let (c, h, w) = *self.sep_ladder().last().expect("validated");
        c * h * w
    }
}

/// A fixed-length speaker summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn cosine_similarity(&self, other: &Self) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = other.0.iter().map(|b| b * b).sum::<f64>().sqrt();
        dot / (na * nb).max(f64::MIN_POSITIVE)
    }
}

/// Estimated log-magnitude frames for the center of one mixture segment.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub est_target: Vec<f64>,
    pub est_interference: Vec<f64>,
}

impl FramePair {
    fn from_correction(center: &[f64], correction: &[f64]) -> Self {
        let est_target: Vec<f64> = center.iter().zip(correction).map(|(c, o)| c + o).collect();
        let est_interference = center.iter().zip(&est_target).map(|(c, t)| c - t).collect();
        Self {
            est_target,
            est_interference,
        }
    }
}

/// Adds `proj_t(tgt)[n, c] + proj_i(itf)[n, c]` at every location of
/// `feature_map[n, c, :, :]`.
pub fn condition<T: Scalar>(
    tape: &mut Tape<T>,
    feature_map: Var,
    tgt: Var,
    itf: Var,
    proj_t: &Linear<T>,
    proj_i: &Linear<T>,
) -> Result<Var> {
    let c = tape.shape(feature_map).get(1).copied().unwrap_or(0);
    if proj_t.out_dim() != c || proj_i.out_dim() != c {
        return Err(Error::ShapeMismatch(format!(
            "projections to {} and {} for a map with {c} channels",
            proj_t.out_dim(),
            proj_i.out_dim()
        )));
    }
    let pt = proj_t.forward(tape, tgt)?;
    let pi = proj_i.forward(tape, itf)?;
    let offset = tape.add(pt, pi)?;
    tape.add_channel(feature_map, offset)
}

/// Embedding projections for the two convolutions of a conditioned block.
#[derive(Debug, Clone)]
pub struct BlockConditioning<T> {
    pub target1: Linear<T>,
    pub interference1: Linear<T>,
    pub target2: Linear<T>,
    pub interference2: Linear<T>,
}

impl<T: Scalar> Parameterized<T> for BlockConditioning<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.target1.visit(&join_name(prefix, "target1"), f);
        self.interference1.visit(&join_name(prefix, "interference1"), f);
        self.target2.visit(&join_name(prefix, "target2"), f);
        self.interference2.visit(&join_name(prefix, "interference2"), f);
    }
}

/// Speaker embeddings (`[N, embed_dim]` on the tape) fed to a conditioned
/// block.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning {
    pub target: Var,
    pub interference: Var,
    pub injection: InjectionPoint,
}

/// `relu(bn_out(conv2(relu(bn_mid(conv1(x)))) + shortcut(x)))`, with the
/// block stride on `conv1`.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn_mid: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn_out: BatchNorm<T>,
    /// 1×1 projection, present iff channels change or the stride is not 1.
    pub shortcut: Option<Conv2d<T>>,
    pub cond: Option<BlockConditioning<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: rand::Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        spec: &BlockSpec,
        cond_dim: Option<usize>,
        bn: (f64, f64),
        rng: &mut R,
    ) -> Self {
        let bn_layer = |c| {
            let mut l = BatchNorm::new(c);
            (l.eps, l.momentum) = bn;
            l
        };
        let conv1 = Conv2d::new(in_ch, out_ch, spec.kernel, spec.stride, rng);
        let conv2 = Conv2d::new(out_ch, out_ch, spec.kernel, (1, 1), rng);
        let shortcut = (in_ch != out_ch || spec.stride != (1, 1)).then(|| Conv2d::new(in_ch, out_ch, (1, 1), spec.stride, rng));
        let cond = cond_dim.map(|d| BlockConditioning {
            target1: Linear::new(d, out_ch, rng),
            interference1: Linear::new(d, out_ch, rng),
            target2: Linear::new(d, out_ch, rng),
            interference2: Linear::new(d, out_ch, rng),
        });
        Self {
            conv1,
            bn_mid: bn_layer(out_ch),
            conv2,
            bn_out: bn_layer(out_ch),
            shortcut,
            cond,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, cond: Option<&Conditioning>, mode: Mode) -> Result<Var> {
        let proj = match (cond, &self.cond) {
            (Some(c), Some(p)) => Some((c, p)),
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::ShapeMismatch("conditioning given to an unconditioned block".into()))
            }
        };
        let inject = |tape: &mut Tape<T>, v: Var, at: InjectionPoint, second: bool| -> Result<Var> {
            match proj {
                Some((c, p)) if c.injection == at => {
                    let (pt, pi) = if second {
                        (&p.target2, &p.interference2)
                    } else {
                        (&p.target1, &p.interference1)
                    };
                    condition(tape, v, c.target, c.interference, pt, pi)
                }
                _ => Ok(v),
            }
        };

        let h = self.conv1.forward(tape, x)?;
        let h = inject(tape, h, InjectionPoint::PostConv, false)?;
        let h = self.bn_mid.forward(tape, h, mode)?;
        let h = inject(tape, h, InjectionPoint::PostBn, false)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h)?;
        let h = inject(tape, h, InjectionPoint::PostConv, true)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(tape, x)?,
            None => x,
        };
        let s = tape.add(h, skip)?;
        let y = self.bn_out.forward(tape, s, mode)?;
        let y = inject(tape, y, InjectionPoint::PostBn, true)?;
        Ok(tape.relu(y))
    }
}

impl<T: Scalar> Parameterized<T> for ResidualBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit(&join_name(prefix, "conv1"), f);
        self.bn_mid.visit(&join_name(prefix, "bn_mid"), f);
        self.conv2.visit(&join_name(prefix, "conv2"), f);
        self.bn_out.visit(&join_name(prefix, "bn_out"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit(&join_name(prefix, "shortcut"), f);
        }
        if let Some(c) = &mut self.cond {
            c.visit(&join_name(prefix, "cond"), f);
        }
    }
}

fn to_scalars<T: Scalar>(values: &[f64]) -> impl Iterator<Item = T> + '_ {
    values.iter().map(|&v| T::of(v))
}

/// Stacks equally sized spectrogram excerpts into `[N, 1, frames, bins]`.
fn stack<T: Scalar>(tape: &mut Tape<T>, mats: &[&TfMatrix<f64>], frames: usize, bins: usize) -> Result<Var> {
    let mut data = Vec::with_capacity(mats.len() * frames * bins);
    for m in mats {
        if m.shape() != (frames, bins) {
            return Err(Error::ShapeMismatch(format!(
                "expected a {frames}x{bins} excerpt, got {:?}",
                m.shape()
            )));
        }
        data.extend(to_scalars::<T>(&m.data));
    }
    tape.constant(&[mats.len(), 1, frames, bins], data)
}

/// Residual blocks followed by global average pooling.
#[derive(Debug, Clone)]
pub struct EmbeddingNet<T> {
    pub blocks: Vec<ResidualBlock<T>>,
    context_frames: usize,
    n_freq: usize,
}

impl<T: Scalar> EmbeddingNet<T> {
    fn new<R: rand::Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut in_ch = 1;
        let blocks = cfg
            .embed_blocks
            .iter()
            .map(|b| {
                let out = cfg.channels(b.channels);
                let blk = ResidualBlock::new(in_ch, out, b, None, (cfg.bn_eps, cfg.bn_momentum), rng);
                in_ch = out;
                blk
            })
            .collect();
        Self {
            blocks,
            context_frames: cfg.context_frames,
            n_freq: cfg.n_freq,
        }
    }

    /// Feature map after the last block, `[N, C, H, W]`.
    pub fn pre_pool(&self, tape: &mut Tape<T>, contexts: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(contexts);
        if s.len() != 4 || s[1] != 1 || s[2] != self.context_frames || s[3] != self.n_freq {
            return Err(Error::ShapeMismatch(format!(
                "embedding input {s:?}, expected [N, 1, {}, {}]",
                self.context_frames, self.n_freq
            )));
        }
        let mut h = contexts;
        for b in &self.blocks {
            h = b.forward(tape, h, None, mode)?;
        }
        Ok(h)
    }

    /// `[N, 1, context_frames, n_freq] -> [N, embed_dim]`.
    pub fn forward(&self, tape: &mut Tape<T>, contexts: Var, mode: Mode) -> Result<Var> {
        let h = self.pre_pool(tape, contexts, mode)?;
        tape.global_avg_pool(h)
    }

    /// Embeds one clean context excerpt (inference mode).
    pub fn embed_speaker(&self, context: &LogMagSpectrogram) -> Result<SpeakerEmbedding> {
        let mut tape = Tape::new();
        let x = stack(&mut tape, &[&context.0], self.context_frames, self.n_freq)?;
        let e = self.forward(&mut tape, x, Mode::Infer)?;
        Ok(SpeakerEmbedding(tape.value(e).iter().map(|v| v.as_f64()).collect()))
    }
}

impl<T: Scalar> Parameterized<T> for EmbeddingNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join_name(prefix, &format!("block{i}")), f);
        }
    }
}

/// Conditioned residual blocks, flatten and a fully-connected layer that
/// predicts the center-frame correction.
#[derive(Debug, Clone)]
pub struct SeparationNet<T> {
    pub blocks: Vec<ResidualBlock<T>>,
    /// Zero-initialized so an untrained model passes the mixture through.
    pub fc: Linear<T>,
    injection: InjectionPoint,
    fc_input_scale: f64,
    segment_frames: usize,
    n_freq: usize,
}

impl<T: Scalar> SeparationNet<T> {
    fn new<R: rand::Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut in_ch = 1;
        let blocks = cfg
            .sep_blocks
            .iter()
            .map(|b| {
                let out = cfg.channels(b.channels);
                let blk = ResidualBlock::new(in_ch, out, b, Some(cfg.embed_dim), (cfg.bn_eps, cfg.bn_momentum), rng);
                in_ch = out;
                blk
            })
            .collect();
        Self {
            blocks,
            fc: Linear::zeros(cfg.flatten_size(), cfg.n_freq),
            injection: cfg.injection_point,
            fc_input_scale: cfg.fc_input_scale,
            segment_frames: cfg.segment_frames,
            n_freq: cfg.n_freq,
        }
    }

    /// Feature map after the last block.
    pub fn features(&self, tape: &mut Tape<T>, segments: Var, tgt: Var, itf: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(segments);
        if s.len() != 4 || s[1] != 1 || s[2] != self.segment_frames || s[3] != self.n_freq {
            return Err(Error::ShapeMismatch(format!(
                "separation input {s:?}, expected [N, 1, {}, {}]",
                self.segment_frames, self.n_freq
            )));
        }
        let cond = Conditioning {
            target: tgt,
            interference: itf,
            injection: self.injection,
        };
        let mut h = segments;
        for b in &self.blocks {
            h = b.forward(tape, h, Some(&cond), mode)?;
        }
        Ok(h)
    }

    /// Center-frame correction `o`, `[N, n_freq]`.
    pub fn forward(&self, tape: &mut Tape<T>, segments: Var, tgt: Var, itf: Var, mode: Mode) -> Result<Var> {
        let h = self.features(tape, segments, tgt, itf, mode)?;
        let n = tape.shape(h)[0];
        let flat_len = tape.value(h).len() / n.max(1);
        let flat = tape.reshape(h, &[n, flat_len])?;
        let flat = tape.scale(flat, T::of(self.fc_input_scale));
        self.fc.forward(tape, flat)
    }

    /// Estimates target and interference for the center frame of one
    /// segment (inference mode).
    pub fn separate_frame(
        &self,
        mixture_segment: &LogMagSpectrogram,
        tgt: &SpeakerEmbedding,
        itf: &SpeakerEmbedding,
    ) -> Result<FramePair> {
        let mut tape = Tape::new();
        let x = stack(&mut tape, &[&mixture_segment.0], self.segment_frames, self.n_freq)?;
        let te = tape.constant(&[1, tgt.0.len()], to_scalars(&tgt.0).collect())?;
        let ie = tape.constant(&[1, itf.0.len()], to_scalars(&itf.0).collect())?;
        let o = self.forward(&mut tape, x, te, ie, Mode::Infer)?;
        let correction: Vec<f64> = tape.value(o).iter().map(|v| v.as_f64()).collect();
        Ok(FramePair::from_correction(
            mixture_segment.row(self.segment_frames / 2),
            &correction,
        ))
    }
}

impl<T: Scalar> Parameterized<T> for SeparationNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join_name(prefix, &format!("block{i}")), f);
        }
        self.fc.visit(&join_name(prefix, "fc"), f);
    }
}

/// Result of separating a whole utterance.
#[derive(Debug, Clone)]
pub struct SeparatedUtterance {
    pub target: Waveform,
    pub interference: Waveform,
    pub est_target: LogMagSpectrogram,
    pub est_interference: LogMagSpectrogram,
    /// Number of sliding-window network evaluations.
    pub windows: usize,
}

/// Windows evaluated together during utterance inference.
const INFER_BATCH: usize = 16;

/// The complete model: two embedding subnetworks and the separation
/// subnetwork.
#[derive(Debug, Clone)]
pub struct SeparationModel<T> {
    config: ModelConfig,
    pub embed_target: EmbeddingNet<T>,
    pub embed_interference: EmbeddingNet<T>,
    pub separation: SeparationNet<T>,
}

impl<T: Scalar> SeparationModel<T> {
    /// He-initialized model (zero final layer) from a seed.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.resolve();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            embed_target: EmbeddingNet::new(&config, &mut rng),
            embed_interference: EmbeddingNet::new(&config, &mut rng),
            separation: SeparationNet::new(&config, &mut rng),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Estimated target frames `[N, n_freq]` for a batch of examples.
    pub fn forward_batch(&self, tape: &mut Tape<T>, batch: &[&TrainingExample], mode: Mode) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let (s, c, f) = (self.config.segment_frames, self.config.context_frames, self.config.n_freq);
        let seg: Vec<_> = batch.iter().map(|e| &e.mixture_segment.0).collect();
        let tctx: Vec<_> = batch.iter().map(|e| &e.target_context.0).collect();
        let ictx: Vec<_> = batch.iter().map(|e| &e.interference_context.0).collect();
        let seg = stack(tape, &seg, s, f)?;
        let tctx = stack(tape, &tctx, c, f)?;
        let ictx = stack(tape, &ictx, c, f)?;
        let te = self.embed_target.forward(tape, tctx, mode)?;
        let ie = self.embed_interference.forward(tape, ictx, mode)?;
        let o = self.separation.forward(tape, seg, te, ie, mode)?;
        let center = self.config.center_frame();
        let centers: Vec<T> = batch
            .iter()
            .flat_map(|e| to_scalars::<T>(e.mixture_segment.row(center)).collect::<Vec<_>>())
            .collect();
        tape.add_const(o, &centers)
    }

    /// Mean squared error between estimated and label frames.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &[&TrainingExample], mode: Mode) -> Result<Var> {
        let est = self.forward_batch(tape, batch, mode)?;
        let mut labels = Vec::with_capacity(batch.len() * self.config.n_freq);
        for e in batch {
            if e.label_frame.len() != self.config.n_freq {
                return Err(Error::ShapeMismatch(format!("label frame of {} bins", e.label_frame.len())));
            }
            labels.extend(to_scalars::<T>(&e.label_frame));
        }
        tape.mse(est, &labels)
    }

    /// One SGD step in train mode. Returns the loss before the update.
    pub fn training_step(&mut self, batch: &[TrainingExample], lr: f64) -> Result<f64> {
        let refs: Vec<&TrainingExample> = batch.iter().collect();
        let mut tape = Tape::new();
        let loss = self.loss(&mut tape, &refs, Mode::Train)?;
        let value = tape.value(loss)[0].as_f64();
        tape.backward(loss)?;
        tape.collect_grads(self);
        tape.apply_running_stats(self);
        nn::sgd_step(self, lr)?;
        Ok(value)
    }

    /// Separates a full mixture with a sliding window centered on every
    /// frame. Embeddings come from the first `context_frames` frames of each
    /// context recording; edge frames are replicated to fill the windows.
    pub fn separate_utterance(
        &self,
        mixture: &Waveform,
        target_context: &Waveform,
        interference_context: &Waveform,
    ) -> Result<SeparatedUtterance> {
        for w in [mixture, target_context, interference_context] {
            w.ensure_rate(SAMPLE_RATE)?;
        }
        let cf = self.config.context_frames;
        let ctx_samples = WIN_LEN + (cf - 1) * HOP;
        let context = |w: &Waveform, what: &str| -> Result<LogMagSpectrogram> {
            if dsp::frame_count(w.len()) < cf {
                return Err(Error::TooShort {
                    what: format!("{what} recording ({cf} frames = {ctx_samples} samples)"),
                    needed: ctx_samples,
                    actual: w.len(),
                });
            }
            let (spec, _) = dsp::stft(w)?;
            Ok(dsp::log_magnitude(&spec).slice_frames(0, cf))
        };
        let tctx = context(target_context, "target context")?;
        let ictx = context(interference_context, "interference context")?;
        let te = self.embed_target.embed_speaker(&tctx)?;
        let ie = self.embed_interference.embed_speaker(&ictx)?;

        let (spec, phase) = dsp::stft(mixture).map_err(|e| match e {
            Error::TooShort { needed, actual, .. } => Error::TooShort {
                what: "mixture".into(),
                needed,
                actual,
            },
            other => other,
        })?;
        let lm = dsp::log_magnitude(&spec);
        let frames = lm.frames;
        let (s, f) = (self.config.segment_frames, self.config.n_freq);
        let before = self.config.center_frame();
        let padded_len = frames + s - 1;
        let mut padded = TfMatrix::filled(padded_len, f, 0.0);
        for p in 0..padded_len {
            let src = p.saturating_sub(before).min(frames - 1);
            padded.row_mut(p).copy_from_slice(lm.row(src));
        }

        let mut est_t = TfMatrix::filled(frames, f, 0.0);
        let mut est_i = TfMatrix::filled(frames, f, 0.0);
        let mut windows = 0;
        for start in (0..frames).step_by(INFER_BATCH) {
            let count = INFER_BATCH.min(frames - start);
            let mut tape = Tape::<T>::new();
            let mut data = Vec::with_capacity(count * s * f);
            for t in start..start + count {
                data.extend(to_scalars::<T>(&padded.data[t * f..(t + s) * f]));
            }
            let x = tape.constant(&[count, 1, s, f], data)?;
            let tv = tape.constant(&[count, te.0.len()], (0..count).flat_map(|_| to_scalars(&te.0)).collect())?;
            let iv = tape.constant(&[count, ie.0.len()], (0..count).flat_map(|_| to_scalars(&ie.0)).collect())?;
            let o = self.separation.forward(&mut tape, x, tv, iv, Mode::Infer)?;
            let ov = tape.value(o);
            for (j, t) in (start..start + count).enumerate() {
                let correction: Vec<f64> = ov[j * f..(j + 1) * f].iter().map(|v| v.as_f64()).collect();
                let pair = FramePair::from_correction(lm.row(t), &correction);
                est_t.row_mut(t).copy_from_slice(&pair.est_target);
                est_i.row_mut(t).copy_from_slice(&pair.est_interference);
            }
            windows += count;
        }
        let target = dsp::istft(&dsp::inv_log_magnitude(&est_t), &phase, mixture.len())?;
        let interference = dsp::istft(&dsp::inv_log_magnitude(&est_i), &phase, mixture.len())?;
        Ok(SeparatedUtterance {
            target,
            interference,
            est_target: LogMagSpectrogram(est_t),
            est_interference: LogMagSpectrogram(est_i),
            windows,
        })
    }

    /// Writes the checkpoint and its model config to [`config_path`].
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(self, path)?;
        let cfg_path = config_path(path);
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(crate::error::at(&cfg_path))?;
        Ok(())
    }

    /// Loads a checkpoint, building the model from the config stored beside
    /// it. If `expected` is given, the stored config must equal it.
    pub fn load(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Self> {
        let path = path.as_ref();
        let cfg_path = config_path(path);
        let text = std::fs::read_to_string(&cfg_path).map_err(crate::error::at(&cfg_path))?;
        let mut stored: ModelConfig = serde_json::from_str(&text)?;
        stored.resolve();
        if let Some(exp) = expected {
            let mut exp = exp.clone();
            exp.resolve();
            if exp != stored {
                return Err(Error::Checkpoint(format!(
                    "{} was written for a different model configuration",
                    path.display()
                )));
            }
        }
        let mut model = Self::new(&stored, 0)?;
        checkpoint::load(&mut model, path)?;
        Ok(model)
    }
}

/// `<checkpoint>.config.json`
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".config.json");
    PathBuf::from(name)
}

impl<T: Scalar> Parameterized<T> for SeparationModel<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.embed_target.visit(&join_name(prefix, "embed_target"), f);
        self.embed_interference.visit(&join_name(prefix, "embed_interference"), f);
        self.separation.visit(&join_name(prefix, "separation"), f);
    }
}
