use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sepkit::datagen::{sample_batch, Corpus, SamplingParams};
use sepkit::dsp;
use sepkit::metrics::bss_eval;
use sepkit::nn::{Conv2d, Tape, Tensor};
use sepkit::{ModelConfig, SeparationModel, SpeakerKind, Waveform, SAMPLE_RATE};

fn noise(len: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), SAMPLE_RATE)
}

fn stft(c: &mut Criterion) {
    let x = noise(2 * SAMPLE_RATE as usize, 1);
    c.bench_function("stft 2 s", |b| b.iter(|| dsp::stft(black_box(&x)).unwrap()));
    let (spec, phase) = dsp::stft(&x).unwrap();
    let mag = spec.map(|c| c.norm());
    c.bench_function("istft 2 s", |b| b.iter(|| dsp::istft(black_box(&mag), &phase, x.len()).unwrap()));
}

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d forward+backward");
    group.sample_size(20);
    // (in, out, kernel, stride) at the 0.125-width separation resolution
    for (cin, cout, k, s) in [(8, 8, 4, 1), (8, 16, 4, 2), (32, 64, 3, 1)] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f32>::new(cin, cout, (k, k), (s, s), &mut rng);
        let (h, w) = (50, 201);
        let x = Tensor::from_vec(&[8, cin, h, w], (0..8 * cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
            .trainable();
        let id = BenchmarkId::from_parameter(format!("{cin}->{cout} k{k} s{s}"));
        group.bench_with_input(id, &(), |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(&x);
                let y = conv.forward(&mut tape, xv).unwrap();
                let n = tape.value(y).len();
                let flat = tape.reshape(y, &[n]).unwrap();
                let l = tape.weighted_sum(flat, &vec![1.0; n]).unwrap();
                tape.backward(l).unwrap();
                black_box(tape.grad_of(&conv.weight).map(|g| g[0]))
            })
        });
    }
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("training step");
    group.sample_size(10);
    let mut cfg = ModelConfig {
        segment_frames: 50,
        fc_input_scale: 0.0,
        ..ModelConfig::with_width(0.125)
    };
    cfg.resolve();
    let corpus = Arc::new(Corpus::synthetic(
        &[
            ("a".into(), SpeakerKind::Harmonic { f0: 220.0 }),
            (
                "b".into(),
                SpeakerKind::FilteredNoise {
                    low: 3000.0,
                    high: 5000.0,
                },
            ),
        ],
        4,
        2.0,
        0,
    ));
    let params = SamplingParams {
        segment_frames: 50,
        ..SamplingParams::default()
    };
    let seeds: Vec<u64> = (0..8).collect();
    group.bench_function("sample batch of 8", |b| b.iter(|| sample_batch(&corpus, &params, black_box(&seeds)).unwrap()));
    let batch = sample_batch(&corpus, &params, &seeds).unwrap();
    let mut model = SeparationModel::<f32>::new(&cfg, 0).unwrap();
    group.bench_function("batch 8, width 0.125, 50 frames", |b| {
        b.iter(|| model.training_step(black_box(&batch), 1e-4).unwrap())
    });
    group.finish();
}

fn bss(c: &mut Criterion) {
    let mut group = c.benchmark_group("bss_eval 1 s");
    group.sample_size(10);
    let (r1, r2) = (noise(16_000, 3), noise(16_000, 4));
    let est = Waveform::new(r1.samples.iter().zip(&r2.samples).map(|(a, b)| a + 0.3 * b).collect(), SAMPLE_RATE);
    let refs = [r1, r2];
    for l in [1, 64, 512] {
        group.bench_with_input(BenchmarkId::from_parameter(l), &l, |b, &l| {
            b.iter(|| bss_eval(black_box(&est), &refs, l).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, stft, conv2d, training_step, bss);
criterion_main!(benches);
