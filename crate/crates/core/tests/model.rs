use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sepkit::datagen::{sample_batch, Corpus, SamplingParams};
use sepkit::dsp::{self, WIN_LEN};
use sepkit::model::{InjectionPoint, ModelConfig, SeparationModel, SpeakerEmbedding};
use sepkit::nn::{Mode, Parameterized, Tape};
use sepkit::train::{train, TrainOptions};
use sepkit::{synth_speaker, SpeakerKind, Waveform, SAMPLE_RATE};

fn speakers() -> Vec<(String, SpeakerKind)> {
    vec![
        ("harm".into(), SpeakerKind::Harmonic { f0: 220.0 }),
        (
            "noise".into(),
            SpeakerKind::FilteredNoise {
                low: 3000.0,
                high: 5000.0,
            },
        ),
    ]
}

fn small_config(segment: usize) -> ModelConfig {
    let mut cfg = ModelConfig {
        segment_frames: segment,
        fc_input_scale: 0.0,
        ..ModelConfig::with_width(0.125)
    };
    cfg.resolve();
    cfg
}

#[test]
fn full_width_shapes() {
    let cfg = ModelConfig::with_width(1.0);
    let model = SeparationModel::<f32>::new(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let ctx = tape.constant(&[1, 1, 35, 201], vec![0.1; 35 * 201]).unwrap();
    let pre = model.embed_target.pre_pool(&mut tape, ctx, Mode::Infer).unwrap();
    assert_eq!(tape.shape(pre), &[1, 512, 4, 26]);
    let emb = model.embed_target.forward(&mut tape, ctx, Mode::Infer).unwrap();
    assert_eq!(tape.shape(emb), &[1, 512]);

    let seg = tape.constant(&[1, 1, 100, 201], vec![0.1; 100 * 201]).unwrap();
    let feats = model.separation.features(&mut tape, seg, emb, emb, Mode::Infer).unwrap();
    assert_eq!(tape.shape(feats), &[1, 512, 13, 26]);
    assert_eq!(512 * 13 * 26, 173_056);
    assert_eq!(model.separation.fc.in_dim(), 173_056);
    assert_eq!(model.separation.fc.out_dim(), 201);
    let out = model.separation.forward(&mut tape, seg, emb, emb, Mode::Infer).unwrap();
    assert_eq!(tape.shape(out), &[1, 201]);
}

#[test]
fn untrained_model_passes_the_center_frame_through() {
    let cfg = small_config(50);
    let model = SeparationModel::<f32>::new(&cfg, 3).unwrap();
    let corpus = Corpus::synthetic(&speakers(), 2, 1.0, 0);
    let params = SamplingParams {
        segment_frames: 50,
        ..SamplingParams::default()
    };
    let ex = &sample_batch(&corpus, &params, &[5]).unwrap()[0];
    let te = model.embed_target.embed_speaker(&ex.target_context).unwrap();
    let ie = model.embed_interference.embed_speaker(&ex.interference_context).unwrap();
    let pair = model.separation.separate_frame(&ex.mixture_segment, &te, &ie).unwrap();
    let center = ex.mixture_segment.row(cfg.center_frame());
    assert_eq!(pair.est_target, center.to_vec());
    assert!(pair.est_interference.iter().all(|&v| v == 0.0));
}

#[test]
fn untrained_separation_reconstructs_the_mixture() {
    let model = SeparationModel::<f32>::new(&small_config(50), 1).unwrap();
    let t = synth_speaker(SpeakerKind::Harmonic { f0: 220.0 }, 0.8, 1);
    let i = synth_speaker(
        SpeakerKind::FilteredNoise {
            low: 3000.0,
            high: 5000.0,
        },
        0.8,
        2,
    );
    let (mix, _) = dsp::mix_at_snr(&t, &i, 0.0).unwrap();
    let sep = model.separate_utterance(&mix, &t, &i).unwrap();
    assert_eq!(sep.target.len(), mix.len());
    assert_eq!(sep.windows, dsp::frame_count(mix.len()));
    let n = mix.len();
    let (num, den) = (WIN_LEN..n - WIN_LEN).fold((0.0, 0.0), |(a, b), k| {
        let d = sep.target.samples[k] - mix.samples[k];
        (a + d * d, b + mix.samples[k] * mix.samples[k])
    });
    assert!((num / den).sqrt() < 1e-5);
}

#[test]
fn short_context_is_rejected_with_the_needed_length() {
    let model = SeparationModel::<f32>::new(&small_config(50), 1).unwrap();
    let long = Waveform::new(vec![0.1; 16_000], SAMPLE_RATE);
    let short = Waveform::new(vec![0.1; 3000], SAMPLE_RATE);
    let err = model.separate_utterance(&long, &short, &long).unwrap_err().to_string();
    assert!(err.contains("target context") && err.contains("5840"), "{err}");
}

/// With a non-zero final layer the output must react to both embeddings.
#[test]
fn output_depends_on_both_embeddings() {
    for injection in [InjectionPoint::PostBn, InjectionPoint::PostConv] {
        let cfg = ModelConfig {
            injection_point: injection,
            ..small_config(20)
        };
        let mut model = SeparationModel::<f64>::new(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        model.separation.fc.weight.data.iter_mut().for_each(|w| *w = rng.random_range(-0.1..0.1));
        let seg = sepkit::LogMagSpectrogram(
            sepkit::TfMatrix::from_vec(20, 201, (0..20 * 201).map(|_| rng.random_range(-3.0..0.0)).collect()).unwrap(),
        );
        let e = |rng: &mut ChaCha8Rng| SpeakerEmbedding((0..cfg.embed_dim).map(|_| rng.random_range(0.0..1.0)).collect());
        let (a, b, c) = (e(&mut rng), e(&mut rng), e(&mut rng));
        let base = model.separation.separate_frame(&seg, &a, &b).unwrap();
        let other_target = model.separation.separate_frame(&seg, &c, &b).unwrap();
        let other_interf = model.separation.separate_frame(&seg, &a, &c).unwrap();
        let again = model.separation.separate_frame(&seg, &a, &b).unwrap();
        assert_eq!(base, again);
        let diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff(&base.est_target, &other_target.est_target) > 1e-6, "{injection:?}");
        assert!(diff(&base.est_target, &other_interf.est_target) > 1e-6, "{injection:?}");
        for (t, (i, c)) in base.est_target.iter().zip(base.est_interference.iter().zip(seg.row(10))) {
            assert!((t + i - c).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let cfg = small_config(20);
    let corpus = Arc::new(Corpus::synthetic(&speakers(), 2, 0.6, 4));
    let mut model = SeparationModel::<f32>::new(&cfg, 5).unwrap();
    let opts = TrainOptions {
        steps: 3,
        batch_size: 2,
        ..TrainOptions::default()
    };
    train(&mut model, corpus.clone(), &opts, |_, _, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let mut loaded = SeparationModel::<f32>::load(&path, Some(&cfg)).unwrap();

    let mut a = Vec::new();
    model.visit("", &mut |n, t| a.push((n.to_string(), t.data.clone())));
    let mut b = Vec::new();
    loaded.visit("", &mut |n, t| b.push((n.to_string(), t.data.clone())));
    assert_eq!(a, b);

    let other = ModelConfig {
        segment_frames: 30,
        fc_input_scale: 0.0,
        ..cfg
    };
    assert!(SeparationModel::<f32>::load(&path, Some(&other)).is_err());
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = small_config(20);
    let corpus = Arc::new(Corpus::synthetic(&speakers(), 3, 0.8, 7));
    let opts = TrainOptions {
        steps: 40,
        batch_size: 4,
        seed: 11,
        ..TrainOptions::default()
    };
    let run = || {
        let mut m = SeparationModel::<f32>::new(&cfg, 0).unwrap();
        train(&mut m, corpus.clone(), &opts, |_, _, _| Ok(())).unwrap()
    };
    let first = run();
    assert_eq!(first, run());
    let tail = first[30..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * first[0], "{} -> {tail}", first[0]);
}
