//! Drives the `sepkit` binary end to end.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sepkit::dsp;
use sepkit::{read_wav, synth_speaker, write_wav, SpeakerKind, Waveform, SAMPLE_RATE};
use sepkit_cli::RunConfig;

fn sepkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepkit"))
        .args(args)
        .env("SEPKIT_THREADS", "2")
        .output()
        .expect("spawn sepkit")
}

fn ok(args: &[&str]) -> String {
    let out = sepkit(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut rc = RunConfig::default();
    rc.model = sepkit::ModelConfig {
        segment_frames: 20,
        fc_input_scale: 0.0,
        ..sepkit::ModelConfig::with_width(0.125)
    };
    rc.train.batch_size = 2;
    rc.train.steps = 3;
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string(&rc).unwrap()).unwrap();
    path
}

#[test]
fn mix_prints_unit_gain_for_equal_power_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = Waveform::new((0..800).map(|k| if k % 2 == 0 { 0.25 } else { -0.25 }).collect(), SAMPLE_RATE);
    let b = Waveform::new((0..800).map(|k| if k % 4 < 2 { 0.25 } else { -0.25 }).collect(), SAMPLE_RATE);
    write_wav(dir.path().join("a.wav"), &a).unwrap();
    write_wav(dir.path().join("b.wav"), &b).unwrap();
    let out = dir.path().join("m.wav");
    let stdout = ok(&["mix", s(&dir.path().join("a.wav")), s(&dir.path().join("b.wav")), "--snr", "0", "--out", s(&out)]);
    assert_eq!(stdout.trim(), "gain 1");
    assert_eq!(read_wav(&out).unwrap().len(), 800);
}

#[test]
fn mixed_file_has_the_requested_snr() {
    let dir = tempfile::tempdir().unwrap();
    let t = synth_speaker(SpeakerKind::Harmonic { f0: 220.0 }, 0.5, 1);
    let i = synth_speaker(
        SpeakerKind::FilteredNoise {
            low: 3000.0,
            high: 5000.0,
        },
        0.5,
        2,
    );
    write_wav(dir.path().join("t.wav"), &t).unwrap();
    write_wav(dir.path().join("i.wav"), &i).unwrap();
    let out = dir.path().join("m.wav");
    let stdout = ok(&["mix", s(&dir.path().join("t.wav")), s(&dir.path().join("i.wav")), "--snr", "-3", "--out", s(&out)]);
    let gain: f64 = stdout.trim().strip_prefix("gain ").unwrap().parse().unwrap();
    // re-measure from the quantized inputs the command actually read
    let (t, i) = (read_wav(dir.path().join("t.wav")).unwrap(), read_wav(dir.path().join("i.wav")).unwrap());
    let scaled = Waveform::new(i.samples.iter().map(|v| v * gain).collect(), SAMPLE_RATE);
    assert!((dsp::snr_db(&t, &scaled) + 3.0).abs() < 1e-9);
}

#[test]
fn missing_file_fails_with_a_message() {
    let out = sepkit(&["mix", "/nonexistent/a.wav", "/nonexistent/b.wav", "--snr", "0", "--out", "/tmp/x.wav"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/a.wav"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_sepkit"))
        .args(["eval-set", "--manifest", "x", "--out", "y"])
        .env("SEPKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SEPKIT_THREADS"));
}

#[test]
fn spectrogram_image() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("silence.wav");
    write_wav(&wav, &Waveform::new(vec![0.0; 16_000], SAMPLE_RATE)).unwrap();
    let pgm = dir.path().join("s.pgm");
    ok(&["spectrogram", "--wav", s(&wav), "--out", s(&pgm)]);
    let bytes = std::fs::read(&pgm).unwrap();
    let header = b"P5 98 201 255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len() - header.len(), 98 * 201);
    assert!(bytes[header.len()..].iter().all(|&b| b == 0));
}

#[test]
fn train_with_zero_steps_writes_an_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let manifest = ok(&["make-corpus", "--out-dir", s(&corpus), "--per-speaker", "2", "--duration", "0.6"]);
    let ckpt = dir.path().join("run/m.ckpt");
    let cfg = tiny_config(dir.path());
    ok(&["train", "--corpus", manifest.trim(), "--config", s(&cfg), "--steps", "0", "--out", s(&ckpt)]);
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(sepkit_cli::loss_log_path(&ckpt)).unwrap(), "step,loss\n");
    let resolved = RunConfig::load(&sepkit_cli::run_config_path(&ckpt)).unwrap();
    assert_eq!(resolved.train.steps, 0);
    assert!(resolved.model.fc_input_scale > 0.0);
}

#[test]
fn training_is_reproducible_and_the_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = ok(&["make-corpus", "--out-dir", s(&d.join("c")), "--per-speaker", "3", "--duration", "0.6", "--seed", "4"]);
    let cfg = tiny_config(d);
    let run = |name: &str| {
        let ckpt = d.join(name);
        ok(&["train", "--corpus", manifest.trim(), "--config", s(&cfg), "--seed", "9", "--checkpoint-every", "2", "--out", s(&ckpt)]);
        ckpt
    };
    let (a, b) = (run("a.ckpt"), run("b.ckpt"));
    let log_a = std::fs::read_to_string(sepkit_cli::loss_log_path(&a)).unwrap();
    assert_eq!(log_a, std::fs::read_to_string(sepkit_cli::loss_log_path(&b)).unwrap());
    assert_eq!(log_a.lines().count(), 4);
    assert!(sepkit_cli::periodic_checkpoint_path(&a, 2).exists());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // evaluation set, oracle modes and model scoring
    let eval = d.join("eval.json");
    ok(&["eval-set", "--manifest", manifest.trim(), "--out", s(&eval), "--snrs", "-5,0,5"]);
    let csv = d.join("scores.csv");
    ok(&["evaluate", "--manifest", s(&eval), "--oracle", "target", "--filter-len", "8", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "pair_id,snr_db,sdr,sar,sir");
    assert_eq!(rows.len(), 1 + 3 + 1);
    let mean: Vec<f64> = rows[4].split(',').skip(2).map(|v| v.parse().unwrap()).collect();
    assert!(mean.iter().all(|&v| v == sepkit::metrics::DB_CAP), "{mean:?}");

    let stdout = ok(&["evaluate", "--manifest", s(&eval), "--oracle", "mixture", "--filter-len", "1"]);
    let last: Vec<&str> = stdout.lines().last().unwrap().split(',').collect();
    let (snr, sdr): (f64, f64) = (last[1].parse().unwrap(), last[2].parse().unwrap());
    assert!((sdr - snr).abs() < 1.0, "mixture SDR {sdr} vs mean SNR {snr}");

    ok(&["evaluate", "--manifest", s(&eval), "--ckpt", s(&a), "--filter-len", "1"]);
    let out = sepkit(&["evaluate", "--manifest", s(&eval)]);
    assert!(!out.status.success());

    // separation outputs keep the mixture duration
    let pair = &sepkit::datagen::eval_set_from_json(&std::fs::read_to_string(&eval).unwrap()).unwrap()[0];
    let sep = d.join("sep");
    ok(&[
        "separate",
        "--mixture",
        s(&pair.target_path),
        "--target-context",
        s(&pair.target_path),
        "--interference-context",
        s(&pair.interference_path),
        "--ckpt",
        s(&a),
        "--out-dir",
        s(&sep),
    ]);
    let mix_len = read_wav(&pair.target_path).unwrap().len();
    assert_eq!(read_wav(sep.join("target.wav")).unwrap().len(), mix_len);
    assert_eq!(read_wav(sep.join("interference.wav")).unwrap().len(), mix_len);

    let short = d.join("short.wav");
    write_wav(&short, &Waveform::new(vec![0.1; 2000], SAMPLE_RATE)).unwrap();
    let out = sepkit(&[
        "separate",
        "--mixture",
        s(&pair.target_path),
        "--target-context",
        s(&short),
        "--interference-context",
        s(&pair.interference_path),
        "--ckpt",
        s(&a),
        "--out-dir",
        s(&sep),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("target context") && err.contains("5840"), "{err}");
}

#[test]
fn run_config_round_trips_bit_exactly() {
    let mut rc = RunConfig::default();
    rc.train.lr = 0.1 + 1e-17 * 3.0;
    rc.model.bn_momentum = 0.9000000000000001;
    rc.model.width_scale = 1.0 / 3.0;
    rc.model.resolve();
    rc.eval_snrs = vec![-1.0 / 7.0, 2.5e-300];
    let text = serde_json::to_string_pretty(&rc).unwrap();
    let back: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, rc);
    assert_eq!(back.model.fc_input_scale.to_bits(), rc.model.fc_input_scale.to_bits());
    assert!(serde_json::from_str::<RunConfig>(r#"{"lr": 0.1}"#).is_err(), "unknown top-level field");
    let partial: RunConfig = serde_json::from_str(r#"{"train": {"steps": 5}}"#).unwrap();
    assert_eq!(partial.train.steps, 5);
    assert_eq!(partial.train.lr, 0.1);

    // derived sizes follow a width given on its own
    let mut narrow: RunConfig = serde_json::from_str(r#"{"model": {"width_scale": 0.125, "segment_frames": 50}}"#).unwrap();
    narrow.resolve().unwrap();
    assert_eq!(narrow.model.embed_dim, 64);
    assert_eq!(narrow.model.fc_input_scale, 1.0 / 182f64.sqrt());
}
