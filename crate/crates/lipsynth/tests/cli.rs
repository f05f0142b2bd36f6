//! End-to-end pipeline through the actual binary: synth -> preprocess ->
//! train-perceptual -> train -> generate -> evaluate -> analyze-delay,
//! plus the exit-code contract (2 = usage, 1 = runtime).

use std::path::Path;
use std::process::{Command, Output};

use lipsynth::data::{load_video, video_dirs};
use lipsynth::io::{write_png, write_wav};
use lipsynth::synth::SAMPLE_RATE;
use lipsynth_grad::Tensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lipsynth"));
    c.arg("--sequential");
    c
}

fn ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let clips = dir.path().join("clips");
    let ae = dir.path().join("ae.ckpt");
    let run = dir.path().join("run");

    let out = bin()
        .args(["synth", "--out", s(&corpus), "--count", "3", "--frames", "23"])
        .args(["--delay", "2", "--seed", "5"])
        .output()
        .unwrap();
    ok(&out, "synth");
    assert!(corpus.join("v00000/meta.json").exists());

    let out = bin()
        .args(["preprocess", "--corpus", s(&corpus), "--out", s(&clips), "--stride", "8"])
        .output()
        .unwrap();
    ok(&out, "preprocess");
    assert!(clips.join("v00000_s000/frames.tensor").exists());

    let out = bin()
        .args(["train-perceptual", "--clips", s(&clips), "--out", s(&ae)])
        .args(["--model", "tiny", "--steps", "2", "--batch", "2"])
        .output()
        .unwrap();
    ok(&out, "train-perceptual");
    assert!(ae.exists());

    let out = bin()
        .args(["train", "--clips", s(&clips), "--out", s(&run)])
        .args(["--model", "tiny", "--ablation", "e", "--steps", "2", "--batch", "2"])
        .args(["--perceptual", s(&ae)])
        .output()
        .unwrap();
    ok(&out, "train");
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert!(log.starts_with("step\ttotal"));
    assert!(log.lines().count() >= 3);

    // inputs for `generate`, derived from the first corpus video
    let video = load_video(&video_dirs(&corpus).unwrap()[0]).unwrap();
    let wav = dir.path().join("speech.wav");
    write_wav(&wav, &video.waveform, SAMPLE_RATE).unwrap();
    let png = dir.path().join("identity.png");
    let fsize = 3 * 64 * 64;
    let frame = Tensor::new(&[3, 64, 64], video.frames.data()[..fsize].to_vec());
    write_png(&png, &frame).unwrap();

    let gen_out = dir.path().join("generated");
    let out = bin()
        .args(["generate", "--ckpt", s(&ckpt), "--audio", s(&wav)])
        .args(["--identity", s(&png), "--out", s(&gen_out), "--gif"])
        .output()
        .unwrap();
    ok(&out, "generate");
    for k in 0..16 {
        assert!(gen_out.join(format!("frame_{k:02}.png")).exists(), "frame {k}");
    }
    assert!(gen_out.join("clip.gif").exists());
    let latency = std::fs::read_to_string(gen_out.join("latency.json")).unwrap();
    assert!(latency.contains("generate_ms"));

    let eval_out = dir.path().join("eval");
    let out = bin()
        .args(["evaluate", "--ckpt", s(&ckpt), "--clips", s(&clips)])
        .args(["--out", s(&eval_out), "--label", "e"])
        .output()
        .unwrap();
    ok(&out, "evaluate");
    assert!(eval_out.join("metrics.tsv").exists());
    assert!(eval_out.join("metrics.json").exists());
    let table = std::fs::read_to_string(eval_out.join("table_row.tsv")).unwrap();
    assert!(table.starts_with("label\tcorr_deriv"));
    assert!(table.lines().nth(1).unwrap().starts_with("e\ty\t-\ty\ty\ty\t-\ty\t-"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("disc accuracy"));

    let delay_out = dir.path().join("delay");
    let out = bin()
        .args(["analyze-delay", "--corpus", s(&corpus), "--out", s(&delay_out)])
        .args(["--max-offset", "4", "--svg"])
        .output()
        .unwrap();
    ok(&out, "analyze-delay");
    assert!(delay_out.join("curves.tsv").exists());
    assert!(delay_out.join("histogram.tsv").exists());
    let svg = std::fs::read_to_string(delay_out.join("histogram.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mode offset 2"), "stdout: {stdout}");
}

#[test]
fn exit_codes() {
    // usage errors -> 2
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().arg("synth").output().unwrap(); // missing --out
    assert_eq!(out.status.code(), Some(2));

    // runtime errors -> 1 with a diagnostic on stderr
    let out = bin()
        .args(["preprocess", "--corpus", "/nonexistent", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = bin()
        .args(["synth", "--out", "/tmp/y", "--delay", "99"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
