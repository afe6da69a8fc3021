use std::path::Path;
use std::process::{Command, Output};

use demix::audio::Waveform;
use demix::io::{read_wav, write_wav, WavSpec};
use demix::synth::{noise, synthetic_track, write_track};

fn demix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_demix"))
        .args(args)
        .env("DEMIX_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&demix(&[])), 1);
    assert_eq!(code(&demix(&["separate", "--no-such-flag"])), 1);
    assert_eq!(code(&demix(&["frobnicate"])), 1);
    assert_eq!(code(&demix(&["inspect"])), 1);
    assert_eq!(code(&demix(&["inspect", "--arch", "unet"])), 1);
    assert_eq!(code(&demix(&["separate", "--arch", "tasnet"])), 1);
    assert_eq!(code(&demix(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.wav");
    let out = demix(&["separate", "--arch", "hs_tasnet_small", "--input", s(&missing), "--outdir", s(dir.path())]);
    assert_eq!(code(&out), 2);

    let mono = dir.path().join("mono.wav");
    write_wav(&mono, &Waveform::silence(44100, 1, 2048), WavSpec::float32(44100, 1)).unwrap();
    let out = demix(&["separate", "--arch", "hs_tasnet_small", "--input", s(&mono), "--outdir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("channel"));

    let garbage = dir.path().join("bad.wav");
    std::fs::write(&garbage, b"RIFF\x04\0\0\0WAVE").unwrap();
    let out = demix(&["separate", "--arch", "hs_tasnet_small", "--input", s(&garbage), "--outdir", s(dir.path())]);
    assert_eq!(code(&out), 2);

    let weights = dir.path().join("w.hstn");
    std::fs::write(&weights, b"NOPE").unwrap();
    std::fs::write(dir.path().join("w.hstn.toml"), "").unwrap();
    assert_eq!(code(&demix(&["inspect", "--model", s(&weights)])), 2);
}

#[test]
fn inspect_reports_published_scale() {
    let out = demix(&["inspect", "--arch", "hs_tasnet"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let total: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("total "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((total - 42e6).abs() / 42e6 <= 0.05, "{total}");
    assert!(text.contains("layer decoder"));
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let out = demix(&["gradcheck", "--seed", "5", "--seeds", "1"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn bench_exit_code_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.jsonl");
    let out = demix(&["bench", "--arch", "hs_tasnet_small", "--iters", "20", "--report", s(&report)]);
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&report).unwrap().trim()).unwrap();
    assert_eq!(line["iterations"], 20);
    assert!((line["budget_ms"].as_f64().unwrap() - 5.805).abs() < 1e-3);
    let expected = if line["pass"].as_bool().unwrap() { 0 } else { 3 };
    assert_eq!(code(&out), expected);
}

#[test]
fn separate_and_stream_agree() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.wav");
    let wave = noise(44100, 44100, 0.3, 1);
    write_wav(&input, &wave, WavSpec::float32(44100, 2)).unwrap();
    let (off, st) = (dir.path().join("off"), dir.path().join("st"));
    let report = dir.path().join("stream.jsonl");

    let out = demix(&[
        "separate", "--arch", "hs_tasnet_small", "--seed", "4", "--input", s(&input), "--outdir", s(&off),
        "--trim-latency",
    ]);
    assert_eq!(code(&out), 0);
    let out = demix(&[
        "stream", "--arch", "hs_tasnet_small", "--seed", "4", "--input", s(&input), "--chunk", "512", "--report",
        s(&report), "--outdir", s(&st), "--trim-latency",
    ]);
    assert_eq!(code(&out), 0);

    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&report).unwrap().trim()).unwrap();
    assert_eq!(line["frames_streamed"], (44100 - 1024) / 512 + 1);
    assert_eq!(line["latency_samples"], 1024);
    assert!((line["budget_ms"].as_f64().unwrap() - 5.805).abs() < 1e-3);

    for stem in ["vocals", "drums", "bass", "other"] {
        let (a, _) = read_wav(off.join(format!("{stem}.wav"))).unwrap();
        let (b, _) = read_wav(st.join(format!("{stem}.wav"))).unwrap();
        assert_eq!(a.len(), wave.len());
        assert_eq!(b.len(), wave.len());
        let diff = a.channels.iter().flatten().zip(b.channels.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-5, "{stem}: {diff}");
    }
}

#[test]
fn separate_untrimmed_prepends_latency_and_silence_stays_silent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("silence.wav");
    write_wav(&input, &Waveform::silence(44100, 2, 3000), WavSpec::float32(44100, 2)).unwrap();
    let outdir = dir.path().join("out");
    let out = demix(&["separate", "--arch", "hs_tasnet_small", "--input", s(&input), "--outdir", s(&outdir)]);
    assert_eq!(code(&out), 0);
    let (v, _) = read_wav(outdir.join("vocals.wav")).unwrap();
    assert_eq!(v.len(), 3000 + 512);
}

#[test]
fn eval_oracle_and_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    write_track(dir.path(), "test", "a", &synthetic_track(2.0, 44100, 1)).unwrap();
    let report = dir.path().join("sdr.jsonl");
    let out = demix(&["eval", "--oracle", "--data", s(dir.path()), "--report", s(&report)]);
    assert_eq!(code(&out), 0);
    let lines = std::fs::read_to_string(&report).unwrap();
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        for (k, val) in v.as_object().unwrap() {
            if let Some(x) = val.as_f64() {
                assert_eq!(x, 100.0, "{k} in {l}");
            }
        }
    }
    let missing = dir.path().join("nowhere");
    assert_eq!(code(&demix(&["eval", "--oracle", "--data", s(&missing)])), 2);
}

#[test]
fn train_writes_checkpoint_and_config_file_fills_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_track(&data, "train", "t0", &synthetic_track(1.0, 44100, 2)).unwrap();
    write_track(&data, "valid", "v0", &synthetic_track(1.0, 44100, 3)).unwrap();
    let ckpt = dir.path().join("ckpt");
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[train]\narch = \"hs_tasnet\"\nbranch_hidden = 8\ncombined_hidden = 16\nconv_basis = 16\n\
         epochs = 50\nsteps_per_epoch = 1\nbatch_size = 2\nexcerpt_seconds = 0.1\nvalid_seconds = 0.5\n",
    )
    .unwrap();
    let out = demix(&[
        "--config", s(&config), "train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "2", "--loss",
        "multi_domain",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(ckpt.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2, "flag overrides the config's 50 epochs");
    assert!(ckpt.join("model.hstn.toml").exists());
    let out = demix(&["inspect", "--model", s(&ckpt.join("model.hstn"))]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("architecture hs_tasnet"));

    std::fs::write(&config, "[train]\nepochz = 3\n").unwrap();
    let out = demix(&["--config", s(&config), "train", "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 1);
}
