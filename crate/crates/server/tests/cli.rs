mod common;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use albf_core::rfbin::{self, RfbinFile};
use albf_core::session::{FrameSource, SessionConfig, SimulatedSource, SimulatedSourceConfig};

const FIXTURE_SEED: u64 = 11;
const DYNAMIC_RANGE: f64 = 60.0;

fn albf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_albf")).args(args).output().expect("albf runs")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Naive reference pipeline: per-pixel delay with linear interpolation, channel sum,
/// direct-DFT analytic signal, log compression, 8-bit quantization and PNG encoding.
fn oracle_das_png(config: &SessionConfig, frame_path: &Path) -> Vec<u8> {
    let frame = rfbin::read_frame(frame_path).unwrap();
    let grid = config.grid.build(&config.probe).unwrap();
    let p = &config.probe;
    let n = p.num_channels;
    let (rows, cols) = (config.grid.depth_px, config.grid.lateral_px);
    let len = frame.samples.nrows();

    let mut rf = vec![vec![0.0f64; rows]; cols];
    for (col, line) in rf.iter_mut().enumerate() {
        for (row, out) in line.iter_mut().enumerate() {
            let (x, z) = (grid.x(col), grid.z(row));
            for ch in 0..n {
                let e = (ch as f64 - (n as f64 - 1.0) / 2.0) * p.pitch;
                let t = (z + ((x - e).powi(2) + z * z).sqrt()) / p.speed_of_sound;
                let s = (t - frame.t0) * p.sampling_frequency;
                if s < 0.0 || s > (len - 1) as f64 {
                    continue;
                }
                let i0 = s.floor() as usize;
                let v = if i0 + 1 >= len {
                    frame.samples[[len - 1, ch]]
                } else {
                    let f = s - i0 as f64;
                    (1.0 - f) * frame.samples[[i0, ch]] + f * frame.samples[[i0 + 1, ch]]
                };
                *out += v;
            }
        }
    }

    let env: Vec<Vec<f64>> = rf.iter().map(|line| dft_envelope(line)).collect();
    let max = env.iter().flatten().cloned().fold(0.0, f64::max);
    let mut pixels = vec![0u8; rows * cols];
    for row in 0..rows {
        for col in 0..cols {
            let db = (20.0 * (env[col][row] / max).log10()).clamp(-DYNAMIC_RANGE, 0.0);
            let level = ((db + DYNAMIC_RANGE) / DYNAMIC_RANGE * 255.0).clamp(0.0, 255.0);
            pixels[row * cols + col] = (level + 0.5).floor() as u8;
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, cols as u32, rows as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.write_header().unwrap().write_image_data(&pixels).unwrap();
    }
    out
}

/// |analytic signal| with the spectrum doubled on positive and zeroed on negative bins.
fn dft_envelope(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let spectrum: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                let a = -2.0 * PI * (k * t % n) as f64 / n as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect();
    let gain = |k: usize| {
        if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        }
    };
    (0..n)
        .map(|t| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, &(sr, si)) in spectrum.iter().enumerate() {
                let a = 2.0 * PI * (k * t % n) as f64 / n as f64;
                let g = gain(k);
                re += g * (sr * a.cos() - si * a.sin());
                im += g * (sr * a.sin() + si * a.cos());
            }
            (re * re + im * im).sqrt() / n as f64
        })
        .collect()
}

fn fixture_config() -> SessionConfig {
    common::small_config(0, 8, 48, 16)
}

/// Regenerates the committed fixtures when `ALBF_WRITE_GOLDEN=1`.
fn write_fixtures_if_requested() {
    if std::env::var("ALBF_WRITE_GOLDEN").as_deref() != Ok("1") {
        return;
    }
    let dir = fixtures();
    std::fs::create_dir_all(&dir).unwrap();
    let config = fixture_config();
    std::fs::write(dir.join("session.toml"), config.to_toml_string()).unwrap();
    let grid = config.grid.build(&config.probe).unwrap();
    let mut source = SimulatedSource::new(SimulatedSourceConfig { seed: FIXTURE_SEED, ..Default::default() });
    let (frame, _) = source.next_frame(&grid).unwrap().unwrap();
    rfbin::write(dir.join("frame.rfbin"), &RfbinFile::Frame(frame)).unwrap();
    std::fs::write(dir.join("das_golden.png"), oracle_das_png(&config, &dir.join("frame.rfbin"))).unwrap();
}

#[test]
fn beamform_das_matches_golden_png() {
    write_fixtures_if_requested();
    let dir = fixtures();
    let config = SessionConfig::load(&dir.join("session.toml")).unwrap();
    assert_eq!(config, fixture_config());
    let golden = std::fs::read(dir.join("das_golden.png")).unwrap();
    assert_eq!(oracle_das_png(&config, &dir.join("frame.rfbin")), golden, "reference pipeline drifted from the fixture");

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("das.png");
    let o = albf(&[
        "beamform",
        "--method",
        "das",
        "--input",
        s(&dir.join("frame.rfbin")),
        "--config",
        s(&dir.join("session.toml")),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(&out).unwrap() == golden, "CLI PNG differs from the golden image");
}

#[test]
fn unknown_method_is_a_usage_error() {
    let o = albf(&["beamform", "--method", "capon", "--input", "x.rfbin", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("capon"));
}

#[test]
fn model_without_checkpoint_fails_cleanly() {
    let dir = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let o = albf(&[
        "beamform",
        "--method",
        "model",
        "--input",
        s(&dir.join("frame.rfbin")),
        "--config",
        s(&dir.join("session.toml")),
        "--out",
        s(&tmp.path().join("m.png")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--checkpoint"));
}

#[test]
fn simulate_then_metrics_reports_point_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let phantom = tmp.path().join("point.toml");
    std::fs::write(&phantom, "[[point_targets]]\nx = 0.0\nz = 0.0187\namplitude = 1.0\n").unwrap();
    let config = fixtures().join("session.toml");
    let frame = tmp.path().join("point.rfbin");
    let o = albf(&["simulate", "--phantom", s(&phantom), "--config", s(&config), "--out", s(&frame)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let json = tmp.path().join("m.json");
    let o = albf(&[
        "metrics",
        "--input",
        s(&frame),
        "--config",
        s(&config),
        "--method",
        "mvdr",
        "--point",
        "0,18.7",
        "--out",
        s(&json),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["method"], "MVDR");
    let axial = report["axial_fwhm_mm"].as_f64().unwrap();
    assert!(axial > 0.0 && axial < 1.0, "{report}");
}

#[test]
fn train_offline_then_replay_agrees() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, common::tiny_config(9).to_toml_string()).unwrap();
    let log = tmp.path().join("session.ndjson");
    let ckpt = tmp.path().join("model.ckpt");
    let o = albf(&[
        "train-offline",
        "--method",
        "fdmas",
        "--rounds",
        "7",
        "--config",
        s(&config),
        "--log",
        s(&log),
        "--checkpoint",
        s(&ckpt),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["rounds"], 7);
    assert_eq!(summary["model_step"], 7);

    let o = albf(&["replay", "--log", s(&log)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["final_checkpoint_id"], summary["checkpoint_id"]);

    let frame = tmp.path().join("f.rfbin");
    let o = albf(&["simulate", "--config", s(&config), "--seed", "3", "--out", s(&frame)]);
    assert!(o.status.success());
    let o = albf(&[
        "beamform",
        "--method",
        "model",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&frame),
        "--config",
        s(&config),
        "--out",
        s(&tmp.path().join("m.png")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn replay_of_tampered_log_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, common::tiny_config(10).to_toml_string()).unwrap();
    let log = tmp.path().join("session.ndjson");
    let o = albf(&["train-offline", "--method", "das", "--rounds", "3", "--config", s(&config), "--log", s(&log)]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut last: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
    last["checkpoint_id"] = serde_json::Value::String("0000000000000000".into());
    *lines.last_mut().unwrap() = last.to_string();
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let o = albf(&["replay", "--log", s(&log)]);
    assert_eq!(o.status.code(), Some(1));
}
