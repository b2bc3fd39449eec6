//! Drives the `pcdc` binary end to end on a tiny synthetic sequence.

use std::path::Path;
use std::process::{Command, Output};

use pcdc_core::ply::write_ply;
use pcdc_core::synth::SynthOptions;

fn pcdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcdc"))
        .args(args)
        .env("PCDC_THREADS", "2")
        .output()
        .expect("spawn pcdc")
}

fn ok(args: &[&str]) -> String {
    let out = pcdc(args);
    assert!(
        out.status.success(),
        "pcdc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_encode_decode_measure_report() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    let synth = SynthOptions {
        frames: 3,
        semi_axes: [6.0, 4.0, 3.0],
        ..SynthOptions::default()
    };
    for f in synth.sequence().unwrap() {
        write_ply(&src.join(format!("seq_{:04}.ply", f.frame_index)), &f.coords, false).unwrap();
    }
    let weights = dir.path().join("w.bin");
    ok(&[
        "train-overfit",
        "--frame-a",
        s(&src.join("seq_0000.ply")),
        "--frame-b",
        s(&src.join("seq_0001.ply")),
        "--steps",
        "2",
        "--lambda",
        "15",
        "--seed",
        "7",
        "--out",
        s(&weights),
    ]);

    let pattern = format!("{}/seq_%04d.ply", s(&src));
    let stream = dir.path().join("s.pcdc");
    let encode = |out: &Path| {
        ok(&[
            "encode", "--input", &pattern, "--frames", "3", "--gof", "2", "--lambda", "15", "--weights", s(&weights),
            "--out", s(out),
        ])
    };
    encode(&stream);
    let again = dir.path().join("again.pcdc");
    encode(&again);
    assert_eq!(std::fs::read(&stream).unwrap(), std::fs::read(&again).unwrap());

    let rec = dir.path().join("rec");
    ok(&["decode", "--in", s(&stream), "--weights", s(&weights), "--out-dir", s(&rec)]);
    for i in 0..3 {
        assert!(rec.join(format!("frame_{i:04}.ply")).exists());
    }

    let quality = dir.path().join("q.csv");
    ok(&["metrics", "--rec", s(&rec), "--ref", s(&src), "--peak", "1023", "--out", s(&quality)]);
    let q = std::fs::read_to_string(&quality).unwrap();
    assert!(q.starts_with("frame,points,d1_mse,d1_psnr,d2_mse,d2_psnr\n"));
    assert_eq!(q.lines().count(), 4);

    let comp = dir.path().join("c.csv");
    ok(&["report", "--stream", s(&stream), "--out", s(&comp)]);
    let c = std::fs::read_to_string(&comp).unwrap();
    assert_eq!(c.lines().count(), 4);
    assert!(c.lines().nth(1).unwrap().starts_with("0,I,"));
}

#[test]
fn decode_with_other_weights_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthOptions {
        frames: 2,
        semi_axes: [5.0, 3.0, 3.0],
        ..SynthOptions::rigid_pair()
    };
    let frames = synth.sequence().unwrap();
    let paths: Vec<_> = frames
        .iter()
        .map(|f| {
            let p = dir.path().join(format!("f{}.ply", f.frame_index));
            write_ply(&p, &f.coords, true).unwrap();
            p
        })
        .collect();
    let train = |seed: &str, out: &Path| {
        ok(&[
            "train-overfit", "--frame-a", s(&paths[0]), "--frame-b", s(&paths[1]), "--steps", "1", "--seed", seed,
            "--out", s(out),
        ])
    };
    let (w1, w2) = (dir.path().join("w1.bin"), dir.path().join("w2.bin"));
    train("7", &w1);
    train("8", &w2);
    let stream = dir.path().join("s.pcdc");
    let pattern = format!("{}/f%d.ply", s(dir.path()));
    ok(&["encode", "--input", &pattern, "--frames", "2", "--gof", "2", "--weights", s(&w1), "--out", s(&stream)]);
    let out = pcdc(&["decode", "--in", s(&stream), "--weights", s(&w2), "--out-dir", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights file"));
}

#[test]
fn bdrate_of_scaled_curve() {
    let dir = tempfile::tempdir().unwrap();
    let pts = [(0.1, 60.0), (0.2, 64.0), (0.4, 68.0), (0.8, 71.0)];
    let write = |name: &str, k: f64| {
        let p = dir.path().join(name);
        let body: String = pts.iter().map(|(r, q)| format!("{},{}\n", r * k, q)).collect();
        std::fs::write(&p, format!("bpp,psnr\n{body}")).unwrap();
        p
    };
    let (a, b) = (write("a.csv", 1.0), write("b.csv", 0.8));
    let out = ok(&["bdrate", "--curve-a", s(&a), "--curve-b", s(&b)]);
    assert_eq!(out.trim(), "BD-rate -20.000%");
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    assert!(out.lines().count() >= 8);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    assert!(!pcdc(&["encode", "--input", "x_%d.ply", "--frames", "1", "--lambda", "2", "--weights", "w", "--out", "o"])
        .status
        .success());
    let out = Command::new(env!("CARGO_BIN_EXE_pcdc"))
        .arg("selftest")
        .env("PCDC_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = pcdc(&["report", "--stream", "/nonexistent/s.pcdc"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
