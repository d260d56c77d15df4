use std::path::Path;
use std::process::{Command, Output};

use evlign::events::{save_events, Event, EventFormat, EventStream, Polarity, SensorGeometry};
use evlign::tensor::Tensor;

fn evlign(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evlign"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn evlign")
}

fn write_stream(dir: &Path) {
    let g = SensorGeometry::new(12, 9).unwrap();
    let events = (0..400u64)
        .map(|i| {
            let p = if i % 3 == 0 {
                Polarity::Negative
            } else {
                Polarity::Positive
            };
            Event::new(i * 250, (i % 12) as u16, (i % 9) as u16, p)
        })
        .collect();
    save_events(
        dir.join("ev.bin"),
        EventFormat::Bin,
        &EventStream::new(g, events).unwrap(),
    )
    .unwrap();
}

#[test]
fn represent_writes_voxel_tensor() {
    let dir = tempfile::tempdir().unwrap();
    write_stream(dir.path());
    let out = evlign(
        dir.path(),
        &[
            "represent",
            "--events",
            "ev.bin",
            "--kind",
            "voxel",
            "--bins",
            "5",
            "--t0",
            "0",
            "--dt",
            "100000",
            "--out",
            "v.tns",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let t = Tensor::load(dir.path().join("v.tns")).unwrap();
    assert_eq!(t.shape(), &[5, 9, 12]);
}

#[test]
fn frame_tensor_counts_every_event() {
    let dir = tempfile::tempdir().unwrap();
    write_stream(dir.path());
    let out = evlign(
        dir.path(),
        &[
            "represent",
            "--events",
            "ev.bin",
            "--kind",
            "frame",
            "--t0",
            "0",
            "--dt",
            "100000",
            "--out",
            "f.tns",
        ],
    );
    assert!(out.status.success());
    let t = Tensor::load(dir.path().join("f.tns")).unwrap();
    assert_eq!(t.shape(), &[2, 9, 12]);
    assert_eq!(t.data().iter().sum::<f32>(), 400.0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(evlign(dir.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(
        evlign(dir.path(), &["represent", "--kind", "voxel"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = evlign(
        dir.path(),
        &[
            "represent",
            "--events",
            "missing.bin",
            "--kind",
            "frame",
            "--out",
            "x.tns",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = evlign(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("simulate"));
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = evlign(dir.path(), &["selfcheck", "--seed", "11"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}
