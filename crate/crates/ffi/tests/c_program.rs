//! Builds `tests/c/roundtrip.c` against the generated header and the static
//! library, runs it, and compares its output with the Rust API.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;

use magcal::runner::{calibrate, RunConfig};
use magcal::sim::{generate, preset, Preset};

fn static_lib() -> Option<PathBuf> {
    let deps = std::env::current_exe().ok()?.parent()?.to_path_buf();
    [deps.join("libmagcal_ffi.a"), deps.parent()?.join("libmagcal_ffi.a")]
        .into_iter()
        .find(|p| p.exists())
}

#[test]
fn c_program_round_trip() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let Some(lib) = static_lib() else {
        eprintln!("static library not found next to the test binary; skipping");
        return;
    };
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("roundtrip");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/roundtrip.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());

    let ds = generate(&preset(Preset::Lam).with_seed(31)).unwrap();
    let bin = dir.path().join("samples.bin");
    let mut f = std::fs::File::create(&bin).unwrap();
    for s in &ds.samples {
        for v in [s.t, s.mag.x, s.mag.y, s.mag.z, s.gyro.x, s.gyro.y, s.gyro.z] {
            f.write_all(&v.to_ne_bytes()).unwrap();
        }
    }
    drop(f);

    let out = Command::new(&exe).arg(&bin).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let line = |tag: &str| -> Vec<f64> {
        text.lines()
            .find(|l| l.starts_with(tag))
            .unwrap()
            .split_whitespace()
            .skip(1)
            .map(|v| v.parse().unwrap())
            .collect()
    };

    let lib = calibrate(&ds.samples, &RunConfig::default()).unwrap().result;
    let bfg = line("bfg ");
    for (i, v) in bfg[..9].iter().enumerate() {
        assert_eq!(*v, lib.soft_iron.matrix()[(i / 3, i % 3)]);
    }
    for i in 0..3 {
        assert_eq!(bfg[9 + i], lib.pseudo_hard_iron[i]);
        assert_eq!(bfg[12 + i], lib.gyro_bias.unwrap()[i]);
    }
    assert_eq!(bfg[15], 1.0);
    assert_eq!(line("windows ")[0], 600.0);
    let applied = line("applied ");
    let expect = lib.inverse_soft_iron.matrix() * ds.samples[0].mag - lib.pseudo_hard_iron;
    for i in 0..3 {
        assert!((applied[i] - expect[i]).abs() < 1e-9);
    }
    assert!(text.contains(concat!("version ", env!("CARGO_PKG_VERSION"))));
}
