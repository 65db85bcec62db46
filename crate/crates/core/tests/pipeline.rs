use std::fs;
use std::path::Path;
use std::process::Command;

use twolevel_topopt::orchestrator::config::{parse_config, RunConfig};
use twolevel_topopt::orchestrator::image::read_csv;
use twolevel_topopt::orchestrator::{run_pipeline, verify};

const SMALL: &str = r#"
preset = "example1"
name = "small"

[grid]
nx = 6
ny = 3
width = 2.0
height = 1.0

[fine]
n = 8
max_iterations = 60

[output]
dir = "unused"
workers = 1
"#;

fn small(extra: &str) -> RunConfig {
    parse_config(&format!("{extra}\n{SMALL}")).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn small_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("");
    cfg.output.cell_rasters = true;
    let out = run_pipeline(&cfg, Some(dir.path())).unwrap();
    let s = &out.summary;
    assert_eq!((s.image_width, s.image_height), (48, 24));
    assert_eq!(s.solid_cells + s.void_cells + s.free_cells, 18);
    assert_eq!(s.fine_solved, s.free_cells);
    assert!(s.certificate_passes);
    assert!((s.volume_fraction - 0.5).abs() < 1e-3);
    for f in [
        "coarse_stage_01.pgm",
        "coarse_stage_01.csv",
        "coarse_final.pgm",
        "coarse_history.csv",
        "certificate.json",
        "tractions.csv",
        "cells.csv",
        "image.pgm",
        "image.csv",
        "legend.pgm",
        "continuity.csv",
        "summary.json",
        "timing.json",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let pgm = read(&dir.path().join("image.pgm"));
    assert!(pgm.starts_with(b"P5\n48 24\n255\n"));
    assert_eq!(pgm.len(), b"P5\n48 24\n255\n".len() + 48 * 24);
    let img = read_csv(&fs::read_to_string(dir.path().join("image.csv")).unwrap(), 8).unwrap();
    assert_eq!(img, out.image);
    let cells = fs::read_to_string(dir.path().join("cells.csv")).unwrap();
    assert_eq!(cells.lines().count(), 19);
    let free = out.farm.cells.keys().find(|&&e| out.coarse.field.state[e] == twolevel_topopt::coarse_opt::CellState::Free);
    if let Some(e) = free {
        assert!(dir.path().join(format!("cells/cell_{e:05}_history.csv")).is_file());
    }
}

#[test]
fn reruns_and_resume_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small("");
    run_pipeline(&cfg, Some(a.path())).unwrap();
    run_pipeline(&cfg, Some(b.path())).unwrap();
    for f in ["summary.json", "image.pgm", "image.csv", "cells.csv", "certificate.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f} differs");
    }

    // drop one cached cell and resume
    let cached: Vec<_> = fs::read_dir(a.path().join("cells")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!cached.is_empty());
    fs::remove_file(&cached[0]).unwrap();
    let mut resume = cfg.clone();
    resume.output.resume = true;
    let out = run_pipeline(&resume, Some(a.path())).unwrap();
    assert_eq!(out.summary.fine_resumed, cached.len() - 1);
    assert_eq!(out.summary.fine_solved, 1);
    for f in ["image.pgm", "image.csv", "cells.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f} differs after resume");
    }
}

#[test]
fn all_frozen_config_needs_no_fine_solve() {
    let out = run_pipeline(&small("rho0 = 1.0"), None).unwrap();
    assert_eq!(out.summary.fine_solved, 0);
    assert_eq!(out.summary.solid_cells, 18);
    assert!(out.image.data.iter().all(|&v| v == 1.0));
}

#[test]
fn raw_mode_runs_without_certificate_checks_on_cells() {
    let out = run_pipeline(&small("load_mode = \"raw\""), None).unwrap();
    assert_eq!(out.summary.fine_solved, out.summary.free_cells);
}

#[test]
fn verify_writes_certificate_only() {
    let dir = tempfile::tempdir().unwrap();
    let (coarse, eq) = verify(&small(""), Some(dir.path())).unwrap();
    assert!(coarse.stages >= 1);
    assert!(eq.certificate.passes(1e-8));
    assert!(dir.path().join("certificate.json").is_file());
    assert!(!dir.path().join("image.pgm").exists());
}

fn twolevel() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twolevel"))
}

#[test]
fn cli_preset_list() {
    let out = twolevel().arg("preset-list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("example1") && text.contains("example2"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "preset = \"example1\"\nthresholds = [0.9, 0.1]\n").unwrap();
    let st = twolevel().args(["run", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = twolevel().args(["run", "--preset", "nope"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
    let st = twolevel().args(["run", "--config"]).arg(dir.path().join("missing.toml")).status().unwrap();
    assert_eq!(st.code(), Some(4));
}

#[test]
fn cli_run_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.path().join("out");
    let st = twolevel().args(["verify", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(out.join("certificate.json").is_file());
    let st = twolevel().args(["run", "--workers", "1", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(st.code(), Some(0));
    assert!(out.join("image.pgm").is_file());
}
