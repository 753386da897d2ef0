use std::fs;
use std::path::Path;
use std::process::Command as Proc;

use mseg_cli::*;
use mseg_core::phantom::{read_manifest, PhantomSpec};
use mseg_core::projection::Span;
use mseg_core::train::NetKind;
use mseg_core::volume::{write_mask, write_volume};
use mseg_core::{Error, Volume};

fn small_spec(dir: &Path) -> std::path::PathBuf {
    let spec = PhantomSpec { extents: [16, 32, 32], field_radius: 7.0, wander: [1.0, 3.0], ..PhantomSpec::default() };
    let p = dir.join("spec.json");
    fs::write(&p, serde_json::to_string(&spec).unwrap()).unwrap();
    p
}

/// Small networks and two epochs so every workflow runs in seconds.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let cfg = serde_json::json!({
        "mip_p": 2,
        "unet2d": { "base_filters": 2, "depth": 1 },
        "unet3d": { "dims": 3, "base_filters": 2, "depth": 1 },
        "net25d": { "p": 2, "unet": { "base_filters": 2, "depth": 1 } },
        "train2d": { "max_epochs": 2, "minibatch": 2 },
        "train3d": { "max_epochs": 2 },
        "train25d": { "max_epochs": 2 }
    });
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn argument_parsers() {
    assert_eq!(parse_angles("10,full").unwrap(), (10, Span::Full));
    assert_eq!(parse_angles("12, 180").unwrap(), (12, Span::Half));
    assert!(parse_angles("12").is_err());
    assert!(parse_angles("x,full").is_err());
    assert!(parse_angles("4,quarter").is_err());
    assert_eq!(parse_p_list("2,4, 8").unwrap(), vec![2, 4, 8]);
    assert!(parse_p_list("2,0").is_err());
}

#[test]
fn error_kinds_map_to_exit_codes() {
    assert_eq!(exit_code(&Error::Config("x".into())), 2);
    assert_eq!(exit_code(&Error::Data("x".into())), 3);
    assert_eq!(exit_code(&Error::Format { format: "MVOL", reason: "x".into() }), 3);
    assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
}

#[test]
fn synth_is_reproducible_and_handles_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let (a, b, z) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("z"));
    cmd_synth(Some(&spec), 2, &a).unwrap();
    cmd_synth(Some(&spec), 2, &b).unwrap();
    let files = dir_bytes(&a);
    assert_eq!(files.len(), 2 * 2 + 2);
    assert_eq!(files, dir_bytes(&b));
    cmd_synth(None, 0, &z).unwrap();
    let m = read_manifest(&z).unwrap();
    assert!(m.samples.is_empty());
    let run: RunManifest = serde_json::from_str(&fs::read_to_string(z.join(RUN_MANIFEST)).unwrap()).unwrap();
    assert_eq!(run.command, "synth");
    assert_eq!(run.seed, Some(PhantomSpec::default().seed));
}

#[test]
fn project_writes_one_image_per_direction() {
    let tmp = tempfile::tempdir().unwrap();
    let vol = tmp.path().join("v.mvol");
    let mask = tmp.path().join("m.mvol");
    let mut v = Volume::filled([6, 4, 6], 0.3f32);
    v.set(2, 1, 3, 1.0);
    write_volume(&vol, &v).unwrap();
    write_mask(&mask, &v.map(|x| u8::from(*x > 0.5))).unwrap();

    let out = tmp.path().join("ten");
    cmd_project(&vol, "10,full", &out, Some(&mask)).unwrap();
    let names: Vec<String> = dir_bytes(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.iter().filter(|n| n.starts_with("mip_")).count(), 10);
    assert_eq!(names.iter().filter(|n| n.starts_with("mask_")).count(), 10);

    let one = tmp.path().join("one");
    cmd_project(&vol, "1,half", &one, None).unwrap();
    assert_eq!(dir_bytes(&one).len(), 2);

    // a constant volume seen head-on gives a constant (all-zero scaled) image
    write_volume(&vol, &Volume::filled([5, 3, 4], 0.7f32)).unwrap();
    let flat = tmp.path().join("flat");
    cmd_project(&vol, "3,full", &flat, None).unwrap();
    let pgm = fs::read(flat.join("mip_00.pgm")).unwrap();
    let head = b"P5\n4 3\n65535\n".len();
    assert_eq!(pgm.len(), head + 24);
    assert!(pgm[head..].iter().all(|b| *b == 0));

    write_mask(&mask, &Volume::zeros([2, 2, 2])).unwrap();
    assert!(matches!(cmd_project(&vol, "2,full", &flat, Some(&mask)), Err(Error::Data(_))));
}

#[test]
fn train_writes_its_artifacts_for_every_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(Some(&small_spec(tmp.path())), 7, &data).unwrap();
    let cfg = small_config(tmp.path());
    for kind in [NetKind::Unet2dMip, NetKind::Unet2dSlice, NetKind::Unet3d, NetKind::Net25d] {
        let out = tmp.path().join(kind.as_str());
        let row = cmd_train(kind, &data, Some(&cfg), &out, &Overrides::default()).unwrap();
        for f in TRAIN_OUTPUTS.iter().chain(&[RUN_MANIFEST]) {
            assert!(out.join(f).exists(), "{kind}: missing {f}");
        }
        let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
        assert_eq!(log.lines().count(), 1 + 2);
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        let eval_rows = read_manifest(&data).unwrap().split.eval.len();
        let per = if kind == NetKind::Unet2dMip { 2 } else { 1 };
        assert_eq!(metrics.lines().count(), 1 + per * eval_rows + 1, "{kind}");
        assert!((0.0..=1.0).contains(&row.dc));
    }
    let net: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("net25d/network.json")).unwrap()).unwrap();
    assert_eq!(net["angles"], serde_json::json!([0.0, 90.0]));
}

#[test]
fn compare_table_has_one_row_per_approach() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(Some(&small_spec(tmp.path())), 7, &data).unwrap();
    let out = tmp.path().join("cmp");
    let rows = cmd_compare(&data, Some(&small_config(tmp.path())), &out, &Overrides::default()).unwrap();
    let text = fs::read_to_string(out.join(COMPARE_CSV)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 3);
    for (line, row) in lines[1..].iter().zip(&rows) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 1 + 8);
        assert_eq!(cells[0], row.model.as_str());
        assert_eq!(cells[5], row.params.to_string());
    }
    let models: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, vec!["unet2d-slice", "unet3d", "net25d"]);
}

#[test]
fn sweep_writes_one_row_per_direction_count() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_synth(Some(&small_spec(tmp.path())), 7, &data).unwrap();
    let out = tmp.path().join("sweep");
    let o = Overrides { epochs: Some(1), seed: Some(3) };
    cmd_sweep(&data, Some(&small_config(tmp.path())), &out, "1,3", &o).unwrap();
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(2).unwrap().starts_with("3,"));
}

#[test]
fn overrides_win_over_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = load_config(Some(&small_config(tmp.path())), &Overrides { seed: Some(9), epochs: Some(5) }).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!((cfg.train2d.max_epochs, cfg.train3d.max_epochs, cfg.train25d.max_epochs), (5, 5, 5));
    assert_eq!(cfg.train2d.minibatch, 2);
    assert!(matches!(load_config(None, &Overrides { seed: None, epochs: Some(0) }), Err(Error::Config(_))));
}

fn mseg(args: &[&str], env: Option<(&str, &str)>) -> i32 {
    let mut c = Proc::new(env!("CARGO_BIN_EXE_mseg"));
    c.args(args);
    if let Some((k, v)) = env {
        c.env(k, v);
    }
    c.output().unwrap().status.code().unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let out = t.join("o");
    let out = out.to_str().unwrap();
    assert_eq!(mseg(&["synth", "--count", "1", "--out", out, "--spec", small_spec(t).to_str().unwrap()], None), 0);
    assert_eq!(mseg(&["synth", "--count", "1", "--out", out], Some((THREADS_ENV, "1"))), 0);

    fs::write(t.join("bad.json"), "{ not json").unwrap();
    let bad = t.join("bad.json");
    assert_eq!(mseg(&["synth", "--count", "1", "--out", out, "--spec", bad.to_str().unwrap()], None), 2);
    assert_eq!(mseg(&["synth", "--count", "1", "--out", out], Some((THREADS_ENV, "many"))), 2);
    assert_eq!(mseg(&["train", "--model", "unet9d", "--data", out, "--out", out], None), 2);
    let missing = t.join("nowhere");
    assert_eq!(mseg(&["train", "--model", "net25d", "--data", missing.to_str().unwrap(), "--out", out], None), 3);
    assert_eq!(mseg(&["project", "--in", missing.to_str().unwrap(), "--out", out], None), 3);
}
