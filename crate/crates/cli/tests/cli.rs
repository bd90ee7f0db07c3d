use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lidog(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidog"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn err(out: &Output) -> String {
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(1));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

const TINY: &str = r#"
datasets = ["data/a"]

[[domains]]
name = "a"
n_scans = 4
sensor = { beam_count = 12, azimuth_step_deg = 4.0, max_range = 15.0 }

[[domains]]
name = "b"
n_scans = 2
sensor = { beam_count = 8, elevation_deg = [-30.0, 10.0], azimuth_step_deg = 4.0, max_range = 15.0 }

[train]
epochs = 2
batch_size = 2
voxel_size = 0.5
transform = false

[bev]
bound_x = 15.0
bound_z = 15.0
width = 42
height = 42

[experiment]
sources = ["data/a"]
targets = ["data/b"]
val_fraction = 0.5
"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(&lidog(&["--config", "tiny.toml", "--out", "data", "gen-synth"], dir.path()));
    dir
}

fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synth_writes_domains_and_is_idempotent() {
    let dir = workspace();
    let data = dir.path().join("data");
    assert!(data.join("a/manifest.json").is_file());
    assert!(data.join("b/scans/000001.ldg").is_file());
    let first = read_tree(&data);
    ok(&lidog(&["--config", "tiny.toml", "--out", "data", "gen-synth"], dir.path()));
    assert_eq!(read_tree(&data), first);
}

#[test]
fn gen_synth_into_unwritable_location_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    std::fs::write(dir.path().join("blocker"), b"a file, not a directory").unwrap();
    let e = err(&lidog(&["--config", "tiny.toml", "--out", "blocker", "gen-synth"], dir.path()));
    assert!(e.starts_with("error: "), "{e}");
    assert!(e.contains("blocker"), "{e}");
}

#[test]
fn missing_dataset_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "datasets = [\"nowhere/at/all\"]\n").unwrap();
    let e = err(&lidog(&["--config", "c.toml", "train"], dir.path()));
    assert!(e.contains("nowhere/at/all"), "{e}");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    let e = err(&lidog(&["--config", "c.toml", "train"], dir.path()));
    assert!(e.contains("learning_rat"), "{e}");
}

#[test]
fn overlapping_sources_and_targets_are_rejected() {
    let dir = workspace();
    let cfg = TINY.replace("targets = [\"data/b\"]", "targets = [\"data/a\"]");
    std::fs::write(dir.path().join("bad.toml"), cfg).unwrap();
    let e = err(&lidog(&["--config", "bad.toml", "experiment"], dir.path()));
    assert!(e.contains("data/a"), "{e}");
}

#[test]
fn help_lists_every_config_key() {
    let help = ok(&lidog(&["--help"], Path::new(".")));
    // Every leaf key of a fully populated config, found by serializing defaults.
    let keys = [
        "datasets", "checkpoint", "input_channels", "count_cap", "encoder_widths", "kernel_extent", "bev_hidden",
        "num_classes", "double_head", "bev_head", "skip", "pool.window", "pool.stride", "pool.padding", "bn_eps",
        "bn_momentum", "learning_rate", "batch_size", "epochs", "seed", "loss_weights", "beta1", "beta2", "adam_eps",
        "voxel_size", "transform", "mixing", "augment.rotation_bounds", "augment.scale_bounds",
        "augment.keep_fraction", "augment.patch_extent", "bound_x", "bound_z", "width", "height", "collision_seed",
        "sources", "targets", "variants", "bev_area", "bev_resolution", "val_fraction", "name", "n_scans",
        "scene.extent", "scene.road_half_width", "scene.sidewalk_width", "scene.buildings", "scene.vehicles",
        "scene.persons", "scene.trees", "sensor.beam_count", "sensor.elevation_deg", "sensor.azimuth_step_deg",
        "sensor.max_range", "sensor.range_noise_sigma", "sensor.mount_height", "format", "labels", "remap",
    ];
    for k in keys {
        assert!(help.contains(k), "--help does not mention `{k}`");
    }
    for flag in ["--config", "--seed", "--workers", "--no-bev", "--double-head", "--bev-area", "--bev-res", "--out"] {
        assert!(help.contains(flag), "--help does not mention {flag}");
    }
}

#[test]
fn every_documented_key_is_accepted() {
    // The keys listed in --help parse; a config naming each section is valid.
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
datasets = []
checkpoint = "x.ldgc"
[model]
encoder_widths = [4, 8]
pool = { window = 5, stride = 3, padding = 1 }
[train]
mixing = "mix3d"
augment = { rotation_bounds = [-1.0, 1.0], scale_bounds = [0.9, 1.1], keep_fraction = 0.5, patch_extent = 5.0 }
[bev]
collision_seed = 3
[experiment]
variants = ["lidog", "no_bev", "double"]
bev_area = 10.0
[[domains]]
name = "z"
n_scans = 0
scene = { extent = 30.0, road_half_width = 4.0, sidewalk_width = 2.5, buildings = [1, 2], vehicles = [0, 1], persons = [0, 1], trees = [0, 1] }
sensor = { beam_count = 4, elevation_deg = [-20.0, 0.0], azimuth_step_deg = 10.0, max_range = 20.0, range_noise_sigma = 0.0, mount_height = 1.5 }
[scan]
format = "kitti_bin"
"#;
    std::fs::write(dir.path().join("all.toml"), cfg).unwrap();
    ok(&lidog(&["--config", "all.toml", "--out", "d", "gen-synth"], dir.path()));
    assert!(dir.path().join("d/z/manifest.json").is_file());
}

#[test]
fn train_and_eval_write_outputs_and_seed_matters() {
    let dir = workspace();
    ok(&lidog(&["--config", "tiny.toml", "--out", "r0", "train"], dir.path()));
    ok(&lidog(&["--config", "tiny.toml", "--out", "r0b", "train"], dir.path()));
    ok(&lidog(&["--config", "tiny.toml", "--seed", "9", "--out", "r9", "train"], dir.path()));
    let ck = |d: &str| std::fs::read(dir.path().join(d).join("checkpoint.ldgc")).unwrap();
    assert_eq!(ck("r0"), ck("r0b"));
    assert_ne!(ck("r0"), ck("r9"));
    let loss = std::fs::read_to_string(dir.path().join("r0/loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,step,l3d,lbev,ltot\n"));

    ok(&lidog(&["--config", "tiny.toml", "--out", "r0", "eval"], dir.path()));
    let csv = std::fs::read_to_string(dir.path().join("r0/eval.csv")).unwrap();
    assert!(csv.starts_with("dataset,class,iou\na,vehicle,"));
    assert!(csv.contains("\ndataset,miou\na,"));
}

#[test]
fn experiment_report_and_no_bev_flag() {
    let dir = workspace();
    ok(&lidog(&["--config", "tiny.toml", "--out", "full", "experiment"], dir.path()));
    let full = std::fs::read_to_string(dir.path().join("full/report.csv")).unwrap();
    assert!(full.contains("\nlidog,source_val,"));
    assert!(full.contains("\nno_bev,target:b,"));
    assert!(dir.path().join("full/lidog.ldgc").is_file());
    assert!(dir.path().join("full/no_bev_loss.csv").is_file());

    ok(&lidog(&["--config", "tiny.toml", "--out", "full2", "experiment"], dir.path()));
    assert_eq!(read_tree(&dir.path().join("full")), read_tree(&dir.path().join("full2")));

    ok(&lidog(&["--config", "tiny.toml", "--no-bev", "--out", "nb", "experiment"], dir.path()));
    let nb = std::fs::read_to_string(dir.path().join("nb/report.csv")).unwrap();
    assert!(!nb.contains("lidog,"));
    assert!(nb.contains("no_bev,target:b,"));
}

#[test]
fn export_bev_has_configured_dims() {
    let dir = workspace();
    ok(&lidog(&["--config", "tiny.toml", "--out", "img.pgm", "export-bev", "data/a/scans/000000.ldg"], dir.path()));
    let pgm = std::fs::read(dir.path().join("img.pgm")).unwrap();
    let header = b"P5\n42 42\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm.len(), header.len() + 42 * 42);
    assert!(pgm[header.len()..].iter().any(|&p| p != 255));

    ok(&lidog(
        &["--config", "tiny.toml", "--bev-res", "0.5", "--out", "half.pgm", "export-bev", "data/a/scans/000000.ldg"],
        dir.path(),
    ));
    assert!(std::fs::read(dir.path().join("half.pgm")).unwrap().starts_with(b"P5\n21 21\n255\n"));
}

#[test]
fn export_bev_out_of_bounds_is_all_empty() {
    let dir = workspace();
    // A window 2 cm across holds no voxel centre of this scan.
    std::fs::write(dir.path().join("far.toml"), "[bev]\nbound_x = 0.01\nbound_z = 0.01\nwidth = 4\nheight = 4\n").unwrap();
    ok(&lidog(&["--config", "far.toml", "--out", "far.pgm", "export-bev", "data/a/scans/000000.ldg"], dir.path()));
    let pgm = std::fs::read(dir.path().join("far.pgm")).unwrap();
    let header = b"P5\n4 4\n255\n";
    assert!(pgm.starts_with(header));
    assert!(pgm[header.len()..].iter().all(|&p| p == 255));
}

#[test]
fn export_bev_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let scan = fixture("golden_scan.ldg");
    ok(&lidog(
        &["--seed", "0", "--out", "g.pgm", "export-bev", scan.to_str().unwrap()],
        dir.path(),
    ));
    let got = std::fs::read(dir.path().join("g.pgm")).unwrap();
    assert!(got == std::fs::read(fixture("golden_bev.pgm")).unwrap(), "PGM differs from the golden file");
}

#[test]
fn shipped_desk_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    // Nothing has been generated yet, so the run stops at the first source.
    let msg = err(&lidog(&["--config", cfg.to_str().unwrap(), "experiment"], dir.path()));
    assert!(msg.contains("out/a"), "{msg}");
}
