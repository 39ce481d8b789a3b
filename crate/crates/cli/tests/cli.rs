use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gabornet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gabornet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for class in std::fs::read_dir(root).unwrap() {
        let class = class.unwrap().path();
        for f in std::fs::read_dir(&class).unwrap() {
            out.push(f.unwrap().path());
        }
    }
    out.sort();
    out
}

fn small_dataset(dir: &Path) {
    let out = gabornet(
        &[
            "gen-data",
            "--out",
            "data",
            "--per-class",
            "12",
            "--seed",
            "3",
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let text = format!("data_dir = \"data\"\nbatch_size = 16\noutput_dir = \"runs\"\n{extra}");
    std::fs::write(dir.join(name), text).unwrap();
    name.to_string()
}

#[test]
fn help_documents_flags_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, flags) in [
        (
            "gen-data",
            &[
                "--out",
                "--classes",
                "--per-class",
                "--size",
                "--noise",
                "--seed",
                "--force",
            ][..],
        ),
        ("train", &["--config", "--paired", "--resume"][..]),
        (
            "eval",
            &["--checkpoint", "--data", "--subset", "--batch-size"][..],
        ),
        (
            "export-filters",
            &["--checkpoint", "--config", "--out", "--scale"][..],
        ),
        ("gradcheck", &["--seed", "--layer"][..]),
    ] {
        let out = gabornet(&[sub, "--help"], dir.path());
        assert_eq!(code(&out), 0);
        let text = stdout(&out);
        assert!(text.contains("Exit codes"), "{sub}");
        for flag in flags {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
    }
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = gabornet(&["gradcheck", "--bogus"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_layout_determinism_and_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let out = gabornet(
        &[
            "gen-data",
            "--out",
            "a",
            "--classes",
            "4",
            "--per-class",
            "600",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("per_class = 600"));
    let a = files_under(&dir.path().join("a"));
    assert_eq!(a.len(), 2400);
    assert_eq!(std::fs::read_dir(dir.path().join("a")).unwrap().count(), 4);

    let out = gabornet(
        &["gen-data", "--out", "b", "--per-class", "600"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let b = files_under(&dir.path().join("b"));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }

    let out = gabornet(&["gen-data", "--out", "a", "--per-class", "2"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--force"));
    let out = gabornet(
        &["gen-data", "--out", "a", "--per-class", "2", "--force"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(files_under(&dir.path().join("a")).len(), 8);

    let out = gabornet(&["gen-data", "--out", "c", "--classes", "9"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let cfg = write_config(d, "run.toml", "epochs = 3\n");
    let out = gabornet(&["train", "--config", &cfg], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("record_wall_time = false"),
        "resolved config is printed"
    );
    let csv = std::fs::read_to_string(d.join("runs/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    let last: Vec<&str> = lines[3].split(',').collect();

    let out = gabornet(
        &["eval", "--checkpoint", "runs/model.ckpt", "--data", "data"],
        d,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains(&format!("loss = {}\n", last[3])),
        "{text}\nvs {}",
        lines[3]
    );
    assert!(
        text.contains(&format!("accuracy = {}\n", last[4])),
        "{text}"
    );

    // Two epochs, then one more from the checkpoint, must match the straight run.
    std::fs::write(
        d.join("two.toml"),
        "data_dir = \"data\"\nbatch_size = 16\noutput_dir = \"split\"\nepochs = 2\n",
    )
    .unwrap();
    assert_eq!(code(&gabornet(&["train", "--config", "two.toml"], d)), 0);
    std::fs::write(
        d.join("three.toml"),
        "data_dir = \"data\"\nbatch_size = 16\noutput_dir = \"split\"\nepochs = 3\n",
    )
    .unwrap();
    let out = gabornet(
        &[
            "train",
            "--config",
            "three.toml",
            "--resume",
            "split/model.ckpt",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(!stdout(&out).contains("epoch 1/3"));
    assert_eq!(
        std::fs::read_to_string(d.join("split/metrics.csv")).unwrap(),
        csv
    );
    assert_eq!(
        std::fs::read(d.join("split/model.ckpt")).unwrap(),
        std::fs::read(d.join("runs/model.ckpt")).unwrap()
    );
}

#[test]
fn identical_configs_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    for name in ["x", "y"] {
        std::fs::write(
            d.join(format!("{name}.toml")),
            format!("data_dir = \"data\"\nbatch_size = 16\nepochs = 2\nflip_prob = 0.5\ncrop_padding = 2\nseed = 9\noutput_dir = \"{name}\"\n"),
        )
        .unwrap();
        assert_eq!(
            code(&gabornet(
                &["train", "--config", &format!("{name}.toml")],
                d
            )),
            0
        );
    }
    assert_eq!(
        std::fs::read(d.join("x/metrics.csv")).unwrap(),
        std::fs::read(d.join("y/metrics.csv")).unwrap()
    );
}

#[test]
fn paired_run_writes_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let cfg = write_config(d, "p.toml", "epochs = 1\n");
    let out = gabornet(&["train", "--config", &cfg, "--paired"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "gcnn_metrics.csv",
        "cnn_metrics.csv",
        "gcnn.ckpt",
        "cnn.ckpt",
    ] {
        assert!(d.join("runs").join(f).is_file(), "{f}");
    }
    let summary = std::fs::read_to_string(d.join("runs/summary.txt")).unwrap();
    assert!(summary.contains("gcnn_first_layer_params = 200\n"));
    assert!(summary.contains("cnn_first_layer_params = 4880\n"));
    assert!(summary.contains("first_layer_weight_reduction = 30.25\n"));
    assert!(summary.contains("first_layer_reduction_with_bias = 24.4\n"));
}

#[test]
fn error_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let cfg = write_config(d, "bad.toml", "epochz = 3\n");
    let out = gabornet(&["train", "--config", &cfg], d);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochz"));

    std::fs::write(d.join("nodata.toml"), "data_dir = \"missing\"\n").unwrap();
    assert_eq!(code(&gabornet(&["train", "--config", "nodata.toml"], d)), 3);

    let cfg = write_config(
        d,
        "boom.toml",
        "epochs = 2\nlr = 1e300\nnormalize = false\n",
    );
    let out = gabornet(&["train", "--config", &cfg], d);
    assert_eq!(code(&out), 4, "{}{}", stdout(&out), stderr(&out));

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        code(&gabornet(
            &["eval", "--checkpoint", "junk.ckpt", "--data", "data"],
            d
        )),
        3
    );
}

#[test]
fn export_filters_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let cfg = write_config(d, "e.toml", "");
    let out = gabornet(
        &[
            "export-filters",
            "--config",
            &cfg,
            "--out",
            "f.png",
            "--scale",
            "4",
        ],
        d,
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let img = image_dims(&d.join("f.png"));
    assert_eq!(img, (8 * 45 + 1, 5 * 45 + 1));
    assert_eq!(code(&gabornet(&["export-filters", "--out", "g.png"], d)), 2);
}

fn image_dims(path: &Path) -> (u32, u32) {
    // PNG IHDR: width and height are big-endian u32 at bytes 16..24.
    let bytes = std::fs::read(path).unwrap();
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    (be(16), be(20))
}

#[test]
fn gradcheck_filter_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let out = gabornet(&["gradcheck", "--seed", "1"], dir.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert_eq!(stdout(&out).matches("PASS ").count(), 11);

    let out = gabornet(&["gradcheck", "--layer", "gabor"], dir.path());
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("gabor.kernel") && text.contains("layers.gabor_conv"));
    assert_eq!(text.matches("PASS ").count(), 2);

    let out = gabornet(&["gradcheck", "--layer", "dense", "--corrupt"], dir.path());
    assert_eq!(code(&out), 1);
}
