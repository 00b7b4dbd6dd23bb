use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use glance_cli::report::{config_from_report, parse_report_csv};
use glance_core::model::GlanceNetModel;
use glance_core::nn::checkpoint;

const SMALL: [&str; 6] =
    ["dataset=sprites-alignment", "n=240", "resolution=16", "hidden=24", "latent_dim=8", "interpretable=0,1,2,3,4,5,6"];

fn glance(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_glance"));
    cmd.args(args).env_remove("GLANCE_DATA_DIR");
    for s in sets {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails_naming(out: &Output, word: &str) {
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(word), "stderr {err:?} lacks {word:?}");
}

fn report(dir: &Path) -> Vec<(String, f64)> {
    let text = fs::read_to_string(dir.join("report.csv")).unwrap();
    parse_report_csv(&text).unwrap().into_iter().filter_map(|(k, v)| v.parse().ok().map(|v| (k, v))).collect()
}

fn value(rows: &[(String, f64)], key: &str) -> f64 {
    rows.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no {key}")).1
}

fn train_small(dir: &Path, epochs: &str) -> Output {
    let mut sets = SMALL.to_vec();
    let e = format!("epochs={epochs}");
    sets.push(&e);
    glance(&["train", "--seed", "3", "--out", dir.to_str().unwrap()], &sets)
}

#[test]
fn zero_epoch_train_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    ok(&train_small(dir.path(), "0"));
    let r = report(dir.path());
    assert_eq!(value(&r, "loss.reconstruction.initial"), value(&r, "loss.reconstruction.final"));
    let model = GlanceNetModel::from_named_tensors(&checkpoint::load(&dir.path().join("model.glnc")).unwrap()).unwrap();
    assert_eq!(model.latent_dim(), 8);
    for f in ["latents.csv", "thresholds.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let cfg = config_from_report(&text).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.hidden, vec![24]);
}

#[test]
fn train_then_traverse_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    ok(&train_small(&train_dir, "3"));
    let r = report(&train_dir);
    assert!(value(&r, "loss.reconstruction.final") < value(&r, "loss.reconstruction.initial"));
    assert!(value(&r, "osr.pass_rate.train") >= 0.9);

    let ckpt = format!("checkpoint={}", train_dir.join("model.glnc").display());
    let trav = dir.path().join("trav");
    ok(&glance(&["traverse", "--out", trav.to_str().unwrap()], &[&ckpt, "traverse_dim=2"]));
    let csv = fs::read_to_string(trav.join("traverse.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    let pgm = fs::read(trav.join("traverse.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n176 16\n255\n"));

    let cal = dir.path().join("cal");
    let mut sets = SMALL.to_vec();
    sets.push(&ckpt);
    ok(&glance(&["calibrate-osr", "--seed", "3", "--out", cal.to_str().unwrap()], &sets));
    assert!(value(&report(&cal), "osr.pass_rate.train") >= 0.9);
    assert_eq!(
        fs::read_to_string(cal.join("thresholds.csv")).unwrap(),
        fs::read_to_string(train_dir.join("thresholds.csv")).unwrap()
    );
}

#[test]
fn dci_on_csv_files() {
    let dir = tempfile::tempdir().unwrap();
    let (mut lat, mut fac) = (String::from("id,a,b\n"), String::from("g0,g1\n"));
    for i in 0..60 {
        let (g0, g1) = ((i % 7) as f64 / 6.0, (i * 13 % 11) as f64 / 10.0);
        lat.push_str(&format!("{i},{},{}\n", 5.0 * g1, 2.0 * g0 - 1.0));
        fac.push_str(&format!("{g0},{g1}\n"));
    }
    let (lp, fp) = (dir.path().join("z.csv"), dir.path().join("g.csv"));
    fs::write(&lp, &lat).unwrap();
    fs::write(&fp, &fac).unwrap();
    let out = dir.path().join("out");
    let sets = [format!("latents={}", lp.display()), format!("factors={}", fp.display())];
    let sets: Vec<&str> = sets.iter().map(String::as_str).collect();
    ok(&glance(&["dci", "--out", out.to_str().unwrap()], &sets));
    let r = report(&out);
    assert!(value(&r, "dci.alignment") >= 0.99);
    assert!(value(&r, "dci.explicitness") >= 0.99);
    let table = fs::read_to_string(out.join("dci.csv")).unwrap();
    assert!(table.contains("latent,g0,g1,rho,entropy\na,"));

    fs::write(&fp, fac.lines().take(30).collect::<Vec<_>>().join("\n")).unwrap();
    fails_naming(&glance(&["dci", "--out", out.to_str().unwrap()], &sets), "rows");
}

#[test]
fn config_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    fails_naming(&glance(&["train", "--out", out], &["gamma=-1"]), "gamma");
    fails_naming(&glance(&["train", "--out", out], &["no_such_key=1"]), "no_such_key");
    fails_naming(&glance(&["train", "--out", out], &["beta"]), "KEY=VALUE");
    fails_naming(&glance(&["dci", "--out", out], &[]), "latents");
    fails_naming(&glance(&["traverse", "--out", out], &[]), "checkpoint");
    fails_naming(&glance(&["experiment", "train", "--out", out], &[]), "not an experiment");
    fails_naming(&glance(&["experiment", "bogus", "--out", out], &[]), "experiment");
    fails_naming(&glance(&["train", "--out", out, "--repeat", "0"], &[]), "repeat");

    let file = dir.path().join("run.cfg");
    fs::write(&file, "experiment = leakage-sprites\n").unwrap();
    let cfg = file.to_str().unwrap();
    fails_naming(&glance(&["train", "--config", cfg, "--out", out], &[]), "experiment");
    fs::write(&file, "beta 3\n").unwrap();
    fails_naming(&glance(&["train", "--config", cfg, "--out", out], &[]), "line 1");
    fails_naming(&glance(&["train", "--config", "/nonexistent/run.cfg"], &[]), "/nonexistent/run.cfg");
}

#[test]
fn missing_mnist_names_the_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_glance"))
        .args(["experiment", "leakage-mnist", "--out", dir.path().join("o").to_str().unwrap()])
        .env("GLANCE_DATA_DIR", dir.path())
        .output()
        .unwrap();
    fails_naming(&out, "data_dir");
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    let mut text = String::from("# small run\nexperiment = train\nseed = 9\nepochs = 0\n");
    for s in SMALL {
        let (k, v) = s.split_once('=').unwrap();
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str("beta = 2.5   # trailing comment\n");
    fs::write(&file, text).unwrap();
    let out = dir.path().join("out");
    ok(&glance(
        &["train", "--config", file.to_str().unwrap(), "--seed", "4", "--out", out.to_str().unwrap()],
        &["beta=7"],
    ));
    let cfg = config_from_report(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!((cfg.seed, cfg.beta, cfg.epochs), (4, 7.0, 0));
    assert_eq!(cfg.out_dir, out);
}

#[test]
fn repeat_matches_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let sets = ["n=150", "resolution=16", "hidden=16", "epochs=1", "baseline_epochs=1"];
    let multi = dir.path().join("multi");
    ok(&glance(
        &["experiment", "leakage-sprites", "--seed", "5", "--repeat", "2", "--out", multi.to_str().unwrap()],
        &sets,
    ));
    let single = dir.path().join("single");
    ok(&glance(&["experiment", "leakage-sprites", "--seed", "6", "--out", single.to_str().unwrap()], &sets));
    let strip = |p: &Path| {
        fs::read_to_string(p.join("report.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("config.out_dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&multi.join("seed-6")), strip(&single));
    assert_eq!(
        fs::read(multi.join("seed-6").join("leakage.csv")).unwrap(),
        fs::read(single.join("leakage.csv")).unwrap()
    );
    let leak = fs::read_to_string(single.join("leakage.csv")).unwrap();
    assert_eq!(leak.lines().count(), 4);
    let repeat = fs::read_to_string(multi.join("repeat.csv")).unwrap();
    assert!(repeat.starts_with("seed,key,value\n5,"));
    let seeds: Vec<&str> = repeat.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert!(seeds.windows(2).all(|w| w[0] <= w[1]) && seeds.contains(&"6"));
}

/// Desk-scale MNIST check: 20 epochs on the 4/5 subset at least halve the
/// reconstruction loss.
#[test]
fn mnist_training_halves_reconstruction_loss() {
    let dir = tempfile::tempdir().unwrap();
    ok(&glance(&["train", "--out", dir.path().to_str().unwrap()], &[]));
    let r = report(dir.path());
    assert!(value(&r, "loss.reconstruction.final") <= 0.5 * value(&r, "loss.reconstruction.initial"));
    assert!(value(&r, "data.train_rows") <= 4000.0);
}
