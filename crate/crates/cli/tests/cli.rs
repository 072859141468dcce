use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SHORT: &str = r#"
[scenario]
kind = "emergency_brake"
duration = 10.0
cruise_speed = 15.0
brake_at = 1.0
deceleration = -5.0
low_speed = 10.0
recover_at = 4.0
recovery_rate = 1.0
"#;

const IDENTITY_MASKS: &str = r#"
[masks]
state = [{ rotation = 0.0, l = [0.0, 0.0] }, { rotation = 0.0, l = [0.0, 0.0] }]
input = [{ p = 1.0, l = 0.0 }, { p = 1.0, l = 0.0 }]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deeplcc"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn value(text: &str, key: &str) -> String {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}="))).unwrap_or_else(|| panic!("no {key} in {text}")).to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn collect_reports_benchmark_columns_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let text = ok(&run(&["collect", "--out", p(&a)]));
    assert_eq!(value(&text, "samples"), "944");
    assert_eq!(value(&text, "columns"), "900");
    assert_eq!(value(&text, "exciting"), "true");
    ok(&run(&["collect", "--out", p(&b)]));
    assert_eq!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(b.join("dataset.csv")).unwrap());
    assert_eq!(fs::read(a.join("certificate.txt")).unwrap(), fs::read(b.join("certificate.txt")).unwrap());
    let rows = fs::read_to_string(a.join("dataset.csv")).unwrap().lines().count();
    assert_eq!(rows, 945);

    let c = dir.path().join("c");
    ok(&run(&["collect", "--out", p(&c), "--seed", "99"]));
    assert_ne!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(c.join("dataset.csv")).unwrap());
}

#[test]
fn zero_excitation_fails_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[data.excitation]\ninput_half_width = 0.0\nhead_half_width = 0.0\n");
    let out = run(&["collect", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let cert = fs::read_to_string(dir.path().join("certificate.txt")).unwrap();
    assert_eq!(value(&cert, "exciting"), "false");
}

#[test]
fn invalid_configurations_fail_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[fleet]\nn = 3\ncavs = [1]\n");
    assert_eq!(run(&["run", "--mode", "hdv", "--config", p(&cfg)]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "[controller]\nmatrix_kind = \"toeplitz\"\n");
    assert_eq!(run(&["collect", "--config", p(&cfg)]).status.code(), Some(2));
    let literal = format!("{SHORT}[privacy]\nconstraints = \"endpoint_map\"\n");
    let cfg = write_config(dir.path(), &literal);
    assert_eq!(run(&["run", "--mode", "masked", "--config", p(&cfg), "--out", p(dir.path())]).status.code(), Some(2));
}

#[test]
fn run_modes_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let out = dir.path().join("out");
    let hdv = ok(&run(&["run", "--mode", "hdv", "--config", p(&cfg), "--out", p(&out)]));
    assert_eq!(value(&hdv, "label"), "all-hdv");
    let mpc = ok(&run(&["run", "--mode", "mpc", "--config", p(&cfg), "--out", p(&out)]));
    assert_eq!(value(&mpc, "decision_dim"), "60");
    let plain = ok(&run(&["run", "--mode", "deeplcc", "--config", p(&cfg), "--out", p(&out)]));
    assert_eq!(value(&plain, "decision_dim"), "1020");
    ok(&run(&["run", "--mode", "masked", "--config", p(&cfg), "--out", p(&out)]));

    let header = fs::read_to_string(out.join("run_deeplcc.csv")).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("t,p_0,p_1,p_2,p_3,p_4,p_5,p_6,v_0,"));
    assert!(header.contains(",u_1,u_2,eps,fuel_rate_total,objective,solver_status,kkt_residual"));
    assert!(fs::read_to_string(out.join("masked_exchange.csv")).unwrap().starts_with("# masked=true\n"));

    let logs = ["run_hdv.csv", "run_deeplcc.csv", "run_masked.csv"].map(|f| out.join(f));
    let text = ok(&run(&["compare", p(&logs[0]), p(&logs[1]), p(&logs[2]), "--out", p(&out)]));
    assert_eq!(text.lines().count(), 4);
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][3], "0");
    // the controlled runs improve on the all-HDV baseline
    for r in &rows[1..] {
        assert!(r[3].parse::<f64>().unwrap() < 0.0, "{r:?}");
        assert!(r[4].parse::<f64>().unwrap() < 0.0, "{r:?}");
    }
    let gap = ok(&run(&["compare", p(&logs[1]), p(&logs[2]), "--out", p(&out)]));
    assert!(gap.contains("run_masked"));
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let last: Vec<&str> = table.lines().last().unwrap().split(',').collect();
    assert!(last[5].parse::<f64>().unwrap() <= 1e-6, "{last:?}");

    ok(&run(&["compare", p(&logs[1]), p(&logs[1]), "--out", p(&out)]));
    let table = fs::read_to_string(out.join("compare.csv")).unwrap();
    let last: Vec<&str> = table.lines().last().unwrap().split(',').collect();
    assert_eq!((last[3], last[4], last[5]), ("0", "0", "0"));
}

#[test]
fn runs_are_byte_identical_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&run(&["run", "--mode", "masked", "--config", p(&cfg), "--out", p(out)]));
    }
    assert_eq!(fs::read(a.join("run_masked.csv")).unwrap(), fs::read(b.join("run_masked.csv")).unwrap());
    let strip = |path: PathBuf| -> Vec<String> {
        fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
    };
    assert_eq!(strip(a.join("metrics_masked.txt")), strip(b.join("metrics_masked.txt")));
}

#[test]
fn stored_dataset_is_used_by_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(&["collect", "--out", p(dir.path())]));
    let with_file = format!("{SHORT}[data]\ndataset = \"dataset.csv\"\n");
    let cfg = write_config(dir.path(), &with_file);
    let a = ok(&run(&["run", "--mode", "deeplcc", "--config", p(&cfg), "--out", p(&dir.path().join("a"))]));
    let cfg2 = dir.path().join("sub");
    fs::create_dir_all(&cfg2).unwrap();
    let cfg2 = write_config(&cfg2, SHORT);
    let b = ok(&run(&["run", "--mode", "deeplcc", "--config", p(&cfg2), "--out", p(&dir.path().join("b"))]));
    assert_eq!(value(&a, "total_fuel_ml"), value(&b, "total_fuel_ml"));

    let missing = write_config(&dir.path().join("sub"), &format!("{SHORT}[data]\ndataset = \"nope.csv\"\n"));
    assert_eq!(run(&["run", "--mode", "deeplcc", "--config", p(&missing)]).status.code(), Some(1));
}

#[test]
fn mask_demo_with_identity_masks_leaks_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SHORT}{IDENTITY_MASKS}[privacy]\nwitnesses = 5\n"));
    ok(&run(&["mask-demo", "--config", p(&cfg), "--out", p(dir.path())]));
    let rmse = fs::read_to_string(dir.path().join("attack_rmse.csv")).unwrap();
    for line in rmse.lines().skip(1) {
        assert_eq!(line.split(',').nth(1).unwrap(), "0", "{line}");
    }
}

#[test]
fn mask_demo_with_benchmark_masks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let text = ok(&run(&["mask-demo", "--config", p(&cfg), "--out", p(dir.path())]));
    assert!(text.contains("witnesses=100"));
    let rmse = fs::read_to_string(dir.path().join("attack_rmse.csv")).unwrap();
    let values: Vec<(String, f64)> = rmse
        .lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect();
    // CAV spacing and velocity channels, then both inputs
    for (k, v) in &values {
        let masked = matches!(k.as_str(), "y_1" | "y_2" | "y_3" | "y_4" | "u_1" | "u_2");
        if masked {
            assert!(*v > 0.0, "{k}");
        } else {
            assert_eq!(*v, 0.0, "{k}");
        }
    }
    let witnesses = fs::read_to_string(dir.path().join("witnesses.csv")).unwrap();
    let rows: Vec<&str> = witnesses.lines().skip(1).collect();
    assert_eq!(rows.len(), 100);
    for r in rows {
        let cells: Vec<f64> = r.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cells[1] <= 1e-9);
        assert!(cells[2] >= 1e-3);
    }
    let masked = fs::read_to_string(dir.path().join("masked_trajectory.csv")).unwrap();
    let truth = fs::read_to_string(dir.path().join("true_trajectory.csv")).unwrap();
    assert!(masked.starts_with("# masked=true\nt,"));
    assert_eq!(masked.lines().nth(1), truth.lines().next());
}

#[test]
fn matrix_info_reports_bounds_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    ok(&run(&["collect", "--out", p(dir.path())]));
    let cfg = write_config(dir.path(), SHORT);
    let text = ok(&run(&[
        "matrix-info",
        "--config",
        p(&cfg),
        "--dataset",
        p(&dir.path().join("dataset.csv")),
        "--kind",
        "hankel",
        "--sweep",
        "300,600",
        "--out",
        p(dir.path()),
    ]));
    assert_eq!(value(&text, "columns"), "900");
    assert_eq!(value(&text, "plain_order"), "57");
    assert_eq!(value(&text, "plain_min_samples_hankel"), "227");
    assert_eq!(value(&text, "masked_order"), "58");
    assert_eq!(value(&text, "plain_exciting"), "true");
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.lines().nth(1).unwrap().starts_with("hankel,300,1,"));
}
