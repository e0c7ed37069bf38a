use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kdd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("KDD_OUT_DIR")
        .output()
        .unwrap()
}

fn text(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn gradcheck_writes_report_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kdd(&["gradcheck", "--cases", "2", "--out", "gc"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = text(tmp.path().join("gc/report.csv"));
    assert!(report.starts_with("check,cases,worst,threshold,failures,passed\n"));
    assert_eq!(report.lines().count(), 14);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), report);
}

#[test]
fn gradcheck_failure_sets_exit_status() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("strict.json"), r#"{"tolerance": 1e-30}"#).unwrap();
    let out = kdd(&["gradcheck", "--config", "strict.json", "--cases", "2", "--out", "gc"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(tmp.path().join("gc/report.csv")).contains(",false"));
}

#[test]
fn gradcheck_single_case_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for dir in ["a", "b"] {
        assert!(kdd(&["gradcheck", "--seed", "9", "--cases", "1", "--out", dir], tmp.path()).status.success());
    }
    assert_eq!(text(tmp.path().join("a/report.csv")), text(tmp.path().join("b/report.csv")));
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_kdd"))
        .args(["gradcheck", "--cases", "1"])
        .current_dir(tmp.path())
        .env("KDD_OUT_DIR", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("elsewhere/gradcheck/report.csv").exists());
}

#[test]
fn appendix_a_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.json"), r#"{"n_points": 80, "steps": 10}"#).unwrap();
    let out = kdd(&["appendix-a", "--config", "small.json", "--out", "ax"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for loss in ["hinge", "kdd"] {
        for file in ["initial.csv", "final.csv", "boundary.csv", "report.csv", "plot_initial.svg", "plot_final.svg"] {
            assert!(tmp.path().join("ax").join(loss).join(file).exists(), "{loss}/{file}");
        }
    }
    let boundary = text(tmp.path().join("ax/hinge/boundary.csv"));
    assert!(boundary.starts_with("w0,w1,b\n"));
    assert_eq!(text(tmp.path().join("ax/kdd/initial.csv")).lines().count(), 161);
}

#[test]
fn appendix_a_preset_selects_one_loss() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.json"), r#"{"n_points": 40, "steps": 5}"#).unwrap();
    let out = kdd(&["appendix-a", "--config", "small.json", "--preset", "hinge", "--out", "ax"], tmp.path());
    assert!(out.status.success());
    assert!(tmp.path().join("ax/hinge").exists());
    assert!(!tmp.path().join("ax/kdd").exists());
}

#[test]
fn toy_gan_tau_sweep_summary() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("tiny.json"),
        r#"{"n_iters": 4, "batch_size": 8, "g_hidden": 8, "d_hidden": 8, "feature_dim": 4, "metrics_every": 2, "eval_samples": 40, "final_eval_samples": 40}"#,
    )
    .unwrap();
    let out = kdd(&["toy-gan", "--config", "tiny.json", "--preset", "tau-sweep", "--out", "tg"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = text(tmp.path().join("tg/summary.csv"));
    let names: Vec<_> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["kdd-tau0.05", "kdd-tau1", "kdd-tau5"]);
    for name in &names {
        assert!(tmp.path().join(format!("tg/history_{name}.csv")).exists());
        assert!(tmp.path().join(format!("tg/samples_{name}.svg")).exists());
    }
}

#[test]
fn toy_gan_rejects_unknown_preset_and_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kdd(&["toy-gan", "--preset", "nope", "--out", "tg"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    fs::write(tmp.path().join("bad.json"), r#"{"n_iter": 4}"#).unwrap();
    let out = kdd(&["toy-gan", "--config", "bad.json", "--out", "tg"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn plot_empty_series_gives_axes_only() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("empty.csv"), "series,x,y\n").unwrap();
    let out = kdd(&["plot", "empty.csv", "--out", "e.svg"], tmp.path());
    assert!(out.status.success());
    let svg = text(tmp.path().join("e.svg"));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert!(!svg.contains("<circle"));
}

#[test]
fn plot_two_clouds_with_line_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("pts.csv"), "series,x,y\nreal,0,0\nreal,1,1\nfake,3,0\nfake,2,-1\n").unwrap();
    fs::write(tmp.path().join("line.csv"), "w0,w1,b\n1,1,-2\n").unwrap();
    for name in ["a.svg", "b.svg"] {
        let out = kdd(&["plot", "pts.csv", "--lines", "line.csv", "--title", "two", "--out", name], tmp.path());
        assert!(out.status.success());
    }
    let svg = text(tmp.path().join("a.svg"));
    assert_eq!(svg, text(tmp.path().join("b.svg")));
    assert_eq!(svg.matches("<circle").count(), 4);
    assert!(svg.contains("#1f77b4") && svg.contains("#ff7f0e"));
    assert!(svg.contains("class=\"decision\""));
}

#[test]
fn plot_line_kind_and_malformed_input() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("curve.csv"), "series,x,y\nkdd,0,1\nkdd,1,0.5\nkdd,2,0.2\n").unwrap();
    let out = kdd(&["plot", "curve.csv", "--kind", "line", "--out", "c.svg"], tmp.path());
    assert!(out.status.success());
    assert!(!text(tmp.path().join("c.svg")).contains("<circle"));

    fs::write(tmp.path().join("bad.csv"), "series,x,y\nreal,zero,1\n").unwrap();
    let out = kdd(&["plot", "bad.csv", "--out", "bad.svg"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("bad.svg").exists());
}
