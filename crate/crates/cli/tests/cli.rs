use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy")
}

fn dgdpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgdpo"))
        .args(args)
        .env_remove("DGDPO_API_KEY")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// The toy config with dataset paths made absolute and `edit` applied to the text.
fn toy_config(dir: &Path, name: &str, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(root().join("configs/toy.toml")).unwrap();
    let data = root().join("data/toy");
    let text = text.replace("../data/toy", data.to_str().unwrap());
    let path = dir.join(name);
    std::fs::write(&path, edit(text)).unwrap();
    path
}

/// Drop the FPMC recommender for tests that do not need it.
fn no_fpmc(text: String) -> String {
    let start = text.find("[[recommenders]]\nkind = \"fpmc\"").unwrap();
    let end = text[start + 1..].find("[[recommenders]]").unwrap() + start + 1;
    format!("{}{}", &text[..start], &text[end..])
}

#[test]
fn toy_run_reproduces_golden_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = toy_config(tmp.path(), "toy.toml", |t| t);
    let res = dgdpo(&["run", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "-j", "2"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let bless = std::env::var_os("DGDPO_BLESS").is_some();
    for name in [
        "metrics.csv",
        "optimize_summary.csv",
        "report/summary.txt",
        "report/metrics.csv",
        "report/precision_series.csv",
        "report/optimization.csv",
    ] {
        let got = std::fs::read(out.join(name)).unwrap();
        let golden = golden_dir().join(name);
        if bless {
            std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
            std::fs::write(&golden, &got).unwrap();
        }
        let want = std::fs::read(&golden).unwrap();
        assert!(got == want, "{name} differs from {}", golden.display());
    }
}

#[test]
fn resume_skips_completed_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = toy_config(tmp.path(), "toy.toml", no_fpmc);
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&dgdpo(&["ingest", "-c", c, "-o", o])), 0);
    let items = std::fs::metadata(out.join("items.jsonl")).unwrap().modified().unwrap();
    let res = dgdpo(&["run", "-c", c, "-o", o]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(std::fs::metadata(out.join("items.jsonl")).unwrap().modified().unwrap(), items);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"interact\""));
}

#[test]
fn invalid_config_lists_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), "bad.toml", |t| {
        t.replace("alpha = 0.6", "alpha = 0").replace("batch_size = 4", "batch_size = 0")
    });
    let res = dgdpo(&["check", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    let err = stderr(&res);
    assert!(err.contains("split.alpha") && err.contains("optimize.batch_size"), "{err}");
}

#[test]
fn output_dir_of_another_config_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let a = toy_config(tmp.path(), "a.toml", |t| t);
    let b = toy_config(tmp.path(), "b.toml", |t| t.replace("seed = 7", "seed = 8"));
    assert_eq!(code(&dgdpo(&["ingest", "-c", a.to_str().unwrap(), "-o", out.to_str().unwrap()])), 0);
    let res = dgdpo(&["ingest", "-c", b.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));
}

#[test]
fn unreachable_backend_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = toy_config(tmp.path(), "remote.toml", |t| {
        t.replace(
            "[backends.simulator]\nkind = \"mock\"",
            "[backends.simulator]\nkind = \"remote\"\nbase_url = \"http://127.0.0.1:9\"\nmodel = \"m\"\nmax_attempts = 1\nbackoff_ms = 1",
        )
    });
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert_eq!(code(&dgdpo(&["ingest", "-c", c, "-o", o])), 0);
    let res = Command::new(env!("CARGO_BIN_EXE_dgdpo"))
        .args(["init-profiles", "-c", c, "-o", o])
        .env("DGDPO_API_KEY", "test-key")
        .output()
        .unwrap();
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    // without a credential the backend cannot even be built
    assert_eq!(code(&dgdpo(&["init-profiles", "-c", c, "-o", o])), 3);
}

#[test]
fn stage_out_of_order_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), "toy.toml", |t| t);
    let res = dgdpo(&["optimize", "-c", cfg.to_str().unwrap(), "-o", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
}

#[test]
fn report_joins_runs_on_strategy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for s in ["none", "with_gt"] {
        let cfg = toy_config(tmp.path(), &format!("{s}.toml"), |t| {
            format!("{}strategies = [\"{s}\"]\n", no_fpmc(t))
        });
        let out = tmp.path().join(s);
        let res = dgdpo(&["run", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        runs.push(out);
    }
    let to = tmp.path().join("cmp");
    let res = dgdpo(&["report", runs[0].to_str().unwrap(), runs[1].to_str().unwrap(), "--to", to.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let mut r = csv::Reader::from_path(to.join("metrics.csv")).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "strategy").unwrap();
    let strategies: std::collections::BTreeSet<String> = r.records().map(|x| x.unwrap()[col].to_string()).collect();
    assert_eq!(strategies.into_iter().collect::<Vec<_>>(), ["none", "with_gt"]);

    // a run from another schema cannot join
    let manifest = runs[1].join("manifest.json");
    let text = std::fs::read_to_string(&manifest).unwrap().replacen("\"schema\": 1", "\"schema\": 2", 1);
    std::fs::write(&manifest, text).unwrap();
    let res = dgdpo(&["report", runs[0].to_str().unwrap(), runs[1].to_str().unwrap(), "--to", to.to_str().unwrap()]);
    assert_eq!(code(&res), 4);
    assert!(stderr(&res).contains("mixed schemas"), "{}", stderr(&res));
}

#[test]
fn zero_rounds_report_has_empty_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), "zero.toml", |t| no_fpmc(t).replace("rounds = 5", "rounds = 0"));
    let out = tmp.path().join("run");
    let res = dgdpo(&["run", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let summary = std::fs::read_to_string(out.join("report/summary.txt")).unwrap();
    let (before, metrics) = summary.split_once("Arena metrics (all rounds)\n").unwrap();
    assert_eq!(metrics, "");
    assert!(before.contains("Profile optimization\n  ") && before.contains("users=24"));
    let csv = std::fs::read_to_string(out.join("report/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);
}
