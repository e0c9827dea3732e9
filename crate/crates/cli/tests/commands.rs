use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cspcr::model::{Population, SourceDataset, UnlabeledPool};
use cspcr::ratio::{fit_classifier_ratio, RatioModel};
use cspcr::rng::SeedTree;
use cspcr::simlab::{analytic_dgp_ratio, DgpParams};
use cspcr::DensityRatio;
use tempfile::TempDir;

fn cspcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cspcr")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn header(p: usize, d: usize, with_y: bool, extras: &[&str]) -> String {
    let mut cols: Vec<String> = Vec::new();
    if with_y {
        cols.push("y".into());
    }
    cols.push("x".into());
    cols.extend((1..=p).map(|i| format!("z_{i}")));
    cols.extend((1..=d).map(|i| format!("v_{i}")));
    cols.extend(extras.iter().map(|s| s.to_string()));
    cols.join(",") + "\n"
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Labeled data with the true ratio as column `w` and `a = v_1` as column `a`.
fn write_data(dir: &Path, params: &DgpParams, seed: u64) -> PathBuf {
    let data: SourceDataset = params.gen_labeled(Population::Source, params.n_labeled, &mut SeedTree::new(seed).rng());
    let ratio = analytic_dgp_ratio(params);
    let first = &data.samples()[0];
    let mut text = header(first.z.len(), first.v.len(), true, &["w", "a"]);
    for s in data.samples() {
        let row = [s.y, s.x].into_iter().chain(s.z.iter().copied()).chain(s.v.iter().copied());
        let _ = writeln!(text, "{},{},{}", join(row), ratio.eval(s.x, &s.z, &s.v), s.v[0]);
    }
    let path = dir.join("data.csv");
    std::fs::write(&path, text).unwrap();
    path
}

fn write_pool(dir: &Path, name: &str, pool: &UnlabeledPool, extra_a: bool) -> PathBuf {
    let r0 = &pool.rows()[0];
    let mut text = header(r0.z.len(), r0.v.len(), false, if extra_a { &["a"] } else { &[] });
    for r in pool.rows() {
        let row = [r.x].into_iter().chain(r.z.iter().copied()).chain(r.v.iter().copied());
        let _ = write!(text, "{}", join(row));
        if extra_a {
            let _ = write!(text, ",{}", r.v[0]);
        }
        text.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn write_sampler(dir: &Path, params: &DgpParams) -> PathBuf {
    let coefficients: Vec<f64> = params.u.iter().copied().chain(std::iter::repeat_n(0.0, params.q)).collect();
    let json = format!(
        r#"{{"schema_version":1,"sampler":{{"kind":"gaussian_linear","coefficients":[{}],"intercept":0,"noise_variance":1}}}}"#,
        join(coefficients)
    );
    let path = dir.join("sampler.json");
    std::fs::write(&path, json).unwrap();
    path
}

struct Fixture {
    dir: TempDir,
    params: DgpParams,
    data: PathBuf,
    sampler: PathBuf,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let params = DgpParams { n_labeled: n, q: 5, ..DgpParams::null_shift() };
        let data = write_data(dir.path(), &params, 11);
        let sampler = write_sampler(dir.path(), &params);
        Fixture { dir, params, data, sampler }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pools(&self, n: usize) -> (PathBuf, PathBuf) {
        let root = SeedTree::new(23);
        let s = self.params.gen_pool(Population::Source, n, &mut root.child("s").rng());
        let t = self.params.gen_pool(Population::Target, n, &mut root.child("t").rng());
        (write_pool(self.dir.path(), "src.csv", &s, false), write_pool(self.dir.path(), "tgt.csv", &t, true))
    }

    fn test_args<'a>(&'a self, method: &'a str, out: &'a Path) -> Vec<&'a str> {
        vec![
            "test",
            "--data",
            self.data.to_str().unwrap(),
            "--sampler-model",
            self.sampler.to_str().unwrap(),
            "--method",
            method,
            "--k",
            "20",
            "--seed",
            "42",
            "--out",
            out.to_str().unwrap(),
        ]
    }
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn repeated_test_runs_write_identical_reports() {
    let fx = Fixture::new(500);
    let (a, b) = (fx.path("a.json"), fx.path("b.json"));
    for out in [&a, &b] {
        let mut args = fx.test_args("cspcr", out);
        args.extend(["--weight-col", "w"]);
        let run = cspcr(&args);
        assert_eq!(code(&run), 0, "{}", stderr(&run));
    }
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);

    let report = read_json(&a);
    assert_eq!(report["method"], "cspcr");
    assert_eq!(report["n"], 500);
    assert_eq!(report["K"], 20);
    assert_eq!(report["L"], 3);
    assert_eq!(report["seed"], 42);
    assert_eq!(report["per_label"]["W"].as_array().unwrap().len(), 3);
    let w_sum: f64 = report["per_label"]["W"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((w_sum - 500.0).abs() < 1e-8, "mean-one weights sum to n");
    let (p, alpha) = (report["p_value"].as_f64().unwrap(), report["alpha"].as_f64().unwrap());
    assert_eq!(report["reject"].as_bool().unwrap(), p <= alpha);
    assert!(report["per_label"].get("W_tilde").is_none());
}

#[test]
fn missing_data_flag_is_a_usage_error() {
    let out = cspcr(&["test", "--method", "cspcr", "--sampler-model", "s.json"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--data"));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn power_enhanced_test_requires_a_target_mean() {
    let fx = Fixture::new(200);
    let out_path = fx.path("r.json");
    let mut args = fx.test_args("cspcr-pe", &out_path);
    args.extend(["--weight-col", "w"]);
    let out = cspcr(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--target-pool"), "{}", stderr(&out));
    assert!(!out_path.exists());
}

#[test]
fn power_enhanced_test_with_pool_or_exact_mean() {
    let fx = Fixture::new(300);
    let (_, tgt) = fx.pools(400);
    let exact = fx.params.target_mean_v().to_string();
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("pool.json", vec!["--target-pool", tgt.to_str().unwrap()]),
        ("exact.json", vec!["--target-mean-a", &exact]),
        ("custom.json", vec!["--control-variate", "custom-col", "a", "--target-pool", tgt.to_str().unwrap()]),
    ];
    let mut w_tilde = Vec::new();
    for (name, extra) in &cases {
        let out_path = fx.path(name);
        let mut args = fx.test_args("cspcr-pe", &out_path);
        args.extend(["--weight-col", "w"]);
        args.extend(extra.iter().copied());
        let out = cspcr(&args);
        assert_eq!(code(&out), 0, "{name}: {}", stderr(&out));
        let report = read_json(&out_path);
        assert_eq!(report["per_label"]["gamma"].as_array().unwrap().len(), 3);
        w_tilde.push(report["per_label"]["W_tilde"].clone());
    }
    // Column `a` repeats v_1, and the pool mean of that column is what the pool path estimates.
    assert_eq!(w_tilde[0], w_tilde[2]);
    assert_ne!(w_tilde[0], w_tilde[1]);
}

#[test]
fn conflicting_or_missing_weight_sources() {
    let fx = Fixture::new(100);
    let out_path = fx.path("r.json");
    let out = cspcr(&fx.test_args("cspcr", &out_path));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("importance weights"));

    let (src, tgt) = fx.pools(100);
    let mut args = fx.test_args("cspcr", &out_path);
    args.extend(["--weight-col", "w", "--pools", src.to_str().unwrap(), tgt.to_str().unwrap()]);
    assert_eq!(code(&cspcr(&args)), 2);

    let out = cspcr(&fx.test_args("pcr", &out_path));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn zero_weights_are_a_numerical_error() {
    let fx = Fixture::new(60);
    let text = std::fs::read_to_string(&fx.data).unwrap();
    let mut lines = text.lines();
    let mut zeroed = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let mut cells: Vec<&str> = line.split(',').collect();
        let w = cells.len() - 2;
        cells[w] = "0";
        zeroed.push_str(&cells.join(","));
        zeroed.push('\n');
    }
    std::fs::write(&fx.data, zeroed).unwrap();
    let mut args = fx.test_args("cspcr", Path::new("/dev/null"));
    args.extend(["--weight-col", "w"]);
    let out = cspcr(&args);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn fitted_ratio_models_feed_the_test_command() {
    let fx = Fixture::new(300);
    let (src, tgt) = fx.pools(300);
    let model = fx.path("model.json");
    let fit = cspcr(&[
        "ratio-fit",
        "--source",
        src.to_str().unwrap(),
        "--target",
        tgt.to_str().unwrap(),
        "--mode",
        "factorized",
        "--seed",
        "3",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&fit), 0, "{}", stderr(&fit));
    let json = read_json(&model);
    assert_eq!(json["schema_version"], 1);
    assert_eq!(json["ratio"]["kind"], "factorized");

    let out_path = fx.path("r.json");
    let mut args = fx.test_args("cspcr", &out_path);
    args.extend(["--ratio-model", model.to_str().unwrap()]);
    let out = cspcr(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let pooled = fx.path("pooled.json");
    let mut args = fx.test_args("is", &pooled);
    args.extend(["--pools", src.to_str().unwrap(), tgt.to_str().unwrap()]);
    let out = cspcr(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_json(&pooled)["n"], 60);
}

fn classifier_fit(dir: &Path, src: &Path, tgt: &Path) -> (Output, PathBuf) {
    let out = dir.join("classifier.json");
    let run = cspcr(&[
        "ratio-fit",
        "--source",
        src.to_str().unwrap(),
        "--target",
        tgt.to_str().unwrap(),
        "--mode",
        "classifier",
        "--out",
        out.to_str().unwrap(),
    ]);
    (run, out)
}

fn load_model(path: &Path) -> RatioModel {
    let json = read_json(path);
    serde_json::from_value(json["ratio"].clone()).unwrap()
}

#[test]
fn identical_files_fit_a_ratio_near_one() {
    let fx = Fixture::new(10);
    let pool = fx.params.gen_pool(Population::Source, 800, &mut SeedTree::new(1).rng());
    let held_out = fx.params.gen_pool(Population::Source, 200, &mut SeedTree::new(2).rng());
    let path = write_pool(fx.dir.path(), "same.csv", &pool, false);
    let (run, model_path) = classifier_fit(fx.dir.path(), &path, &path);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let model = load_model(&model_path);
    let mean = held_out.rows().iter().map(|r| model.eval(r.x, &r.z, &r.v)).sum::<f64>() / 200.0;
    assert!((0.8..=1.2).contains(&mean), "{mean}");
}

#[test]
fn reloaded_model_matches_the_in_memory_fit() {
    let fx = Fixture::new(10);
    let root = SeedTree::new(4);
    let s = fx.params.gen_pool(Population::Source, 400, &mut root.child("s").rng());
    let t = fx.params.gen_pool(Population::Target, 400, &mut root.child("t").rng());
    let (sp, tp) = (write_pool(fx.dir.path(), "s.csv", &s, false), write_pool(fx.dir.path(), "t.csv", &t, false));
    let (run, model_path) = classifier_fit(fx.dir.path(), &sp, &tp);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let reloaded = load_model(&model_path);

    // The in-memory fit sees the values as printed to the CSV, which round-trip exactly.
    let direct = fit_classifier_ratio(&s, &t).unwrap();
    for r in s.rows().iter().chain(t.rows()).take(200) {
        let (a, b) = (reloaded.eval(r.x, &r.z, &r.v), direct.eval(r.x, &r.z, &r.v));
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn mean_shift_fit_recovers_unit_log_slope() {
    let dir = TempDir::new().unwrap();
    let mut rng = SeedTree::new(9).rng();
    let mut write = |name: &str, shift: f64| {
        use rand::Rng;
        let mut text = String::from("x\n");
        for _ in 0..10_000 {
            let _ = writeln!(text, "{}", shift + rng.sample::<f64, _>(rand_distr::StandardNormal));
        }
        let path = dir.path().join(name);
        std::fs::write(&path, text).unwrap();
        path
    };
    let (src, tgt) = (write("s.csv", 0.0), write("t.csv", 1.0));
    let (run, model_path) = classifier_fit(dir.path(), &src, &tgt);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let json = read_json(&model_path);
    let slope = json["ratio"]["coefficients"][0].as_f64().unwrap();
    assert!((slope - 1.0).abs() < 0.1, "{slope}");
}

#[test]
fn separated_classes_exit_with_a_numerical_error() {
    let dir = TempDir::new().unwrap();
    let src = dir.path().join("s.csv");
    let tgt = dir.path().join("t.csv");
    std::fs::write(&src, "x\n-3\n-2\n-1\n").unwrap();
    std::fs::write(&tgt, "x\n1\n2\n3\n").unwrap();
    let (run, _) = classifier_fit(dir.path(), &src, &tgt);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
    assert!(stderr(&run).contains("separated"));
}

fn simulate(extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--preset", "l-sweep", "--seed", "5", "--set", "n_labeled=80", "--set", "q=5", "--k", "10"];
    args.extend_from_slice(extra);
    cspcr(&args)
}

#[test]
fn simulation_tables_ignore_thread_count() {
    let one = simulate(&["--reps", "12", "--threads", "1"]);
    let three = simulate(&["--reps", "12", "--threads", "3"]);
    assert_eq!(code(&one), 0, "{}", stderr(&one));
    assert_eq!(one.stdout, three.stdout);
    let text = String::from_utf8(one.stdout).unwrap();
    assert!(text.starts_with("sweep_param,sweep_value,method,reps,reject_rate,mc_se,errors_count\n"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn single_rep_rows_hold_single_decisions() {
    let out = simulate(&["--reps", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[3], "1");
        let rate: f64 = cells[4].parse().unwrap();
        assert!(rate == 0.0 || rate == 1.0, "{line}");
    }
}

#[test]
fn simulation_input_errors() {
    assert_eq!(code(&cspcr(&["simulate", "--preset", "nope"])), 2);
    assert_eq!(code(&simulate(&["--reps", "1", "--set", "bogus=1"])), 2);
    assert_eq!(code(&simulate(&["--reps", "1", "--set", "n_labeled=0"])), 2);
}

#[test]
fn help_documents_seed_streams() {
    let out = cspcr(&["test", "--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for stream in ["labeling/<row>", "tie-break/<row>", "resample", "simulation/<i>/<rep>"] {
        assert!(text.contains(stream), "{stream}");
    }
}
