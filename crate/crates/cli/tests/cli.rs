use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use frictionlab::superhedge::{example1_dual_family, Claim, MartingaleCertificate, SolveReport};
use frictionlab::utility::{Endowment, UtilitySpec};
use frictionlab::{FrictionSpec, GbmParams, ScenarioTree};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use tempfile::TempDir;

fn frictionlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frictionlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("FRICTIONLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn read(dir: &Path, name: &str) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join(name)).unwrap()).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("structured error on stderr");
    serde_json::from_str(line).unwrap()
}

/// One-step tree, root price 1, children 2 and 1/2.
fn binomial(q_up: f64, q_down: f64) -> Value {
    json!({
        "d": 1,
        "grid": [0.0, 1.0],
        "nodes": [
            {"id": 0, "parent": null, "k": 0, "q": 1.0, "S": [1.0]},
            {"id": 1, "parent": 0, "k": 1, "q": q_up, "S": [2.0]},
            {"id": 2, "parent": 0, "k": 1, "q": q_down, "S": [0.5]}
        ]
    })
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "tree.json", &binomial(0.5, 0.5));
    write(
        dir.path(),
        "friction.json",
        &json!({"kind": "PowerScalar", "lambda": 1.0, "alpha": 2.0, "h_floor": 1.0}),
    );
    write(
        dir.path(),
        "call.json",
        &json!({"leaf_values": {"1": [1.0, 0.0], "2": [0.0, 0.0]}}),
    );
    write(
        dir.path(),
        "utility.json",
        &json!({"kind": "exponential", "a": 1.0}),
    );
    dir
}

fn strip_wall_time(v: &mut Value) {
    match v {
        Value::Object(m) => {
            m.remove("wall_time");
            m.values_mut().for_each(strip_wall_time);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_wall_time),
        _ => {}
    }
}

#[test]
fn validate_reports_bad_probability_sum() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", &binomial(0.5, 0.4));
    let out = frictionlab(&["validate", "--tree", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_error(&out)["code"], "TREE_PROB_SUM");
}

#[test]
fn validate_accepts_consistent_documents() {
    let dir = setup();
    let out = frictionlab(
        &[
            "validate",
            "--tree",
            "tree.json",
            "--friction",
            "friction.json",
            "--claim",
            "call.json",
            "--out",
            "v.json",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = read(dir.path(), "v.json");
    assert_eq!(v["result"]["valid"], true);
    assert_eq!(v["inputs"]["tree"]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn malformed_json_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tree.json"), "{\"d\": 1,").unwrap();
    let out = frictionlab(&["validate", "--tree", "tree.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["code"], "PARSE");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["no-such-command"][..],
        &["superhedge", "--tree"],
        &["reproduce-example1", "--sigma", "0.2"],
    ] {
        let out = frictionlab(args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_eq!(stderr_error(&out)["code"], "USAGE");
    }
    assert_eq!(frictionlab(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn example2_constant_price_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = frictionlab(
        &[
            "reproduce-example2",
            "--lambda",
            "1",
            "--k",
            "1",
            "--s",
            "const:1",
            "--T",
            "1",
            "--steps",
            "100",
            "--out",
            "e2.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let r = &read(dir.path(), "e2.json")["result"];
    assert!(
        (r["shares"].as_f64().unwrap() - (3f64.sqrt() - 1.0)).abs() <= 1e-10,
        "{r}"
    );
    assert!(
        (r["cash_spent"].as_f64().unwrap() - 1.0).abs() <= 1e-12,
        "{r}"
    );
    assert!(r["max_cashflow_error"].as_f64().unwrap() <= 1e-12);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("reproduce-example2:"));
}

#[test]
fn example2_gbm_matches_pathwise_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = frictionlab(
        &[
            "reproduce-example2",
            "--lambda",
            "0.5",
            "--k",
            "2",
            "--s",
            "gbm:1,0.05,0.3",
            "--steps",
            "50",
            "--n-paths",
            "200",
            "--seed",
            "9",
            "--out",
            "e2.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let r = &read(dir.path(), "e2.json")["result"];
    assert!(r["max_share_error"].as_f64().unwrap() <= 1e-12);
    assert!((r["cash_spent"].as_f64().unwrap() - 2.0).abs() <= 1e-12);
    assert_eq!(r["n_scenarios"], 200);
}

#[test]
fn example1_table_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = frictionlab(
        &[
            "reproduce-example1",
            "--mu",
            "0",
            "--sigma",
            "0.2",
            "--s0",
            "1",
            "--lambda",
            "0.01",
            "--n",
            "2,8,64",
            "--out",
            "e1.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let r = &read(dir.path(), "e1.json")["result"];
    let params = GbmParams::new(1.0, 0.0, 0.2).unwrap();
    let mut expected = Vec::new();
    for (row, n) in r["rows"]
        .as_array()
        .unwrap()
        .iter()
        .zip([2.0f64, 8.0, 64.0])
    {
        let lib = example1_dual_family(&params, 0.01, 1.0, n, n * n.ln() / 0.2).unwrap();
        assert_eq!(row["value"].as_f64().unwrap(), lib.value);
        assert_eq!(row["x"].as_f64().unwrap(), lib.x);
        expected.push(lib.value);
    }
    let increasing = expected.windows(2).all(|w| w[1] > w[0]);
    assert_eq!(r["strictly_increasing"], increasing);
}

#[test]
fn superhedge_report_round_trips_and_replays() {
    let dir = setup();
    let out = frictionlab(
        &[
            "superhedge",
            "--tree",
            "tree.json",
            "--claim",
            "call.json",
            "--friction",
            "friction.json",
            "--z",
            "1,0",
            "--out",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = read(dir.path(), "r.json");
    assert_eq!(v["command"], "superhedge");
    assert_eq!(v["result"]["feasible_from_z"], true);
    let report: SolveReport = serde_json::from_value(v["result"].clone()).unwrap();
    let again = serde_json::to_value(&report).unwrap();
    let reparsed: SolveReport = serde_json::from_value(again).unwrap();
    assert_eq!(report, reparsed);
    assert!(report.duality_gap.abs() <= 1e-6 * (1.0 + report.primal_value.abs()));

    let cert = report.certificate.unwrap();
    write(
        dir.path(),
        "cert.json",
        &serde_json::to_value(&cert).unwrap(),
    );
    let out = frictionlab(
        &[
            "dual-eval",
            "--tree",
            "tree.json",
            "--certificate",
            "cert.json",
            "--claim",
            "call.json",
            "--friction",
            "friction.json",
            "--out",
            "d.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let d = read(dir.path(), "d.json");
    assert!((d["result"]["dual_value"].as_f64().unwrap() - report.dual_value).abs() <= 1e-9);
}

/// Parse, serialize, parse again: both parsed values and both texts agree.
fn round_trip<T: DeserializeOwned + Serialize + PartialEq + std::fmt::Debug>(doc: &Value) -> Value {
    let first: T = serde_json::from_value(doc.clone()).unwrap();
    let text = serde_json::to_string(&first).unwrap();
    let second: T = serde_json::from_str(&text).unwrap();
    assert_eq!(first, second);
    assert_eq!(serde_json::to_string(&second).unwrap(), text);
    serde_json::from_str(&text).unwrap()
}

#[test]
fn input_documents_round_trip() {
    let dir = setup();
    let tree_doc = read(dir.path(), "tree.json");
    assert_eq!(round_trip::<ScenarioTree>(&tree_doc), tree_doc);
    assert_eq!(
        round_trip::<Claim>(&read(dir.path(), "call.json")),
        read(dir.path(), "call.json")
    );
    assert_eq!(
        round_trip::<UtilitySpec>(&read(dir.path(), "utility.json")),
        read(dir.path(), "utility.json")
    );
    round_trip::<FrictionSpec>(&read(dir.path(), "friction.json"));

    let tree: ScenarioTree = serde_json::from_value(tree_doc).unwrap();
    round_trip::<MartingaleCertificate>(
        &serde_json::to_value(MartingaleCertificate::frictionless(&tree)).unwrap(),
    );
    let w = Endowment::from_leaf_fn(&tree, |l| 0.1 * l as f64 + 1.0 / 3.0);
    assert_eq!(
        round_trip::<Endowment>(&serde_json::to_value(&w).unwrap()),
        serde_json::to_value(&w).unwrap()
    );
}

#[test]
fn reports_are_deterministic_modulo_wall_time() {
    let dir = setup();
    let run = |out: &str, threads: &str| {
        let o = frictionlab(
            &[
                "--threads",
                threads,
                "maximize-utility",
                "--tree",
                "tree.json",
                "--friction",
                "friction.json",
                "--utility",
                "utility.json",
                "--cash",
                "0.5",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
        let mut v = read(dir.path(), out);
        strip_wall_time(&mut v);
        v
    };
    let a = run("a.json", "1");
    let b = run("b.json", "4");
    assert_eq!(a, b);
    assert_eq!(a["result"]["foc"]["optimal_certified"], true);

    let sim = |out: &str, threads: &str| {
        let o = frictionlab(
            &[
                "--threads",
                threads,
                "simulate",
                "--model",
                "gbm",
                "--sigma",
                "0.3",
                "--steps",
                "16",
                "--n-paths",
                "500",
                "--seed",
                "11",
                "--out",
                out,
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(sim("p1.bin", "1"), sim("p2.bin", "3"));
}

#[test]
fn nonneg_class_has_no_foc_block() {
    let dir = setup();
    let out = frictionlab(
        &[
            "maximize-utility",
            "--tree",
            "tree.json",
            "--friction",
            "friction.json",
            "--utility",
            "utility.json",
            "--cash",
            "0",
            "--constraint-class",
            "nonneg",
            "--out",
            "n.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(read(dir.path(), "n.json")["result"]["foc"].is_null());
}

#[test]
fn arbitrage_and_market_bound_run_on_simulated_inputs() {
    let dir = setup();
    let out = frictionlab(
        &[
            "detect-arbitrage",
            "--tree",
            "tree.json",
            "--friction",
            "friction.json",
            "--out",
            "na.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let r = &read(dir.path(), "na.json")["result"];
    assert_eq!(r["arbitrage_found"], false);
    assert!(r["c_star"].as_f64().unwrap().abs() <= 1e-7);

    let out = frictionlab(
        &[
            "simulate",
            "--model",
            "fbm",
            "--hurst",
            "0.7",
            "--sigma",
            "0.2",
            "--steps",
            "8",
            "--n-paths",
            "50",
            "--out",
            "p.bin",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let out = frictionlab(
        &[
            "market-bound",
            "--paths",
            "p.bin",
            "--meta",
            "p.bin.json",
            "--friction",
            "friction.json",
            "--out",
            "mb.json",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = &read(dir.path(), "mb.json")["result"];
    assert_eq!(r["bounds"].as_array().unwrap().len(), 50);
    // G*(y) = y^2/4 for Lambda = 1, alpha = 2, so every bound is positive.
    assert!(r["min"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulated_trees_feed_the_solvers() {
    let dir = setup();
    let out = frictionlab(
        &[
            "simulate",
            "--model",
            "fbm",
            "--form",
            "tree",
            "--hurst",
            "0.3",
            "--sigma",
            "0.2",
            "--steps",
            "2",
            "--branches",
            "3",
            "--out",
            "fbm.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let out = frictionlab(
        &[
            "validate",
            "--tree",
            "fbm.json",
            "--friction",
            "friction.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn solver_outcomes_map_to_exit_codes() {
    let dir = setup();
    write(
        dir.path(),
        "huge.json",
        &json!({"leaf_values": {"1": [2e9, 0.0], "2": [2e9, 0.0]}}),
    );
    let out = frictionlab(
        &[
            "superhedge",
            "--tree",
            "tree.json",
            "--claim",
            "huge.json",
            "--friction",
            "friction.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["code"], "UNBOUNDED");

    let out = frictionlab(
        &[
            "superhedge",
            "--tree",
            "tree.json",
            "--claim",
            "call.json",
            "--friction",
            "friction.json",
            "--max-iter",
            "1",
            "--out",
            "m.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_error(&out)["code"], "MAX_ITERATIONS");
    assert_eq!(
        read(dir.path(), "m.json")["result"]["status"],
        "max_iterations"
    );

    write(
        dir.path(),
        "bad_friction.json",
        &json!({"kind": "PowerScalar", "lambda": 1.0, "alpha": 0.5, "h_floor": 1.0}),
    );
    let out = frictionlab(
        &[
            "market-bound",
            "--tree",
            "tree.json",
            "--friction",
            "bad_friction.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_error(&out)["code"], "FRICTION_INVALID");
}
