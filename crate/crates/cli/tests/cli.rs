use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

fn scot(args: &[&str]) -> Output {
    scot_with_stdin(args, None)
}

fn scot_with_stdin(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_scot"))
        .args(args)
        .env_remove("SCOT_API_KEY")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let mut pipe = child.stdin.take().unwrap();
        if let Some(s) = stdin {
            pipe.write_all(s.as_bytes()).unwrap();
        }
    }
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

const SPEC: &str = r#"{
  "entities": [
    {"id": "cat", "phrase": "a grey cat", "size": "medium"},
    {"id": "sofa", "phrase": "a red sofa", "size": "large"},
    {"id": "lamp", "phrase": "a lamp", "size": "small"}
  ],
  "constraints": [
    {"kind": "left_of", "a": "lamp", "b": "sofa", "margin": 50},
    {"kind": "above", "a": "cat", "b": "sofa"},
    {"kind": "non_overlap", "a": "lamp", "b": "sofa"}
  ],
  "tail": "in a cozy living room"
}"#;

#[test]
fn synth_encode_decode_round_trip() {
    let dir = TempDir::new().unwrap();
    let synth = scot(&["dataset", "synth", "--seed", "3", "--n", "20"]);
    assert_eq!(code(&synth), 0);
    let records = write(&dir, "r.jsonl", &stdout(&synth));
    let enc = scot(&["encode", s(&records)]);
    assert_eq!(code(&enc), 0);
    assert_eq!(stdout(&enc).lines().count(), 20);
    assert!(stdout(&enc).contains("<|box|>"));
    let dec = scot_with_stdin(&["decode"], Some(&stdout(&enc)));
    assert_eq!(code(&dec), 0);
    let lines: Vec<Value> = stdout(&dec).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let orig: Vec<Value> = stdout(&synth).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    for (a, b) in orig.iter().zip(&lines) {
        assert_eq!(a["caption"], b["caption"]);
        let boxes = |v: &Value| v["entities"].as_array().unwrap().iter().map(|e| e["box"].clone()).collect::<Vec<_>>();
        assert_eq!(boxes(a), boxes(b));
    }
}

#[test]
fn plan_emits_planner_json_and_instruction() {
    let dir = TempDir::new().unwrap();
    let spec = write(&dir, "spec.json", SPEC);
    let out = scot(&["plan", s(&spec), "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let prompt = v["prompt"].as_str().unwrap();
    assert!(prompt.starts_with("a grey cat<|bbox_1|>"), "{prompt}");
    assert!(prompt.ends_with("in a cozy living room"));
    assert_eq!(v["objects"].as_object().unwrap().len(), 3);
    assert!(v["objects"]["2. a red sofa"].is_array());

    let again = scot(&["plan", s(&spec), "--seed", "7"]);
    assert_eq!(out.stdout, again.stdout);

    let inst = scot(&["plan", s(&spec), "--seed", "7", "--instruction"]);
    assert_eq!(code(&inst), 0);
    assert_eq!(stdout(&inst).matches("<|box|>").count(), 3);
}

#[test]
fn plan_rejects_bad_specs() {
    let dir = TempDir::new().unwrap();
    let dangling = write(
        &dir,
        "bad.json",
        r#"{"entities":[{"id":"a","phrase":"a"}],"constraints":[{"kind":"above","a":"a","b":"zzz"}]}"#,
    );
    assert_eq!(code(&scot(&["plan", s(&dangling)])), 1);
    let garbage = write(&dir, "garbage.json", "{not json");
    assert_eq!(code(&scot(&["plan", s(&garbage)])), 1);
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&scot(&["plan", s(&missing)])), 2);
}

#[test]
fn check_and_repair() {
    let dir = TempDir::new().unwrap();
    let layout = write(&dir, "layout.json", r#"{"a": [600, 100, 800, 300], "b": [100, 100, 300, 300]}"#);
    let cons = write(&dir, "c.jsonl", "{\"kind\":\"left_of\",\"a\":\"a\",\"b\":\"b\"}\n\n{\"kind\":\"count_equals\",\"category\":\"b\",\"n\":1}\n");
    let check = scot(&["check", s(&layout), s(&cons)]);
    assert_eq!(code(&check), 1);
    let v = json(&check);
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["index"], 0);

    let repair = scot(&["repair", s(&layout), s(&cons)]);
    assert_eq!(code(&repair), 0, "{}", String::from_utf8_lossy(&repair.stderr));
    let plan = json(&repair);
    assert!(plan["residual"].as_array().unwrap().is_empty());
    let repaired = write(&dir, "plan.json", &stdout(&repair));
    assert_eq!(code(&scot(&["check", s(&repaired), s(&cons)])), 0);

    // categories override ids
    let cats = write(&dir, "cats.json", r#"{"a": "cube", "b": "cube"}"#);
    assert_eq!(code(&scot(&["check", s(&repaired), s(&cons), "--categories", s(&cats)])), 1);

    let bad = write(&dir, "bad.jsonl", "{\"kind\":\"sideways\"}\n");
    assert_eq!(code(&scot(&["check", s(&layout), s(&bad)])), 1);
}

#[test]
fn eval_against_self_and_threshold_flag() {
    let dir = TempDir::new().unwrap();
    let synth = scot(&["dataset", "synth", "--seed", "1", "--n", "10", "-o", s(&dir.path().join("r.jsonl"))]);
    assert_eq!(code(&synth), 0);
    let r = dir.path().join("r.jsonl");
    let out = scot(&["eval", s(&r), s(&r)]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!((v["sr"].as_f64(), v["isr"].as_f64(), v["miou"].as_f64()), (Some(100.0), Some(100.0), Some(100.0)));
    assert_eq!(v["samples"], 10);

    let per = scot(&["eval", s(&r), s(&r), "--per-sample", "--iou-threshold", "0.7"]);
    let v = json(&per);
    assert_eq!(v["iou_threshold"], 0.7);
    assert_eq!(v["samples"].as_array().unwrap().len(), 10);

    assert_eq!(code(&scot(&["eval", s(&r), s(&r), "--iou-threshold", "1.5"])), 1);
    let empty = write(&dir, "empty.jsonl", "");
    assert_eq!(code(&scot(&["eval", s(&empty), s(&r)])), 1);
}

#[test]
fn render_planner_fixture() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cake.svg");
    let run = scot(&["render", s(&core_fixture("planner_example_6.txt")), "-o", s(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let svg = fs::read_to_string(&out).unwrap();
    assert!(svg.contains(r#"x="300" y="500" width="400" height="400""#), "{svg}");
    assert!(svg.contains(r#"x="350" y="550" width="300" height="100""#));
    assert!(svg.contains("1. birthday cake"));

    let layout = write(&dir, "layout.json", r#"{"a": [0, 0, 100, 100]}"#);
    let small = scot(&["render", s(&layout), "--canvas-px", "500"]);
    assert_eq!(code(&small), 0);
    assert!(stdout(&small).contains(r#"width="50" height="50""#));
}

#[test]
fn dataset_stats_and_convert() {
    let dir = TempDir::new().unwrap();
    let r = dir.path().join("r.jsonl");
    assert_eq!(code(&scot(&["dataset", "synth", "--n", "5", "--max-entities", "3", "-o", s(&r)])), 0);
    let stats = json(&scot(&["dataset", "stats", s(&r)]));
    assert_eq!(stats["count"], 5);

    let conv = scot(&[
        "dataset",
        "convert",
        s(&core_fixture("planner_example_6.txt")),
        s(&core_fixture("planner_example_7.txt")),
    ]);
    assert_eq!(code(&conv), 0, "{}", String::from_utf8_lossy(&conv.stderr));
    let lines: Vec<Value> = stdout(&conv).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["id"], "planner_example_6");
    assert_eq!(lines[0]["entities"][0]["box"], serde_json::json!([300, 500, 700, 900]));
    assert_eq!(lines[0]["source"], "planner");
}

#[test]
fn mllm_plan_failures() {
    let dir = TempDir::new().unwrap();
    let prompt = write(&dir, "prompt.txt", "a cat on a mat");
    // no key in the environment
    let out = scot(&["plan", s(&prompt), "--mllm", "--base-url", "http://127.0.0.1:9", "--model", "m"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SCOT_API_KEY"));
    // flags missing
    assert_eq!(code(&scot(&["plan", s(&prompt), "--mllm"])), 1);
    // unreachable endpoint is a transport failure
    let cfg = write(
        &dir,
        "cfg.json",
        r#"{"baseUrl": "http://127.0.0.1:9", "modelName": "m", "apiKeyEnvVar": "SCOT_CLI_TEST_KEY", "timeout": 5}"#,
    );
    let out = Command::new(env!("CARGO_BIN_EXE_scot"))
        .args(["plan", s(&prompt), "--mllm", "--config", s(&cfg)])
        .env("SCOT_CLI_TEST_KEY", "k")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn toy_train_sample_gradcheck() {
    let dir = TempDir::new().unwrap();
    let inst = write(&dir, "inst.txt", "a red ball<|box|>100,100,400,400<|/box|>\n");
    let ckpt = dir.path().join("m.ckpt");
    let curve = dir.path().join("curve.txt");
    let train = scot(&["toy", "train", s(&inst), "-o", s(&ckpt), "--steps", "30", "--width", "16", "--curve", s(&curve)]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let lines: Vec<String> = fs::read_to_string(&curve).unwrap().lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 30);
    assert!(lines[0].starts_with("1 "));

    let sample = scot(&["toy", "sample", s(&ckpt), "a red ball<|box|>100,100,400,400<|/box|>", "--n", "25"]);
    assert_eq!(code(&sample), 0, "{}", String::from_utf8_lossy(&sample.stderr));
    let v = json(&sample);
    assert_eq!(v["samples"].as_array().unwrap().len(), 25);
    let f = v["in_box_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f));

    let gc = scot(&["toy", "gradcheck", "--width", "16", "--seed", "4"]);
    assert_eq!(code(&gc), 0, "{}", stdout(&gc));
    assert!(json(&gc)["max_relative_error"].as_f64().unwrap() <= 1e-4);

    let no_boxes = write(&dir, "plain.txt", "just words\n");
    assert_eq!(code(&scot(&["toy", "train", s(&no_boxes), "-o", s(&ckpt)])), 1);
    let junk = write(&dir, "junk.ckpt", "not a checkpoint");
    assert_eq!(code(&scot(&["toy", "sample", s(&junk), "a<|box|>0,0,10,10<|/box|>"])), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&scot(&["frobnicate"])), 1);
    assert_eq!(code(&scot(&["--help"])), 0);
}
