use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn mini() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini")
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chainbox"));
    c.env_remove("RUST_LOG");
    c
}

/// Runs against the mini corpus with datasets and outputs under `tmp`.
fn mini_cmd(tmp: &Path) -> Command {
    let mut c = bin();
    c.arg("--config").arg(mini().join("chainbox.toml"));
    c.arg("--datasets-dir").arg(tmp.join("datasets"));
    c.arg("--outputs-dir").arg(tmp.join("out"));
    c
}

fn run(mut c: Command) -> Output {
    c.output().expect("binary runs")
}

fn ok(c: Command) -> Value {
    let out = run(c);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn usage_and_config_errors_have_distinct_codes() {
    let out = run({
        let mut c = bin();
        c.arg("infer");
        c
    });
    assert_eq!(out.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[eval]\ntau = 3.0\n").unwrap();
    let mut c = bin();
    c.arg("--config").arg(&cfg).args([
        "eval",
        "--predictions",
        "p",
        "--gold",
        "g",
        "--metric",
        "anls",
    ]);
    let out = run(c);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.tau"));
}

#[test]
fn resolved_config_is_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = mini_cmd(tmp.path());
    c.args(["eval", "--metric", "anls", "--predictions"])
        .arg(perfect_predictions(tmp.path()));
    c.arg("--gold").arg(mini().join("gold.jsonl"));
    let out = run(c);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("resolved config") && err.contains("\"seed\":7"),
        "{err}"
    );
}

#[test]
fn layout_cluster_is_deterministic_and_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let cluster = |k: &str, out: &Path| {
        let mut c = bin();
        c.current_dir(tmp.path());
        c.args([
            "layout",
            "cluster",
            "--image-id",
            "invoice_01",
            "--seed",
            "7",
            "--k",
            k,
        ]);
        c.arg("--tokens")
            .arg(mini().join("tokens_invoice_01.jsonl"));
        c.arg("--image").arg(mini().join("images/invoice_01.png"));
        c.arg("--out").arg(out);
        ok(c)
    };
    let a = tmp.path().join("a.jsonl");
    let b = tmp.path().join("b.jsonl");
    cluster("2", &a);
    cluster("2", &b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c8 = tmp.path().join("k8.jsonl");
    let summary = cluster("8", &c8);
    assert_eq!(summary["boxes"], 6);
    assert_eq!(
        std::fs::read_to_string(&c8).unwrap(),
        std::fs::read_to_string(mini().join("golden/invoice_01.cluster_k8.jsonl")).unwrap()
    );
}

#[test]
fn layout_ingest_clips_and_reports_bad_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("layout.jsonl");
    let mut c = bin();
    c.current_dir(tmp.path());
    c.args([
        "layout",
        "ingest",
        "--image-id",
        "p",
        "--width",
        "480",
        "--height",
        "360",
    ]);
    c.arg("--input")
        .arg(mini().join("analyzer_raw.jsonl"))
        .arg("--out")
        .arg(&out);
    ok(c);
    let boxes = jsonl(&out);
    // reading order puts the heading first; the overhanging box ends at the edge
    assert_eq!(boxes[0]["text"], "Heading");
    assert_eq!(boxes[1]["bbox"], serde_json::json!([470, 10, 10, 20]));

    let mut c = bin();
    c.current_dir(tmp.path());
    c.args([
        "layout",
        "ingest",
        "--image-id",
        "p",
        "--width",
        "480",
        "--height",
        "360",
    ]);
    c.arg("--input")
        .arg(mini().join("bad_layout.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("x.jsonl"));
    let res = run(c);
    assert_eq!(res.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));
}

fn render(tmp: &Path, role: &str, image: &str, keys: Option<&str>) -> (Output, PathBuf) {
    let out = tmp.join(format!("{image}.{role}.png"));
    let mut c = bin();
    c.current_dir(tmp);
    c.args(["render", role]);
    c.arg("--image")
        .arg(mini().join(format!("images/{image}.png")));
    c.arg("--layout")
        .arg(mini().join(format!("layouts/{image}.jsonl")));
    c.arg("--out").arg(&out);
    if let Some(k) = keys {
        c.args(["--keys", k]);
    }
    (run(c), out)
}

#[test]
fn render_matches_goldens() {
    let tmp = tempfile::tempdir().unwrap();
    for (role, image, keys, golden) in [
        ("s1", "invoice_01", None, "invoice_01.s1.png"),
        ("s1", "report_04", None, "report_04.s1.png"),
        ("s2", "invoice_01", Some("2,5"), "invoice_01.s2.png"),
        (
            "s2",
            "invoice_01",
            Some("1,2,3,4,5,6"),
            "invoice_01.s2_all.png",
        ),
    ] {
        let (res, out) = render(tmp.path(), role, image, keys);
        assert!(
            res.status.success(),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        let want = std::fs::read(mini().join("golden").join(golden)).unwrap();
        assert!(std::fs::read(&out).unwrap() == want, "{golden} differs");
    }
}

#[test]
fn render_rejects_unknown_key() {
    let tmp = tempfile::tempdir().unwrap();
    let (res, out) = render(tmp.path(), "s2", "invoice_01", Some("3,9"));
    assert_eq!(res.status.code(), Some(6));
    assert!(!out.exists());
}

/// The predictions a perfect system makes for the mini gold file.
fn perfect_predictions(dir: &Path) -> PathBuf {
    let lines: Vec<String> = jsonl(&mini().join("gold.jsonl"))
        .iter()
        .map(|g| {
            serde_json::json!({
                "sample_id": g["sample_id"],
                "answer": g["answers"][0],
                "selection": {"ids": g["helpful"], "raw_text": ""},
            })
            .to_string()
        })
        .collect();
    let path = dir.join("perfect.jsonl");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn expected() -> Vec<Value> {
    jsonl(&mini().join("expected.jsonl"))
}

fn assert_token_sums(trace: &Value) {
    let calls: Vec<&Value> = ["s1", "s2", "vanilla"]
        .iter()
        .filter_map(|k| trace.get(*k))
        .map(|c| &c["response"])
        .collect();
    for (total, field) in [
        ("total_prompt_tokens", "prompt_token_count"),
        ("total_image_tokens", "image_token_count"),
        ("total_output_tokens", "output_token_count"),
    ] {
        let sum: u64 = calls.iter().map(|r| r[field].as_u64().unwrap()).sum();
        assert_eq!(
            trace[total].as_u64().unwrap(),
            sum,
            "{total} of {}",
            trace["sample_id"]
        );
    }
}

#[test]
fn infer_mini_corpus_doc_cob() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = mini_cmd(tmp.path());
    c.args([
        "infer",
        "--dataset",
        "mini",
        "--mode",
        "doc-cob",
        "--backend",
        "mock",
    ]);
    let summary = ok(c);
    assert_eq!(summary["samples"], 12);
    assert_eq!(summary["fallbacks"], 0);

    let dir = tmp.path().join("out/mini/doc-cob");
    let preds = jsonl(&dir.join("predictions.jsonl"));
    for (p, e) in preds.iter().zip(expected()) {
        assert_eq!(p["sample_id"], e["sample_id"]);
        assert_eq!(p["answer"], e["answer"]);
    }
    for t in jsonl(&dir.join("traces.jsonl")) {
        assert!(t.get("s1").is_some() && t.get("s2").is_some() && t.get("vanilla").is_none());
        assert_token_sums(&t);
    }

    let mut c = mini_cmd(tmp.path());
    c.args(["eval", "--metric", "keybox-f1", "--predictions"])
        .arg(dir.join("predictions.jsonl"));
    c.arg("--gold")
        .arg(mini().join("gold.jsonl"))
        .arg("--out")
        .arg(tmp.path().join("report"));
    let report = ok(c);
    assert_eq!(report["score"], 1.0);
    assert!(tmp.path().join("report/keybox-f1.tsv").exists());

    // same seed, same backend script: identical traces apart from timing
    let strip = |p: &Path| -> Vec<Value> {
        jsonl(p)
            .into_iter()
            .map(|mut t| {
                t["wall_time_ms"] = 0.into();
                t
            })
            .collect()
    };
    let mut c = mini_cmd(tmp.path());
    c.args(["infer", "--dataset", "mini", "--out"])
        .arg(tmp.path().join("again"));
    ok(c);
    assert_eq!(
        strip(&dir.join("traces.jsonl")),
        strip(&tmp.path().join("again/traces.jsonl"))
    );
}

#[test]
fn infer_vanilla_makes_one_call_each() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = mini_cmd(tmp.path());
    c.args(["infer", "--dataset", "mini", "--mode", "vanilla"]);
    let summary = ok(c);
    assert_eq!(summary["calls"], 12);
    for t in jsonl(&tmp.path().join("out/mini/vanilla/traces.jsonl")) {
        assert!(t.get("s1").is_none() && t.get("s2").is_none() && t.get("vanilla").is_some());
        assert_token_sums(&t);
    }
}

#[test]
fn garbage_stage_one_falls_back() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = mini_cmd(tmp.path());
    c.args(["infer", "--dataset", "mini", "--behavior"])
        .arg(mini().join("behavior_garbage_s1.toml"));
    let summary = ok(c);
    assert_eq!(summary["fallbacks"], 3);
    let traces = jsonl(&tmp.path().join("out/mini/doc-cob/traces.jsonl"));
    for (t, e) in traces.iter().zip(expected()) {
        let fell_back = t.get("fallback_reason").is_some();
        assert_eq!(
            fell_back,
            e["fallback_under_garbage"].as_bool().unwrap(),
            "{}",
            e["sample_id"]
        );
        assert_eq!(t["answer"], e["answer"]);
        assert_token_sums(t);
    }
}

#[test]
fn remote_backend_down_is_a_backend_error() {
    let tmp = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = tmp.path().join("remote.toml");
    let m = mini();
    std::fs::write(
        &cfg,
        format!(
            "[paths]\nimages = {:?}\nlayouts = {:?}\n[backend]\nkind = \"remote\"\n[backend.remote]\n\
             endpoint = \"http://127.0.0.1:{port}/v1/chat/completions\"\nmax_attempts = 1\ntimeout_secs = 5\n\
             [datasets.mini]\nqa_files = [{:?}]\n",
            m.join("images"),
            m.join("layouts"),
            m.join("qa.jsonl"),
        ),
    )
    .unwrap();
    let mut c = bin();
    c.arg("--config")
        .arg(&cfg)
        .args(["infer", "--dataset", "mini", "--out"])
        .arg(tmp.path().join("o"));
    let out = run(c);
    assert_eq!(
        out.status.code(),
        Some(5),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn generate_annotate_qa_and_enabling() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = mini_cmd(tmp.path());
    c.args(["generate", "annotate", "--dataset", "mini"]);
    assert_eq!(ok(c)["images"], 5);
    let produced = std::fs::read_to_string(tmp.path().join("out/mini/annotations.jsonl")).unwrap();
    assert_eq!(
        produced,
        std::fs::read_to_string(mini().join("annotations.jsonl")).unwrap()
    );

    let mut c = mini_cmd(tmp.path());
    c.args(["generate", "qa", "--dataset", "mini"]);
    let qa = ok(c);
    assert_eq!(qa["qa"]["accepted"], 12);
    assert_eq!(qa["qa"]["queued"], 0);
    assert_eq!(qa["manifest"]["mean_key_boxes"], 3.0);

    // a second pass stores nothing new
    let mut c = mini_cmd(tmp.path());
    c.args(["generate", "qa", "--dataset", "mini"]);
    assert_eq!(ok(c)["qa"]["skipped"], 12);

    let enabling = |dir: &str| {
        let mut c = mini_cmd(tmp.path());
        c.args([
            "generate",
            "enabling-tasks",
            "--dataset",
            "mini",
            "--seed",
            "7",
            "--out",
        ])
        .arg(tmp.path().join(dir));
        ok(c)
    };
    let a = enabling("e1");
    enabling("e2");
    // box counts per page are 6, 5, 4, 5, 4; the id task samples at most 5 each
    assert_eq!(a["enabling"]["box_id"], 23);
    assert_eq!(a["enabling"]["box_query"], 36);
    for f in ["box_id.jsonl", "box_query.jsonl", "overlays/invoice_01.png"] {
        assert_eq!(
            std::fs::read(tmp.path().join("e1").join(f)).unwrap(),
            std::fs::read(tmp.path().join("e2").join(f)).unwrap()
        );
    }
}

#[test]
fn generate_qa_routes_defects_to_review() {
    let tmp = tempfile::tempdir().unwrap();
    let annotations = jsonl(&mini().join("annotations.jsonl"));
    // point every helpful box at the title, which never holds the answer
    let broken: Vec<String> = annotations
        .iter()
        .map(|a| {
            let mut a = a.clone();
            let raw = a["raw"].as_str().unwrap().to_owned();
            let mut out = String::new();
            for line in raw.lines() {
                if line.starts_with("HELPFUL BOX:") {
                    out.push_str("HELPFUL BOX: [<box>1</box>]\n");
                } else if line.starts_with("CONFUSING BOX:") {
                    out.push_str("CONFUSING BOX: []\n");
                } else {
                    out.push_str(line);
                    out.push('\n');
                }
            }
            a["raw"] = out.into();
            serde_json::to_string(&a).unwrap()
        })
        .collect();
    let path = tmp.path().join("broken.jsonl");
    std::fs::write(&path, broken.join("\n") + "\n").unwrap();

    let mut c = mini_cmd(tmp.path());
    c.args(["generate", "qa", "--dataset", "mini", "--annotations"])
        .arg(&path);
    let qa = ok(c);
    assert_eq!(qa["qa"]["accepted"], 0);
    assert_eq!(qa["qa"]["queued"], 12);
    assert_eq!(qa["queue"]["pending"], 12);
}

#[test]
fn eval_gold_against_gold_and_join_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let gold = mini().join("gold.jsonl");
    let perfect = perfect_predictions(tmp.path());
    for metric in ["anls", "keybox-f1"] {
        let mut c = mini_cmd(tmp.path());
        c.args(["eval", "--metric", metric, "--predictions"])
            .arg(&perfect)
            .arg("--gold")
            .arg(&gold);
        assert_eq!(ok(c)["score"], 1.0, "{metric}");
    }

    // a prediction for a sample the gold file does not have
    let stray = tmp.path().join("stray.jsonl");
    let mut text = std::fs::read_to_string(&perfect).unwrap();
    text.push_str("{\"sample_id\":\"q99\",\"answer\":\"x\"}\n");
    std::fs::write(&stray, text).unwrap();
    let mut c = mini_cmd(tmp.path());
    c.args(["eval", "--metric", "anls", "--predictions"])
        .arg(&stray)
        .arg("--gold")
        .arg(&gold);
    let out = run(c);
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("q99"));
}

fn http_get(addr: &str, path: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status: u16 = raw[9..12].parse().unwrap();
    let body = raw.split("\r\n\r\n").nth(1).unwrap_or("");
    // small bodies come back in one chunk when chunked
    let json = body
        .find('{')
        .map(|i| &body[i..body.rfind('}').unwrap() + 1])
        .unwrap_or("null");
    (status, serde_json::from_str(json).unwrap())
}

#[cfg(unix)]
#[test]
fn serve_answers_and_stops_on_sigterm() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = mini_cmd(tmp.path());
    c.args(["serve", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null());
    let mut child = c.spawn().unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .expect("listen line")
        .to_owned();

    let (status, body) = http_get(&addr, "/review/next");
    assert_eq!(status, 200);
    assert_eq!(body["empty"], true);
    let (status, body) = http_get(&addr, "/stats");
    assert_eq!(status, 200);
    assert_eq!(body["data"]["conserved"], true);

    let killed = Command::new("kill")
        .args(["-TERM", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(killed.success());
    let exit = child.wait().unwrap();
    assert!(exit.success(), "{exit:?}");
}

#[test]
fn serve_reports_port_conflict() {
    let tmp = tempfile::tempdir().unwrap();
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let mut c = mini_cmd(tmp.path());
    c.args(["serve", "--addr", &addr]);
    let out = run(c);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot bind"));
}
