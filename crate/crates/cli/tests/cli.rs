use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

fn desk_file(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/desk").join(name)
}

fn recall(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recall"))
        .args(args)
        .env_remove("RECALL_API_KEY")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = recall(args);
    assert!(
        out.status.success(),
        "recall {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Desk {
    dir: tempfile::TempDir,
    dataset: PathBuf,
    model: PathBuf,
}

impl Desk {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn desk() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let dataset = dir.path().join("desk.jsonl");
    let model = dir.path().join("model.json");
    ok(&[
        "build-corpus",
        "--member",
        p(&desk_file("alice29.txt")),
        "--nonmember",
        p(&desk_file("plrabn12.txt")),
        "--chunk-bytes",
        "128",
        "--max-chunks",
        "80",
        "--out",
        p(&dataset),
    ]);
    ok(&[
        "train-lm",
        "--corpus",
        p(&dataset),
        "--format",
        "jsonl",
        "--label",
        "member",
        "--out",
        p(&model),
    ]);
    Desk { dir, dataset, model }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = recall(&["train-lm", "--corpus", p(&missing), "--out", p(&dir.path().join("m.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus not found"));

    let d = desk();
    let out = recall(&[
        "evaluate",
        "--model",
        p(&d.model),
        "--dataset",
        p(&missing),
        "--out-dir",
        p(&d.path("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset not found"));

    let out = recall(&["evaluate", "--dataset", p(&d.dataset), "--out-dir", p(&d.path("out"))]);
    assert_eq!(out.status.code(), Some(2), "no backend given");

    let out = recall(&[
        "evaluate",
        "--model",
        p(&d.model),
        "--dataset",
        p(&d.dataset),
        "--attacks",
        "loss,telepathy",
        "--out-dir",
        p(&d.path("out")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn member_prefix_needs_override() {
    let d = desk();
    let out_dir = d.path("out");
    let base = ["--model", p(&d.model), "--dataset", p(&d.dataset), "--out-dir", p(&out_dir)];
    let out = recall(&[&["evaluate", "--member-prefix"][..], &base].concat());
    assert_eq!(out.status.code(), Some(2));
    let out = recall(&[&["analyze-tokens", "--prefix-membership", "both"][..], &base].concat());
    assert_eq!(out.status.code(), Some(2));
    ok(&[&["evaluate", "--member-prefix", "--allow-member-prefix", "--attacks", "recall"][..], &base].concat());
    let report = read_json(&d.path("out/report.json"));
    assert_eq!(report["prefix"]["membership"], "member");
}

#[test]
fn evaluation_failures_exit_one() {
    let d = desk();
    let broken = d.path("broken.json");
    fs::write(&broken, "{\"format\": \"something else\"}").unwrap();
    let out = recall(&[
        "evaluate",
        "--model",
        p(&broken),
        "--dataset",
        p(&d.dataset),
        "--out-dir",
        p(&d.path("out")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // more pool shots than nonmembers
    let out = recall(&[
        "evaluate",
        "--model",
        p(&d.model),
        "--dataset",
        p(&d.dataset),
        "--pool-size",
        "500",
        "--out-dir",
        p(&d.path("out")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_deterministic() {
    let d = desk();
    let again = d.path("again.json");
    ok(&[
        "train-lm",
        "--corpus",
        p(&d.dataset),
        "--format",
        "jsonl",
        "--label",
        "member",
        "--out",
        p(&again),
    ]);
    assert_eq!(fs::read(&d.model).unwrap(), fs::read(&again).unwrap());

    let text_model = d.path("text.json");
    ok(&[
        "train-lm",
        "--corpus",
        p(&desk_file("alice29.txt")),
        "--chunk-bytes",
        "128",
        "--max-chunks",
        "80",
        "--out",
        p(&text_model),
    ]);
    assert_eq!(fs::read(&d.model).unwrap(), fs::read(&text_model).unwrap());
}

#[test]
fn evaluate_writes_report_scores_and_pool() {
    let d = desk();
    let run = |out: &Path| {
        ok(&[
            "evaluate",
            "--model",
            p(&d.model),
            "--dataset",
            p(&d.dataset),
            "--attacks",
            "loss,recall",
            "--shots",
            "5",
            "--seed",
            "3",
            "--out-dir",
            p(out),
        ])
    };
    let (a, b) = (d.path("a"), d.path("b"));
    let stdout = run(&a);
    run(&b);
    assert!(stdout.contains("recall"));

    let report = read_json(&a.join("report.json"));
    assert_eq!(report["version"], 1);
    let attacks = report["attacks"].as_array().unwrap();
    assert_eq!(attacks.len(), 2);
    for (entry, name) in attacks.iter().zip(["loss", "recall"]) {
        assert_eq!(entry["attack"], name);
        assert_eq!(entry["status"], "ok");
        assert!(entry["auc"].as_f64().unwrap() >= 0.0);
        assert!(entry["tpr_at_1pct"].as_f64().unwrap() >= 0.0);
    }
    assert_eq!(report["config"]["separator"], "\n\n");
    assert_eq!(report["config"]["ll_mode"], "mean");
    assert_eq!(report["dataset_stats"]["pool_size"], 12);
    assert_eq!(
        fs::read(a.join("report.json")).unwrap(),
        fs::read(b.join("report.json")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("scores.csv")).unwrap(),
        fs::read(b.join("scores.csv")).unwrap()
    );

    let scores = fs::read_to_string(a.join("scores.csv")).unwrap();
    let header = scores.lines().next().unwrap();
    assert!(header.contains("loss") && header.contains("recall_n5"), "{header}");
    // 80 members + 80 nonmembers, minus 12 pool nonmembers, minus 12 members for balance
    assert_eq!(scores.lines().count(), 1 + 136);

    let pool = fs::read_to_string(a.join("prefix_pool.jsonl")).unwrap();
    assert_eq!(pool.lines().count(), 12);
    for line in pool.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(!scores.contains(&format!("{},", v["id"].as_str().unwrap())));
    }
}

#[test]
fn split_writes_disjoint_files() {
    let d = desk();
    let out = d.path("split");
    ok(&["split", "--dataset", p(&d.dataset), "--seed", "9", "--out-dir", p(&out)]);
    let ids = |name: &str| -> Vec<String> {
        fs::read_to_string(out.join(name))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["id"].as_str().unwrap().to_string())
            .collect()
    };
    let (pool, eval, removed) = (ids("prefix_pool.jsonl"), ids("eval.jsonl"), ids("removed_members.jsonl"));
    assert_eq!((pool.len(), eval.len(), removed.len()), (12, 136, 12));
    assert!(pool.iter().chain(&removed).all(|id| !eval.contains(id)));
}

#[test]
fn sweep_reports_every_shot_count_and_the_best() {
    let d = desk();
    let out = d.path("sweep");
    let stdout = ok(&[
        "sweep",
        "--model",
        p(&d.model),
        "--dataset",
        p(&d.dataset),
        "--n-max",
        "12",
        "--max-context-tokens",
        "900",
        "--out-dir",
        p(&out),
    ]);
    let report = read_json(&out.join("report.json"));
    let rows = report["sweep"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    let n: Vec<u64> = rows.iter().map(|r| r["n_shots"].as_u64().unwrap()).collect();
    assert_eq!(n, (1..=12).collect::<Vec<_>>());
    assert!(rows.iter().any(|r| r["status"] == "overflow"));
    assert!(rows[0]["status"] == "ok");
    let best = report["sweep"]["best_n_shots"].as_u64().unwrap();
    assert!(rows[best as usize - 1]["status"] == "ok");
    assert!(stdout.contains('*'));
}

#[test]
fn ensemble_command_reports_both_scores() {
    let d = desk();
    let out = d.path("ens");
    ok(&[
        "ensemble",
        "--model",
        p(&d.model),
        "--dataset",
        p(&d.dataset),
        "--shots",
        "8",
        "--groups",
        "4",
        "--out-dir",
        p(&out),
    ]);
    let report = read_json(&out.join("report.json"));
    let names: Vec<&str> = report["attacks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["attack"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["recall", "recall_ensemble"]);
    assert_eq!(report["attacks"][1]["params"]["groups"], 4);
}

#[test]
fn analyze_tokens_writes_four_profiles() {
    let d = desk();
    let out = d.path("tokens");
    ok(&[
        "analyze-tokens",
        "--model",
        p(&d.model),
        "--dataset",
        p(&d.dataset),
        "--prefix-membership",
        "both",
        "--allow-member-prefix",
        "--out-dir",
        p(&out),
    ]);
    let csv = fs::read_to_string(out.join("token_profiles.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "position,condition,mean_delta_ll,n");
    let mut conditions: Vec<String> = lines.map(|l| l.split(',').nth(1).unwrap().to_string()).collect();
    conditions.dedup();
    assert_eq!(conditions, ["M|NM", "NM|NM", "M|M", "NM|M"]);
    let plot = read_json(&out.join("token_profiles.json"));
    assert!(plot.is_object());
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["analysis"]["profiles"].as_array().unwrap().len(), 4);
}

/// Minimal completions server: echoes every prompt character as a token with
/// logprob -1. Records the raw request heads.
fn echo_server() -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let heads = Arc::new(Mutex::new(Vec::new()));
    let seen = heads.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut length = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            if head.is_empty() {
                continue;
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let request: Value = serde_json::from_slice(&body).unwrap();
            let prompt = request["prompt"].as_str().unwrap();
            let (mut tokens, mut offsets) = (Vec::new(), Vec::new());
            for (i, c) in prompt.char_indices() {
                tokens.push(c.to_string());
                offsets.push(prompt[..i].chars().count());
            }
            let logprobs = vec![-1.0; tokens.len()];
            let reply = json!({
                "choices": [{"text": prompt, "logprobs": {
                    "tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets
                }}]
            })
            .to_string();
            let id = head
                .lines()
                .find_map(|l| l.to_ascii_lowercase().strip_prefix("x-request-id:").map(|v| v.trim().to_string()))
                .unwrap_or_default();
            seen.lock().unwrap().push(head);
            write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\nx-request-id: {id}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}"), heads)
}

#[test]
fn remote_backend_marks_minkpp_unsupported() {
    let d = desk();
    let (url, heads) = echo_server();
    let out = d.path("remote");
    let status = Command::new(env!("CARGO_BIN_EXE_recall"))
        .args([
            "evaluate",
            "--remote-url",
            &url,
            "--remote-model",
            "echo",
            "--dataset",
            p(&d.dataset),
            "--attacks",
            "loss,minkpp,recall",
            "--max-in-flight",
            "2",
            "--out-dir",
            p(&out),
        ])
        .env("RECALL_API_KEY", "sk-secret-value")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report_text = fs::read_to_string(out.join("report.json")).unwrap();
    assert!(!report_text.contains("sk-secret-value"));
    let report: Value = serde_json::from_str(&report_text).unwrap();
    let minkpp = report["attacks"].as_array().unwrap().iter().find(|a| a["attack"] == "minkpp").unwrap();
    assert_eq!(minkpp["status"], "unsupported");
    assert!(minkpp.get("auc").is_none());
    let loss = report["attacks"].as_array().unwrap().iter().find(|a| a["attack"] == "loss").unwrap();
    assert_eq!(loss["status"], "ok");
    let heads = heads.lock().unwrap();
    assert!(!heads.is_empty());
    assert!(heads
        .iter()
        .all(|h| h.to_ascii_lowercase().contains("authorization: bearer sk-secret-value")));
}
