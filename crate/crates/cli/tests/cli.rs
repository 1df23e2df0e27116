use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

fn promptws() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptws"))
}

fn run(args: &[&str]) -> Output {
    promptws().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"seed = 3
label_space = ["ham", "spam"]

[dataset]
path = "comments.csv"

[backend]
kind = "mock"
model_id = "mock-lm"

[[templates]]
template = "Is this spam? [[text]]"
answer_choices = ["Yes", "No"]

[[voters]]
name = "spam"
template = 0
label_map = { Yes = "spam", No = "ham" }

[label_model]
kind = "majority"
"#;

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("id,text\n");
    for i in 0..8 {
        csv.push_str(&format!("{i},comment {i}\n"));
    }
    std::fs::write(dir.path().join("comments.csv"), csv).unwrap();
    let path = dir.path().join("task.toml");
    std::fs::write(&path, config).unwrap();
    (dir, path)
}

fn label(config: &Path, out: &Path) -> Output {
    run(&["label", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn label_then_eval() {
    let (dir, config) = setup(CONFIG);
    let out = dir.path().join("out");
    let o = label(&config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["n_rows"], 8);
    assert_eq!(m["n_lfs"], 1);
    assert_eq!(m["label_model"], "majority");
    assert_eq!(m["model_id"], "mock-lm");
    assert_eq!(m["seed"], 3);
    assert!(std::fs::read_to_string(out.join("votes.csv")).unwrap().starts_with("id,lf_spam\n"));

    let gold = dir.path().join("gold.csv");
    std::fs::write(&gold, "label\n".to_string() + &"spam\n".repeat(8)).unwrap();
    let probs = out.join("probs.csv");
    let votes = out.join("votes.csv");
    let o = run(&[
        "eval",
        "--probs",
        probs.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
        "--votes",
        votes.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = String::from_utf8(o.stdout).unwrap();
    assert!(
        report.contains("rows: 8") && report.contains("accuracy:") && report.contains("vote coverage: 1.0000"),
        "{report}"
    );

    std::fs::write(&gold, "label\nspam\n").unwrap();
    let o = run(&["eval", "--probs", probs.to_str().unwrap(), "--gold", gold.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("8 probability rows but 1 gold labels"), "{}", stderr(&o));
}

#[test]
fn runs_are_deterministic() {
    let (dir, config) = setup(&CONFIG.replace("majority", "naive_bayes"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(label(&config, &a).status.success());
    assert!(label(&config, &b).status.success());
    for f in ["probs.csv", "votes.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_digest_tracks_the_config() {
    let (dir, config) = setup(CONFIG);
    let a = dir.path().join("a");
    assert!(label(&config, &a).status.success());
    std::fs::write(&config, CONFIG.replace("seed = 3", "seed = 4")).unwrap();
    let b = dir.path().join("b");
    assert!(label(&config, &b).status.success());
    assert_ne!(manifest(&a)["config_digest"], manifest(&b)["config_digest"]);
    assert_eq!(manifest(&b)["seed"], 4);
}

#[test]
fn config_errors_exit_2_with_a_line_number() {
    let (dir, config) = setup(&CONFIG.replace("No = \"ham\"", "No = \"eggs\""));
    let o = label(&config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("task.toml:18:") && err.contains("eggs"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn runtime_errors_name_the_stage() {
    let (dir, config) = setup(&CONFIG.replace("comments.csv", "missing.csv"));
    let o = label(&config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset stage failed"), "{}", stderr(&o));
}

#[test]
fn serve_rejects_bad_arguments() {
    let o = run(&["serve", "--backend", "mock", "--bind", "not an address"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["serve", "--backend", "mock", "--bind", "127.0.0.1:0", "--budget", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["serve", "--backend", "http", "--bind", "127.0.0.1:0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server() -> Server {
    let mut child = promptws()
        .args(["serve", "--backend", "mock", "--bind", "127.0.0.1:0", "--model-id", "served"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    Server(child, addr)
}

#[test]
fn serve_probe_and_remote_label() {
    let server = start_server();
    let o = run(&["probe", "--addr", &server.1]);
    assert!(o.status.success(), "{}", stderr(&o));
    let status: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(status["model_id"], "served");

    let remote = CONFIG
        .replace("kind = \"mock\"\nmodel_id = \"mock-lm\"", &format!("kind = \"remote\"\nendpoint = \"{}\"", server.1));
    let (dir, config) = setup(&remote);
    let out = dir.path().join("remote");
    let o = label(&config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(manifest(&out)["model_id"], "served");

    // Same answers as a local mock with the same model id.
    let local = dir.path().join("local.toml");
    std::fs::write(&local, CONFIG.replace("mock-lm", "served")).unwrap();
    let out_local = dir.path().join("local");
    assert!(label(&local, &out_local).status.success());
    assert_eq!(std::fs::read(out.join("probs.csv")).unwrap(), std::fs::read(out_local.join("probs.csv")).unwrap());

    let status: serde_json::Value = serde_json::from_slice(&run(&["probe", "--addr", &server.1]).stdout).unwrap();
    assert!(status["chunks_executed"].as_u64().unwrap() >= 1);
}

#[test]
fn probe_without_server_fails() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert_eq!(run(&["probe", "--addr", &addr]).status.code(), Some(1));
}
