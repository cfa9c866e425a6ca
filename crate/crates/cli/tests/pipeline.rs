use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qurag_annotate::{encode_ref, Store};
use qurag_core::mqm::{Quality, QualityTable};
use qurag_core::records::{read_jsonl, RECORDS_FILE};
use qurag_core::TranslationRecord;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn qurag(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qurag"))
        .args(args)
        .current_dir(cwd)
        .env_remove("QURAG_LOG")
        .output()
        .expect("spawn qurag")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = qurag(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    qurag(args, cwd).status.code().unwrap()
}

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &[
            "ingest",
            "--from",
            fixtures().join("bundle").to_str().unwrap(),
            "--out",
            "bundle",
        ],
        tmp.path(),
    );
    tmp
}

#[test]
fn morph_prompt_for_q01_matches_golden() {
    let tmp = workspace();
    let out = ok(
        &[
            "build-prompts",
            "--bundle",
            "bundle",
            "--condition",
            "m",
            "--item",
            "q01",
            "--run-dir",
            "run",
        ],
        tmp.path(),
    );
    assert_eq!(
        out.trim(),
        Path::new("run").join("prompts/q01_m_auto.txt").display().to_string()
    );
    assert_eq!(
        fs::read(tmp.path().join("run/prompts/q01_m_auto.txt")).unwrap(),
        fs::read(fixtures().join("golden/q01_m.txt")).unwrap()
    );
}

#[test]
fn mock_run_over_two_items() {
    let tmp = workspace();
    let root = tmp.path();
    ok(
        &["build-prompts", "--bundle", "bundle", "--item", "q01", "--item", "q02"],
        root,
    );
    let out = ok(&["translate", "--backend", "mock-identity"], root);
    assert_eq!(out.trim(), "16 records (0 failed), 0 network requests");
    let records: Vec<TranslationRecord> = read_jsonl(&root.join("run").join(RECORDS_FILE)).unwrap();
    assert_eq!(records.len(), 16);
    assert!(records.iter().all(|r| r.model_id == "mock-identity" && r.is_ok()));

    ok(&["evaluate"], root);
    let report = ok(&["report", "--layout", "table1"], root);
    assert_eq!(report.lines().count(), 10);
    assert!(report.lines().nth(2).unwrap().starts_with("base"), "{report}");
    assert_eq!(
        report,
        fs::read_to_string(root.join("run/report_table1_bleu.txt")).unwrap()
    );

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("run/manifest.json")).unwrap()).unwrap();
    for stage in [
        "build-prompts",
        "translate",
        "evaluate",
        "report-report_table1_bleu.txt",
    ] {
        assert!(manifest["stages"].get(stage).is_some(), "{stage} missing from manifest");
    }
    assert!(manifest["stages"]["translate"].get("finished_at").is_none());
}

#[test]
fn dry_run_lists_requests_without_writing_records() {
    let tmp = workspace();
    let root = tmp.path();
    ok(
        &[
            "build-prompts",
            "--bundle",
            "bundle",
            "--item",
            "q03",
            "--condition",
            "base",
            "--condition",
            "cgm",
        ],
        root,
    );
    let plan = ok(&["translate", "--backend", "mock-identity", "--dry-run"], root);
    let lines: Vec<&str> = plan.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("model\tendpoint\titem"));
    assert!(lines[1].starts_with("mock-identity\t"));
    assert!(!root.join("run").join(RECORDS_FILE).exists());
}

#[test]
fn manual_mode_uses_overrides() {
    let tmp = workspace();
    let root = tmp.path();
    let overrides = fixtures().join("overrides.txt");
    ok(
        &[
            "build-prompts",
            "--bundle",
            "bundle",
            "--item",
            "q01",
            "--condition",
            "g",
            "--mode",
            "manual",
            "--mode",
            "auto",
            "--overrides",
            overrides.to_str().unwrap(),
        ],
        root,
    );
    let manual = fs::read_to_string(root.join("run/prompts/q01_g_manual.txt")).unwrap();
    let auto = fs::read_to_string(root.join("run/prompts/q01_g_auto.txt")).unwrap();
    assert!(manual.contains("-nki: sufijo verbal de segunda persona singular del sujeto."));
    assert_ne!(manual, auto);
    assert_eq!(auto, fs::read_to_string(fixtures().join("golden/q01_g.txt")).unwrap());
}

#[test]
fn config_file_drives_build() {
    let tmp = workspace();
    let root = tmp.path();
    fs::write(
        root.join("run.toml"),
        "bundle = \"bundle\"\nconditions = [\"c\"]\n\n[retrieval]\nk = 1\n",
    )
    .unwrap();
    let out = ok(&["build-prompts", "--config", "run.toml", "--item", "q01"], root);
    assert_eq!(out.lines().count(), 1);
    let prompt = fs::read_to_string(root.join("run/prompts/q01_c_auto.txt")).unwrap();
    assert_eq!(
        prompt.lines().filter(|l| l.starts_with("español:")).count(),
        2,
        "one example plus the task line"
    );
}

#[test]
fn exit_codes() {
    let tmp = workspace();
    let root = tmp.path();
    assert_eq!(code(&["--help"], root), 0);
    assert_eq!(code(&["frobnicate"], root), 1);
    assert_eq!(
        code(&["build-prompts", "--bundle", "bundle", "--condition", "xyz"], root),
        1
    );
    assert_eq!(code(&["build-prompts", "--bundle", "missing"], root), 1);
    assert_eq!(code(&["translate", "--backend", "mock-identity"], root), 2);
    assert_eq!(code(&["report"], root), 2);

    ok(
        &[
            "build-prompts",
            "--bundle",
            "bundle",
            "--item",
            "q01",
            "--condition",
            "base",
        ],
        root,
    );
    assert_eq!(
        code(
            &["translate", "--backend", "http://127.0.0.1:9/v1/chat/completions"],
            root
        ),
        1
    );
    let out = Command::new(env!("CARGO_BIN_EXE_qurag"))
        .args([
            "translate",
            "--backend",
            "http://127.0.0.1:9/v1/chat/completions",
            "--model",
            "m",
            "--auth-env",
            "QURAG_TEST_UNSET_TOKEN",
        ])
        .current_dir(root)
        .env_remove("QURAG_TEST_UNSET_TOKEN")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn export_and_agreement_commands() {
    let tmp = workspace();
    let root = tmp.path();
    ok(
        &[
            "build-prompts",
            "--bundle",
            "bundle",
            "--item",
            "q01",
            "--item",
            "q02",
            "--run-dir",
            "runs/r1",
        ],
        root,
    );
    ok(
        &["translate", "--run-dir", "runs/r1", "--backend", "mock-identity"],
        root,
    );

    let records: Vec<TranslationRecord> = read_jsonl(&root.join("runs/r1").join(RECORDS_FILE)).unwrap();
    let store = Store::open(&root.join("runs")).unwrap();
    for (i, rec) in records.iter().enumerate() {
        let r = encode_ref("r1", &rec.key());
        let q = if i % 2 == 0 { Quality::High } else { Quality::Low };
        let v = store.submit(&r, "ana", 0, None, Some(q)).unwrap();
        store.submit(&r, "luis", v, None, Some(q)).unwrap();
    }
    drop(store);

    let csv = ok(&["export", "--runs", "runs", "--run", "r1", "--table", "quality"], root);
    let table = QualityTable::from_csv(&csv).unwrap();
    assert_eq!(table.rows.len(), 8);
    assert!(table.rows.iter().all(|(_, c)| c.total() == 4));

    ok(
        &[
            "export",
            "--runs",
            "runs",
            "--run",
            "r1",
            "--table",
            "quality",
            "--annotator",
            "ana",
            "--out",
            "ana.csv",
        ],
        root,
    );
    let ana = QualityTable::from_csv(&fs::read_to_string(root.join("ana.csv")).unwrap()).unwrap();
    assert!(ana.rows.iter().all(|(_, c)| c.total() == 2));

    let errors = ok(&["export", "--runs", "runs", "--run", "r1", "--table", "errors"], root);
    assert!(errors.starts_with("error,base,c,g,m,cg,cm,gm,cgm,Total\n"), "{errors}");

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["agreement", "--runs", "runs", "--run", "r1"], root)).unwrap();
    assert_eq!(report["kappa"], 1.0);
    assert_eq!(report["n_annotators"], 2);
    assert_eq!(report["n_items"], 16);

    assert_eq!(code(&["agreement", "--runs", "runs", "--run", "nope"], root), 1);
}
