use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use qurag_annotate::{encode_ref, serve, ServerHandle, Store};
use qurag_core::records::{to_jsonl, RECORDS_FILE, RUN_DATASET_FILE};
use qurag_core::{BackendKind, PromptCondition, RecordKey, RecordStatus, RetrievalMode, TranslationRecord};
use serde_json::{json, Value};

const RUN: &str = "run-a";

fn record(item: &str, model: &str, cond: PromptCondition, out: &str) -> TranslationRecord {
    TranslationRecord {
        item_id: item.into(),
        model_id: model.into(),
        condition: cond,
        mode: RetrievalMode::Auto,
        prompt_hash: "0".repeat(64),
        output_text: out.into(),
        latency_ms: 0,
        created_at: "1970-01-01T00:00:00Z".into(),
        backend: BackendKind::Mock,
        status: RecordStatus::Ok,
        error: None,
    }
}

fn write_run(root: &Path) -> Vec<TranslationRecord> {
    let dir = root.join(RUN);
    fs::create_dir_all(&dir).unwrap();
    let records = vec![
        record("q01", "m1", PromptCondition::BASELINE, "tú bailas bien"),
        record("q02", "m1", PromptCondition::BASELINE, "esta casa"),
        record("q01", "m1", PromptCondition::GRAMMAR, "bailas"),
        record("q02", "m1", PromptCondition::GRAMMAR, "la casa de mi hermano"),
    ];
    fs::write(dir.join(RECORDS_FILE), to_jsonl(&records)).unwrap();
    fs::write(
        dir.join(RUN_DATASET_FILE),
        "q01\tqam allinta tusunki\ttú bailas bien\nq02\tkay wasiqa turiypam\testa casa es de mi hermano\n",
    )
    .unwrap();
    records
}

fn start(root: &Path) -> ServerHandle {
    let store = Store::open(root).unwrap();
    serve(Arc::new(store), SocketAddr::from(([127, 0, 0, 1], 0))).unwrap()
}

struct Api {
    base: String,
    agent: ureq::Agent,
}

impl Api {
    fn new(h: &ServerHandle) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            base: format!("http://{}", h.local_addr()),
            agent,
        }
    }

    fn get(&self, path: &str) -> (u16, String) {
        let mut r = self.agent.get(&format!("{}{path}", self.base)).call().unwrap();
        (r.status().as_u16(), r.body_mut().read_to_string().unwrap())
    }

    fn get_json(&self, path: &str) -> Value {
        let (status, body) = self.get(path);
        assert_eq!(status, 200, "{path}: {body}");
        serde_json::from_str(&body).unwrap()
    }

    fn post(&self, path: &str, who: Option<&str>, body: Value) -> (u16, Value) {
        let mut req = self.agent.post(&format!("{}{path}", self.base));
        if let Some(w) = who {
            req = req.header("x-annotator-id", w);
        }
        let mut r = req.send_json(&body).unwrap();
        let status = r.status().as_u16();
        let text = r.body_mut().read_to_string().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }
}

fn key(item: &str, cond: PromptCondition) -> RecordKey {
    RecordKey {
        item_id: item.into(),
        model_id: "m1".into(),
        condition: cond,
        mode: RetrievalMode::Auto,
    }
}

#[test]
fn browse_runs_and_items() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path());
    let h = start(dir.path());
    let api = Api::new(&h);

    let runs = api.get_json("/runs");
    assert_eq!(runs[0]["run_id"], RUN);
    assert_eq!(runs[0]["n_items"], 4);

    let items = api.get_json(&format!("/runs/{RUN}/items"));
    assert_eq!(items.as_array().unwrap().len(), 4);
    let r = items[0]["ref"].as_str().unwrap();
    let item = api.get_json(&format!("/items/{r}"));
    assert_eq!(item["source"], "qam allinta tusunki");
    assert_eq!(item["reference_translation"], "tú bailas bien");
    assert_eq!(item["output"], "tú bailas bien");
    assert_eq!(item["version"], 0);

    assert_eq!(api.get("/runs/nope/items").0, 404);
    assert_eq!(api.get("/items/bm9wZQ").0, 404);
    h.shutdown().unwrap();
}

#[test]
fn writes_are_validated_versioned_and_durable() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path());
    let r = encode_ref(RUN, &key("q01", PromptCondition::GRAMMAR));
    let path = format!("/items/{r}/annotations");
    {
        let h = start(dir.path());
        let api = Api::new(&h);

        let (s, _) = api.post(&path, None, json!({"version": 0, "errors": []}));
        assert_eq!(s, 400, "annotator header is required");

        let four = json!({"version": 0, "errors": [
            {"subtype": "Omission"}, {"subtype": "Addition"},
            {"subtype": "Substitution - Subject"}, {"subtype": "Undertranslation"}]});
        let (s, body) = api.post(&path, Some("ann1"), four);
        assert_eq!(s, 422);
        assert!(body["violations"][0].as_str().unwrap().contains("max 3"));

        let (s, _) = api.post(
            &path,
            Some("ann1"),
            json!({"version": 0, "errors": [{"subtype": "Omission", "span": [0, 99]}]}),
        );
        assert_eq!(s, 422, "span outside output");

        let two = json!({"version": 0, "errors": [
            {"subtype": "Omission", "span": [0, 6], "note": "falta el sujeto"},
            {"subtype": "Target Error - Grammar", "span": [0, 3]}]});
        let (s, body) = api.post(&path, Some("ann1"), two);
        assert_eq!(s, 200, "{body}");
        assert_eq!(body["version"], 1);

        let (s, body) = api.post(&path, Some("ann2"), json!({"version": 0, "errors": []}));
        assert_eq!(s, 409);
        assert_eq!(body["current_version"], 1);

        let qpath = format!("/items/{r}/quality");
        let (s, _) = api.post(&qpath, Some("ann1"), json!({"version": 1, "quality": "None"}));
        assert_eq!(s, 422, "None rating with only accuracy/target errors");
        let (s, body) = api.post(&qpath, Some("ann1"), json!({"version": 1, "quality": "Low"}));
        assert_eq!((s, body["version"].as_u64()), (200, Some(2)));
        h.shutdown().unwrap();
    }

    let h = start(dir.path());
    let api = Api::new(&h);
    let item = api.get_json(&format!("/items/{r}"));
    assert_eq!(item["version"], 2);
    let j = &item["judgments"]["ann1"];
    assert_eq!(j["quality"], "Low");
    assert_eq!(j["errors"].as_array().unwrap().len(), 2);
    assert_eq!(j["errors"][1]["subtype"], "Target Error - Grammar");
    assert_eq!(j["errors"][0]["note"], "falta el sujeto");

    // an edit replaces the annotator's error set
    let (s, _) = api.post(
        &path,
        Some("ann1"),
        json!({"version": 2, "errors": [{"subtype": "Garbled"}]}),
    );
    assert_eq!(s, 200);
    let item = api.get_json(&format!("/items/{r}"));
    assert_eq!(item["judgments"]["ann1"]["errors"].as_array().unwrap().len(), 1);
    assert_eq!(item["judgments"]["ann1"]["quality"], "Low");
    h.shutdown().unwrap();
}

#[test]
fn agreement_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let records = write_run(dir.path());
    let h = start(dir.path());
    let api = Api::new(&h);

    let (s, _) = api.get("/agreement?run=run-a");
    assert_eq!(s, 422, "no ratings yet");

    // both annotators agree on every rating
    let plan = ["High", "Med", "Low"];
    let mut version = std::collections::HashMap::new();
    for (rec, q1) in records.iter().zip(plan) {
        let r = encode_ref(RUN, &rec.key());
        for who in ["ann1", "ann2"] {
            let v = version.entry(r.clone()).or_insert(0u64);
            let (s, body) = api.post(
                &format!("/items/{r}/quality"),
                Some(who),
                json!({"version": *v, "quality": q1}),
            );
            assert_eq!(s, 200, "{body}");
            *v = body["version"].as_u64().unwrap();
        }
    }
    let rep = api.get_json("/agreement?run=run-a");
    assert_eq!(rep["kappa"], 1.0);
    assert_eq!(rep["n_items"], 3);
    assert_eq!(rep["n_annotators"], 2);

    let r = encode_ref(RUN, &records[2].key());
    let (s, _) = api.post(
        &format!("/items/{r}/annotations"),
        Some("ann1"),
        json!({"version": version[&r], "errors": [{"subtype": "Omission"}]}),
    );
    assert_eq!(s, 200);

    let (s, q) = api.get("/export/quality?run=run-a&model=m1");
    assert_eq!(s, 200);
    let lines: Vec<&str> = q.lines().collect();
    assert_eq!(lines[0], "condition,None,Low,Med,High");
    assert_eq!(lines[1], "base,0,0,2,2");
    assert_eq!(lines[3], "g,0,2,0,0");

    let (_, q1) = api.get("/export/quality?run=run-a&annotator=ann1");
    assert!(q1.lines().any(|l| l == "base,0,0,1,1"));

    let (s, e) = api.get("/export/errors?run=run-a&model=m1");
    assert_eq!(s, 200);
    let lines: Vec<&str> = e.lines().collect();
    assert_eq!(lines[0], "error,base,c,g,m,cg,cm,gm,cgm,Total");
    // 6 judgments: 5 error-free, one with an omission
    assert_eq!(lines[1], "None,4,0,1,0,0,0,0,0,5");
    assert!(lines.contains(&"Omission,0,0,1,0,0,0,0,0,1"));
    assert_eq!(*lines.last().unwrap(), "Total,4,0,2,0,0,0,0,0,6");
    h.shutdown().unwrap();
}
