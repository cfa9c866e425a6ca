use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use parking_lot::{Mutex, RwLock};
use qurag_core::mqm::{
    agreement_report, validate_annotations, AgreementError, AgreementReport, ErrorAnnotation, ErrorCountTable,
    ErrorSubtype, Quality, QualityRating, QualityTable, Violation,
};
use qurag_core::records::{read_jsonl, PROMPTS_FILE, RECORDS_FILE, RUN_DATASET_FILE};
use qurag_core::resources::load_dataset;
use qurag_core::{PromptBundle, RecordKey, TranslationRecord};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ANNOTATION_LOG: &str = "annotations.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {reason}")]
    Load { path: String, reason: String },
    #[error("unknown run {0:?}")]
    UnknownRun(String),
    #[error("unknown item reference {0:?}")]
    UnknownItem(String),
    #[error("version conflict: expected {expected}, current {current}")]
    Conflict { expected: u64, current: u64 },
    #[error("{}", .0.iter().map(|v| v.0.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("annotation log {path}: {source}")]
    Log {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Agreement(#[from] AgreementError),
    #[error("{0}")]
    BadRequest(String),
}

/// Opaque, URL-safe identifier of one record within one run.
pub fn encode_ref(run_id: &str, key: &RecordKey) -> String {
    let raw = format!(
        "{run_id}\t{}\t{}\t{}\t{}",
        key.item_id, key.model_id, key.condition, key.mode
    );
    URL_SAFE_NO_PAD.encode(raw.as_bytes())
}

pub fn decode_ref(reference: &str) -> Option<(String, RecordKey)> {
    let bytes = URL_SAFE_NO_PAD.decode(reference).ok()?;
    let raw = String::from_utf8(bytes).ok()?;
    let f: Vec<&str> = raw.split('\t').collect();
    if f.len() != 5 {
        return None;
    }
    Some((
        f[0].to_owned(),
        RecordKey {
            item_id: f[1].to_owned(),
            model_id: f[2].to_owned(),
            condition: f[3].parse().ok()?,
            mode: f[4].parse().ok()?,
        },
    ))
}

/// An error tag as submitted by an annotator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTag {
    #[serde(with = "subtype_name")]
    pub subtype: ErrorSubtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Subtypes travel as their table names; variant names are accepted too.
mod subtype_name {
    use qurag_core::mqm::ErrorSubtype;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &ErrorSubtype, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<ErrorSubtype, D::Error> {
        let raw = String::deserialize(de)?;
        ErrorSubtype::from_name(&raw)
            .or_else(|| ErrorSubtype::ALL.into_iter().find(|s| format!("{s:?}") == raw))
            .ok_or_else(|| de::Error::custom(format!("unknown error subtype {raw:?}")))
    }
}

/// One committed write. Errors and quality are full replacements of the
/// annotator's previous state for the record; `None` leaves that part as is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub run_id: String,
    pub record: RecordKey,
    pub annotator_id: String,
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<Vec<ErrorTag>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<Quality>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub errors: Vec<ErrorTag>,
    pub quality: Option<Quality>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemSummary {
    #[serde(rename = "ref")]
    pub reference: String,
    pub item_id: String,
    pub model_id: String,
    pub condition: String,
    pub mode: String,
    pub version: u64,
    pub annotators: Vec<String>,
    pub failed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemDetail {
    #[serde(rename = "ref")]
    pub reference: String,
    pub run_id: String,
    pub item_id: String,
    pub model_id: String,
    pub condition: String,
    pub mode: String,
    pub source: String,
    pub reference_translation: String,
    pub output: String,
    pub prompt: Option<String>,
    pub version: u64,
    pub judgments: BTreeMap<String, Judgment>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub n_items: usize,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Default)]
struct RecordState {
    version: u64,
    judgments: BTreeMap<String, Judgment>,
}

#[derive(Debug)]
struct Run {
    dir: PathBuf,
    records: Vec<TranslationRecord>,
    index: BTreeMap<RecordKey, usize>,
    sources: BTreeMap<String, (String, String)>,
    prompts: BTreeMap<RecordKey, String>,
}

/// Runs plus their annotation state, rebuilt from the per-run logs.
#[derive(Debug)]
pub struct Store {
    runs: BTreeMap<String, Run>,
    state: RwLock<BTreeMap<(String, RecordKey), RecordState>>,
    logs: Mutex<BTreeMap<String, File>>,
}

fn load_err(path: &Path, reason: impl ToString) -> StoreError {
    StoreError::Load {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

impl Store {
    /// Opens every run directory under `root` (a directory containing
    /// `records.jsonl`, or `root` itself if it is one).
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let mut dirs = Vec::new();
        if root.join(RECORDS_FILE).exists() {
            dirs.push(root.to_owned());
        } else {
            let entries = fs::read_dir(root).map_err(|e| load_err(root, e))?;
            for e in entries {
                let p = e.map_err(|e| load_err(root, e))?.path();
                if p.join(RECORDS_FILE).exists() {
                    dirs.push(p);
                }
            }
            dirs.sort();
        }
        Self::open_runs(&dirs)
    }

    pub fn open_runs(dirs: &[PathBuf]) -> Result<Self, StoreError> {
        let mut runs = BTreeMap::new();
        for dir in dirs {
            let run_id = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .ok_or_else(|| load_err(dir, "run directory has no name"))?;
            let run = load_run(dir)?;
            if runs.insert(run_id.clone(), run).is_some() {
                return Err(load_err(dir, format!("duplicate run id {run_id}")));
            }
        }
        let store = Self {
            runs,
            state: RwLock::new(BTreeMap::new()),
            logs: Mutex::new(BTreeMap::new()),
        };
        store.replay()?;
        Ok(store)
    }

    fn replay(&self) -> Result<(), StoreError> {
        let mut state = self.state.write();
        let mut logs = self.logs.lock();
        for (run_id, run) in &self.runs {
            let path = run.dir.join(ANNOTATION_LOG);
            let log_err = |source| StoreError::Log {
                path: path.display().to_string(),
                source,
            };
            let text = if path.exists() {
                fs::read_to_string(&path).map_err(log_err)?
            } else {
                String::new()
            };
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LogEntry = match serde_json::from_str(line) {
                    Ok(e) => e,
                    Err(e) => {
                        log::warn!("{}:{}: skipping log line: {e}", path.display(), i + 1);
                        continue;
                    }
                };
                apply(&mut state, entry);
            }
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(log_err)?;
            if !text.is_empty() && !text.ends_with('\n') {
                file.write_all(b"\n").map_err(log_err)?;
            }
            logs.insert(run_id.clone(), file);
        }
        Ok(())
    }

    pub fn runs(&self) -> Vec<RunSummary> {
        self.runs
            .iter()
            .map(|(id, run)| {
                let mut models: Vec<String> = run.records.iter().map(|r| r.model_id.clone()).collect();
                models.sort();
                models.dedup();
                RunSummary {
                    run_id: id.clone(),
                    n_items: run.records.len(),
                    models,
                }
            })
            .collect()
    }

    fn run(&self, run_id: &str) -> Result<&Run, StoreError> {
        self.runs
            .get(run_id)
            .ok_or_else(|| StoreError::UnknownRun(run_id.to_owned()))
    }

    pub fn items(&self, run_id: &str) -> Result<Vec<ItemSummary>, StoreError> {
        let run = self.run(run_id)?;
        let state = self.state.read();
        Ok(run
            .records
            .iter()
            .map(|r| {
                let key = r.key();
                let st = state.get(&(run_id.to_owned(), key.clone()));
                ItemSummary {
                    reference: encode_ref(run_id, &key),
                    item_id: key.item_id,
                    model_id: key.model_id,
                    condition: key.condition.to_string(),
                    mode: key.mode.to_string(),
                    version: st.map_or(0, |s| s.version),
                    annotators: st.map_or_else(Vec::new, |s| s.judgments.keys().cloned().collect()),
                    failed: !r.is_ok(),
                }
            })
            .collect())
    }

    fn resolve(&self, reference: &str) -> Result<(String, &Run, &TranslationRecord), StoreError> {
        let unknown = || StoreError::UnknownItem(reference.to_owned());
        let (run_id, key) = decode_ref(reference).ok_or_else(unknown)?;
        let run = self.runs.get(&run_id).ok_or_else(unknown)?;
        let idx = *run.index.get(&key).ok_or_else(unknown)?;
        Ok((run_id, run, &run.records[idx]))
    }

    pub fn item(&self, reference: &str) -> Result<ItemDetail, StoreError> {
        let (run_id, run, record) = self.resolve(reference)?;
        let key = record.key();
        let (source, reference_translation) = run.sources.get(&key.item_id).cloned().unwrap_or_default();
        let state = self.state.read();
        let st = state.get(&(run_id.clone(), key.clone())).cloned().unwrap_or_default();
        Ok(ItemDetail {
            reference: reference.to_owned(),
            run_id,
            item_id: key.item_id.clone(),
            model_id: key.model_id.clone(),
            condition: key.condition.to_string(),
            mode: key.mode.to_string(),
            source,
            reference_translation,
            output: record.output_text.clone(),
            prompt: run
                .prompts
                .get(&RecordKey {
                    model_id: String::new(),
                    ..key
                })
                .cloned(),
            version: st.version,
            judgments: st.judgments,
        })
    }

    /// Validates and commits one annotator's update under optimistic
    /// versioning. Returns the new version.
    pub fn submit(
        &self,
        reference: &str,
        annotator_id: &str,
        expected_version: u64,
        errors: Option<Vec<ErrorTag>>,
        quality: Option<Quality>,
    ) -> Result<u64, StoreError> {
        let annotator_id = annotator_id.trim();
        if annotator_id.is_empty() {
            return Err(StoreError::BadRequest("missing annotator id".into()));
        }
        let (run_id, _, record) = self.resolve(reference)?;
        let key = record.key();
        let mut logs = self.logs.lock();
        let mut state = self.state.write();
        let slot = (run_id.clone(), key.clone());
        let current = state.get(&slot).cloned().unwrap_or_default();
        if current.version != expected_version {
            return Err(StoreError::Conflict {
                expected: expected_version,
                current: current.version,
            });
        }
        let mut judgment = current.judgments.get(annotator_id).cloned().unwrap_or_default();
        if let Some(e) = &errors {
            judgment.errors = e.clone();
        }
        if quality.is_some() {
            judgment.quality = quality;
        }
        let anns: Vec<ErrorAnnotation> = judgment
            .errors
            .iter()
            .map(|t| to_annotation(&key, annotator_id, t))
            .collect();
        let violations = validate_annotations(&record.output_text, &anns, judgment.quality);
        if !violations.is_empty() {
            return Err(StoreError::Invalid(violations));
        }
        let entry = LogEntry {
            run_id: run_id.clone(),
            record: key,
            annotator_id: annotator_id.to_owned(),
            version: current.version + 1,
            errors,
            quality,
        };
        let file = logs.get_mut(&run_id).expect("log opened for every run");
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        file.write_all(line.as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|source| StoreError::Log {
                path: self.runs[&run_id].dir.join(ANNOTATION_LOG).display().to_string(),
                source,
            })?;
        let version = entry.version;
        apply(&mut state, entry);
        Ok(version)
    }

    /// All error annotations and quality ratings of a run, optionally for a
    /// single model.
    pub fn judgments(
        &self,
        run_id: &str,
        model: Option<&str>,
    ) -> Result<(Vec<ErrorAnnotation>, Vec<QualityRating>), StoreError> {
        self.run(run_id)?;
        let state = self.state.read();
        let mut anns = Vec::new();
        let mut ratings = Vec::new();
        for ((rid, key), st) in state.iter() {
            if rid != run_id || model.is_some_and(|m| m != key.model_id) {
                continue;
            }
            for (who, j) in &st.judgments {
                anns.extend(j.errors.iter().map(|t| to_annotation(key, who, t)));
                if let Some(q) = j.quality {
                    ratings.push(QualityRating {
                        record: key.clone(),
                        annotator_id: who.clone(),
                        quality: q,
                    });
                }
            }
        }
        Ok((anns, ratings))
    }

    pub fn agreement(&self, run_id: &str) -> Result<AgreementReport, StoreError> {
        let (anns, ratings) = self.judgments(run_id, None)?;
        Ok(agreement_report(&anns, &ratings)?)
    }

    fn single_model(&self, run_id: &str, model: Option<&str>) -> Result<String, StoreError> {
        if let Some(m) = model {
            return Ok(m.to_owned());
        }
        let summary = self.runs().into_iter().find(|r| r.run_id == run_id);
        match summary.map(|s| s.models) {
            Some(models) if models.len() == 1 => Ok(models[0].clone()),
            Some(_) => Err(StoreError::BadRequest("run has several models; pass model=".into())),
            None => Err(StoreError::UnknownRun(run_id.to_owned())),
        }
    }

    /// Quality counts by condition. With several annotators every rating
    /// is counted.
    pub fn quality_table(&self, run_id: &str, model: Option<&str>) -> Result<QualityTable, StoreError> {
        let model = self.single_model(run_id, model)?;
        let (_, ratings) = self.judgments(run_id, Some(&model))?;
        Ok(QualityTable::from_ratings(&ratings))
    }

    pub fn quality_table_for(
        &self,
        run_id: &str,
        model: Option<&str>,
        annotator_id: &str,
    ) -> Result<QualityTable, StoreError> {
        let model = self.single_model(run_id, model)?;
        let (_, ratings) = self.judgments(run_id, Some(&model))?;
        Ok(QualityTable::from_ratings(
            ratings.iter().filter(|r| r.annotator_id == annotator_id),
        ))
    }

    /// Error counts by subtype and condition over rated or tagged records.
    pub fn error_table(&self, run_id: &str, model: Option<&str>) -> Result<ErrorCountTable, StoreError> {
        let model = self.single_model(run_id, model)?;
        let state = self.state.read();
        let mut anns = Vec::new();
        let mut judged = Vec::new();
        for ((rid, key), st) in state.iter() {
            if rid != run_id || key.model_id != model {
                continue;
            }
            for (who, j) in &st.judgments {
                // one None-row contribution per judgment without errors
                let mut k = key.clone();
                k.item_id = format!("{}\u{0}{who}", key.item_id);
                judged.push(k.clone());
                anns.extend(j.errors.iter().map(|t| to_annotation(&k, who, t)));
            }
        }
        Ok(ErrorCountTable::build(&anns, &judged))
    }
}

fn to_annotation(key: &RecordKey, annotator_id: &str, tag: &ErrorTag) -> ErrorAnnotation {
    ErrorAnnotation {
        record: key.clone(),
        annotator_id: annotator_id.to_owned(),
        subtype: tag.subtype,
        span: tag.span,
        note: tag.note.clone(),
    }
}

fn apply(state: &mut BTreeMap<(String, RecordKey), RecordState>, entry: LogEntry) {
    let st = state.entry((entry.run_id, entry.record)).or_default();
    st.version = st.version.max(entry.version);
    let j = st.judgments.entry(entry.annotator_id).or_default();
    if let Some(e) = entry.errors {
        j.errors = e;
    }
    if entry.quality.is_some() {
        j.quality = entry.quality;
    }
}

fn load_run(dir: &Path) -> Result<Run, StoreError> {
    let records_path = dir.join(RECORDS_FILE);
    let records: Vec<TranslationRecord> = read_jsonl(&records_path).map_err(|e| load_err(&records_path, e))?;
    let mut index = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if index.insert(r.key(), i).is_some() {
            return Err(load_err(&records_path, format!("duplicate record {}", r.key())));
        }
    }
    let mut sources = BTreeMap::new();
    let dataset_path = dir.join(RUN_DATASET_FILE);
    if dataset_path.exists() {
        let file = fs::File::open(&dataset_path).map_err(|e| load_err(&dataset_path, e))?;
        for item in load_dataset(std::io::BufReader::new(file)).map_err(|e| load_err(&dataset_path, e))? {
            sources.insert(item.item_id, (item.source_text, item.reference_text));
        }
    }
    let mut prompts = BTreeMap::new();
    let prompts_path = dir.join(PROMPTS_FILE);
    if prompts_path.exists() {
        let bundles: Vec<PromptBundle> = read_jsonl(&prompts_path).map_err(|e| load_err(&prompts_path, e))?;
        for p in bundles {
            let key = RecordKey {
                item_id: p.item_id,
                model_id: String::new(),
                condition: p.condition,
                mode: p.mode,
            };
            prompts.insert(key, p.full_prompt);
        }
    }
    Ok(Run {
        dir: dir.to_owned(),
        records,
        index,
        sources,
        prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use qurag_core::{PromptCondition, RetrievalMode};

    #[test]
    fn refs_round_trip() {
        let key = RecordKey {
            item_id: "q01".into(),
            model_id: "org/gpt-4o".into(),
            condition: PromptCondition::CORPUS_MORPH,
            mode: RetrievalMode::Manual,
        };
        let r = encode_ref("run-1", &key);
        assert!(r.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'));
        assert_eq!(decode_ref(&r), Some(("run-1".into(), key)));
        assert_eq!(decode_ref("!!"), None);
        assert_eq!(decode_ref(&URL_SAFE_NO_PAD.encode("a\tb")), None);
    }
}
