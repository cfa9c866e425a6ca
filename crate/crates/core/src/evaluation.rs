//! Automatic scoring and report tables.
//!
//! BLEU is computed in-process at corpus level: modified n-gram precision for
//! n = 1..4, geometric mean, exponential brevity penalty, no smoothing. Any
//! other metric (BLEURT in practice) runs as an external scorer process.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::promptgen::{enumerate_conditions, PromptCondition, RetrievalMode};
use crate::records::{escape_field, RecordKey};
use crate::subprocess::{self, ProcessError};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} references")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("external scorer: {0}")]
    Scorer(#[from] ProcessError),
    #[error("external scorer returned {got} scores for {expected} inputs")]
    ScoreCount { expected: usize, got: usize },
    #[error("external scorer line {line}: {text:?} is not a number")]
    BadScore { line: usize, text: String },
    #[error("summary file line {line}: {reason}")]
    SummaryFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !is_combining(c)
}

fn is_combining(c: char) -> bool {
    matches!(c as u32, 0x0300..=0x036F | 0x1AB0..=0x1AFF | 0x1DC0..=0x1DFF | 0x20D0..=0x20FF | 0xFE20..=0xFE2F)
}

/// Lowercases and splits punctuation into separate tokens.
pub fn tokenize_eval(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.nfc().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Sufficient statistics for corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub candidate_len: u64,
    pub reference_len: u64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn add_segment(&mut self, candidate: &str, reference: &str) {
        let cand = tokenize_eval(candidate);
        let refs = tokenize_eval(reference);
        self.candidate_len += cand.len() as u64;
        self.reference_len += refs.len() as u64;
        for n in 1..=MAX_ORDER {
            let c = ngram_counts(&cand, n);
            let r = ngram_counts(&refs, n);
            self.totals[n - 1] += c.values().sum::<u64>();
            self.matches[n - 1] += c
                .iter()
                .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }

    /// Orders with no candidate n-grams at all (every segment shorter than n)
    /// have an undefined precision and are left out of the geometric mean.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return if self.reference_len == 0 { 1.0 } else { 0.0 };
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                continue;
            }
            if self.matches[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
            orders += 1;
        }
        let precision = (log_sum / orders as f64).exp();
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        (brevity * precision).clamp(0.0, 1.0)
    }
}

/// Corpus-level BLEU in [0, 1] with one reference per candidate.
pub fn bleu<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R]) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats.add_segment(c.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Bleu,
    External,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Bleu => "BLEU",
            Metric::External => "EXTERNAL",
        })
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BLEU" => Ok(Metric::Bleu),
            "EXTERNAL" | "BLEURT" => Ok(Metric::External),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationScore {
    pub item_id: String,
    pub model_id: String,
    pub condition: PromptCondition,
    pub mode: RetrievalMode,
    pub metric: Metric,
    pub value: f64,
}

/// One candidate/reference pair to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreInput {
    pub key: RecordKey,
    pub candidate: String,
    pub reference: String,
}

/// External scorer process: receives the path of a file with
/// `candidate<TAB>reference` lines as its last argument and prints one
/// decimal per line. Invocations through one handle are serialized.
#[derive(Debug)]
pub struct ExternalScorer {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    lock: Mutex<()>,
}

impl ExternalScorer {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        Self {
            program: program.into(),
            args,
            timeout,
            lock: Mutex::new(()),
        }
    }

    pub fn program(&self) -> &str {
        &self.program
    }

    fn run(&self, inputs: &[ScoreInput]) -> Result<Vec<f64>, EvalError> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut batch = tempfile::NamedTempFile::new()?;
        for input in inputs {
            writeln!(
                batch,
                "{}\t{}",
                escape_field(&input.candidate),
                escape_field(&input.reference)
            )?;
        }
        batch.flush()?;
        let mut args = self.args.clone();
        args.push(batch.path().to_string_lossy().into_owned());
        let out = subprocess::run(&self.program, &args, &[], self.timeout)?;
        let lines: Vec<&str> = out.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != inputs.len() {
            return Err(EvalError::ScoreCount {
                expected: inputs.len(),
                got: lines.len(),
            });
        }
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse::<f64>().map_err(|_| EvalError::BadScore {
                    line: i + 1,
                    text: l.to_string(),
                })
            })
            .collect()
    }
}

/// Scores every input with the external scorer, all or nothing.
pub fn score_external(inputs: &[ScoreInput], scorer: &ExternalScorer) -> Result<Vec<EvaluationScore>, EvalError> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let values = scorer.run(inputs)?;
    Ok(inputs
        .iter()
        .zip(values)
        .map(|(input, value)| EvaluationScore {
            item_id: input.key.item_id.clone(),
            model_id: input.key.model_id.clone(),
            condition: input.key.condition,
            mode: input.key.mode,
            metric: Metric::External,
            value,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model_id: String,
    pub condition: PromptCondition,
    pub mode: RetrievalMode,
    pub metric: Metric,
    /// Item mean for per-item metrics; the corpus statistic for BLEU.
    pub mean: f64,
    pub n: usize,
    /// Items left out because their translation failed.
    #[serde(default)]
    pub excluded: Vec<String>,
}

type CellKey = (String, usize, RetrievalMode, Metric);

fn cell_key(model_id: &str, condition: PromptCondition, mode: RetrievalMode, metric: Metric) -> CellKey {
    (model_id.to_owned(), condition.ordinal(), mode, metric)
}

/// Per-cell arithmetic means. Uses a running mean, so n copies of v average
/// to exactly v.
pub fn aggregate(scores: &[EvaluationScore]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<CellKey, CellSummary> = BTreeMap::new();
    for s in scores {
        let cell = cells
            .entry(cell_key(&s.model_id, s.condition, s.mode, s.metric))
            .or_insert_with(|| CellSummary {
                model_id: s.model_id.clone(),
                condition: s.condition,
                mode: s.mode,
                metric: s.metric,
                mean: 0.0,
                n: 0,
                excluded: Vec::new(),
            });
        cell.n += 1;
        cell.mean += (s.value - cell.mean) / cell.n as f64;
    }
    cells.into_values().collect()
}

/// Corpus BLEU for every (model, condition, mode) cell present in `inputs`.
pub fn corpus_bleu_cells(inputs: &[ScoreInput]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<CellKey, (CellSummary, BleuStats)> = BTreeMap::new();
    for input in inputs {
        let k = &input.key;
        let (cell, stats) = cells
            .entry(cell_key(&k.model_id, k.condition, k.mode, Metric::Bleu))
            .or_insert_with(|| {
                (
                    CellSummary {
                        model_id: k.model_id.clone(),
                        condition: k.condition,
                        mode: k.mode,
                        metric: Metric::Bleu,
                        mean: 0.0,
                        n: 0,
                        excluded: Vec::new(),
                    },
                    BleuStats::default(),
                )
            });
        cell.n += 1;
        stats.add_segment(&input.candidate, &input.reference);
    }
    cells
        .into_values()
        .map(|(mut cell, stats)| {
            cell.mean = stats.score();
            cell
        })
        .collect()
}

/// Records failed items against the matching cells.
pub fn attach_exclusions(summaries: &mut [CellSummary], failed: &[RecordKey]) {
    for cell in summaries.iter_mut() {
        cell.excluded = failed
            .iter()
            .filter(|k| k.model_id == cell.model_id && k.condition == cell.condition && k.mode == cell.mode)
            .map(|k| k.item_id.clone())
            .collect();
        cell.excluded.sort();
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Splits one CSV line, honoring double-quoted fields.
pub fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            (c, _) => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

pub const SUMMARY_CSV_HEADER: &str = "model,condition,mode,metric,mean,n";

/// Machine-readable summary table.
pub fn summaries_to_csv(summaries: &[CellSummary]) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&s.model_id),
            s.condition,
            s.mode,
            s.metric,
            s.mean,
            s.n
        );
    }
    out
}

pub fn summaries_from_csv(text: &str) -> Result<Vec<CellSummary>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: String| EvalError::SummaryFile { line: i + 1, reason };
        if i == 0 {
            if line.trim() != SUMMARY_CSV_HEADER {
                return Err(err(format!("expected header {SUMMARY_CSV_HEADER:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f = split_csv_line(line);
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        out.push(CellSummary {
            model_id: f[0].clone(),
            condition: f[1]
                .parse()
                .map_err(|e: crate::promptgen::UnknownCondition| err(e.to_string()))?,
            mode: f[2].parse().map_err(err)?,
            metric: f[3].parse().map_err(err)?,
            mean: f[4].parse().map_err(|_| err(format!("bad mean {:?}", f[4])))?,
            n: f[5].parse().map_err(|_| err(format!("bad count {:?}", f[5])))?,
            excluded: Vec::new(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportLayout {
    /// Eight condition rows by model columns, automatic retrieval.
    Table1,
    /// Automatic/manual row pairs for grammar, morph and c+g+m.
    Table3,
}

impl FromStr for ReportLayout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table1" => Ok(ReportLayout::Table1),
            "table3" => Ok(ReportLayout::Table3),
            other => Err(format!("unknown layout {other:?} (expected table1 or table3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub text: String,
    pub warnings: Vec<String>,
}

pub const MISSING_CELL: &str = "—";

fn render_grid(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let width = |i: usize| {
        std::iter::once(&header[i])
            .chain(rows.iter().map(|r| &r[i]))
            .map(|s| s.chars().count())
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..cols).map(width).collect();
    let line = |cells: &[String]| {
        let mut out = String::new();
        for (i, cell) in cells.iter().enumerate() {
            let pad = widths[i] - cell.chars().count();
            if i == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str("  ");
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.trim_end().to_owned()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1)));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

/// Aligned text table for one metric. Means are rounded to two decimals
/// here and nowhere else.
pub fn emit_report(summaries: &[CellSummary], layout: ReportLayout, metric: Metric) -> Report {
    let mut warnings = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    let mut cells: HashMap<(&str, PromptCondition, RetrievalMode), f64> = HashMap::new();
    for s in summaries.iter().filter(|s| s.metric == metric) {
        if !models.contains(&s.model_id.as_str()) {
            models.push(&s.model_id);
        }
        cells.insert((&s.model_id, s.condition, s.mode), s.mean);
    }
    if models.is_empty() {
        warnings.push(format!("no {metric} summaries to report"));
    }

    let rows_spec: Vec<(String, PromptCondition, RetrievalMode)> = match layout {
        ReportLayout::Table1 => enumerate_conditions()
            .into_iter()
            .map(|c| (c.label().to_owned(), c, RetrievalMode::Auto))
            .collect(),
        ReportLayout::Table3 => [
            ("g", PromptCondition::GRAMMAR),
            ("m", PromptCondition::MORPH),
            ("cgm", PromptCondition::ALL),
        ]
        .into_iter()
        .flat_map(|(code, c)| {
            [
                (format!("{code}-auto"), c, RetrievalMode::Auto),
                (format!("{code}-man"), c, RetrievalMode::Manual),
            ]
        })
        .collect(),
    };

    let mut header = vec![metric.to_string()];
    header.extend(models.iter().map(|m| m.to_string()));
    let mut rows = Vec::new();
    for (label, cond, mode) in &rows_spec {
        let mut row = vec![label.clone()];
        for model in &models {
            match cells.get(&(*model, *cond, *mode)) {
                Some(v) => row.push(format!("{v:.2}")),
                None => {
                    warnings.push(format!("missing cell {model}/{label}"));
                    row.push(MISSING_CELL.to_owned());
                }
            }
        }
        rows.push(row);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Report {
        text: render_grid(&header, &rows),
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(item: &str, model: &str, cond: PromptCondition, mode: RetrievalMode) -> RecordKey {
        RecordKey {
            item_id: item.into(),
            model_id: model.into(),
            condition: cond,
            mode,
        }
    }

    fn score(item: &str, value: f64) -> EvaluationScore {
        EvaluationScore {
            item_id: item.into(),
            model_id: "m".into(),
            condition: PromptCondition::BASELINE,
            mode: RetrievalMode::Auto,
            metric: Metric::External,
            value,
        }
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize_eval("tú bailas bien"), vec!["tú", "bailas", "bien"]);
        assert_eq!(tokenize_eval("¡Hola!"), vec!["¡", "hola", "!"]);
        assert!(tokenize_eval("").is_empty());
        assert_eq!(tokenize_eval("Sí, claro."), vec!["sí", ",", "claro", "."]);
        // decomposed accent stays inside the word
        assert_eq!(tokenize_eval("tu\u{0301}"), vec!["tú"]);
    }

    #[test]
    fn bleu_edges() {
        let refs = ["tú bailas muy bien hoy", "la falda que tejí es linda"];
        assert_eq!(bleu(&refs, &refs).unwrap(), 1.0);
        assert_eq!(bleu(&["perro gato"], &["tú bailas bien"]).unwrap(), 0.0);
        assert!(matches!(bleu::<&str, &str>(&[], &[]), Err(EvalError::EmptyCorpus)));
        assert!(bleu(&["a"], &["a", "b"]).is_err());
        // short segments: undefined orders are skipped, identity still scores 1
        assert_eq!(bleu(&["sí"], &["sí"]).unwrap(), 1.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        // all n-grams match, candidate 4 tokens vs reference 6
        let v = bleu(&["a b c d"], &["a b c d e f"]).unwrap();
        assert!((v - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn aggregation() {
        let forty: Vec<_> = (0..50).map(|i| score(&format!("q{i}"), 0.4)).collect();
        let cells = aggregate(&forty);
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].mean, 0.4);
        assert_eq!(cells[0].n, 50);
        let three = aggregate(&[score("a", 0.2), score("b", 0.4), score("c", 0.6)]);
        assert!((three[0].mean - 0.4).abs() < 1e-12);
        assert!(aggregate(&[]).is_empty());
    }

    #[test]
    fn exact_mean_for_copies() {
        for v in [0.1, 0.3, 1.0 / 3.0, 0.7, 123.456] {
            let s: Vec<_> = (0..37).map(|i| score(&i.to_string(), v)).collect();
            assert_eq!(aggregate(&s)[0].mean, v);
        }
    }

    #[test]
    fn exclusions() {
        let mut cells = aggregate(&[score("a", 0.5)]);
        attach_exclusions(
            &mut cells,
            &[
                key("z", "m", PromptCondition::BASELINE, RetrievalMode::Auto),
                key("y", "other", PromptCondition::BASELINE, RetrievalMode::Auto),
            ],
        );
        assert_eq!(cells[0].excluded, vec!["z"]);
    }

    #[test]
    fn csv_round_trip() {
        let mut cells = aggregate(&[score("a", 0.25), score("b", 0.5)]);
        cells[0].model_id = "org/model,v2".into();
        let text = summaries_to_csv(&cells);
        assert!(text.starts_with("model,condition,mode,metric,mean,n\n"));
        assert_eq!(summaries_from_csv(&text).unwrap(), cells);
    }

    fn cells_for(models: &[&str], conds: &[PromptCondition], mode: RetrievalMode, value: f64) -> Vec<CellSummary> {
        let mut out = Vec::new();
        for m in models {
            for c in conds {
                out.push(CellSummary {
                    model_id: m.to_string(),
                    condition: *c,
                    mode,
                    metric: Metric::External,
                    mean: value,
                    n: 50,
                    excluded: vec![],
                });
            }
        }
        out
    }

    #[test]
    fn table1_grid() {
        let cells = cells_for(
            &["gpt-3.5", "gpt-4o", "gemini", "llama3"],
            &enumerate_conditions(),
            RetrievalMode::Auto,
            0.456,
        );
        let r = emit_report(&cells, ReportLayout::Table1, Metric::External);
        assert!(r.warnings.is_empty());
        let lines: Vec<&str> = r.text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(
            lines[2].split_whitespace().collect::<Vec<_>>(),
            vec!["base", "0.46", "0.46", "0.46", "0.46"]
        );
        assert!(lines[9].starts_with("c+g+m"));
    }

    #[test]
    fn table3_partial_and_empty() {
        let mut cells = cells_for(&["gpt-4o"], &[PromptCondition::MORPH], RetrievalMode::Auto, 0.54);
        cells.extend(cells_for(
            &["gpt-4o"],
            &[PromptCondition::MORPH],
            RetrievalMode::Manual,
            0.63,
        ));
        let r = emit_report(&cells, ReportLayout::Table3, Metric::External);
        let lines: Vec<&str> = r.text.lines().collect();
        assert_eq!(lines.len(), 8);
        assert!(lines[2].starts_with("g-auto") && lines[2].ends_with(MISSING_CELL));
        assert!(lines[4].starts_with("m-auto") && lines[4].ends_with("0.54"));
        assert!(lines[5].starts_with("m-man") && lines[5].ends_with("0.63"));
        assert_eq!(r.warnings.len(), 4);

        let empty = emit_report(&[], ReportLayout::Table1, Metric::Bleu);
        assert_eq!(empty.warnings, vec!["no BLEU summaries to report"]);
        assert_eq!(empty.text.lines().count(), 10);
        assert!(empty.text.lines().skip(2).all(|l| l.split_whitespace().count() == 1));
    }

    fn script(dir: &tempfile::TempDir, body: &str) -> String {
        use std::os::unix::fs::PermissionsExt;
        let path = dir.path().join("scorer.sh");
        std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path.to_string_lossy().into_owned()
    }

    fn inputs(pairs: &[(&str, &str)]) -> Vec<ScoreInput> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, (c, r))| ScoreInput {
                key: key(&format!("q{i}"), "m", PromptCondition::BASELINE, RetrievalMode::Auto),
                candidate: c.to_string(),
                reference: r.to_string(),
            })
            .collect()
    }

    #[test]
    fn external_scorer_contract() {
        let dir = tempfile::tempdir().unwrap();
        let constant = ExternalScorer::new(
            script(&dir, "while IFS= read -r l; do echo 0.5; done < \"$1\""),
            vec![],
            Duration::from_secs(10),
        );
        let scores = score_external(&inputs(&[("a", "b"), ("c", "d"), ("e\tx", "f")]), &constant).unwrap();
        assert_eq!(scores.iter().map(|s| s.value).collect::<Vec<_>>(), vec![0.5; 3]);
        assert_eq!(scores[2].item_id, "q2");

        let dir2 = tempfile::tempdir().unwrap();
        let short = ExternalScorer::new(script(&dir2, "echo 0.1"), vec![], Duration::from_secs(10));
        assert!(matches!(
            score_external(&inputs(&[("a", "b"), ("c", "d")]), &short),
            Err(EvalError::ScoreCount { expected: 2, got: 1 })
        ));

        let dir3 = tempfile::tempdir().unwrap();
        let exact = ExternalScorer::new(
            script(
                &dir3,
                "awk -F'\\t' '{ if ($1 == $2) print 1.0; else print 0.0 }' \"$1\"",
            ),
            vec![],
            Duration::from_secs(10),
        );
        let s = score_external(&inputs(&[("tú bailas bien", "tú bailas bien"), ("x", "y")]), &exact).unwrap();
        assert_eq!(s[0].value, 1.0);
        assert_eq!(s[1].value, 0.0);

        let dir4 = tempfile::tempdir().unwrap();
        let failing = ExternalScorer::new(script(&dir4, "exit 3"), vec![], Duration::from_secs(10));
        assert!(matches!(
            score_external(&inputs(&[("a", "b")]), &failing),
            Err(EvalError::Scorer(_))
        ));
    }
}
