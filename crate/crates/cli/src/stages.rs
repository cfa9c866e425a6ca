use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use qurag_annotate::{Store, StoreError};
use qurag_core::evaluation::{
    aggregate, attach_exclusions, corpus_bleu_cells, emit_report, score_external, summaries_from_csv, summaries_to_csv,
    CellSummary, ExternalScorer, Metric, Report, ReportLayout, ScoreInput,
};
use qurag_core::morphology::{Analyzer, AnalyzerAdapter};
use qurag_core::mqm::AgreementReport;
use qurag_core::promptgen::{build_prompt, PromptOverrides};
use qurag_core::records::{read_jsonl, to_jsonl, PROMPTS_FILE, RECORDS_FILE, RUN_DATASET_FILE};
use qurag_core::resources::{load_dataset, serialize_dataset, BundleManifest};
use qurag_core::retrieval::Retriever;
use qurag_core::{DatasetItem, PromptBundle, ResourceBundle, SourcePaths, TranslationRecord};
use qurag_llm::{plan, run_matrix, Client, ClientError, ModelSpec, RateLimit, ResponseCache, RetryPolicy};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub const PROMPT_TEXT_DIR: &str = "prompts";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCORES_FILE: &str = "scores.jsonl";
pub const EXCLUSIONS_FILE: &str = "excluded.tsv";
pub const DEFAULT_CACHE_FILE: &str = "cache.jsonl";

/// A failed stage together with the process exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Backend(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Failure::Usage(e) | Failure::Data(e) | Failure::Backend(e)) = self;
        write!(f, "{e:#}")
    }
}

pub type StageResult<T> = Result<T, Failure>;

pub(crate) trait Classify<T> {
    fn usage(self) -> StageResult<T>;
    fn data(self) -> StageResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> StageResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn data(self) -> StageResult<T> {
        self.map_err(|e| Failure::Data(e.into()))
    }
}

fn client_failure(e: ClientError) -> Failure {
    match e {
        ClientError::Config(_) => Failure::Usage(e.into()),
        ClientError::Replay { .. } => Failure::Data(e.into()),
        _ => Failure::Backend(e.into()),
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> StageResult<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .data()?;
    }
    fs::write(&path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .data()
}

fn require(run_dir: &Path, name: &str, produced_by: &str) -> StageResult<PathBuf> {
    let path = run_dir.join(name);
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Data(anyhow!(
            "{} not found; run `qurag {produced_by}` for this run directory first",
            path.display()
        )))
    }
}

fn require_stage(manifest: &RunManifest, stage: &str) -> StageResult<()> {
    if manifest.stages.contains_key(stage) {
        Ok(())
    } else {
        Err(Failure::Data(anyhow!(
            "the manifest has no {stage} stage (inputs were rebuilt since); run `qurag {stage}` again"
        )))
    }
}

fn warn_stale(manifest: &RunManifest, run_dir: &Path, stage: &str) {
    for f in manifest.stale_inputs(run_dir, stage) {
        log::warn!("{f} changed after the {stage} stage ran; its outputs may be out of date");
    }
}

pub fn ingest(sources: &SourcePaths, out: &Path) -> StageResult<BundleManifest> {
    let bundle = ResourceBundle::from_sources(sources)
        .context("ingesting resources")
        .data()?;
    bundle
        .save(out)
        .with_context(|| format!("saving bundle to {}", out.display()))
        .data()
}

/// File name of the plain-text copy of one prompt.
pub fn prompt_file_name(p: &PromptBundle) -> String {
    format!("{PROMPT_TEXT_DIR}/{}_{}_{}.txt", p.item_id, p.condition.code(), p.mode)
}

/// Retrieval plus prompt assembly for the configured conditions and modes.
/// `items` restricts the dataset when non-empty.
pub fn build_prompts(cfg: &RunConfig, items: &[String], run_dir: &Path) -> StageResult<Vec<PromptBundle>> {
    cfg.validate().usage()?;
    let bundle_dir = cfg
        .bundle
        .as_deref()
        .ok_or_else(|| Failure::Usage(anyhow!("no bundle given (--bundle or `bundle` in the config)")))?;
    let bundle = ResourceBundle::load(bundle_dir)
        .with_context(|| format!("loading bundle {}", bundle_dir.display()))
        .data()?;
    let overrides = match &cfg.overrides {
        Some(p) => {
            let f = fs::File::open(p)
                .with_context(|| format!("opening {}", p.display()))
                .data()?;
            PromptOverrides::parse(BufReader::new(f))
                .with_context(|| format!("parsing {}", p.display()))
                .data()?
        }
        None => PromptOverrides::new(),
    };
    let selected: Vec<DatasetItem> = if items.is_empty() {
        bundle.dataset().to_vec()
    } else {
        items
            .iter()
            .map(|id| {
                bundle
                    .item(id)
                    .cloned()
                    .ok_or_else(|| Failure::Data(anyhow!("item {id:?} is not in the dataset")))
            })
            .collect::<StageResult<_>>()?
    };
    let analyzer = match &cfg.analyzer {
        Some(a) => Analyzer::External(AnalyzerAdapter::new(
            a.program.clone(),
            a.args.clone(),
            Duration::from_secs(a.timeout_secs),
        )),
        None => Analyzer::Fallback,
    };
    let retriever = Retriever::new(&bundle, cfg.retrieval, analyzer);
    let conditions = cfg.parsed_conditions().usage()?;
    let modes = cfg.parsed_modes().usage()?;

    let mut prompts = Vec::new();
    for item in &selected {
        for &cond in &conditions {
            for &mode in &modes {
                prompts.push(build_prompt(item, cond, mode, &retriever, &overrides).data()?);
            }
        }
    }

    fs::create_dir_all(run_dir)
        .with_context(|| format!("creating {}", run_dir.display()))
        .data()?;
    let text_dir = run_dir.join(PROMPT_TEXT_DIR);
    if text_dir.exists() {
        fs::remove_dir_all(&text_dir)
            .with_context(|| format!("clearing {}", text_dir.display()))
            .data()?;
    }
    let mut outputs = vec![PROMPTS_FILE.to_owned(), RUN_DATASET_FILE.to_owned()];
    write_file(run_dir, PROMPTS_FILE, &to_jsonl(&prompts))?;
    write_file(run_dir, RUN_DATASET_FILE, &serialize_dataset(&selected))?;
    for p in &prompts {
        let name = prompt_file_name(p);
        write_file(run_dir, &name, &p.full_prompt)?;
        outputs.push(name);
    }

    let mut manifest = RunManifest::new(run_dir, bundle.bundle_hash(), cfg.clone());
    manifest.record_stage(run_dir, "build-prompts", &[], &outputs).data()?;
    manifest.save(run_dir).data()?;
    Ok(prompts)
}

fn load_prompts(run_dir: &Path) -> StageResult<(RunManifest, Vec<PromptBundle>)> {
    let path = require(run_dir, PROMPTS_FILE, "build-prompts")?;
    let manifest = RunManifest::load(run_dir).data()?;
    let prompts = read_jsonl(&path)
        .with_context(|| format!("reading {}", path.display()))
        .data()?;
    Ok((manifest, prompts))
}

/// Model specs from the command line or, failing that, the config.
pub fn resolve_models(cfg: &RunConfig, backend: Option<&str>, model_id: Option<&str>) -> StageResult<Vec<ModelSpec>> {
    let specs = match backend {
        Some(b) => {
            let id = match model_id {
                Some(m) => m.to_owned(),
                None if b.starts_with("http") => {
                    return Err(Failure::Usage(anyhow!("--model is required with a URL backend")))
                }
                None => default_model_id(b),
            };
            vec![ModelSpec::new(id, b)]
        }
        None => cfg.models.clone(),
    };
    if specs.is_empty() {
        return Err(Failure::Usage(anyhow!(
            "no models configured (--backend or [[models]] in the config)"
        )));
    }
    Ok(specs)
}

fn default_model_id(endpoint: &str) -> String {
    if let Some(path) = endpoint.strip_prefix(qurag_llm::REPLAY_PREFIX) {
        let stem = Path::new(path).file_stem().map(|s| s.to_string_lossy().into_owned());
        return format!("replay-{}", stem.unwrap_or_default());
    }
    endpoint.replace(':', "-")
}

/// Dry-run listing, one tab-separated request per line.
pub fn plan_text(prompts: &[PromptBundle], specs: &[ModelSpec]) -> String {
    let mut out = String::from("model\tendpoint\titem\tcondition\tmode\tprompt_hash\n");
    for r in plan(prompts, specs) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.model_id, r.endpoint, r.item_id, r.condition, r.mode, r.prompt_hash
        ));
    }
    out
}

#[derive(Debug)]
pub struct TranslateOutcome {
    pub records: Vec<TranslationRecord>,
    pub network_requests: u64,
}

pub fn translate(cfg: &RunConfig, specs: &[ModelSpec], run_dir: &Path) -> StageResult<TranslateOutcome> {
    let (mut manifest, prompts) = load_prompts(run_dir)?;
    let remote = specs.iter().any(|s| s.endpoint.starts_with("http"));
    let cache = if remote {
        let path = cfg.cache.clone().unwrap_or_else(|| run_dir.join(DEFAULT_CACHE_FILE));
        Some(Arc::new(ResponseCache::open(&path).map_err(client_failure)?))
    } else {
        None
    };
    let client = Client::new(cache, RetryPolicy::default(), RateLimit::per_second(cfg.rate_limit));
    let outcome = run_matrix(&prompts, specs, &client).map_err(client_failure)?;

    write_file(run_dir, RECORDS_FILE, &to_jsonl(&outcome.records))?;
    manifest.config.models = specs.to_vec();
    manifest.config.cache = cfg.cache.clone();
    manifest.config.rate_limit = cfg.rate_limit;
    manifest
        .record_stage(
            run_dir,
            "translate",
            &[PROMPTS_FILE.to_owned()],
            &[RECORDS_FILE.to_owned()],
        )
        .data()?;
    manifest.save(run_dir).data()?;

    let failed = outcome.failures.len();
    if failed > 0 && failed == outcome.records.len() {
        return Err(Failure::Backend(anyhow!("all {failed} translations failed")));
    }
    if failed > 0 {
        log::warn!("{failed} of {} translations failed", outcome.records.len());
    }
    Ok(TranslateOutcome {
        records: outcome.records,
        network_requests: client.network_requests(),
    })
}

fn sort_summaries(s: &mut [CellSummary]) {
    s.sort_by(|a, b| {
        (&a.model_id, a.condition.ordinal(), a.mode, a.metric).cmp(&(
            &b.model_id,
            b.condition.ordinal(),
            b.mode,
            b.metric,
        ))
    });
}

/// Corpus BLEU per cell, plus per-item external scores when a scorer is given.
pub fn evaluate(run_dir: &Path, scorer: Option<&ExternalScorer>) -> StageResult<Vec<CellSummary>> {
    let records_path = require(run_dir, RECORDS_FILE, "translate")?;
    let dataset_path = require(run_dir, RUN_DATASET_FILE, "build-prompts")?;
    let mut manifest = RunManifest::load(run_dir).data()?;
    require_stage(&manifest, "translate")?;
    warn_stale(&manifest, run_dir, "translate");
    let records: Vec<TranslationRecord> = read_jsonl(&records_path)
        .with_context(|| format!("reading {}", records_path.display()))
        .data()?;
    let f = fs::File::open(&dataset_path).data()?;
    let dataset = load_dataset(BufReader::new(f)).data()?;

    let mut inputs = Vec::new();
    let mut failed = Vec::new();
    for r in &records {
        if !r.is_ok() {
            failed.push(r.key());
            continue;
        }
        let item = dataset
            .iter()
            .find(|d| d.item_id == r.item_id)
            .ok_or_else(|| Failure::Data(anyhow!("record for unknown item {:?}", r.item_id)))?;
        inputs.push(ScoreInput {
            key: r.key(),
            candidate: r.output_text.clone(),
            reference: item.reference_text.clone(),
        });
    }

    let mut summaries = corpus_bleu_cells(&inputs);
    let mut outputs = vec![SUMMARY_FILE.to_owned()];
    if let Some(scorer) = scorer {
        let scores = score_external(&inputs, scorer)
            .with_context(|| format!("external scorer {}", scorer.program()))
            .data()?;
        write_file(run_dir, SCORES_FILE, &to_jsonl(&scores))?;
        outputs.push(SCORES_FILE.to_owned());
        summaries.extend(aggregate(&scores));
    }
    attach_exclusions(&mut summaries, &failed);
    sort_summaries(&mut summaries);
    write_file(run_dir, SUMMARY_FILE, &summaries_to_csv(&summaries))?;

    let excl_path = run_dir.join(EXCLUSIONS_FILE);
    if failed.is_empty() {
        if excl_path.exists() {
            fs::remove_file(&excl_path).data()?;
        }
    } else {
        let mut text = String::from("model\tcondition\tmode\titem\n");
        for k in &failed {
            text.push_str(&format!("{}\t{}\t{}\t{}\n", k.model_id, k.condition, k.mode, k.item_id));
        }
        write_file(run_dir, EXCLUSIONS_FILE, &text)?;
        outputs.push(EXCLUSIONS_FILE.to_owned());
        log::warn!("{} failed records excluded from scoring", failed.len());
    }
    manifest
        .record_stage(
            run_dir,
            "evaluate",
            &[RECORDS_FILE.to_owned(), RUN_DATASET_FILE.to_owned()],
            &outputs,
        )
        .data()?;
    manifest.save(run_dir).data()?;
    Ok(summaries)
}

pub fn report_file_name(layout: ReportLayout, metric: Metric) -> String {
    let layout = match layout {
        ReportLayout::Table1 => "table1",
        ReportLayout::Table3 => "table3",
    };
    format!("report_{layout}_{}.txt", metric.to_string().to_lowercase())
}

/// Renders a table from a run's summary file and stores it in the run.
pub fn report(run_dir: &Path, layout: ReportLayout, metric: Metric) -> StageResult<Report> {
    let path = require(run_dir, SUMMARY_FILE, "evaluate")?;
    let text = fs::read_to_string(&path).data()?;
    let summaries = summaries_from_csv(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .data()?;
    let mut manifest = RunManifest::load(run_dir).data()?;
    require_stage(&manifest, "evaluate")?;
    warn_stale(&manifest, run_dir, "evaluate");
    let report = emit_report(&summaries, layout, metric);
    let name = report_file_name(layout, metric);
    write_file(run_dir, &name, &report.text)?;
    manifest
        .record_stage(run_dir, &format!("report-{name}"), &[SUMMARY_FILE.to_owned()], &[name])
        .data()?;
    manifest.save(run_dir).data()?;
    Ok(report)
}

/// Renders a table straight from a summary file outside any run.
pub fn report_from_file(path: &Path, layout: ReportLayout, metric: Metric) -> StageResult<Report> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .data()?;
    let summaries = summaries_from_csv(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .data()?;
    Ok(emit_report(&summaries, layout, metric))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportTable {
    /// Quality counts by condition.
    Quality,
    /// Error counts by subtype and condition.
    Errors,
}

pub fn open_store(runs: &Path) -> StageResult<Store> {
    Store::open(runs)
        .with_context(|| format!("opening runs under {}", runs.display()))
        .data()
}

fn store_failure(e: StoreError) -> Failure {
    match e {
        StoreError::UnknownRun(_) | StoreError::BadRequest(_) => Failure::Usage(e.into()),
        _ => Failure::Data(e.into()),
    }
}

pub fn agreement(store: &Store, run_id: &str) -> StageResult<AgreementReport> {
    store.agreement(run_id).map_err(store_failure)
}

/// Comma-separated export of one annotation table.
pub fn export_table(
    store: &Store,
    run_id: &str,
    table: ExportTable,
    model: Option<&str>,
    annotator: Option<&str>,
) -> StageResult<String> {
    let csv = match (table, annotator) {
        (ExportTable::Quality, Some(a)) => store.quality_table_for(run_id, model, a).map(|t| t.to_csv()),
        (ExportTable::Quality, None) => store.quality_table(run_id, model).map(|t| t.to_csv()),
        (ExportTable::Errors, None) => store.error_table(run_id, model).map(|t| t.to_csv()),
        (ExportTable::Errors, Some(_)) => {
            return Err(Failure::Usage(anyhow!("--annotator applies to the quality table only")))
        }
    };
    csv.map_err(store_failure)
}
