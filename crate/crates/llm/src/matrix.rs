use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use qurag_core::{PromptBundle, PromptCondition, RecordKey, RetrievalMode, TranslationRecord};
use serde::Serialize;

use crate::backend::Backend;
use crate::client::Client;
use crate::{ClientError, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedRequest {
    pub model_id: String,
    pub endpoint: String,
    pub item_id: String,
    pub condition: PromptCondition,
    pub mode: RetrievalMode,
    pub prompt_hash: String,
}

/// The requests a run would make, in dispatch order.
pub fn plan(prompts: &[PromptBundle], specs: &[ModelSpec]) -> Vec<PlannedRequest> {
    specs
        .iter()
        .flat_map(|s| {
            prompts.iter().map(move |p| PlannedRequest {
                model_id: s.model_id.clone(),
                endpoint: s.endpoint.clone(),
                item_id: p.item_id.clone(),
                condition: p.condition,
                mode: p.mode,
                prompt_hash: p.prompt_hash(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixOutcome {
    /// One record per (spec, prompt), ordered spec-major then by prompt.
    pub records: Vec<TranslationRecord>,
    pub failures: Vec<RecordKey>,
}

/// Translates every prompt with every spec. Specs run side by side; within
/// one spec at most `spec.concurrency` requests are in flight.
pub fn run_matrix(
    prompts: &[PromptBundle],
    specs: &[ModelSpec],
    client: &Client,
) -> Result<MatrixOutcome, ClientError> {
    let backends = specs.iter().map(Backend::from_spec).collect::<Result<Vec<_>, _>>()?;
    let mut ids: Vec<&str> = specs.iter().map(|s| s.model_id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(ClientError::Config(format!("duplicate model_id {}", w[0])));
    }

    let per_spec: Vec<Vec<TranslationRecord>> = thread::scope(|scope| {
        let handles: Vec<_> = specs
            .iter()
            .zip(&backends)
            .map(|(spec, backend)| scope.spawn(move || run_spec(prompts, spec, backend, client)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("translation worker panicked"))
            .collect()
    });

    let records: Vec<TranslationRecord> = per_spec.into_iter().flatten().collect();
    let failures = records.iter().filter(|r| !r.is_ok()).map(|r| r.key()).collect();
    Ok(MatrixOutcome { records, failures })
}

fn run_spec(prompts: &[PromptBundle], spec: &ModelSpec, backend: &Backend, client: &Client) -> Vec<TranslationRecord> {
    let slots: Vec<Mutex<Option<TranslationRecord>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = spec.concurrency.min(prompts.len());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(prompt) = prompts.get(i) else { break };
                let record = client.translate(prompt, spec, backend);
                if let Some(e) = &record.error {
                    log::warn!("{}: {e}", record.key());
                }
                *slots[i].lock().expect("slot lock") = Some(record);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}
