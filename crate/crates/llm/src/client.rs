use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use qurag_core::{PromptBundle, RecordStatus, TranslationRecord};
use serde_json::{json, Value};

use crate::backend::Backend;
use crate::cache::{cache_key, CacheEntry, ResponseCache};
use crate::ModelSpec;

/// Timestamp written on records from local backends, which have no
/// meaningful wall-clock time.
pub const LOCAL_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub request_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
            request_timeout: Duration::from_secs(120),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32.checked_shl(retry).unwrap_or(u32::MAX))
            .min(self.max_delay)
    }
}

/// Global minimum spacing between request starts.
#[derive(Debug)]
pub struct RateLimit {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimit {
    pub fn per_second(requests: f64) -> Self {
        let interval = if requests > 0.0 {
            Duration::from_secs_f64(1.0 / requests)
        } else {
            Duration::ZERO
        };
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    pub fn unlimited() -> Self {
        Self::per_second(0.0)
    }

    fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().expect("rate limit lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(String),
}

/// Shared by all worker threads of a run.
#[derive(Debug)]
pub struct Client {
    cache: Option<Arc<ResponseCache>>,
    retry: RetryPolicy,
    rate: RateLimit,
    agent: ureq::Agent,
    network_requests: AtomicU64,
}

impl Client {
    pub fn new(cache: Option<Arc<ResponseCache>>, retry: RetryPolicy, rate: RateLimit) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(retry.request_timeout))
            .build();
        Self {
            cache,
            retry,
            rate,
            agent: config.into(),
            network_requests: AtomicU64::new(0),
        }
    }

    /// HTTP requests sent so far, retries included.
    pub fn network_requests(&self) -> u64 {
        self.network_requests.load(Ordering::SeqCst)
    }

    /// Produces one record. Failures come back as FAILED records rather than
    /// errors so that a matrix keeps going.
    pub fn translate(&self, prompt: &PromptBundle, spec: &ModelSpec, backend: &Backend) -> TranslationRecord {
        let prompt_hash = prompt.prompt_hash();
        let mut record = TranslationRecord {
            item_id: prompt.item_id.clone(),
            model_id: spec.model_id.clone(),
            condition: prompt.condition,
            mode: prompt.mode,
            prompt_hash: prompt_hash.clone(),
            output_text: String::new(),
            latency_ms: 0,
            created_at: LOCAL_TIMESTAMP.to_owned(),
            backend: backend.kind(),
            status: RecordStatus::Ok,
            error: None,
        };
        match backend {
            Backend::MockIdentity => {
                record.output_text = prompt.source_text().to_owned();
            }
            Backend::Replay(map) => match map.get(&prompt_hash) {
                Some(out) => record.output_text = out.clone(),
                None => {
                    record.status = RecordStatus::Failed;
                    record.error = Some(format!("no replay entry for prompt {prompt_hash}"));
                }
            },
            Backend::Remote { url, token } => {
                let key = cache_key(&prompt_hash, spec);
                if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                    record.output_text = hit.output_text;
                    record.latency_ms = hit.latency_ms;
                    record.created_at = hit.created_at;
                    return record;
                }
                let started = Instant::now();
                match self.remote(url, token.as_deref(), spec, &prompt.full_prompt) {
                    Ok(text) => {
                        record.latency_ms = started.elapsed().as_millis() as u64;
                        record.created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
                        record.output_text = text;
                        if let Some(cache) = &self.cache {
                            let entry = CacheEntry {
                                key,
                                prompt_hash,
                                model_id: spec.model_id.clone(),
                                output_text: record.output_text.clone(),
                                latency_ms: record.latency_ms,
                                created_at: record.created_at.clone(),
                            };
                            if let Err(e) = cache.put(entry) {
                                log::error!("{e}");
                            }
                        }
                    }
                    Err(e) => {
                        record.latency_ms = started.elapsed().as_millis() as u64;
                        record.created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
                        record.status = RecordStatus::Failed;
                        record.error = Some(e);
                    }
                }
            }
        }
        record
    }

    fn remote(&self, url: &str, token: Option<&str>, spec: &ModelSpec, prompt: &str) -> Result<String, String> {
        let mut body = json!({
            "model": spec.model_id,
            "messages": [{"role": "user", "content": prompt}],
        });
        for (k, v) in &spec.params {
            body[k] = v.clone();
        }
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                let d = self.retry.delay(attempt - 1);
                log::warn!("{}: retry {attempt} in {d:?} after: {last}", spec.model_id);
                thread::sleep(d);
            }
            self.rate.acquire();
            match self.attempt(url, token, &body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(e) => last = e,
            }
        }
        Err(format!(
            "giving up after {} attempts: {last}",
            self.retry.max_retries + 1
        ))
    }

    fn attempt(&self, url: &str, token: Option<&str>, body: &Value) -> Attempt {
        self.network_requests.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status == 429 || status >= 500 {
            return Attempt::Retry(format!("HTTP {status}: {}", truncate(&text)));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fatal(format!("HTTP {status}: {}", truncate(&text)));
        }
        let json: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(format!("response is not JSON: {e}")),
        };
        match json.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(content) => Attempt::Done(content.to_owned()),
            None => Attempt::Fatal(format!(
                "no choices[0].message.content in response: {}",
                truncate(&text)
            )),
        }
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 200;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_secs(1),
            request_timeout: Duration::from_secs(1),
        };
        let d: Vec<u128> = (0..6).map(|i| p.delay(i).as_millis()).collect();
        assert_eq!(d, vec![100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.delay(40), Duration::from_secs(1));
    }

    #[test]
    fn rate_limit_spaces_requests() {
        let r = RateLimit::per_second(50.0);
        let t = Instant::now();
        for _ in 0..5 {
            r.acquire();
        }
        assert!(t.elapsed() >= Duration::from_millis(75));
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate("abc"), "abc");
        assert_eq!(truncate(&"ñ".repeat(300)).chars().count(), 201);
    }
}
