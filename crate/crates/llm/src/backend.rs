use std::collections::HashMap;
use std::fs;
use std::path::Path;

use qurag_core::records::unescape_field;
use qurag_core::BackendKind;

use crate::{ClientError, ModelSpec};

pub const REPLAY_PREFIX: &str = "replay:";
pub const MOCK_IDENTITY: &str = "mock:identity";

#[derive(Debug, Clone)]
pub enum Backend {
    Remote { url: String, token: Option<String> },
    Replay(HashMap<String, String>),
    MockIdentity,
}

impl Backend {
    /// Resolves the endpoint of `spec`. Credentials are read here, so a
    /// missing variable fails before anything is sent.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self, ClientError> {
        spec.validate()?;
        let endpoint = spec.endpoint.trim();
        if endpoint == MOCK_IDENTITY || endpoint == "mock-identity" {
            return Ok(Backend::MockIdentity);
        }
        if let Some(path) = endpoint.strip_prefix(REPLAY_PREFIX) {
            return Ok(Backend::Replay(load_replay(Path::new(path))?));
        }
        if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            let token = match &spec.auth_env {
                Some(var) => match std::env::var(var) {
                    Ok(v) if !v.is_empty() => Some(v),
                    _ => {
                        return Err(ClientError::MissingCredential {
                            model_id: spec.model_id.clone(),
                            var: var.clone(),
                        })
                    }
                },
                None => None,
            };
            return Ok(Backend::Remote {
                url: endpoint.to_owned(),
                token,
            });
        }
        Err(ClientError::Config(format!(
            "{}: unsupported endpoint {endpoint:?}",
            spec.model_id
        )))
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Remote { .. } => BackendKind::Remote,
            Backend::Replay(_) => BackendKind::Replay,
            Backend::MockIdentity => BackendKind::Mock,
        }
    }
}

/// Reads `prompt_hash<TAB>output` lines; outputs use backslash escapes for
/// tabs and newlines.
pub fn load_replay(path: &Path) -> Result<HashMap<String, String>, ClientError> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, reason: String| ClientError::Replay {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (hash, output) = line
            .split_once('\t')
            .ok_or_else(|| err(i + 1, "expected prompt_hash<TAB>output".into()))?;
        if map.insert(hash.trim().to_owned(), unescape_field(output)).is_some() {
            return Err(err(i + 1, format!("duplicate hash {hash}")));
        }
    }
    Ok(map)
}
