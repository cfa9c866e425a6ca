//! Morphological segmentation.
//!
//! Two analyzers produce [`MorphemeAnalysis`] values: a deterministic greedy
//! segmenter driven by a [`FallbackLexicon`], and an adapter for an external
//! analyzer process speaking a line protocol. Every analysis satisfies the
//! coverage invariant: the morph forms, hyphens removed, concatenate to the
//! normalized, punctuation-stripped surface word.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resources::normalize_text;
use crate::subprocess::{self, ProcessError};

pub const UNKNOWN_TAG: &str = "UNK";
pub const VERB_ROOT_TAG: &str = "VRoot";

/// Punctuation removed before segmentation. The ASCII apostrophe is part of
/// Quechua orthography (p'unchay) and is kept.
const PUNCTUATION: &[char] = &[
    '.', ',', ';', ':', '!', '?', '¿', '¡', '"', '(', ')', '[', ']', '«', '»', '“', '”', '…',
];

fn is_hyphen(c: char) -> bool {
    matches!(c, '-' | '\u{2010}' | '\u{2011}' | '\u{2013}' | '\u{2014}')
}

/// Normalized surface with punctuation and hyphens removed: the string an
/// analysis must reproduce.
pub fn segmentation_key(word: &str) -> String {
    normalize_text(word)
        .chars()
        .filter(|c| !PUNCTUATION.contains(c) && !is_hyphen(*c) && !c.is_whitespace())
        .collect()
}

fn clean_form(form: &str) -> String {
    normalize_text(form).trim_matches(is_hyphen).to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Morph {
    pub form: String,
    pub gloss_tags: Vec<String>,
    pub translations: Vec<String>,
}

impl Morph {
    fn unknown(form: String) -> Self {
        Self {
            form,
            gloss_tags: vec![UNKNOWN_TAG.to_owned()],
            translations: Vec::new(),
        }
    }

    pub fn is_verb_root(&self) -> bool {
        self.gloss_tags.iter().any(|t| t == VERB_ROOT_TAG)
    }

    pub fn is_unknown(&self) -> bool {
        self.gloss_tags.len() == 1 && self.gloss_tags[0] == UNKNOWN_TAG
    }

    /// `form: translation, translation [tag][tag]`
    pub fn parser_line(&self) -> String {
        let tags: String = self.gloss_tags.iter().map(|t| format!("[{t}]")).collect();
        if self.translations.is_empty() {
            format!("{}: {}", self.form, tags)
        } else {
            format!("{}: {} {}", self.form, self.translations.join(", "), tags)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyzerId {
    External,
    Fallback,
}

impl fmt::Display for AnalyzerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnalyzerId::External => "external",
            AnalyzerId::Fallback => "fallback",
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("morphs {morphs:?} do not cover {surface:?} (expected {expected:?})")]
pub struct CoverageError {
    pub surface: String,
    pub expected: String,
    pub morphs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphemeAnalysis {
    surface: String,
    morphs: Vec<Morph>,
    analyzer_id: AnalyzerId,
}

impl MorphemeAnalysis {
    /// Checks the coverage invariant and the per-morph invariants.
    pub fn new(surface: impl Into<String>, morphs: Vec<Morph>, analyzer_id: AnalyzerId) -> Result<Self, CoverageError> {
        let surface = surface.into();
        let expected = segmentation_key(&surface);
        let joined: String = morphs
            .iter()
            .flat_map(|m| m.form.chars())
            .filter(|c| !is_hyphen(*c))
            .collect();
        let well_formed = morphs.iter().all(|m| !m.form.is_empty() && !m.gloss_tags.is_empty());
        if joined != expected || !well_formed {
            return Err(CoverageError {
                surface,
                expected,
                morphs: morphs.into_iter().map(|m| m.form).collect(),
            });
        }
        Ok(Self {
            surface,
            morphs,
            analyzer_id,
        })
    }

    fn unknown(surface: &str, analyzer_id: AnalyzerId) -> Self {
        let key = segmentation_key(surface);
        let morphs = if key.is_empty() {
            Vec::new()
        } else {
            vec![Morph::unknown(key)]
        };
        Self {
            surface: surface.to_owned(),
            morphs,
            analyzer_id,
        }
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }
    pub fn morphs(&self) -> &[Morph] {
        &self.morphs
    }
    pub fn analyzer_id(&self) -> AnalyzerId {
        self.analyzer_id
    }
    pub fn is_unknown(&self) -> bool {
        self.morphs.len() == 1 && self.morphs[0].is_unknown()
    }
    /// Morph forms joined with hyphens, e.g. `ranti-ku-q`.
    pub fn hyphenated(&self) -> String {
        self.morphs
            .iter()
            .map(|m| m.form.as_str())
            .collect::<Vec<_>>()
            .join("-")
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate {kind} {form:?}")]
    Duplicate { kind: &'static str, form: String },
    #[error("empty root form")]
    EmptyRoot,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexEntry {
    pub gloss_tags: Vec<String>,
    pub translations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixEntry {
    pub form: String,
    pub gloss_tags: Vec<String>,
    pub translations: Vec<String>,
}

/// Lexicon for the greedy segmenter.
///
/// File format, one morph per line:
/// `root|suffix<TAB>form<TAB>[tag][tag]<TAB>translation||translation`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FallbackLexicon {
    roots: BTreeMap<String, LexEntry>,
    /// Longest form first; equal lengths in lexical order.
    suffixes: Vec<SuffixEntry>,
}

/// Parses `[a][b]` bracket groups, or whitespace-separated tags when no
/// brackets are present.
pub fn parse_tags(field: &str) -> Vec<String> {
    let field = field.trim();
    if field.contains('[') {
        field
            .split(['[', ']'])
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect()
    } else {
        field.split_whitespace().map(str::to_owned).collect()
    }
}

fn parse_translations(field: &str) -> Vec<String> {
    field
        .split("||")
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

impl FallbackLexicon {
    pub fn new(roots: BTreeMap<String, LexEntry>, mut suffixes: Vec<SuffixEntry>) -> Result<Self, LexiconError> {
        if roots.keys().any(String::is_empty) {
            return Err(LexiconError::EmptyRoot);
        }
        suffixes.sort_by(|a, b| {
            b.form
                .chars()
                .count()
                .cmp(&a.form.chars().count())
                .then_with(|| a.form.cmp(&b.form))
        });
        if let Some(w) = suffixes.windows(2).find(|w| w[0].form == w[1].form) {
            return Err(LexiconError::Duplicate {
                kind: "suffix",
                form: w[0].form.clone(),
            });
        }
        if suffixes.iter().any(|s| s.form.is_empty()) {
            return Err(LexiconError::Malformed {
                line: 0,
                reason: "empty suffix form".into(),
            });
        }
        Ok(Self { roots, suffixes })
    }

    pub fn parse(input: impl BufRead) -> Result<Self, LexiconError> {
        let mut roots = BTreeMap::new();
        let mut suffixes = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let malformed = |reason: &str| LexiconError::Malformed {
                line: i + 1,
                reason: reason.to_owned(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 || fields.len() > 4 {
                return Err(malformed("expected kind, form, tags and optional translations"));
            }
            let form = clean_form(fields[1]);
            if form.is_empty() {
                return Err(malformed("empty form"));
            }
            let gloss_tags = parse_tags(fields[2]);
            if gloss_tags.is_empty() {
                return Err(malformed("morph has no gloss tags"));
            }
            let translations = fields.get(3).map(|f| parse_translations(f)).unwrap_or_default();
            match fields[0].trim() {
                "root" => {
                    let entry = LexEntry {
                        gloss_tags,
                        translations,
                    };
                    if roots.insert(form.clone(), entry).is_some() {
                        return Err(LexiconError::Duplicate { kind: "root", form });
                    }
                }
                "suffix" => suffixes.push(SuffixEntry {
                    form,
                    gloss_tags,
                    translations,
                }),
                other => return Err(malformed(&format!("unknown kind {other:?}"))),
            }
        }
        Self::new(roots, suffixes)
    }

    pub fn serialize(&self) -> String {
        let line = |kind: &str, form: &str, tags: &[String], tr: &[String]| {
            let tags: String = tags.iter().map(|t| format!("[{t}]")).collect();
            format!("{kind}\t{form}\t{tags}\t{}\n", tr.join("||"))
        };
        let mut out = String::new();
        for (form, e) in &self.roots {
            out.push_str(&line("root", form, &e.gloss_tags, &e.translations));
        }
        for s in &self.suffixes {
            out.push_str(&line("suffix", &s.form, &s.gloss_tags, &s.translations));
        }
        out
    }

    pub fn roots(&self) -> &BTreeMap<String, LexEntry> {
        &self.roots
    }

    pub fn suffixes(&self) -> &[SuffixEntry] {
        &self.suffixes
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty() && self.suffixes.is_empty()
    }
}

/// Greedy segmentation: the longest root at the start of the word, then the
/// longest matching suffix at each following position. No backtracking; a
/// word that cannot be fully consumed becomes a single `UNK` morph.
pub fn segment(word: &str, lexicon: &FallbackLexicon) -> MorphemeAnalysis {
    let key = segmentation_key(word);
    let chars: Vec<char> = key.chars().collect();
    if chars.is_empty() {
        return MorphemeAnalysis::unknown(word, AnalyzerId::Fallback);
    }

    let root = (1..=chars.len()).rev().find_map(|len| {
        let prefix: String = chars[..len].iter().collect();
        lexicon.roots.get(&prefix).map(|e| (prefix, e, len))
    });
    let Some((root_form, root_entry, mut pos)) = root else {
        return MorphemeAnalysis::unknown(word, AnalyzerId::Fallback);
    };
    let mut morphs = vec![Morph {
        form: root_form,
        gloss_tags: root_entry.gloss_tags.clone(),
        translations: root_entry.translations.clone(),
    }];

    while pos < chars.len() {
        let rest: String = chars[pos..].iter().collect();
        match lexicon.suffixes.iter().find(|s| rest.starts_with(&s.form)) {
            Some(s) => {
                pos += s.form.chars().count();
                morphs.push(Morph {
                    form: s.form.clone(),
                    gloss_tags: s.gloss_tags.clone(),
                    translations: s.translations.clone(),
                });
            }
            None => return MorphemeAnalysis::unknown(word, AnalyzerId::Fallback),
        }
    }

    MorphemeAnalysis::new(word, morphs, AnalyzerId::Fallback).expect("greedy segmentation consumes exactly the key")
}

/// Whitespace tokens that still contain something after punctuation removal.
pub fn split_words(sentence: &str) -> Vec<&str> {
    sentence
        .split_whitespace()
        .filter(|w| !segmentation_key(w).is_empty())
        .collect()
}

pub fn analyze_sentence(sentence: &str, lexicon: &FallbackLexicon) -> Vec<MorphemeAnalysis> {
    split_words(sentence).into_iter().map(|w| segment(w, lexicon)).collect()
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error(transparent)]
    Process(#[from] ProcessError),
    #[error("protocol: {0}")]
    Protocol(String),
}

/// Handle on an external analyzer.
///
/// Protocol: the program receives one word per line on stdin and prints, for
/// each word, lines `form<TAB>tags<TAB>translation||translation` followed by
/// a blank line. `form: translations [tag][tag]` lines are also accepted.
/// Calls through one handle are serialized.
#[derive(Debug)]
pub struct AnalyzerAdapter {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    lock: Mutex<()>,
}

/// Analyses for one sentence plus any adapter warnings.
#[derive(Debug, Clone, Default)]
pub struct SentenceAnalysis {
    pub analyses: Vec<MorphemeAnalysis>,
    pub warnings: Vec<String>,
}

fn parse_morph_line(line: &str) -> Result<Morph, String> {
    let (form, gloss_tags, translations) = if line.contains('\t') {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() > 3 {
            return Err(format!("too many fields in {line:?}"));
        }
        (
            clean_form(fields[0]),
            parse_tags(fields.get(1).copied().unwrap_or("")),
            fields.get(2).map(|f| parse_translations(f)).unwrap_or_default(),
        )
    } else if let Some((form, rest)) = line.split_once(':') {
        let (text, tags) = match rest.find('[') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, ""),
        };
        let translations = text
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect();
        (clean_form(form), parse_tags(tags), translations)
    } else {
        return Err(format!("unrecognized line {line:?}"));
    };
    if form.is_empty() || gloss_tags.is_empty() {
        return Err(format!("morph without form or tags in {line:?}"));
    }
    Ok(Morph {
        form,
        gloss_tags,
        translations,
    })
}

/// Splits adapter output into per-word morph blocks.
fn parse_blocks(output: &str) -> Result<Vec<Vec<Morph>>, String> {
    let mut blocks = Vec::new();
    let mut current = Vec::new();
    let mut open = false;
    for line in output.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            blocks.push(std::mem::take(&mut current));
            open = false;
        } else {
            current.push(parse_morph_line(line)?);
            open = true;
        }
    }
    if open {
        blocks.push(current);
    }
    Ok(blocks)
}

impl AnalyzerAdapter {
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

    fn invoke(&self, words: &[String]) -> Result<String, AdapterError> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let input: String = words.iter().map(|w| format!("{w}\n")).collect();
        Ok(subprocess::run(
            &self.program,
            &self.args,
            input.as_bytes(),
            self.timeout,
        )?)
    }

    /// Analyzes every word of `sentence` with one adapter invocation. Adapter
    /// failures fall back to [`segment`] and are reported as warnings.
    pub fn analyze_sentence(&self, sentence: &str, lexicon: &FallbackLexicon) -> SentenceAnalysis {
        let words = split_words(sentence);
        if words.is_empty() {
            return SentenceAnalysis::default();
        }
        let keys: Vec<String> = words.iter().map(|w| segmentation_key(w)).collect();
        let fallback_all = |warning: String| SentenceAnalysis {
            analyses: words.iter().map(|w| segment(w, lexicon)).collect(),
            warnings: vec![warning],
        };

        let output = match self.invoke(&keys) {
            Ok(out) => out,
            Err(e) => return fallback_all(format!("analyzer {}: {e}; using fallback", self.program)),
        };
        if output.trim().is_empty() {
            return SentenceAnalysis {
                analyses: words
                    .iter()
                    .map(|w| MorphemeAnalysis::unknown(w, AnalyzerId::External))
                    .collect(),
                warnings: vec![format!("analyzer {} produced no output", self.program)],
            };
        }
        let blocks = match parse_blocks(&output) {
            Ok(b) if b.len() == words.len() => b,
            Ok(b) => {
                return fallback_all(format!(
                    "analyzer {}: expected {} word blocks, got {}; using fallback",
                    self.program,
                    words.len(),
                    b.len()
                ))
            }
            Err(e) => return fallback_all(format!("analyzer {}: {e}; using fallback", self.program)),
        };

        let mut result = SentenceAnalysis::default();
        for (word, morphs) in words.iter().zip(blocks) {
            if morphs.is_empty() {
                result
                    .analyses
                    .push(MorphemeAnalysis::unknown(word, AnalyzerId::External));
                continue;
            }
            match MorphemeAnalysis::new(*word, morphs, AnalyzerId::External) {
                Ok(a) => result.analyses.push(a),
                Err(e) => {
                    result
                        .warnings
                        .push(format!("analyzer {}: {e}; using fallback", self.program));
                    result.analyses.push(segment(word, lexicon));
                }
            }
        }
        result
    }
}

/// Single-word form of [`AnalyzerAdapter::analyze_sentence`].
pub fn analyze_external(
    word: &str,
    adapter: &AnalyzerAdapter,
    lexicon: &FallbackLexicon,
) -> (MorphemeAnalysis, Vec<String>) {
    let SentenceAnalysis { mut analyses, warnings } = adapter.analyze_sentence(word, lexicon);
    let analysis = analyses
        .pop()
        .unwrap_or_else(|| MorphemeAnalysis::unknown(word, AnalyzerId::External));
    (analysis, warnings)
}

/// Morphological analyzer used by the retrieval stage.
#[derive(Debug)]
pub enum Analyzer {
    Fallback,
    External(AnalyzerAdapter),
}

impl Analyzer {
    pub fn analyze(&self, sentence: &str, lexicon: &FallbackLexicon) -> SentenceAnalysis {
        match self {
            Analyzer::Fallback => SentenceAnalysis {
                analyses: analyze_sentence(sentence, lexicon),
                warnings: Vec::new(),
            },
            Analyzer::External(adapter) => adapter.analyze_sentence(sentence, lexicon),
        }
    }
}
