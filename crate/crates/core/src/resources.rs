//! Pedagogical resources and the evaluation dataset.
//!
//! Four plain-text formats are accepted (UTF-8, blank lines ignored):
//!
//! * dictionary: `headword<TAB>pos<TAB>sense||sense<TAB>example||example<TAB>variant||variant`,
//!   the last two fields optional;
//! * grammar: blocks separated by a `---` line; first line is a
//!   comma-separated list of affix keys, second line the title, the rest is
//!   the body;
//! * corpus: `source<TAB>target`;
//! * dataset: `id<TAB>source<TAB>reference`.
//!
//! Parsed resources are bundled into an immutable [`ResourceBundle`] whose
//! hash is computed over the canonical re-serialization of its contents.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::digest::{sha256_hex, FramedHasher};
use crate::morphology::{FallbackLexicon, LexiconError};

/// Separator between list items inside one dictionary field.
pub const LIST_SEPARATOR: &str = "||";
/// Line that separates blocks in grammar and override files.
pub const BLOCK_SEPARATOR: &str = "---";

#[derive(Debug, Error)]
pub enum ResourceError {
    #[error("{resource} line {line}: {reason}")]
    Malformed {
        resource: &'static str,
        line: usize,
        reason: String,
    },
    #[error("grammar section {ordinal}: {reason}")]
    GrammarSection { ordinal: usize, reason: String },
    #[error("dictionary line {line}: duplicate entry for headword {headword:?}")]
    DuplicateEntry { line: usize, headword: String },
    #[error("duplicate dataset id {0:?}")]
    DuplicateId(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("lexicon: {0}")]
    Lexicon(#[from] LexiconError),
    #[error("bundle manifest: {0}")]
    Manifest(String),
    #[error("bundle hash mismatch: manifest says {expected}, contents hash to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = ResourceError> = std::result::Result<T, E>;

fn is_apostrophe_like(c: char) -> bool {
    matches!(
        c,
        '\u{2019}' // right single quotation mark
            | '\u{2018}' // left single quotation mark
            | '\u{201B}'
            | '\u{02BC}' // modifier letter apostrophe
            | '\u{02BB}'
            | '\u{02BD}'
            | '\u{02B9}'
            | '\u{0060}' // grave accent
            | '\u{00B4}' // acute accent
            | '\u{2032}' // prime
            | '\u{FF07}' // fullwidth apostrophe
    )
}

/// Match-key normalization: NFC, lowercase, apostrophe folding to U+0027 and
/// whitespace collapsing.
///
/// Lowercasing is applied per character and only where the lowercase form is
/// a single character, so the result is never longer than the composed input.
pub fn normalize_text(raw: &str) -> String {
    let lowered: String = raw
        .nfc()
        .map(|c| {
            let mut lower = c.to_lowercase();
            match (lower.next(), lower.next()) {
                (Some(l), None) => l,
                _ => c,
            }
        })
        .collect();
    let folded: String = lowered
        .nfc()
        .map(|c| if is_apostrophe_like(c) { '\'' } else { c })
        .collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub headword: String,
    pub pos: String,
    pub senses: Vec<String>,
    pub examples: Vec<String>,
    pub variants: Vec<String>,
    pub source_id: String,
}

impl DictionaryEntry {
    /// Prompt rendering: `headword. pos senses EJEM: ex1; ex2`.
    pub fn render(&self) -> String {
        let mut out = format!("{}.", self.headword);
        if !self.pos.is_empty() {
            out.push(' ');
            out.push_str(&self.pos);
        }
        for sense in &self.senses {
            out.push(' ');
            out.push_str(sense);
        }
        if !self.examples.is_empty() {
            out.push_str(" EJEM: ");
            out.push_str(&self.examples.join("; "));
        }
        if !self.variants.is_empty() {
            out.push_str(" VAR: ");
            out.push_str(&self.variants.join(", "));
            out.push('.');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSection {
    pub affix_keys: Vec<String>,
    pub title: String,
    pub body: String,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPair {
    pub source_text: String,
    pub target_text: String,
    pub origin: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub item_id: String,
    pub source_text: String,
    pub reference_text: String,
}

fn split_list(field: &str) -> Vec<String> {
    field
        .split(LIST_SEPARATOR)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn read_lines(input: impl BufRead) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for line in input.lines() {
        let mut line = line?;
        if line.ends_with('\r') {
            line.pop();
        }
        lines.push(line);
    }
    Ok(lines)
}

pub fn parse_dictionary(input: impl BufRead) -> Result<Vec<DictionaryEntry>> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in read_lines(input)?.into_iter().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: &str| ResourceError::Malformed {
            resource: "dictionary",
            line: line_no,
            reason: reason.to_owned(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 5 {
            return Err(malformed(&format!(
                "expected 3 to 5 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let headword = normalize_text(fields[0]);
        if headword.is_empty() {
            return Err(malformed("empty headword"));
        }
        let senses = split_list(fields[2]);
        if senses.is_empty() {
            return Err(malformed("entry has no senses"));
        }
        let pos = fields[1].trim().to_owned();
        if !seen.insert((headword.clone(), pos.clone(), senses[0].clone())) {
            return Err(ResourceError::DuplicateEntry {
                line: line_no,
                headword,
            });
        }
        let examples = fields.get(3).map(|f| split_list(f)).unwrap_or_default();
        let variants = fields
            .get(4)
            .map(|f| split_list(f).iter().map(|v| normalize_text(v)).collect())
            .unwrap_or_default();
        entries.push(DictionaryEntry {
            headword,
            pos,
            senses,
            examples,
            variants,
            source_id: format!("dictionary:{}", entries.len() + 1),
        });
    }
    Ok(entries)
}

/// Normalizes an affix key and strips any leading hyphen or dash.
pub fn normalize_affix(raw: &str) -> String {
    normalize_text(raw)
        .trim_start_matches(['-', '\u{2010}', '\u{2011}', '\u{2013}', '\u{2014}'])
        .to_owned()
}

pub fn parse_grammar(input: impl BufRead) -> Result<Vec<GrammarSection>> {
    let lines = read_lines(input)?;
    let mut blocks: Vec<Vec<String>> = vec![Vec::new()];
    for line in lines {
        if line.trim() == BLOCK_SEPARATOR {
            blocks.push(Vec::new());
        } else {
            blocks.last_mut().expect("non-empty").push(line);
        }
    }
    let mut sections = Vec::new();
    for block in blocks {
        let start = block.iter().position(|l| !l.trim().is_empty());
        let Some(start) = start else { continue };
        let ordinal = sections.len() + 1;
        let err = |reason: &str| ResourceError::GrammarSection {
            ordinal,
            reason: reason.to_owned(),
        };
        let block = &block[start..];
        let affix_keys: Vec<String> = block[0]
            .split(',')
            .map(normalize_affix)
            .filter(|k| !k.is_empty())
            .collect();
        if affix_keys.is_empty() {
            return Err(err("missing affix keys"));
        }
        if affix_keys.iter().any(|k| k.chars().any(char::is_whitespace)) {
            return Err(err("affix key contains whitespace"));
        }
        let title = block.get(1).map(|t| t.trim().to_owned()).unwrap_or_default();
        let body_lines: Vec<&str> = block.iter().skip(2).map(|l| l.trim_end()).collect::<Vec<_>>();
        let body = body_lines.join("\n").trim_matches('\n').to_owned();
        if body.trim().is_empty() {
            return Err(err("missing body"));
        }
        sections.push(GrammarSection {
            affix_keys,
            title,
            body,
            source_id: format!("grammar:{ordinal}"),
        });
    }
    Ok(sections)
}

pub fn load_corpus(input: impl BufRead, origin: &str) -> Result<Vec<CorpusPair>> {
    let mut pairs = Vec::new();
    for (i, line) in read_lines(input)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| ResourceError::Malformed {
            resource: "corpus",
            line: i + 1,
            reason,
        };
        let tabs = line.matches('\t').count();
        if tabs != 1 {
            return Err(malformed(format!("expected exactly one tab, found {tabs}")));
        }
        let (source, target) = line.split_once('\t').expect("one tab");
        let (source, target) = (source.trim(), target.trim());
        if source.is_empty() || target.is_empty() {
            return Err(malformed("empty source or target".into()));
        }
        pairs.push(CorpusPair {
            source_text: source.to_owned(),
            target_text: target.to_owned(),
            origin: origin.to_owned(),
            index: pairs.len(),
        });
    }
    Ok(pairs)
}

pub fn load_dataset(input: impl BufRead) -> Result<Vec<DatasetItem>> {
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in read_lines(input)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| ResourceError::Malformed {
            resource: "dataset",
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(malformed(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(malformed("empty field".into()));
        }
        if !ids.insert(fields[0].to_owned()) {
            return Err(ResourceError::DuplicateId(fields[0].to_owned()));
        }
        items.push(DatasetItem {
            item_id: fields[0].to_owned(),
            source_text: fields[1].to_owned(),
            reference_text: fields[2].to_owned(),
        });
    }
    if items.is_empty() {
        return Err(ResourceError::EmptyDataset);
    }
    Ok(items)
}

pub fn serialize_dictionary(entries: &[DictionaryEntry]) -> String {
    entries
        .iter()
        .map(|e| {
            format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.headword,
                e.pos,
                e.senses.join(LIST_SEPARATOR),
                e.examples.join(LIST_SEPARATOR),
                e.variants.join(LIST_SEPARATOR)
            )
        })
        .collect()
}

pub fn serialize_grammar(sections: &[GrammarSection]) -> String {
    sections
        .iter()
        .map(|s| format!("{}\n{}\n{}\n", s.affix_keys.join(","), s.title, s.body))
        .collect::<Vec<_>>()
        .join(&format!("{BLOCK_SEPARATOR}\n"))
}

pub fn serialize_corpus(pairs: &[CorpusPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("{}\t{}\n", p.source_text, p.target_text))
        .collect()
}

pub fn serialize_dataset(items: &[DatasetItem]) -> String {
    items
        .iter()
        .map(|d| format!("{}\t{}\t{}\n", d.item_id, d.source_text, d.reference_text))
        .collect()
}

pub const DICTIONARY_FILE: &str = "dictionary.tsv";
pub const GRAMMAR_FILE: &str = "grammar.txt";
pub const CORPUS_FILE: &str = "corpus.tsv";
pub const DATASET_FILE: &str = "dataset.tsv";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub bundle_hash: String,
    pub corpus_origin: String,
    /// File name → SHA-256 of its canonical contents.
    pub files: BTreeMap<String, String>,
}

/// Raw resource files for ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcePaths {
    pub dictionary: PathBuf,
    pub grammar: PathBuf,
    pub corpus: PathBuf,
    pub dataset: PathBuf,
    pub lexicon: Option<PathBuf>,
}

impl SourcePaths {
    /// The conventional file names inside one directory.
    pub fn in_dir(dir: &Path) -> Self {
        let lexicon = dir.join(LEXICON_FILE);
        Self {
            dictionary: dir.join(DICTIONARY_FILE),
            grammar: dir.join(GRAMMAR_FILE),
            corpus: dir.join(CORPUS_FILE),
            dataset: dir.join(DATASET_FILE),
            lexicon: lexicon.exists().then_some(lexicon),
        }
    }
}

/// Immutable retrieval database plus the evaluation dataset.
#[derive(Debug, Clone)]
pub struct ResourceBundle {
    dictionary: Vec<DictionaryEntry>,
    grammar: Vec<GrammarSection>,
    corpus: Vec<CorpusPair>,
    dataset: Vec<DatasetItem>,
    lexicon: FallbackLexicon,
    corpus_origin: String,
    bundle_hash: String,
}

impl ResourceBundle {
    pub fn new(
        dictionary: Vec<DictionaryEntry>,
        grammar: Vec<GrammarSection>,
        corpus: Vec<CorpusPair>,
        dataset: Vec<DatasetItem>,
        lexicon: FallbackLexicon,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(ResourceError::EmptyDataset);
        }
        let corpus_origin = corpus
            .first()
            .map(|p| p.origin.clone())
            .unwrap_or_else(|| "corpus".to_owned());
        let mut bundle = Self {
            dictionary,
            grammar,
            corpus,
            dataset,
            lexicon,
            corpus_origin,
            bundle_hash: String::new(),
        };
        bundle.bundle_hash = bundle.compute_hash();
        Ok(bundle)
    }

    /// Parses and validates raw resource files. The corpus origin is the
    /// corpus file name.
    pub fn from_sources(paths: &SourcePaths) -> Result<Self> {
        let open = |p: &Path| -> Result<io::BufReader<fs::File>> { Ok(io::BufReader::new(fs::File::open(p)?)) };
        let origin = paths
            .corpus
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".to_owned());
        let lexicon = match &paths.lexicon {
            Some(p) => FallbackLexicon::parse(open(p)?)?,
            None => FallbackLexicon::default(),
        };
        Self::new(
            parse_dictionary(open(&paths.dictionary)?)?,
            parse_grammar(open(&paths.grammar)?)?,
            load_corpus(open(&paths.corpus)?, &origin)?,
            load_dataset(open(&paths.dataset)?)?,
            lexicon,
        )
    }

    fn canonical_files(&self) -> Vec<(&'static str, String)> {
        vec![
            (DICTIONARY_FILE, serialize_dictionary(&self.dictionary)),
            (GRAMMAR_FILE, serialize_grammar(&self.grammar)),
            (CORPUS_FILE, serialize_corpus(&self.corpus)),
            (DATASET_FILE, serialize_dataset(&self.dataset)),
            (LEXICON_FILE, self.lexicon.serialize()),
        ]
    }

    fn compute_hash(&self) -> String {
        let mut hasher = FramedHasher::new();
        hasher.part(self.corpus_origin.as_bytes());
        for (name, contents) in self.canonical_files() {
            hasher.part(name.as_bytes()).part(contents.as_bytes());
        }
        hasher.finish()
    }

    pub fn dictionary(&self) -> &[DictionaryEntry] {
        &self.dictionary
    }
    pub fn grammar(&self) -> &[GrammarSection] {
        &self.grammar
    }
    pub fn corpus(&self) -> &[CorpusPair] {
        &self.corpus
    }
    pub fn dataset(&self) -> &[DatasetItem] {
        &self.dataset
    }
    pub fn lexicon(&self) -> &FallbackLexicon {
        &self.lexicon
    }
    pub fn bundle_hash(&self) -> &str {
        &self.bundle_hash
    }

    pub fn item(&self, item_id: &str) -> Option<&DatasetItem> {
        self.dataset.iter().find(|d| d.item_id == item_id)
    }

    /// Writes one canonical file per resource plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<BundleManifest> {
        fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, contents) in self.canonical_files() {
            fs::write(dir.join(name), &contents)?;
            files.insert(name.to_owned(), sha256_hex(contents.as_bytes()));
        }
        let manifest = BundleManifest {
            bundle_hash: self.bundle_hash.clone(),
            corpus_origin: self.corpus_origin.clone(),
            files,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| ResourceError::Manifest(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(manifest)
    }

    /// Loads a bundle directory and checks its contents against the manifest hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
            .map_err(|e| ResourceError::Manifest(e.to_string()))?;
        let open =
            |name: &str| -> Result<io::BufReader<fs::File>> { Ok(io::BufReader::new(fs::File::open(dir.join(name))?)) };
        let lexicon = if dir.join(LEXICON_FILE).exists() {
            FallbackLexicon::parse(open(LEXICON_FILE)?)?
        } else {
            FallbackLexicon::default()
        };
        let mut bundle = Self::new(
            parse_dictionary(open(DICTIONARY_FILE)?)?,
            parse_grammar(open(GRAMMAR_FILE)?)?,
            load_corpus(open(CORPUS_FILE)?, &manifest.corpus_origin)?,
            load_dataset(open(DATASET_FILE)?)?,
            lexicon,
        )?;
        bundle.corpus_origin = manifest.corpus_origin.clone();
        bundle.bundle_hash = bundle.compute_hash();
        if bundle.bundle_hash != manifest.bundle_hash {
            return Err(ResourceError::HashMismatch {
                expected: manifest.bundle_hash,
                actual: bundle.bundle_hash,
            });
        }
        Ok(bundle)
    }
}
