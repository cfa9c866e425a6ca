//! Prompt assembly for the eight context conditions.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::resources::{DatasetItem, BLOCK_SEPARATOR};
use crate::retrieval::{CorpusContext, GrammarContext, MorphContext, Retriever};

pub const CONTEXT_HEADER: &str = "[CONTEXTO]";
pub const TASK_INSTRUCTION: &str =
    "[TAREA] Traduce la siguiente frase del quechua al español. Responde sólo con la traducción:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PromptCondition {
    pub use_corpus: bool,
    pub use_grammar: bool,
    pub use_morph: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown condition code {0:?} (expected one of base, c, g, m, cg, cm, gm, cgm)")]
pub struct UnknownCondition(pub String);

impl PromptCondition {
    pub const BASELINE: Self = Self::new(false, false, false);
    pub const CORPUS: Self = Self::new(true, false, false);
    pub const GRAMMAR: Self = Self::new(false, true, false);
    pub const MORPH: Self = Self::new(false, false, true);
    pub const CORPUS_GRAMMAR: Self = Self::new(true, true, false);
    pub const CORPUS_MORPH: Self = Self::new(true, false, true);
    pub const GRAMMAR_MORPH: Self = Self::new(false, true, true);
    pub const ALL: Self = Self::new(true, true, true);

    pub const fn new(use_corpus: bool, use_grammar: bool, use_morph: bool) -> Self {
        Self {
            use_corpus,
            use_grammar,
            use_morph,
        }
    }

    pub fn is_baseline(&self) -> bool {
        *self == Self::BASELINE
    }

    /// `base`, `c`, `g`, `m`, `cg`, `cm`, `gm` or `cgm`.
    pub fn code(&self) -> &'static str {
        match (self.use_corpus, self.use_grammar, self.use_morph) {
            (false, false, false) => "base",
            (true, false, false) => "c",
            (false, true, false) => "g",
            (false, false, true) => "m",
            (true, true, false) => "cg",
            (true, false, true) => "cm",
            (false, true, true) => "gm",
            (true, true, true) => "cgm",
        }
    }

    /// Row label used in report tables (`c+g+m`).
    pub fn label(&self) -> &'static str {
        match self.code() {
            "cg" => "c+g",
            "cm" => "c+m",
            "gm" => "g+m",
            "cgm" => "c+g+m",
            other => other,
        }
    }

    /// Position in [`enumerate_conditions`].
    pub fn ordinal(&self) -> usize {
        enumerate_conditions()
            .iter()
            .position(|c| c == self)
            .expect("all 8 conditions are enumerated")
    }
}

impl fmt::Display for PromptCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for PromptCondition {
    type Err = UnknownCondition;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let code = s.trim().to_ascii_lowercase().replace('+', "");
        enumerate_conditions()
            .into_iter()
            .find(|c| c.code() == code || (code == "baseline" && c.is_baseline()))
            .ok_or_else(|| UnknownCondition(s.to_owned()))
    }
}

impl Serialize for PromptCondition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for PromptCondition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The eight conditions in report row order.
pub fn enumerate_conditions() -> [PromptCondition; 8] {
    [
        PromptCondition::BASELINE,
        PromptCondition::CORPUS,
        PromptCondition::GRAMMAR,
        PromptCondition::MORPH,
        PromptCondition::CORPUS_GRAMMAR,
        PromptCondition::CORPUS_MORPH,
        PromptCondition::GRAMMAR_MORPH,
        PromptCondition::ALL,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Auto,
    Manual,
}

impl RetrievalMode {
    pub fn code(&self) -> &'static str {
        match self {
            RetrievalMode::Auto => "auto",
            RetrievalMode::Manual => "manual",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "auto" => Ok(RetrievalMode::Auto),
            "manual" | "man" => Ok(RetrievalMode::Manual),
            other => Err(format!("unknown retrieval mode {other:?} (expected auto or manual)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub item_id: String,
    pub condition: PromptCondition,
    pub mode: RetrievalMode,
    pub context_text: String,
    pub task_text: String,
    pub full_prompt: String,
}

impl PromptBundle {
    pub fn prompt_hash(&self) -> String {
        sha256_hex(self.full_prompt.as_bytes())
    }

    /// Source sentence as quoted in the task block.
    pub fn source_text(&self) -> &str {
        self.task_text
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("quechua: "))
            .unwrap_or_default()
    }
}

pub fn render_task(source: &str) -> String {
    format!("{TASK_INSTRUCTION}\nquechua: {source}\nespañol:")
}

/// Context block for the enabled sources, in corpus → grammar → morph order.
/// Empty when every enabled source retrieved nothing.
pub fn render_context(
    cond: PromptCondition,
    corpus: &CorpusContext,
    grammar: &GrammarContext,
    morph: &MorphContext,
) -> String {
    let mut lines: Vec<String> = Vec::new();
    if cond.use_corpus {
        for pair in &corpus.examples {
            lines.push(format!("quechua: {}", pair.source_text));
            lines.push(format!("español: {}", pair.target_text));
        }
    }
    if cond.use_grammar {
        for (affix, section) in &grammar.sections {
            lines.push(format!("{affix}: {}", section.body));
        }
    }
    if cond.use_morph {
        lines.extend(morph.parser_lines.iter().cloned());
        lines.extend(morph.dictionary_entries.iter().cloned());
    }
    if lines.is_empty() {
        return String::new();
    }
    format!("{CONTEXT_HEADER}\n{}", lines.join("\n"))
}

fn compose(context_text: &str, task_text: &str) -> String {
    if context_text.is_empty() {
        task_text.to_owned()
    } else if context_text.starts_with(CONTEXT_HEADER) {
        format!("{context_text}\n\n{task_text}")
    } else {
        format!("{CONTEXT_HEADER}\n{context_text}\n\n{task_text}")
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no manual override for item {item_id:?}, condition {condition}")]
    MissingOverride {
        item_id: String,
        condition: PromptCondition,
    },
    #[error("override file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate override for item {item_id:?}, condition {condition}")]
    Duplicate {
        item_id: String,
        condition: PromptCondition,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hand-curated context texts keyed by (item id, condition).
///
/// File format: a header line `@item_id<TAB>condition-code`, then the
/// context lines verbatim, then a `---` line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptOverrides(BTreeMap<(String, PromptCondition), String>);

impl PromptOverrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item_id: impl Into<String>, cond: PromptCondition, text: impl Into<String>) {
        self.0.insert((item_id.into(), cond), text.into());
    }

    pub fn get(&self, item_id: &str, cond: PromptCondition) -> Option<&str> {
        self.0.get(&(item_id.to_owned(), cond)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parse(input: impl BufRead) -> Result<Self, PromptError> {
        let mut out = Self::new();
        let mut current: Option<(String, PromptCondition, Vec<String>, usize)> = None;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r').to_owned();
            let line_no = i + 1;
            match current.as_mut() {
                None => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let header = line.strip_prefix('@').ok_or_else(|| PromptError::Malformed {
                        line: line_no,
                        reason: "expected an @item_id<TAB>condition header".into(),
                    })?;
                    let (item, cond) = header.split_once('\t').ok_or_else(|| PromptError::Malformed {
                        line: line_no,
                        reason: "header needs a tab between item id and condition".into(),
                    })?;
                    let cond = cond.parse().map_err(|e: UnknownCondition| PromptError::Malformed {
                        line: line_no,
                        reason: e.to_string(),
                    })?;
                    current = Some((item.trim().to_owned(), cond, Vec::new(), line_no));
                }
                Some((item, cond, lines, _)) => {
                    if line == BLOCK_SEPARATOR {
                        let key = (std::mem::take(item), *cond);
                        let text = lines.join("\n");
                        if out.0.insert(key.clone(), text).is_some() {
                            return Err(PromptError::Duplicate {
                                item_id: key.0,
                                condition: key.1,
                            });
                        }
                        current = None;
                    } else {
                        lines.push(line);
                    }
                }
            }
        }
        if let Some((_, _, _, line)) = current {
            return Err(PromptError::Malformed {
                line,
                reason: "block is not terminated by ---".into(),
            });
        }
        Ok(out)
    }

    pub fn serialize(&self) -> String {
        self.0
            .iter()
            .map(|((item, cond), text)| {
                if text.is_empty() {
                    format!("@{item}\t{cond}\n{BLOCK_SEPARATOR}\n")
                } else {
                    format!("@{item}\t{cond}\n{text}\n{BLOCK_SEPARATOR}\n")
                }
            })
            .collect()
    }
}

/// Builds the prompt for one item and condition.
///
/// Automatic mode renders the retrieved contexts; manual mode substitutes the
/// override text verbatim. The baseline never carries context in either mode.
pub fn build_prompt(
    item: &DatasetItem,
    cond: PromptCondition,
    mode: RetrievalMode,
    retriever: &Retriever<'_>,
    overrides: &PromptOverrides,
) -> Result<PromptBundle, PromptError> {
    let task_text = render_task(&item.source_text);
    let context_text = if cond.is_baseline() {
        String::new()
    } else {
        match mode {
            RetrievalMode::Auto => {
                let ctx = retriever.retrieve(&item.source_text);
                for w in &ctx.warnings {
                    log::warn!("{}: {w}", item.item_id);
                }
                render_context(cond, &ctx.corpus, &ctx.grammar, &ctx.morph)
            }
            RetrievalMode::Manual => overrides
                .get(&item.item_id, cond)
                .ok_or_else(|| PromptError::MissingOverride {
                    item_id: item.item_id.clone(),
                    condition: cond,
                })?
                .to_owned(),
        }
    };
    Ok(PromptBundle {
        item_id: item.item_id.clone(),
        condition: cond,
        mode,
        full_prompt: compose(&context_text, &task_text),
        context_text,
        task_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{Analyzer, FallbackLexicon};
    use crate::resources::{load_dataset, ResourceBundle};
    use crate::retrieval::RetrievalConfig;

    #[test]
    fn eight_conditions_in_table_order() {
        let all = enumerate_conditions();
        assert_eq!(all.len(), 8);
        assert!(all[0].is_baseline());
        assert_eq!(all[7], PromptCondition::new(true, true, true));
        let codes: Vec<&str> = all.iter().map(|c| c.code()).collect();
        assert_eq!(codes, vec!["base", "c", "g", "m", "cg", "cm", "gm", "cgm"]);
        let unique: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 8);
        for c in all {
            assert_eq!(c.code().parse::<PromptCondition>().unwrap(), c);
            assert_eq!(c.label().parse::<PromptCondition>().unwrap(), c);
        }
        assert!("xyz".parse::<PromptCondition>().is_err());
    }

    #[test]
    fn task_template() {
        assert_eq!(
            render_task("kay wasiqa turiypam"),
            "[TAREA] Traduce la siguiente frase del quechua al español. Responde sólo con la traducción:\nquechua: kay wasiqa turiypam\nespañol:"
        );
        assert!(render_task("x").contains("\nquechua: x\n"));
        assert!(render_task("x").ends_with("español:"));
    }

    #[test]
    fn empty_contexts_render_nothing() {
        let empty = render_context(
            PromptCondition::ALL,
            &CorpusContext::default(),
            &GrammarContext::default(),
            &MorphContext::default(),
        );
        assert_eq!(empty, "");
        let morph = MorphContext {
            parser_lines: vec!["qam: [PrnPers+2sg]".into()],
            dictionary_entries: vec![],
        };
        assert_eq!(
            render_context(
                PromptCondition::BASELINE,
                &CorpusContext::default(),
                &GrammarContext::default(),
                &morph
            ),
            ""
        );
        assert_eq!(
            render_context(
                PromptCondition::MORPH,
                &CorpusContext::default(),
                &GrammarContext::default(),
                &morph
            ),
            "[CONTEXTO]\nqam: [PrnPers+2sg]"
        );
    }

    #[test]
    fn overrides_round_trip() {
        let text = "@q01\tm\nqam: tú\nallin: bueno\n---\n\n@q02\tcgm\n---\n";
        let o = PromptOverrides::parse(text.as_bytes()).unwrap();
        assert_eq!(o.get("q01", PromptCondition::MORPH), Some("qam: tú\nallin: bueno"));
        assert_eq!(o.get("q02", PromptCondition::ALL), Some(""));
        assert_eq!(PromptOverrides::parse(o.serialize().as_bytes()).unwrap(), o);
        assert!(PromptOverrides::parse("@q01\tm\nunterminated\n".as_bytes()).is_err());
        assert!(PromptOverrides::parse("q01\tm\n---\n".as_bytes()).is_err());
        assert!(PromptOverrides::parse("@q01\tzz\n---\n".as_bytes()).is_err());
    }

    fn bundle() -> ResourceBundle {
        ResourceBundle::new(
            vec![],
            vec![],
            vec![],
            load_dataset(
                "q01\tqam allinta tusunki\ttú bailas bien\nq02\tkay wasiqa turiypam\testa casa es de mi hermano\n"
                    .as_bytes(),
            )
            .unwrap(),
            FallbackLexicon::parse("root\tqam\t[PrnPers+2sg]\n".as_bytes()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn manual_mode_substitutes_override() {
        let b = bundle();
        let r = Retriever::new(&b, RetrievalConfig::default(), Analyzer::Fallback);
        let mut o = PromptOverrides::new();
        o.insert("q01", PromptCondition::MORPH, "X");
        let p = build_prompt(&b.dataset()[0], PromptCondition::MORPH, RetrievalMode::Manual, &r, &o).unwrap();
        assert_eq!(p.context_text, "X");
        assert_eq!(p.full_prompt, format!("[CONTEXTO]\nX\n\n{}", p.task_text));
        let err = build_prompt(&b.dataset()[0], PromptCondition::GRAMMAR, RetrievalMode::Manual, &r, &o).unwrap_err();
        assert_eq!(err.to_string(), "no manual override for item \"q01\", condition g");
    }

    #[test]
    fn baseline_equals_task_in_every_mode() {
        let b = bundle();
        let r = Retriever::new(&b, RetrievalConfig::default(), Analyzer::Fallback);
        let o = PromptOverrides::new();
        for item in b.dataset() {
            for mode in [RetrievalMode::Auto, RetrievalMode::Manual] {
                let p = build_prompt(item, PromptCondition::BASELINE, mode, &r, &o).unwrap();
                assert_eq!(p.full_prompt, render_task(&item.source_text));
                assert_eq!(p.source_text(), item.source_text);
            }
        }
    }
}
