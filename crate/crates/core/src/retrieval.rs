//! Context retrieval: morph/dictionary lines, grammar sections, and corpus
//! examples ranked by longest common substring.

use std::cmp::Reverse;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::morphology::{Analyzer, MorphemeAnalysis, SentenceAnalysis};
use crate::resources::{normalize_text, CorpusPair, DictionaryEntry, GrammarSection, ResourceBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Number of corpus examples.
    pub k: usize,
    /// Compare normalized text when ranking corpus examples.
    pub normalization: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            normalization: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MorphContext {
    pub parser_lines: Vec<String>,
    pub dictionary_entries: Vec<String>,
}

impl MorphContext {
    pub fn is_empty(&self) -> bool {
        self.parser_lines.is_empty() && self.dictionary_entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarContext {
    /// (matched affix, section)
    pub sections: Vec<(String, GrammarSection)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusContext {
    pub examples: Vec<CorpusPair>,
    pub scores: Vec<usize>,
}

fn prepare(text: &str, normalization: bool) -> Vec<char> {
    if normalization {
        normalize_text(text).chars().collect()
    } else {
        text.chars().collect()
    }
}

/// Longest common substring length by dynamic programming, O(|a|·|b|).
pub fn lcs_chars(a: &[char], b: &[char]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    let mut best = 0;
    for &ca in a {
        for (j, &cb) in b.iter().enumerate() {
            cur[j + 1] = if ca == cb { prev[j] + 1 } else { 0 };
            best = best.max(cur[j + 1]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    best
}

/// Character-level longest common substring of the normalized texts.
pub fn lcs_length(a: &str, b: &str) -> usize {
    lcs_chars(&prepare(a, true), &prepare(b, true))
}

type RankKey = (Reverse<usize>, usize, usize);

/// Higher score first, then shorter compared source, then lower corpus index.
fn rank_key(score: usize, source_len: usize, index: usize) -> RankKey {
    (Reverse(score), source_len, index)
}

fn top_k(mut ranked: Vec<(RankKey, usize)>, corpus: &[CorpusPair], k: usize) -> CorpusContext {
    ranked.sort_unstable();
    ranked.truncate(k);
    CorpusContext {
        scores: ranked.iter().map(|((Reverse(s), _, _), _)| *s).collect(),
        examples: ranked.iter().map(|(_, i)| corpus[*i].clone()).collect(),
    }
}

/// Naive retrieval: LCS against every source sentence. Pairs sharing no
/// character are never returned.
pub fn retrieve_corpus_examples(sentence: &str, corpus: &[CorpusPair], cfg: &RetrievalConfig) -> CorpusContext {
    if cfg.k == 0 {
        return CorpusContext::default();
    }
    let query = prepare(sentence, cfg.normalization);
    let ranked = corpus
        .iter()
        .enumerate()
        .filter_map(|(i, pair)| {
            let source = prepare(&pair.source_text, cfg.normalization);
            let score = lcs_chars(&query, &source);
            (score > 0).then(|| (rank_key(score, source.len(), pair.index), i))
        })
        .collect();
    top_k(ranked, corpus, cfg.k)
}

#[derive(Debug, Clone)]
struct SamState {
    len: usize,
    link: Option<usize>,
    next: BTreeMap<char, usize>,
}

/// Suffix automaton of one string.
#[derive(Debug, Clone)]
pub struct SuffixAutomaton {
    states: Vec<SamState>,
    text_len: usize,
}

impl SuffixAutomaton {
    pub fn new(text: &[char]) -> Self {
        let mut states = Vec::with_capacity(2 * text.len() + 1);
        states.push(SamState {
            len: 0,
            link: None,
            next: BTreeMap::new(),
        });
        let mut last = 0;
        for &c in text {
            let cur = states.len();
            states.push(SamState {
                len: states[last].len + 1,
                link: None,
                next: BTreeMap::new(),
            });
            let mut p = Some(last);
            while let Some(pi) = p {
                if states[pi].next.contains_key(&c) {
                    break;
                }
                states[pi].next.insert(c, cur);
                p = states[pi].link;
            }
            match p {
                None => states[cur].link = Some(0),
                Some(pi) => {
                    let q = states[pi].next[&c];
                    if states[pi].len + 1 == states[q].len {
                        states[cur].link = Some(q);
                    } else {
                        let clone = states.len();
                        states.push(SamState {
                            len: states[pi].len + 1,
                            link: states[q].link,
                            next: states[q].next.clone(),
                        });
                        let mut p = Some(pi);
                        while let Some(pj) = p {
                            if states[pj].next.get(&c) != Some(&q) {
                                break;
                            }
                            states[pj].next.insert(c, clone);
                            p = states[pj].link;
                        }
                        states[q].link = Some(clone);
                        states[cur].link = Some(clone);
                    }
                }
            }
            last = cur;
        }
        Self {
            states,
            text_len: text.len(),
        }
    }

    /// Longest substring of `query` that occurs in the indexed text, O(|query|).
    pub fn longest_common_substring(&self, query: &[char]) -> usize {
        let (mut state, mut len, mut best) = (0usize, 0usize, 0usize);
        for c in query {
            while state != 0 && !self.states[state].next.contains_key(c) {
                state = self.states[state].link.expect("non-root has link");
                len = self.states[state].len;
            }
            if let Some(&next) = self.states[state].next.get(c) {
                state = next;
                len += 1;
            }
            best = best.max(len);
        }
        best
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }
}

/// Accelerated corpus retrieval: one suffix automaton per source sentence,
/// built once. Returns exactly what [`retrieve_corpus_examples`] returns.
#[derive(Debug, Clone)]
pub struct LcsIndex {
    corpus: Vec<CorpusPair>,
    automata: Vec<SuffixAutomaton>,
    normalization: bool,
}

impl LcsIndex {
    pub fn build(corpus: &[CorpusPair], normalization: bool) -> Self {
        let automata = corpus
            .iter()
            .map(|p| SuffixAutomaton::new(&prepare(&p.source_text, normalization)))
            .collect();
        Self {
            corpus: corpus.to_vec(),
            automata,
            normalization,
        }
    }

    pub fn normalization(&self) -> bool {
        self.normalization
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    pub fn retrieve(&self, sentence: &str, k: usize) -> CorpusContext {
        if k == 0 || self.corpus.is_empty() {
            return CorpusContext::default();
        }
        let query = prepare(sentence, self.normalization);
        // Kept sorted; at most k entries.
        let mut best: Vec<(RankKey, usize)> = Vec::with_capacity(k + 1);
        for (i, (pair, sam)) in self.corpus.iter().zip(&self.automata).enumerate() {
            let bound = query.len().min(sam.text_len());
            if bound == 0 {
                continue;
            }
            if best.len() == k {
                let (Reverse(worst), _, _) = best[k - 1].0;
                // A pair whose bound is below the current k-th score cannot
                // enter; an equal bound may still win the tie-break.
                if bound < worst {
                    continue;
                }
            }
            let score = sam.longest_common_substring(&query);
            if score == 0 {
                continue;
            }
            let entry = (rank_key(score, sam.text_len(), pair.index), i);
            let at = best.partition_point(|e| *e < entry);
            if at < k {
                best.insert(at, entry);
                best.truncate(k);
            }
        }
        top_k(best, &self.corpus, k)
    }
}

/// Renders morph lines and looks up dictionary entries whose headword equals
/// a morph form (or, for verb roots, the form plus the infinitive `-y`).
pub fn retrieve_morph_context(analyses: &[MorphemeAnalysis], dictionary: &[DictionaryEntry]) -> MorphContext {
    let mut ctx = MorphContext::default();
    let mut seen = HashSet::new();
    for analysis in analyses {
        for morph in analysis.morphs() {
            ctx.parser_lines.push(morph.parser_line());
            let form = normalize_text(&morph.form);
            let mut keys = vec![form.clone()];
            if morph.is_verb_root() {
                keys.push(format!("{form}y"));
            }
            for key in &keys {
                for (i, entry) in dictionary.iter().enumerate() {
                    if &entry.headword == key && seen.insert(i) {
                        ctx.dictionary_entries.push(entry.render());
                    }
                }
            }
        }
    }
    ctx
}

/// Grammar sections keyed by any non-root morph, deduplicated, in morph order.
pub fn retrieve_grammar_context(analyses: &[MorphemeAnalysis], grammar: &[GrammarSection]) -> GrammarContext {
    let mut ctx = GrammarContext::default();
    let mut seen = HashSet::new();
    for analysis in analyses {
        for morph in analysis.morphs().iter().skip(1) {
            let form = normalize_text(&morph.form);
            for (i, section) in grammar.iter().enumerate() {
                if section.affix_keys.contains(&form) && seen.insert(i) {
                    ctx.sections.push((form.clone(), section.clone()));
                }
            }
        }
    }
    ctx
}

/// All three retrieved payloads for one sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RetrievedContexts {
    pub corpus: CorpusContext,
    pub grammar: GrammarContext,
    pub morph: MorphContext,
    pub analyses: Vec<MorphemeAnalysis>,
    pub warnings: Vec<String>,
}

/// Retrieval over one bundle with a prebuilt LCS index.
pub struct Retriever<'a> {
    bundle: &'a ResourceBundle,
    config: RetrievalConfig,
    index: LcsIndex,
    analyzer: Analyzer,
}

impl<'a> Retriever<'a> {
    pub fn new(bundle: &'a ResourceBundle, config: RetrievalConfig, analyzer: Analyzer) -> Self {
        Self {
            bundle,
            index: LcsIndex::build(bundle.corpus(), config.normalization),
            config,
            analyzer,
        }
    }

    pub fn bundle(&self) -> &ResourceBundle {
        self.bundle
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn retrieve(&self, sentence: &str) -> RetrievedContexts {
        let SentenceAnalysis { analyses, warnings } = self.analyzer.analyze(sentence, self.bundle.lexicon());
        RetrievedContexts {
            corpus: self.index.retrieve(sentence, self.config.k),
            grammar: retrieve_grammar_context(&analyses, self.bundle.grammar()),
            morph: retrieve_morph_context(&analyses, self.bundle.dictionary()),
            analyses,
            warnings,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{analyze_sentence, FallbackLexicon};
    use crate::resources::{load_corpus, parse_dictionary, parse_grammar};
    use proptest::prelude::*;

    /// Enumerates every substring of `a` and checks containment in `b`.
    fn brute_lcs(a: &str, b: &str) -> usize {
        let a: Vec<char> = normalize_text(a).chars().collect();
        let b: String = normalize_text(b);
        let mut best = 0;
        for i in 0..a.len() {
            for j in i + 1..=a.len() {
                let sub: String = a[i..j].iter().collect();
                if j - i > best && b.contains(&sub) {
                    best = j - i;
                }
            }
        }
        best
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_length("", "anything"), 0);
        assert_eq!(lcs_length("abc", "zabcy"), 3);
        assert_eq!(brute_lcs("qam allinta tusunki", "qam allinta takinki"), 13);
        assert_eq!(lcs_length("qam allinta tusunki", "qam allinta takinki"), 13);
        assert_eq!(lcs_length("QAM", "qam"), 3);
    }

    fn corpus(lines: &[&str]) -> Vec<CorpusPair> {
        let text: String = lines.iter().map(|l| format!("{l}\tes\n")).collect();
        load_corpus(text.as_bytes(), "test").unwrap()
    }

    #[test]
    fn ranking_prefers_longest_match() {
        let c = corpus(&[
            "wasiy hatun",
            "mana allinchu kaypi",
            "tusunkichu qam allinta",
            "pukllay",
            "runakuna",
        ]);
        let query = "qam allinta tusunki";
        // brute-force oracle ranking
        let mut oracle: Vec<(usize, usize, usize)> = c
            .iter()
            .map(|p| (brute_lcs(query, &p.source_text), p.source_text.chars().count(), p.index))
            .filter(|s| s.0 > 0)
            .collect();
        oracle.sort_by_key(|&(s, l, i)| (Reverse(s), l, i));
        assert_eq!(oracle[0], (11, 22, 2));
        let ctx = retrieve_corpus_examples(query, &c, &RetrievalConfig::default());
        assert_eq!(ctx.examples.len(), 3);
        assert_eq!(ctx.examples[0].index, 2);
        assert_eq!(ctx.scores, oracle.iter().take(3).map(|o| o.0).collect::<Vec<_>>());
        assert_eq!(
            ctx.examples.iter().map(|p| p.index).collect::<Vec<_>>(),
            oracle.iter().take(3).map(|o| o.2).collect::<Vec<_>>()
        );
    }

    #[test]
    fn ties_break_on_length_then_index() {
        let c = corpus(&["xxabc", "abcx", "yabc", "abc"]);
        let ctx = retrieve_corpus_examples(
            "abc",
            &c,
            &RetrievalConfig {
                k: 4,
                normalization: true,
            },
        );
        assert_eq!(
            ctx.examples.iter().map(|p| p.index).collect::<Vec<_>>(),
            vec![3, 1, 2, 0]
        );
        let index = LcsIndex::build(&c, true);
        assert_eq!(index.retrieve("abc", 4), ctx);
    }

    #[test]
    fn degenerate_corpora() {
        let cfg = RetrievalConfig::default();
        assert!(retrieve_corpus_examples("qam", &[], &cfg).examples.is_empty());
        assert!(LcsIndex::build(&[], true).retrieve("qam", 3).examples.is_empty());
        let single = corpus(&["qam"]);
        assert_eq!(LcsIndex::build(&single, true).retrieve("qamqa", 3).examples.len(), 1);
        assert!(LcsIndex::build(&single, true).retrieve("zzz", 3).examples.is_empty());
        assert!(retrieve_corpus_examples(
            "qam",
            &single,
            &RetrievalConfig {
                k: 0,
                normalization: true
            }
        )
        .examples
        .is_empty());
    }

    #[test]
    fn normalization_switch() {
        let c = corpus(&["ALLIN"]);
        let on = retrieve_corpus_examples(
            "allin",
            &c,
            &RetrievalConfig {
                k: 3,
                normalization: true,
            },
        );
        let off = retrieve_corpus_examples(
            "allin",
            &c,
            &RetrievalConfig {
                k: 3,
                normalization: false,
            },
        );
        assert_eq!(on.scores, vec![5]);
        assert!(off.scores.is_empty());
    }

    fn fixtures() -> (FallbackLexicon, Vec<DictionaryEntry>, Vec<GrammarSection>) {
        let lex = FallbackLexicon::parse(
            "root\tqam\t[PrnPers+2sg]\nroot\tallin\t[^DB][NRoot]\tbueno\nroot\ttusu\t[VRoot][^DB]\tbailar\n\
             suffix\tta\t[+Acc][Cas]\nsuffix\tnki\t[+2sg.Subj][VPers]\n"
                .as_bytes(),
        )
        .unwrap();
        let dict = parse_dictionary(
            "allin\tadj.\tBueno (término de aprobación).\nta\ts.\tGram. Sufijo que desempeña los papeles de artículo y preposición.\ntusuy\tv.\tBailar.\n"
                .as_bytes(),
        )
        .unwrap();
        let grammar = parse_grammar(
            "ta\nAcusativo\nCASO ACUSATIVO. Su marca es –ta\n---\nnki\nFuturo\nFLEXIÓN DE TIEMPO. TIEMPO FUTURO.\n---\nnki, sun\nDup\nSEGUNDA SECCIÓN.\n---\nqam\nPronombre\nno es sufijo\n"
                .as_bytes(),
        )
        .unwrap();
        (lex, dict, grammar)
    }

    #[test]
    fn morph_context_lookup() {
        let (lex, dict, _) = fixtures();
        let analyses = analyze_sentence("qam allinta tusunki allin", &lex);
        let ctx = retrieve_morph_context(&analyses, &dict);
        assert_eq!(ctx.parser_lines[1], "allin: bueno [^DB][NRoot]");
        assert_eq!(ctx.parser_lines.len(), 6);
        assert_eq!(ctx.dictionary_entries.len(), 3, "deduplicated");
        assert!(ctx.dictionary_entries[0].starts_with("allin. adj. Bueno"));
        assert!(ctx.dictionary_entries[1].starts_with("ta. s. Gram. Sufijo"));
        // verb root retried as infinitive
        assert_eq!(ctx.dictionary_entries[2], "tusuy. v. Bailar.");

        let zz = analyze_sentence("zz", &lex);
        let ctx = retrieve_morph_context(&zz, &dict);
        assert_eq!(ctx.parser_lines, vec!["zz: [UNK]"]);
        assert!(ctx.dictionary_entries.is_empty());
    }

    #[test]
    fn grammar_context_lookup() {
        let (lex, _, grammar) = fixtures();
        let ctx = retrieve_grammar_context(&analyze_sentence("qam allinta tusunki", &lex), &grammar);
        let got: Vec<(&str, &str)> = ctx
            .sections
            .iter()
            .map(|(k, s)| (k.as_str(), s.title.as_str()))
            .collect();
        // root "qam" is never used as a grammar key
        assert_eq!(got, vec![("ta", "Acusativo"), ("nki", "Futuro"), ("nki", "Dup")]);
        let ctx = retrieve_grammar_context(&analyze_sentence("qam", &lex), &grammar);
        assert!(ctx.sections.is_empty());
    }

    fn random_corpus(alphabet: usize, max_pairs: usize) -> impl Strategy<Value = (String, Vec<CorpusPair>)> {
        let chars: Vec<char> = "abcdefghijklmnopqrstuvwxyzñ' ".chars().take(alphabet).collect();
        let word =
            prop::collection::vec(prop::sample::select(chars), 0..24).prop_map(|v| v.into_iter().collect::<String>());
        (word.clone(), prop::collection::vec(word, 0..max_pairs)).prop_map(|(q, sources)| {
            let pairs = sources
                .into_iter()
                .enumerate()
                .map(|(index, source_text)| CorpusPair {
                    source_text,
                    target_text: "t".into(),
                    origin: "r".into(),
                    index,
                })
                .collect();
            (q, pairs)
        })
    }

    proptest! {
        #[test]
        fn index_matches_naive(seed in (4usize..=29).prop_flat_map(|a| random_corpus(a, 30)), k in 0usize..5, normalization in any::<bool>()) {
            let (query, corpus) = seed;
            let cfg = RetrievalConfig { k, normalization };
            let naive = retrieve_corpus_examples(&query, &corpus, &cfg);
            let fast = LcsIndex::build(&corpus, normalization).retrieve(&query, k);
            prop_assert_eq!(fast, naive);
        }

        #[test]
        fn index_matches_naive_wide_alphabet(seed in random_corpus(29, 20)) {
            let (query, corpus) = seed;
            let cfg = RetrievalConfig::default();
            prop_assert_eq!(LcsIndex::build(&corpus, true).retrieve(&query, 3), retrieve_corpus_examples(&query, &corpus, &cfg));
        }

        #[test]
        fn lcs_symmetric_and_bounded(a in "[abcd]{0,16}", b in "[abcd]{0,16}") {
            let ab = lcs_length(&a, &b);
            prop_assert_eq!(ab, lcs_length(&b, &a));
            prop_assert!(ab <= a.chars().count().min(b.chars().count()));
            prop_assert_eq!(ab, brute_lcs(&a, &b));
            let sam = SuffixAutomaton::new(&a.chars().collect::<Vec<_>>());
            prop_assert_eq!(sam.longest_common_substring(&b.chars().collect::<Vec<_>>()), ab);
        }

        #[test]
        fn scores_non_increasing(seed in random_corpus(8, 40)) {
            let (query, corpus) = seed;
            let ctx = retrieve_corpus_examples(&query, &corpus, &RetrievalConfig { k: 5, normalization: true });
            prop_assert!(ctx.examples.len() <= 5);
            prop_assert!(ctx.scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
