//! Adapted MQM error typology, quality scale, validation, count tables and
//! inter-annotator agreement.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::split_csv_line;
use crate::promptgen::{enumerate_conditions, PromptCondition};
use crate::records::RecordKey;

pub const MAX_NON_TARGET_ERRORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorDimension {
    Accuracy,
    TargetError,
    NonTranslation,
    ModelError,
}

impl ErrorDimension {
    pub fn name(&self) -> &'static str {
        match self {
            ErrorDimension::Accuracy => "Accuracy",
            ErrorDimension::TargetError => "Target Error",
            ErrorDimension::NonTranslation => "Non-Translation",
            ErrorDimension::ModelError => "Model Error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorSubtype {
    Addition,
    Omission,
    SubstitutionSubject,
    SubstitutionTam,
    SubstitutionOther,
    Overtranslation,
    Undertranslation,
    Grammar,
    Coherence,
    StyleRegister,
    CompleteMistranslation,
    LexicalCorrespondence,
    Refusal,
    Garbled,
    ChattyGpt,
}

impl ErrorSubtype {
    pub const ALL: [ErrorSubtype; 15] = [
        ErrorSubtype::Addition,
        ErrorSubtype::Omission,
        ErrorSubtype::SubstitutionSubject,
        ErrorSubtype::SubstitutionTam,
        ErrorSubtype::SubstitutionOther,
        ErrorSubtype::Overtranslation,
        ErrorSubtype::Undertranslation,
        ErrorSubtype::Grammar,
        ErrorSubtype::Coherence,
        ErrorSubtype::StyleRegister,
        ErrorSubtype::CompleteMistranslation,
        ErrorSubtype::LexicalCorrespondence,
        ErrorSubtype::Refusal,
        ErrorSubtype::Garbled,
        ErrorSubtype::ChattyGpt,
    ];

    pub fn dimension(&self) -> ErrorDimension {
        use ErrorSubtype::*;
        match self {
            Addition | Omission | SubstitutionSubject | SubstitutionTam | SubstitutionOther | Overtranslation
            | Undertranslation => ErrorDimension::Accuracy,
            Grammar | Coherence | StyleRegister => ErrorDimension::TargetError,
            CompleteMistranslation | LexicalCorrespondence | Refusal => ErrorDimension::NonTranslation,
            Garbled | ChattyGpt => ErrorDimension::ModelError,
        }
    }

    /// Row label used in error-count tables.
    pub fn name(&self) -> &'static str {
        use ErrorSubtype::*;
        match self {
            Addition => "Addition",
            Omission => "Omission",
            SubstitutionSubject => "Substitution - Subject",
            SubstitutionTam => "Substitution - TAM",
            SubstitutionOther => "Substitution - Other",
            Overtranslation => "Overtranslation",
            Undertranslation => "Undertranslation",
            Grammar => "Target Error - Grammar",
            Coherence => "Target Error - Coherence",
            StyleRegister => "Target Error - Style/Register",
            CompleteMistranslation => "Complete Mistranslation",
            LexicalCorrespondence => "Mistranslation - Lexical Correspondence",
            Refusal => "Refusal",
            Garbled => "Garbled",
            ChattyGpt => "ChattyGPT",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let norm = |s: &str| {
            s.chars()
                .filter(|c| c.is_alphanumeric() || *c == '/')
                .collect::<String>()
                .to_lowercase()
        };
        let wanted = norm(name);
        Self::ALL.into_iter().find(|s| norm(s.name()) == wanted)
    }
}

impl fmt::Display for ErrorSubtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quality {
    None,
    Low,
    Med,
    High,
}

impl Quality {
    pub const ALL: [Quality; 4] = [Quality::None, Quality::Low, Quality::Med, Quality::High];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn weight(&self) -> u64 {
        self.index() as u64
    }
}

impl FromStr for Quality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Quality::None),
            "low" => Ok(Quality::Low),
            "med" | "medium" => Ok(Quality::Med),
            "high" => Ok(Quality::High),
            other => Err(format!("unknown quality {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub record: RecordKey,
    pub annotator_id: String,
    pub subtype: ErrorSubtype,
    /// Character offsets into the output text, end exclusive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ErrorAnnotation {
    pub fn dimension(&self) -> ErrorDimension {
        self.subtype.dimension()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityRating {
    pub record: RecordKey,
    pub annotator_id: String,
    pub quality: Quality,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Checks one annotator's judgment of one record.
pub fn validate_annotations(
    output_text: &str,
    annotations: &[ErrorAnnotation],
    rating: Option<Quality>,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let non_target = annotations
        .iter()
        .filter(|a| a.dimension() != ErrorDimension::TargetError)
        .count();
    if non_target > MAX_NON_TARGET_ERRORS {
        violations.push(Violation(format!(
            "max {MAX_NON_TARGET_ERRORS} non-target errors (found {non_target})"
        )));
    }
    let len = output_text.chars().count();
    for a in annotations {
        if let Some((start, end)) = a.span {
            if start > end || end > len {
                violations.push(Violation(format!(
                    "span {start}..{end} of {} outside output of {len} characters",
                    a.subtype
                )));
            }
        }
    }
    if rating == Some(Quality::None)
        && !annotations.is_empty()
        && !annotations.iter().any(|a| {
            matches!(
                a.dimension(),
                ErrorDimension::NonTranslation | ErrorDimension::ModelError
            )
        })
    {
        violations.push(Violation(
            "quality None needs a Non-Translation or Model Error annotation".to_owned(),
        ));
    }
    violations
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualityCounts {
    pub none: u64,
    pub low: u64,
    pub med: u64,
    pub high: u64,
}

impl QualityCounts {
    pub fn new(high: u64, med: u64, low: u64, none: u64) -> Self {
        Self { none, low, med, high }
    }

    pub fn add(&mut self, q: Quality) {
        *self.slot(q) += 1;
    }

    pub fn get(&self, q: Quality) -> u64 {
        match q {
            Quality::None => self.none,
            Quality::Low => self.low,
            Quality::Med => self.med,
            Quality::High => self.high,
        }
    }

    fn slot(&mut self, q: Quality) -> &mut u64 {
        match q {
            Quality::None => &mut self.none,
            Quality::Low => &mut self.low,
            Quality::Med => &mut self.med,
            Quality::High => &mut self.high,
        }
    }

    pub fn total(&self) -> u64 {
        self.none + self.low + self.med + self.high
    }
}

impl std::ops::Add for QualityCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            none: self.none + o.none,
            low: self.low + o.low,
            med: self.med + o.med,
            high: self.high + o.high,
        }
    }
}

/// 3·high + 2·med + low.
pub fn quality_summary(counts: &QualityCounts) -> u64 {
    Quality::ALL.iter().map(|q| q.weight() * counts.get(*q)).sum()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn table_err(line: usize, reason: impl Into<String>) -> TableError {
    TableError::Parse {
        line,
        reason: reason.into(),
    }
}

fn parse_count(line: usize, s: &str) -> Result<u64, TableError> {
    s.trim()
        .parse()
        .map_err(|_| table_err(line, format!("bad count {s:?}")))
}

/// Quality counts per condition for one model.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QualityTable {
    pub rows: Vec<(PromptCondition, QualityCounts)>,
}

pub const QUALITY_CSV_HEADER: &str = "condition,None,Low,Med,High";

impl QualityTable {
    /// Rows for all eight conditions in canonical order, zeros included.
    pub fn from_ratings<'a>(ratings: impl IntoIterator<Item = &'a QualityRating>) -> Self {
        let mut counts: HashMap<PromptCondition, QualityCounts> = HashMap::new();
        for r in ratings {
            counts.entry(r.record.condition).or_default().add(r.quality);
        }
        Self {
            rows: enumerate_conditions()
                .into_iter()
                .map(|c| (c, counts.get(&c).copied().unwrap_or_default()))
                .collect(),
        }
    }

    pub fn get(&self, cond: PromptCondition) -> Option<&QualityCounts> {
        self.rows.iter().find(|(c, _)| *c == cond).map(|(_, q)| q)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{QUALITY_CSV_HEADER}\n");
        for (c, q) in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", c.label(), q.none, q.low, q.med, q.high);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, TableError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if i == 0 {
                if line.trim() != QUALITY_CSV_HEADER {
                    return Err(table_err(n, format!("expected header {QUALITY_CSV_HEADER:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f = split_csv_line(line);
            if f.len() != 5 {
                return Err(table_err(n, format!("expected 5 fields, found {}", f.len())));
            }
            let cond: PromptCondition = f[0].parse().map_err(|e| table_err(n, format!("{e}")))?;
            if rows.iter().any(|(c, _)| *c == cond) {
                return Err(table_err(n, format!("duplicate row {}", f[0])));
            }
            rows.push((
                cond,
                QualityCounts {
                    none: parse_count(n, &f[1])?,
                    low: parse_count(n, &f[2])?,
                    med: parse_count(n, &f[3])?,
                    high: parse_count(n, &f[4])?,
                },
            ));
        }
        Ok(Self { rows })
    }
}

pub const NONE_ROW: &str = "None";
pub const TOTAL_ROW: &str = "Total";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CountRow {
    /// Records with no annotated error.
    NoErrors,
    Subtype(ErrorSubtype),
}

impl CountRow {
    pub fn label(&self) -> &'static str {
        match self {
            CountRow::NoErrors => NONE_ROW,
            CountRow::Subtype(s) => s.name(),
        }
    }
}

/// Error counts by subtype and condition for one model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorCountTable {
    pub rows: Vec<(CountRow, [u64; 8])>,
}

impl ErrorCountTable {
    /// `annotations` are all error tags for the model; `records` lists every
    /// annotated record so that error-free ones land in the None row.
    pub fn build<'a>(
        annotations: impl IntoIterator<Item = &'a ErrorAnnotation>,
        records: impl IntoIterator<Item = &'a RecordKey>,
    ) -> Self {
        let mut counts: HashMap<CountRow, [u64; 8]> = HashMap::new();
        let mut tagged: BTreeSet<&RecordKey> = BTreeSet::new();
        for a in annotations {
            counts.entry(CountRow::Subtype(a.subtype)).or_default()[a.record.condition.ordinal()] += 1;
            tagged.insert(&a.record);
        }
        let mut none = [0u64; 8];
        let unique: BTreeSet<&RecordKey> = records.into_iter().collect();
        for r in unique {
            if !tagged.contains(r) {
                none[r.condition.ordinal()] += 1;
            }
        }
        let mut rows = vec![(CountRow::NoErrors, none)];
        rows.extend(ErrorSubtype::ALL.iter().map(|s| {
            (
                CountRow::Subtype(*s),
                counts.get(&CountRow::Subtype(*s)).copied().unwrap_or_default(),
            )
        }));
        Self { rows }
    }

    pub fn get(&self, row: CountRow) -> Option<&[u64; 8]> {
        self.rows.iter().find(|(r, _)| *r == row).map(|(_, c)| c)
    }

    /// Column sums over every row, None included.
    pub fn totals(&self) -> [u64; 8] {
        let mut t = [0u64; 8];
        for (_, counts) in &self.rows {
            for (slot, v) in t.iter_mut().zip(counts) {
                *slot += v;
            }
        }
        t
    }

    pub fn header() -> String {
        let mut h = String::from("error");
        for c in enumerate_conditions() {
            h.push(',');
            h.push_str(c.code());
        }
        h.push_str(",Total");
        h
    }

    fn write_row(out: &mut String, label: &str, counts: &[u64; 8]) {
        out.push_str(label);
        for v in counts {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", counts.iter().sum::<u64>());
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header();
        out.push('\n');
        for (row, counts) in &self.rows {
            Self::write_row(&mut out, row.label(), counts);
        }
        Self::write_row(&mut out, TOTAL_ROW, &self.totals());
        out
    }

    /// Parses [`Self::to_csv`] output. Row totals and the Total row are
    /// checked against the counts.
    pub fn from_csv(text: &str) -> Result<Self, TableError> {
        let mut rows = Vec::new();
        let mut total_row = None;
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if i == 0 {
                if line.trim() != Self::header() {
                    return Err(table_err(n, format!("expected header {:?}", Self::header())));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f = split_csv_line(line);
            if f.len() != 10 {
                return Err(table_err(n, format!("expected 10 fields, found {}", f.len())));
            }
            let mut counts = [0u64; 8];
            for (slot, s) in counts.iter_mut().zip(&f[1..9]) {
                *slot = parse_count(n, s)?;
            }
            let total = parse_count(n, &f[9])?;
            if total != counts.iter().sum::<u64>() {
                return Err(table_err(n, format!("row total {total} does not match its counts")));
            }
            let label = f[0].trim();
            if label == TOTAL_ROW {
                total_row = Some((n, counts));
                continue;
            }
            let row = if label == NONE_ROW {
                CountRow::NoErrors
            } else {
                CountRow::Subtype(
                    ErrorSubtype::from_name(label)
                        .ok_or_else(|| table_err(n, format!("unknown error type {label:?}")))?,
                )
            };
            if rows.iter().any(|(r, _)| *r == row) {
                return Err(table_err(n, format!("duplicate row {label:?}")));
            }
            rows.push((row, counts));
        }
        let table = Self { rows };
        if let Some((n, totals)) = total_row {
            if totals != table.totals() {
                return Err(table_err(n, "Total row does not match column sums"));
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AgreementError {
    #[error("annotators share no rated item")]
    NoSharedItems,
    #[error("no unit has values from two annotators")]
    NoPairableUnits,
    #[error("fewer than two annotators")]
    TooFewAnnotators,
}

/// Unweighted Cohen's κ over the items both annotators rated.
pub fn cohen_kappa<K: Ord>(a: &BTreeMap<K, Quality>, b: &BTreeMap<K, Quality>) -> Result<f64, AgreementError> {
    let mut agree = 0u64;
    let mut n = 0u64;
    let mut ca = [0u64; 4];
    let mut cb = [0u64; 4];
    for (k, qa) in a {
        if let Some(qb) = b.get(k) {
            n += 1;
            ca[qa.index()] += 1;
            cb[qb.index()] += 1;
            if qa == qb {
                agree += 1;
            }
        }
    }
    kappa_from_counts(n, agree, &ca, &cb)
}

fn kappa_from_counts(n: u64, agree: u64, ca: &[u64], cb: &[u64]) -> Result<f64, AgreementError> {
    if n == 0 {
        return Err(AgreementError::NoSharedItems);
    }
    let chance: u128 = ca.iter().zip(cb).map(|(x, y)| *x as u128 * *y as u128).sum();
    let n = n as u128;
    let denom = n * n - chance;
    if denom == 0 {
        return Ok(1.0);
    }
    Ok((n as f64 * agree as f64 - chance as f64) / denom as f64)
}

/// κ from a square contingency table (rows: annotator A, columns: B).
pub fn cohen_kappa_from_table(table: &[Vec<u64>]) -> Result<f64, AgreementError> {
    let k = table.len();
    let mut ca = vec![0u64; k];
    let mut cb = vec![0u64; k];
    let mut agree = 0;
    let mut n = 0;
    for (i, row) in table.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            ca[i] += v;
            cb[j] += v;
            n += v;
            if i == j {
                agree += v;
            }
        }
    }
    kappa_from_counts(n, agree, &ca, &cb)
}

/// Nominal Krippendorff's α. Each unit holds the values assigned by the
/// annotators who coded it; units with fewer than two values are ignored.
pub fn krippendorff_alpha<V: Ord + Clone>(units: &[Vec<V>]) -> Result<f64, AgreementError> {
    let mut coincidence: BTreeMap<(V, V), f64> = BTreeMap::new();
    let mut pairable = 0usize;
    for values in units.iter().filter(|u| u.len() >= 2) {
        pairable += 1;
        let w = 1.0 / (values.len() - 1) as f64;
        for (i, a) in values.iter().enumerate() {
            for (j, b) in values.iter().enumerate() {
                if i != j {
                    *coincidence.entry((a.clone(), b.clone())).or_default() += w;
                }
            }
        }
    }
    if pairable == 0 {
        return Err(AgreementError::NoPairableUnits);
    }
    let mut marginals: BTreeMap<V, f64> = BTreeMap::new();
    let mut observed = 0.0;
    for ((a, b), o) in &coincidence {
        *marginals.entry(a.clone()).or_default() += o;
        if a != b {
            observed += o;
        }
    }
    let n: f64 = marginals.values().sum();
    let mut expected = 0.0;
    for (a, na) in &marginals {
        for (b, nb) in &marginals {
            if a != b {
                expected += na * nb;
            }
        }
    }
    if expected == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Presence units for α: one unit per (record, subtype) for every record
/// rated by at least two annotators, with one 0/1 value per annotator.
pub fn presence_units(annotations: &[ErrorAnnotation], ratings: &[QualityRating]) -> Vec<Vec<u8>> {
    let mut coders: BTreeMap<&RecordKey, BTreeSet<&str>> = BTreeMap::new();
    for r in ratings {
        coders.entry(&r.record).or_default().insert(&r.annotator_id);
    }
    for a in annotations {
        coders.entry(&a.record).or_default().insert(&a.annotator_id);
    }
    let tagged: BTreeSet<(&RecordKey, &str, ErrorSubtype)> = annotations
        .iter()
        .map(|a| (&a.record, a.annotator_id.as_str(), a.subtype))
        .collect();
    let mut units = Vec::new();
    for (record, who) in coders.iter().filter(|(_, w)| w.len() >= 2) {
        for s in ErrorSubtype::ALL {
            units.push(
                who.iter()
                    .map(|a| u8::from(tagged.contains(&(*record, *a, s))))
                    .collect(),
            );
        }
    }
    units
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Mean pairwise κ when more than two annotators overlap.
    pub kappa: f64,
    pub alpha: f64,
    pub n_items: usize,
    pub n_annotators: usize,
}

pub fn agreement_report(
    annotations: &[ErrorAnnotation],
    ratings: &[QualityRating],
) -> Result<AgreementReport, AgreementError> {
    let mut by_annotator: BTreeMap<&str, BTreeMap<&RecordKey, Quality>> = BTreeMap::new();
    for r in ratings {
        by_annotator
            .entry(&r.annotator_id)
            .or_default()
            .insert(&r.record, r.quality);
    }
    if by_annotator.len() < 2 {
        return Err(AgreementError::TooFewAnnotators);
    }
    let names: Vec<&str> = by_annotator.keys().copied().collect();
    let mut kappas = Vec::new();
    let mut shared_items: BTreeSet<&RecordKey> = BTreeSet::new();
    let mut active: BTreeSet<&str> = BTreeSet::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let (ra, rb) = (&by_annotator[a], &by_annotator[b]);
            match cohen_kappa(ra, rb) {
                Ok(k) => {
                    kappas.push(k);
                    shared_items.extend(ra.keys().filter(|k| rb.contains_key(*k)));
                    active.insert(a);
                    active.insert(b);
                }
                Err(AgreementError::NoSharedItems) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if kappas.is_empty() {
        return Err(AgreementError::NoSharedItems);
    }
    let kappa = kappas.iter().sum::<f64>() / kappas.len() as f64;
    let alpha = krippendorff_alpha(&presence_units(annotations, ratings))?;
    Ok(AgreementReport {
        kappa,
        alpha,
        n_items: shared_items.len(),
        n_annotators: active.len(),
    })
}
