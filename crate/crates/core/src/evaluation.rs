//! Report quality metrics: clinical efficacy by abnormality exact match, and
//! BLEU-1..4 and ROUGE-L.
//!
//! Text is compared on lowercase alphanumeric runs. BLEU uses no smoothing
//! and a single reference; ROUGE-L weights recall with `β² = 1.44`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::normalize_words;
use crate::text::{sentences, tokenize};

/// ROUGE-L recall weight.
pub const ROUGE_BETA_SQ: f64 = 1.44;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no input pairs")]
    EmptyInput,
    #[error("candidate has no tokens")]
    EmptyCandidate,
    #[error("BLEU order must be 1 to 4, got {0}")]
    InvalidOrder(usize),
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

const NEGATION_WORDS: &[&str] = &["no", "not", "without"];
const NEGATION_AFTER: &[&str] = &["not observed", "not detected", "not seen", "not identified", "not present"];

/// Abnormality categories and the phrases that mention them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AbnormalityLexicon {
    categories: BTreeMap<String, Vec<String>>,
}

impl AbnormalityLexicon {
    /// Aliases are normalized (lowercase, punctuation to spaces); a category
    /// without aliases, or an alias that normalizes to nothing, is rejected.
    pub fn new(categories: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (id, aliases) in categories {
            if id.trim().is_empty() {
                return Err(EvalError::InvalidLexicon("empty category id".into()));
            }
            if aliases.is_empty() {
                return Err(EvalError::InvalidLexicon(format!("category {id} has no aliases")));
            }
            let mut norm = Vec::with_capacity(aliases.len());
            for a in aliases {
                let n = normalize_words(&a);
                if n.is_empty() {
                    return Err(EvalError::InvalidLexicon(format!("category {id} has an empty alias")));
                }
                norm.push(n);
            }
            out.insert(id, norm);
        }
        Ok(Self { categories: out })
    }

    /// Chest CT abnormality categories commonly used for CE scoring, with
    /// hand-chosen aliases. An approximation: supply a lexicon file to score
    /// against a specific benchmark.
    pub fn default_chest_ct() -> Self {
        let table: &[(&str, &[&str])] = &[
            ("medical_material", &["medical material", "catheter", "pacemaker", "stent", "prosthesis", "surgical clip"]),
            ("arterial_wall_calcification", &["arterial wall calcification", "aortic calcification", "aortic wall calcification", "atherosclerotic calcification"]),
            ("cardiomegaly", &["cardiomegaly", "enlarged heart", "heart is enlarged"]),
            ("pericardial_effusion", &["pericardial effusion", "pericardial fluid"]),
            ("coronary_artery_wall_calcification", &["coronary artery wall calcification", "coronary artery calcification", "coronary calcification"]),
            ("hiatal_hernia", &["hiatal hernia", "hiatus hernia"]),
            ("lymphadenopathy", &["lymphadenopathy", "enlarged lymph node", "lymph node enlargement"]),
            ("emphysema", &["emphysema", "emphysematous"]),
            ("atelectasis", &["atelectasis", "atelectatic"]),
            ("lung_nodule", &["nodule", "nodular"]),
            ("lung_opacity", &["opacity", "opacities", "ground glass"]),
            ("pulmonary_fibrotic_sequela", &["fibrotic sequela", "fibrosis", "fibrotic"]),
            ("pleural_effusion", &["pleural effusion", "pleural fluid"]),
            ("mosaic_attenuation_pattern", &["mosaic attenuation"]),
            ("peribronchial_thickening", &["peribronchial thickening", "bronchial wall thickening"]),
            ("consolidation", &["consolidation"]),
            ("bronchiectasis", &["bronchiectasis"]),
            ("interlobular_septal_thickening", &["interlobular septal thickening", "septal thickening"]),
        ];
        let map = table
            .iter()
            .map(|(id, aliases)| (id.to_string(), aliases.iter().map(|a| a.to_string()).collect()))
            .collect();
        Self::new(map).expect("built-in lexicon is valid")
    }

    /// Reads a JSON object mapping category ids to alias lists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |reason: String| EvalError::Io { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        let map: BTreeMap<String, Vec<String>> = serde_json::from_str(&text).map_err(|e| io(e.to_string()))?;
        Self::new(map)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn category_ids(&self) -> impl Iterator<Item = &str> {
        self.categories.keys().map(String::as_str)
    }
}

/// True when the alias occurrence at byte `at` (length `len`) of the padded
/// normalized sentence is negated.
fn negated(padded: &str, at: usize, len: usize) -> bool {
    let before = &padded[..at];
    if before.split_whitespace().any(|w| NEGATION_WORDS.contains(&w)) {
        return true;
    }
    let after = format!("{} ", &padded[at + len..]);
    NEGATION_AFTER.iter().any(|cue| after.contains(&format!(" {cue} ")))
}

/// Categories mentioned without negation. Aliases match at word starts, so
/// "nodule" also matches "nodules"; negation cues count only within the
/// alias's own sentence.
pub fn extract_abnormalities(text: &str, lex: &AbnormalityLexicon) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    for sentence in sentences(text) {
        let padded = format!(" {}", normalize_words(sentence));
        for (id, aliases) in &lex.categories {
            if found.contains(id) {
                continue;
            }
            let hit = aliases.iter().any(|alias| {
                let needle = format!(" {alias}");
                padded.match_indices(&needle).any(|(at, m)| !negated(&padded, at, m.len()))
            });
            if hit {
                found.insert(id.clone());
            }
        }
    }
    found
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CeScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl CeScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { tp, fp, fn_, precision, recall, f1 }
    }
}

/// Micro-averaged clinical efficacy over every (pair, category) cell.
pub fn ce_scores<G: AsRef<str>, R: AsRef<str>>(pairs: &[(G, R)], lex: &AbnormalityLexicon) -> Result<CeScore> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, r) in pairs {
        let gen = extract_abnormalities(g.as_ref(), lex);
        let refs = extract_abnormalities(r.as_ref(), lex);
        tp += gen.intersection(&refs).count();
        fp += gen.difference(&refs).count();
        fn_ += refs.difference(&gen).count();
    }
    Ok(CeScore::from_counts(tp, fp, fn_))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and candidate n-gram total for one order.
fn clipped(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, cand.len().saturating_sub(n - 1))
}

fn bleu_from_stats(stats: &[(usize, usize)], cand_len: usize, ref_len: usize) -> f64 {
    let mut log_sum = 0.0;
    for &(m, total) in stats {
        if m == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / total as f64).ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * (log_sum / stats.len() as f64).exp()
}

fn check_order(max_n: usize) -> Result<()> {
    if (1..=4).contains(&max_n) {
        Ok(())
    } else {
        Err(EvalError::InvalidOrder(max_n))
    }
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions for orders
/// `1..=max_n`, times the brevity penalty. Any zero precision gives 0.
pub fn bleu_n(candidate: &str, reference: &str, max_n: usize) -> Result<f64> {
    check_order(max_n)?;
    let c = tokenize(candidate);
    if c.is_empty() {
        return Err(EvalError::EmptyCandidate);
    }
    let r = tokenize(reference);
    let stats: Vec<_> = (1..=max_n).map(|n| clipped(&c, &r, n)).collect();
    Ok(bleu_from_stats(&stats, c.len(), r.len()))
}

/// Corpus BLEU: clipped counts and lengths summed over all pairs before
/// taking precisions and the brevity penalty.
pub fn corpus_bleu<G: AsRef<str>, R: AsRef<str>>(pairs: &[(G, R)], max_n: usize) -> Result<f64> {
    check_order(max_n)?;
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut stats = vec![(0usize, 0usize); max_n];
    let (mut cl, mut rl) = (0, 0);
    for (g, r) in pairs {
        let c = tokenize(g.as_ref());
        let r = tokenize(r.as_ref());
        for (n, s) in stats.iter_mut().enumerate() {
            let (m, t) = clipped(&c, &r, n + 1);
            s.0 += m;
            s.1 += t;
        }
        cl += c.len();
        rl += r.len();
    }
    if cl == 0 {
        return Err(EvalError::EmptyCandidate);
    }
    Ok(bleu_from_stats(&stats, cl, rl))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure `(1+β²)PR / (R + β²P)` with `P = LCS/|cand|`, `R = LCS/|ref|`.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64> {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() || r.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let lcs = lcs_len(&c, &r) as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / c.len() as f64;
    let rec = lcs / r.len() as f64;
    Ok((1.0 + ROUGE_BETA_SQ) * p * rec / (rec + ROUGE_BETA_SQ * p))
}

/// One row of a report generation results table: BL-1..BL-4, RL, M, P, R,
/// F1. Absent values (such as METEOR, which is not computed) are `None` and
/// print as `-`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(rename = "Method")]
    pub method: String,
    #[serde(rename = "BL-1")]
    pub bl_1: Option<f64>,
    #[serde(rename = "BL-2")]
    pub bl_2: Option<f64>,
    #[serde(rename = "BL-3")]
    pub bl_3: Option<f64>,
    #[serde(rename = "BL-4")]
    pub bl_4: Option<f64>,
    #[serde(rename = "RL")]
    pub rl: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    #[serde(rename = "P")]
    pub p: Option<f64>,
    #[serde(rename = "R")]
    pub r: Option<f64>,
    #[serde(rename = "F1")]
    pub f1: Option<f64>,
}

impl TableRow {
    pub const COLUMNS: [&'static str; 10] = ["Method", "BL-1", "BL-2", "BL-3", "BL-4", "RL", "M", "P", "R", "F1"];

    fn values(&self) -> [Option<f64>; 9] {
        [self.bl_1, self.bl_2, self.bl_3, self.bl_4, self.rl, self.m, self.p, self.r, self.f1]
    }

    /// Parses `Method & v & ... & v` (LaTeX-style, `-` for missing, trailing
    /// `\\` allowed) or the same with `|` separators.
    pub fn parse(line: &str) -> Option<Self> {
        let line = line.trim().trim_end_matches("\\\\").trim();
        let sep = if line.contains('&') { '&' } else { '|' };
        let cells: Vec<&str> = line.split(sep).map(unwrap_latex).filter(|c| !c.is_empty()).collect();
        if cells.len() != 10 {
            return None;
        }
        let mut vals = [None; 9];
        for (v, cell) in vals.iter_mut().zip(&cells[1..]) {
            *v = match *cell {
                "-" => None,
                c => Some(c.parse().ok()?),
            };
        }
        let [bl_1, bl_2, bl_3, bl_4, rl, m, p, r, f1] = vals;
        Some(Self { method: cells[0].to_string(), bl_1, bl_2, bl_3, bl_4, rl, m, p, r, f1 })
    }

    pub fn to_line(&self) -> String {
        let vals = self.values().map(|v| v.map_or("-".to_string(), |x| format!("{x:.3}")));
        format!("{} | {}", self.method, vals.join(" | "))
    }
}

/// Strips `\textbf{..}`-style wrappers from a LaTeX table cell.
fn unwrap_latex(cell: &str) -> &str {
    let mut c = cell.trim();
    while let Some(rest) = c.strip_prefix('\\') {
        match (rest.find('{'), rest.ends_with('}')) {
            (Some(open), true) => c = rest[open + 1..rest.len() - 1].trim(),
            _ => break,
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsMetadata {
    pub pairs: usize,
    pub tokenizer: String,
    pub bleu: String,
    pub rouge_beta_sq: f64,
    pub ce_averaging: String,
    pub lexicon_categories: usize,
    pub meteor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    /// Mean sentence-level ROUGE-L.
    pub rouge_l: f64,
    pub ce: CeScore,
    pub metadata: MetricsMetadata,
}

impl MetricsReport {
    pub fn table_row(&self, method: impl Into<String>) -> TableRow {
        TableRow {
            method: method.into(),
            bl_1: Some(self.bleu_1),
            bl_2: Some(self.bleu_2),
            bl_3: Some(self.bleu_3),
            bl_4: Some(self.bleu_4),
            rl: Some(self.rouge_l),
            m: None,
            p: Some(self.ce.precision),
            r: Some(self.ce.recall),
            f1: Some(self.ce.f1),
        }
    }
}

/// Full metric suite over `(generated, reference)` pairs. Pairs whose
/// texts have no tokens score 0 for ROUGE-L.
pub fn evaluate_pairs<G: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    pairs: &[(G, R)],
    lex: &AbnormalityLexicon,
) -> Result<MetricsReport> {
    use rayon::prelude::*;
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let bleu = |n| corpus_bleu(pairs, n);
    let rouge: f64 = pairs
        .par_iter()
        .map(|(g, r)| rouge_l(g.as_ref(), r.as_ref()).unwrap_or(0.0))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(MetricsReport {
        bleu_1: bleu(1)?,
        bleu_2: bleu(2)?,
        bleu_3: bleu(3)?,
        bleu_4: bleu(4)?,
        rouge_l: rouge / pairs.len() as f64,
        ce: ce_scores(pairs, lex)?,
        metadata: MetricsMetadata {
            pairs: pairs.len(),
            tokenizer: "lowercase alphanumeric runs".into(),
            bleu: "corpus-level, single reference, no smoothing".into(),
            rouge_beta_sq: ROUGE_BETA_SQ,
            ce_averaging: "micro over (pair, category) cells".into(),
            lexicon_categories: lex.len(),
            meteor: "not computed".into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{RegionId, NORMAL_TEMPLATE_SENTENCES};

    fn lex() -> AbnormalityLexicon {
        AbnormalityLexicon::default_chest_ct()
    }

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn default_lexicon_size() {
        assert_eq!(lex().len(), 18);
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_abnormalities("There is a pleural effusion with loculation.", &lex()), set(&["pleural_effusion"]));
        assert!(extract_abnormalities("Pleural effusion-thickening was not detected.", &lex()).is_empty());
        assert!(extract_abnormalities("", &lex()).is_empty());
        assert_eq!(
            extract_abnormalities("No pleural effusion. Millimetric nodules are observed in both lungs.", &lex()),
            set(&["lung_nodule"])
        );
    }

    #[test]
    fn normal_sentences_extract_nothing() {
        for (s, _) in NORMAL_TEMPLATE_SENTENCES {
            assert!(extract_abnormalities(s, &lex()).is_empty(), "{s}");
        }
        for r in RegionId::ALL {
            assert!(extract_abnormalities(r.normal_sentence(), &lex()).is_empty(), "{r}");
        }
    }

    #[test]
    fn ce_hand_counts() {
        let s = ce_scores(&[("pleural effusion. cardiomegaly.", "pleural effusion.")], &lex()).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 0));
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let s = ce_scores(&[("", "cardiomegaly")], &lex()).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(matches!(ce_scores::<&str, &str>(&[], &lex()), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu_n("the cat sat", "the cat sat", 4).unwrap_or(-1.0), 0.0);
        assert!((bleu_n("a b c d e", "a b c d e", 4).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu_n("x y z", "a b c", 1).unwrap(), 0.0);
        let bp = bleu_n("the cat sat", "the cat sat down", 1).unwrap();
        assert!((bp - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
        assert!(matches!(bleu_n(" ,. ", "a", 1), Err(EvalError::EmptyCandidate)));
        assert!(matches!(bleu_n("a", "a", 5), Err(EvalError::InvalidOrder(5))));
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c", "a b c").unwrap(), 1.0);
        assert_eq!(rouge_l("a b", "c d").unwrap(), 0.0);
        let f = rouge_l("a b c d", "a x c").unwrap();
        let (p, r) = (0.5, 2.0 / 3.0);
        assert!((f - 2.44 * p * r / (r + 1.44 * p)).abs() < 1e-12);
    }

    #[test]
    fn table_row_roundtrip() {
        let row = TableRow::parse(r"CT2Rep        & 0.442 & 0.344 & 0.279 & 0.235 & 0.401 & 0.309 & 0.355 & 0.132 & 0.175 \\").unwrap();
        assert_eq!(row.bl_1, Some(0.442));
        assert_eq!(row.f1, Some(0.175));
        let row = TableRow::parse(r"3D-CT-GPT     & -     & -     & -     & 0.133 & 0.145 & 0.140 & -     & -     & -     \\").unwrap();
        assert_eq!(row.bl_1, None);
        assert_eq!(TableRow::parse(&row.to_line()), Some(row));
    }
}
