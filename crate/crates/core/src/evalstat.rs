//! Ranking metrics, TREC run files and paired significance tests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Qrels;
use crate::error::{Error, Result};

/// nDCG gain function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// `g` (trec_eval's `ndcg_cut`).
    #[default]
    Linear,
    /// `2^g - 1`.
    Exponential,
}

impl Gain {
    #[inline]
    pub fn of(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => (grade as f64).exp2() - 1.0,
        }
    }
}

impl FromStr for Gain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Gain::Linear),
            "exponential" | "exp" => Ok(Gain::Exponential),
            other => Err(Error::invalid(format!("unknown gain `{other}`"))),
        }
    }
}

fn dcg(grades: impl Iterator<Item = u32>, k: usize, gain: Gain) -> f64 {
    grades.take(k).enumerate().map(|(i, g)| gain.of(g) / ((i + 2) as f64).log2()).sum()
}

/// nDCG@k of the grades in ranked order, normalized by the ideal ordering
/// of every judged grade for the query. Zero when nothing is relevant.
pub fn ndcg_at_k(ranked_grades: &[u32], all_grades: &[u32], k: usize, gain: Gain) -> f64 {
    let mut ideal = all_grades.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter(), k, gain);
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(ranked_grades.iter().copied(), k, gain) / idcg
}

/// Reciprocal rank of the first doc with grade ≥ `threshold` in the top k.
pub fn mrr_at_k(ranked_grades: &[u32], k: usize, threshold: u32) -> f64 {
    ranked_grades.iter().take(k).position(|&g| g >= threshold).map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Fraction of `relevant` found in the top k; 0 for an empty set.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<&str>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits =
        ranked.iter().take(k).map(|d| d.as_ref()).filter(|d| relevant.contains(d)).collect::<BTreeSet<&str>>().len();
    hits as f64 / relevant.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

/// A TREC run: ranked entries per query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunList {
    pub tag: String,
    queries: BTreeMap<String, Vec<RunEntry>>,
}

impl RunList {
    pub fn new(tag: impl Into<String>) -> Self {
        Self { tag: tag.into(), queries: BTreeMap::new() }
    }

    /// Add a query's ranking (best first); ranks are assigned from 1.
    pub fn insert(&mut self, query_id: impl Into<String>, ranked: impl IntoIterator<Item = (String, f64)>) {
        let entries = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (doc_id, score))| RunEntry { doc_id, rank: i + 1, score })
            .collect();
        self.queries.insert(query_id.into(), entries);
    }

    pub fn get(&self, query_id: &str) -> Option<&[RunEntry]> {
        self.queries.get(query_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[RunEntry])> {
        self.queries.iter().map(|(q, e)| (q.as_str(), e.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let tag = if self.tag.is_empty() { "run" } else { self.tag.as_str() };
        for (q, entries) in &self.queries {
            for e in entries {
                writeln!(w, "{q} Q0 {} {} {} {tag}", e.doc_id, e.rank, e.score)?;
            }
        }
        Ok(())
    }
}

pub fn write_run(run: &RunList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    run.write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Parse `qid Q0 docid rank score tag` lines. Ranks must be 1..n per query;
/// a score that increases down the ranking is only warned about.
pub fn load_run(path: impl AsRef<Path>) -> Result<RunList> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut run = RunList::default();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(Error::parse(path, n + 1, format!("expected 6 fields, got {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| Error::parse(path, n + 1, format!("bad rank `{}`", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| Error::parse(path, n + 1, format!("bad score `{}`", f[4])))?;
        if run.tag.is_empty() {
            run.tag = f[5].to_string();
        }
        run.queries.entry(f[0].to_string()).or_default().push(RunEntry { doc_id: f[2].to_string(), rank, score });
    }
    for (q, entries) in run.queries.iter_mut() {
        entries.sort_by_key(|e| e.rank);
        for (i, e) in entries.iter().enumerate() {
            if e.rank != i + 1 {
                return Err(Error::Format(format!(
                    "{}: query {q} has rank {} where {} was expected",
                    path.display(),
                    e.rank,
                    i + 1
                )));
            }
        }
        if entries.windows(2).any(|w| w[1].score > w[0].score) {
            log::warn!("{}: scores of query {q} increase down the ranking", path.display());
        }
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ndcg,
    Mrr,
    Recall,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let head = s.split('@').next().unwrap_or_default().to_ascii_lowercase();
        match head.as_str() {
            "ndcg" => Ok(Metric::Ndcg),
            "mrr" => Ok(Metric::Mrr),
            "recall" | "r" => Ok(Metric::Recall),
            _ => Err(Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ndcg_k: usize,
    pub mrr_k: usize,
    pub recall_k: usize,
    pub gain: Gain,
    /// Minimum grade counted as relevant by MRR and recall.
    pub relevance_threshold: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ndcg_k: 10, mrr_k: 10, recall_k: 1000, gain: Gain::Linear, relevance_threshold: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub ndcg: f64,
    pub mrr: f64,
    pub recall: f64,
}

impl QueryMetrics {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Ndcg => self.ndcg,
            Metric::Mrr => self.mrr,
            Metric::Recall => self.recall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub config: EvalConfig,
    pub per_query: BTreeMap<String, QueryMetrics>,
    /// Queries with no relevant judgment (recall reported as 0).
    pub flagged: Vec<String>,
}

impl MetricReport {
    pub fn len(&self) -> usize {
        self.per_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_query.is_empty()
    }

    pub fn mean(&self, m: Metric) -> f64 {
        if self.per_query.is_empty() {
            return 0.0;
        }
        self.per_query.values().map(|q| q.get(m)).sum::<f64>() / self.per_query.len() as f64
    }

    pub fn values(&self, m: Metric) -> BTreeMap<&str, f64> {
        self.per_query.iter().map(|(q, v)| (q.as_str(), v.get(m))).collect()
    }

    pub fn label(&self, m: Metric) -> String {
        match m {
            Metric::Ndcg => format!("ndcg@{}", self.config.ndcg_k),
            Metric::Mrr => format!("mrr@{}", self.config.mrr_k),
            Metric::Recall => format!("recall@{}", self.config.recall_k),
        }
    }

    /// One row per query plus a final `all` row of means.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::Format(e.to_string());
        let ms = [Metric::Ndcg, Metric::Mrr, Metric::Recall];
        let mut header = vec!["query_id".to_string()];
        header.extend(ms.iter().map(|&m| self.label(m)));
        w.write_record(&header).map_err(to_err)?;
        for (q, v) in &self.per_query {
            let mut row = vec![q.clone()];
            row.extend(ms.iter().map(|&m| v.get(m).to_string()));
            w.write_record(&row).map_err(to_err)?;
        }
        let mut row = vec!["all".to_string()];
        row.extend(ms.iter().map(|&m| self.mean(m).to_string()));
        w.write_record(&row).map_err(to_err)?;
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = if self.dataset.is_empty() { "run" } else { &self.dataset };
        writeln!(f, "{name} ({} queries)", self.len())?;
        for m in [Metric::Ndcg, Metric::Mrr, Metric::Recall] {
            writeln!(f, "  {:<14} {:.4}", self.label(m), self.mean(m))?;
        }
        if !self.flagged.is_empty() {
            writeln!(f, "  {} queries without relevant judgments", self.flagged.len())?;
        }
        Ok(())
    }
}

/// Score a run against qrels. Every judged query is evaluated (missing from
/// the run means all metrics 0); run queries without judgments are skipped.
pub fn evaluate_run(run: &RunList, qrels: &Qrels, config: &EvalConfig, dataset: &str) -> MetricReport {
    let mut per_query = BTreeMap::new();
    let mut flagged = Vec::new();
    for q in qrels.query_ids() {
        let judged = qrels.for_query(q).expect("listed query has judgments");
        let entries = run.get(q).unwrap_or_default();
        let grades: Vec<u32> = entries.iter().map(|e| judged.get(&e.doc_id).copied().unwrap_or(0)).collect();
        let all: Vec<u32> = judged.values().copied().collect();
        let relevant: BTreeSet<&str> =
            judged.iter().filter(|(_, &g)| g >= config.relevance_threshold).map(|(d, _)| d.as_str()).collect();
        if relevant.is_empty() {
            flagged.push(q.to_string());
        }
        let docs: Vec<&str> = entries.iter().map(|e| e.doc_id.as_str()).collect();
        per_query.insert(
            q.to_string(),
            QueryMetrics {
                ndcg: ndcg_at_k(&grades, &all, config.ndcg_k, config.gain),
                mrr: mrr_at_k(&grades, config.mrr_k, config.relevance_threshold),
                recall: recall_at_k(&docs, &relevant, config.recall_k),
            },
        );
    }
    MetricReport { dataset: dataset.to_string(), config: *config, per_query, flagged }
}

// ---------------------------------------------------------------------------
// Significance testing

/// Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
}

/// Two-sided paired t-test on `a - b` (sample standard deviation, n − 1
/// degrees of freedom). Zero-variance differences give p = 1 when the mean
/// difference is 0 and p = 0 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df, mean_diff: mean }
        } else {
            TTest { t: f64::INFINITY.copysign(mean), p: 0.0, df, mean_diff: mean }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(TTest { t, p: student_t_two_sided(t, df as f64), df, mean_diff: mean })
}

/// Paired test on one metric of two reports over the same queries.
pub fn paired_t_test_reports(a: &MetricReport, b: &MetricReport, metric: Metric) -> Result<TTest> {
    let (xa, xb) = aligned(a, b, metric)?;
    paired_t_test(&xa, &xb)
}

/// `min(1, m · p)` for each p.
pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 || m < p_values.len() {
        return Err(Error::invalid(format!("Bonferroni m = {m} is less than the {} comparisons", p_values.len())));
    }
    Ok(p_values.iter().map(|&p| (p * m as f64).min(1.0)).collect())
}

fn aligned(a: &MetricReport, b: &MetricReport, metric: Metric) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.per_query.len() != b.per_query.len() || a.per_query.keys().zip(b.per_query.keys()).any(|(x, y)| x != y) {
        return Err(Error::invalid("reports cover different query sets"));
    }
    Ok((a.per_query.values().map(|v| v.get(metric)).collect(), b.per_query.values().map(|v| v.get(metric)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffHistogram {
    pub queries: usize,
    pub degraded: usize,
    pub unchanged: usize,
    pub improved: usize,
    /// Improved by at least `threshold`.
    pub improved_by_threshold: usize,
    pub threshold: f64,
}

impl DiffHistogram {
    fn pct(&self, n: usize) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.queries as f64
        }
    }

    pub fn degraded_pct(&self) -> f64 {
        self.pct(self.degraded)
    }

    pub fn unchanged_pct(&self) -> f64 {
        self.pct(self.unchanged)
    }

    pub fn improved_pct(&self) -> f64 {
        self.pct(self.improved)
    }

    pub fn non_degrading_pct(&self) -> f64 {
        self.pct(self.unchanged + self.improved)
    }

    pub fn improved_by_threshold_pct(&self) -> f64 {
        self.pct(self.improved_by_threshold)
    }
}

impl fmt::Display for DiffHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries:        {}", self.queries)?;
        writeln!(f, "degraded:       {:6.2}%", self.degraded_pct())?;
        writeln!(f, "unchanged:      {:6.2}%", self.unchanged_pct())?;
        writeln!(f, "improved:       {:6.2}%", self.improved_pct())?;
        writeln!(f, "non-degrading:  {:6.2}%", self.non_degrading_pct())?;
        writeln!(f, "improved >= {}: {:6.2}%", self.threshold, self.improved_by_threshold_pct())
    }
}

/// Bucket per-query differences `b - a`.
pub fn diff_histogram(diffs: &[f64], threshold: f64) -> DiffHistogram {
    let mut h = DiffHistogram {
        queries: diffs.len(),
        degraded: 0,
        unchanged: 0,
        improved: 0,
        improved_by_threshold: 0,
        threshold,
    };
    for &d in diffs {
        if d < 0.0 {
            h.degraded += 1;
        } else if d == 0.0 {
            h.unchanged += 1;
        } else {
            h.improved += 1;
            if d >= threshold {
                h.improved_by_threshold += 1;
            }
        }
    }
    h
}

/// Per-query change of `metric` from baseline `a` to system `b`.
pub fn per_query_diff(a: &MetricReport, b: &MetricReport, metric: Metric, threshold: f64) -> Result<DiffHistogram> {
    let (xa, xb) = aligned(a, b, metric)?;
    let diffs: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| y - x).collect();
    Ok(diff_histogram(&diffs, threshold))
}
