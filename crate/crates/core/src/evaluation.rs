//! Ranking quality and efficiency measurement: TREC qrels and run files,
//! NDCG@k, paired two-sided t-tests, and token/latency accounting.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::decoding::WindowSchedule;
use crate::error::{Error, Result};

/// Relevance grades keyed by query id, then passage id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Qrels {
    pub grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn grade(&self, qid: &str, pid: &str) -> u32 {
        self.grades
            .get(qid)
            .and_then(|m| m.get(pid))
            .copied()
            .unwrap_or(0)
    }

    pub fn insert(&mut self, qid: &str, pid: &str, grade: u32) {
        self.grades
            .entry(qid.to_string())
            .or_default()
            .insert(pid.to_string(), grade);
    }
}

/// Parses `qid 0 docid grade` lines.
pub fn read_qrels(reader: impl BufRead) -> Result<Qrels> {
    let mut q = Qrels::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", fields.len())));
        }
        let grade: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("bad grade `{}`", fields[3])))?;
        if grade < 0 {
            return Err(parse_err(format!("negative grade {grade}")));
        }
        q.insert(fields[0], fields[2], grade as u32);
    }
    Ok(q)
}

pub fn write_qrels(mut w: impl Write, qrels: &Qrels) -> Result<()> {
    for (qid, docs) in &qrels.grades {
        for (pid, g) in docs {
            writeln!(w, "{qid} 0 {pid} {g}")?;
        }
    }
    Ok(())
}

/// Ranked (passage id, score) lists per query, plus a system tag.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunFile {
    pub tag: String,
    pub rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    /// Sets one query's ranking, best first.
    pub fn insert(&mut self, qid: &str, ranking: Vec<(String, f64)>) -> Result<()> {
        let mut ids: Vec<&String> = ranking.iter().map(|(p, _)| p).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate passage in ranking for {qid}")));
        }
        self.rankings.insert(qid.to_string(), ranking);
        Ok(())
    }
}

/// Parses `qid Q0 docid rank score tag` lines; each query's entries are
/// ordered by rank.
pub fn read_run(reader: impl BufRead) -> Result<RunFile> {
    let mut tag = String::new();
    let mut raw: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        if f.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, got {}", f.len())));
        }
        let rank: usize = f[3].parse().map_err(|_| parse_err(format!("bad rank `{}`", f[3])))?;
        let score: f64 = f[4].parse().map_err(|_| parse_err(format!("bad score `{}`", f[4])))?;
        tag = f[5].to_string();
        raw.entry(f[0].to_string()).or_default().push((rank, f[2].to_string(), score));
    }
    let mut run = RunFile::new(tag);
    for (qid, mut rows) in raw {
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i + 1) {
            return Err(Error::Parse {
                line: 0,
                message: format!("ranks for query {qid} are not contiguous from 1"),
            });
        }
        run.insert(&qid, rows.into_iter().map(|(_, p, s)| (p, s)).collect())?;
    }
    Ok(run)
}

pub fn write_run(mut w: impl Write, run: &RunFile) -> Result<()> {
    for (qid, ranking) in &run.rankings {
        for (i, (pid, score)) in ranking.iter().enumerate() {
            writeln!(w, "{qid} Q0 {pid} {} {score:.6} {}", i + 1, run.tag)?;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gain {
    /// 2^rel − 1
    #[default]
    Exponential,
    Linear,
}

impl Gain {
    fn apply(self, rel: u32) -> f64 {
        match self {
            Gain::Exponential => 2f64.powi(rel as i32) - 1.0,
            Gain::Linear => f64::from(rel),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NdcgReport {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    /// Judged queries with no positive grade; scored 0.
    pub no_relevant: Vec<String>,
    /// Run queries absent from the qrels; excluded from the mean.
    pub unjudged: Vec<String>,
}

/// DCG of the first `k` grades.
pub fn dcg(grades: &[u32], k: usize, gain: Gain) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain.apply(g) / ((i + 2) as f64).log2())
        .sum()
}

pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize, gain: Gain) -> Result<NdcgReport> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut report = NdcgReport::default();
    for (qid, ranking) in &run.rankings {
        let Some(judged) = qrels.grades.get(qid) else {
            report.unjudged.push(qid.clone());
            continue;
        };
        let mut ideal: Vec<u32> = judged.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg = dcg(&ideal, k, gain);
        let score = if idcg == 0.0 {
            report.no_relevant.push(qid.clone());
            0.0
        } else {
            let got: Vec<u32> = ranking.iter().map(|(p, _)| qrels.grade(qid, p)).collect();
            dcg(&got, k, gain) / idcg
        };
        report.per_query.insert(qid.clone(), score);
    }
    if !report.per_query.is_empty() {
        report.mean = report.per_query.values().sum::<f64>() / report.per_query.len() as f64;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFlag {
    /// Differences have zero variance but nonzero mean; p reported as 0.
    ZeroVariance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub flag: Option<TestFlag>,
}

/// Two-sided paired t-test over `a[i] - b[i]`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired samples differ in length"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df, flag: None }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
                flag: Some(TestFlag::ZeroVariance),
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df as f64),
        df,
        flag: None,
    })
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
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
    let mut sum = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// I_x(a, b) by the continued fraction, evaluated with modified Lentz.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // The fraction converges fastest below the mean; use symmetry otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
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

/// Observed cost of a reranking run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    /// Prefilled positions; a passage embedding counts as one.
    pub processed: usize,
    pub generated: usize,
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
    pub passes: usize,
}

impl TokenStats {
    pub fn absorb(&mut self, other: &TokenStats) {
        self.processed += other.processed;
        self.generated += other.generated;
        self.prefill_seconds += other.prefill_seconds;
        self.decode_seconds += other.decode_seconds;
        self.passes += other.passes;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Each passage is one embedding position; one token generated per passage.
    Embedding,
    /// Passages are given as text; about `m` tokens generated per passage.
    Text,
}

/// Closed-form token accounting per window pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub mode: CostMode,
    /// Prompt tokens independent of query and passages.
    pub instruction_tokens: f64,
    /// Mean query length in tokens.
    pub query_tokens: f64,
    /// How many times the query is rendered into each prompt.
    pub query_occurrences: f64,
    /// Mean passage length in tokens (text mode only).
    pub passage_tokens: f64,
    /// Template tokens around each listed passage.
    pub item_overhead: f64,
    /// Generated tokens per passage in text mode.
    pub gen_per_passage: f64,
}

pub const DEFAULT_GEN_PER_PASSAGE: f64 = 4.5;

impl CostModel {
    pub fn new(mode: CostMode, instruction_tokens: f64, query_tokens: f64, passage_tokens: f64) -> Self {
        Self {
            mode,
            instruction_tokens,
            query_tokens,
            query_occurrences: 1.0,
            passage_tokens,
            item_overhead: 0.0,
            gen_per_passage: DEFAULT_GEN_PER_PASSAGE,
        }
    }

    /// Model whose embedding-mode counts match the given rendered template
    /// exactly.
    pub fn for_template(
        mode: CostMode,
        template: &crate::lm::PromptTemplate,
        vocab_size: usize,
        query_tokens: f64,
        passage_tokens: f64,
    ) -> Self {
        Self {
            mode,
            instruction_tokens: template.fixed_len(vocab_size) as f64,
            query_tokens,
            query_occurrences: template.query_occurrences() as f64,
            passage_tokens,
            item_overhead: template.item_scaffold_len(vocab_size) as f64,
            gen_per_passage: DEFAULT_GEN_PER_PASSAGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.instruction_tokens,
            self.query_tokens,
            self.query_occurrences,
            self.passage_tokens,
            self.item_overhead,
            self.gen_per_passage,
        ];
        if fields.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("cost model means must be finite and non-negative"));
        }
        Ok(())
    }

    fn per_passage_input(&self) -> f64 {
        self.item_overhead
            + match self.mode {
                CostMode::Embedding => 1.0,
                CostMode::Text => self.passage_tokens,
            }
    }

    fn per_passage_output(&self) -> f64 {
        match self.mode {
            CostMode::Embedding => 1.0,
            CostMode::Text => self.gen_per_passage,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPrediction {
    pub passes: usize,
    pub processed: f64,
    pub generated: f64,
}

/// Predicted totals over every pass of `schedule`.
pub fn predict_cost(model: &CostModel, schedule: &WindowSchedule) -> Result<CostPrediction> {
    model.validate()?;
    let mut processed = 0.0;
    let mut generated = 0.0;
    for (start, end) in schedule.windows() {
        let w = (end - start) as f64;
        processed += model.instruction_tokens
            + model.query_occurrences * model.query_tokens
            + w * model.per_passage_input();
        generated += w * model.per_passage_output();
    }
    Ok(CostPrediction {
        passes: schedule.passes(),
        processed,
        generated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub system: String,
    pub n: usize,
    pub w: usize,
    pub s: usize,
    pub processed: f64,
    pub generated: f64,
    pub prefill_s: f64,
    pub decode_s: f64,
}

pub const EFFICIENCY_HEADER: &str = "system\tn\tw\ts\tprocessed\tgenerated\tprefill_s\tdecode_s";

pub fn write_efficiency_report(mut w: impl Write, rows: &[EfficiencyRow], footer: Option<&str>) -> Result<()> {
    writeln!(w, "{EFFICIENCY_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}",
            r.system, r.n, r.w, r.s, r.processed, r.generated, r.prefill_s, r.decode_s
        )?;
    }
    if let Some(f) = footer {
        for line in f.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(())
}

/// Median of the samples; `None` when empty.
pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qrels_of(qid: &str, grades: &[(&str, u32)]) -> Qrels {
        let mut q = Qrels::default();
        for (p, g) in grades {
            q.insert(qid, p, *g);
        }
        q
    }

    fn run_of(qid: &str, ids: &[&str]) -> RunFile {
        let mut r = RunFile::new("test");
        let n = ids.len();
        r.insert(qid, ids.iter().enumerate().map(|(i, p)| (p.to_string(), (n - i) as f64)).collect())
            .unwrap();
        r
    }

    #[test]
    fn ideal_and_zero_runs() {
        let q = qrels_of("q", &[("a", 3), ("b", 1), ("c", 0)]);
        let r = ndcg_at_k(&run_of("q", &["a", "b", "c"]), &q, 10, Gain::Exponential).unwrap();
        assert_eq!(r.mean, 1.0);
        let r = ndcg_at_k(&run_of("q", &["c", "x"]), &q, 10, Gain::Exponential).unwrap();
        assert_eq!(r.mean, 0.0);
    }

    #[test]
    fn five_doc_example_by_hand() {
        let q = qrels_of("q", &[("d1", 2), ("d2", 0), ("d3", 1), ("d4", 0), ("d5", 3)]);
        let r = ndcg_at_k(&run_of("q", &["d5", "d1", "d3", "d2", "d4"]), &q, 10, Gain::Exponential).unwrap();
        // Run order is already ideal: grades 3, 2, 1, 0, 0.
        assert!((r.mean - 1.0).abs() < 1e-12);
        let r = ndcg_at_k(&run_of("q", &["d1", "d5", "d2", "d3", "d4"]), &q, 10, Gain::Exponential).unwrap();
        let dcg = 3.0 + 7.0 / 3f64.log2() + 0.0 + 1.0 / 5f64.log2();
        let idcg = 7.0 + 3.0 / 3f64.log2() + 1.0 / 2.0;
        assert!((r.mean - dcg / idcg).abs() < 1e-12);
        let lin = ndcg_at_k(&run_of("q", &["d1", "d5", "d2", "d3", "d4"]), &q, 10, Gain::Linear).unwrap();
        let dcg = 2.0 + 3.0 / 3f64.log2() + 1.0 / 5f64.log2();
        let idcg = 3.0 + 2.0 / 3f64.log2() + 0.5;
        assert!((lin.mean - dcg / idcg).abs() < 1e-12);
    }

    #[test]
    fn unjudged_and_unrelevant_queries_are_flagged() {
        let mut q = qrels_of("q1", &[("a", 1)]);
        q.insert("q2", "b", 0);
        let mut run = run_of("q1", &["a"]);
        run.insert("q2", vec![("b".into(), 1.0)]).unwrap();
        run.insert("q3", vec![("c".into(), 1.0)]).unwrap();
        let r = ndcg_at_k(&run, &q, 10, Gain::Exponential).unwrap();
        assert_eq!(r.unjudged, vec!["q3".to_string()]);
        assert_eq!(r.no_relevant, vec!["q2".to_string()]);
        assert_eq!(r.mean, 0.5);
        assert!(ndcg_at_k(&run, &q, 0, Gain::Exponential).is_err());
    }

    #[test]
    fn run_and_qrels_round_trip() {
        let mut run = run_of("q1", &["a", "b"]);
        run.insert("q2", vec![("c".into(), 0.5)]).unwrap();
        let mut buf = Vec::new();
        write_run(&mut buf, &run).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("q1 Q0 a 1 2.000000 test\n"));
        assert_eq!(read_run(buf.as_slice()).unwrap(), run);

        let q = qrels_of("q", &[("a", 2), ("b", 0)]);
        let mut buf = Vec::new();
        write_qrels(&mut buf, &q).unwrap();
        assert_eq!(read_qrels(buf.as_slice()).unwrap(), q);
        assert!(matches!(read_qrels("q 0 a -1\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
        assert!(read_run("q Q0 a 2 1.0 t\n".as_bytes()).is_err());
    }

    #[test]
    fn ttest_degenerate_cases() {
        let a = [0.3, 0.5, 0.9];
        let t = paired_ttest(&a, &a).unwrap();
        assert_eq!((t.t, t.p), (0.0, 1.0));
        let t = paired_ttest(&[2.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(t.p, 0.0);
        assert_eq!(t.flag, Some(TestFlag::ZeroVariance));
        assert!(paired_ttest(&[1.0], &[0.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, 1) = x and I_x(a, 1) = x^a.
        for x in [0.1, 0.5, 0.9] {
            assert!((regularized_incomplete_beta(x, 1.0, 1.0) - x).abs() < 1e-12);
            assert!((regularized_incomplete_beta(x, 3.0, 1.0) - x.powi(3)).abs() < 1e-12);
        }
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
        // t with 1 df is Cauchy: P(|T| > 1) = 0.5.
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cost_prediction_matches_window_arithmetic() {
        let sched = WindowSchedule::new(100, 20, 10).unwrap();
        let emb = CostModel::new(CostMode::Embedding, 50.0, 8.0, 60.0);
        let p = predict_cost(&emb, &sched).unwrap();
        assert_eq!((p.passes, p.generated), (9, 180.0));
        assert_eq!(p.processed, 9.0 * (58.0 + 20.0));
        let text = CostModel::new(CostMode::Text, 50.0, 8.0, 60.0);
        let p = predict_cost(&text, &sched).unwrap();
        assert!((p.generated - 810.0).abs() < 1e-9);
        let single = predict_cost(&emb, &WindowSchedule::new(20, 20, 10).unwrap()).unwrap();
        assert_eq!(single.generated, 20.0);
        let bad = CostModel::new(CostMode::Text, -1.0, 0.0, 0.0);
        assert!(predict_cost(&bad, &sched).is_err());
    }

    #[test]
    fn report_has_fixed_columns() {
        let mut buf = Vec::new();
        let row = EfficiencyRow {
            system: "embedding".into(),
            n: 100,
            w: 20,
            s: 10,
            processed: 900.0,
            generated: 180.0,
            prefill_s: 0.1,
            decode_s: 0.2,
        };
        write_efficiency_report(&mut buf, &[row], Some("text mode is modeled")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], EFFICIENCY_HEADER);
        assert_eq!(lines[1].split('\t').count(), 8);
        assert_eq!(lines[2], "# text mode is modeled");
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    }

    proptest! {
        #[test]
        fn ndcg_is_bounded(grades in prop::collection::vec(0u32..4, 1..15), seed in 0u64..1000) {
            let mut q = Qrels::default();
            let ids: Vec<String> = (0..grades.len()).map(|i| format!("d{i}")).collect();
            for (id, g) in ids.iter().zip(&grades) {
                q.insert("q", id, *g);
            }
            let mut order = ids.clone();
            crate::numerics::Rng::new(seed).shuffle(&mut order);
            let mut run = RunFile::new("t");
            run.insert("q", order.iter().map(|p| (p.clone(), 0.0)).collect()).unwrap();
            let r = ndcg_at_k(&run, &q, 10, Gain::Exponential).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r.mean));
            let sorted = order.windows(2).take(9).all(|w| q.grade("q", &w[0]) >= q.grade("q", &w[1]));
            if grades.iter().any(|&g| g > 0) && sorted && order.len() <= 10 {
                prop_assert!((r.mean - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ttest_self_is_one(a in prop::collection::vec(-10.0f64..10.0, 2..20)) {
            prop_assert_eq!(paired_ttest(&a, &a).unwrap().p, 1.0);
        }
    }
}
