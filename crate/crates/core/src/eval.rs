//! Retrieval metrics, pass@k, benchmark loading and the evaluation runner.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::jsonl;

pub const DEFAULT_KS: [usize; 4] = [3, 5, 10, 15];

/// First-occurrence deduplication, warning when anything was removed.
pub fn dedup_ids<S: AsRef<str>>(ids: &[S]) -> Vec<&str> {
    let mut seen = HashSet::new();
    let out: Vec<&str> = ids.iter().map(AsRef::as_ref).filter(|id| seen.insert(*id)).collect();
    if out.len() != ids.len() {
        warn!(removed = ids.len() - out.len(), "duplicate ids in recommendation");
    }
    out
}

fn hits(retrieved: &[&str], relevant: &HashSet<&str>, k: usize) -> usize {
    retrieved.iter().take(k).filter(|id| relevant.contains(*id)).count()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(())
}

/// Share of the first `k` retrieved ids that are relevant; 0 when nothing
/// was retrieved.
pub fn precision_at_k<S: AsRef<str>, R: AsRef<str>>(retrieved: &[S], relevant: &[R], k: usize) -> Result<f64> {
    check_k(k)?;
    let retrieved = dedup_ids(retrieved);
    let relevant: HashSet<&str> = relevant.iter().map(AsRef::as_ref).collect();
    let den = retrieved.len().min(k);
    if den == 0 {
        return Ok(0.0);
    }
    Ok(hits(&retrieved, &relevant, k) as f64 / den as f64)
}

/// Share of the relevant ids found in the first `k` retrieved.
pub fn recall_at_k<S: AsRef<str>, R: AsRef<str>>(retrieved: &[S], relevant: &[R], k: usize) -> Result<f64> {
    check_k(k)?;
    let relevant: HashSet<&str> = relevant.iter().map(AsRef::as_ref).collect();
    if relevant.is_empty() {
        return Err(Error::InvalidArgument("recall needs a non-empty relevant set".into()));
    }
    let retrieved = dedup_ids(retrieved);
    Ok(hits(&retrieved, &relevant, k) as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRecord {
    pub task_id: String,
    /// Generated samples.
    pub n: u64,
    /// Samples that passed every test.
    pub c: u64,
}

impl PassRecord {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c > self.n {
            return Err(Error::InvalidRecord {
                id: self.task_id.clone(),
                message: format!("need 1 <= n and c <= n, got n={} c={}", self.n, self.c),
            });
        }
        Ok(())
    }
}

/// Probability that at least one of `k` samples drawn without replacement
/// from `n` (of which `c` pass) passes: `1 - C(n-c, k) / C(n, k)`.
///
/// The ratio is the product `prod_{i<k} (n-c-i)/(n-i)`, evaluated exactly,
/// so `k = 1` gives exactly `c / n`.
pub fn pass_at_k(record: &PassRecord, k: u64) -> Result<f64> {
    record.validate()?;
    if k == 0 || k > record.n {
        return Err(Error::InvalidArgument(format!(
            "pass@k needs 1 <= k <= n, got k={k} n={}",
            record.n
        )));
    }
    let (n, c) = (record.n, record.c);
    if n - c < k {
        return Ok(1.0);
    }
    let mut num = BigInt::one();
    let mut den = BigInt::one();
    for i in 0..k {
        num *= n - c - i;
        den *= n - i;
    }
    let fail = BigRational::new(num, den);
    (BigRational::one() - fail)
        .to_f64()
        .ok_or_else(|| Error::InvalidArgument("pass@k not representable".into()))
}

pub fn load_pass_records(path: &Path) -> Result<Vec<PassRecord>> {
    let rows: Vec<(usize, PassRecord)> = jsonl::read_numbered(path)?;
    rows.into_iter()
        .map(|(line, r)| {
            r.validate().map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub n_tasks: usize,
    /// Mean pass@k over tasks, for each k.
    pub per_k: BTreeMap<u64, f64>,
}

pub fn pass_report(records: &[PassRecord], ks: &[u64]) -> Result<PassReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no pass records".into()));
    }
    let mut per_k = BTreeMap::new();
    for &k in ks {
        let mut sum = 0.0;
        for r in records {
            sum += pass_at_k(r, k).map_err(|e| Error::InvalidRecord {
                id: r.task_id.clone(),
                message: e.to_string(),
            })?;
        }
        per_k.insert(k, sum / records.len() as f64);
    }
    Ok(PassReport {
        n_tasks: records.len(),
        per_k,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub task: String,
    /// Distinct gold ids in first-seen order.
    pub gold_api_ids: Vec<String>,
    /// Gold list length before deduplication.
    #[serde(skip)]
    pub raw_gold_count: usize,
}

impl EvalSample {
    pub fn new(id: impl Into<String>, task: impl Into<String>, gold: Vec<String>) -> Self {
        let raw_gold_count = gold.len();
        let mut seen = HashSet::new();
        let gold_api_ids = gold.into_iter().filter(|g| seen.insert(g.clone())).collect();
        Self {
            id: id.into(),
            task: task.into(),
            gold_api_ids,
            raw_gold_count,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.task.trim().is_empty() {
            return Err("empty task".into());
        }
        if self.gold_api_ids.is_empty() {
            return Err("gold_api_ids is empty".into());
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: String,
    task: String,
    gold_api_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodegenTask {
    pub id: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_api_ids: Vec<String>,
    /// Shell command that runs the task's tests against generated code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_command: Option<String>,
    /// Path to a PassRecord file with precomputed outcomes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_matrix: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkFormat {
    ApiRec,
    Codegen,
}

impl FromStr for BenchmarkFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "api_rec" => Ok(Self::ApiRec),
            "codegen" => Ok(Self::Codegen),
            _ => Err(Error::InvalidArgument(format!("unknown benchmark format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Benchmark {
    ApiRec(Vec<EvalSample>),
    Codegen(Vec<CodegenTask>),
}

pub fn load_benchmark(path: &Path, format: BenchmarkFormat) -> Result<Benchmark> {
    let bad = |line: usize, message: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        message,
    };
    match format {
        BenchmarkFormat::ApiRec => {
            let rows: Vec<(usize, RawSample)> = jsonl::read_numbered(path)?;
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(rows.len());
            for (line, r) in rows {
                let s = EvalSample::new(r.id, r.task, r.gold_api_ids);
                s.validate().map_err(|m| bad(line, m))?;
                if !seen.insert(s.id.clone()) {
                    return Err(bad(line, format!("duplicate sample id {}", s.id)));
                }
                if s.raw_gold_count != s.gold_api_ids.len() {
                    warn!(sample = %s.id, raw = s.raw_gold_count, distinct = s.gold_api_ids.len(), "duplicate gold ids");
                }
                out.push(s);
            }
            Ok(Benchmark::ApiRec(out))
        }
        BenchmarkFormat::Codegen => {
            let rows: Vec<(usize, CodegenTask)> = jsonl::read_numbered(path)?;
            rows.into_iter()
                .map(|(line, t)| {
                    if t.id.trim().is_empty() || t.task.trim().is_empty() {
                        return Err(bad(line, "empty id or task".into()));
                    }
                    if t.test_command.is_none() && t.pass_matrix.is_none() {
                        return Err(bad(line, "needs test_command or pass_matrix".into()));
                    }
                    Ok(t)
                })
                .collect::<Result<_>>()
                .map(Benchmark::Codegen)
        }
    }
}

/// Every gold id must name a corpus record.
pub fn check_gold(samples: &[EvalSample], corpus: &Corpus) -> Result<()> {
    for s in samples {
        if let Some(g) = s.gold_api_ids.iter().find(|g| !corpus.contains(g)) {
            return Err(Error::InvalidRecord {
                id: s.id.clone(),
                message: format!("gold id {g} not in corpus"),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub id: String,
    pub retrieved: Vec<String>,
    pub per_k: BTreeMap<usize, KMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    /// Samples that produced a recommendation.
    pub n_samples: usize,
    pub n_failed: usize,
    /// Macro averages over successful samples.
    pub per_k: BTreeMap<usize, KMetrics>,
    pub samples: Vec<SampleOutcome>,
    pub failures: Vec<SampleFailure>,
}

fn normalize_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    match ks.first() {
        None => Err(Error::InvalidArgument("no k values".into())),
        Some(0) => Err(Error::InvalidArgument("k must be at least 1".into())),
        _ => Ok(ks),
    }
}

/// Runs `recommend(sample, max_k)` once per sample and scores prefixes of the
/// result at every k. A failing sample is recorded and excluded from the
/// averages. Results keep dataset order regardless of `jobs`.
pub fn evaluate<F>(samples: &[EvalSample], recommend: F, ks: &[usize], mode: &str, jobs: usize) -> Result<MetricsReport>
where
    F: Fn(&EvalSample, usize) -> Result<Vec<String>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let ks = normalize_ks(ks)?;
    let k_max = *ks.last().unwrap();
    let score = |s: &EvalSample| -> std::result::Result<SampleOutcome, SampleFailure> {
        let fail = |e: Error| SampleFailure {
            id: s.id.clone(),
            error: e.to_string(),
        };
        let got = recommend(s, k_max).map_err(fail)?;
        let retrieved: Vec<String> = dedup_ids(&got).into_iter().map(String::from).collect();
        let mut per_k = BTreeMap::new();
        for &k in &ks {
            per_k.insert(
                k,
                KMetrics {
                    recall: recall_at_k(&retrieved, &s.gold_api_ids, k).map_err(fail)?,
                    precision: precision_at_k(&retrieved, &s.gold_api_ids, k).map_err(fail)?,
                },
            );
        }
        Ok(SampleOutcome {
            id: s.id.clone(),
            retrieved,
            per_k,
        })
    };
    let results: Vec<_> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| samples.par_iter().map(score).collect())
    } else {
        samples.iter().map(score).collect()
    };

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(f) => {
                warn!(sample = %f.id, error = %f.error, "sample failed");
                failures.push(f);
            }
        }
    }
    let mut per_k = BTreeMap::new();
    for &k in &ks {
        let (mut r, mut p) = (0.0, 0.0);
        for o in &outcomes {
            r += o.per_k[&k].recall;
            p += o.per_k[&k].precision;
        }
        let n = outcomes.len().max(1) as f64;
        per_k.insert(
            k,
            KMetrics {
                recall: r / n,
                precision: p / n,
            },
        );
    }
    Ok(MetricsReport {
        mode: mode.to_string(),
        n_samples: outcomes.len(),
        n_failed: failures.len(),
        per_k,
        samples: outcomes,
        failures,
    })
}

/// Aligned plain-text table: one row per report, recall and precision (as
/// percentages) per k.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let ks: Vec<usize> = reports
        .iter()
        .flat_map(|r| r.per_k.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = vec!["mode".to_string(), "n".into(), "failed".into()];
    for k in &ks {
        header.push(format!("R@{k}"));
        header.push(format!("P@{k}"));
    }
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.mode.clone(), r.n_samples.to_string(), r.n_failed.to_string()];
        for k in &ks {
            match r.per_k.get(k) {
                Some(m) => {
                    row.push(format!("{:.2}", m.recall * 100.0));
                    row.push(format!("{:.2}", m.precision * 100.0));
                }
                None => row.extend(["-".into(), "-".into()]),
            }
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
