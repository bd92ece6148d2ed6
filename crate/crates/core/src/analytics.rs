//! Federated analytics under local differential privacy.
//!
//! Devices strip their identity ([`de_identify`]), perturb their statistic
//! ([`krr_perturb`] for categorical buckets, [`perturb_value`] for means) and
//! only then report. The server debiases the noisy histogram per cluster
//! ([`heavy_hitters`]) or averages noisy values ([`mean_of_reports`]).

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("value {0} lies outside the bucket domain")]
    OutOfDomain(f64),
    #[error("invalid bucket spec: {0}")]
    InvalidBuckets(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("observed counts sum to {observed}, expected {n}")]
    MismatchedTotal { observed: u64, n: u64 },
    #[error("privacy budget makes true and false report probabilities equal")]
    DegenerateBudget,
    #[error("no reports to analyze")]
    NoReports,
    #[error("no values to average")]
    EmptyInput,
    #[error("report for query {found:?} given to query {expected:?}")]
    WrongQuery { expected: String, found: String },
    #[error("report payload does not fit the query: {0}")]
    BadPayload(String),
}

/// Half-open buckets `[edges[i], edges[i+1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSpec {
    pub edges: Vec<f64>,
    pub clamp: bool,
}

impl BucketSpec {
    /// Step-count default: 13 edges from 0 to 24000 in steps of 2000, clamped.
    pub fn default_steps() -> Self {
        BucketSpec {
            edges: (0..=12).map(|i| f64::from(i) * 2000.0).collect(),
            clamp: true,
        }
    }

    pub fn num_buckets(&self) -> usize {
        self.edges.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.edges.len() < 3 {
            return Err(AnalyticsError::InvalidBuckets(
                "need at least 2 buckets".into(),
            ));
        }
        if self.edges.iter().any(|e| !e.is_finite()) {
            return Err(AnalyticsError::InvalidBuckets(
                "edges must be finite".into(),
            ));
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalyticsError::InvalidBuckets(
                "edges must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Index of the bucket holding `value`.
pub fn bucketize(value: f64, spec: &BucketSpec) -> Result<usize, AnalyticsError> {
    let b = spec.num_buckets();
    let lo = spec.edges[0];
    let hi = spec.edges[b];
    if value.is_nan() {
        return Err(AnalyticsError::OutOfDomain(value));
    }
    if value < lo {
        return if spec.clamp {
            Ok(0)
        } else {
            Err(AnalyticsError::OutOfDomain(value))
        };
    }
    if value >= hi {
        return if spec.clamp {
            Ok(b - 1)
        } else {
            Err(AnalyticsError::OutOfDomain(value))
        };
    }
    // number of interior edges <= value
    Ok(spec.edges[1..b].partition_point(|e| *e <= value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeavyHittersQuery {
    pub buckets: BucketSpec,
    pub k: usize,
    pub epsilon: f64,
    /// Device attribute used as the cluster label (`"cluster"` or `"archetype"`).
    pub cluster_by: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpMeanQuery {
    pub attribute: String,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub epsilon: f64,
}

impl DpMeanQuery {
    pub fn laplace_scale(&self) -> f64 {
        (self.clip_hi - self.clip_lo) / self.epsilon
    }

    pub fn clip(&self, v: f64) -> f64 {
        v.clamp(self.clip_lo, self.clip_hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FAQueryKind {
    HeavyHitters(HeavyHittersQuery),
    DPMean(DpMeanQuery),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FAQuery {
    pub query_id: String,
    pub kind: FAQueryKind,
}

impl FAQuery {
    pub fn validate(&self) -> Result<(), AnalyticsError> {
        if self.query_id.is_empty() {
            return Err(AnalyticsError::InvalidQuery("empty query_id".into()));
        }
        match &self.kind {
            FAQueryKind::HeavyHitters(q) => {
                q.buckets.validate()?;
                if q.k == 0 || q.k > q.buckets.num_buckets() {
                    return Err(AnalyticsError::InvalidQuery(format!(
                        "k = {} must lie in 1..={}",
                        q.k,
                        q.buckets.num_buckets()
                    )));
                }
                if !(q.epsilon > 0.0) {
                    return Err(AnalyticsError::InvalidQuery("epsilon must be > 0".into()));
                }
            }
            FAQueryKind::DPMean(q) => {
                if !(q.clip_lo < q.clip_hi) || !q.clip_lo.is_finite() || !q.clip_hi.is_finite() {
                    return Err(AnalyticsError::InvalidQuery(
                        "need finite clip_lo < clip_hi".into(),
                    ));
                }
                if !(q.epsilon > 0.0) {
                    return Err(AnalyticsError::InvalidQuery("epsilon must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Fresh, unlinkable per-query token (128 random bits, hex).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pseudonym(pub String);

impl fmt::Display for Pseudonym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// What a device holds before de-identification.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub client_id: String,
    pub cluster: Option<String>,
}

/// De-identified report header; it has no field that carries the client id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSkeleton {
    pub query_id: String,
    pub pseudonym: Pseudonym,
    pub cluster: Option<String>,
}

impl ReportSkeleton {
    pub fn with_payload(self, payload: ReportPayload) -> PerturbedReport {
        PerturbedReport {
            query_id: self.query_id,
            pseudonym: self.pseudonym,
            payload,
            cluster: self.cluster,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ReportPayload {
    Bucket(usize),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedReport {
    pub query_id: String,
    pub pseudonym: Pseudonym,
    pub payload: ReportPayload,
    pub cluster: Option<String>,
}

/// Drops the stable client id and attaches a fresh pseudonym drawn from `rng`.
///
/// Callers must seed `rng` independently per (client, query).
pub fn de_identify<R: Rng + ?Sized>(
    record: RawRecord,
    query_id: &str,
    rng: &mut R,
) -> ReportSkeleton {
    let token: u128 = rng.random();
    ReportSkeleton {
        query_id: query_id.to_string(),
        pseudonym: Pseudonym(format!("{token:032x}")),
        cluster: record.cluster,
    }
}

/// `(p, q)`: probability of reporting the true bucket and each specific other bucket.
pub fn krr_probabilities(num_buckets: usize, epsilon: f64) -> (f64, f64) {
    // divide through by e^eps so large budgets do not overflow
    let e = (-epsilon).exp();
    let denom = 1.0 + (num_buckets as f64 - 1.0) * e;
    (1.0 / denom, e / denom)
}

/// k-ary randomized response.
pub fn krr_perturb<R: Rng + ?Sized>(
    true_bucket: usize,
    num_buckets: usize,
    epsilon: f64,
    rng: &mut R,
) -> usize {
    debug_assert!(true_bucket < num_buckets);
    let (p, _) = krr_probabilities(num_buckets, epsilon);
    if rng.random::<f64>() < p {
        return true_bucket;
    }
    let other = rng.random_range(0..num_buckets - 1);
    if other >= true_bucket {
        other + 1
    } else {
        other
    }
}

/// Unbiased estimate of the true counts from k-RR observations.
pub fn debias_histogram(
    observed: &[u64],
    n: u64,
    num_buckets: usize,
    epsilon: f64,
) -> Result<Vec<f64>, AnalyticsError> {
    if observed.len() != num_buckets {
        return Err(AnalyticsError::InvalidBuckets(format!(
            "{} counts for {num_buckets} buckets",
            observed.len()
        )));
    }
    let total: u64 = observed.iter().sum();
    if total != n || n == 0 {
        return Err(AnalyticsError::MismatchedTotal { observed: total, n });
    }
    let (p, q) = krr_probabilities(num_buckets, epsilon);
    if !(p > q) {
        return Err(AnalyticsError::DegenerateBudget);
    }
    let nq = n as f64 * q;
    Ok(observed
        .iter()
        .map(|&c| (c as f64 - nq) / (p - q))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketEstimate {
    pub bucket: usize,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTop {
    pub cluster: Option<String>,
    pub top: Vec<BucketEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeavyHitterResult {
    pub query_id: String,
    pub per_cluster: Vec<ClusterTop>,
    pub n_reports: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpMeanResult {
    pub query_id: String,
    pub attribute: String,
    pub mean: f64,
    pub n_reports: usize,
}

/// A completed FA query, as exported to the console and persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum FaResult {
    HeavyHitters(HeavyHitterResult),
    DPMean(DpMeanResult),
}

impl FaResult {
    pub fn query_id(&self) -> &str {
        match self {
            FaResult::HeavyHitters(r) => &r.query_id,
            FaResult::DPMean(r) => &r.query_id,
        }
    }
}

/// Top-k descending by estimate, ties to the lower bucket.
pub fn top_k(estimates: &[f64], k: usize) -> Vec<BucketEstimate> {
    let mut ranked: Vec<BucketEstimate> = estimates
        .iter()
        .enumerate()
        .map(|(bucket, &estimate)| BucketEstimate { bucket, estimate })
        .collect();
    ranked.sort_by(|a, b| {
        b.estimate
            .total_cmp(&a.estimate)
            .then(a.bucket.cmp(&b.bucket))
    });
    ranked.truncate(k);
    ranked
}

/// Per-cluster debiased top-k buckets.
pub fn heavy_hitters(
    reports: &[PerturbedReport],
    query_id: &str,
    query: &HeavyHittersQuery,
) -> Result<HeavyHitterResult, AnalyticsError> {
    if reports.is_empty() {
        return Err(AnalyticsError::NoReports);
    }
    let b = query.buckets.num_buckets();
    let mut hist: BTreeMap<Option<String>, Vec<u64>> = BTreeMap::new();
    for r in reports {
        if r.query_id != query_id {
            return Err(AnalyticsError::WrongQuery {
                expected: query_id.into(),
                found: r.query_id.clone(),
            });
        }
        let bucket = match r.payload {
            ReportPayload::Bucket(i) if i < b => i,
            other => {
                return Err(AnalyticsError::BadPayload(format!(
                    "{other:?} for {b} buckets"
                )))
            }
        };
        hist.entry(r.cluster.clone()).or_insert_with(|| vec![0; b])[bucket] += 1;
    }
    let per_cluster = hist
        .into_iter()
        .map(|(cluster, counts)| {
            let n = counts.iter().sum();
            let est = debias_histogram(&counts, n, b, query.epsilon)?;
            Ok(ClusterTop {
                cluster,
                top: top_k(&est, query.k),
            })
        })
        .collect::<Result<_, AnalyticsError>>()?;
    Ok(HeavyHitterResult {
        query_id: query_id.into(),
        per_cluster,
        n_reports: reports.len(),
    })
}

/// Zero-mean Laplace sample with the given scale.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u = loop {
        let u = rng.random::<f64>() - 0.5;
        if u != -0.5 {
            break u;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Clipped mean with Laplace noise of scale `(clip_hi - clip_lo) / epsilon` on the sum.
pub fn dp_mean<R: Rng + ?Sized>(
    values: &[f64],
    query: &DpMeanQuery,
    rng: &mut R,
) -> Result<f64, AnalyticsError> {
    if values.is_empty() {
        return Err(AnalyticsError::EmptyInput);
    }
    let sum: f64 = values.iter().map(|&v| query.clip(v)).sum();
    Ok((sum + sample_laplace(query.laplace_scale(), rng)) / values.len() as f64)
}

/// Device-side contribution to a DP mean: the clipped value plus local Laplace noise.
pub fn perturb_value<R: Rng + ?Sized>(value: f64, query: &DpMeanQuery, rng: &mut R) -> f64 {
    query.clip(value) + sample_laplace(query.laplace_scale(), rng)
}

/// Server-side average of locally perturbed values. Values are summed in
/// sorted order so the result is independent of arrival order.
pub fn mean_of_reports(
    reports: &[PerturbedReport],
    query_id: &str,
    query: &DpMeanQuery,
) -> Result<DpMeanResult, AnalyticsError> {
    if reports.is_empty() {
        return Err(AnalyticsError::NoReports);
    }
    let mut values = Vec::with_capacity(reports.len());
    for r in reports {
        if r.query_id != query_id {
            return Err(AnalyticsError::WrongQuery {
                expected: query_id.into(),
                found: r.query_id.clone(),
            });
        }
        match r.payload {
            ReportPayload::Value(v) if v.is_finite() => values.push(v),
            other => {
                return Err(AnalyticsError::BadPayload(format!(
                    "{other:?} for a mean query"
                )))
            }
        }
    }
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(DpMeanResult {
        query_id: query_id.into(),
        attribute: query.attribute.clone(),
        mean,
        n_reports: values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub dp_mean_steps: f64,
    pub dp_mean_calories: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserLocal {
    pub steps: f64,
    pub calories: f64,
}

/// Relative band edges around the cohort mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            low: 0.8,
            high: 1.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    IncreaseActivity,
    OnTrack,
    MaintainHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Recommendation {
    pub steps: Band,
    pub calories: Band,
}

fn band(user: f64, cohort: f64, th: &Thresholds) -> Band {
    // a non-positive cohort mean collapses both bands
    if !(cohort > 0.0) || !cohort.is_finite() {
        return Band::OnTrack;
    }
    if user < th.low * cohort {
        Band::IncreaseActivity
    } else if user > th.high * cohort {
        Band::MaintainHigh
    } else {
        Band::OnTrack
    }
}

pub fn recommend(cohort: &CohortStats, user: &UserLocal, th: &Thresholds) -> Recommendation {
    Recommendation {
        steps: band(user.steps, cohort.dp_mean_steps, th),
        calories: band(user.calories, cohort.dp_mean_calories, th),
    }
}
