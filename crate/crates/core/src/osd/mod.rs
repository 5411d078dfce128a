//! Dataset distillation: reduce a closed-loop state→action log to a
//! minimum-separation subset under a joint state/action cost.
//!
//! The cost between two records is a quadratic form (Mahalanobis distance in
//! the state plus a weighted squared action gap). The streaming filter
//! [`build_osd`] keeps a record only when no kept record is within cost
//! `j_star` of it, so the output satisfies, by construction:
//!
//! - **separation** — every pair of kept records has cost > `j_star`;
//! - **coverage** — every stream record has a kept neighbor within `j_star`
//!   (itself if it was kept), with action gap at most `u_s`.
//!
//! Retrieval during the build is served by an [`hnsw::HnswIndex`]; every
//! accept/reject decision is still *certified exact* (see `build_osd`), so
//! the output is bitwise identical to a brute-force scan.
//!
//! All costs everywhere — filter, exact scans, graph search, verification —
//! are evaluated through one pipeline: embed each record as the 9-vector
//! `[Lᵀx, √s_u·u]` (`L·Lᵀ = s_x`) and take squared Euclidean distance. One
//! float path means exact cross-checks between the routes are meaningful.

pub mod hnsw;

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{Cholesky, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{DataPair, STATE_DIM};
use crate::error::{Error, Result};
use crate::mpc::AugmentedState;

pub use hnsw::{HnswIndex, HnswKnobs};

/// Dimension of the joint embedding: state part plus one action coordinate.
pub const EMBED_DIM: usize = STATE_DIM + 1;

/// Minimum sample size accepted by [`estimate_state_metric`].
pub const MIN_METRIC_RECORDS: usize = 10_000;

/// State-space part of the cost metric.
pub type StateMetric = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Total-ordered `f64` key for B-tree sets and binary heaps.
///
/// Only finite values are ever stored (records are validated on
/// construction), so `total_cmp` agrees with the usual order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Of64(pub f64);

impl Eq for Of64 {}

impl Ord for Of64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Of64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Parameters of the pairwise cost and the separation threshold.
#[derive(Clone, Debug)]
pub struct OsdParams {
    /// Separation threshold: records closer than this are redundant.
    pub j_star: f64,
    /// Symmetric positive-definite state metric.
    pub s_x: StateMetric,
    /// Weight on the squared action gap, ≥ 0.
    pub s_u: f64,
}

impl OsdParams {
    /// Validates and symmetrizes the state metric exactly.
    pub fn new(j_star: f64, s_x: StateMetric, s_u: f64) -> Result<Self> {
        let mut scale: f64 = 0.0;
        for v in s_x.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("state metric"));
            }
            scale = scale.max(v.abs());
        }
        let skew = (s_x - s_x.transpose()).abs().max();
        if skew > 1e-9 * scale.max(1.0) {
            return Err(Error::InvalidParams(format!(
                "state metric not symmetric (max skew {skew:.3e})"
            )));
        }
        let params = Self {
            j_star,
            s_x: (s_x + s_x.transpose()) * 0.5,
            s_u,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.j_star.is_finite() || self.j_star <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "separation threshold must be positive, got {}",
                self.j_star
            )));
        }
        if !self.s_u.is_finite() || self.s_u < 0.0 {
            return Err(Error::InvalidParams(format!(
                "action weight must be ≥ 0, got {}",
                self.s_u
            )));
        }
        if self.s_x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state metric"));
        }
        if (self.s_x - self.s_x.transpose()).abs().max() != 0.0 {
            return Err(Error::InvalidParams("state metric not symmetric".into()));
        }
        if Cholesky::new(self.s_x).is_none() {
            return Err(Error::InvalidParams(
                "state metric not positive definite".into(),
            ));
        }
        Ok(())
    }

    /// Identity state metric — convenient for tests and synthetic data.
    pub fn identity(j_star: f64, s_u: f64) -> Result<Self> {
        Self::new(j_star, StateMetric::identity(), s_u)
    }

    /// True when `other` defines the same cost metric (threshold excluded —
    /// it plays no role in distances).
    pub fn metric_matches(&self, other: &OsdParams) -> bool {
        self.s_x == other.s_x && self.s_u == other.s_u
    }
}

/// Factored form of the cost: maps records into ℝ⁹ where the pairwise cost
/// is plain squared Euclidean distance.
#[derive(Clone, Debug)]
pub struct CostEmbedding {
    /// Upper-triangular `Lᵀ` with `L·Lᵀ = s_x`.
    l_t: StateMetric,
    su_sqrt: f64,
}

impl CostEmbedding {
    pub fn new(params: &OsdParams) -> Result<Self> {
        params.validate()?;
        let chol = Cholesky::new(params.s_x)
            .ok_or_else(|| Error::InvalidParams("state metric not positive definite".into()))?;
        Ok(Self {
            l_t: chol.l().transpose(),
            su_sqrt: params.s_u.sqrt(),
        })
    }

    /// Joint embedding `[Lᵀx, √s_u·u]`.
    pub fn embed(&self, pair: &DataPair) -> [f64; EMBED_DIM] {
        let v = self.l_t * SVector::from(pair.x);
        let mut out = [0.0; EMBED_DIM];
        out[..STATE_DIM].copy_from_slice(v.as_slice());
        out[STATE_DIM] = self.su_sqrt * pair.u;
        out
    }

    /// State-only embedding, for action-blind retrieval. The action slot is
    /// zero, so distances over the full vector equal state-only distances.
    pub fn embed_state(&self, x: &[f64; STATE_DIM]) -> [f64; EMBED_DIM] {
        let v = self.l_t * SVector::from(*x);
        let mut out = [0.0; EMBED_DIM];
        out[..STATE_DIM].copy_from_slice(v.as_slice());
        out
    }
}

/// Squared Euclidean distance in the embedding — the single cost kernel.
#[inline]
pub(crate) fn dist2(a: &[f64; EMBED_DIM], b: &[f64; EMBED_DIM]) -> f64 {
    let mut acc = 0.0;
    for i in 0..EMBED_DIM {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Squared distance over the state part only (first eight coordinates).
#[inline]
fn state_dist2(a: &[f64; EMBED_DIM], b: &[f64; EMBED_DIM]) -> f64 {
    let mut acc = 0.0;
    for i in 0..STATE_DIM {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Pairwise cost `(xₐ−x_b)ᵀ s_x (xₐ−x_b) + s_u (uₐ−u_b)²`, evaluated through
/// the embedding so it is bitwise consistent with every retrieval path.
pub fn pair_cost(a: &DataPair, b: &DataPair, params: &OsdParams) -> Result<f64> {
    let emb = CostEmbedding::new(params)?;
    Ok(dist2(&emb.embed(a), &emb.embed(b)))
}

/// Inverse regularized sample covariance of the states: the Mahalanobis
/// metric `(Σ + εI)⁻¹` with `ε = 1e−6·trace(Σ)/8`.
pub fn estimate_state_metric(records: &[DataPair]) -> Result<StateMetric> {
    if records.len() < MIN_METRIC_RECORDS {
        return Err(Error::Metric(format!(
            "need at least {MIN_METRIC_RECORDS} records, got {}",
            records.len()
        )));
    }
    let n = records.len() as f64;
    let mut mean = SVector::<f64, STATE_DIM>::zeros();
    for r in records {
        mean += SVector::from(r.x);
    }
    mean /= n;
    let mut cov = StateMetric::zeros();
    for r in records {
        let d = SVector::from(r.x) - mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= n - 1.0;
    let eps = 1e-6 * cov.trace() / STATE_DIM as f64;
    if !(eps > 0.0) {
        return Err(Error::Metric(
            "states have zero total variance; metric undefined".into(),
        ));
    }
    let reg = cov + StateMetric::identity() * eps;
    let chol = Cholesky::new(reg)
        .ok_or_else(|| Error::Metric("covariance not positive definite after regularization".into()))?;
    let inv = chol.inverse();
    Ok((inv + inv.transpose()) * 0.5)
}

/// Rejection-rate bookkeeping over a trailing window of the build stream.
///
/// The ratio of the trailing window is the saturation signal: once nearly
/// every incoming record is rejected, the output has stopped growing at this
/// resolution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaturationStats {
    pub window_size: usize,
    /// Rejections inside the trailing window when the build ended.
    pub rejections_in_window: usize,
    /// `(records processed, trailing rejection ratio)`, sampled once per
    /// `window_size` records plus a final point at the end of the stream.
    pub rejection_ratio_history: Vec<(u64, f64)>,
}

impl SaturationStats {
    /// Trailing rejection ratio at the end of the build.
    pub fn end_ratio(&self) -> f64 {
        self.rejection_ratio_history
            .last()
            .map(|&(_, r)| r)
            .unwrap_or(0.0)
    }
}

/// A distilled dataset: the kept records plus the accuracy certificate.
#[derive(Clone, Debug)]
pub struct Osd {
    pub params: OsdParams,
    /// Kept records, in acceptance order.
    pub records: Vec<DataPair>,
    /// Running max action gap between rejected records and the stored
    /// neighbor that rejected them. The post-build rescan in [`verify_osd`]
    /// recomputes this against exact nearest neighbors; that recomputed
    /// value is the authoritative accuracy figure.
    pub build_us: f64,
    pub stats: SaturationStats,
}

/// Exact nearest stored record under the joint cost; ties broken by the
/// smallest index.
pub fn nn_exact(query: &DataPair, osd: &Osd) -> Result<(usize, f64)> {
    if osd.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let emb = CostEmbedding::new(&osd.params)?;
    let q = emb.embed(query);
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, r) in osd.records.iter().enumerate() {
        let c = dist2(&q, &emb.embed(r));
        if c < best.1 {
            best = (i, c);
        }
    }
    Ok(best)
}

/// Tuning for [`build_osd`] beyond the cost parameters.
#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub hnsw: HnswKnobs,
    /// Trailing-window length for the saturation statistics.
    pub saturation_window: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            hnsw: HnswKnobs::default(),
            saturation_window: 10_000,
        }
    }
}

/// Minimum-cost stored record within `cap`, via the sorted first-coordinate
/// window. Any record with cost ≤ cap differs from the query by at most
/// √cap in every embedding coordinate, so scanning the first-coordinate
/// interval `[q₀−√cap, q₀+√cap]` is an exhaustive search.
fn scan_within(
    axis: &BTreeSet<(Of64, u32)>,
    embedded: &[[f64; EMBED_DIM]],
    q: &[f64; EMBED_DIM],
    cap: f64,
) -> Option<(u32, f64)> {
    let w = cap.sqrt();
    let lo = (Of64(q[0] - w), u32::MIN);
    let hi = (Of64(q[0] + w), u32::MAX);
    let mut best: Option<(f64, u32)> = None;
    for &(_, id) in axis.range(lo..=hi) {
        let c = dist2(q, &embedded[id as usize]);
        if c <= cap && best.is_none_or(|(bc, bi)| (c, id) < (bc, bi)) {
            best = Some((c, id));
        }
    }
    best.map(|(c, id)| (id, c))
}

/// The streaming distillation filter.
///
/// Walks the stream once. The first record seeds the output; each later
/// record is kept iff its nearest kept record has cost > `j_star`, and
/// otherwise its action gap to the rejecting neighbor updates the running
/// accuracy bound `u_s`.
///
/// Retrieval is two-tier and every decision is certified exact:
///
/// - the graph index proposes a neighbor; if its cost is ≤ `j_star` that
///   neighbor is a *witness* — the rejection is provably correct no matter
///   how approximate the search was;
/// - if the graph finds nothing within `j_star`, an exact window scan over
///   the sorted first embedding coordinate confirms the accept (or supplies
///   the missed witness).
///
/// Membership is therefore bitwise identical to a brute-force scan. The
/// running `u_s` uses the witness's action (the graph's neighbor need not be
/// the exact nearest), which is why the recomputed post-build value from
/// [`verify_osd`] is authoritative.
///
/// Output is order-dependent: permuting the stream changes which records
/// are kept. Upstream generation already randomizes the order.
pub fn build_osd<I>(stream: I, params: &OsdParams, opts: &BuildOptions) -> Result<Osd>
where
    I: IntoIterator<Item = DataPair>,
{
    params.validate()?;
    if opts.saturation_window == 0 {
        return Err(Error::InvalidParams("saturation window must be ≥ 1".into()));
    }
    let embedding = CostEmbedding::new(params)?;
    let mut index = HnswIndex::new(params.clone(), opts.hnsw.clone())?;
    let mut records: Vec<DataPair> = Vec::new();
    let mut embedded: Vec<[f64; EMBED_DIM]> = Vec::new();
    let mut axis: BTreeSet<(Of64, u32)> = BTreeSet::new();
    let mut build_us = 0.0_f64;

    let mut window: VecDeque<bool> = VecDeque::with_capacity(opts.saturation_window);
    let mut rejects_in_window = 0usize;
    let mut processed: u64 = 0;
    let mut history: Vec<(u64, f64)> = Vec::new();

    for pair in stream {
        let q = embedding.embed(&pair);
        let witness = if records.is_empty() {
            None
        } else {
            match index.nearest_embedded(&q, opts.hnsw.ef_search) {
                Some((id, c)) if c <= params.j_star => Some((id, c)),
                _ => scan_within(&axis, &embedded, &q, params.j_star),
            }
        };
        match witness {
            Some((id, _)) => {
                let gap = (pair.u - records[id as usize].u).abs();
                if gap > build_us {
                    build_us = gap;
                }
            }
            None => {
                let id = index.insert(pair) as u32;
                debug_assert_eq!(id as usize, records.len());
                axis.insert((Of64(q[0]), id));
                embedded.push(q);
                records.push(pair);
            }
        }

        let rejected = witness.is_some();
        if window.len() == opts.saturation_window && window.pop_front() == Some(true) {
            rejects_in_window -= 1;
        }
        window.push_back(rejected);
        if rejected {
            rejects_in_window += 1;
        }
        processed += 1;
        if processed % opts.saturation_window as u64 == 0 {
            history.push((processed, rejects_in_window as f64 / window.len() as f64));
        }
    }
    if processed == 0 {
        return Err(Error::EmptyDataset);
    }
    if history.last().map(|&(p, _)| p) != Some(processed) {
        history.push((processed, rejects_in_window as f64 / window.len() as f64));
    }

    Ok(Osd {
        params: params.clone(),
        records,
        build_us,
        stats: SaturationStats {
            window_size: opts.saturation_window,
            rejections_in_window: rejects_in_window,
            rejection_ratio_history: history,
        },
    })
}

/// Static exact-nearest-neighbor accelerator: record ids sorted by the first
/// embedding coordinate, searched by expanding outward from the query's
/// position until the axis gap alone exceeds the best cost found.
struct AxisIndex<'a> {
    embedded: &'a [[f64; EMBED_DIM]],
    /// Record ids in ascending order of their first embedding coordinate.
    order: Vec<u32>,
    /// First coordinates, parallel to `order`.
    keys: Vec<f64>,
}

impl<'a> AxisIndex<'a> {
    fn build(embedded: &'a [[f64; EMBED_DIM]]) -> Self {
        let mut order: Vec<u32> = (0..embedded.len() as u32).collect();
        order.sort_by(|&a, &b| {
            embedded[a as usize][0]
                .total_cmp(&embedded[b as usize][0])
                .then(a.cmp(&b))
        });
        let keys = order.iter().map(|&id| embedded[id as usize][0]).collect();
        Self {
            embedded,
            order,
            keys,
        }
    }

    /// Exact nearest record to `q`, optionally skipping one id; ties broken
    /// by smallest id. `cap` bounds the search: records with cost > `cap`
    /// are ignored (pass `INFINITY` for an unbounded search).
    fn exact_nn(&self, q: &[f64; EMBED_DIM], skip: Option<u32>, cap: f64) -> Option<(u32, f64)> {
        let n = self.order.len();
        if n == 0 {
            return None;
        }
        let start = self.keys.partition_point(|&k| k < q[0]);
        let mut best: Option<(f64, u32)> = None;
        // Interleave the two directions so the stop bound tightens fast.
        let mut up = start; // first index with key ≥ q0
        let mut down = start; // one past the last index with key < q0
        loop {
            let bound = best.map_or(cap, |(c, _)| c.min(cap));
            let up_gap = if up < n {
                let g = self.keys[up] - q[0];
                g * g
            } else {
                f64::INFINITY
            };
            let down_gap = if down > 0 {
                let g = q[0] - self.keys[down - 1];
                g * g
            } else {
                f64::INFINITY
            };
            let (idx, gap) = if up_gap <= down_gap {
                (up, up_gap)
            } else {
                (down - 1, down_gap)
            };
            if gap > bound || gap == f64::INFINITY {
                break;
            }
            if idx == up {
                up += 1;
            } else {
                down -= 1;
            }
            let id = self.order[idx];
            if Some(id) == skip {
                continue;
            }
            let c = dist2(q, &self.embedded[id as usize]);
            if c <= cap && best.is_none_or(|(bc, bi)| (c, id) < (bc, bi)) {
                best = Some((c, id));
            }
        }
        best.map(|(c, id)| (id, c))
    }
}

/// Deterministic parallel map: fixed-size chunks evaluated in parallel,
/// partials merged in chunk order, so results are independent of thread
/// count and scheduling.
fn chunked_map<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let slabs: Vec<Vec<R>> = items
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, slab)| {
            let base = ci * chunk;
            slab.iter()
                .enumerate()
                .map(|(i, t)| f(base + i, t))
                .collect()
        })
        .collect();
    slabs.into_iter().flatten().collect()
}

/// Outcome of checking the two defining conditions against the source data.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Kept records in the distilled dataset.
    pub n_d: usize,
    /// Source records the coverage condition was checked against.
    pub raw_checked: usize,
    /// Pairs of kept records with cost < `j_star` (must be zero).
    pub separation_violations: usize,
    /// Smallest pairwise cost among kept records (`None` when n_d < 2).
    pub min_pair_cost: Option<f64>,
    /// Source records whose exact nearest kept record has cost ≤ `j_star`.
    pub covered: usize,
    /// `covered / raw_checked`.
    pub coverage: f64,
    /// Source records whose nearest cost sits within `1e−12·j_star` of the
    /// threshold — logged because they are one rounding away from flipping.
    pub boundary_cases: usize,
    /// Running accuracy bound recorded during the build.
    pub build_us: f64,
    /// Max action gap between each source record and its exact nearest kept
    /// record — the authoritative accuracy figure (later acceptances can
    /// change a record's nearest neighbor, so this may exceed `build_us`).
    pub recomputed_us: f64,
    /// Mean action gap over the source records.
    pub mean_us: f64,
    /// Source records whose action gap exceeds `build_us + u_tol`.
    pub us_exceedances: usize,
}

/// Checks the separation condition over the kept records (exact, all pairs)
/// and the coverage condition over `raw`, recomputing the accuracy bound.
///
/// `raw` is the build stream or a sample of it; `u_tol` is the slack used
/// when counting action gaps that exceed the build-time bound.
pub fn verify_osd(osd: &Osd, raw: &[DataPair], u_tol: f64) -> Result<VerificationReport> {
    let emb = verify_inputs(osd, u_tol)?;
    let embedded: Vec<[f64; EMBED_DIM]> = osd.records.iter().map(|r| emb.embed(r)).collect();
    let axis = AxisIndex::build(&embedded);

    // Separation: exact nearest neighbor of every kept record among the rest.
    let nn_costs = chunked_map(&embedded, 4096, |i, q| {
        axis.exact_nn(q, Some(i as u32), f64::INFINITY)
            .map(|(_, c)| c)
    });

    // Coverage and recomputed accuracy over the source records.
    let raw_hits = chunked_map(raw, 4096, |_, r| {
        let q = emb.embed(r);
        let (id, c) = axis
            .exact_nn(&q, None, f64::INFINITY)
            .expect("records nonempty");
        let gap = (r.u - osd.records[id as usize].u).abs();
        (c, gap)
    });

    Ok(assemble_verification(osd, raw.len(), nn_costs, raw_hits, u_tol))
}

/// [`verify_osd`] with both nearest-neighbor searches done by exhaustive
/// scans over the kept records instead of the sorted-axis index: the
/// independent O(n_d² + |raw|·n_d) cross-check behind the pipeline's
/// `--verify-exact` flag. Ties break toward the smallest index on both
/// paths, so the two functions must agree exactly.
pub fn verify_osd_exact(osd: &Osd, raw: &[DataPair], u_tol: f64) -> Result<VerificationReport> {
    let emb = verify_inputs(osd, u_tol)?;
    let embedded: Vec<[f64; EMBED_DIM]> = osd.records.iter().map(|r| emb.embed(r)).collect();

    let nn_costs = chunked_map(&embedded, 1024, |i, q| {
        let mut best = f64::INFINITY;
        for (k, e) in embedded.iter().enumerate() {
            if k != i {
                let c = dist2(q, e);
                if c < best {
                    best = c;
                }
            }
        }
        best.is_finite().then_some(best)
    });

    let raw_hits = chunked_map(raw, 1024, |_, r| {
        let q = emb.embed(r);
        let mut best = (0usize, f64::INFINITY);
        for (k, e) in embedded.iter().enumerate() {
            let c = dist2(&q, e);
            if c < best.1 {
                best = (k, c);
            }
        }
        let gap = (r.u - osd.records[best.0].u).abs();
        (best.1, gap)
    });

    Ok(assemble_verification(osd, raw.len(), nn_costs, raw_hits, u_tol))
}

fn verify_inputs(osd: &Osd, u_tol: f64) -> Result<CostEmbedding> {
    osd.params.validate()?;
    if osd.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !u_tol.is_finite() || u_tol < 0.0 {
        return Err(Error::InvalidParams("u_tol must be finite and ≥ 0".into()));
    }
    CostEmbedding::new(&osd.params)
}

fn assemble_verification(
    osd: &Osd,
    raw_len: usize,
    nn_costs: Vec<Option<f64>>,
    raw_hits: Vec<(f64, f64)>,
    u_tol: f64,
) -> VerificationReport {
    let j_star = osd.params.j_star;
    let mut separation_violations = 0usize;
    let mut min_pair_cost: Option<f64> = None;
    for c in nn_costs.into_iter().flatten() {
        if c < j_star {
            separation_violations += 1;
        }
        min_pair_cost = Some(min_pair_cost.map_or(c, |m: f64| m.min(c)));
    }

    let mut covered = 0usize;
    let mut boundary_cases = 0usize;
    let mut recomputed_us = 0.0f64;
    let mut gap_sum = 0.0f64;
    let mut us_exceedances = 0usize;
    for (c, gap) in raw_hits {
        if c <= j_star {
            covered += 1;
        }
        if (c - j_star).abs() <= 1e-12 * j_star {
            boundary_cases += 1;
        }
        if gap > recomputed_us {
            recomputed_us = gap;
        }
        gap_sum += gap;
        if gap > osd.build_us + u_tol {
            us_exceedances += 1;
        }
    }

    VerificationReport {
        n_d: osd.records.len(),
        raw_checked: raw_len,
        separation_violations,
        min_pair_cost,
        covered,
        coverage: if raw_len == 0 {
            1.0
        } else {
            covered as f64 / raw_len as f64
        },
        boundary_cases,
        build_us: osd.build_us,
        recomputed_us,
        mean_us: if raw_len == 0 { 0.0 } else { gap_sum / raw_len as f64 },
        us_exceedances,
    }
}

/// One bin of the action-gap histogram: `[lo, hi)` except the last bin,
/// which is closed above.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// How faithfully the distilled dataset reproduces the source actions when
/// used as a nearest-neighbor table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolutionReport {
    pub n_d: usize,
    /// Source records measured.
    pub samples: usize,
    /// Mean action gap |u − u_nn| over the source records.
    pub mean_us: f64,
    /// Max action gap — the observed accuracy of the dataset-as-table.
    pub max_us: f64,
    /// Distribution of the per-record action gaps.
    pub histogram: Vec<HistogramBin>,
}

const HISTOGRAM_BINS: usize = 32;

/// For every source record, finds its exact nearest kept record under the
/// joint cost and accumulates the action gap |u − u_nn|.
pub fn measure_resolution(osd: &Osd, raw: &[DataPair]) -> Result<ResolutionReport> {
    osd.params.validate()?;
    if osd.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if raw.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let emb = CostEmbedding::new(&osd.params)?;
    let embedded: Vec<[f64; EMBED_DIM]> = osd.records.iter().map(|r| emb.embed(r)).collect();
    let axis = AxisIndex::build(&embedded);

    let gaps = chunked_map(raw, 4096, |_, r| {
        let q = emb.embed(r);
        let (id, _) = axis
            .exact_nn(&q, None, f64::INFINITY)
            .expect("records nonempty");
        (r.u - osd.records[id as usize].u).abs()
    });

    let max_us = gaps.iter().cloned().fold(0.0f64, f64::max);
    let mean_us = gaps.iter().sum::<f64>() / gaps.len() as f64;

    let mut histogram = Vec::with_capacity(HISTOGRAM_BINS);
    if max_us == 0.0 {
        histogram.push(HistogramBin {
            lo: 0.0,
            hi: 0.0,
            count: gaps.len(),
        });
    } else {
        let width = max_us / HISTOGRAM_BINS as f64;
        let mut counts = [0usize; HISTOGRAM_BINS];
        for &g in &gaps {
            let b = ((g / width) as usize).min(HISTOGRAM_BINS - 1);
            counts[b] += 1;
        }
        for (b, &count) in counts.iter().enumerate() {
            histogram.push(HistogramBin {
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count,
            });
        }
    }

    Ok(ResolutionReport {
        n_d: osd.records.len(),
        samples: raw.len(),
        mean_us,
        max_us,
        histogram,
    })
}

/// Nearest-neighbor table lookup: the action of the closest kept record
/// under the *state-only* metric (at runtime the query's action is exactly
/// what is being looked up, so it cannot enter the distance).
///
/// With `s_u = 0` this coincides bitwise with the joint-cost retrieval used
/// by [`measure_resolution`].
pub fn lookup_control(osd: &Osd, x_tilde: &AugmentedState<f64>) -> Result<f64> {
    x_tilde.validate()?;
    if osd.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let emb = CostEmbedding::new(&osd.params)?;
    let q = emb.embed_state(&x_tilde.to_array());
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, r) in osd.records.iter().enumerate() {
        let c = state_dist2(&q, &emb.embed(r));
        if c < best.1 {
            best = (i, c);
        }
    }
    Ok(osd.records[best.0].u)
}

/// Mann–Kendall trend statistic (normal approximation, tie-corrected).
///
/// Positive values indicate an increasing trend; at the usual one-sided 5%
/// level the trend is significant when z ≥ 1.645. Returns 0 when the
/// sequence is too short or completely tied.
pub fn mann_kendall_z(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut s: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += match values[j].partial_cmp(&values[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut run = 1usize;
    for i in 1..=n {
        if i < n && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            if run > 1 {
                let t = run as f64;
                tie_term += t * (t - 1.0) * (2.0 * t + 5.0);
            }
            run = 1;
        }
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - tie_term) / 18.0;
    if var <= 0.0 {
        return 0.0;
    }
    let sf = s as f64;
    if s > 0 {
        (sf - 1.0) / var.sqrt()
    } else if s < 0 {
        (sf + 1.0) / var.sqrt()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Straight evaluation of the quadratic form — independent of the
    /// embedding pipeline under test.
    fn direct_cost(a: &DataPair, b: &DataPair, p: &OsdParams) -> f64 {
        let mut acc = 0.0;
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                acc += (a.x[i] - b.x[i]) * p.s_x[(i, j)] * (a.x[j] - b.x[j]);
            }
        }
        acc + p.s_u * (a.u - b.u) * (a.u - b.u)
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> DataPair {
        let mut x = [0.0; STATE_DIM];
        for v in &mut x {
            *v = rng.random_range(-3.0..3.0);
        }
        DataPair::new(x, rng.random_range(-50.0..50.0)).unwrap()
    }

    /// Two-cluster stream with random actions: enough structure that a
    /// build keeps a nontrivial subset.
    fn mixture_stream(n: usize, seed: u64) -> Vec<DataPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let center = if rng.random_range(0.0..1.0) < 0.5 { 2.0 } else { -2.0 };
                let mut x = [0.0f64; STATE_DIM];
                for (i, v) in x.iter_mut().enumerate() {
                    let c = if i < 3 { center } else { 0.0 };
                    *v = c + rng.random_range(-1.5..1.5);
                }
                x[7] = x[7].abs(); // insulin-on-board is nonnegative
                DataPair::new(x, rng.random_range(-30.0..30.0)).unwrap()
            })
            .collect()
    }

    fn line_pair(t: f64, u: f64) -> DataPair {
        let mut x = [0.0; STATE_DIM];
        x[0] = t;
        DataPair::new(x, u).unwrap()
    }

    #[test]
    fn cost_of_identical_pairs_is_zero() {
        let params = OsdParams::identity(1.0, 0.01).unwrap();
        let a = line_pair(1.5, 42.0);
        assert_eq!(pair_cost(&a, &a, &params).unwrap(), 0.0);
    }

    #[test]
    fn cost_toy_value() {
        // Identity metric, Δx = (1,1,0,...), s_u = 0.01, Δu = 10:
        // 1 + 1 + 0.01·100 = 3.
        let params = OsdParams::identity(1.0, 0.01).unwrap();
        let mut xa = [0.0; STATE_DIM];
        xa[0] = 1.0;
        xa[1] = 1.0;
        let a = DataPair::new(xa, 10.0).unwrap();
        let b = DataPair::new([0.0; STATE_DIM], 0.0).unwrap();
        let c = pair_cost(&a, &b, &params).unwrap();
        assert!((c - 3.0).abs() < 1e-12, "cost = {c}");
    }

    #[test]
    fn cost_matches_direct_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..50 {
            let mut r = StateMetric::zeros();
            for v in r.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let s_x = r.transpose() * r + StateMetric::identity() * 0.5;
            let s_u = if trial % 2 == 0 { 0.0 } else { 0.01 };
            let params = OsdParams::new(1.0, s_x, s_u).unwrap();
            let a = random_pair(&mut rng);
            let b = random_pair(&mut rng);
            let via_embedding = pair_cost(&a, &b, &params).unwrap();
            let direct = direct_cost(&a, &b, &params);
            assert!(
                (via_embedding - direct).abs() <= 1e-10 * (1.0 + direct.abs()),
                "embedding {via_embedding} vs direct {direct}"
            );
        }
    }

    proptest! {
        #[test]
        fn cost_axioms(
            xa in proptest::array::uniform8(-100.0f64..100.0),
            xb in proptest::array::uniform8(-100.0f64..100.0),
            ua in -500.0f64..500.0,
            ub in -500.0f64..500.0,
            weighted in proptest::bool::ANY,
        ) {
            let s_u = if weighted { 0.01 } else { 0.0 };
            let params = OsdParams::identity(1.0, s_u).unwrap();
            let a = DataPair::new(xa, ua).unwrap();
            let b = DataPair::new(xb, ub).unwrap();
            let ab = pair_cost(&a, &b, &params).unwrap();
            let ba = pair_cost(&b, &a, &params).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(pair_cost(&a, &a, &params).unwrap(), 0.0);
            let dx: f64 = xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            if dx > 1e-6 {
                prop_assert!(ab > 0.0);
            }
        }
    }

    #[test]
    fn params_validation_rejects_bad_inputs() {
        assert!(OsdParams::identity(0.0, 0.0).is_err());
        assert!(OsdParams::identity(-1.0, 0.0).is_err());
        assert!(OsdParams::identity(1.0, -0.01).is_err());
        let mut skew = StateMetric::identity();
        skew[(0, 1)] = 0.5; // asymmetric
        assert!(OsdParams::new(1.0, skew, 0.0).is_err());
        let indefinite = StateMetric::identity() * -1.0;
        assert!(OsdParams::new(1.0, indefinite, 0.0).is_err());
    }

    #[test]
    fn metric_of_whitened_data_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let records: Vec<DataPair> = (0..100_000)
            .map(|_| {
                let mut x = [0.0; STATE_DIM];
                for v in &mut x {
                    *v = rng.sample(StandardNormal);
                }
                DataPair::new(x, 0.0).unwrap()
            })
            .collect();
        let s_x = estimate_state_metric(&records).unwrap();
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (s_x[(i, j)] - want).abs() <= 0.05,
                    "s_x[({i},{j})] = {}",
                    s_x[(i, j)]
                );
            }
        }
    }

    #[test]
    fn metric_scaling_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<[f64; STATE_DIM]> = (0..20_000)
            .map(|_| {
                let mut x = [0.0; STATE_DIM];
                for v in &mut x {
                    *v = rng.sample(StandardNormal);
                }
                x
            })
            .collect();
        let records: Vec<DataPair> = base
            .iter()
            .map(|x| DataPair::new(*x, 0.0).unwrap())
            .collect();
        let scaled: Vec<DataPair> = base
            .iter()
            .map(|x| {
                let mut y = *x;
                y[3] *= 10.0;
                DataPair::new(y, 0.0).unwrap()
            })
            .collect();
        let m = estimate_state_metric(&records).unwrap();
        let ms = estimate_state_metric(&scaled).unwrap();
        let ratio = ms[(3, 3)] / m[(3, 3)];
        assert!((0.008..0.012).contains(&ratio), "ratio = {ratio}");
    }

    #[test]
    fn metric_distances_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<DataPair> = (0..20_000)
            .map(|_| {
                let mut x = [0.0; STATE_DIM];
                for v in &mut x {
                    *v = rng.sample::<f64, _>(StandardNormal) * 2.0 + 1.0;
                }
                DataPair::new(x, 0.0).unwrap()
            })
            .collect();
        let mut a = StateMetric::identity();
        for v in a.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let shift = SVector::<f64, STATE_DIM>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let transformed: Vec<DataPair> = raw
            .iter()
            .map(|r| {
                let y = a * SVector::from(r.x) + shift;
                DataPair::new(y.into(), 0.0).unwrap()
            })
            .collect();
        let m_raw = estimate_state_metric(&raw).unwrap();
        let m_tr = estimate_state_metric(&transformed).unwrap();
        let pr = OsdParams::new(1.0, m_raw, 0.0).unwrap();
        let pt = OsdParams::new(1.0, m_tr, 0.0).unwrap();
        for k in 0..12 {
            let i = k * 7 % raw.len();
            let j = (k * 131 + 5) % raw.len();
            let d_raw = pair_cost(&raw[i], &raw[j], &pr).unwrap();
            let d_tr = pair_cost(&transformed[i], &transformed[j], &pt).unwrap();
            assert!(
                (d_raw - d_tr).abs() <= 1e-4 * (1.0 + d_raw.abs()),
                "pair ({i},{j}): {d_raw} vs {d_tr}"
            );
        }
    }

    #[test]
    fn metric_estimation_errors() {
        let few: Vec<DataPair> = (0..100)
            .map(|i| line_pair(i as f64, 0.0))
            .collect();
        assert!(matches!(estimate_state_metric(&few), Err(Error::Metric(_))));
        let constant: Vec<DataPair> =
            (0..MIN_METRIC_RECORDS).map(|_| line_pair(0.0, 0.0)).collect();
        assert!(matches!(
            estimate_state_metric(&constant),
            Err(Error::Metric(_))
        ));
    }

    fn toy_osd(params: &OsdParams, records: Vec<DataPair>) -> Osd {
        Osd {
            params: params.clone(),
            records,
            build_us: 0.0,
            stats: SaturationStats {
                window_size: 1,
                rejections_in_window: 0,
                rejection_ratio_history: vec![],
            },
        }
    }

    #[test]
    fn nn_exact_trivial_cases() {
        let params = OsdParams::identity(1.0, 0.01).unwrap();
        let a = line_pair(0.0, 1.0);
        let osd = toy_osd(&params, vec![a]);
        let q = line_pair(5.0, -3.0);
        assert_eq!(nn_exact(&q, &osd).unwrap().0, 0);
        let b = line_pair(2.0, 4.0);
        let osd = toy_osd(&params, vec![a, b]);
        let (idx, cost) = nn_exact(&b, &osd).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(cost, 0.0);
        let empty = toy_osd(&params, vec![]);
        assert!(matches!(nn_exact(&q, &empty), Err(Error::EmptyDataset)));
    }

    #[test]
    fn nn_exact_matches_independent_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = StateMetric::zeros();
        for v in r.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let s_x = r.transpose() * r + StateMetric::identity();
        let params = OsdParams::new(1.0, s_x, 0.0025).unwrap();
        let records: Vec<DataPair> = (0..1_000).map(|_| random_pair(&mut rng)).collect();
        let osd = toy_osd(&params, records.clone());
        for _ in 0..100 {
            let q = random_pair(&mut rng);
            let (idx, cost) = nn_exact(&q, &osd).unwrap();
            let (bi, bc) = records
                .iter()
                .enumerate()
                .map(|(i, r)| (i, direct_cost(&q, r, &params)))
                .fold((usize::MAX, f64::INFINITY), |best, cand| {
                    if cand.1 < best.1 {
                        cand
                    } else {
                        best
                    }
                });
            assert_eq!(idx, bi);
            assert!((cost - bc).abs() <= 1e-9 * (1.0 + bc.abs()));
        }
    }

    #[test]
    fn build_hand_trace() {
        // Stream 0, 0.5, 1.2, 1.25 on the first state axis, J* = 0.3:
        // 0 seeds; 0.5 rejected (cost 0.25, gap 2); 1.2 accepted (1.44);
        // 1.25 rejected against 1.2 (cost 0.0025, gap 0.5).
        let params = OsdParams::identity(0.3, 0.0).unwrap();
        let stream = vec![
            line_pair(0.0, 5.0),
            line_pair(0.5, 7.0),
            line_pair(1.2, 9.0),
            line_pair(1.25, 9.5),
        ];
        let osd = build_osd(stream, &params, &BuildOptions::default()).unwrap();
        assert_eq!(osd.records.len(), 2);
        assert_eq!(osd.records[0].x[0], 0.0);
        assert_eq!(osd.records[1].x[0], 1.2);
        assert_eq!(osd.build_us, 2.0);
    }

    #[test]
    fn build_degenerate_streams() {
        let params = OsdParams::identity(0.5, 0.0).unwrap();
        let dup = vec![line_pair(1.0, 3.0); 200];
        let osd = build_osd(dup, &params, &BuildOptions::default()).unwrap();
        assert_eq!(osd.records.len(), 1);
        assert_eq!(osd.build_us, 0.0);

        // Threshold above the squared diameter: everything within one volume.
        let wide = OsdParams::identity(1e6, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stream: Vec<DataPair> = (0..500).map(|_| random_pair(&mut rng)).collect();
        let osd = build_osd(stream, &wide, &BuildOptions::default()).unwrap();
        assert_eq!(osd.records.len(), 1);

        assert!(matches!(
            build_osd(Vec::new(), &params, &BuildOptions::default()),
            Err(Error::EmptyDataset)
        ));
        let bad = BuildOptions {
            saturation_window: 0,
            ..BuildOptions::default()
        };
        assert!(build_osd(vec![line_pair(0.0, 0.0)], &params, &bad).is_err());
    }

    /// Reference implementation: the same streaming rule with a linear scan
    /// in place of the graph index, same cost pipeline.
    fn brute_filter(stream: &[DataPair], params: &OsdParams) -> (Vec<DataPair>, f64) {
        let emb = CostEmbedding::new(params).unwrap();
        let mut kept: Vec<DataPair> = Vec::new();
        let mut kept_e: Vec<[f64; EMBED_DIM]> = Vec::new();
        let mut us = 0.0f64;
        for &p in stream {
            let q = emb.embed(&p);
            if kept.is_empty() {
                kept.push(p);
                kept_e.push(q);
                continue;
            }
            let (bi, bc) = kept_e
                .iter()
                .enumerate()
                .map(|(i, e)| (i, dist2(&q, e)))
                .fold((usize::MAX, f64::INFINITY), |best, cand| {
                    if cand.1 < best.1 {
                        cand
                    } else {
                        best
                    }
                });
            if bc > params.j_star {
                kept.push(p);
                kept_e.push(q);
            } else {
                let g = (p.u - kept[bi].u).abs();
                if g > us {
                    us = g;
                }
            }
        }
        (kept, us)
    }

    #[test]
    fn build_membership_matches_bruteforce() {
        let stream = mixture_stream(5_000, 7);
        let params = OsdParams::identity(2.0, 0.0025).unwrap();
        let (brute, _) = brute_filter(&stream, &params);
        assert!(brute.len() > 50, "want a nontrivial subset, got {}", brute.len());

        for ef in [64usize, 4] {
            // ef = 4 forces graph misses, exercising the exact fallback.
            let opts = BuildOptions {
                hnsw: HnswKnobs {
                    ef_search: ef,
                    seed: 11,
                    ..HnswKnobs::default()
                },
                ..BuildOptions::default()
            };
            let osd = build_osd(stream.iter().copied(), &params, &opts).unwrap();
            assert_eq!(osd.records.len(), brute.len(), "ef = {ef}");
            for (a, b) in osd.records.iter().zip(&brute) {
                assert_eq!(a.u.to_bits(), b.u.to_bits());
                for i in 0..STATE_DIM {
                    assert_eq!(a.x[i].to_bits(), b.x[i].to_bits());
                }
            }
        }
    }

    #[test]
    fn recomputed_accuracy_can_exceed_build_time_value() {
        // B is rejected against A (gap 1) before C arrives; afterwards C is
        // B's nearest neighbor with gap 49.
        let params = OsdParams::identity(1.0, 0.0).unwrap();
        let stream = vec![line_pair(0.0, 0.0), line_pair(0.7, 1.0), line_pair(1.3, 50.0)];
        let osd = build_osd(stream.clone(), &params, &BuildOptions::default()).unwrap();
        assert_eq!(osd.records.len(), 2);
        assert_eq!(osd.build_us, 1.0);
        let report = verify_osd(&osd, &stream, 0.0).unwrap();
        assert_eq!(report.recomputed_us, 49.0);
        assert!(report.recomputed_us > report.build_us);
        assert_eq!(report.us_exceedances, 1);
        assert_eq!(report.coverage, 1.0);
    }

    #[test]
    fn verify_fresh_build_is_clean() {
        let stream = mixture_stream(4_000, 8);
        let params = OsdParams::identity(1.5, 0.0001).unwrap();
        let osd = build_osd(stream.iter().copied(), &params, &BuildOptions::default()).unwrap();
        let report = verify_osd(&osd, &stream, 1e-9).unwrap();
        assert_eq!(report.separation_violations, 0);
        assert_eq!(report.covered, stream.len());
        assert_eq!(report.coverage, 1.0);
        assert!(report.min_pair_cost.unwrap() > params.j_star);
        assert_eq!(report.n_d, osd.records.len());
        assert!(report.recomputed_us >= 0.0);
    }

    #[test]
    fn exhaustive_verify_agrees_with_axis_scan() {
        let stream = mixture_stream(4_000, 31);
        let params = OsdParams::identity(2.0, 0.0025).unwrap();
        let osd = build_osd(stream.iter().copied(), &params, &BuildOptions::default()).unwrap();
        let a = verify_osd(&osd, &stream, 0.0).unwrap();
        let b = verify_osd_exact(&osd, &stream, 0.0).unwrap();
        assert_eq!(a.covered, b.covered);
        assert_eq!(a.separation_violations, b.separation_violations);
        assert_eq!(a.boundary_cases, b.boundary_cases);
        assert_eq!(a.us_exceedances, b.us_exceedances);
        assert_eq!(
            a.min_pair_cost.map(f64::to_bits),
            b.min_pair_cost.map(f64::to_bits)
        );
        assert_eq!(a.recomputed_us.to_bits(), b.recomputed_us.to_bits());
        assert_eq!(a.mean_us.to_bits(), b.mean_us.to_bits());
    }

    #[test]
    fn resolution_of_records_on_themselves_is_zero() {
        let stream = mixture_stream(2_000, 9);
        let params = OsdParams::identity(1.0, 0.0).unwrap();
        let osd = build_osd(stream, &params, &BuildOptions::default()).unwrap();
        let report = measure_resolution(&osd, &osd.records.clone()).unwrap();
        assert_eq!(report.mean_us, 0.0);
        assert_eq!(report.max_us, 0.0);
        assert_eq!(report.n_d, osd.records.len());
        assert_eq!(report.samples, osd.records.len());
        let total: usize = report.histogram.iter().map(|b| b.count).sum();
        assert_eq!(total, report.samples);
    }

    #[test]
    fn resolution_histogram_counts_every_sample() {
        let stream = mixture_stream(3_000, 10);
        let params = OsdParams::identity(2.0, 0.0).unwrap();
        let osd = build_osd(stream.iter().copied(), &params, &BuildOptions::default()).unwrap();
        let report = measure_resolution(&osd, &stream).unwrap();
        assert!(report.mean_us <= report.max_us);
        assert!(report.max_us > 0.0);
        let total: usize = report.histogram.iter().map(|b| b.count).sum();
        assert_eq!(total, stream.len());
    }

    #[test]
    fn lookup_agrees_with_joint_retrieval_when_action_blind() {
        let stream = mixture_stream(2_000, 12);
        let params = OsdParams::identity(1.0, 0.0).unwrap();
        let osd = build_osd(stream.iter().copied(), &params, &BuildOptions::default()).unwrap();
        // A centroid queried by its own state returns its own action.
        let r0 = osd.records[0];
        assert_eq!(lookup_control(&osd, &r0.state()).unwrap(), r0.u);
        // With s_u = 0 the action slot of the embedding is zero, so the
        // state-only lookup and the joint-cost nearest neighbor coincide.
        for q in stream.iter().take(500) {
            let (idx, _) = nn_exact(q, &osd).unwrap();
            let via_lookup = lookup_control(&osd, &q.state()).unwrap();
            assert_eq!(via_lookup.to_bits(), osd.records[idx].u.to_bits());
        }
    }

    #[test]
    fn lookup_error_bounded_by_recomputed_accuracy() {
        // Smooth action over a one-dimensional state line: state-only and
        // joint retrieval order neighbors identically, so the table error is
        // capped by the recomputed accuracy bound.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let stream: Vec<DataPair> = (0..3_000)
            .map(|_| {
                let t = rng.random_range(0.0..10.0);
                line_pair(t, t * t / 5.0)
            })
            .collect();
        let params = OsdParams::identity(0.05, 0.01).unwrap();
        let osd = build_osd(stream.iter().copied(), &params, &BuildOptions::default()).unwrap();
        let report = verify_osd(&osd, &stream, 0.0).unwrap();
        let mut max_lookup_err = 0.0f64;
        for q in &stream {
            let err = (lookup_control(&osd, &q.state()).unwrap() - q.u).abs();
            max_lookup_err = max_lookup_err.max(err);
        }
        assert!(
            max_lookup_err <= report.recomputed_us + 1e-12,
            "lookup {max_lookup_err} vs recomputed {}",
            report.recomputed_us
        );
    }

    #[test]
    fn acceptance_boundary_shrinks_along_sensitive_rays() {
        // Probe the cost level set J = J* along rays from a centroid. Where
        // the action changes with the state (gain g), growing s_u pulls the
        // boundary in; where it does not, the extent stays put.
        let j_star = 1.0;
        let gain = 50.0;
        let extent = |s_u: f64, g: f64| -> f64 {
            let params = OsdParams::identity(j_star, s_u).unwrap();
            let center = line_pair(0.0, 0.0);
            let cost_at = |t: f64| {
                let p = line_pair(t, g * t);
                pair_cost(&p, &center, &params).unwrap()
            };
            let (mut lo, mut hi) = (0.0f64, 10.0f64);
            assert!(cost_at(hi) > j_star);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if cost_at(mid) <= j_star {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let grid = [0.0, 1e-4, 2.5e-3, 1e-2];
        let sensitive: Vec<f64> = grid.iter().map(|&s| extent(s, gain)).collect();
        for w in sensitive.windows(2) {
            assert!(w[1] < w[0], "extents not shrinking: {sensitive:?}");
        }
        for (&s_u, &measured) in grid.iter().zip(&sensitive) {
            let closed_form = (j_star / (1.0 + s_u * gain * gain)).sqrt();
            assert!((measured - closed_form).abs() <= 1e-6, "s_u = {s_u}");
        }
        let insensitive: Vec<f64> = grid.iter().map(|&s| extent(s, 0.0)).collect();
        for w in insensitive.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1e-9);
        }
    }

    #[test]
    fn mann_kendall_hand_values() {
        // S = 10, var = 5·4·15/18; z = 9/√16.667 = 2.2045.
        let z = mann_kendall_z(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((z - 2.2045).abs() < 1e-3, "z = {z}");
        let z = mann_kendall_z(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        assert!((z + 2.2045).abs() < 1e-3, "z = {z}");
        assert_eq!(mann_kendall_z(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(mann_kendall_z(&[1.0]), 0.0);
    }

    #[test]
    fn saturation_ratio_rises_on_stationary_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let stream: Vec<DataPair> = (0..20_000)
            .map(|_| {
                let mut x = [0.0; STATE_DIM];
                for v in &mut x {
                    *v = rng.sample(StandardNormal);
                }
                DataPair::new(x, rng.random_range(-10.0..10.0)).unwrap()
            })
            .collect();
        let params = OsdParams::identity(16.0, 0.0).unwrap();
        let opts = BuildOptions {
            saturation_window: 1_000,
            ..BuildOptions::default()
        };
        let osd = build_osd(stream, &params, &opts).unwrap();
        let ratios: Vec<f64> = osd
            .stats
            .rejection_ratio_history
            .iter()
            .map(|&(_, r)| r)
            .collect();
        assert_eq!(ratios.len(), 20);
        let z = mann_kendall_z(&ratios);
        assert!(z >= 1.645, "no significant upward trend: z = {z}, ratios = {ratios:?}");
        assert!(osd.stats.end_ratio() > ratios[0]);
    }

    #[test]
    fn saturation_window_bookkeeping() {
        // First record accepted, the rest rejected duplicates; window of 2.
        let params = OsdParams::identity(0.5, 0.0).unwrap();
        let stream = vec![line_pair(0.0, 0.0); 5];
        let opts = BuildOptions {
            saturation_window: 2,
            ..BuildOptions::default()
        };
        let osd = build_osd(stream, &params, &opts).unwrap();
        assert_eq!(
            osd.stats.rejection_ratio_history,
            vec![(2, 0.5), (4, 1.0), (5, 1.0)]
        );
        assert_eq!(osd.stats.rejections_in_window, 2);
        assert_eq!(osd.stats.end_ratio(), 1.0);
    }
}
