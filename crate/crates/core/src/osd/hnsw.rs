//! Layered proximity graph for approximate nearest-neighbor retrieval.
//!
//! Nodes live in the joint cost embedding (squared Euclidean distance =
//! pairwise cost), stacked in layers with geometrically decaying occupancy.
//! A query descends greedily through the sparse upper layers and runs a
//! beam search at the bottom. Construction is incremental and fully
//! deterministic: level draws come from a seeded generator, and every heap
//! and neighbor list orders by `(cost, id)`.

use std::collections::BinaryHeap;
use std::cmp::Reverse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::DataPair;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{dist2, CostEmbedding, Of64, OsdParams, EMBED_DIM};

/// Graph-construction and search parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HnswKnobs {
    /// Max neighbors per node on the upper layers (and the per-insert
    /// selection budget on every layer).
    pub m: usize,
    /// Max neighbors at layer 0.
    pub m0: usize,
    /// Beam width while inserting.
    pub ef_construction: usize,
    /// Default beam width for queries.
    pub ef_search: usize,
    /// Wider beam used when re-checking results (recall audits).
    pub ef_verify: usize,
    /// Level decay: P(level ≥ l) = exp(−l / level_mult).
    pub level_mult: f64,
    /// Seed for the level draws.
    pub seed: u64,
}

impl Default for HnswKnobs {
    fn default() -> Self {
        let m = 16usize;
        Self {
            m,
            m0: 2 * m,
            ef_construction: 200,
            ef_search: 64,
            ef_verify: 128,
            level_mult: 1.0 / (m as f64).ln(),
            seed: 0,
        }
    }
}

impl HnswKnobs {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.m0 < self.m {
            return Err(Error::InvalidParams(
                "neighbor budgets require m ≥ 2 and m0 ≥ m".into(),
            ));
        }
        if self.ef_construction == 0 || self.ef_search == 0 || self.ef_verify == 0 {
            return Err(Error::InvalidParams("beam widths must be ≥ 1".into()));
        }
        if !self.level_mult.is_finite() || self.level_mult <= 0.0 {
            return Err(Error::InvalidParams("level multiplier must be > 0".into()));
        }
        Ok(())
    }
}

/// Open-addressing visited set for node ids. Sized for the few thousand
/// nodes a beam search touches; grows by doubling if a search runs wide.
struct ProbeSet {
    slots: Vec<u32>,
    mask: usize,
    len: usize,
}

const EMPTY_SLOT: u32 = u32::MAX;

impl ProbeSet {
    fn new(capacity_hint: usize) -> Self {
        let cap = capacity_hint.next_power_of_two().max(64);
        Self {
            slots: vec![EMPTY_SLOT; cap],
            mask: cap - 1,
            len: 0,
        }
    }

    #[inline]
    fn slot_of(&self, id: u32) -> usize {
        (id.wrapping_mul(0x9E37_79B9) as usize) & self.mask
    }

    /// Returns true when `id` was not yet present.
    fn insert(&mut self, id: u32) -> bool {
        debug_assert_ne!(id, EMPTY_SLOT);
        if self.len * 4 >= self.slots.len() * 3 {
            self.grow();
        }
        let mut i = self.slot_of(id);
        loop {
            match self.slots[i] {
                EMPTY_SLOT => {
                    self.slots[i] = id;
                    self.len += 1;
                    return true;
                }
                v if v == id => return false,
                _ => i = (i + 1) & self.mask,
            }
        }
    }

    fn grow(&mut self) {
        let doubled = vec![EMPTY_SLOT; self.slots.len() * 2];
        let old = std::mem::replace(&mut self.slots, doubled);
        self.mask = self.slots.len() - 1;
        self.len = 0;
        for id in old {
            if id != EMPTY_SLOT {
                self.insert(id);
            }
        }
    }
}

/// Incremental approximate-nearest-neighbor index over data pairs.
///
/// The metric is fixed at construction; queries must present matching cost
/// parameters. One writer or many concurrent readers.
pub struct HnswIndex {
    params: OsdParams,
    embedding: CostEmbedding,
    knobs: HnswKnobs,
    embedded: Vec<[f64; EMBED_DIM]>,
    items: Vec<DataPair>,
    /// `links[node][layer]` = neighbor ids; a node has lists for layers
    /// `0..=level(node)`.
    links: Vec<Vec<Vec<u32>>>,
    levels: Vec<usize>,
    entry: Option<u32>,
    max_level: usize,
    rng: ChaCha8Rng,
}

impl HnswIndex {
    pub fn new(params: OsdParams, knobs: HnswKnobs) -> Result<Self> {
        knobs.validate()?;
        let embedding = CostEmbedding::new(&params)?;
        let rng = ChaCha8Rng::seed_from_u64(knobs.seed);
        Ok(Self {
            params,
            embedding,
            knobs,
            embedded: Vec::new(),
            items: Vec::new(),
            links: Vec::new(),
            levels: Vec::new(),
            entry: None,
            max_level: 0,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn knobs(&self) -> &HnswKnobs {
        &self.knobs
    }

    pub fn params(&self) -> &OsdParams {
        &self.params
    }

    pub fn item(&self, id: usize) -> &DataPair {
        &self.items[id]
    }

    fn sample_level(&mut self) -> usize {
        let u: f64 = 1.0 - self.rng.random::<f64>(); // (0, 1]
        ((-u.ln() * self.knobs.level_mult).floor() as usize).min(63)
    }

    /// Greedy steepest descent within one layer.
    fn greedy(&self, q: &[f64; EMBED_DIM], mut cur: u32, mut cost: f64, layer: usize) -> (u32, f64) {
        loop {
            let mut improved = false;
            for &nb in &self.links[cur as usize][layer] {
                let c = dist2(q, &self.embedded[nb as usize]);
                if c < cost {
                    cost = c;
                    cur = nb;
                    improved = true;
                }
            }
            if !improved {
                return (cur, cost);
            }
        }
    }

    /// Beam search within one layer. Returns up to `ef` nodes sorted
    /// ascending by `(cost, id)`.
    fn search_layer(
        &self,
        q: &[f64; EMBED_DIM],
        entries: &[(f64, u32)],
        ef: usize,
        layer: usize,
    ) -> Vec<(f64, u32)> {
        let mut visited = ProbeSet::new(4 * ef * self.knobs.m.max(1));
        let mut cands: BinaryHeap<Reverse<(Of64, u32)>> = BinaryHeap::new();
        let mut results: BinaryHeap<(Of64, u32)> = BinaryHeap::new();
        for &(c, id) in entries {
            if visited.insert(id) {
                cands.push(Reverse((Of64(c), id)));
                results.push((Of64(c), id));
            }
        }
        while results.len() > ef {
            results.pop();
        }
        while let Some(&Reverse((Of64(c), id))) = cands.peek() {
            let worst = results.peek().map(|&(Of64(w), _)| w).unwrap_or(f64::INFINITY);
            if c > worst && results.len() >= ef {
                break;
            }
            cands.pop();
            for &nb in &self.links[id as usize][layer] {
                if visited.insert(nb) {
                    let cn = dist2(q, &self.embedded[nb as usize]);
                    let worst = results.peek().map(|&(Of64(w), _)| w).unwrap_or(f64::INFINITY);
                    if results.len() < ef || cn < worst {
                        cands.push(Reverse((Of64(cn), nb)));
                        results.push((Of64(cn), nb));
                        if results.len() > ef {
                            results.pop();
                        }
                    }
                }
            }
        }
        let sorted = results.into_sorted_vec();
        sorted.into_iter().map(|(Of64(c), id)| (c, id)).collect()
    }

    /// Keep a candidate only when it is closer to the base point than to any
    /// already-kept neighbor (diversity pruning), then refill from the
    /// pruned ones nearest-first. `candidates` must be sorted ascending.
    fn select_neighbors(&self, candidates: &[(f64, u32)], m: usize) -> Vec<(f64, u32)> {
        let mut out: Vec<(f64, u32)> = Vec::with_capacity(m);
        let mut pruned: Vec<(f64, u32)> = Vec::new();
        for &(c, id) in candidates {
            if out.len() >= m {
                break;
            }
            let diverse = out.iter().all(|&(_, kept)| {
                dist2(&self.embedded[id as usize], &self.embedded[kept as usize]) > c
            });
            if diverse {
                out.push((c, id));
            } else {
                pruned.push((c, id));
            }
        }
        for &(c, id) in &pruned {
            if out.len() >= m {
                break;
            }
            out.push((c, id));
        }
        out
    }

    /// Re-select `node`'s neighbor list at `layer` down to `m_l` entries.
    fn shrink(&mut self, node: u32, layer: usize, m_l: usize) {
        let base = self.embedded[node as usize];
        let mut cands: Vec<(f64, u32)> = self.links[node as usize][layer]
            .iter()
            .map(|&nb| (dist2(&base, &self.embedded[nb as usize]), nb))
            .collect();
        cands.sort_by(|a, b| (Of64(a.0), a.1).cmp(&(Of64(b.0), b.1)));
        let selected = self.select_neighbors(&cands, m_l);
        self.links[node as usize][layer] = selected.into_iter().map(|(_, id)| id).collect();
    }

    /// Adds one item; returns its id (insertion order).
    pub fn insert(&mut self, item: DataPair) -> usize {
        let q = self.embedding.embed(&item);
        let id = self.items.len() as u32;
        let level = self.sample_level();
        self.items.push(item);
        self.embedded.push(q);
        self.levels.push(level);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry else {
            self.entry = Some(id);
            self.max_level = level;
            return id as usize;
        };

        let top = self.max_level;
        let mut ep = entry;
        let mut ep_cost = dist2(&q, &self.embedded[entry as usize]);
        for l in ((level + 1)..=top).rev() {
            let (e, c) = self.greedy(&q, ep, ep_cost, l);
            ep = e;
            ep_cost = c;
        }

        let mut entries = vec![(ep_cost, ep)];
        for l in (0..=level.min(top)).rev() {
            let w = self.search_layer(&q, &entries, self.knobs.ef_construction, l);
            let m_l = if l == 0 { self.knobs.m0 } else { self.knobs.m };
            let selected = self.select_neighbors(&w, self.knobs.m);
            for &(_, nb) in &selected {
                self.links[id as usize][l].push(nb);
                self.links[nb as usize][l].push(id);
                if self.links[nb as usize][l].len() > m_l {
                    self.shrink(nb, l, m_l);
                }
            }
            entries = w;
        }

        if level > top {
            self.max_level = level;
            self.entry = Some(id);
        }
        id as usize
    }

    /// Approximate nearest neighbor for an already-embedded query.
    pub(crate) fn nearest_embedded(&self, q: &[f64; EMBED_DIM], ef: usize) -> Option<(u32, f64)> {
        let entry = self.entry?;
        let mut ep = entry;
        let mut ep_cost = dist2(q, &self.embedded[entry as usize]);
        for l in (1..=self.max_level).rev() {
            let (e, c) = self.greedy(q, ep, ep_cost, l);
            ep = e;
            ep_cost = c;
        }
        let w = self.search_layer(q, &[(ep_cost, ep)], ef.max(1), 0);
        w.first().map(|&(c, id)| (id, c))
    }

    /// Approximate nearest neighbor: `(id, cost)`, ties toward smaller id.
    ///
    /// `params` must define the same metric the index was built with — the
    /// graph geometry is meaningless under any other cost.
    pub fn search(&self, query: &DataPair, params: &OsdParams, ef: usize) -> Result<(usize, f64)> {
        if !self.params.metric_matches(params) {
            return Err(Error::MetricMismatch);
        }
        if ef == 0 {
            return Err(Error::InvalidParams("beam width must be ≥ 1".into()));
        }
        if self.items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let q = self.embedding.embed(query);
        let (id, c) = self
            .nearest_embedded(&q, ef)
            .expect("nonempty index has an entry point");
        Ok((id as usize, c))
    }

    /// Structural checks: list sizes within budget, links well-formed and
    /// layer-consistent, and every node reachable from the entry point by
    /// descending through the layers.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.items.len();
        if n == 0 {
            return Ok(());
        }
        let entry = self.entry.ok_or_else(|| {
            Error::InvalidParams("nonempty index without an entry point".into())
        })?;
        if self.levels[entry as usize] != self.max_level {
            return Err(Error::InvalidParams(
                "entry point is not on the top layer".into(),
            ));
        }
        for (id, lists) in self.links.iter().enumerate() {
            if lists.len() != self.levels[id] + 1 {
                return Err(Error::InvalidParams(format!(
                    "node {id}: {} lists for level {}",
                    lists.len(),
                    self.levels[id]
                )));
            }
            for (layer, list) in lists.iter().enumerate() {
                let m_l = if layer == 0 { self.knobs.m0 } else { self.knobs.m };
                if list.len() > m_l {
                    return Err(Error::InvalidParams(format!(
                        "node {id} layer {layer}: {} neighbors exceeds budget {m_l}",
                        list.len()
                    )));
                }
                let mut seen = std::collections::HashSet::new();
                for &nb in list {
                    if nb as usize >= n || nb as usize == id || !seen.insert(nb) {
                        return Err(Error::InvalidParams(format!(
                            "node {id} layer {layer}: malformed neighbor {nb}"
                        )));
                    }
                    if self.levels[nb as usize] < layer {
                        return Err(Error::InvalidParams(format!(
                            "node {id} layer {layer}: neighbor {nb} does not reach this layer"
                        )));
                    }
                }
            }
        }
        // Hierarchical reachability: expand the reached set within each
        // layer, top down.
        let mut reached = vec![false; n];
        reached[entry as usize] = true;
        let mut frontier = vec![entry];
        for layer in (0..=self.max_level).rev() {
            let mut stack: Vec<u32> = frontier
                .iter()
                .copied()
                .filter(|&v| self.levels[v as usize] >= layer)
                .collect();
            while let Some(v) = stack.pop() {
                for &nb in &self.links[v as usize][layer] {
                    if !reached[nb as usize] {
                        reached[nb as usize] = true;
                        stack.push(nb);
                    }
                }
            }
            frontier = (0..n as u32).filter(|&v| reached[v as usize]).collect();
        }
        let missing = reached.iter().filter(|&&r| !r).count();
        if missing > 0 {
            return Err(Error::InvalidParams(format!(
                "{missing} of {n} nodes unreachable from the entry point"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::nn_exact;
    use super::super::Osd;
    use super::super::SaturationStats;
    use super::*;
    use rand::Rng;

    fn random_pair(rng: &mut ChaCha8Rng) -> DataPair {
        let mut x = [0.0; 8];
        for v in &mut x {
            *v = rng.random_range(-3.0..3.0);
        }
        DataPair::new(x, rng.random_range(-50.0..50.0)).unwrap()
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
    fn single_node_is_exact() {
        let params = OsdParams::identity(1.0, 0.01).unwrap();
        let mut index = HnswIndex::new(params.clone(), HnswKnobs::default()).unwrap();
        let item = DataPair::new([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 5.0).unwrap();
        index.insert(item);
        let query = DataPair::new([0.5; 8], 3.0).unwrap();
        let (id, cost) = index.search(&query, &params, 64).unwrap();
        assert_eq!(id, 0);
        let direct = super::super::pair_cost(&query, &item, &params).unwrap();
        assert_eq!(cost, direct);
    }

    #[test]
    fn empty_index_and_metric_mismatch_error() {
        let params = OsdParams::identity(1.0, 0.0).unwrap();
        let index = HnswIndex::new(params.clone(), HnswKnobs::default()).unwrap();
        let q = DataPair::new([0.0; 8], 0.0).unwrap();
        assert!(matches!(
            index.search(&q, &params, 64),
            Err(Error::EmptyDataset)
        ));
        let mut index = HnswIndex::new(params.clone(), HnswKnobs::default()).unwrap();
        index.insert(q);
        let other = OsdParams::identity(1.0, 0.5).unwrap();
        assert!(matches!(
            index.search(&q, &other, 64),
            Err(Error::MetricMismatch)
        ));
        // Same metric, different threshold: fine — the threshold is not part
        // of the metric.
        let rethresholded = OsdParams::identity(2.0, 0.0).unwrap();
        assert!(index.search(&q, &rethresholded, 64).is_ok());
    }

    #[test]
    fn recall_against_exact_scan() {
        let params = OsdParams::identity(1.0, 0.001).unwrap();
        let knobs = HnswKnobs {
            seed: 7,
            ..HnswKnobs::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let records: Vec<DataPair> = (0..10_000).map(|_| random_pair(&mut rng)).collect();
        let mut index = HnswIndex::new(params.clone(), knobs.clone()).unwrap();
        for &r in &records {
            index.insert(r);
        }
        let reference = toy_osd(&params, records);
        let mut hits = 0;
        let queries = 300;
        for _ in 0..queries {
            let q = random_pair(&mut rng);
            let (exact_id, exact_cost) = nn_exact(&q, &reference).unwrap();
            let (hnsw_id, hnsw_cost) = index.search(&q, &params, knobs.ef_verify).unwrap();
            if hnsw_id == exact_id {
                hits += 1;
            } else {
                // A miss must still return a genuine stored record no better
                // than the true nearest.
                assert!(hnsw_cost >= exact_cost);
            }
        }
        let recall = hits as f64 / queries as f64;
        assert!(recall >= 0.995, "recall@1 = {recall}");
    }

    #[test]
    fn construction_is_deterministic() {
        let params = OsdParams::identity(1.0, 0.01).unwrap();
        let knobs = HnswKnobs {
            seed: 3,
            ..HnswKnobs::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let records: Vec<DataPair> = (0..2_000).map(|_| random_pair(&mut rng)).collect();
        let build = || {
            let mut index = HnswIndex::new(params.clone(), knobs.clone()).unwrap();
            for &r in &records {
                index.insert(r);
            }
            index
        };
        let a = build();
        let b = build();
        assert_eq!(a.links, b.links);
        assert_eq!(a.levels, b.levels);
        assert_eq!(a.entry, b.entry);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let q = random_pair(&mut rng);
            let ra = a.search(&q, &params, 64).unwrap();
            let rb = b.search(&q, &params, 64).unwrap();
            assert_eq!(ra.0, rb.0);
            assert_eq!(ra.1.to_bits(), rb.1.to_bits());
        }
    }

    #[test]
    fn graph_invariants_hold_on_random_build() {
        let params = OsdParams::identity(0.5, 0.0025).unwrap();
        let knobs = HnswKnobs {
            seed: 5,
            ..HnswKnobs::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut index = HnswIndex::new(params, knobs).unwrap();
        for _ in 0..2_000 {
            index.insert(random_pair(&mut rng));
        }
        index.check_invariants().unwrap();
    }

    #[test]
    fn rejects_bad_knobs() {
        let params = OsdParams::identity(1.0, 0.0).unwrap();
        let bad = HnswKnobs {
            m: 1,
            ..HnswKnobs::default()
        };
        assert!(HnswIndex::new(params.clone(), bad).is_err());
        let bad = HnswKnobs {
            ef_construction: 0,
            ..HnswKnobs::default()
        };
        assert!(HnswIndex::new(params, bad).is_err());
    }
}
