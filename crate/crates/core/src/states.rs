//! Predictive-state reconstruction: merge PLC groups whose future-cone
//! samples are statistically indistinguishable, then summarize each state.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cones::{cone_offsets, ConeGeometry, ConeSet, Presence};
use crate::error::{invalid, Error, Result};
use crate::matrix::RowMatrix;
use crate::neighborhoods::{
    delta_neighborhood, kmeanspp_fit, knn_all, max_cluster_diameter, nearest_centroid, nearest_rows, Standardization,
};
use crate::par;
use crate::two_sample::{ks_sorted, test_equal_distributions, TestSettings};

/// How PLC configurations are grouped before merging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FitMode {
    /// K-means++ clusters; each cluster's FLCs form one sample.
    PreClustered { k: usize },
    /// Every training row is its own group, sampled through its k nearest PLCs.
    Knn { k: usize },
    /// Every training row is its own group, sampled through its open δ-ball.
    Delta { delta: f64 },
}

impl Default for FitMode {
    fn default() -> Self {
        FitMode::Knn { k: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScanOrder {
    #[default]
    Ascending,
}

/// An initial group of training rows: the rows it labels, and the rows whose
/// FLCs serve as its conditional sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub members: Vec<usize>,
    pub sample: Vec<usize>,
}

/// A pooled FLC sample: sorted unique row indices plus, for one-column FLCs,
/// the sorted values so KS can run without re-sorting.
#[derive(Debug, Clone, Default)]
pub struct Pool {
    rows: Vec<usize>,
    sorted: Vec<f64>,
}

impl Pool {
    pub fn new(flc: &RowMatrix, rows: &[usize]) -> Self {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let mut sorted = Vec::new();
        if flc.cols() == 1 {
            sorted = rows.iter().map(|&i| flc.get(i, 0)).collect();
            sorted.sort_unstable_by(f64::total_cmp);
        }
        Self { rows, sorted }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorted univariate values (empty for multi-column FLCs).
    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }

    /// Set union with `other`.
    pub fn absorb(&mut self, flc: &RowMatrix, other: &Pool) {
        let mut rows = Vec::with_capacity(self.rows.len() + other.rows.len());
        let mut fresh = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.rows.len() || j < other.rows.len() {
            let take_self = j == other.rows.len() || (i < self.rows.len() && self.rows[i] <= other.rows[j]);
            if take_self {
                if j < other.rows.len() && self.rows[i] == other.rows[j] {
                    j += 1;
                }
                rows.push(self.rows[i]);
                i += 1;
            } else {
                rows.push(other.rows[j]);
                fresh.push(other.rows[j]);
                j += 1;
            }
        }
        self.rows = rows;
        if flc.cols() == 1 && !fresh.is_empty() {
            let mut add: Vec<f64> = fresh.iter().map(|&r| flc.get(r, 0)).collect();
            add.sort_unstable_by(f64::total_cmp);
            self.sorted = merge_sorted(&self.sorted, &add);
        }
    }
}

fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i].total_cmp(&b[j]).is_le() {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Decides whether two pooled samples share a predictive distribution.
pub trait PoolTester {
    fn p_value(&self, flc: &RowMatrix, a: &Pool, b: &Pool) -> Result<f64>;
}

/// The default tester: KS for one-column FLCs, the staged multivariate test otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct DistributionTester {
    pub settings: TestSettings,
}

impl PoolTester for DistributionTester {
    fn p_value(&self, flc: &RowMatrix, a: &Pool, b: &Pool) -> Result<f64> {
        if flc.cols() == 1 {
            return Ok(ks_sorted(&a.sorted, &b.sorted)?.p_value);
        }
        let fa = flc.select_rows(&a.rows);
        let fb = flc.select_rows(&b.rows);
        Ok(test_equal_distributions(&fa, &fb, &self.settings)?.p_value)
    }
}

/// Answers from known generating labels: p = 1 when both pools have the
/// same majority label, else 0. Used to check merge plumbing apart from test power.
#[derive(Debug, Clone)]
pub struct OracleTester {
    pub labels: Vec<usize>,
}

impl OracleTester {
    fn majority(&self, pool: &Pool) -> usize {
        let mut counts = std::collections::BTreeMap::new();
        for &r in pool.rows() {
            *counts.entry(self.labels[r]).or_insert(0usize) += 1;
        }
        counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map_or(0, |(l, _)| l)
    }
}

impl PoolTester for OracleTester {
    fn p_value(&self, _flc: &RowMatrix, a: &Pool, b: &Pool) -> Result<f64> {
        Ok(if self.majority(a) == self.majority(b) { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeResult {
    /// State of every initial group, numbered densely by first appearance.
    pub cluster_to_state: Vec<usize>,
    pub n_states: usize,
    pub passes: usize,
    pub tests_run: usize,
}

struct Unit {
    pool: Pool,
    clusters: Vec<usize>,
}

/// Merges groups into predictive states.
///
/// Groups are scanned in ascending index order. Each group not yet merged
/// becomes a leader and is tested against every later unmerged group; when
/// the test fails to reject (p ≥ α) the later group joins the leader and its
/// sample is pooled into the leader's before the next test. The scan repeats
/// over the resulting states until a pass makes no merge.
pub fn merge_states(flc: &RowMatrix, groups: &[Group], alpha: f64, tester: &dyn PoolTester) -> Result<MergeResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("α = {alpha} must lie in (0, 1)")));
    }
    if groups.is_empty() {
        return Err(invalid("no groups to merge"));
    }
    if let Some(g) = groups.iter().position(|g| g.sample.len() < 2) {
        return Err(invalid(format!("group {g} has fewer than two FLC samples")));
    }
    let mut units: Vec<Unit> =
        groups.iter().enumerate().map(|(c, g)| Unit { pool: Pool::new(flc, &g.sample), clusters: vec![c] }).collect();
    let mut passes = 0;
    let mut tests_run = 0;
    loop {
        passes += 1;
        let mut merged_any = false;
        let mut absorbed = vec![false; units.len()];
        let mut next_units = Vec::new();
        for k in 0..units.len() {
            if absorbed[k] {
                continue;
            }
            let mut leader = Unit { pool: std::mem::take(&mut units[k].pool), clusters: std::mem::take(&mut units[k].clusters) };
            for j in k + 1..units.len() {
                if absorbed[j] {
                    continue;
                }
                tests_run += 1;
                if tester.p_value(flc, &leader.pool, &units[j].pool)? >= alpha {
                    absorbed[j] = true;
                    merged_any = true;
                    leader.pool.absorb(flc, &units[j].pool);
                    leader.clusters.append(&mut units[j].clusters);
                }
            }
            next_units.push(leader);
        }
        units = next_units;
        if !merged_any || units.len() == 1 {
            break;
        }
    }

    let mut unit_of = vec![0; groups.len()];
    for (u, unit) in units.iter().enumerate() {
        for &c in &unit.clusters {
            unit_of[c] = u;
        }
    }
    let mut renumber = vec![usize::MAX; units.len()];
    let mut n_states = 0;
    let cluster_to_state = unit_of
        .iter()
        .map(|&u| {
            if renumber[u] == usize::MAX {
                renumber[u] = n_states;
                n_states += 1;
            }
            renumber[u]
        })
        .collect();
    Ok(MergeResult { cluster_to_state, n_states, passes, tests_run })
}

/// Number of distinct FLC-stencil translations that can collide with a given
/// stencil; greedy thinning keeps at least `members / bound` rows.
pub fn overlap_packing_bound(geometry: &ConeGeometry, spatial_dims: usize) -> Result<usize> {
    let flc = cone_offsets(geometry, spatial_dims)?.flc;
    let mut diffs = HashSet::new();
    for a in &flc {
        for b in &flc {
            let dr: Vec<isize> = a.dr.iter().zip(&b.dr).map(|(x, y)| x - y).collect();
            diffs.insert((a.dt - b.dt, dr));
        }
    }
    Ok(diffs.len())
}

/// Greedy thinning in row order: a row is kept only if no lattice cell of its
/// FLC is already covered by a kept row's FLC.
pub fn exclude_overlaps(cones: &ConeSet, member_rows: &[usize]) -> Result<Vec<usize>> {
    let geometry = cones.geometry;
    if geometry.h_f == 0 && geometry.present_in == Presence::Future {
        return Ok(member_rows.to_vec());
    }
    let flc = cone_offsets(&geometry, cones.lattice.dims())?.flc;
    let n_sites = cones.lattice.n_sites();
    let mut taken: HashSet<(usize, usize)> = HashSet::new();
    let mut kept = Vec::new();
    let mut cells = Vec::with_capacity(flc.len());
    for &row in member_rows {
        let (site, t) = cones.coords[row];
        cells.clear();
        for o in &flc {
            let Some(s) = cones.lattice.offset_site(site, &o.dr) else { continue };
            debug_assert!(s < n_sites);
            cells.push((s, (t as isize + o.dt) as usize));
        }
        if cells.iter().all(|c| !taken.contains(c)) {
            taken.extend(cells.iter().copied());
            kept.push(row);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    /// Shared bin edges (bins + 1 values).
    pub edges: Vec<f64>,
    /// counts[state][bin]
    pub counts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub means: RowMatrix,
    pub counts: Vec<usize>,
    pub histograms: Option<Histograms>,
}

/// Per-state mean FLC and, for one-column FLCs, histograms on a common grid.
pub fn state_summary(flc: &RowMatrix, state_labels: &[usize], bins: usize) -> Result<StateSummary> {
    if state_labels.len() != flc.rows() {
        return Err(Error::DimensionMismatch { expected: flc.rows(), got: state_labels.len() });
    }
    let m = state_labels.iter().max().map_or(0, |&s| s + 1);
    let mut means = RowMatrix::zeros(m, flc.cols());
    let mut counts = vec![0usize; m];
    for (i, &s) in state_labels.iter().enumerate() {
        counts[s] += 1;
        for (acc, v) in means.row_mut(s).iter_mut().zip(flc.row(i)) {
            *acc += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(format!("state {empty} has no members")));
    }
    for (s, &c) in counts.iter().enumerate() {
        means.row_mut(s).iter_mut().for_each(|v| *v /= c as f64);
    }
    let histograms = (flc.cols() == 1 && bins > 0 && flc.rows() > 0).then(|| {
        let vals = flc.as_slice();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
        let mut hist = vec![vec![0usize; bins]; m];
        for (&v, &s) in vals.iter().zip(state_labels) {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            hist[s][b] += 1;
        }
        Histograms { edges, counts: hist }
    });
    Ok(StateSummary { means, counts, histograms })
}

/// Default cap on rows for the quadratic-memory equivalence matrix.
pub const EQUIVALENCE_CAP: usize = 20_000;

/// Binary relation "same predictive state" over all row pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceMatrix {
    n: usize,
    bits: Vec<u8>,
}

impl EquivalenceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j] == 1
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.bits.chunks(self.n.max(1)).map(<[u8]>::to_vec).collect()
    }
}

pub fn equivalence_matrix(state_labels: &[usize], cap: usize) -> Result<EquivalenceMatrix> {
    let n = state_labels.len();
    if n > cap {
        return Err(Error::TooLarge { what: "equivalence matrix", n, cap });
    }
    let mut bits = vec![0u8; n * n];
    for (i, a) in state_labels.iter().enumerate() {
        for (j, b) in state_labels.iter().enumerate() {
            bits[i * n + j] = u8::from(a == b);
        }
    }
    Ok(EquivalenceMatrix { n, bits })
}

/// A fitted predictive-state model: everything needed to map a new PLC to a
/// state and emit that state's mean FLC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateModel {
    pub geometry: ConeGeometry,
    pub spatial_dims: usize,
    pub standardization: Standardization,
    /// Standardized PLC centroids; in direct modes, every training row.
    pub cluster_centroids: RowMatrix,
    pub cluster_to_state: Vec<usize>,
    pub state_means: RowMatrix,
    pub state_sample_counts: Vec<usize>,
    pub alpha: f64,
    pub mode: FitMode,
    pub scan_order: ScanOrder,
}

impl StateModel {
    pub fn n_states(&self) -> usize {
        self.state_means.rows()
    }

    pub fn n_p(&self) -> usize {
        self.cluster_centroids.cols()
    }

    pub fn n_f(&self) -> usize {
        self.state_means.cols()
    }
}

/// Knobs for [`TrainingSetup::new`] besides the grouping mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub seed: u64,
    pub kmeans_max_iter: usize,
    /// `None` enables overlap exclusion exactly when future cones span more
    /// than one cell.
    pub overlap_exclusion: Option<bool>,
    pub n_projections: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { seed: 0, kmeans_max_iter: 100, overlap_exclusion: None, n_projections: 10 }
    }
}

/// The α-independent part of a fit: standardization, grouping and samples.
/// Merging at several α values reuses one setup.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub geometry: ConeGeometry,
    pub spatial_dims: usize,
    pub standardization: Standardization,
    pub centroids: RowMatrix,
    /// Initial group of every training row.
    pub row_group: Vec<usize>,
    pub groups: Vec<Group>,
    pub flc: RowMatrix,
    pub mode: FitMode,
    pub options: FitOptions,
    /// Largest within-cluster PLC distance (pre-clustered mode only).
    pub max_cluster_diameter: Option<f64>,
}

fn thin(cones: &ConeSet, rows: Vec<usize>, enabled: bool) -> Result<Vec<usize>> {
    if !enabled {
        return Ok(rows);
    }
    let kept = exclude_overlaps(cones, &rows)?;
    Ok(if kept.len() >= 2 { kept } else { rows })
}

impl TrainingSetup {
    pub fn new(cones: &ConeSet, mode: FitMode, options: FitOptions) -> Result<Self> {
        let n = cones.len();
        if n < 2 {
            return Err(invalid("need at least two light cones to fit"));
        }
        let standardization = Standardization::fit(&cones.plc)?;
        let plc = standardization.apply(&cones.plc)?;
        let exclusion = options.overlap_exclusion.unwrap_or(cones.n_f() > 1 || cones.geometry.h_f >= 1);

        let (centroids, row_group, groups, diameter) = match mode {
            FitMode::PreClustered { k } => {
                let fit = kmeanspp_fit(&plc, k, options.seed, options.kmeans_max_iter)?;
                let diameter = max_cluster_diameter(&plc, &fit);
                let (centroids, labels) = absorb_singletons(&plc, fit.centroids, fit.labels)?;
                let mut members = vec![Vec::new(); centroids.rows()];
                for (i, &l) in labels.iter().enumerate() {
                    members[l].push(i);
                }
                let groups = members
                    .into_iter()
                    .map(|m| Ok(Group { sample: thin(cones, m.clone(), exclusion)?, members: m }))
                    .collect::<Result<Vec<_>>>()?;
                (centroids, labels, groups, Some(diameter))
            }
            FitMode::Knn { k } => {
                if k < 2 {
                    return Err(invalid("k must be at least 2 so every sample has two FLCs"));
                }
                let hoods = knn_all(&plc, k)?;
                let groups = hoods
                    .into_iter()
                    .map(|h| Ok(Group { members: vec![h.anchor], sample: thin(cones, h.members, exclusion)? }))
                    .collect::<Result<Vec<_>>>()?;
                (plc, (0..n).collect(), groups, None)
            }
            FitMode::Delta { delta } => {
                let hoods = par::map_range(n, |i| delta_neighborhood(&plc, i, delta)).into_iter().collect::<Result<Vec<_>>>()?;
                let groups = hoods
                    .into_iter()
                    .map(|h| {
                        let mut sample = h.members;
                        if sample.len() < 2 {
                            sample = nearest_rows(&plc, plc.row(h.anchor), 2);
                            sample.sort_unstable();
                        }
                        Ok(Group { members: vec![h.anchor], sample: thin(cones, sample, exclusion)? })
                    })
                    .collect::<Result<Vec<_>>>()?;
                (plc, (0..n).collect(), groups, None)
            }
        };
        Ok(Self {
            geometry: cones.geometry,
            spatial_dims: cones.lattice.dims(),
            standardization,
            centroids,
            row_group,
            groups,
            flc: cones.flc.clone(),
            mode,
            options,
            max_cluster_diameter: diameter,
        })
    }

    pub fn default_tester(&self, alpha: f64) -> DistributionTester {
        DistributionTester { settings: TestSettings { alpha, n_projections: self.options.n_projections, seed: self.options.seed } }
    }

    pub fn merge(&self, alpha: f64) -> Result<StateModel> {
        self.merge_with(alpha, &self.default_tester(alpha))
    }

    pub fn merge_with(&self, alpha: f64, tester: &dyn PoolTester) -> Result<StateModel> {
        let merged = merge_states(&self.flc, &self.groups, alpha, tester)?;
        let labels: Vec<usize> = self.row_group.iter().map(|&g| merged.cluster_to_state[g]).collect();
        let summary = state_summary(&self.flc, &labels, 0)?;
        Ok(StateModel {
            geometry: self.geometry,
            spatial_dims: self.spatial_dims,
            standardization: self.standardization.clone(),
            cluster_centroids: self.centroids.clone(),
            cluster_to_state: merged.cluster_to_state,
            state_means: summary.means,
            state_sample_counts: summary.counts,
            alpha,
            mode: self.mode,
            scan_order: ScanOrder::Ascending,
        })
    }

    /// State label of every training row under `model`'s merge.
    pub fn row_states(&self, model: &StateModel) -> Vec<usize> {
        self.row_group.iter().map(|&g| model.cluster_to_state[g]).collect()
    }
}

/// Moves members of single-point clusters to their nearest other centroid
/// and drops those clusters, renumbering the rest densely.
fn absorb_singletons(plc: &RowMatrix, centroids: RowMatrix, mut labels: Vec<usize>) -> Result<(RowMatrix, Vec<usize>)> {
    let k = centroids.rows();
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    let keep: Vec<usize> = (0..k).filter(|&c| sizes[c] >= 2).collect();
    if keep.is_empty() {
        return Err(invalid("every cluster is a singleton; lower K"));
    }
    if keep.len() == k {
        return Ok((centroids, labels));
    }
    let kept = centroids.select_rows(&keep);
    let mut new_id = vec![usize::MAX; k];
    for (n, &c) in keep.iter().enumerate() {
        new_id[c] = n;
    }
    for (i, l) in labels.iter_mut().enumerate() {
        *l = if new_id[*l] != usize::MAX { new_id[*l] } else { nearest_centroid(plc.row(i), &kept).0 };
    }
    Ok((kept, labels))
}

const MODEL_MAGIC: [u8; 8] = *b"LICORSM\0";
const MODEL_VERSION: u32 = 1;

fn put_u64s(buf: &mut Vec<u8>, vals: impl IntoIterator<Item = u64>) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_f64s(buf: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_matrix(buf: &mut Vec<u8>, m: &RowMatrix) {
    put_u64s(buf, [m.rows() as u64, m.cols() as u64]);
    put_f64s(buf, m.as_slice());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    tag: [u8; 4],
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Format { format: "model", reason: format!("field {}: {reason}", String::from_utf8_lossy(&self.tag)) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(self.err("truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| self.err("count overflows usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<RowMatrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let count = rows.checked_mul(cols).ok_or_else(|| self.err("matrix too large"))?;
        if count * 8 > self.bytes.len() {
            return Err(self.err("truncated matrix"));
        }
        RowMatrix::from_vec(rows, cols, self.f64s(count)?)
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        if n * 8 > self.bytes.len() {
            return Err(self.err("truncated list"));
        }
        (0..n).map(|_| self.usize()).collect()
    }
}

impl StateModel {
    /// Versioned, field-tagged binary encoding; all integers u64 and all
    /// reals f64, little-endian. Each field is a 4-byte tag, a u64 payload
    /// length and the payload; readers skip tags they do not know.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut fields: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        let mut p = Vec::new();
        let presence = match self.geometry.present_in {
            Presence::Past => 0,
            Presence::Future => 1,
        };
        put_u64s(&mut p, [self.geometry.c as u64, self.geometry.h_p as u64, self.geometry.h_f as u64, presence, self.spatial_dims as u64]);
        fields.push((*b"GEOM", p));
        let mut p = Vec::new();
        put_u64s(&mut p, [self.standardization.dim() as u64]);
        put_f64s(&mut p, &self.standardization.mean);
        put_f64s(&mut p, &self.standardization.sd);
        fields.push((*b"STDZ", p));
        let mut p = Vec::new();
        put_matrix(&mut p, &self.cluster_centroids);
        fields.push((*b"CENT", p));
        let mut p = Vec::new();
        put_u64s(&mut p, std::iter::once(self.cluster_to_state.len() as u64).chain(self.cluster_to_state.iter().map(|&s| s as u64)));
        fields.push((*b"CMAP", p));
        let mut p = Vec::new();
        put_matrix(&mut p, &self.state_means);
        fields.push((*b"MEAN", p));
        let mut p = Vec::new();
        put_u64s(&mut p, std::iter::once(self.state_sample_counts.len() as u64).chain(self.state_sample_counts.iter().map(|&s| s as u64)));
        fields.push((*b"CNTS", p));
        let mut p = Vec::new();
        put_f64s(&mut p, &[self.alpha]);
        fields.push((*b"ALPH", p));
        let mut p = Vec::new();
        match self.mode {
            FitMode::PreClustered { k } => put_u64s(&mut p, [0, k as u64]),
            FitMode::Knn { k } => put_u64s(&mut p, [1, k as u64]),
            FitMode::Delta { delta } => put_u64s(&mut p, [2, delta.to_bits()]),
        }
        fields.push((*b"MODE", p));
        let mut p = Vec::new();
        put_u64s(&mut p, [0]);
        fields.push((*b"ORDR", p));

        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
        for (tag, payload) in fields {
            out.extend_from_slice(&tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::Format { format: "model", reason: reason.to_string() };
        if bytes.len() < 16 || bytes[..8] != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n_fields = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let mut rest = &bytes[16..];
        let mut geometry = None;
        let mut standardization = None;
        let mut centroids = None;
        let mut cmap = None;
        let mut means = None;
        let mut counts = None;
        let mut alpha = None;
        let mut mode = None;
        for _ in 0..n_fields {
            if rest.len() < 12 {
                return Err(bad("truncated field header"));
            }
            let tag: [u8; 4] = rest[..4].try_into().unwrap();
            let len = u64::from_le_bytes(rest[4..12].try_into().unwrap()) as usize;
            if rest.len() < 12 + len {
                return Err(bad("truncated field payload"));
            }
            let mut c = Cursor { bytes: &rest[12..12 + len], tag };
            rest = &rest[12 + len..];
            match &tag {
                b"GEOM" => {
                    let (cc, h_p, h_f, pres, dims) = (c.usize()?, c.usize()?, c.usize()?, c.u64()?, c.usize()?);
                    let present_in = match pres {
                        0 => Presence::Past,
                        1 => Presence::Future,
                        _ => return Err(c.err("unknown presence flag")),
                    };
                    geometry = Some((ConeGeometry { c: cc, h_p, h_f, present_in }, dims));
                }
                b"STDZ" => {
                    let d = c.usize()?;
                    standardization = Some(Standardization { mean: c.f64s(d)?, sd: c.f64s(d)? });
                }
                b"CENT" => centroids = Some(c.matrix()?),
                b"CMAP" => cmap = Some(c.usizes()?),
                b"MEAN" => means = Some(c.matrix()?),
                b"CNTS" => counts = Some(c.usizes()?),
                b"ALPH" => alpha = Some(c.f64()?),
                b"MODE" => {
                    let kind = c.u64()?;
                    let param = c.u64()?;
                    mode = Some(match kind {
                        0 => FitMode::PreClustered { k: param as usize },
                        1 => FitMode::Knn { k: param as usize },
                        2 => FitMode::Delta { delta: f64::from_bits(param) },
                        _ => return Err(c.err("unknown mode")),
                    });
                }
                _ => {}
            }
        }
        let missing = |name: &str| bad(&format!("missing field {name}"));
        let (geometry, spatial_dims) = geometry.ok_or_else(|| missing("GEOM"))?;
        let model = StateModel {
            geometry,
            spatial_dims,
            standardization: standardization.ok_or_else(|| missing("STDZ"))?,
            cluster_centroids: centroids.ok_or_else(|| missing("CENT"))?,
            cluster_to_state: cmap.ok_or_else(|| missing("CMAP"))?,
            state_means: means.ok_or_else(|| missing("MEAN"))?,
            state_sample_counts: counts.ok_or_else(|| missing("CNTS"))?,
            alpha: alpha.ok_or_else(|| missing("ALPH"))?,
            mode: mode.ok_or_else(|| missing("MODE"))?,
            scan_order: ScanOrder::Ascending,
        };
        if model.cluster_to_state.len() != model.cluster_centroids.rows()
            || model.cluster_to_state.iter().any(|&s| s >= model.n_states())
            || model.standardization.dim() != model.n_p()
        {
            return Err(bad("inconsistent field sizes"));
        }
        Ok(model)
    }

    /// Canonical pretty-printed JSON rendering, for diffing.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes to JSON")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cones::extract_cones;
    use crate::field::{Boundary, Field};

    fn column(v: &[f64]) -> RowMatrix {
        RowMatrix::column(v.to_vec())
    }

    fn group(rows: std::ops::Range<usize>) -> Group {
        Group { members: rows.clone().collect(), sample: rows.collect() }
    }

    #[test]
    fn single_group_needs_no_tests() {
        let flc = column(&[1.0, 2.0, 3.0]);
        let out = merge_states(&flc, &[group(0..3)], 0.05, &DistributionTester::default()).unwrap();
        assert_eq!((out.n_states, out.tests_run), (1, 0));
    }

    #[test]
    fn alpha_must_be_open_unit_interval() {
        let flc = column(&[1.0, 2.0]);
        for alpha in [0.0, 1.0, 1.5, -0.1] {
            assert!(merge_states(&flc, &[group(0..2)], alpha, &DistributionTester::default()).is_err());
        }
    }

    #[test]
    fn oracle_tester_recovers_generating_partition() {
        let truth = [0, 1, 0, 2, 1, 2, 0];
        let flc = column(&[0.0; 14]);
        let groups: Vec<Group> = (0..7).map(|g| group(2 * g..2 * g + 2)).collect();
        let labels: Vec<usize> = (0..14).map(|r| truth[r / 2]).collect();
        let out = merge_states(&flc, &groups, 0.05, &OracleTester { labels }).unwrap();
        // States are numbered by first appearance, which matches `truth` here.
        assert_eq!(out.cluster_to_state, truth.to_vec());
    }

    #[test]
    fn pool_union_keeps_values_sorted() {
        let flc = column(&[5.0, 1.0, 3.0, 2.0]);
        let mut a = Pool::new(&flc, &[0, 2]);
        a.absorb(&flc, &Pool::new(&flc, &[2, 1, 3]));
        assert_eq!(a.rows(), &[0, 1, 2, 3]);
        assert_eq!(a.sorted_values(), &[1.0, 2.0, 3.0, 5.0]);
    }

    #[test]
    fn summary_examples() {
        let s = state_summary(&column(&[1.0, 3.0]), &[0, 0], 4).unwrap();
        assert_eq!(s.means.as_slice(), &[2.0]);
        assert_eq!(s.histograms.unwrap().counts, vec![vec![1, 0, 0, 1]]);
        let a = state_summary(&column(&[1.0, 3.0, 10.0]), &[0, 0, 1], 0).unwrap();
        let b = state_summary(&column(&[1.0, 3.0, -4.0]), &[0, 0, 1], 0).unwrap();
        assert_eq!(a.means.row(0), b.means.row(0));
        assert!(state_summary(&column(&[1.0]), &[1], 0).is_err());
    }

    #[test]
    fn equivalence_examples() {
        let a = equivalence_matrix(&[0, 1, 0], 10).unwrap();
        assert_eq!(a.to_rows(), vec![vec![1, 0, 1], vec![0, 1, 0], vec![1, 0, 1]]);
        assert!(equivalence_matrix(&[0; 4], 4).unwrap().to_rows().iter().flatten().all(|&b| b == 1));
        assert!(matches!(equivalence_matrix(&[0; 5], 4), Err(Error::TooLarge { .. })));
    }

    fn cones_1d(h_f: usize) -> ConeSet {
        let f = Field::from_fn(vec![12], 8, Boundary::Wrap, |r, t| (r * 7 + t * 3) as f64 % 5.0).unwrap();
        extract_cones(&f, &ConeGeometry { c: 1, h_p: 1, h_f, present_in: Presence::Future }).unwrap()
    }

    #[test]
    fn exclusion_is_noop_for_single_cell_futures() {
        let cones = cones_1d(0);
        let rows: Vec<usize> = (0..cones.len()).collect();
        assert_eq!(exclude_overlaps(&cones, &rows).unwrap(), rows);
    }

    #[test]
    fn exclusion_leaves_spaced_rows_alone() {
        let cones = cones_1d(1);
        // Same time, sites 0, 3, 6, 9: stencils span 3 cells at t+1, so spacing 3 suffices.
        let rows: Vec<usize> = (0..cones.len()).filter(|&i| cones.coords[i].1 == 2 && cones.coords[i].0.is_multiple_of(3)).collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(exclude_overlaps(&cones, &rows).unwrap(), rows);
    }

    #[test]
    fn exclusion_removes_every_overlap() {
        let cones = cones_1d(1);
        let rows: Vec<usize> = (0..cones.len()).collect();
        let kept = exclude_overlaps(&cones, &rows).unwrap();
        let bound = overlap_packing_bound(&cones.geometry, 1).unwrap();
        assert!(kept.len() * bound >= rows.len());
        let offsets = cone_offsets(&cones.geometry, 1).unwrap().flc;
        let cells = |row: usize| -> HashSet<(usize, isize)> {
            let (r, t) = cones.coords[row];
            offsets.iter().map(|o| ((r as isize + o.dr[0]).rem_euclid(12) as usize, t as isize + o.dt)).collect()
        };
        for (a, &i) in kept.iter().enumerate() {
            for &j in &kept[a + 1..] {
                assert!(cells(i).is_disjoint(&cells(j)), "rows {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn model_bytes_round_trip() {
        let cones = cones_1d(0);
        let setup = TrainingSetup::new(&cones, FitMode::PreClustered { k: 4 }, FitOptions::default()).unwrap();
        let model = setup.merge(0.05).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(StateModel::from_bytes(&bytes).unwrap(), model);
        assert!(StateModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let back: StateModel = serde_json::from_str(&model.to_json()).unwrap();
        assert_eq!(back, model);
    }
}
