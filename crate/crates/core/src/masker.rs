//! Binary pruning masks: selection, application and verification.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use bitvec::prelude::*;

use crate::allocation::SparsityPlan;
use crate::container::{Container, TensorRecord};
use crate::criteria::{Grouping, ImportanceTensor};
use crate::error::{Error, Result};
use crate::model::WeightStore;

pub const MASKS_KIND: &str = "masks";

/// Number of weights pruned from a group of `n` at `ratio`: `⌊ratio · n⌋`.
/// A 1e-9 slack absorbs representation error in products such as `0.29 · 100`.
pub fn prune_count(ratio: f64, n: usize) -> usize {
    let k = (ratio * n as f64 + 1e-9).floor();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n)
    }
}

/// Keep-mask for one weight matrix (1 = keep), packed row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: BitVec<u64, Lsb0>,
}

impl Mask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: bitvec![u64, Lsb0; 1; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: bitvec![u64, Lsb0; 0; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, keep: bool) {
        self.keep.set(i * self.cols + j, keep);
    }

    pub fn kept(&self) -> usize {
        self.keep.count_ones()
    }

    pub fn pruned(&self) -> usize {
        self.keep.count_zeros()
    }

    pub fn row_pruned(&self, i: usize) -> usize {
        self.keep[i * self.cols..(i + 1) * self.cols].count_zeros()
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_record(&self) -> TensorRecord {
        let data = self.keep.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
        TensorRecord::new(vec![self.rows, self.cols], data).expect("consistent shape")
    }

    pub fn from_record(rec: &TensorRecord) -> Result<Self> {
        let &[rows, cols] = rec.shape() else {
            return Err(Error::Shape(format!("mask must be 2-D, got {:?}", rec.shape())));
        };
        let mut keep = BitVec::with_capacity(rows * cols);
        for &v in rec.data() {
            match v {
                1.0 => keep.push(true),
                0.0 => keep.push(false),
                other => return Err(Error::Invalid(format!("mask value {other} is not 0 or 1"))),
            }
        }
        Ok(Self { rows, cols, keep })
    }
}

/// Prunes, within each group, the `⌊ratio · |group|⌋` lowest scores. Ties
/// prune the higher flat index first, so the lower index survives.
pub fn build_mask(scores: &ImportanceTensor, ratio: f64, grouping: Grouping) -> Result<Mask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("ratio must be in [0, 1], got {ratio}")));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite scores for `{}`", scores.name)));
    }
    let (rows, cols) = (scores.rows, scores.cols);
    let mut mask = Mask::ones(rows, cols);
    let mut prune_group = |offset: usize, group: &[f64]| {
        let k = prune_count(ratio, group.len());
        if k == 0 {
            return;
        }
        let mut order: Vec<usize> = (0..group.len()).collect();
        order.sort_unstable_by(|&a, &b| group[a].total_cmp(&group[b]).then(b.cmp(&a)));
        for &idx in &order[..k] {
            mask.keep.set(offset + idx, false);
        }
    };
    match grouping {
        Grouping::PerRow => {
            for i in 0..rows {
                prune_group(i * cols, scores.row(i));
            }
        }
        Grouping::PerLayer => prune_group(0, &scores.scores),
    }
    Ok(mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskEntry {
    pub block: usize,
    pub grouping: Grouping,
    pub mask: Mask,
}

/// Masks for every pruned weight matrix plus the plan they realise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskSet {
    pub entries: BTreeMap<String, MaskEntry>,
    pub plan: Option<SparsityPlan>,
    /// Free-form provenance written to the container metadata.
    pub info: BTreeMap<String, String>,
}

/// Block index encoded in a `model.layers.<n>.` weight name.
pub fn block_of(name: &str) -> Option<usize> {
    name.strip_prefix("model.layers.")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

impl MaskSet {
    pub fn insert(&mut self, name: impl Into<String>, entry: MaskEntry) {
        self.entries.insert(name.into(), entry);
    }

    /// All-ones masks for every prunable weight of a model.
    pub fn all_ones(weights: &WeightStore) -> Self {
        let graph = weights.graph();
        let mut set = MaskSet::default();
        for (block, proj, name) in graph.prunable() {
            let (r, c) = graph.proj_shape(proj);
            set.insert(
                name,
                MaskEntry {
                    block,
                    grouping: Grouping::PerRow,
                    mask: Mask::ones(r, c),
                },
            );
        }
        set
    }

    /// Achieved sparsity per block, over all of the block's masks.
    pub fn achieved_by_block(&self) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for e in self.entries.values() {
            let slot = acc.entry(e.block).or_default();
            slot.0 += e.mask.pruned();
            slot.1 += e.mask.len();
        }
        acc.into_iter()
            .map(|(b, (p, n))| (b, if n == 0 { 0.0 } else { p as f64 / n as f64 }))
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::with_kind(MASKS_KIND);
        for (k, v) in &self.info {
            c.set_meta(k.clone(), v.clone());
        }
        if let Some(plan) = &self.plan {
            c.set_meta("plan", join(&plan.ratios));
            if let Some(imp) = &plan.importance {
                c.set_meta("plan_importance", join(imp));
            }
        }
        let groupings: Vec<Grouping> = self.entries.values().map(|e| e.grouping).collect();
        if let Some(g) = groupings.first() {
            if groupings.iter().any(|x| x != g) {
                return Err(Error::Invalid("mixed groupings in one mask set".into()));
            }
            c.set_meta("grouping", g.as_str());
        }
        for (name, e) in &self.entries {
            c.insert(name.clone(), e.mask.to_record())?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind() != Some(MASKS_KIND) {
            return Err(Error::Header(format!(
                "expected a `{MASKS_KIND}` container, found kind {:?}",
                c.kind()
            )));
        }
        let grouping: Grouping = c.meta("grouping").unwrap_or("row").parse()?;
        let plan = match c.meta("plan") {
            Some(p) => Some(SparsityPlan {
                ratios: split_floats(p)?,
                importance: c.meta("plan_importance").map(split_floats).transpose()?,
            }),
            None => None,
        };
        let mut set = MaskSet {
            plan,
            ..Default::default()
        };
        for (k, v) in c.metadata() {
            if !matches!(
                k.as_str(),
                "plan" | "plan_importance" | "grouping" | crate::container::KIND_KEY | crate::container::VERSION_KEY
            ) {
                set.info.insert(k.clone(), v.clone());
            }
        }
        for (name, rec) in c.tensors() {
            let block = block_of(name)
                .ok_or_else(|| Error::Invalid(format!("cannot infer block of mask `{name}`")))?;
            set.insert(
                name,
                MaskEntry {
                    block,
                    grouping,
                    mask: Mask::from_record(rec)?,
                },
            );
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn split_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| Error::Header(format!("`{x}` is not a number")))
        })
        .collect()
}

/// Copies `weights` with every masked entry set to exactly 0.0.
pub fn apply(weights: &WeightStore, masks: &MaskSet) -> Result<WeightStore> {
    let mut out = weights.clone();
    for (name, entry) in &masks.entries {
        let rec = weights.tensor(name)?;
        let (r, c) = entry.mask.shape();
        if rec.shape() != [r, c] {
            return Err(Error::Shape(format!(
                "mask for `{name}` is {r}x{c}, weight is {:?}",
                rec.shape()
            )));
        }
        let data = rec
            .data()
            .iter()
            .zip(entry.mask.keep.iter())
            .map(|(&w, keep)| if *keep { w } else { 0.0 })
            .collect();
        out.set_tensor(name, data)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerStatus {
    /// Every group pruned exactly `ratio · |group|` weights.
    Exact,
    /// Groups pruned `⌊ratio · |group|⌋`, short of a fractional target.
    FloorEffect,
    /// Some group deviates from the floor rule.
    Violation,
}

impl LayerStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerStatus::Exact => "exact",
            LayerStatus::FloorEffect => "floor-effect",
            LayerStatus::Violation => "violation",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub target: f64,
    pub achieved: f64,
    /// Largest per-group `|target · |group| − pruned|`.
    pub max_group_deviation: f64,
    pub status: LayerStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub layers: Vec<LayerReport>,
}

impl VerifyReport {
    pub fn violations(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.status == LayerStatus::Violation)
            .count()
    }

    /// Line-oriented plain text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            let _ = writeln!(
                out,
                "layer {} target {:.6} achieved {:.6} max_group_deviation {:.3} weights, status {}",
                l.layer,
                l.target,
                l.achieved,
                l.max_group_deviation,
                l.status.as_str()
            );
        }
        let _ = writeln!(out, "violations {}", self.violations());
        out
    }
}

/// Checks every mask against its layer's target ratio.
pub fn verify(masks: &MaskSet, plan: &SparsityPlan) -> Result<VerifyReport> {
    let n_blocks = masks.entries.values().map(|e| e.block + 1).max().unwrap_or(0);
    if n_blocks != plan.len() {
        return Err(Error::Incompatible(format!(
            "plan has {} layers, masks cover {n_blocks}",
            plan.len()
        )));
    }
    let achieved = masks.achieved_by_block();
    let mut layers = Vec::with_capacity(plan.len());
    for (layer, &target) in plan.ratios.iter().enumerate() {
        let mut max_dev = 0.0f64;
        let mut status = LayerStatus::Exact;
        for e in masks.entries.values().filter(|e| e.block == layer) {
            let (rows, cols) = e.mask.shape();
            let groups: Vec<(usize, usize)> = match e.grouping {
                Grouping::PerRow => (0..rows).map(|i| (cols, e.mask.row_pruned(i))).collect(),
                Grouping::PerLayer => vec![(rows * cols, e.mask.pruned())],
            };
            for (size, pruned) in groups {
                let ideal = target * size as f64;
                max_dev = max_dev.max((ideal - pruned as f64).abs());
                if pruned != prune_count(target, size) {
                    status = LayerStatus::Violation;
                } else if (ideal - pruned as f64).abs() > 1e-9 && status == LayerStatus::Exact {
                    status = LayerStatus::FloorEffect;
                }
            }
        }
        layers.push(LayerReport {
            layer,
            target,
            achieved: achieved.get(&layer).copied().unwrap_or(0.0),
            max_group_deviation: max_dev,
            status,
        });
    }
    Ok(VerifyReport { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelGraph;
    use proptest::prelude::*;

    fn scores(rows: &[&[f64]]) -> ImportanceTensor {
        ImportanceTensor {
            name: "w".into(),
            rows: rows.len(),
            cols: rows[0].len(),
            scores: rows.concat(),
            grouping: Grouping::PerRow,
        }
    }

    fn kept_row(m: &Mask, i: usize) -> Vec<bool> {
        (0..m.shape().1).map(|j| m.keeps(i, j)).collect()
    }

    #[test]
    fn prunes_lowest_half() {
        let m = build_mask(&scores(&[&[4.0, 1.0, 3.0, 2.0]]), 0.5, Grouping::PerRow).unwrap();
        assert_eq!(kept_row(&m, 0), vec![true, false, true, false]);
    }

    #[test]
    fn ratio_zero_keeps_all() {
        let m = build_mask(&scores(&[&[4.0, 1.0], &[0.0, 0.0]]), 0.0, Grouping::PerRow).unwrap();
        assert_eq!(m, Mask::ones(2, 2));
    }

    #[test]
    fn ties_prune_higher_index() {
        let m = build_mask(&scores(&[&[2.0, 2.0]]), 0.5, Grouping::PerRow).unwrap();
        assert_eq!(kept_row(&m, 0), vec![true, false]);
    }

    #[test]
    fn per_layer_grouping_ranks_whole_matrix() {
        let m = build_mask(&scores(&[&[1.0, 2.0], &[3.0, 4.0]]), 0.5, Grouping::PerLayer).unwrap();
        assert_eq!(kept_row(&m, 0), vec![false, false]);
        assert_eq!(kept_row(&m, 1), vec![true, true]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_mask(&scores(&[&[f64::NAN, 1.0]]), 0.5, Grouping::PerRow).is_err());
        assert!(build_mask(&scores(&[&[1.0, 1.0]]), 1.5, Grouping::PerRow).is_err());
    }

    #[test]
    fn floor_count() {
        assert_eq!(prune_count(0.5, 5), 2);
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(0.7, 10), 7);
        assert_eq!(prune_count(0.0, 10), 0);
        assert_eq!(prune_count(1.0, 10), 10);
    }

    fn tiny_weights() -> WeightStore {
        ModelGraph::new(8, 4, 1, 2, 6).unwrap().random_weights(5)
    }

    #[test]
    fn apply_ones_zeros_and_popcount() {
        let w = tiny_weights();
        let ones = MaskSet::all_ones(&w);
        assert!(apply(&w, &ones).unwrap().container().bit_eq(w.container()));

        let mut zeros = ones.clone();
        for e in zeros.entries.values_mut() {
            let (r, c) = e.mask.shape();
            e.mask = Mask::zeros(r, c);
        }
        let z = apply(&w, &zeros).unwrap();
        for name in zeros.entries.keys() {
            assert!(z.tensor(name).unwrap().data().iter().all(|&v| v == 0.0));
        }

        let mut rnd = ones.clone();
        let mut seed = 12345u64;
        for e in rnd.entries.values_mut() {
            let (r, c) = e.mask.shape();
            for i in 0..r {
                for j in 0..c {
                    seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    e.mask.set(i, j, seed >> 63 == 1);
                }
            }
        }
        let applied = apply(&w, &rnd).unwrap();
        for (name, e) in &rnd.entries {
            let nz = applied.tensor(name).unwrap().data().iter().filter(|&&v| v != 0.0).count();
            assert_eq!(nz, e.mask.kept());
        }
        // the source store is untouched
        assert!(w.container().bit_eq(tiny_weights().container()));
    }

    #[test]
    fn apply_shape_mismatch() {
        let w = tiny_weights();
        let mut set = MaskSet::default();
        set.insert(
            "model.layers.0.self_attn.q_proj.weight",
            MaskEntry {
                block: 0,
                grouping: Grouping::PerRow,
                mask: Mask::ones(3, 3),
            },
        );
        assert!(matches!(apply(&w, &set), Err(Error::Shape(_))));
    }

    fn row_set(ratio: f64, cols: usize) -> MaskSet {
        let s = ImportanceTensor {
            name: "w".into(),
            rows: 3,
            cols,
            scores: (0..3 * cols).map(|i| ((i * 7) % 11) as f64).collect(),
            grouping: Grouping::PerRow,
        };
        let mut set = MaskSet::default();
        set.insert(
            "model.layers.0.mlp.up_proj.weight",
            MaskEntry {
                block: 0,
                grouping: Grouping::PerRow,
                mask: build_mask(&s, ratio, Grouping::PerRow).unwrap(),
            },
        );
        set
    }

    #[test]
    fn verify_cases() {
        let plan = crate::allocation::uniform_plan(1, 0.5).unwrap();
        let r = verify(&row_set(0.5, 4), &plan).unwrap();
        assert_eq!(r.layers[0].status, LayerStatus::Exact);
        assert_eq!(r.layers[0].max_group_deviation, 0.0);

        let r = verify(&row_set(0.5, 5), &plan).unwrap();
        assert_eq!(r.layers[0].status, LayerStatus::FloorEffect);
        assert!((r.layers[0].achieved - 0.4).abs() < 1e-12);
        assert_eq!(r.violations(), 0);

        let r = verify(&row_set(0.25, 4), &plan).unwrap();
        assert_eq!(r.layers[0].status, LayerStatus::Violation);

        let long = crate::allocation::uniform_plan(2, 0.5).unwrap();
        assert!(verify(&row_set(0.5, 4), &long).is_err());
        assert!(r.to_text().contains("status violation"));
    }

    #[test]
    fn mask_container_round_trip() {
        let mut set = row_set(0.5, 5);
        set.plan = Some(crate::allocation::rescale_to_plan(&[0.3], 0.5, 0.04));
        set.info.insert("criterion".into(), "wanda".into());
        let back = MaskSet::from_container(&set.to_container().unwrap()).unwrap();
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn pruned_sets_nest_as_ratio_grows(
            vals in prop::collection::vec(0u8..6, 1..20),
            a in 0.0f64..=1.0,
            b in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s = scores(&[&vals.iter().map(|&v| v as f64).collect::<Vec<_>>()]);
            let m_lo = build_mask(&s, lo, Grouping::PerRow).unwrap();
            let m_hi = build_mask(&s, hi, Grouping::PerRow).unwrap();
            for j in 0..vals.len() {
                if !m_lo.keeps(0, j) {
                    prop_assert!(!m_hi.keeps(0, j));
                }
            }
        }
    }
}
