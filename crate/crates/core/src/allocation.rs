//! Layerwise sparsity allocation.
//!
//! Every allocator produces one importance score per block, which
//! [`rescale_to_plan`] maps to ratios `r_n = R − γ · (c_n − c̄) / max|c − c̄|`.
//! The map keeps the mean at `R`, every ratio inside `[R − γ, R + γ]`, and
//! prunes more important blocks less.

use std::fmt;
use std::str::FromStr;

use crate::calib::CalibStats;
use crate::error::{Error, Result};
use crate::model::{SiteId, SiteKind};

pub const DEFAULT_RATIO: f64 = 0.5;
pub const DEFAULT_GAMMA: f64 = 0.04;
pub const DEFAULT_OWL_M: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AllocKind {
    Uniform,
    Owl,
    Cwl,
}

impl AllocKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AllocKind::Uniform => "uniform",
            AllocKind::Owl => "owl",
            AllocKind::Cwl => "cwl",
        }
    }
}

impl fmt::Display for AllocKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AllocKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AllocKind::Uniform),
            "owl" => Ok(AllocKind::Owl),
            "cwl" => Ok(AllocKind::Cwl),
            other => Err(Error::Invalid(format!("unknown allocation `{other}`"))),
        }
    }
}

/// Sublayer family whose sites feed CWL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CwlBlock {
    #[default]
    Attn,
    Mlp,
}

impl CwlBlock {
    pub fn as_str(self) -> &'static str {
        match self {
            CwlBlock::Attn => "attn",
            CwlBlock::Mlp => "mlp",
        }
    }

    pub fn site_kinds(self) -> [SiteKind; 2] {
        match self {
            CwlBlock::Attn => [SiteKind::AttnIn, SiteKind::OIn],
            CwlBlock::Mlp => [SiteKind::MlpIn, SiteKind::DownIn],
        }
    }
}

impl fmt::Display for CwlBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CwlBlock {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attn" => Ok(CwlBlock::Attn),
            "mlp" => Ok(CwlBlock::Mlp),
            other => Err(Error::Invalid(format!("unknown CWL block `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AllocConfig {
    pub kind: AllocKind,
    /// Global sparsity ratio R.
    pub ratio: f64,
    /// Half-width γ of the per-layer interval around R.
    pub gamma: f64,
    /// OWL outlier multiplier M.
    pub owl_m: f64,
    pub cwl_block: CwlBlock,
}

impl AllocConfig {
    pub fn new(kind: AllocKind, ratio: f64) -> Self {
        Self {
            kind,
            ratio,
            gamma: DEFAULT_GAMMA,
            owl_m: DEFAULT_OWL_M,
            cwl_block: CwlBlock::Attn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ratio;
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Invalid(format!("sparsity ratio must be in [0, 1), got {r}")));
        }
        if self.kind != AllocKind::Uniform {
            if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
                return Err(Error::Invalid(format!("gamma must be >= 0, got {}", self.gamma)));
            }
            if !(r - self.gamma > 0.0 && r + self.gamma < 1.0) {
                return Err(Error::Invalid(format!(
                    "[R - gamma, R + gamma] = [{}, {}] must lie inside (0, 1)",
                    r - self.gamma,
                    r + self.gamma
                )));
            }
        }
        if self.kind == AllocKind::Owl && !(self.owl_m > 0.0 && self.owl_m.is_finite()) {
            return Err(Error::Invalid(format!("OWL multiplier must be > 0, got {}", self.owl_m)));
        }
        Ok(())
    }
}

/// Per-block target sparsity ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    pub ratios: Vec<f64>,
    /// Raw block importance the plan was derived from (absent for uniform plans).
    pub importance: Option<Vec<f64>>,
}

impl SparsityPlan {
    pub fn len(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratios.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }

    /// Tab-separated listing: layer, importance, ratio.
    pub fn to_table(&self) -> String {
        let mut out = String::from("layer\timportance\tratio\n");
        for (n, r) in self.ratios.iter().enumerate() {
            let imp = self
                .importance
                .as_ref()
                .map_or_else(|| "-".to_string(), |c| format!("{:.6}", c[n]));
            out.push_str(&format!("{n}\t{imp}\t{r:.6}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,importance,ratio\n");
        for (n, r) in self.ratios.iter().enumerate() {
            let imp = self.importance.as_ref().map_or(String::new(), |c| c[n].to_string());
            out.push_str(&format!("{n},{imp},{r}\n"));
        }
        out
    }
}

pub fn uniform_plan(n_layers: usize, ratio: f64) -> Result<SparsityPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("sparsity ratio must be in [0, 1), got {ratio}")));
    }
    if n_layers == 0 {
        return Err(Error::Invalid("plan needs at least one layer".into()));
    }
    Ok(SparsityPlan {
        ratios: vec![ratio; n_layers],
        importance: None,
    })
}

/// Mean-centred affine map of block importance onto `[R − γ, R + γ]`.
pub fn rescale_to_plan(importance: &[f64], ratio: f64, gamma: f64) -> SparsityPlan {
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    let dev: Vec<f64> = importance.iter().map(|c| c - mean).collect();
    let max_abs = dev.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    // a constant vector can leave ulp-sized deviations after the mean
    let constant = importance.windows(2).all(|w| w[0] == w[1]);
    let ratios = if !constant && max_abs > 0.0 && max_abs.is_finite() && gamma > 0.0 {
        dev.iter().map(|d| ratio - (d / max_abs) * gamma).collect()
    } else {
        vec![ratio; importance.len()]
    };
    SparsityPlan {
        ratios,
        importance: Some(importance.to_vec()),
    }
}

fn block_sites(stats: &CalibStats, block: usize, kinds: &[SiteKind]) -> Vec<SiteId> {
    stats
        .sites()
        .filter(|s| s.block == block && kinds.contains(&s.kind))
        .collect()
}

/// Fraction of per-feature mean activation magnitudes (pooled over the block's
/// sites and all languages) exceeding `m` times their average.
pub fn owl_importance(stats: &CalibStats, m: f64) -> Result<Vec<f64>> {
    let n_blocks = stats.n_blocks();
    if n_blocks == 0 {
        return Err(Error::Insufficient("statistics have no sites".into()));
    }
    (0..n_blocks)
        .map(|b| {
            let mut mags = Vec::new();
            for site in block_sites(stats, b, &SiteKind::ALL) {
                for mean in stats.language_means(site)? {
                    mags.extend(mean.iter().map(|v| v.abs()));
                }
            }
            if mags.is_empty() {
                return Err(Error::Insufficient(format!("block {b} has no statistics")));
            }
            let avg = mags.iter().sum::<f64>() / mags.len() as f64;
            let threshold = m * avg;
            let outliers = mags.iter().filter(|&&v| v > threshold).count();
            Ok(outliers as f64 / mags.len() as f64)
        })
        .collect()
}

/// Pearson correlation; 0 when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Mean Pearson correlation over all unordered pairs.
pub fn mean_pairwise_correlation<V: AsRef<[f64]>>(vectors: &[V]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            total += pearson(vectors[i].as_ref(), vectors[j].as_ref());
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Correlation-weighted layer importance: for each selected site,
/// `Inter · Σ_ℓ Intra_ℓ`, averaged over the block's selected sites.
pub fn cwl_importance(stats: &CalibStats, block: CwlBlock) -> Result<Vec<f64>> {
    let n_langs = stats.languages().len();
    if n_langs < 2 {
        return Err(Error::Insufficient(format!(
            "CWL needs at least 2 calibration languages, have {n_langs}"
        )));
    }
    let n_blocks = stats.n_blocks();
    if n_blocks == 0 {
        return Err(Error::Insufficient("statistics have no sites".into()));
    }
    (0..n_blocks)
        .map(|b| {
            let sites = block_sites(stats, b, &block.site_kinds());
            if sites.is_empty() {
                return Err(Error::Insufficient(format!(
                    "block {b} has no {} sites",
                    block.as_str()
                )));
            }
            let mut acc = 0.0;
            for &site in &sites {
                let inter = mean_pairwise_correlation(&stats.language_means(site)?);
                let mut intra_sum = 0.0;
                for (lang, samples) in stats.languages().iter().zip(stats.language_sample_means(site)?) {
                    if samples.len() < 2 {
                        return Err(Error::Insufficient(format!(
                            "CWL needs at least 2 samples for `{lang}`, have {}",
                            samples.len()
                        )));
                    }
                    intra_sum += mean_pairwise_correlation(samples);
                }
                acc += inter * intra_sum;
            }
            Ok(acc / sites.len() as f64)
        })
        .collect()
}

/// Builds the plan for `n_layers` blocks.
pub fn build_plan(config: &AllocConfig, stats: Option<&CalibStats>, n_layers: usize) -> Result<SparsityPlan> {
    config.validate()?;
    let need = || {
        stats.ok_or_else(|| {
            Error::Incompatible(format!("{} allocation needs calibration statistics", config.kind))
        })
    };
    let importance = match config.kind {
        AllocKind::Uniform => return uniform_plan(n_layers, config.ratio),
        AllocKind::Owl => owl_importance(need()?, config.owl_m)?,
        AllocKind::Cwl => cwl_importance(need()?, config.cwl_block)?,
    };
    if importance.len() != n_layers {
        return Err(Error::Incompatible(format!(
            "statistics cover {} blocks, model has {n_layers}",
            importance.len()
        )));
    }
    Ok(rescale_to_plan(&importance, config.ratio, config.gamma))
}
