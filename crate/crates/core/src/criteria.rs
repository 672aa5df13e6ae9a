//! Per-weight importance scores.
//!
//! | criterion | score `S_ij` |
//! |-----------|--------------|
//! | magnitude | `|W_ij|` |
//! | wanda     | `|W_ij| · ‖X_j‖₂` |
//! | m-wanda   | `|W_ij| · A_j · P_j`, `A = ‖X‖₂ + λ·minmax(VAR)` |
//! | ria       | `RI_ij · ‖X_j‖₂^α` |
//! | m-ria     | `RI_ij · A_j · P_j`, `A = ‖X‖₂^α + λ·minmax(VAR)` |
//!
//! where `RI_ij = |W_ij|/Σ_i|W_ij| + |W_ij|/Σ_j|W_ij|`,
//! `VAR = Var_inter / (mean_ℓ Var_intra,ℓ + δ)` and `P` is the activation
//! probability. All arithmetic is f64.

use std::fmt;
use std::str::FromStr;

use crate::calib::CalibStats;
use crate::error::{Error, Result};
use crate::model::SiteId;
use crate::tensor::Matrix;

/// Guard added to the intra-language variance denominator.
pub const VARIANCE_GUARD: f64 = 1e-12;

pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const DEFAULT_EPS: f64 = 5e-5;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CriterionKind {
    Magnitude,
    Wanda,
    MWanda,
    Ria,
    MRia,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 5] = [
        CriterionKind::Magnitude,
        CriterionKind::Wanda,
        CriterionKind::MWanda,
        CriterionKind::Ria,
        CriterionKind::MRia,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CriterionKind::Magnitude => "magnitude",
            CriterionKind::Wanda => "wanda",
            CriterionKind::MWanda => "m-wanda",
            CriterionKind::Ria => "ria",
            CriterionKind::MRia => "m-ria",
        }
    }

    pub fn needs_stats(self) -> bool {
        self != CriterionKind::Magnitude
    }

    /// Whether λ and ε apply.
    pub fn is_multilingual(self) -> bool {
        matches!(self, CriterionKind::MWanda | CriterionKind::MRia)
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CriterionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown criterion `{s}`")))
    }
}

/// Which weights are ranked against each other when selecting the pruned set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Grouping {
    /// Each output row of `W` independently.
    #[default]
    PerRow,
    /// The whole matrix.
    PerLayer,
}

impl Grouping {
    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::PerRow => "row",
            Grouping::PerLayer => "layer",
        }
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" | "per-row" => Ok(Grouping::PerRow),
            "layer" | "per-layer" => Ok(Grouping::PerLayer),
            other => Err(Error::Invalid(format!("unknown grouping `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriterionConfig {
    pub kind: CriterionKind,
    /// Variance scale λ.
    pub lambda: f64,
    /// Activation threshold ε; 0 disables the probability term.
    pub eps: f64,
    /// RIA activation exponent α.
    pub alpha: f64,
}

impl CriterionConfig {
    pub fn new(kind: CriterionKind) -> Self {
        Self {
            kind,
            lambda: DEFAULT_LAMBDA,
            eps: DEFAULT_EPS,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Invalid(format!("eps must be >= 0, got {}", self.eps)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Invalid(format!("alpha must be finite, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Scores for one weight matrix, row-major `[C_out, C_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub grouping: Grouping,
}

impl ImportanceTensor {
    fn from_fn(w: &Matrix, mut f: impl FnMut(usize, usize, f64) -> f64) -> Self {
        let (rows, cols) = w.shape();
        let mut scores = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (j, &v) in w.row(i).iter().enumerate() {
                scores.push(f(i, j, (v as f64).abs()));
            }
        }
        Self {
            name: String::new(),
            rows,
            cols,
            scores,
            grouping: Grouping::PerRow,
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_grouping(mut self, grouping: Grouping) -> Self {
        self.grouping = grouping;
        self
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.cols..(i + 1) * self.cols]
    }
}

fn check_finite(w: &Matrix) -> Result<()> {
    if w.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("weight matrix has non-finite entries".into()));
    }
    Ok(())
}

fn check_len(what: &str, v: &[f64], cols: usize) -> Result<()> {
    if v.len() != cols {
        return Err(Error::Shape(format!(
            "{what} has length {}, weight has {cols} input features",
            v.len()
        )));
    }
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Invalid(format!("{what} must be finite and non-negative")));
    }
    Ok(())
}

fn check_probability(p: &[f64], cols: usize) -> Result<()> {
    check_len("activation probability", p, cols)?;
    if p.iter().any(|&x| x > 1.0) {
        return Err(Error::Invalid("activation probability outside [0, 1]".into()));
    }
    Ok(())
}

pub fn score_magnitude(w: &Matrix) -> Result<ImportanceTensor> {
    check_finite(w)?;
    Ok(ImportanceTensor::from_fn(w, |_, _, a| a))
}

pub fn score_wanda(w: &Matrix, l2: &[f64]) -> Result<ImportanceTensor> {
    check_finite(w)?;
    check_len("activation norm", l2, w.cols())?;
    Ok(ImportanceTensor::from_fn(w, |_, j, a| a * l2[j]))
}

/// `base + λ · minmax(VAR)` with `VAR = var_inter / (var_intra_mean + δ)`.
/// A constant VAR normalizes to all zeros.
pub fn enhanced_activation(
    base: &[f64],
    var_inter: &[f64],
    var_intra_mean: &[f64],
    lambda: f64,
) -> Vec<f64> {
    let var: Vec<f64> = var_inter
        .iter()
        .zip(var_intra_mean)
        .map(|(inter, intra)| inter / (intra + VARIANCE_GUARD))
        .collect();
    let normalized = min_max_normalize(&var);
    base.iter()
        .zip(&normalized)
        .map(|(b, v)| b + lambda * v)
        .collect()
}

fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - min) / range).collect()
}

pub fn score_mwanda(w: &Matrix, enhanced: &[f64], prob: &[f64]) -> Result<ImportanceTensor> {
    check_finite(w)?;
    check_len("enhanced activation", enhanced, w.cols())?;
    check_probability(prob, w.cols())?;
    Ok(ImportanceTensor::from_fn(w, |_, j, a| a * enhanced[j] * prob[j]))
}

/// Column and row sums of `|W|`.
fn abs_sums(w: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = w.shape();
    let mut col = vec![0.0; cols];
    let mut row = vec![0.0; rows];
    for i in 0..rows {
        for (j, &v) in w.row(i).iter().enumerate() {
            let a = (v as f64).abs();
            col[j] += a;
            row[i] += a;
        }
    }
    (col, row)
}

fn relative_importance(a: f64, col_sum: f64, row_sum: f64) -> f64 {
    let by_col = if col_sum == 0.0 { 0.0 } else { a / col_sum };
    let by_row = if row_sum == 0.0 { 0.0 } else { a / row_sum };
    by_col + by_row
}

pub fn score_ria(w: &Matrix, l2: &[f64], alpha: f64) -> Result<ImportanceTensor> {
    check_finite(w)?;
    check_len("activation norm", l2, w.cols())?;
    let act: Vec<f64> = l2.iter().map(|x| x.powf(alpha)).collect();
    let (col, row) = abs_sums(w);
    Ok(ImportanceTensor::from_fn(w, |i, j, a| {
        relative_importance(a, col[j], row[i]) * act[j]
    }))
}

/// `enhanced` must already use `‖X‖₂^α` as its base.
pub fn score_mria(w: &Matrix, enhanced: &[f64], prob: &[f64]) -> Result<ImportanceTensor> {
    check_finite(w)?;
    check_len("enhanced activation", enhanced, w.cols())?;
    check_probability(prob, w.cols())?;
    let (col, row) = abs_sums(w);
    Ok(ImportanceTensor::from_fn(w, |i, j, a| {
        relative_importance(a, col[j], row[i]) * enhanced[j] * prob[j]
    }))
}

/// Activation probability for a criterion: ones when ε = 0, otherwise read from
/// statistics calibrated with the same ε.
fn probability_for(config: &CriterionConfig, stats: &CalibStats, site: SiteId) -> Result<Vec<f64>> {
    let width = stats.site_width(site)?;
    if config.eps == 0.0 {
        return Ok(vec![1.0; width]);
    }
    if config.eps != stats.eps() {
        return Err(Error::Incompatible(format!(
            "criterion eps {} differs from the eps {} the statistics were calibrated with",
            config.eps,
            stats.eps()
        )));
    }
    stats.activation_probability(site)
}

fn enhanced_for(config: &CriterionConfig, base: Vec<f64>, stats: &CalibStats, site: SiteId) -> Result<Vec<f64>> {
    if config.lambda == 0.0 {
        return Ok(base);
    }
    let inter = stats.inter_variance(site)?;
    let intra = stats.mean_intra_variance(site)?;
    Ok(enhanced_activation(&base, &inter, &intra, config.lambda))
}

/// Scores a weight matrix whose inputs are observed at `site`.
pub fn score(
    config: &CriterionConfig,
    w: &Matrix,
    stats: Option<&CalibStats>,
    site: SiteId,
) -> Result<ImportanceTensor> {
    config.validate()?;
    if config.kind == CriterionKind::Magnitude {
        return score_magnitude(w);
    }
    let stats = stats.ok_or_else(|| {
        Error::Incompatible(format!("criterion {} needs calibration statistics", config.kind))
    })?;
    let l2 = stats.pooled_l2(site)?;
    match config.kind {
        CriterionKind::Magnitude => unreachable!(),
        CriterionKind::Wanda => score_wanda(w, &l2),
        CriterionKind::Ria => score_ria(w, &l2, config.alpha),
        CriterionKind::MWanda => {
            let a = enhanced_for(config, l2, stats, site)?;
            let p = probability_for(config, stats, site)?;
            score_mwanda(w, &a, &p)
        }
        CriterionKind::MRia => {
            let base = l2.iter().map(|x| x.powf(config.alpha)).collect();
            let a = enhanced_for(config, base, stats, site)?;
            let p = probability_for(config, stats, site)?;
            score_mria(w, &a, &p)
        }
    }
}
