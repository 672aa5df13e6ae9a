//! Streaming per-site, per-language activation statistics.
//!
//! For each capture site and calibration language we keep, per input feature
//! `j`: the token count, `Σ x_j²`, the running token mean, one token-mean row
//! per calibration sequence, and the number of tokens with `|x_j| > ε`.
//! Everything else (pooled norms, variances, activation probabilities,
//! correlations) is derived from these.

use std::collections::{BTreeMap, BTreeSet};

use crate::container::{Container, TensorRecord};
use crate::error::{Error, Result};
use crate::model::{ActivationSink, ModelGraph, SiteId};
use crate::tensor::Matrix;

pub const STATS_KIND: &str = "calib-stats";

#[derive(Debug, Clone, PartialEq)]
pub struct SiteLangStats {
    pub token_count: u64,
    pub sum_sq: Vec<f64>,
    pub mean: Vec<f64>,
    /// One token-mean vector per calibration sequence.
    pub sample_means: Vec<Vec<f64>>,
    pub sample_token_counts: Vec<u64>,
    pub count_above_eps: Vec<u64>,
}

impl SiteLangStats {
    fn new(width: usize) -> Self {
        Self {
            token_count: 0,
            sum_sq: vec![0.0; width],
            mean: vec![0.0; width],
            sample_means: Vec::new(),
            sample_token_counts: Vec::new(),
            count_above_eps: vec![0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.sum_sq.len()
    }

    /// Folds one calibration sequence (`rows` are its tokens) into the statistics.
    fn push_sample(&mut self, acts: &Matrix, start: usize, end: usize, eps: f64) {
        let width = self.width();
        let n = (end - start) as u64;
        let mut sum = vec![0.0f64; width];
        for i in start..end {
            for (j, &x) in acts.row(i).iter().enumerate() {
                let x = x as f64;
                sum[j] += x;
                self.sum_sq[j] += x * x;
                if x.abs() > eps {
                    self.count_above_eps[j] += 1;
                }
            }
        }
        let total = self.token_count + n;
        if n > 0 {
            // Merge of running means: mean' = mean + (Σx − n·mean) / total.
            for (m, s) in self.mean.iter_mut().zip(&sum) {
                *m += (s - n as f64 * *m) / total as f64;
            }
        }
        self.token_count = total;
        let sample_mean = if n > 0 {
            sum.iter().map(|s| s / n as f64).collect()
        } else {
            vec![0.0; width]
        };
        self.sample_means.push(sample_mean);
        self.sample_token_counts.push(n);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SiteEntry {
    width: usize,
    langs: BTreeMap<String, SiteLangStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    eps: f64,
    languages: Vec<String>,
    sites: BTreeMap<SiteId, SiteEntry>,
}

fn check_language_code(code: &str) -> Result<()> {
    if code.is_empty() || code.contains(['/', ',', ':']) || code.chars().any(char::is_whitespace) {
        return Err(Error::Invalid(format!("invalid language code `{code}`")));
    }
    Ok(())
}

impl CalibStats {
    /// Empty statistics for the given sites (with their input widths).
    pub fn new(
        languages: impl IntoIterator<Item = impl Into<String>>,
        sites: impl IntoIterator<Item = (SiteId, usize)>,
        eps: f64,
    ) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Invalid(format!("eps must be finite and >= 0, got {eps}")));
        }
        let set: BTreeSet<String> = languages.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(Error::NoLanguages);
        }
        for l in &set {
            check_language_code(l)?;
        }
        let languages: Vec<String> = set.into_iter().collect();
        let sites = sites
            .into_iter()
            .map(|(site, width)| {
                let langs = languages
                    .iter()
                    .map(|l| (l.clone(), SiteLangStats::new(width)))
                    .collect();
                (site, SiteEntry { width, langs })
            })
            .collect();
        Ok(Self {
            eps,
            languages,
            sites,
        })
    }

    pub fn for_model(
        graph: &ModelGraph,
        languages: impl IntoIterator<Item = impl Into<String>>,
        eps: f64,
    ) -> Result<Self> {
        let sites = graph
            .sites()
            .into_iter()
            .map(|s| (s, graph.site_width(s.kind)));
        Self::new(languages, sites, eps)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn sites(&self) -> impl Iterator<Item = SiteId> + '_ {
        self.sites.keys().copied()
    }

    /// Highest block index + 1 over all sites.
    pub fn n_blocks(&self) -> usize {
        self.sites.keys().map(|s| s.block + 1).max().unwrap_or(0)
    }

    pub fn site_width(&self, site: SiteId) -> Result<usize> {
        self.entry(site).map(|e| e.width)
    }

    fn entry(&self, site: SiteId) -> Result<&SiteEntry> {
        self.sites
            .get(&site)
            .ok_or_else(|| Error::Invalid(format!("unknown site {site}")))
    }

    pub fn get(&self, site: SiteId, language: &str) -> Result<&SiteLangStats> {
        self.entry(site)?
            .langs
            .get(language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    fn lang_stats(&self, site: SiteId) -> Result<impl Iterator<Item = &SiteLangStats>> {
        Ok(self.entry(site)?.langs.values())
    }

    /// Folds a block of token activations into the statistics of one
    /// (site, language). `sample_starts` are the first row of each calibration
    /// sequence within `activations`; it must begin at 0 and increase strictly.
    pub fn accumulate(
        &mut self,
        site: SiteId,
        language: &str,
        activations: &Matrix,
        sample_starts: &[usize],
    ) -> Result<()> {
        let eps = self.eps;
        let entry = self
            .sites
            .get_mut(&site)
            .ok_or_else(|| Error::Invalid(format!("unknown site {site}")))?;
        if activations.cols() != entry.width {
            return Err(Error::Shape(format!(
                "site {site} has {} features, activations have {}",
                entry.width,
                activations.cols()
            )));
        }
        let stats = entry
            .langs
            .get_mut(language)
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))?;
        let rows = activations.rows();
        if sample_starts.first() != Some(&0)
            || sample_starts.windows(2).any(|w| w[0] >= w[1])
            || sample_starts.last().is_some_and(|&s| s >= rows.max(1))
        {
            return Err(Error::Invalid(format!(
                "sample boundaries {sample_starts:?} do not partition {rows} rows"
            )));
        }
        for (k, &start) in sample_starts.iter().enumerate() {
            let end = sample_starts.get(k + 1).copied().unwrap_or(rows);
            stats.push_sample(activations, start, end, eps);
        }
        Ok(())
    }

    /// Folds one whole calibration sequence.
    pub fn accumulate_sample(&mut self, site: SiteId, language: &str, activations: &Matrix) -> Result<()> {
        self.accumulate(site, language, activations, &[0])
    }

    /// An [`ActivationSink`] that records every observed site as one sample of `language`.
    pub fn sink<'a>(&'a mut self, language: &'a str) -> LanguageSink<'a> {
        LanguageSink {
            stats: self,
            language,
        }
    }

    /// `‖X_j‖₂` over every token of every language.
    pub fn pooled_l2(&self, site: SiteId) -> Result<Vec<f64>> {
        let entry = self.entry(site)?;
        let tokens: u64 = entry.langs.values().map(|s| s.token_count).sum();
        if tokens == 0 {
            return Err(Error::Insufficient(format!("no tokens recorded at {site}")));
        }
        let mut acc = vec![0.0; entry.width];
        for s in entry.langs.values() {
            for (a, v) in acc.iter_mut().zip(&s.sum_sq) {
                *a += v;
            }
        }
        Ok(acc.into_iter().map(f64::sqrt).collect())
    }

    /// Population variance of the per-language means around their unweighted average.
    pub fn inter_variance(&self, site: SiteId) -> Result<Vec<f64>> {
        let entry = self.entry(site)?;
        let n = entry.langs.len();
        if n < 2 {
            return Err(Error::Insufficient(format!(
                "inter-language variance needs at least 2 languages, have {n}"
            )));
        }
        let means: Vec<&[f64]> = entry.langs.values().map(|s| s.mean.as_slice()).collect();
        Ok((0..entry.width)
            .map(|j| population_variance(means.iter().map(|m| m[j])))
            .collect())
    }

    /// Population variance across one language's per-sequence mean vectors.
    pub fn intra_variance(&self, site: SiteId, language: &str) -> Result<Vec<f64>> {
        let s = self.get(site, language)?;
        if s.sample_means.len() < 2 {
            return Err(Error::Insufficient(format!(
                "intra-language variance for `{language}` needs at least 2 samples, have {}",
                s.sample_means.len()
            )));
        }
        Ok((0..s.width())
            .map(|j| population_variance(s.sample_means.iter().map(|m| m[j])))
            .collect())
    }

    /// Unweighted mean over languages of [`Self::intra_variance`].
    pub fn mean_intra_variance(&self, site: SiteId) -> Result<Vec<f64>> {
        let width = self.site_width(site)?;
        let mut acc = vec![0.0; width];
        for lang in &self.languages {
            for (a, v) in acc.iter_mut().zip(self.intra_variance(site, lang)?) {
                *a += v;
            }
        }
        let n = self.languages.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// Fraction of tokens with `|x_j| > ε`, macro-averaged over languages.
    /// With ε = 0 the term is disabled and every entry is 1.
    pub fn activation_probability(&self, site: SiteId) -> Result<Vec<f64>> {
        let entry = self.entry(site)?;
        if self.eps == 0.0 {
            return Ok(vec![1.0; entry.width]);
        }
        let mut acc = vec![0.0; entry.width];
        for (lang, s) in &entry.langs {
            if s.token_count == 0 {
                return Err(Error::Insufficient(format!(
                    "no tokens recorded for `{lang}` at {site}"
                )));
            }
            for (a, &c) in acc.iter_mut().zip(&s.count_above_eps) {
                *a += c as f64 / s.token_count as f64;
            }
        }
        let n = entry.langs.len() as f64;
        Ok(acc.into_iter().map(|a| a / n).collect())
    }

    /// Per-language token-mean vectors in language order.
    pub fn language_means(&self, site: SiteId) -> Result<Vec<&[f64]>> {
        Ok(self.lang_stats(site)?.map(|s| s.mean.as_slice()).collect())
    }

    /// Per-language sample-mean rows in language order.
    pub fn language_sample_means(&self, site: SiteId) -> Result<Vec<&[Vec<f64>]>> {
        Ok(self
            .lang_stats(site)?
            .map(|s| s.sample_means.as_slice())
            .collect())
    }

    /// Token counts per language; errors when sites disagree.
    pub fn token_counts(&self) -> Result<BTreeMap<String, u64>> {
        let mut out: Option<BTreeMap<String, u64>> = None;
        for (site, entry) in &self.sites {
            let counts: BTreeMap<String, u64> = entry
                .langs
                .iter()
                .map(|(l, s)| (l.clone(), s.token_count))
                .collect();
            match &out {
                None => out = Some(counts),
                Some(prev) if *prev != counts => {
                    return Err(Error::Incompatible(format!(
                        "site {site} saw different token counts than earlier sites"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(out.unwrap_or_else(|| self.languages.iter().map(|l| (l.clone(), 0)).collect()))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::with_kind(STATS_KIND);
        c.set_meta("languages", self.languages.join(","));
        c.set_meta("eps", self.eps.to_string());
        let counts = self
            .token_counts()?
            .iter()
            .map(|(l, n)| format!("{l}:{n}"))
            .collect::<Vec<_>>()
            .join(",");
        c.set_meta("token_counts", counts);
        let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        for (site, entry) in &self.sites {
            for (lang, s) in &entry.langs {
                let prefix = format!("{site}/{lang}");
                c.insert(format!("{prefix}/sum_sq"), TensorRecord::vector(to_f32(&s.sum_sq)))?;
                c.insert(format!("{prefix}/mean"), TensorRecord::vector(to_f32(&s.mean)))?;
                let rows = s.sample_means.len();
                let flat: Vec<f32> = s.sample_means.iter().flat_map(|r| to_f32(r)).collect();
                c.insert(
                    format!("{prefix}/sample_means"),
                    TensorRecord::new(vec![rows, entry.width], flat)?,
                )?;
                c.insert(
                    format!("{prefix}/sample_token_counts"),
                    TensorRecord::vector(s.sample_token_counts.iter().map(|&n| n as f32).collect()),
                )?;
                c.insert(
                    format!("{prefix}/count_above_eps"),
                    TensorRecord::vector(s.count_above_eps.iter().map(|&n| n as f32).collect()),
                )?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind() != Some(STATS_KIND) {
            return Err(Error::Header(format!(
                "expected a `{STATS_KIND}` container, found kind {:?}",
                c.kind()
            )));
        }
        let languages: Vec<String> = c
            .require_meta("languages")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        let eps: f64 = c
            .require_meta("eps")?
            .parse()
            .map_err(|_| Error::Header("metadata `eps` is not numeric".into()))?;
        let mut token_counts = BTreeMap::new();
        for part in c.require_meta("token_counts")?.split(',').filter(|s| !s.is_empty()) {
            let (lang, n) = part
                .split_once(':')
                .ok_or_else(|| Error::Header(format!("bad token_counts entry `{part}`")))?;
            let n: u64 = n
                .parse()
                .map_err(|_| Error::Header(format!("bad token count `{n}`")))?;
            token_counts.insert(lang.to_string(), n);
        }

        let mut sites = BTreeMap::new();
        for (name, rec) in c.tensors() {
            if let Some(site) = name.strip_suffix("/sum_sq").and_then(|p| p.split('/').next()) {
                sites.insert(site.parse::<SiteId>()?, rec.shape().first().copied().unwrap_or(0));
            }
        }
        let mut stats = Self::new(languages.clone(), sites.clone(), eps)?;
        if stats.languages != languages {
            return Err(Error::Header("`languages` must be sorted and unique".into()));
        }
        let to_f64 = |r: &TensorRecord| r.data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let to_u64 = |r: &TensorRecord| r.data().iter().map(|&x| x as u64).collect::<Vec<u64>>();
        for (site, width) in sites {
            let entry = stats.sites.get_mut(&site).expect("created above");
            for (lang, s) in entry.langs.iter_mut() {
                let prefix = format!("{site}/{lang}");
                let fetch = |leaf: &str| -> Result<&TensorRecord> {
                    let rec = c.require(&format!("{prefix}/{leaf}"))?;
                    Ok(rec)
                };
                let check = |rec: &TensorRecord, len: usize, leaf: &str| -> Result<()> {
                    if rec.data().len() != len {
                        return Err(Error::Shape(format!(
                            "`{prefix}/{leaf}` has {} values, expected {len}",
                            rec.data().len()
                        )));
                    }
                    Ok(())
                };
                let sum_sq = fetch("sum_sq")?;
                let mean = fetch("mean")?;
                let counts = fetch("count_above_eps")?;
                let sample_means = fetch("sample_means")?;
                let sample_counts = fetch("sample_token_counts")?;
                check(sum_sq, width, "sum_sq")?;
                check(mean, width, "mean")?;
                check(counts, width, "count_above_eps")?;
                let rows = sample_counts.data().len();
                if sample_means.shape() != [rows, width] {
                    return Err(Error::Shape(format!(
                        "`{prefix}/sample_means` has shape {:?}, expected [{rows}, {width}]",
                        sample_means.shape()
                    )));
                }
                s.token_count = *token_counts
                    .get(lang)
                    .ok_or_else(|| Error::Header(format!("no token count for `{lang}`")))?;
                s.sum_sq = to_f64(sum_sq);
                s.mean = to_f64(mean);
                s.count_above_eps = to_u64(counts);
                s.sample_token_counts = to_u64(sample_counts);
                s.sample_means = if width == 0 {
                    vec![Vec::new(); rows]
                } else {
                    to_f64(sample_means).chunks(width).map(<[f64]>::to_vec).collect()
                };
                if s.count_above_eps.iter().any(|&n| n > s.token_count) {
                    return Err(Error::Invalid(format!(
                        "`{prefix}/count_above_eps` exceeds the token count"
                    )));
                }
            }
        }
        Ok(stats)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub struct LanguageSink<'a> {
    stats: &'a mut CalibStats,
    language: &'a str,
}

impl ActivationSink for LanguageSink<'_> {
    fn observe(&mut self, site: SiteId, activations: &Matrix) -> Result<()> {
        self.stats.accumulate_sample(site, self.language, activations)
    }
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// Mean cosine similarity over all unordered pairs of language vectors.
pub fn language_diversity(vectors: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
    if vectors.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 language vectors, have {}",
            vectors.len()
        )));
    }
    let vs: Vec<(&String, &Vec<f64>)> = vectors.iter().collect();
    let dim = vs[0].1.len();
    let mut norms = Vec::with_capacity(vs.len());
    for (lang, v) in &vs {
        if v.len() != dim {
            return Err(Error::Shape(format!("vector for `{lang}` has length {}, expected {dim}", v.len())));
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Invalid(format!("zero-norm vector for `{lang}`")));
        }
        norms.push(n);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..vs.len() {
        for b in a + 1..vs.len() {
            let d: f64 = vs[a].1.iter().zip(vs[b].1).map(|(x, y)| x * y).sum();
            total += d / (norms[a] * norms[b]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
