//! End-to-end commands: `calibrate`, `prune`, `eval-ppl`, `inspect`, `sweep`.
//!
//! Every command takes a typed config; [`Settings`] builds those configs from
//! flat `key=value` sources (CLI flags layered over an optional config file).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::allocation::{self, AllocConfig, AllocKind, CwlBlock, SparsityPlan};
use crate::calib::{CalibStats, STATS_KIND};
use crate::container::Container;
use crate::criteria::{self, CriterionConfig, CriterionKind, Grouping};
use crate::error::{Error, Result};
use crate::masker::{self, MaskEntry, MaskSet, VerifyReport, MASKS_KIND};
use crate::model::{self, SiteActivations, SiteId, TokenBatch, WeightStore, MODEL_KIND};

pub const DEFAULT_WINDOW: usize = 2048;
pub const DEFAULT_SEED: u64 = 0;

/// Hyperparameter search space for M-Wanda.
pub const GRID_LAMBDA: [f64; 2] = [0.02, 0.2];
pub const GRID_EPS: [f64; 3] = [5e-5, 1e-7, 0.0];
pub const GRID_GAMMA: [f64; 2] = [0.01, 0.04];
pub const GRID_CWL_BLOCK: [CwlBlock; 2] = [CwlBlock::Attn, CwlBlock::Mlp];

/// One `<lang-code> <path> <n-samples>` manifest line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub language: String,
    pub path: PathBuf,
    pub samples: usize,
}

/// Parses a manifest. Blank lines and `#` comments are skipped; relative paths
/// resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let &[language, path, samples] = fields.as_slice() else {
            return Err(Error::Invalid(format!(
                "manifest line {}: expected `<lang-code> <path> <n-samples>`",
                lineno + 1
            )));
        };
        let samples = samples.parse().map_err(|_| {
            Error::Invalid(format!("manifest line {}: bad sample count `{samples}`", lineno + 1))
        })?;
        if !seen.insert(language.to_string()) {
            return Err(Error::Invalid(format!("manifest lists `{language}` twice")));
        }
        let path = PathBuf::from(path);
        out.push(ManifestEntry {
            language: language.to_string(),
            path: if path.is_relative() { base.join(path) } else { path },
            samples,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Token stream of a corpus file: `.ids` files hold whitespace-separated token
/// ids, anything else is tokenized one token per byte.
pub fn load_corpus(path: &Path) -> Result<Vec<u32>> {
    if path.extension().is_some_and(|e| e == "ids") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Invalid(format!("bad token id `{t}` in {}", path.display())))
            })
            .collect()
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(bytes.into_iter().map(u32::from).collect())
    }
}

/// Draws `n` distinct window start offsets uniformly from a stream of `len` tokens.
pub fn sample_offsets(len: usize, window: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if window == 0 {
        return Err(Error::Invalid("window length must be positive".into()));
    }
    if len < window {
        return Err(Error::Insufficient(format!(
            "corpus of {len} tokens is shorter than one window of {window}"
        )));
    }
    let candidates = len - window + 1;
    if n > candidates {
        return Err(Error::Insufficient(format!(
            "cannot draw {n} distinct windows of {window} from {len} tokens"
        )));
    }
    Ok(rand::seq::index::sample(rng, candidates, n).into_vec())
}

#[derive(Debug, Clone)]
pub struct CalibrateConfig {
    pub model: PathBuf,
    pub manifest: Vec<ManifestEntry>,
    pub eps: f64,
    pub seed: u64,
    pub window: usize,
    pub out: Option<PathBuf>,
}

/// Collects calibration statistics and returns them as a container (with
/// seed, window and manifest recorded in the metadata).
pub fn cmd_calibrate(config: &CalibrateConfig) -> Result<Container> {
    let weights = WeightStore::load(&config.model)?;
    let container = calibrate(&weights, config)?;
    if let Some(out) = &config.out {
        container.save(out)?;
    }
    Ok(container)
}

/// [`cmd_calibrate`] on an already-loaded model.
pub fn calibrate(weights: &WeightStore, config: &CalibrateConfig) -> Result<Container> {
    if config.manifest.is_empty() {
        return Err(Error::NoLanguages);
    }
    if config.window > weights.graph().max_seq_len {
        return Err(Error::Invalid(format!(
            "window {} exceeds the model's maximum sequence length {}",
            config.window,
            weights.graph().max_seq_len
        )));
    }
    if let Some(e) = config.manifest.iter().find(|e| e.samples == 0) {
        return Err(Error::Invalid(format!("sample count for `{}` must be positive", e.language)));
    }
    let mut stats = CalibStats::for_model(
        weights.graph(),
        config.manifest.iter().map(|e| e.language.clone()),
        config.eps,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chunk = 2 * rayon::current_num_threads().max(1);
    for entry in &config.manifest {
        let tokens = load_corpus(&entry.path)?;
        let offsets = sample_offsets(tokens.len(), config.window, entry.samples, &mut rng)
            .map_err(|e| Error::Insufficient(format!("`{}`: {e}", entry.language)))?;
        for group in offsets.chunks(chunk) {
            let captured = group
                .par_iter()
                .map(|&start| {
                    let batch = TokenBatch::new(
                        entry.language.clone(),
                        tokens[start..start + config.window].to_vec(),
                    );
                    model::forward(weights, &batch, None).map(|(_, caps)| caps)
                })
                .collect::<Result<Vec<Vec<SiteActivations>>>>()?;
            for caps in captured {
                for c in caps {
                    stats.accumulate_sample(c.site, &entry.language, &c.matrix)?;
                }
            }
        }
    }
    let mut container = stats.to_container()?;
    container.set_meta("seed", config.seed.to_string());
    container.set_meta("window", config.window.to_string());
    let manifest = config
        .manifest
        .iter()
        .map(|e| format!("{} {} {}", e.language, e.path.display(), e.samples))
        .collect::<Vec<_>>()
        .join(";");
    container.set_meta("manifest", manifest);
    Ok(container)
}

#[derive(Debug, Clone)]
pub struct PruneConfig {
    pub model: PathBuf,
    pub stats: Option<PathBuf>,
    pub criterion: CriterionConfig,
    pub alloc: AllocConfig,
    pub grouping: Grouping,
    /// Output directory for `pruned.safetensors`, `masks.safetensors`, `verify.txt`, `plan.csv`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub pruned: WeightStore,
    pub masks: MaskSet,
    pub plan: SparsityPlan,
    pub report: VerifyReport,
}

impl PruneOutcome {
    /// Per-layer table: importance, target ratio, achieved sparsity.
    pub fn layer_table(&self) -> String {
        let achieved = self.masks.achieved_by_block();
        let mut out = format!("{:>5}  {:>12}  {:>8}  {:>8}\n", "layer", "importance", "target", "achieved");
        for (n, r) in self.plan.ratios.iter().enumerate() {
            let imp = self
                .plan
                .importance
                .as_ref()
                .map_or_else(|| "-".to_string(), |c| format!("{:.6}", c[n]));
            let _ = writeln!(
                out,
                "{n:>5}  {imp:>12}  {r:>8.4}  {:>8.4}",
                achieved.get(&n).copied().unwrap_or(0.0)
            );
        }
        out
    }
}

fn check_stats_match_model(stats: &CalibStats, weights: &WeightStore) -> Result<()> {
    let graph = weights.graph();
    for site in graph.sites() {
        let width = stats.site_width(site).map_err(|_| {
            Error::Incompatible(format!("statistics have no entry for site {site}"))
        })?;
        if width != graph.site_width(site.kind) {
            return Err(Error::Incompatible(format!(
                "site {site} has {width} features in the statistics, {} in the model",
                graph.site_width(site.kind)
            )));
        }
    }
    if stats.n_blocks() != graph.n_layers {
        return Err(Error::Incompatible(format!(
            "statistics cover {} blocks, model has {}",
            stats.n_blocks(),
            graph.n_layers
        )));
    }
    Ok(())
}

pub fn cmd_prune(config: &PruneConfig) -> Result<PruneOutcome> {
    let weights = WeightStore::load(&config.model)?;
    let needs_stats = config.criterion.kind.needs_stats() || config.alloc.kind != AllocKind::Uniform;
    let stats = match (&config.stats, needs_stats) {
        (Some(p), _) => Some(CalibStats::load(p)?),
        (None, true) => {
            return Err(Error::Incompatible(format!(
                "criterion {} with {} allocation needs --stats",
                config.criterion.kind, config.alloc.kind
            )))
        }
        (None, false) => None,
    };
    let outcome = prune(&weights, stats.as_ref(), config)?;
    if let Some(dir) = &config.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        outcome.pruned.save(dir.join("pruned.safetensors"))?;
        outcome.masks.save(dir.join("masks.safetensors"))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("verify.txt", outcome.report.to_text())?;
        write("plan.csv", outcome.plan.to_csv())?;
    }
    Ok(outcome)
}

/// [`cmd_prune`] on loaded inputs.
pub fn prune(weights: &WeightStore, stats: Option<&CalibStats>, config: &PruneConfig) -> Result<PruneOutcome> {
    config.criterion.validate()?;
    if let Some(s) = stats {
        check_stats_match_model(s, weights)?;
    }
    let graph = weights.graph();
    let plan = allocation::build_plan(&config.alloc, stats, graph.n_layers)?;

    let entries = graph
        .prunable()
        .par_iter()
        .map(|(block, proj, name)| {
            let w = weights.matrix(name)?;
            let site = SiteId::new(*block, proj.site_kind());
            let scores = criteria::score(&config.criterion, &w, stats, site)?
                .named(name.clone())
                .with_grouping(config.grouping);
            let mask = masker::build_mask(&scores, plan.ratios[*block], config.grouping)?;
            Ok((
                name.clone(),
                MaskEntry {
                    block: *block,
                    grouping: config.grouping,
                    mask,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut masks = MaskSet {
        plan: Some(plan.clone()),
        ..Default::default()
    };
    for (name, entry) in entries {
        masks.insert(name, entry);
    }
    let c = &config.criterion;
    let a = &config.alloc;
    for (k, v) in [
        ("criterion", c.kind.to_string()),
        ("lambda", c.lambda.to_string()),
        ("eps", c.eps.to_string()),
        ("alpha", c.alpha.to_string()),
        ("alloc", a.kind.to_string()),
        ("ratio", a.ratio.to_string()),
        ("gamma", a.gamma.to_string()),
        ("owl_m", a.owl_m.to_string()),
        ("cwl_block", a.cwl_block.to_string()),
    ] {
        masks.info.insert(k.to_string(), v);
    }

    let pruned = masker::apply(weights, &masks)?;
    let report = masker::verify(&masks, &plan)?;
    Ok(PruneOutcome {
        pruned,
        masks,
        plan,
        report,
    })
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub model: PathBuf,
    pub masks: Option<PathBuf>,
    /// Evaluation corpora; the sample count caps the number of windows (0 = all).
    pub manifest: Vec<ManifestEntry>,
    pub window: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PplRow {
    pub language: String,
    pub tokens: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PplTable {
    pub rows: Vec<PplRow>,
}

impl PplTable {
    /// Unweighted mean of the per-language perplexities.
    pub fn average(&self) -> f64 {
        self.rows.iter().map(|r| r.perplexity).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.language.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$}  {:>10}  {:>12}\n", "language", "tokens", "perplexity");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:>10}  {:>12.4}", r.language, r.tokens, r.perplexity);
        }
        let total: usize = self.rows.iter().map(|r| r.tokens).sum();
        let _ = writeln!(out, "{:<width$}  {:>10}  {:>12.4}", "average", total, self.average());
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,tokens,perplexity\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.language, r.tokens, r.perplexity);
        }
        let total: usize = self.rows.iter().map(|r| r.tokens).sum();
        let _ = writeln!(out, "average,{},{}", total, self.average());
        out
    }
}

/// Consecutive non-overlapping windows; a trailing remainder of ≥ 2 tokens is kept.
pub fn eval_windows(tokens: &[u32], window: usize, cap: usize) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = tokens
        .chunks(window.max(2))
        .filter(|c| c.len() >= 2)
        .map(<[u32]>::to_vec)
        .collect();
    if cap > 0 {
        out.truncate(cap);
    }
    out
}

pub fn load_eval_corpora(manifest: &[ManifestEntry], window: usize) -> Result<Vec<(String, Vec<TokenBatch>)>> {
    if manifest.is_empty() {
        return Err(Error::NoLanguages);
    }
    manifest
        .iter()
        .map(|e| {
            let tokens = load_corpus(&e.path)?;
            let batches: Vec<TokenBatch> = eval_windows(&tokens, window, e.samples)
                .into_iter()
                .map(|ids| TokenBatch::new(e.language.clone(), ids))
                .collect();
            if batches.is_empty() {
                return Err(Error::Insufficient(format!(
                    "evaluation corpus for `{}` has fewer than 2 tokens",
                    e.language
                )));
            }
            Ok((e.language.clone(), batches))
        })
        .collect()
}

/// Per-language perplexity on loaded corpora.
pub fn evaluate(
    weights: &WeightStore,
    masks: Option<&MaskSet>,
    corpora: &[(String, Vec<TokenBatch>)],
) -> Result<PplTable> {
    let masked;
    let weights = match masks {
        Some(m) => {
            masked = masker::apply(weights, m)?;
            &masked
        }
        None => weights,
    };
    let rows = corpora
        .iter()
        .map(|(lang, batches)| {
            let (nll, n) = model::corpus_nll(weights, batches, None)?;
            Ok(PplRow {
                language: lang.clone(),
                tokens: n,
                perplexity: (nll / n as f64).exp(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PplTable { rows })
}

pub fn cmd_eval_ppl(config: &EvalConfig) -> Result<PplTable> {
    let weights = WeightStore::load(&config.model)?;
    let masks = config.masks.as_ref().map(MaskSet::load).transpose()?;
    let corpora = load_eval_corpora(&config.manifest, config.window)?;
    let table = evaluate(&weights, masks.as_ref(), &corpora)?;
    if let Some(out) = &config.out {
        std::fs::write(out, table.to_csv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(table)
}

/// Human-readable summary of any container this crate writes.
pub fn cmd_inspect(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    for path in paths {
        let c = Container::load(path)?;
        let _ = writeln!(out, "== {} ({})", path.display(), c.kind().unwrap_or("unknown"));
        match c.kind() {
            Some(MODEL_KIND) => inspect_model(&mut out, WeightStore::from_container(c)?),
            Some(STATS_KIND) => inspect_stats(&mut out, &c)?,
            Some(MASKS_KIND) => inspect_masks(&mut out, &MaskSet::from_container(&c)?)?,
            _ => {
                for (k, v) in c.metadata() {
                    let _ = writeln!(out, "{k} = {v}");
                }
                for (name, rec) in c.tensors() {
                    let _ = writeln!(out, "{name} {:?}", rec.shape());
                }
            }
        }
    }
    Ok(out)
}

fn inspect_model(out: &mut String, w: WeightStore) {
    let g = w.graph().clone();
    let _ = writeln!(
        out,
        "vocab_size {} d_model {} n_layers {} n_heads {} d_head {} d_ff {} tie_embeddings {}",
        g.vocab_size, g.d_model, g.n_layers, g.n_heads, g.d_head, g.d_ff, g.tie_embeddings
    );
    let _ = writeln!(out, "layer,zero_fraction");
    for b in 0..g.n_layers {
        let (mut zeros, mut total) = (0usize, 0usize);
        for (block, _, name) in g.prunable() {
            if block == b {
                let data = w.tensor(&name).expect("validated").data();
                zeros += data.iter().filter(|&&v| v == 0.0).count();
                total += data.len();
            }
        }
        let _ = writeln!(out, "{b},{:.6}", zeros as f64 / total as f64);
    }
}

fn inspect_stats(out: &mut String, c: &Container) -> Result<()> {
    let stats = CalibStats::from_container(c)?;
    let _ = writeln!(out, "languages {}", stats.languages().join(","));
    let _ = writeln!(out, "eps {}", stats.eps());
    for key in ["seed", "window"] {
        if let Some(v) = c.meta(key) {
            let _ = writeln!(out, "{key} {v}");
        }
    }
    let _ = writeln!(out, "sites {}", stats.sites().count());
    let _ = writeln!(out, "language,tokens,samples");
    let first = stats.sites().next();
    for (lang, n) in stats.token_counts()? {
        let samples = match first {
            Some(site) => stats.get(site, &lang)?.sample_means.len(),
            None => 0,
        };
        let _ = writeln!(out, "{lang},{n},{samples}");
    }
    Ok(())
}

fn inspect_masks(out: &mut String, masks: &MaskSet) -> Result<()> {
    for (k, v) in &masks.info {
        let _ = writeln!(out, "{k} = {v}");
    }
    let achieved = masks.achieved_by_block();
    let _ = writeln!(out, "layer,importance,target,achieved");
    for (layer, a) in &achieved {
        let (imp, target) = match &masks.plan {
            Some(p) if *layer < p.len() => (
                p.importance.as_ref().map_or(String::new(), |c| c[*layer].to_string()),
                p.ratios[*layer].to_string(),
            ),
            _ => (String::new(), String::new()),
        };
        let _ = writeln!(out, "{layer},{imp},{target},{a}");
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub prune: PruneConfig,
    pub eval_manifest: Vec<ManifestEntry>,
    pub window: usize,
    pub ratios: Vec<f64>,
    /// Also enumerate the λ / ε / γ / CWL-block grid.
    pub grid: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub criterion: CriterionConfig,
    pub alloc: AllocConfig,
    pub table: PplTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Grid points not run, with the reason.
    pub skipped: Vec<String>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let langs: Vec<String> = self
            .rows
            .first()
            .map(|r| r.table.rows.iter().map(|x| x.language.clone()).collect())
            .unwrap_or_default();
        let mut out = String::from("criterion,alloc,ratio,lambda,eps,gamma,cwl_block");
        for l in &langs {
            out.push(',');
            out.push_str(l);
        }
        out.push_str(",average\n");
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.criterion.kind, r.alloc.kind, r.alloc.ratio, r.criterion.lambda, r.criterion.eps, r.alloc.gamma, r.alloc.cwl_block
            );
            for x in &r.table.rows {
                let _ = write!(out, ",{}", x.perplexity);
            }
            let _ = writeln!(out, ",{}", r.table.average());
        }
        out
    }
}

/// `0.30, 0.35, ..., 0.70`.
pub fn default_sweep_ratios() -> Vec<f64> {
    (0..=8).map(|i| (30 + 5 * i) as f64 / 100.0).collect()
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_ratios(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Invalid(format!("bad ratio list `{s}`"));
    if let Some((start, rest)) = s.split_once(':') {
        let (stop, step) = rest.split_once(':').ok_or_else(bad)?;
        let (start, stop, step): (f64, f64, f64) = (
            start.parse().map_err(|_| bad())?,
            stop.parse().map_err(|_| bad())?,
            step.parse().map_err(|_| bad())?,
        );
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        // rounded to 1e-9 so 0.3 + 8 · 0.05 prints as 0.7
        Ok((0..=n)
            .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
            .collect())
    } else {
        s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
    }
}

pub fn cmd_sweep(config: &SweepConfig) -> Result<SweepResult> {
    let weights = WeightStore::load(&config.prune.model)?;
    let stats = config.prune.stats.as_ref().map(CalibStats::load).transpose()?;
    let corpora = load_eval_corpora(&config.eval_manifest, config.window)?;
    let result = sweep(&weights, stats.as_ref(), &corpora, config)?;
    if let Some(out) = &config.out {
        std::fs::write(out, result.to_csv()).map_err(|e| Error::io(out, e))?;
    }
    Ok(result)
}

pub fn sweep(
    weights: &WeightStore,
    stats: Option<&CalibStats>,
    corpora: &[(String, Vec<TokenBatch>)],
    config: &SweepConfig,
) -> Result<SweepResult> {
    let base = &config.prune;
    let mut points: Vec<(CriterionConfig, AllocConfig)> = Vec::new();
    let mut skipped = Vec::new();
    if config.grid {
        for &lambda in &GRID_LAMBDA {
            for &eps in &GRID_EPS {
                for &gamma in &GRID_GAMMA {
                    for &block in &GRID_CWL_BLOCK {
                        let mut c = base.criterion;
                        c.lambda = lambda;
                        c.eps = eps;
                        let mut a = base.alloc;
                        a.gamma = gamma;
                        a.cwl_block = block;
                        if let Some(s) = stats {
                            if eps != 0.0 && eps != s.eps() {
                                skipped.push(format!(
                                    "lambda={lambda} eps={eps} gamma={gamma} cwl_block={block}: statistics calibrated with eps={}",
                                    s.eps()
                                ));
                                continue;
                            }
                        }
                        points.push((c, a));
                    }
                }
            }
        }
    } else {
        points.push((base.criterion, base.alloc));
    }

    let mut rows = Vec::new();
    for (criterion, alloc) in points {
        for &ratio in &config.ratios {
            let mut alloc = alloc;
            alloc.ratio = ratio;
            let cfg = PruneConfig {
                criterion,
                alloc,
                ..base.clone()
            };
            let outcome = prune(weights, stats, &cfg)?;
            let table = evaluate(&outcome.pruned, None, corpora)?;
            rows.push(SweepRow {
                criterion,
                alloc,
                table,
            });
        }
    }
    Ok(SweepResult { rows, skipped })
}

/// Flat `key=value` settings. Later sources override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses a config file body: one `key=value` per line, `#` comments.
    /// Keys use the long flag spelling without dashes (`owl-m`, `cwl-block`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("config line {}: expected key=value", lineno + 1))
            })?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    /// `other` wins on conflicts.
    pub fn overlay(mut self, other: &Settings) -> Self {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Invalid(format!("invalid value `{raw}` for {key}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| Error::Invalid(format!("missing required --{key}")))
    }

    fn manifest(&self) -> Result<Vec<ManifestEntry>> {
        load_manifest(&self.require_path("manifest")?)
    }

    pub fn criterion(&self) -> Result<CriterionConfig> {
        let kind: CriterionKind = self.parse_or("criterion", CriterionKind::MWanda)?;
        let c = CriterionConfig {
            kind,
            lambda: self.parse_or("lambda", criteria::DEFAULT_LAMBDA)?,
            eps: self.parse_or("eps", criteria::DEFAULT_EPS)?,
            alpha: self.parse_or("alpha", criteria::DEFAULT_ALPHA)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn alloc(&self) -> Result<AllocConfig> {
        Ok(AllocConfig {
            kind: self.parse_or("alloc", AllocKind::Cwl)?,
            ratio: self.parse_or("ratio", allocation::DEFAULT_RATIO)?,
            gamma: self.parse_or("gamma", allocation::DEFAULT_GAMMA)?,
            owl_m: self.parse_or("owl-m", allocation::DEFAULT_OWL_M)?,
            cwl_block: self.parse_or("cwl-block", CwlBlock::Attn)?,
        })
    }

    pub fn calibrate_config(&self) -> Result<CalibrateConfig> {
        Ok(CalibrateConfig {
            model: self.require_path("model")?,
            manifest: self.manifest()?,
            eps: self.parse_or("eps", criteria::DEFAULT_EPS)?,
            seed: self.parse_or("seed", DEFAULT_SEED)?,
            window: self.parse_or("window", DEFAULT_WINDOW)?,
            out: self.path("out"),
        })
    }

    pub fn prune_config(&self) -> Result<PruneConfig> {
        Ok(PruneConfig {
            model: self.require_path("model")?,
            stats: self.path("stats"),
            criterion: self.criterion()?,
            alloc: self.alloc()?,
            grouping: self.parse_or("grouping", Grouping::PerRow)?,
            out: self.path("out"),
        })
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            model: self.require_path("model")?,
            masks: self.path("masks"),
            manifest: self.manifest()?,
            window: self.parse_or("window", DEFAULT_WINDOW)?,
            out: self.path("out"),
        })
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let mut prune = self.prune_config()?;
        prune.out = None;
        let ratios = match self.get("ratios") {
            Some(r) => parse_ratios(r)?,
            None => default_sweep_ratios(),
        };
        Ok(SweepConfig {
            prune,
            eval_manifest: self.manifest()?,
            window: self.parse_or("window", DEFAULT_WINDOW)?,
            ratios,
            grid: self.parse_or("grid", false)?,
            out: self.path("out"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# calib\nen corpora/en.txt 16\n\nde /abs/de.txt 8\n", Path::new("/base")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].path, PathBuf::from("/base/corpora/en.txt"));
        assert_eq!(m[1].path, PathBuf::from("/abs/de.txt"));
        assert_eq!(m[1].samples, 8);
        assert!(parse_manifest("en a.txt", Path::new(".")).is_err());
        assert!(parse_manifest("en a.txt x", Path::new(".")).is_err());
        assert!(parse_manifest("en a 1\nen b 2", Path::new(".")).is_err());
    }

    #[test]
    fn offsets_are_distinct_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let offs = sample_offsets(100, 10, 20, &mut rng).unwrap();
        let set: BTreeSet<_> = offs.iter().collect();
        assert_eq!(set.len(), 20);
        assert!(offs.iter().all(|&o| o + 10 <= 100));
        assert!(sample_offsets(5, 10, 1, &mut rng).is_err());
        assert!(sample_offsets(10, 10, 2, &mut rng).is_err());
    }

    #[test]
    fn windows_for_evaluation() {
        let t: Vec<u32> = (0..11).collect();
        let w = eval_windows(&t, 4, 0);
        assert_eq!(w.len(), 3);
        assert_eq!(w[2], vec![8, 9, 10]);
        assert_eq!(eval_windows(&t, 4, 2).len(), 2);
        assert_eq!(eval_windows(&(0..9).collect::<Vec<_>>(), 4, 0).len(), 2);
    }

    #[test]
    fn ppl_table_average_is_arithmetic_mean() {
        let t = PplTable {
            rows: vec![
                PplRow { language: "de".into(), tokens: 10, perplexity: 12.0 },
                PplRow { language: "en".into(), tokens: 20, perplexity: 8.0 },
            ],
        };
        assert_eq!(t.average(), 10.0);
        let csv = t.to_csv();
        assert_eq!(csv.lines().next(), Some("language,tokens,perplexity"));
        assert_eq!(csv.lines().last(), Some("average,30,10"));
        assert_eq!(t.to_text().lines().count(), 4);
    }

    #[test]
    fn ratio_lists() {
        assert_eq!(parse_ratios("0.3:0.7:0.05").unwrap(), default_sweep_ratios());
        assert_eq!(default_sweep_ratios().last(), Some(&0.7));
        assert_eq!(parse_ratios("0.5, 0.6").unwrap(), vec![0.5, 0.6]);
        assert!(parse_ratios("0.5:0.1:0.1").is_err());
    }

    #[test]
    fn settings_layering_and_defaults() {
        let file = Settings::parse("criterion = wanda\nratio=0.6\nowl_m=3\n# comment\n").unwrap();
        let mut flags = Settings::default();
        flags.set("ratio", "0.7");
        let s = file.overlay(&flags);
        let c = s.criterion().unwrap();
        assert_eq!(c.kind, CriterionKind::Wanda);
        assert_eq!(c.lambda, 0.2);
        assert_eq!(c.eps, 5e-5);
        assert_eq!(c.alpha, 0.5);
        let a = s.alloc().unwrap();
        assert_eq!(a.ratio, 0.7);
        assert_eq!(a.owl_m, 3.0);
        assert_eq!(a.gamma, 0.04);
        assert_eq!(a.kind, AllocKind::Cwl);
        assert_eq!(a.cwl_block, CwlBlock::Attn);
        assert!(Settings::parse("novalue").is_err());
        let mut bad = Settings::default();
        bad.set("criterion", "sparsegpt");
        assert!(bad.criterion().is_err());
    }
}
