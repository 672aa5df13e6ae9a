//! Brute-force reference implementations and constructed instances.
//!
//! Nothing in here calls the scoring, statistics, allocation or masking code of
//! the library; only data types are shared.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lingprune::calib::CalibStats;
use lingprune::criteria::{CriterionKind, Grouping};
use lingprune::model::{SiteId, SiteKind, WeightStore};
use lingprune::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Activations of one site: `languages[l].1[sample][token][feature]`.
#[derive(Debug, Clone)]
pub struct RawActivations {
    pub width: usize,
    pub eps: f64,
    /// Sorted by language code.
    pub languages: Vec<(String, Vec<Vec<Vec<f32>>>)>,
}

pub const SITE: SiteId = SiteId {
    block: 0,
    kind: SiteKind::AttnIn,
};

impl RawActivations {
    /// Production statistics fed the same activations, one sample at a time.
    pub fn to_stats(&self) -> CalibStats {
        let mut stats = CalibStats::new(
            self.languages.iter().map(|(l, _)| l.clone()),
            [(SITE, self.width)],
            self.eps,
        )
        .unwrap();
        for (lang, samples) in &self.languages {
            for s in samples {
                let m = Matrix::from_rows(s).unwrap();
                stats.accumulate_sample(SITE, lang, &m).unwrap();
            }
        }
        stats
    }

    fn values(&self, lang: usize, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.languages[lang]
            .1
            .iter()
            .flat_map(move |s| s.iter().map(move |t| t[j] as f64))
    }

    pub fn token_count(&self, lang: usize) -> usize {
        self.languages[lang].1.iter().map(Vec::len).sum()
    }

    pub fn sum_sq(&self, lang: usize, j: usize) -> f64 {
        self.values(lang, j).map(|x| x * x).sum()
    }

    pub fn l2(&self, j: usize) -> f64 {
        let mut total = 0.0;
        for l in 0..self.languages.len() {
            total += self.sum_sq(l, j);
        }
        total.sqrt()
    }

    pub fn lang_mean(&self, lang: usize, j: usize) -> f64 {
        self.values(lang, j).sum::<f64>() / self.token_count(lang) as f64
    }

    pub fn sample_mean(&self, lang: usize, sample: usize, j: usize) -> f64 {
        let s = &self.languages[lang].1[sample];
        if s.is_empty() {
            return 0.0;
        }
        s.iter().map(|t| t[j] as f64).sum::<f64>() / s.len() as f64
    }

    pub fn count_above(&self, lang: usize, j: usize, eps: f64) -> usize {
        self.values(lang, j).filter(|x| x.abs() > eps).count()
    }

    /// Two-pass population variance of the language means.
    pub fn inter_var(&self, j: usize) -> f64 {
        let n = self.languages.len() as f64;
        let means: Vec<f64> = (0..self.languages.len()).map(|l| self.lang_mean(l, j)).collect();
        let mu = means.iter().sum::<f64>() / n;
        means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n
    }

    /// Two-pass population variance of one language's per-sample means.
    pub fn intra_var(&self, lang: usize, j: usize) -> f64 {
        let s = self.languages[lang].1.len();
        let means: Vec<f64> = (0..s).map(|k| self.sample_mean(lang, k, j)).collect();
        let mu = means.iter().sum::<f64>() / s as f64;
        means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / s as f64
    }

    pub fn mean_intra_var(&self, j: usize) -> f64 {
        let n = self.languages.len();
        (0..n).map(|l| self.intra_var(l, j)).sum::<f64>() / n as f64
    }

    /// Activation probability; disabled (all ones) at ε = 0.
    pub fn prob(&self, j: usize, eps: f64) -> f64 {
        if eps == 0.0 {
            return 1.0;
        }
        let n = self.languages.len();
        (0..n)
            .map(|l| self.count_above(l, j, eps) as f64 / self.token_count(l) as f64)
            .sum::<f64>()
            / n as f64
    }
}

/// Straight-line transcription of every criterion.
pub fn reference_scores(
    kind: CriterionKind,
    w: &Matrix,
    raw: &RawActivations,
    lambda: f64,
    eps: f64,
    alpha: f64,
) -> Vec<f64> {
    let rows = w.rows();
    let cols = w.cols();
    let abs = |i: usize, j: usize| (w.get(i, j) as f64).abs();

    let mut var = vec![0.0; cols];
    for j in 0..cols {
        var[j] = raw.inter_var(j) / (raw.mean_intra_var(j) + 1e-12);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for j in 0..cols {
        if var[j] < lo {
            lo = var[j];
        }
        if var[j] > hi {
            hi = var[j];
        }
    }
    let mut var_norm = vec![0.0; cols];
    if hi > lo {
        for j in 0..cols {
            var_norm[j] = (var[j] - lo) / (hi - lo);
        }
    }

    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let l2 = raw.l2(j);
            let mut col_sum = 0.0;
            for r in 0..rows {
                col_sum += abs(r, j);
            }
            let mut row_sum = 0.0;
            for c in 0..cols {
                row_sum += abs(i, c);
            }
            let ri = {
                let a = if col_sum == 0.0 { 0.0 } else { abs(i, j) / col_sum };
                let b = if row_sum == 0.0 { 0.0 } else { abs(i, j) / row_sum };
                a + b
            };
            out[i * cols + j] = match kind {
                CriterionKind::Magnitude => abs(i, j),
                CriterionKind::Wanda => abs(i, j) * l2,
                CriterionKind::MWanda => {
                    abs(i, j) * (l2 + lambda * var_norm[j]) * raw.prob(j, eps)
                }
                CriterionKind::Ria => ri * l2.powf(alpha),
                CriterionKind::MRia => {
                    ri * (l2.powf(alpha) + lambda * var_norm[j]) * raw.prob(j, eps)
                }
            };
        }
    }
    out
}

/// Keep-flags from repeatedly removing the smallest remaining score of each
/// group; ties remove the higher index.
pub fn reference_mask(scores: &[f64], rows: usize, cols: usize, ratio: f64, grouping: Grouping) -> Vec<bool> {
    let mut keep = vec![true; rows * cols];
    let groups: Vec<Vec<usize>> = match grouping {
        Grouping::PerRow => (0..rows).map(|i| (i * cols..(i + 1) * cols).collect()).collect(),
        Grouping::PerLayer => vec![(0..rows * cols).collect()],
    };
    for g in groups {
        let k = (ratio * g.len() as f64 + 1e-9).floor() as usize;
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for &idx in &g {
                if !keep[idx] {
                    continue;
                }
                best = match best {
                    None => Some(idx),
                    Some(b) if scores[idx] < scores[b] || (scores[idx] == scores[b] && idx > b) => Some(idx),
                    keep_b => keep_b,
                };
            }
            keep[best.unwrap()] = false;
        }
    }
    keep
}

/// Smallest score-sum over all `k`-subsets, each summed in index order.
pub fn min_subset_sum(scores: &[f64], k: usize) -> f64 {
    let n = scores.len();
    let mut best = f64::INFINITY;
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != k {
            continue;
        }
        let mut s = 0.0;
        for (i, v) in scores.iter().enumerate() {
            if bits >> i & 1 == 1 {
                s += v;
            }
        }
        best = best.min(s);
    }
    best
}

/// `r = R − γ · d / max|d|`, `d = c − mean(c)`; uniform for a constant `c`.
pub fn reference_plan(c: &[f64], ratio: f64, gamma: f64) -> Vec<f64> {
    let n = c.len() as f64;
    let mean = c.iter().sum::<f64>() / n;
    let mut max = 0.0f64;
    for v in c {
        max = max.max((v - mean).abs());
    }
    let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    c.iter()
        .map(|v| if lo == hi { ratio } else { ratio - (v - mean) / max * gamma })
        .collect()
}

pub fn reference_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// `|a − b| / max(|a|, |b|)`, 0 when both are 0.
pub fn rel_dev(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let mut data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    // exact zeros and a zero column now and then
    if rng.gen_bool(0.3) {
        let j = rng.gen_range(0..cols);
        for i in 0..rows {
            data[i * cols + j] = 0.0;
        }
    }
    for v in data.iter_mut() {
        if rng.gen_bool(0.05) {
            *v = 0.0;
        }
    }
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random multilingual activations: per-language offsets, per-sample drift,
/// some exact zeros and sub-ε values.
pub fn random_activations(
    rng: &mut ChaCha8Rng,
    width: usize,
    n_langs: usize,
    n_samples: usize,
    eps: f64,
) -> RawActivations {
    let mut languages = Vec::new();
    for l in 0..n_langs {
        let offset: Vec<f32> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut samples = Vec::new();
        for _ in 0..n_samples {
            let drift: Vec<f32> = (0..width).map(|_| rng.gen_range(-0.3..0.3)).collect();
            let tokens = rng.gen_range(3..10);
            let sample = (0..tokens)
                .map(|_| {
                    (0..width)
                        .map(|j| match rng.gen_range(0..20) {
                            0 => 0.0,
                            1 => (eps * rng.gen_range(0.1..0.9)) as f32,
                            _ => offset[j] + drift[j] + rng.gen_range(-1.0f32..1.0),
                        })
                        .collect()
                })
                .collect();
            samples.push(sample);
        }
        languages.push((format!("l{l}"), samples));
    }
    RawActivations { width, eps, languages }
}

/// A site where feature `special` matters to one language only.
#[derive(Debug, Clone)]
pub struct SpecializationInstance {
    pub weights: Matrix,
    pub raw: RawActivations,
    pub special: usize,
}

impl SpecializationInstance {
    pub fn stats(&self) -> CalibStats {
        self.raw.to_stats()
    }
}

/// Eight input features, three languages with four samples each:
/// - the special feature is a constant in language 0 and a tiny constant
///   (still above ε) elsewhere, pooled ℓ2 norm 0.2;
/// - four moderate features drawn identically in every language, ℓ2 in [0.30, 0.36];
/// - three strong features, ℓ2 in [1, 2].
///
/// Weights have magnitude in [0.97, 1.03]. Wanda ranks the special feature
/// last in every row; the variance term lifts it above every moderate feature.
pub fn specialization_instance(seed: u64) -> SpecializationInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 8;
    let special = rng.gen_range(0..width);
    let mut kinds: Vec<usize> = (0..width).filter(|&j| j != special).collect();
    // shuffle moderate / strong roles
    for i in (1..kinds.len()).rev() {
        let k = rng.gen_range(0..=i);
        kinds.swap(i, k);
    }
    let moderate: Vec<usize> = kinds[..4].to_vec();
    let strong: Vec<usize> = kinds[4..].to_vec();

    let n_langs = 3;
    let n_samples = 4;
    let mut data: Vec<Vec<Vec<Vec<f64>>>> = Vec::new();
    for l in 0..n_langs {
        let mut samples = Vec::new();
        for _ in 0..n_samples {
            let tokens = rng.gen_range(14..=18);
            let sample: Vec<Vec<f64>> = (0..tokens)
                .map(|_| {
                    (0..width)
                        .map(|j| {
                            if j == special {
                                if l == 0 {
                                    1.0
                                } else {
                                    0.01
                                }
                            } else {
                                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                                sign * rng.gen_range(0.5..1.5)
                            }
                        })
                        .collect()
                })
                .collect();
            samples.push(sample);
        }
        data.push(samples);
    }

    let mut target = vec![0.0; width];
    target[special] = 0.2;
    for &j in &moderate {
        target[j] = rng.gen_range(0.30..0.36);
    }
    for &j in &strong {
        target[j] = rng.gen_range(1.0..2.0);
    }
    for j in 0..width {
        let norm = data
            .iter()
            .flatten()
            .flatten()
            .map(|t| t[j] * t[j])
            .sum::<f64>()
            .sqrt();
        let scale = target[j] / norm;
        for t in data.iter_mut().flatten().flatten() {
            t[j] *= scale;
        }
    }

    let languages = data
        .into_iter()
        .enumerate()
        .map(|(l, samples)| {
            let samples = samples
                .into_iter()
                .map(|s| s.into_iter().map(|t| t.into_iter().map(|x| x as f32).collect()).collect())
                .collect();
            (format!("l{l}"), samples)
        })
        .collect();

    let rows = 8;
    let weights: Vec<f32> = (0..rows * width)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.97f32..1.03)
        })
        .collect();
    SpecializationInstance {
        weights: Matrix::from_vec(rows, width, weights).unwrap(),
        raw: RawActivations {
            width,
            eps: 5e-5,
            languages,
        },
        special,
    }
}

/// Logits from an f64 transcription of the decoder.
pub fn reference_logits(weights: &WeightStore, tokens: &[u32]) -> Vec<Vec<f64>> {
    let g = weights.graph();
    let t = |name: &str| -> Vec<f64> {
        weights.tensor(name).unwrap().data().iter().map(|&v| v as f64).collect()
    };
    let d = g.d_model;
    let embed = t("model.embed_tokens.weight");
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&tok| embed[tok as usize * d..(tok as usize + 1) * d].to_vec())
        .collect();

    let norm = |x: &[f64], gain: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + 1e-5).sqrt();
        x.iter().zip(gain).map(|(v, g)| v * r * g).collect()
    };
    let matvec = |w: &[f64], x: &[f64]| -> Vec<f64> {
        w.chunks(x.len())
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    let rope = |v: &mut [f64], pos: usize| {
        let dh = g.d_head;
        for head in v.chunks_mut(dh) {
            let rotated: Vec<f64> = (0..dh)
                .map(|i| {
                    let k = i % (dh / 2);
                    let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / dh as f64);
                    let partner = if i < dh / 2 { -head[i + dh / 2] } else { head[i - dh / 2] };
                    head[i] * angle.cos() + partner * angle.sin()
                })
                .collect();
            head.copy_from_slice(&rotated);
        }
    };

    for b in 0..g.n_layers {
        let p = |name: &str| t(&format!("model.layers.{b}.{name}.weight"));
        let (wq, wk, wv, wo) = (p("self_attn.q_proj"), p("self_attn.k_proj"), p("self_attn.v_proj"), p("self_attn.o_proj"));
        let (wg, wu, wd) = (p("mlp.gate_proj"), p("mlp.up_proj"), p("mlp.down_proj"));
        let (n1, n2) = (p("input_layernorm"), p("post_attention_layernorm"));

        let xs: Vec<Vec<f64>> = h.iter().map(|x| norm(x, &n1)).collect();
        let mut q: Vec<Vec<f64>> = xs.iter().map(|x| matvec(&wq, x)).collect();
        let mut k: Vec<Vec<f64>> = xs.iter().map(|x| matvec(&wk, x)).collect();
        let v: Vec<Vec<f64>> = xs.iter().map(|x| matvec(&wv, x)).collect();
        for pos in 0..tokens.len() {
            rope(&mut q[pos], pos);
            rope(&mut k[pos], pos);
        }
        let dh = g.d_head;
        for i in 0..tokens.len() {
            let mut attn = vec![0.0; d];
            for hd in 0..g.n_heads {
                let r = hd * dh..(hd + 1) * dh;
                let logits: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in r.clone() {
                        attn[c] += e[j] / z * v[j][c];
                    }
                }
            }
            let o = matvec(&wo, &attn);
            for c in 0..d {
                h[i][c] += o[c];
            }
        }
        for x in h.iter_mut() {
            let y = norm(x, &n2);
            let gate = matvec(&wg, &y);
            let up = matvec(&wu, &y);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = matvec(&wd, &act);
            for c in 0..d {
                x[c] += down[c];
            }
        }
    }
    let fin = t("model.norm.weight");
    let head = t("lm_head.weight");
    h.iter().map(|x| matvec(&head, &norm(x, &fin))).collect()
}

/// Mean next-token NLL from logits.
pub fn reference_nll(logits: &[Vec<f64>], tokens: &[u32]) -> (f64, usize) {
    let mut total = 0.0;
    for p in 0..tokens.len() - 1 {
        let z: f64 = logits[p].iter().map(|l| l.exp()).sum();
        total -= (logits[p][tokens[p + 1] as usize].exp() / z).ln();
    }
    (total, tokens.len() - 1)
}

/// Three synthetic "languages" over disjoint-ish byte alphabets.
pub const TOY_LANGS: [(&str, &str); 3] = [
    ("xa", "aeiou lmnr"),
    ("xb", "kstzx qwvy"),
    ("xc", "0123456789 .,;-"),
];

/// Writes one corpus file per synthetic language plus calibration and
/// evaluation manifests; returns (calibration manifest, evaluation manifest).
pub fn write_toy_corpora(dir: &Path, seed: u64, bytes: usize, calib_samples: usize) -> (PathBuf, PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut calib = String::new();
    let mut eval = String::new();
    for (code, alphabet) in TOY_LANGS {
        let alphabet = alphabet.as_bytes();
        let gen = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            // bigram-ish: repeat the previous byte often so languages have structure
            let mut out = Vec::with_capacity(bytes);
            let mut prev = alphabet[0];
            while out.len() < bytes {
                let b = if rng.gen_bool(0.3) { prev } else { alphabet[rng.gen_range(0..alphabet.len())] };
                out.push(b);
                prev = b;
            }
            out
        };
        let train = gen(&mut rng);
        let test = gen(&mut rng);
        std::fs::write(dir.join(format!("{code}.calib.txt")), train).unwrap();
        std::fs::write(dir.join(format!("{code}.eval.txt")), test).unwrap();
        calib.push_str(&format!("{code} {code}.calib.txt {calib_samples}\n"));
        eval.push_str(&format!("{code} {code}.eval.txt 0\n"));
    }
    let c = dir.join("calib.manifest");
    let e = dir.join("eval.manifest");
    std::fs::write(&c, calib).unwrap();
    std::fs::write(&e, eval).unwrap();
    (c, e)
}
