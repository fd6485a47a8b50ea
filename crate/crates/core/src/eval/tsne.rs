use serde::{Deserialize, Serialize};

use super::retrieval::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const PERPLEXITY_TOLERANCE: f64 = 1e-4;
pub const MAX_SEARCH_STEPS: usize = 50;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 100;
const MOMENTUM_SWITCH: usize = 250;
const MIN_GAIN: f64 = 0.01;
const P_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsnePoint {
    pub lang: String,
    pub sentence_id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneLayout {
    pub points: Vec<TsnePoint>,
    pub perplexity: f64,
    /// KL(P‖Q) right after early exaggeration ends.
    pub kl_after_exaggeration: f64,
    pub kl: f64,
}

/// Result of the per-point bandwidth search, with `beta = 1 / (2σ²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bandwidth {
    pub beta: f64,
    /// Perplexity actually reached, `exp(H)` with H in nats.
    pub perplexity: f64,
}

pub fn squared_distances(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Conditional row `p_{j|i}` for bandwidth `beta`, and its entropy in nats.
fn conditional_row(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // shift by the nearest distance so exp never underflows the whole row
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &x)| x)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, (o, &dj)) in out.iter_mut().zip(d).enumerate() {
        *o = if j == i { 0.0 } else { (-(dj - dmin) * beta).exp() };
        z += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= z;
        if *o > 0.0 {
            h -= *o * o.ln();
        }
    }
    h
}

/// Bisection on `beta` per point until `|exp(H) - perplexity| < 1e-4`.
pub fn fit_bandwidths(d2: &[f64], n: usize, perplexity: f64) -> Result<(Vec<Bandwidth>, Vec<f64>)> {
    check_perplexity(n, perplexity)?;
    let mut p = vec![0.0; n * n];
    let mut bands = Vec::with_capacity(n);
    for i in 0..n {
        let d = &d2[i * n..(i + 1) * n];
        let row = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = conditional_row(d, i, beta, row);
        for _ in 0..MAX_SEARCH_STEPS {
            let diff = h.exp() - perplexity;
            if diff.abs() < PERPLEXITY_TOLERANCE {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = conditional_row(d, i, beta, row);
        }
        bands.push(Bandwidth {
            beta,
            perplexity: h.exp(),
        });
    }
    Ok((bands, p))
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if !(perplexity > 0.0) || (n as f64) < 3.0 * perplexity {
        return Err(Error::PerplexityTooLarge { perplexity, n });
    }
    Ok(())
}

/// Symmetrized joint affinities `(p_{j|i} + p_{i|j}) / 2N`.
pub fn joint_affinities(rows: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = rows.len();
    let d2 = squared_distances(rows);
    let (_, cond) = fit_bandwidths(&d2, n, perplexity)?;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(P_FLOOR);
            }
        }
    }
    Ok(p)
}

/// Student-t kernel values `1 / (1 + |y_i - y_j|²)` and their off-diagonal sum.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, z) = kernel(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / z).max(P_FLOOR);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl.max(0.0)
}

/// Exact t-SNE to two dimensions. Returns coordinates, the KL after early
/// exaggeration and the final KL.
pub fn tsne(rows: &[Vec<f64>], cfg: &TsneConfig) -> Result<(Vec<[f64; 2]>, f64, f64)> {
    let n = rows.len();
    check_perplexity(n, cfg.perplexity)?;
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Format("t-SNE input contains non-finite values".into()));
    }
    let p = joint_affinities(rows, cfg.perplexity)?;
    let mut rng = SplitMix64::derive(cfg.seed, &[0x75E]);
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.normal() * 1e-4, rng.normal() * 1e-4])
        .collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_mid = f64::NAN;
    for it in 0..cfg.iterations {
        if it == EXAGGERATION_ITERS {
            kl_mid = kl_divergence(&p, &y);
        }
        let exag = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < MOMENTUM_SWITCH { 0.5 } else { 0.8 };
        let (num, z) = kernel(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exag * p[i * n + j] - w / z) * w;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let gk = 4.0 * g[k];
                gains[i][k] = if (gk > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(MIN_GAIN)
                };
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * gk;
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let mean = y.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
        for yi in &mut y {
            yi[0] -= mean[0] / n as f64;
            yi[1] -= mean[1] / n as f64;
        }
    }
    let kl = kl_divergence(&p, &y);
    if kl_mid.is_nan() {
        kl_mid = kl;
    }
    Ok((y, kl_mid, kl))
}

/// Stacks the matrices in order and projects them jointly.
pub fn tsne_project(mats: &[EmbeddingMatrix], cfg: &TsneConfig) -> Result<TsneLayout> {
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for m in mats {
        for i in 0..m.rows() {
            keys.push((m.lang.clone(), m.ids[i]));
            rows.push(m.row(i).iter().map(|&x| x as f64).collect::<Vec<_>>());
        }
    }
    let (y, kl_mid, kl) = tsne(&rows, cfg)?;
    Ok(TsneLayout {
        points: keys
            .into_iter()
            .zip(y)
            .map(|((lang, sentence_id), [x, y])| TsnePoint {
                lang,
                sentence_id,
                x,
                y,
            })
            .collect(),
        perplexity: cfg.perplexity,
        kl_after_exaggeration: kl_mid,
        kl,
    })
}

/// Mean silhouette coefficient of a labelled point set.
pub fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let mut sum = vec![0.0; k];
        let mut cnt = vec![0usize; k];
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sum[labels[j]] += dist(p, q);
                cnt[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if cnt[own] == 0 {
            continue;
        }
        let a = sum[own] / cnt[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && cnt[c] > 0)
            .map(|c| sum[c] / cnt[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / points.len() as f64
}
