//! Independent reference implementations and random instances shared by the
//! integration tests. The oracles use plain nested loops over `Vec`s and
//! never call into the library's matrix code.

#![allow(dead_code)]
// the oracles index on purpose to stay close to the written formulas
#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ntua::{RowOrigin, WeightedCache};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, dim));
    for mut r in m.rows_mut() {
        r.mapv_inplace(|_| rng.sample(StandardNormal));
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|x| x / n);
    }
    m
}

pub fn unit_rows_f32(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Array2<f32> {
    let mut m = unit_rows(rng, rows, dim).mapv(|x| x as f32);
    // renormalize in f32 so stored rows pass the norm check
    for mut r in m.rows_mut() {
        let n = r.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
        r.mapv_inplace(|x| x / n);
    }
    m
}

/// A random cache of `n` classes with `k` rows each (labels random).
pub struct Instance {
    pub cache: WeightedCache<f64>,
    pub queries: Array2<f64>,
    pub classifier: Array2<f64>,
    pub labels: Vec<usize>,
    pub omega: Array1<f64>,
}

pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize, m: usize, unit_weights: bool) -> Instance {
    let rows = n * k;
    let keys = unit_rows(rng, rows, d);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n)).collect();
    let weights = if unit_weights {
        Array1::from_elem(rows, 1.0)
    } else {
        Array1::from_iter((0..rows).map(|_| rng.random_range(0.05..=1.0)))
    };
    let origins = (0..rows).map(|_| RowOrigin::Fallback).collect();
    let alpha = rng.random_range(0.5..2.0);
    let beta = rng.random_range(1.0..8.0);
    let cache = WeightedCache::new(keys, labels, weights, origins, alpha, beta, n).unwrap();
    Instance {
        cache,
        queries: unit_rows(rng, m, d),
        classifier: unit_rows(rng, n, d),
        labels: (0..m).map(|_| rng.random_range(0..n)).collect(),
        omega: Array1::from_iter((0..m).map(|_| rng.random_range(0.0..=1.0))),
    }
}

fn to_vecs(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[i][c] = alpha * Σ_j [label_j == c] · w_j · exp(-beta (1 - q_i·k_j))`.
pub fn oracle_cache_logits(queries: &Array2<f64>, cache: &WeightedCache<f64>, use_weights: bool) -> Vec<Vec<f64>> {
    let q = to_vecs(queries);
    let k = to_vecs(cache.keys());
    let n = cache.num_classes();
    let mut out = vec![vec![0.0; n]; q.len()];
    for i in 0..q.len() {
        for c in 0..n {
            let mut s = 0.0;
            for j in 0..k.len() {
                if cache.labels()[j] != c {
                    continue;
                }
                let w = if use_weights { cache.weights()[j] } else { 1.0 };
                s += w * (-cache.beta() * (1.0 - dot(&q[i], &k[j]))).exp();
            }
            out[i][c] = cache.alpha() * s;
        }
    }
    out
}

pub fn oracle_zero_shot(queries: &Array2<f64>, classifier: &Array2<f64>) -> Vec<Vec<f64>> {
    let q = to_vecs(queries);
    let w = to_vecs(classifier);
    q.iter().map(|qi| w.iter().map(|wc| dot(qi, wc)).collect()).collect()
}

pub fn oracle_adapter_logits(
    queries: &Array2<f64>,
    cache: &WeightedCache<f64>,
    classifier: &Array2<f64>,
    use_weights: bool,
) -> Vec<Vec<f64>> {
    let mut a = oracle_cache_logits(queries, cache, use_weights);
    let z = oracle_zero_shot(queries, classifier);
    for i in 0..a.len() {
        for c in 0..a[i].len() {
            a[i][c] += z[i][c];
        }
    }
    a
}

/// Mean of `omega_i * -ln(softmax(z_i)[y_i])`, computed as the literal
/// ratio of exponentials after subtracting the row maximum.
pub fn oracle_ce(logits: &[Vec<f64>], labels: &[usize], omega: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..logits.len() {
        let mx = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits[i].iter().map(|z| (z - mx).exp()).sum();
        let p = (logits[i][labels[i]] - mx).exp() / denom;
        total += omega[i] * -p.ln();
    }
    total / logits.len() as f64
}

/// Mean teacher feature per class over the given (feature, label) pairs.
pub fn oracle_prototypes(features: &[Vec<f64>], labels: &[usize], n: usize) -> Vec<Vec<f64>> {
    let d = features.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; d]; n];
    for c in 0..n {
        let mut count = 0;
        for (f, &l) in features.iter().zip(labels) {
            if l == c {
                count += 1;
                for t in 0..d {
                    out[c][t] += f[t];
                }
            }
        }
        if count > 0 {
            for t in 0..d {
                out[c][t] /= count as f64;
            }
        }
    }
    out
}

/// Loss as a function of the keys alone, for finite differences.
pub fn oracle_loss_at(inst: &Instance, keys: &Array2<f64>, use_weights: bool) -> f64 {
    let c = WeightedCache::from_parts(
        keys.clone(),
        inst.cache.labels().to_vec(),
        inst.cache.weights().clone(),
        inst.cache.origins().to_vec(),
        inst.cache.alpha(),
        inst.cache.beta(),
        inst.cache.num_classes(),
    )
    .unwrap();
    let logits = oracle_adapter_logits(&inst.queries, &c, &inst.classifier, use_weights);
    oracle_ce(&logits, &inst.labels, &inst.omega.to_vec())
}

/// Central differences of [`oracle_loss_at`] with step `h` in every key entry.
pub fn finite_difference_grad(inst: &Instance, use_weights: bool, h: f64) -> Array2<f64> {
    let keys = inst.cache.keys().clone();
    let mut g = Array2::zeros(keys.dim());
    for j in 0..keys.nrows() {
        for t in 0..keys.ncols() {
            let mut plus = keys.clone();
            plus[[j, t]] += h;
            let mut minus = keys.clone();
            minus[[j, t]] -= h;
            g[[j, t]] =
                (oracle_loss_at(inst, &plus, use_weights) - oracle_loss_at(inst, &minus, use_weights)) / (2.0 * h);
        }
    }
    g
}

/// One full-batch step of the unweighted cache fine-tuning: gradient of the
/// mean cross-entropy with one-hot values written out per key, followed by a
/// first Adam step with decoupled decay at learning rate `lr`.
pub fn reference_unweighted_step(
    keys: &Array2<f64>,
    values: &[usize],
    n: usize,
    alpha: f64,
    beta: f64,
    queries: &Array2<f64>,
    targets: &[usize],
    classifier: &Array2<f64>,
    lr: f64,
    wd: f64,
) -> Array2<f64> {
    let k = to_vecs(keys);
    let q = to_vecs(queries);
    let w = to_vecs(classifier);
    let m = q.len();
    let d = k[0].len();
    // probabilities
    let mut p = vec![vec![0.0; n]; m];
    for i in 0..m {
        let mut z = vec![0.0; n];
        for c in 0..n {
            z[c] = dot(&q[i], &w[c]);
        }
        for j in 0..k.len() {
            z[values[j]] += alpha * (-beta * (1.0 - dot(&q[i], &k[j]))).exp();
        }
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        for c in 0..n {
            p[i][c] = (z[c] - mx).exp() / s;
        }
    }
    // dL/dk_j = (1/m) Σ_i (p_i[v_j] - [t_i == v_j]) · alpha · beta · phi_ij · q_i
    let mut grad = vec![vec![0.0; d]; k.len()];
    for j in 0..k.len() {
        for i in 0..m {
            let y = if targets[i] == values[j] { 1.0 } else { 0.0 };
            let coeff = (p[i][values[j]] - y) * alpha * beta * (-beta * (1.0 - dot(&q[i], &k[j]))).exp() / m as f64;
            for t in 0..d {
                grad[j][t] += coeff * q[i][t];
            }
        }
    }
    // first Adam step: m_hat = g, v_hat = g^2
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut out = keys.clone();
    for j in 0..k.len() {
        for t in 0..d {
            let g = grad[j][t];
            let m_hat = ((1.0 - b1) * g) / (1.0 - b1);
            let v_hat = ((1.0 - b2) * g * g) / (1.0 - b2);
            let decayed = k[j][t] * (1.0 - lr * wd);
            out[[j, t]] = decayed - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    out
}

/// `|a - b| / max(|a|, |b|)`, zero when both are exactly equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
