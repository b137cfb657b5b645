//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use clipflow::feature_store::Label;
use clipflow::flow::FlowParams;
use clipflow::model::Model;
use clipflow::scoring::ScoredSample;
use clipflow::trainer::{self, Objective};
use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n × dim` draws from `N(shift·1, I)`.
pub fn gaussian(n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, dim), || {
        let v: f64 = StandardNormal.sample(rng);
        v + shift
    })
}

pub fn labelled(scores: &[f64], labels: &[u8]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| ScoredSample::new(s, if l == 1 { Label::Generated } else { Label::Natural }))
        .collect()
}

/// Precision/recall curve built by re-counting the top-k prefix for every k,
/// integrated as Σ (R_k − R_{k−1}) P_k.
pub fn brute_force_ap(samples: &[ScoredSample]) -> f64 {
    let n = samples.len();
    // selection ranking: highest score first, earlier index first on ties
    let mut ranked: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if used[i] {
                continue;
            }
            best = match best {
                Some(b) if samples[b].score >= samples[i].score => Some(b),
                _ => Some(i),
            };
        }
        let b = best.unwrap();
        used[b] = true;
        ranked.push(b);
    }
    let total_pos = samples.iter().filter(|s| s.label.is_positive()).count();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=n {
        let tp = ranked[..k].iter().filter(|&&i| samples[i].label.is_positive()).count();
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / k as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Exhaustive sweep: every midpoint of two adjacent distinct values, balanced
/// accuracy by direct counting, lowest threshold wins ties.
pub fn brute_force_threshold(samples: &[ScoredSample]) -> f64 {
    let mut values: Vec<f64> = samples.iter().map(|s| s.score).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.len() == 1 {
        return values[0];
    }
    let pos = samples.iter().filter(|s| s.label.is_positive()).count();
    let neg = samples.len() - pos;
    let mut best_t = f64::NAN;
    let mut best = f64::NEG_INFINITY;
    for w in values.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let tp = samples.iter().filter(|s| s.label.is_positive() && s.score > t).count();
        let tn = samples.iter().filter(|s| !s.label.is_positive() && s.score <= t).count();
        let bal = (tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0;
        if bal > best {
            best = bal;
            best_t = t;
        }
    }
    best_t
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(mut a: Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .unwrap();
        if a[[pivot, col]] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                a.swap([pivot, j], [col, j]);
            }
            det = -det;
        }
        det *= a[[col, col]];
        for i in col + 1..n {
            let f = a[[i, col]] / a[[col, col]];
            for j in col..n {
                a[[i, j]] -= f * a[[col, j]];
            }
        }
    }
    det
}

/// Central-difference Jacobian of `u = g⁻¹(z)` at `z`.
pub fn numerical_jacobian(flow: &FlowParams, z: &Array1<f64>, delta: f64) -> Array2<f64> {
    let c = z.len();
    let mut j = Array2::zeros((c, c));
    for i in 0..c {
        let mut hi = z.clone();
        let mut lo = z.clone();
        hi[i] += delta;
        lo[i] -= delta;
        let (uh, _) = flow.forward(hi.view()).unwrap();
        let (ul, _) = flow.forward(lo.view()).unwrap();
        for r in 0..c {
            j[[r, i]] = (uh[r] - ul[r]) / (2.0 * delta);
        }
    }
    j
}

/// Midpoint-rule integral of `exp(log p)` over `[-half, half]²`.
pub fn grid_mass(flow: &FlowParams, half: f64, step: f64) -> f64 {
    let n = (2.0 * half / step).round() as usize;
    let mut total = 0.0;
    for i in 0..n {
        let x = -half + (i as f64 + 0.5) * step;
        let z = Array2::from_shape_fn((n, 2), |(j, c)| {
            if c == 0 {
                x
            } else {
                -half + (j as f64 + 0.5) * step
            }
        });
        total += flow.log_likelihood_batch(z.view()).unwrap().mapv(f64::exp).sum();
    }
    total * step * step
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Compares analytic gradients with central differences of the loss for every
/// trainable scalar. Passing: `|a − fd| ≤ max(rel·max(|a|, |fd|), abs_floor)`.
pub fn finite_difference_check(
    model: &Model,
    natural: ArrayView2<f64>,
    proxy: ArrayView2<f64>,
    objective: Objective,
    freeze_adapter: bool,
    delta: f64,
    rel: f64,
    abs_floor: f64,
) -> GradCheck {
    let (_, grads) = trainer::gradients(natural, proxy, model, objective, freeze_adapter).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let include_adapter = grads.adapter.is_some();
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    for (ti, tensor) in analytic.iter().enumerate() {
        for (j, &a) in tensor.iter().enumerate() {
            let eval = |shift: f64| {
                let mut m = model.clone();
                trainer::trainable_tensors(&mut m, include_adapter)[ti][j] += shift;
                trainer::loss(natural, proxy, &m, objective).unwrap()
            };
            let fd = (eval(delta) - eval(-delta)) / (2.0 * delta);
            let err = (a - fd).abs();
            let scale = a.abs().max(fd.abs());
            if scale > abs_floor {
                out.worst_rel = out.worst_rel.max(err / scale);
            }
            if err > (rel * scale).max(abs_floor) {
                out.failures.push(format!("tensor {ti}[{j}]: analytic {a:e} vs fd {fd:e}"));
            }
            out.checked += 1;
        }
    }
    out
}

/// Fraction of flow samples (`g(u)`, `u ~ N(0, I)`) landing inside `[-half, half]²`.
pub fn sampled_window_fraction(flow: &FlowParams, half: f64, n: usize, seed: u64) -> f64 {
    let u = gaussian(n, 2, 0.0, &mut rng(seed));
    let z = flow.inverse_batch(u.view()).unwrap();
    let inside = z.rows().into_iter().filter(|r| r.iter().all(|v| v.abs() <= half)).count();
    inside as f64 / n as f64
}
