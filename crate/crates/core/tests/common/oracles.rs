//! Naive references for the losses and greedy coreset steps, and a
//! finite-difference check over a module's parameters.

use gencond::losses::PROB_EPS;
use gencond_tensor::gradcheck::{check, rel_error};
use gencond_tensor::{Graph, Module, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `(discriminator, generator)` adversarial losses, one element at a time.
pub fn naive_adv(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mut d_real = 0.0;
    for &p in real {
        d_real -= clamp(p).ln();
    }
    let (mut d_fake, mut g) = (0.0, 0.0);
    for &p in fake {
        d_fake -= (1.0 - clamp(p)).ln();
        g -= clamp(p).ln();
    }
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    (d_real / nr + d_fake / nf, g / nf)
}

/// Mean cross-entropy with explicit softmax per row.
pub fn naive_cls(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (row, t) in logits.iter().zip(targets) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (l, p) in row.iter().zip(t) {
            if *p > 0.0 {
                total -= p * (l.exp() / z).ln();
            }
        }
    }
    total / logits.len() as f64
}

/// Per-sample squared distances summed over layers, averaged over samples.
/// A target layer with one row is shared by every sample.
pub fn naive_feature_match(synth: &[Vec<Vec<f64>>], targets: &[Vec<Vec<f64>>]) -> f64 {
    let batch = synth[0].len();
    let mut total = 0.0;
    for i in 0..batch {
        for (s, t) in synth.iter().zip(targets) {
            let row = if t.len() == 1 { &t[0] } else { &t[i] };
            total += dist2(&s[i], row);
        }
    }
    total / batch as f64
}

/// Unstabilized contrastive loss for one sample.
pub fn naive_intra(f: &[f64], c: &[f64], negs: &[&[f64]], tau: f64) -> f64 {
    let pos = (dot(f, c) / tau).exp();
    let denom: f64 = negs.iter().map(|n| (dot(f, n) / tau).exp()).sum::<f64>() + pos;
    -(pos / denom).ln()
}

/// Batch mean of the single-sample loss with same-label negatives.
pub fn naive_intra_batch(f: &[Vec<f64>], c: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let b = f.len();
    let mut total = 0.0;
    for i in 0..b {
        let negs: Vec<&[f64]> = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .map(|j| f[j].as_slice())
            .collect();
        total += naive_intra(&f[i], &c[i], &negs, tau);
    }
    total / b as f64
}

/// Hinge on center distances over ordered pairs.
pub fn naive_inter(means: &[Vec<f64>], tau_m: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..means.len() {
        for j in 0..means.len() {
            if i != j {
                total += (tau_m - dist2(&means[i], &means[j]).sqrt()).max(0.0);
            }
        }
    }
    total
}

/// True when `a` is not worse than `b` by more than roundoff.
fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

fn mean_point(points: &[Vec<f64>]) -> Vec<f64> {
    (0..points[0].len())
        .map(|d| points.iter().map(|p| p[d]).sum::<f64>() / points.len() as f64)
        .collect()
}

/// Next herding pick by recomputing every candidate selection's mean.
/// Near-ties go to the lowest index.
pub fn herding_oracle_step(points: &[Vec<f64>], chosen: &[usize]) -> usize {
    let mu = mean_point(points);
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..points.len() {
        if chosen.contains(&i) {
            continue;
        }
        let sel: Vec<Vec<f64>> = chosen.iter().chain([&i]).map(|&j| points[j].clone()).collect();
        let dist = dist2(&mean_point(&sel), &mu);
        if best.0 == usize::MAX || (dist < best.1 && !near(dist, best.1)) {
            best = (i, dist);
        }
    }
    best.0
}

/// Next k-center pick: the first pick is nearest the mean, later picks
/// maximize the distance to the closest chosen point. Near-ties go to the
/// lowest index.
pub fn k_center_oracle_step(points: &[Vec<f64>], chosen: &[usize]) -> usize {
    let mu = mean_point(points);
    let mut best = (usize::MAX, f64::NAN);
    for i in 0..points.len() {
        if chosen.contains(&i) {
            continue;
        }
        let score = if chosen.is_empty() {
            -dist2(&points[i], &mu)
        } else {
            chosen.iter().map(|&j| dist2(&points[i], &points[j])).fold(f64::INFINITY, f64::min)
        };
        if best.0 == usize::MAX || (score > best.1 && !near(score, best.1)) {
            best = (i, score);
        }
    }
    best.0
}

/// Tensors whose analytic and numeric gradients are both below this norm
/// count as matching. A bias feeding straight into a normalization has an
/// exact zero gradient that central differences only resolve to roundoff.
pub const ZERO_FLOOR: f64 = 1e-6;

/// Largest relative gradient error with respect to `inputs` and every
/// parameter of `m`. `run` maps the input vars to a scalar; parameters are
/// routed through graph bindings so the finite-difference passes see
/// perturbed values.
pub fn module_grad_error<M, F>(m: &M, inputs: Vec<Tensor>, run: F) -> f64
where
    M: Module,
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let params = m.params();
    let ids: Vec<_> = params.iter().map(|p| p.id()).collect();
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(params.iter().map(|p| p.value.clone()));
    let r = check(
        |g, vars| {
            for (id, v) in ids.iter().zip(&vars[n_in..]) {
                g.bind(*id, *v);
            }
            run(g, &vars[..n_in])
        },
        &all,
        1e-5,
    );
    r.analytic
        .iter()
        .zip(&r.numeric)
        .map(|(a, n)| {
            if a.norm().max(n.norm()) < ZERO_FLOOR {
                0.0
            } else {
                rel_error(a, n)
            }
        })
        .fold(0.0, f64::max)
}

/// Weighted sum with fixed random weights, so every output element matters.
pub fn probe<'g>(g: &'g Graph, v: Var<'g>, seed: u64) -> Var<'g> {
    let w = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(seed), v.shape(), 1.0);
    v.mul(g.constant(w)).sum()
}
