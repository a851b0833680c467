//! Real-image subset baselines: random, herding, and k-center selection in
//! extractor feature space.

use gencond_tensor::Tensor;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SampleSource, SyntheticSet};
use crate::error::{Error, Result};
use crate::nn::FeatureNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoresetMethod {
    Random,
    Herding,
    KCenter,
}

impl CoresetMethod {
    pub fn name(self) -> &'static str {
        match self {
            CoresetMethod::Random => "random",
            CoresetMethod::Herding => "herding",
            CoresetMethod::KCenter => "k_center",
        }
    }
}

impl std::fmt::Display for CoresetMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CoresetMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CoresetMethod::Random),
            "herding" => Ok(CoresetMethod::Herding),
            "k_center" | "kcenter" | "k-center" => Ok(CoresetMethod::KCenter),
            other => Err(Error::Argument(format!(
                "unknown coreset method `{other}` (expected random, herding or k_center)"
            ))),
        }
    }
}

/// Relative margin below which two scores count as tied.
const TIE_EPS: f64 = 1e-12;

/// Whether `score` beats `best` by more than roundoff.
fn beats(score: f64, best: f64) -> bool {
    score < best - TIE_EPS * best.abs().max(1.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mean_row(points: &[&[f64]]) -> Vec<f64> {
    let mut m = vec![0.0; points[0].len()];
    for p in points {
        for (a, v) in m.iter_mut().zip(*p) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= points.len() as f64);
    m
}

/// Greedy herding: each step adds the point that brings the running mean of
/// the selection closest to the mean of all points. Ties go to the lowest
/// position. Returns positions into `points`.
pub fn herding_select(points: &[&[f64]], count: usize) -> Vec<usize> {
    if points.is_empty() || count == 0 {
        return Vec::new();
    }
    let mu = mean_row(points);
    let mut sum = vec![0.0; mu.len()];
    let mut taken = vec![false; points.len()];
    let mut out = Vec::with_capacity(count);
    for t in 1..=count.min(points.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d: f64 = sum
                .iter()
                .zip(*p)
                .zip(&mu)
                .map(|((s, x), m)| ((s + x) / t as f64 - m).powi(2))
                .sum();
            if best.is_none_or(|(_, bd)| beats(d, bd)) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("a point remains");
        taken[i] = true;
        sum.iter_mut().zip(points[i]).for_each(|(s, x)| *s += x);
        out.push(i);
    }
    out
}

/// Greedy farthest-point selection starting at the point nearest the mean.
/// Ties go to the lowest position.
pub fn k_center_select(points: &[&[f64]], count: usize) -> Vec<usize> {
    if points.is_empty() || count == 0 {
        return Vec::new();
    }
    let mu = mean_row(points);
    let mut first = 0;
    let mut best = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = sq_dist(p, &mu);
        if best.is_infinite() || beats(d, best) {
            best = d;
            first = i;
        }
    }
    let mut out = vec![first];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, points[first])).collect();
    let mut taken = vec![false; points.len()];
    taken[first] = true;
    while out.len() < count.min(points.len()) {
        let mut pick = None;
        let mut far = f64::NEG_INFINITY;
        for (i, &d) in nearest.iter().enumerate() {
            if !taken[i] && (far == f64::NEG_INFINITY || beats(-d, -far)) {
                far = d;
                pick = Some(i);
            }
        }
        let i = pick.expect("a point remains");
        taken[i] = true;
        out.push(i);
        for (j, p) in points.iter().enumerate() {
            nearest[j] = nearest[j].min(sq_dist(p, points[i]));
        }
    }
    out
}

/// Selects `ipc` real images per class. Herding and k-center need an
/// extractor; random ignores it.
pub fn coreset_baseline(
    dataset: &LabeledDataset,
    method: CoresetMethod,
    ipc: usize,
    extractor: Option<&FeatureNet>,
    seed: u64,
) -> Result<SyntheticSet> {
    if ipc == 0 {
        return Err(Error::Argument("ipc must be >= 1".into()));
    }
    for c in 0..dataset.num_classes {
        let pop = dataset.class_indices(c).len();
        if ipc > pop {
            return Err(Error::Argument(format!("ipc {ipc} exceeds class {c} population {pop}")));
        }
    }
    let features = match method {
        CoresetMethod::Random => None,
        _ => {
            let net = extractor
                .ok_or_else(|| Error::Argument(format!("{method} selection needs a feature extractor")))?;
            Some(net.infer(&dataset.images, 256)?.0)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(ipc * dataset.num_classes);
    for c in 0..dataset.num_classes {
        let pool = dataset.class_indices(c);
        let picks: Vec<usize> = match (&features, method) {
            (_, CoresetMethod::Random) => index::sample(&mut rng, pool.len(), ipc).into_vec(),
            (Some(f), CoresetMethod::Herding) => herding_select(&rows(f, pool), ipc),
            (Some(f), CoresetMethod::KCenter) => k_center_select(&rows(f, pool), ipc),
            (None, _) => unreachable!("features computed for feature-space methods"),
        };
        chosen.extend(picks.into_iter().map(|k| pool[k]));
    }
    let set = SyntheticSet {
        images: dataset.gather(&chosen),
        labels: dataset.gather_labels(&chosen),
        ipc,
        num_classes: dataset.num_classes,
        sources: chosen.iter().map(|&index| SampleSource::Real { index }).collect(),
    };
    set.validate()?;
    Ok(set)
}

fn rows<'t>(t: &'t Tensor, idx: &[usize]) -> Vec<&'t [f64]> {
    idx.iter().map(|&i| t.row(i)).collect()
}
