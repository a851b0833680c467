//! Training objectives: adversarial, classification, feature matching,
//! intra-class diversity, and inter-class discrimination.

use gencond_tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;
/// Tolerance on soft-target row sums.
pub const SIMPLEX_TOL: f64 = 1e-5;
const NORMALIZE_EPS: f64 = 1e-12;

/// Per-term scalar weights of the condensation objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adv: f64,
    pub cls: f64,
    pub feat: f64,
    pub intra: f64,
    pub inter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            cls: 1.0,
            feat: 1.0,
            intra: 1.0,
            inter: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature of the intra-class contrastive term.
    pub tau: f64,
    /// Margin of the inter-class hinge.
    pub tau_m: f64,
    pub weights: LossWeights,
    pub soft_labels: bool,
    /// Use l2-normalized features in the intra-class similarities.
    pub normalize_intra: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_m: 1.0,
            weights: LossWeights::default(),
            soft_labels: false,
            normalize_intra: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(self.tau > 0.0) || !(self.tau_m >= 0.0) {
            return Err(Error::Config(format!(
                "need tau > 0 and tau_m >= 0, got tau={} tau_m={}",
                self.tau, self.tau_m
            )));
        }
        if [w.adv, w.cls, w.feat, w.intra, w.inter].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

fn clamp_prob(p: Var<'_>) -> Var<'_> {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Discriminator loss `-mean(log real) - mean(log(1 - fake))`.
pub fn d_adv_loss<'g>(real_probs: Var<'g>, fake_probs: Var<'g>) -> Var<'g> {
    let real = clamp_prob(real_probs).log().mean();
    let fake = clamp_prob(fake_probs).neg().add_scalar(1.0).log().mean();
    real.add(fake).neg()
}

/// Non-saturating generator loss `-mean(log fake)`.
pub fn g_adv_loss(fake_probs: Var<'_>) -> Var<'_> {
    clamp_prob(fake_probs).log().mean().neg()
}

/// `(d_loss, g_loss)` for one pair of probability batches.
pub fn adv_losses<'g>(real_probs: Var<'g>, fake_probs: Var<'g>) -> (Var<'g>, Var<'g>) {
    (d_adv_loss(real_probs, fake_probs), g_adv_loss(fake_probs))
}

/// Classification targets.
#[derive(Clone, Debug)]
pub enum Targets {
    Hard(Vec<usize>),
    /// `[B, num_classes]` rows on the probability simplex.
    Soft(Tensor),
}

impl Targets {
    fn distribution(&self, rows: usize, classes: usize) -> Result<Tensor> {
        match self {
            Targets::Hard(labels) => {
                if labels.len() != rows {
                    return Err(Error::Shape(format!("{} labels for {rows} logit rows", labels.len())));
                }
                let mut t = Tensor::zeros([rows, classes]);
                for (i, &y) in labels.iter().enumerate() {
                    if y >= classes {
                        return Err(Error::Argument(format!("label {y} outside [0, {classes})")));
                    }
                    t.data_mut()[i * classes + y] = 1.0;
                }
                Ok(t)
            }
            Targets::Soft(t) => {
                if t.shape() != [rows, classes] {
                    return Err(Error::Shape(format!(
                        "soft targets {:?} for logits [{rows}, {classes}]",
                        t.shape()
                    )));
                }
                for i in 0..rows {
                    let row = t.row(i);
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&p| p < 0.0) {
                        return Err(Error::Argument(format!("soft target row {i} sums to {s}")));
                    }
                }
                Ok(t.clone())
            }
        }
    }
}

/// Mean cross-entropy between `softmax(logits)` and the targets.
pub fn cls_loss<'g>(logits: Var<'g>, targets: &Targets) -> Result<Var<'g>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("logits must be 2-D, got {s:?}")));
    }
    let t = targets.distribution(s[0], s[1])?;
    let t = logits.graph().constant(t);
    Ok(logits.log_softmax_rows().mul(t).sum().mul_scalar(-1.0 / s[0] as f64))
}

/// Squared distance between each synthetic sample's per-layer features and
/// its matching target, summed over layers and averaged over samples.
///
/// Each target may carry batch size 1 (shared by every sample) or the
/// synthetic batch size.
pub fn feature_match_loss<'g>(synth: &[Var<'g>], targets: &[Var<'g>]) -> Result<Var<'g>> {
    if synth.len() != targets.len() || synth.is_empty() {
        return Err(Error::Shape(format!(
            "{} synthetic layers vs {} target layers",
            synth.len(),
            targets.len()
        )));
    }
    let batch = synth[0].shape()[0];
    let mut total: Option<Var<'g>> = None;
    for (l, (s, t)) in synth.iter().zip(targets).enumerate() {
        let (ss, ts) = (s.shape(), t.shape());
        if ss[0] != batch || ss[1..] != ts[1..] || (ts[0] != 1 && ts[0] != batch) {
            return Err(Error::Shape(format!("layer {l}: synthetic {ss:?} vs target {ts:?}")));
        }
        let d = s.sub(*t).square().sum();
        total = Some(match total {
            Some(acc) => acc.add(d),
            None => d,
        });
    }
    Ok(total.expect("non-empty").mul_scalar(1.0 / batch as f64))
}

fn l2_normalize(x: Var<'_>) -> Var<'_> {
    let norm = x.square().sum_axes(&[1]).add_scalar(NORMALIZE_EPS).sqrt();
    x.div(norm)
}

/// Contrastive intra-class loss over a batch, averaged over samples.
///
/// For sample `i` with feature `f_i`, anchor `c_i`, and negatives the other
/// batch samples sharing its label:
/// `-log(e(<f_i, c_i>) / (e(<f_i, c_i>) + sum_j e(<f_i, f_j>)))`,
/// `e(s) = exp(s / tau)`, computed with a max shift.
pub fn intra_loss<'g>(feats: Var<'g>, anchors: Var<'g>, labels: &[usize], tau: f64, normalize: bool) -> Result<Var<'g>> {
    let (fs, as_) = (feats.shape(), anchors.shape());
    if fs.len() != 2 || fs != as_ || labels.len() != fs[0] {
        return Err(Error::Shape(format!(
            "intra loss: features {fs:?}, anchors {as_:?}, {} labels",
            labels.len()
        )));
    }
    let b = fs[0];
    let (f, c) = if normalize {
        (l2_normalize(feats), l2_normalize(anchors))
    } else {
        (feats, anchors)
    };
    let inv_tau = 1.0 / tau;
    let pos = f.mul(c).sum_axes(&[1]).mul_scalar(inv_tau);
    let sims = f.matmul(f.t()).mul_scalar(inv_tau);
    let logits = feats.graph().concat(&[pos, sims], 1);
    let mut mask = Tensor::zeros([b, b + 1]);
    for i in 0..b {
        mask.data_mut()[i * (b + 1)] = 1.0;
        for j in 0..b {
            if j != i && labels[j] == labels[i] {
                mask.data_mut()[i * (b + 1) + 1 + j] = 1.0;
            }
        }
    }
    Ok(logits.masked_logsumexp_rows(&mask).sub(pos).mean())
}

/// Single-sample form: one feature, its anchor, and its same-class negatives.
pub fn intra_loss_single<'g>(
    g: &'g Graph,
    feat: Var<'g>,
    anchor: Var<'g>,
    negatives: Var<'g>,
    tau: f64,
) -> Result<Var<'g>> {
    let width = feat.shape()[0];
    let ns = negatives.shape();
    if feat.shape() != anchor.shape() || ns.len() != 2 || (ns[0] > 0 && ns[1] != width) {
        return Err(Error::Shape(format!(
            "intra loss: feature {:?}, anchor {:?}, negatives {ns:?}",
            feat.shape(),
            anchor.shape()
        )));
    }
    if ns[0] == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let f = feat.reshape([1, width]);
    let inv_tau = 1.0 / tau;
    let pos = f.mul(anchor.reshape([1, width])).sum_axes(&[1]).mul_scalar(inv_tau);
    let negs = f.matmul(negatives.t()).mul_scalar(inv_tau);
    let logits = g.concat(&[pos, negs], 1);
    Ok(logits.logsumexp_rows().sub(pos).sum())
}

/// Per-class means of the rows of `feats` for every class present in
/// `labels`, ordered by class id. Returns the means and those class ids.
pub fn class_means<'g>(feats: Var<'g>, labels: &[usize]) -> (Var<'g>, Vec<usize>) {
    let b = labels.len();
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut avg = Tensor::zeros([present.len(), b]);
    for (r, &class) in present.iter().enumerate() {
        let members: Vec<usize> = (0..b).filter(|&i| labels[i] == class).collect();
        for &i in &members {
            avg.data_mut()[r * b + i] = 1.0 / members.len() as f64;
        }
    }
    (feats.graph().constant(avg).matmul(feats), present)
}

/// Hinge on Euclidean distances between class centers, summed over ordered
/// pairs. Fewer than two centers gives 0 and a warning.
pub fn inter_loss(means: Var<'_>, tau_m: f64) -> Var<'_> {
    let s = means.shape();
    let g = means.graph();
    let (n, f) = (s[0], s[1]);
    if n < 2 {
        log::warn!("inter-class loss needs at least 2 classes, got {n}");
        return g.constant(Tensor::scalar(0.0));
    }
    let dist = means
        .reshape([n, 1, f])
        .sub(means.reshape([1, n, f]))
        .square()
        .sum_axes(&[2])
        .reshape([n, n])
        .sqrt();
    let off_diag = Tensor::ones([n, n]).zip_map(&Tensor::eye(n), |a, e| a - e);
    dist.neg()
        .add_scalar(tau_m)
        .relu()
        .mul(g.constant(off_diag))
        .sum()
}

/// One value per objective term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms<T> {
    pub adv: T,
    pub cls: T,
    pub feat: T,
    pub intra: T,
    pub inter: T,
}

impl<T> Terms<T> {
    pub fn map<U>(self, f: impl Fn(T) -> U) -> Terms<U> {
        Terms {
            adv: f(self.adv),
            cls: f(self.cls),
            feat: f(self.feat),
            intra: f(self.intra),
            inter: f(self.inter),
        }
    }

    fn named(&self) -> [(&'static str, &T); 5] {
        [
            ("L_adv_g", &self.adv),
            ("L_c", &self.cls),
            ("L_f", &self.feat),
            ("L_intra", &self.intra),
            ("L_inter", &self.inter),
        ]
    }
}

/// Fails with the name of the first non-finite term.
pub fn check_finite(values: &Terms<f64>) -> Result<()> {
    for (name, &v) in values.named() {
        if !v.is_finite() {
            return Err(Error::Divergence {
                term: name.into(),
                value: v,
            });
        }
    }
    Ok(())
}

/// Weighted sum of the terms.
pub fn condensation_total(parts: &Terms<f64>, w: &LossWeights) -> Result<f64> {
    check_finite(parts)?;
    Ok(w.adv * parts.adv + w.cls * parts.cls + w.feat * parts.feat + w.intra * parts.intra + w.inter * parts.inter)
}

/// Differentiable weighted sum; terms with zero weight are left out of the
/// graph.
pub fn condensation_loss<'g>(g: &'g Graph, parts: &Terms<Var<'g>>, w: &LossWeights) -> Result<Var<'g>> {
    check_finite(&(*parts).map(|v| v.item()))?;
    let weighted = [
        (w.adv, parts.adv),
        (w.cls, parts.cls),
        (w.feat, parts.feat),
        (w.intra, parts.intra),
        (w.inter, parts.inter),
    ];
    let mut total = g.constant(Tensor::scalar(0.0));
    for (weight, term) in weighted {
        if weight != 0.0 {
            total = total.add(term.mul_scalar(weight));
        }
    }
    Ok(total)
}
