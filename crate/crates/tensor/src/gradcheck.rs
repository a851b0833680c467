//! Central finite-difference checks for graph gradients.

use crate::graph::{Graph, Var};
use crate::Tensor;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

impl GradCheck {
    /// Largest `||a - n|| / max(||a||, ||n||)` over inputs; inputs whose
    /// gradients are both below `1e-10` in norm count as exact.
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| rel_error(a, n))
            .fold(0.0, f64::max)
    }
}

pub fn rel_error(a: &Tensor, n: &Tensor) -> f64 {
    let diff = a.zip_map(n, |x, y| x - y).norm();
    let scale = a.norm().max(n.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Evaluates `f` at `inputs`, differentiates it, and probes each coordinate
/// with central differences of step `h`.
pub fn check<F>(f: F, inputs: &[Tensor], h: f64) -> GradCheck
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&g, &vars);
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    };
    let eval = |xs: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vars).item()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].shape().to_vec());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            grad.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(grad);
    }
    GradCheck { analytic, numeric }
}
