//! Central finite-difference checks for graph-built scalar functions.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the probed
    /// slice of each parameter (vector 2-norms).
    pub rel_errors: Vec<f64>,
    /// Norm of the probed analytic slice, per parameter.
    pub analytic_norms: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the analytic gradient of `loss` w.r.t. every tensor in `params`
/// against central differences with step `h`, probing up to `probes`
/// randomly chosen entries per tensor.
pub fn check(
    params: &[Tensor<f64>],
    loss: impl Fn(&Graph<f64>, &[Var]) -> Var,
    h: f64,
    probes: usize,
    seed: u64,
) -> GradReport {
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = loss(&g, &vars);
    g.backward(out).expect("scalar loss");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = loss(&g, &vars);
        let v = g.value(out).item();
        v
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut rel_errors = Vec::new();
    let mut analytic_norms = Vec::new();
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let picks = sample(&mut rng, n, probes.min(n)).into_vec();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for idx in picks {
            let orig = work[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let up = eval(&work);
            work[pi].data_mut()[idx] = orig - h;
            let down = eval(&work);
            work[pi].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[idx];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
        analytic_norms.push(a2.sqrt());
    }
    GradReport {
        rel_errors,
        analytic_norms,
    }
}
