//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The checker never touches the tape's backward pass: it re-runs the
//! forward closure at perturbed inputs, so it stays an independent route.
//! Run it in `f64`; the target tolerance (1e-5 at h = 1e-5) is out of reach
//! in single precision.

use super::{EngineError, Graph, Tensor, Var};

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst disagreement.
    pub worst: (usize, usize),
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// `build` must construct a scalar loss from leaves created in the graph it
/// is given, in the order of `inputs`. Relative error uses a floor of 1e-3
/// in the denominator so that near-zero gradients are compared absolutely.
pub fn check_gradients<B>(
    build: B,
    inputs: &[Tensor<f64>],
    h: f64,
) -> Result<GradCheckReport, EngineError>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, EngineError>,
{
    // analytic gradients
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64, EngineError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_err = 0f64;
    let mut worst = (0usize, 0usize);
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let f_plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let f_minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = analytic[i].data()[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn catches_a_wrong_gradient() {
        // loss = sum(x^2): correct grad is 2x, but the builder sneaks in a
        // stop_grad so reverse mode reports zero while FD sees the slope.
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let report = check_gradients(
            |g, vars| {
                let sg = g.stop_grad(vars[0]);
                let sq = g.square(sg);
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.5, "{}", report.max_rel_err);
    }

    #[test]
    fn passes_on_a_small_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let w = Tensor::randn(&mut rng, &[4, 2], 1.0);
        let report = check_gradients(
            |g, vars| {
                let y = g.matmul(vars[0], vars[1])?;
                let a = g.gelu(y);
                Ok(g.mean(a))
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{}", report.max_rel_err);
    }
}
