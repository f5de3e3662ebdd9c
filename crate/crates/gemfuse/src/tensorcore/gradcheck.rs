//! Central finite-difference gradient checking.
//!
//! The probe only ever runs forward passes, so it is independent of the
//! backward implementation it verifies. Relative error uses a small floor in
//! the denominator to keep near-zero gradients from exploding the ratio.

use super::{Graph, Result, Tensor};

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Default acceptance threshold on the max relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare the analytic gradient of `build` (a scalar-valued function of the
/// given leaf tensors) against central finite differences with step `h`.
///
/// `build` receives graph-attached copies of `inputs` in order and must
/// return a scalar loss built on that graph.
pub fn check_gradient<F>(build: &F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Tensor]) -> Result<Tensor>,
{
    let forward = |variants: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let attached: Vec<Tensor> = variants
            .iter()
            .map(|t| g.input(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(build(&g, &attached)?.item())
    };

    // Analytic gradients from one taped pass.
    let g = Graph::new();
    let attached: Vec<Tensor> = inputs
        .iter()
        .map(|t| g.input(t))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&g, &attached)?;
    let grads = g.backward(&loss)?;
    let analytic: Vec<Tensor> = attached
        .iter()
        .map(|t| grads.wrt(t))
        .collect::<Result<Vec<_>>>()?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i] = input.with_value_at(j, x + h);
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i] = input.with_value_at(j, x - h);
            let fd = (forward(&plus)? - forward(&minus)?) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, elements_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let x = Tensor::new(vec![3], vec![0.7, -1.3, 2.1]).unwrap();
        let report = check_gradient(
            &|g: &Graph, inp: &[Tensor]| {
                let sq = g.hadamard(&inp[0], &inp[0])?;
                g.sum(&sq)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
        assert_eq!(report.elements_checked, 3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // exp has gradient exp(x); a graph computing exp but checked against a
        // deliberately mismatched composite must fail. Use stop_gradient to
        // build a forward-only mismatch: loss = sum(stop(exp(x)) + x) has
        // analytic gradient 1, while finite differences see exp(x) + 1.
        let x = Tensor::new(vec![2], vec![0.5, 1.5]).unwrap();
        let report = check_gradient(
            &|g: &Graph, inp: &[Tensor]| {
                let e = g.exp(&inp[0])?;
                let frozen = g.stop_gradient(&e)?;
                let s = g.add(&frozen, &inp[0])?;
                g.sum(&s)
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE));
    }
}
