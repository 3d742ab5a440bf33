//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the closure on detached inputs, so it
//! never touches the autodiff path it is checking.

use rand::seq::index::sample;

use crate::tensor::{Result, Seed, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates probed per input; `None` probes all of them.
    pub coords_per_input: Option<usize>,
    pub seed: Seed,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, coords_per_input: None, seed: Seed(0) }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; falls back to the
/// absolute error when both norms vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

impl GradCheck {
    pub fn run(&self, inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<GradReport> {
        let leaves: Vec<Tensor> = inputs.iter().map(Tensor::param).collect();
        let loss = f(&leaves)?;
        loss.backward()?;
        let mut rng = self.seed.rng();
        let mut reports = Vec::with_capacity(inputs.len());
        for (idx, leaf) in leaves.iter().enumerate() {
            let grad = leaf.grad_or_zeros();
            let n = leaf.numel();
            let coords: Vec<usize> = match self.coords_per_input {
                Some(k) if k < n => {
                    let mut c = sample(&mut rng, n, k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..n).collect(),
            };
            let mut analytic = Vec::with_capacity(coords.len());
            let mut numeric = Vec::with_capacity(coords.len());
            for &c in &coords {
                let eval = |delta: f64| -> Result<f64> {
                    let args: Vec<Tensor> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            if j == idx {
                                let mut d = t.to_vec();
                                d[c] += delta;
                                Tensor::from_vec(t.shape(), d).expect("same shape")
                            } else {
                                t.detach()
                            }
                        })
                        .collect();
                    Ok(f(&args)?.item())
                };
                let plus = eval(self.step)?;
                let minus = eval(-self.step)?;
                numeric.push((plus - minus) / (2.0 * self.step));
                analytic.push(grad[c]);
            }
            let rel_err = relative_error(&analytic, &numeric);
            reports.push(InputReport { analytic, numeric, rel_err });
        }
        Ok(GradReport { inputs: reports })
    }
}
