use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear beta ramp with its running products `alpha_bar[t] = prod_{s<=t}(1 - beta_s)`.
/// Index 0 of both arrays corresponds to step `t = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        let ok = steps >= 1 && beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0;
        if !ok {
            return Err(Error::InvalidRange(format!(
                "need T >= 1 and 0 < beta_start <= beta_end < 1, got T={steps}, [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Evenly spaced steps `1 <= t_1 < ... < t_n = T` used by a shortened reverse chain.
    pub fn respaced(&self, count: usize) -> Result<Vec<usize>> {
        let steps = self.steps();
        if count == 0 || count > steps {
            return Err(Error::InvalidRange(format!("{count} sampling steps for a {steps}-step schedule")));
        }
        Ok((1..=count).map(|i| (i * steps).div_ceil(count)).collect())
    }
}

/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let ab = sched.alpha_bar(t)?;
    Ok(z0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))?)
}

/// Noise that `q_sample` must have used to turn `z0` into `z_t`.
pub fn eps_from_z0(z_t: &Tensor, z0: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    Ok(z_t.sub(&z0.scale(ab.sqrt()))?.scale(1.0 / (1.0 - ab).sqrt()))
}

/// One draw of the Eq.-1 style objective for a single item.
#[derive(Debug, Clone)]
pub struct NoisedItem {
    pub t: usize,
    pub eps: Tensor,
    pub z_t: Tensor,
}

/// Draws `t ~ U{1..T}` then `eps ~ N(0, I)` from `rng`, in that order.
pub fn draw_noise(z0: &Tensor, sched: &NoiseSchedule, rng: &mut impl Rng) -> Result<NoisedItem> {
    let t = rng.random_range(1..=sched.steps());
    let eps = Tensor::randn(z0.shape(), rng);
    let z_t = q_sample(z0, t, &eps, sched)?;
    Ok(NoisedItem { t, eps, z_t })
}

/// Noise-prediction loss averaged over the batch. Each item's error is the
/// mean squared difference over its elements. `predict(item_index, noised)`
/// returns the predicted noise for that item.
pub fn training_loss(
    batch: &[Tensor],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    mut predict: impl FnMut(usize, &NoisedItem) -> Result<Tensor>,
) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    let mut total: Option<Tensor> = None;
    for (i, z0) in batch.iter().enumerate() {
        let noised = draw_noise(z0, sched, rng)?;
        let pred = predict(i, &noised)?;
        if pred.shape() != z0.shape() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs latent {:?}", pred.shape(), z0.shape())));
        }
        let err = noised.eps.sub(&pred)?.square().mean();
        total = Some(match total {
            Some(acc) => acc.add(&err)?,
            None => err,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / batch.len() as f64))
}

/// Ancestral DDPM reverse chain over `steps` evenly spaced timesteps,
/// starting from `z_T ~ N(0, I)`. `predict(z_t, t)` returns predicted noise.
/// With `clip = Some(c)` each step goes through the implied `z_0`, clamped
/// to `[-c, c]`, before forming the posterior mean.
pub fn sample_with(
    sched: &NoiseSchedule,
    shape: &[usize],
    steps: usize,
    clip: Option<f64>,
    rng: &mut impl Rng,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let ts = sched.respaced(steps)?;
    let mut z = Tensor::randn(shape, rng);
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let ab = sched.alpha_bar(t)?;
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bar(ts[i - 1])? };
        let beta = 1.0 - ab / ab_prev;
        let eps = predict(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs latent {:?}", eps.shape(), z.shape())));
        }
        let mean = match clip {
            None => z.sub(&eps.scale(beta / (1.0 - ab).sqrt()))?.scale(1.0 / (1.0 - beta).sqrt()),
            Some(c) => {
                let z0: Vec<f64> = z
                    .data()
                    .iter()
                    .zip(eps.data())
                    .map(|(z, e)| ((z - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-c, c))
                    .collect();
                let k0 = ab_prev.sqrt() * beta / (1.0 - ab);
                let kt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                Tensor::from_vec(shape, z0)?.scale(k0).add(&z.scale(kt))?
            }
        };
        z = if i == 0 {
            mean
        } else {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab);
            mean.add(&Tensor::randn(shape, rng).scale(var.sqrt()))?
        };
        z = z.detach();
    }
    Ok(z)
}
