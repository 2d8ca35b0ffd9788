//! Noise schedules and the closed-form forward process.
//!
//! Timesteps are 1-based: `t = 1..=T` index `betas[t - 1]`, and `alpha_bar(0) = 1`
//! denotes the clean image.

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[0] = 1`, `alpha_bars[t] = prod_{s <= t} alphas[s - 1]`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return param("schedule needs at least one timestep");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return param(format!("beta {b} outside (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if acc <= 0.0 {
            return param("alpha_bar underflowed to zero");
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Sub-chain visiting the given increasing timesteps of `self`.
    ///
    /// Step `i` of the result jumps from `visited[i - 1]` to `visited[i]`, so its
    /// `alpha_bar(i)` equals `self.alpha_bar(visited[i])` and
    /// `beta_i = 1 - alpha_bar(visited[i]) / alpha_bar(visited[i - 1])`.
    pub fn subsequence(&self, visited: &[usize]) -> Result<Self> {
        let mut prev = 0usize;
        let mut betas = Vec::with_capacity(visited.len());
        for &t in visited {
            if t <= prev || t > self.len() {
                return param(format!("visited timesteps must increase within 1..={}", self.len()));
            }
            betas.push(1.0 - self.alpha_bars[t] / self.alpha_bars[prev]);
            prev = t;
        }
        let mut sub = Self::from_betas(betas)?;
        // Keep the cumulative products bit-identical to the parent's.
        for (i, &t) in visited.iter().enumerate() {
            sub.alpha_bars[i + 1] = self.alpha_bars[t];
        }
        Ok(sub)
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return param(format!("timestep {t} outside 1..={}", self.len()));
        }
        Ok(())
    }

    pub(crate) fn check_index(&self, t: usize) -> Result<()> {
        if t > self.len() {
            return param(format!("timestep {t} outside 0..={}", self.len()));
        }
        Ok(())
    }
}

/// Linearly interpolated betas from `beta_start` to `beta_end`, inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return param("schedule needs T >= 1");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return param(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        ));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| {
                if i + 1 == steps {
                    beta_end
                } else {
                    beta_start + span * i as f64 / (steps - 1) as f64
                }
            })
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_sample(
    x0: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    schedule.check_step(t)?;
    x0.check_shape(eps, "forward noise")?;
    Ok(noise_to(x0, schedule.alpha_bar(t), eps))
}

/// Forward marginal at an explicit `alpha_bar`; shared with the inpainting blend.
pub(crate) fn noise_to(x0: &ImageTensor, alpha_bar: f64, eps: &ImageTensor) -> ImageTensor {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x0.zip_with(eps, |x, e| a * x + s * e)
}

/// `floor(S * t0)`: the reverse-process step at which a reference image is spliced in.
pub fn splice_index(steps: usize, t0: f64) -> Result<usize> {
    if steps == 0 {
        return param("splice needs S >= 1");
    }
    if !(0.0..=1.0).contains(&t0) {
        return param(format!("t0 = {t0} outside [0, 1]"));
    }
    Ok(((steps as f64) * t0).floor() as usize)
}

/// Evenly strided timesteps `stride, 2*stride, ..., S*stride` with `stride = floor(T / S)`.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return param(format!("cannot visit {steps} of {total} timesteps"));
    }
    let stride = total / steps;
    Ok((1..=steps).map(|i| i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_image, RngStream};

    /// Kahan-compensated log-space product, independent of the running product.
    fn log_space_alpha_bar(betas: &[f64]) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for b in betas {
            let y = (-b).ln_1p() - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        sum.exp()
    }

    #[test]
    fn linear_schedule_endpoints_and_interpolation() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.len(), 1000);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        for t in 1..=1000 {
            let oracle = 1e-4 + (0.02 - 1e-4) * ((t - 1) as f64) / 999.0;
            assert!((s.beta(t) - oracle).abs() <= 1e-15, "t={t}");
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.beta(1), 0.5);
        assert_eq!(s.alpha(1), 0.5);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_matches_log_space_oracle() {
        for &(t, b0, b1) in &[(1000, 1e-4, 0.02), (10, 0.01, 0.3), (37, 0.2, 0.2)] {
            let s = make_linear_schedule(t, b0, b1).unwrap();
            let oracle = log_space_alpha_bar(s.betas());
            let rel = (s.alpha_bar(t) - oracle).abs() / oracle;
            assert!(rel <= 1e-12, "T={t}: rel err {rel}");
        }
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_sample_boundaries() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let mut r = RngStream::root(0).rng();
        let x0 = gaussian_image(&mut r, 4, 4, 3);
        let e = gaussian_image(&mut r, 4, 4, 3);
        let zero = ImageTensor::zeros(4, 4, 3);
        let only_x = forward_sample(&x0, 5, &zero, &s).unwrap();
        let a = s.alpha_bar(5).sqrt();
        for (o, x) in only_x.data.iter().zip(&x0.data) {
            assert_eq!(*o, a * x);
        }
        let only_e = forward_sample(&zero, 5, &e, &s).unwrap();
        let b = (1.0 - s.alpha_bar(5)).sqrt();
        for (o, x) in only_e.data.iter().zip(&e.data) {
            assert_eq!(*o, b * x);
        }
    }

    #[test]
    fn forward_sample_errors() {
        let s = make_linear_schedule(10, 0.01, 0.2).unwrap();
        let x = ImageTensor::zeros(2, 2, 1);
        assert!(forward_sample(&x, 0, &x, &s).is_err());
        assert!(forward_sample(&x, 11, &x, &s).is_err());
        assert!(forward_sample(&x, 1, &ImageTensor::zeros(2, 2, 3), &s).is_err());
    }

    #[test]
    fn splice_index_examples() {
        assert_eq!(splice_index(1000, 0.5).unwrap(), 500);
        assert_eq!(splice_index(1000, 0.0).unwrap(), 0);
        assert_eq!(splice_index(7, 0.9).unwrap(), 6);
        assert!(splice_index(10, 1.5).is_err());
        assert!(splice_index(10, -0.1).is_err());
        for s in 1..200 {
            assert_eq!(splice_index(s, 1.0).unwrap(), s);
            assert_eq!(splice_index(s, 0.0).unwrap(), 0);
        }
    }

    #[test]
    fn subsequence_preserves_alpha_bars() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let visited = strided_timesteps(1000, 50).unwrap();
        assert_eq!(visited[0], 20);
        assert_eq!(*visited.last().unwrap(), 1000);
        let sub = s.subsequence(&visited).unwrap();
        assert_eq!(sub.len(), 50);
        for (i, &t) in visited.iter().enumerate() {
            assert_eq!(sub.alpha_bar(i + 1), s.alpha_bar(t));
            let implied = sub.alpha_bar(i) * sub.alpha(i + 1);
            assert!((implied - s.alpha_bar(t)).abs() < 1e-14);
        }
        let full = s.subsequence(&(1..=1000).collect::<Vec<_>>()).unwrap();
        assert_eq!(full.alpha_bars(), s.alpha_bars());
    }
}
