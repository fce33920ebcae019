//! Contrastive pair construction by forward diffusion.
//!
//! The perturbed image is a sample of the forward noising chain
//! `I_t = sqrt(1 - beta_t) I_{t-1} + sqrt(beta_t) eps_t`. Two samplers are
//! provided: the literal step-by-step chain and the one-draw closed-form
//! marginal `I_T = sqrt(abar_T) I_0 + sqrt(1 - abar_T) eps`. They agree in
//! distribution, not draw-for-draw.
//!
//! Pixel intensities are expected in `[-1, 1]`; use
//! [`ImageTensor::from_unit_interval`] for data stored in `[0, 1]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VceError};
use crate::rng::GaussianStream;
use crate::tensor_store::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if channels * height * width != values.len() {
            return Err(VceError::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VceError::NonFinite("image".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    /// Rescales `[0, 1]` intensities to `[-1, 1]`.
    pub fn from_unit_interval(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            values.into_iter().map(|v| 2.0 * v - 1.0).collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn to_tensor(&self, name: impl Into<String>) -> Tensor {
        Tensor::new(
            name,
            vec![self.channels, self.height, self.width],
            self.values.clone(),
        )
        .expect("image shape is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[c, h, w] => Self::new(c, h, w, t.data().to_vec()),
            s => Err(VceError::Shape(format!(
                "tensor `{}` is not a C x H x W image (shape {s:?})",
                t.name()
            ))),
        }
    }
}

/// Per-step variances and their cumulative survival products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `steps` betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(VceError::Schedule("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(VceError::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|t| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1]`; zero steps are accepted as no-ops.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(VceError::Schedule("step count must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(VceError::Schedule(format!("beta {b} outside [0, 1]")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn final_alpha_bar(&self) -> f64 {
        *self.alpha_bars.last().expect("schedule is non-empty")
    }

    /// The first `steps` steps of this schedule.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        if steps == 0 || steps > self.steps() {
            return Err(VceError::Schedule(format!(
                "cannot truncate {}-step schedule to {steps}",
                self.steps()
            )));
        }
        Self::from_betas(self.betas[..steps].to_vec())
    }
}

impl Default for NoiseSchedule {
    /// 500 steps, beta linear from 1e-4 to 0.02.
    fn default() -> Self {
        Self::linear(500, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Runs the Markov chain one step at a time.
pub fn diffuse_stepwise(image: &ImageTensor, schedule: &NoiseSchedule, seed: u64) -> ImageTensor {
    let mut noise = GaussianStream::new(seed);
    let mut x: Vec<f64> = image.values.iter().map(|&v| v as f64).collect();
    for &beta in schedule.betas() {
        let keep = (1.0 - beta).sqrt();
        let scale = beta.sqrt();
        for v in x.iter_mut() {
            *v = keep * *v + scale * noise.next_normal();
        }
    }
    ImageTensor {
        values: x.into_iter().map(|v| v as f32).collect(),
        ..image.clone()
    }
}

/// One draw from the marginal of the chain's final step.
pub fn diffuse_closed_form(
    image: &ImageTensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> ImageTensor {
    let mut noise = GaussianStream::new(seed);
    let abar = schedule.final_alpha_bar();
    let keep = abar.sqrt();
    let scale = (1.0 - abar).sqrt();
    let values = image
        .values
        .iter()
        .map(|&v| (keep * v as f64 + scale * noise.next_normal()) as f32)
        .collect();
    ImageTensor {
        values,
        ..image.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionSampler {
    #[default]
    ClosedForm,
    Stepwise,
}

impl DiffusionSampler {
    pub fn sample(self, image: &ImageTensor, schedule: &NoiseSchedule, seed: u64) -> ImageTensor {
        match self {
            DiffusionSampler::ClosedForm => diffuse_closed_form(image, schedule, seed),
            DiffusionSampler::Stepwise => diffuse_stepwise(image, schedule, seed),
        }
    }
}

/// One positive / negative entry: the same prompt under the original and the
/// perturbed image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub prompt: Vec<u32>,
    pub original: ImageTensor,
    pub perturbed: ImageTensor,
    pub seed: u64,
}

/// Pair `i` is perturbed with seed `base_seed + i` (wrapping).
pub fn build_pairs(
    prompts: &[Vec<u32>],
    images: &[ImageTensor],
    schedule: &NoiseSchedule,
    base_seed: u64,
) -> Result<Vec<ContrastivePair>> {
    build_pairs_with(
        prompts,
        images,
        schedule,
        base_seed,
        DiffusionSampler::ClosedForm,
    )
}

pub fn build_pairs_with(
    prompts: &[Vec<u32>],
    images: &[ImageTensor],
    schedule: &NoiseSchedule,
    base_seed: u64,
    sampler: DiffusionSampler,
) -> Result<Vec<ContrastivePair>> {
    if prompts.len() != images.len() {
        return Err(VceError::LengthMismatch(format!(
            "{} prompts for {} images",
            prompts.len(),
            images.len()
        )));
    }
    if prompts.is_empty() {
        return Err(VceError::Empty("no contrastive pairs requested".into()));
    }
    Ok(prompts
        .par_iter()
        .zip(images.par_iter())
        .enumerate()
        .map(|(i, (prompt, image))| {
            let seed = base_seed.wrapping_add(i as u64);
            ContrastivePair {
                prompt: prompt.clone(),
                original: image.clone(),
                perturbed: sampler.sample(image, schedule, seed),
                seed,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(values: Vec<f32>) -> ImageTensor {
        let n = values.len();
        ImageTensor::new(1, 1, n, values).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_schedule_is_hand_product() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.betas()[1] - 0.2).abs() < 1e-15);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_matches_cumulative_product() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 500);
        // independent oracle: sum of logs
        let log_sum: f64 = (0..500)
            .map(|t| (1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 499.0)).ln())
            .sum();
        assert!((s.final_alpha_bar() - log_sum.exp()).abs() < 1e-12);
        assert!((s.final_alpha_bar() - 0.006_352_710_797).abs() < 1e-11);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(5, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::from_betas(vec![1.5]).is_err());
    }

    #[test]
    fn zero_betas_leave_image_unchanged() {
        let img = image(vec![0.25, -0.5, 1.0]);
        let s = NoiseSchedule::from_betas(vec![0.0; 4]).unwrap();
        assert_eq!(diffuse_stepwise(&img, &s, 3), img);
        assert_eq!(diffuse_closed_form(&img, &s, 3), img);
    }

    #[test]
    fn unit_beta_destroys_signal() {
        let img = image(vec![1.0; 4000]);
        let s = NoiseSchedule::from_betas(vec![1.0]).unwrap();
        let out = diffuse_stepwise(&img, &s, 11);
        let mean = out.values().iter().map(|&v| v as f64).sum::<f64>() / 4000.0;
        assert!(mean.abs() < 4.0 / (4000f64).sqrt());
    }

    #[test]
    fn sampling_is_deterministic() {
        let img = image(vec![0.1, 0.2, 0.3]);
        let s = NoiseSchedule::default();
        assert_eq!(diffuse_stepwise(&img, &s, 5), diffuse_stepwise(&img, &s, 5));
        assert_eq!(
            diffuse_closed_form(&img, &s, 5),
            diffuse_closed_form(&img, &s, 5)
        );
    }

    #[test]
    fn closed_form_std_on_zero_image() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        let img = image(vec![0.0]);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| diffuse_closed_form(&img, &s, i).values()[0] as f64)
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let expected = 0.28f64.sqrt(); // 0.5292
        assert!((sd - expected).abs() < 4.0 * expected / (2.0 * (n - 1) as f64).sqrt());
    }

    #[test]
    fn pair_seeds_follow_base() {
        let imgs = vec![image(vec![0.0; 4]); 3];
        let prompts = vec![vec![1, 2]; 3];
        let pairs = build_pairs(&prompts, &imgs, &NoiseSchedule::default(), 7).unwrap();
        let seeds: Vec<_> = pairs.iter().map(|p| p.seed).collect();
        assert_eq!(seeds, [7, 8, 9]);
        assert!(pairs.iter().all(|p| p.prompt == [1, 2]));
        assert_ne!(pairs[0].perturbed, pairs[1].perturbed);
        assert!(pairs.iter().all(|p| p.original.same_shape(&p.perturbed)));

        let one = build_pairs(&prompts[..1], &imgs[..1], &NoiseSchedule::default(), 7).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].seed, 7);
    }

    #[test]
    fn pair_length_mismatch() {
        let imgs = vec![image(vec![0.0; 4]); 2];
        let prompts = vec![vec![1]; 3];
        assert!(matches!(
            build_pairs(&prompts, &imgs, &NoiseSchedule::default(), 0),
            Err(VceError::LengthMismatch(_))
        ));
    }

    #[test]
    fn image_tensor_round_trip_and_range_mapping() {
        let img = ImageTensor::from_unit_interval(1, 2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(img.values(), &[-1.0, 0.0, 1.0, -0.5]);
        let t = img.to_tensor("x");
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(ImageTensor::from_tensor(&t).unwrap(), img);
        assert!(ImageTensor::new(1, 1, 1, vec![f32::NAN]).is_err());
    }
}
