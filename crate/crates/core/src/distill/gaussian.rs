//! Closed-form Gaussian score models and a small trainable score network,
//! used to check distribution matching against exact answers.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autograd::{ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngCursor;
use crate::tensor::Mat;

use super::{dmd_gradient, dmd_terms, dmd_weight, ScoreModel, ScoreRole};

/// Isotropic Gaussian `N(mean, var·I)`; rows of `x` are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub mean: Vec<f64>,
    pub var: f64,
    pub role: ScoreRole,
}

impl GaussianScore {
    pub fn new(mean: Vec<f64>, var: f64, role: ScoreRole) -> Self {
        Self { mean, var, role }
    }
}

impl ScoreModel for GaussianScore {
    fn role(&self) -> ScoreRole {
        self.role
    }

    fn score(&self, x: &Mat, sigma: f64) -> Result<Mat> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape(format!("{} columns for a {}-d Gaussian", x.cols(), self.mean.len())));
        }
        let denom = self.var + sigma * sigma;
        Ok(Mat::from_fn(x.rows(), x.cols(), |r, c| -(x.get(r, c) - self.mean[c]) / denom))
    }
}

/// Denoiser `D(x, σ) = x ⊙ (φ(σ)·A) + φ(σ)·B` with
/// `φ(σ) = [1/(1+σ²), σ²/(1+σ²)]`. It represents the exact denoiser of any
/// unit-variance Gaussian, so a well-trained net reproduces its score.
#[derive(Debug, Clone)]
pub struct AffineScoreNet {
    pub params: ParamStore,
    a: ParamId,
    b: ParamId,
    adam: Adam,
    pub role: ScoreRole,
}

fn basis(sigma: f64) -> Mat {
    let s2 = sigma * sigma;
    Mat::from_vec(1, 2, vec![1.0 / (1.0 + s2), s2 / (1.0 + s2)])
}

impl AffineScoreNet {
    /// Net matching `N(mean, I)` exactly.
    pub fn matching(mean: &[f64], role: ScoreRole) -> Self {
        let d = mean.len();
        let mut params = ParamStore::new();
        let a = params.add("a", Mat::from_fn(2, d, |r, _| if r == 0 { 1.0 } else { 0.0 }));
        let b = params.add("b", Mat::from_fn(2, d, |r, c| if r == 1 { mean[c] } else { 0.0 }));
        let adam = Adam::new(&params, AdamConfig { clip_norm: None, ..AdamConfig::default() });
        Self { params, a, b, adam, role }
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.a).cols()
    }

    pub fn denoise(&self, x: &Mat, sigma: f64) -> Mat {
        let phi = basis(sigma);
        let scale = phi.matmul(self.params.get(self.a));
        let shift = phi.matmul(self.params.get(self.b));
        Mat::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * scale.get(0, c) + shift.get(0, c))
    }

    /// One denoising-score-matching step on `samples` at the noise levels
    /// `sigmas`, each with noise from `cursor`. The loss is the score-form
    /// objective `‖D(x + σε) − x‖² / σ²`, averaged over levels; returns its
    /// pre-step value.
    pub fn fake_score_update(&mut self, samples: &Mat, sigmas: &[f64], cursor: RngCursor, lr: f64) -> Result<f64> {
        if samples.rows() == 0 || sigmas.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if samples.cols() != self.dim() {
            return Err(Error::Shape(format!("{} columns for a {}-d score net", samples.cols(), self.dim())));
        }
        let mut tape = Tape::new();
        let a = tape.param(&self.params, self.a);
        let b = tape.param(&self.params, self.b);
        let target = Rc::new(samples.clone());
        let mut total = None;
        for (i, &sigma) in sigmas.iter().enumerate() {
            let eps = cursor.normals(&format!("dsm{i}"), samples.len());
            let noisy = tape.constant(Mat::from_vec(samples.rows(), samples.cols(), samples.data().iter().zip(&eps).map(|(x, e)| x + sigma * e).collect()));
            let phi = tape.constant(basis(sigma));
            let scale = tape.matmul(phi, a);
            let shift = tape.matmul(phi, b);
            let scale = tape.broadcast_rows(scale, samples.rows());
            let shift = tape.broadcast_rows(shift, samples.rows());
            let d = tape.mul(noisy, scale);
            let d = tape.add(d, shift);
            let l = tape.mse(d, target.clone());
            let l = tape.scale(l, 1.0 / (sigma * sigma));
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l),
            });
        }
        let total = total.expect("non-empty");
        let loss = tape.value(total).get(0, 0) / sigmas.len() as f64;
        let grads = tape.backward(total);
        self.adam.step(&mut self.params, &grads, lr);
        Ok(loss)
    }
}

impl ScoreModel for AffineScoreNet {
    fn role(&self) -> ScoreRole {
        self.role
    }

    fn score(&self, x: &Mat, sigma: f64) -> Result<Mat> {
        if x.cols() != self.dim() {
            return Err(Error::Shape(format!("{} columns for a {}-d score net", x.cols(), self.dim())));
        }
        let d = self.denoise(x, sigma);
        Ok(d.zip_map(x, |dd, xx| (dd - xx) / (sigma * sigma)))
    }
}

/// Distillation of a Gaussian "student" `x̂ = θ + z` towards `N(real_mean, I)`
/// with a trained fake score.
#[derive(Debug, Clone)]
pub struct GaussianRegression {
    pub real_mean: Vec<f64>,
    pub student_init: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub batch: usize,
    pub steps: usize,
    pub lr_student: f64,
    pub lr_fake: f64,
    pub fake_steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegressionReport {
    pub final_mean: Vec<f64>,
    /// Max-coordinate distance to the real mean after each step.
    pub distance: Vec<f64>,
    /// Number of steps after which the distance stayed below `0.05` for the
    /// rest of the run, if it did.
    pub converged_at: Option<usize>,
}

pub fn gaussian_dmd_regression(cfg: &GaussianRegression) -> Result<RegressionReport> {
    let d = cfg.real_mean.len();
    if cfg.student_init.len() != d {
        return Err(Error::Shape("student and teacher dimensions differ".into()));
    }
    let real = GaussianScore::new(cfg.real_mean.clone(), 1.0, ScoreRole::Real);
    let mut fake = AffineScoreNet::matching(&cfg.student_init, ScoreRole::Fake);
    let mut theta = ParamStore::new();
    let tid = theta.add("theta", Mat::from_vec(1, d, cfg.student_init.clone()));
    let mut adam = Adam::new(&theta, AdamConfig { clip_norm: None, ..AdamConfig::default() });
    let mut distance = Vec::with_capacity(cfg.steps);
    let mut converged_at = None;
    for step in 0..cfg.steps {
        let cursor = RngCursor::new(cfg.seed, 0, step as u64);
        let mut rng = cursor.stream("pick");
        let sigma = cfg.sigmas[rng.random_range(0..cfg.sigmas.len())];
        let th = theta.get(tid).clone();
        let z = Mat::from_vec(cfg.batch, d, cursor.normals("student", cfg.batch * d));
        let x_hat = Mat::from_fn(cfg.batch, d, |r, c| th.get(0, c) + z.get(r, c));
        let eps = Mat::from_vec(cfg.batch, d, cursor.normals("dmd", cfg.batch * d));
        // Samples are low-dimensional, so the weight is taken over the batch.
        let terms = dmd_terms(&x_hat, sigma, &eps, &real, &fake)?;
        let w = dmd_weight(&x_hat, sigma, &terms);
        let g = terms.grad.map(|v| v * w);
        // ∂x̂/∂θ is the identity, so the parameter gradient is the batch mean.
        let mut gt = Mat::zeros(1, d);
        for r in 0..cfg.batch {
            for c in 0..d {
                gt.data_mut()[c] += g.get(r, c) / cfg.batch as f64;
            }
        }
        let mut grads = crate::autograd::Gradients::zeros_like(&theta);
        grads.set_param(tid, gt);
        adam.step(&mut theta, &grads, cfg.lr_student);
        for f in 0..cfg.fake_steps {
            let z = Mat::from_vec(cfg.batch, d, cursor.normals(&format!("fake{f}"), cfg.batch * d));
            let th = theta.get(tid);
            let samples = Mat::from_fn(cfg.batch, d, |r, c| th.get(0, c) + z.get(r, c));
            let fc = RngCursor::new(cfg.seed, 1 + f as u64, step as u64);
            fake.fake_score_update(&samples, &cfg.sigmas, fc, cfg.lr_fake)?;
        }
        let th = theta.get(tid);
        let dist = (0..d).map(|c| (th.get(0, c) - cfg.real_mean[c]).abs()).fold(0.0, f64::max);
        if dist >= 0.05 {
            converged_at = None;
        } else if converged_at.is_none() {
            converged_at = Some(step + 1);
        }
        distance.push(dist);
    }
    Ok(RegressionReport { final_mean: theta.get(tid).row(0).to_vec(), distance, converged_at })
}

/// Batch-averaged DMD gradient for the 1-D student `x̂ = θ + z` against a
/// standard-normal teacher (with the exact fake score `N(θ, 1)`), and the
/// central difference of a Monte-Carlo estimate of
/// `KL(p_θ,σ ‖ p_real,σ)` with common random numbers.
pub fn mc_kl_gradient(theta: f64, sigma: f64, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let cursor = RngCursor::new(seed, 0, 0);
    let mut rng = cursor.stream("kl");
    let z: Vec<f64> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
    let e: Vec<f64> = (0..samples).map(|_| rng.sample(StandardNormal)).collect();
    let real = GaussianScore::new(vec![0.0], 1.0, ScoreRole::Real);
    let fake = GaussianScore::new(vec![theta], 1.0, ScoreRole::Fake);
    let x_hat = Mat::from_vec(samples, 1, z.iter().map(|v| theta + v).collect());
    let noise = Mat::from_vec(samples, 1, e.clone());
    let dmd = dmd_gradient(&x_hat, sigma, &noise, &real, &fake)?.sum() / samples as f64;

    let s2 = 1.0 + sigma * sigma;
    let kl = |th: f64| {
        z.iter()
            .zip(&e)
            .map(|(zz, ee)| {
                let x = th + zz + sigma * ee;
                // log N(x; θ, s²) − log N(x; 0, s²)
                (x * x - (x - th) * (x - th)) / (2.0 * s2)
            })
            .sum::<f64>()
            / samples as f64
    };
    let h = 1e-3;
    Ok((dmd, (kl(theta + h) - kl(theta - h)) / (2.0 * h)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_net_matches_its_gaussian() {
        let net = AffineScoreNet::matching(&[1.5, -0.5], ScoreRole::Fake);
        let g = GaussianScore::new(vec![1.5, -0.5], 1.0, ScoreRole::Fake);
        let x = Mat::from_fn(7, 2, |r, c| r as f64 * 0.7 - c as f64);
        for sigma in [0.05, 0.7, 3.0] {
            let a = net.score(&x, sigma).unwrap();
            let b = g.score(&x, sigma).unwrap();
            assert!(a.zip_map(&b, |p, q| p - q).max_abs() < 1e-9);
        }
    }

    /// Exact `E[σ²‖s_net(x) − s*(x)‖²]` under `x ~ N(0, 1+σ²)`, averaged
    /// over `sigmas`; the net's denoiser is affine in `x`.
    fn score_error(net: &AffineScoreNet, sigmas: &[f64]) -> f64 {
        sigmas
            .iter()
            .map(|&s| {
                let s2 = s * s;
                let beta = net.denoise(&Mat::zeros(1, 1), s).get(0, 0);
                let alpha = net.denoise(&Mat::filled(1, 1, 1.0), s).get(0, 0) - beta;
                let da = alpha - 1.0 / (1.0 + s2);
                (da * da * (1.0 + s2) + beta * beta) / s2
            })
            .sum::<f64>()
            / sigmas.len() as f64
    }

    fn train_on_standard_normal(lr: f64, steps: usize) -> (Vec<f64>, Vec<f64>) {
        let sigmas = [0.2, 0.5, 1.0, 2.0];
        let mut net = AffineScoreNet::matching(&[2.0], ScoreRole::Fake);
        let mut errs = vec![score_error(&net, &sigmas)];
        let mut losses = Vec::new();
        for step in 0..steps {
            let c = RngCursor::new(5, 0, step as u64);
            let samples = Mat::from_vec(256, 1, c.normals("x", 256));
            losses.push(net.fake_score_update(&samples, &sigmas, c, lr).unwrap());
            errs.push(score_error(&net, &sigmas));
        }
        (errs, losses)
    }

    #[test]
    fn fake_net_converges_to_standard_normal_score() {
        for (lr, steps) in [(8.0e-7, 500), (1e-3, 2000)] {
            let (errs, losses) = train_on_standard_normal(lr, steps);
            assert!(losses.iter().all(|l| *l >= 0.0));
            let smooth: Vec<f64> = errs.windows(25).map(|w| w.iter().sum::<f64>() / 25.0).collect();
            assert!(smooth.windows(2).all(|w| w[1] <= w[0]), "lr {lr}");
            assert!(errs.last().unwrap() < &errs[0]);
            if lr >= 1e-3 {
                assert!(*errs.last().unwrap() < 0.1 * errs[0], "{} -> {}", errs[0], errs.last().unwrap());
            }
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut net = AffineScoreNet::matching(&[0.0], ScoreRole::Fake);
        let r = net.fake_score_update(&Mat::zeros(0, 1), &[1.0], RngCursor::new(0, 0, 0), 1e-3);
        assert!(matches!(r, Err(Error::EmptyBatch)));
    }
}
