//! Training objectives: diffusion teachers, causal initialisation of the
//! chunked student, distribution matching distillation and its two-task
//! alternating form.
//!
//! Scores follow the variance-exploding convention `x_σ = x₀ + σ·ε`, so a
//! denoiser `D` implies the score `(D(x, σ) − x) / σ²`.

mod data;
mod gaussian;
mod jdmd;
mod metrics;
mod rollout;
mod teacher;

pub use data::{build_corpus, Clip, Corpus, Domain, BLUR_RADIUS};
pub use gaussian::{
    gaussian_dmd_regression, mc_kl_gradient, AffineScoreNet, GaussianRegression, GaussianScore, RegressionReport,
};
pub use jdmd::{dmd_step, jdmd_step, Distiller, JdmdConfig, NeuralScore, TaskMix};
pub use metrics::{MetricRecord, MetricSink};
pub use rollout::{
    causal_init, chunk_graph, full_graph_gradients, init_loss, rollout_first_pass, rollout_replay, ChunkConditions, ChunkHead,
    ChunkInputs, InitReport, RolloutOutcome,
};
pub use teacher::{sample_teacher, teacher_loss, train_teacher, TeacherReport, TeacherRole};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Which distribution a score model stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRole {
    /// Frozen perceptual teacher.
    Real,
    /// Frozen motion teacher.
    Synthetic,
    /// Trainable model tracking the student's output distribution.
    Fake,
}

/// `∇ₓ log p_σ(x)` for each row of `x`.
pub trait ScoreModel {
    fn role(&self) -> ScoreRole;
    fn score(&self, x: &Mat, sigma: f64) -> Result<Mat>;
}

/// The two alternating distillation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Reference clip and warp conditions, matched against the motion teacher.
    V2V,
    /// Scene tag only, matched against the perceptual teacher.
    T2V,
}

/// Per-step distillation losses. `total = vis + lambda_ctrl · ctrl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    pub vis: f64,
    pub ctrl: f64,
    pub lambda_ctrl: f64,
    pub total: f64,
}

impl DistillLoss {
    pub fn new(vis: f64, ctrl: f64, lambda_ctrl: f64) -> Self {
        Self { vis, ctrl, lambda_ctrl, total: vis + lambda_ctrl * ctrl }
    }

    /// Loss record for one step of `task`; the inactive term is zero.
    pub fn for_task(task: Task, value: f64, lambda_ctrl: f64) -> Self {
        match task {
            Task::T2V => Self::new(value, 0.0, lambda_ctrl),
            Task::V2V => Self::new(0.0, value, lambda_ctrl),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    Init,
    Jdmd,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Stage::Teacher),
            "init" => Ok(Stage::Init),
            "jdmd" => Ok(Stage::Jdmd),
            other => Err(Error::Invalid(format!("unknown stage {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub stage: Stage,
    /// Teacher pretraining and causal initialisation.
    pub lr_teacher: f64,
    pub lr_student: f64,
    pub lr_fake: f64,
    /// Iterations per task before switching in the alternating schedule.
    pub alternation_period: usize,
    pub lambda_ctrl: f64,
    pub iterations: usize,
    /// Chunks per teacher step.
    pub batch: usize,
    /// Autoregressive rollout length during init and distillation.
    pub chunks: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stage: Stage::Teacher,
            lr_teacher: 2e-5,
            lr_student: 4.0e-6,
            lr_fake: 8.0e-7,
            alternation_period: 1,
            lambda_ctrl: 1.0,
            iterations: 1000,
            batch: 4,
            chunks: 2,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_teacher, self.lr_student, self.lr_fake];
        if !lrs.iter().all(|lr| lr.is_finite() && *lr > 0.0) {
            return Err(Error::Invalid(format!("learning rates must be positive: {lrs:?}")));
        }
        if self.alternation_period == 0 || self.batch == 0 || self.chunks == 0 {
            return Err(Error::Invalid("alternation period, batch and chunk count must be at least 1".into()));
        }
        if !(self.lambda_ctrl.is_finite() && self.lambda_ctrl >= 0.0) {
            return Err(Error::Invalid(format!("lambda_ctrl {}", self.lambda_ctrl)));
        }
        Ok(())
    }

    /// Stages run teacher → init → jdmd; `next` may repeat or advance.
    pub fn can_follow(previous: Stage, next: Stage) -> bool {
        next >= previous
    }
}

/// Score terms of one DMD evaluation.
#[derive(Debug, Clone)]
pub struct DmdTerms {
    /// `x̂ + σ·ε`
    pub noised: Mat,
    pub real_score: Mat,
    pub fake_score: Mat,
    /// `−(s_real − s_fake)`, the gradient of the divergence w.r.t. `x̂`.
    pub grad: Mat,
}

pub fn dmd_terms(x_hat: &Mat, sigma: f64, noise: &Mat, real: &dyn ScoreModel, fake: &dyn ScoreModel) -> Result<DmdTerms> {
    if x_hat.shape() != noise.shape() {
        return Err(Error::Shape(format!("sample {:?} vs noise {:?}", x_hat.shape(), noise.shape())));
    }
    if !x_hat.all_finite() {
        return Err(Error::NonFinite("student sample"));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("noise level {sigma}")));
    }
    let noised = x_hat.zip_map(noise, |x, e| x + sigma * e);
    let real_score = real.score(&noised, sigma)?;
    let fake_score = fake.score(&noised, sigma)?;
    if !real_score.all_finite() {
        return Err(Error::NonFinite("real score"));
    }
    if !fake_score.all_finite() {
        return Err(Error::NonFinite("fake score"));
    }
    let grad = real_score.zip_map(&fake_score, |r, f| -(r - f));
    Ok(DmdTerms { noised, real_score, fake_score, grad })
}

/// Gradient of the distribution-matching divergence w.r.t. the student
/// sample `x_hat`, evaluated at `x_hat + σ·noise`. Callers chain it through
/// `∂x̂/∂θ`.
pub fn dmd_gradient(x_hat: &Mat, sigma: f64, noise: &Mat, real: &dyn ScoreModel, fake: &dyn ScoreModel) -> Result<Mat> {
    Ok(dmd_terms(x_hat, sigma, noise, real, fake)?.grad)
}

/// Per-sample weight `σ² / mean|x̂ − D_real(x̂_σ)|` that balances the
/// divergence gradient across noise levels.
pub fn dmd_weight(x_hat: &Mat, sigma: f64, terms: &DmdTerms) -> f64 {
    let s2 = sigma * sigma;
    let gap = terms
        .noised
        .zip_map(&terms.real_score, |xt, s| xt + s2 * s)
        .zip_map(x_hat, |d_real, x| (x - d_real).abs())
        .sum()
        / x_hat.len().max(1) as f64;
    s2 / gap.max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn analytic_gaussian_gradient() {
        let real = GaussianScore::new(vec![0.0], 1.0, ScoreRole::Real);
        let fake = GaussianScore::new(vec![2.0], 1.0, ScoreRole::Fake);
        for sigma in [0.1, 0.5, 1.0, 3.0] {
            let x = Mat::from_fn(50, 1, |i, _| i as f64 * 0.3 - 7.0);
            let eps = Mat::from_fn(50, 1, |i, _| ((i * 37) % 11) as f64 * 0.2 - 1.0);
            let g = dmd_gradient(&x, sigma, &eps, &real, &fake).unwrap();
            let want = 2.0 / (1.0 + sigma * sigma);
            assert!(g.data().iter().all(|v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn loss_arithmetic() {
        let l = DistillLoss::new(0.25, 0.5, 2.0);
        assert_eq!(l.total, 0.25 + 2.0 * 0.5);
        let t2v = DistillLoss::for_task(Task::T2V, 0.7, 1.0);
        assert_eq!((t2v.ctrl, t2v.vis, t2v.total), (0.0, 0.7, 0.7));
    }

    #[test]
    fn plan_defaults_and_stage_order() {
        let p = TrainPlan::default();
        p.validate().unwrap();
        assert_eq!((p.lr_teacher, p.lr_student, p.lr_fake), (2e-5, 4.0e-6, 8.0e-7));
        assert!(TrainPlan::can_follow(Stage::Teacher, Stage::Init));
        assert!(TrainPlan::can_follow(Stage::Init, Stage::Jdmd));
        assert!(!TrainPlan::can_follow(Stage::Jdmd, Stage::Init));
        assert!(TrainPlan { lr_fake: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let real = GaussianScore::new(vec![0.0], 1.0, ScoreRole::Real);
        let x = Mat::from_vec(1, 1, vec![f64::NAN]);
        assert!(matches!(dmd_gradient(&x, 1.0, &Mat::zeros(1, 1), &real, &real), Err(Error::NonFinite(_))));
        let broken = GaussianScore::new(vec![0.0], 0.0, ScoreRole::Fake);
        assert!(dmd_gradient(&Mat::zeros(1, 1), 1e-200, &Mat::zeros(1, 1), &real, &broken).is_err());
    }

    proptest! {
        #[test]
        fn identical_models_give_zero_gradient(mean in -3.0f64..3.0, var in 0.1f64..4.0, sigma in 0.01f64..5.0,
                                               xs in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let a = GaussianScore::new(vec![mean, -mean], var, ScoreRole::Real);
            let b = GaussianScore::new(vec![mean, -mean], var, ScoreRole::Fake);
            let x = Mat::from_vec(3, 2, xs);
            let g = dmd_gradient(&x, sigma, &Mat::filled(3, 2, 0.3), &a, &b).unwrap();
            prop_assert!(g.data().iter().all(|v| *v == 0.0));
        }
    }
}
