//! Initialization, Adam, learning-rate schedule, the training loop,
//! checkpoints, evaluation and the ablation runner.

mod ablate;
mod checkpoint;
mod evaluate;

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{DegradedPair, Image};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::models::{Model, Task};
use crate::tensor::{Tape, Tensor};
use crate::wsgraph::derived_seed;

pub use crate::models::xavier_init;
pub use ablate::{ablate, AblationGrid, AblationReport, AblationRow};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use evaluate::{evaluate, worker_threads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub total_steps: usize,
    pub batch: usize,
    pub loss: Loss,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Validation PSNR is logged every this many steps and after the last
    /// one; 0 logs it only after the last step.
    pub eval_every: usize,
    /// Input-side crop size; `None` picks 32 for deblurring and 24 for SR.
    pub patch: Option<usize>,
    /// Random flips and 90-degree rotations of each training crop.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            total_steps: 1500,
            batch: 4,
            loss: Loss::Mse,
            seed: 7,
            adam: AdamConfig::default(),
            eval_every: 0,
            patch: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.patch == Some(0) {
            return Err(Error::Config("patch must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config(
                "Adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn patch_for(&self, task: Task) -> usize {
        self.patch.unwrap_or(match task {
            Task::Deblur => 32,
            Task::Sr => 24,
        })
    }

    /// `lr0 * (1 - step / total_steps)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        lr_at(step, self.lr0, self.total_steps)
    }
}

/// Linear decay from `lr0` at step 0 to 0 at `total`.
pub fn lr_at(step: usize, lr0: f64, total: usize) -> f64 {
    let step = step.min(total);
    lr0 * (1.0 - step as f64 / total as f64)
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl OptimState {
    pub fn zeros_like(params: &[Tensor<f32>]) -> Self {
        Self {
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update; increments `state.t` first.
pub fn adam_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut OptimState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        for other in [grads[i].shape(), state.m[i].shape(), state.v[i].shape()] {
            if other != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs {other:?}", p.shape()),
                ));
            }
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pj, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = g as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *pj = (*pj as f64 - update) as f32;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Completed optimizer steps.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub eval_psnr: Option<f64>,
}

pub const LOG_HEADER: &str = "step,loss,lr,eval_psnr";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let eval = r.eval_psnr.map(|p| p.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", r.step, r.loss, r.lr, eval).unwrap();
    }
    s
}

/// Mean PSNR of full-image inference over `pairs`.
pub fn mean_psnr(model: &Model, pairs: &[DegradedPair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let (out, _) = model.infer(&p.input)?;
        total += psnr(&out, &p.target, 1.0)?;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Sequential crop, forward, loss, backward, Adam.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    optim: OptimState,
    step: usize,
    train: Vec<DegradedPair>,
    val: Vec<DegradedPair>,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(
        model: Model,
        config: TrainConfig,
        train: Vec<DegradedPair>,
        val: Vec<DegradedPair>,
    ) -> Result<Self> {
        let optim = OptimState::zeros_like(model.params());
        Self::resume(model, config, optim, 0, train, val)
    }

    pub fn from_checkpoint(
        ck: Checkpoint,
        train: Vec<DegradedPair>,
        val: Vec<DegradedPair>,
    ) -> Result<Self> {
        Self::resume(ck.model, ck.train, ck.optim, ck.step, train, val)
    }

    fn resume(
        model: Model,
        config: TrainConfig,
        optim: OptimState,
        step: usize,
        train: Vec<DegradedPair>,
        val: Vec<DegradedPair>,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if step > config.total_steps {
            return Err(Error::Config(format!(
                "step {step} beyond total_steps {}",
                config.total_steps
            )));
        }
        let mag = model.config().magnification();
        let patch = config.patch_for(model.config().task);
        let m = model.config().size_multiple();
        if !patch.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "patch {patch} is not a multiple of {m}"
            )));
        }
        for (i, p) in train.iter().chain(&val).enumerate() {
            if p.scale() != mag {
                return Err(Error::Config(format!(
                    "pair {i} has scale {}, model expects {mag}",
                    p.scale()
                )));
            }
            if p.input.channels() != model.config().image_channels {
                return Err(Error::Config(format!(
                    "pair {i} has {} channels",
                    p.input.channels()
                )));
            }
        }
        for (i, p) in train.iter().enumerate() {
            if p.input.width() < patch || p.input.height() < patch {
                return Err(Error::Config(format!(
                    "training pair {i} ({}x{}) is smaller than patch {patch}",
                    p.input.width(),
                    p.input.height()
                )));
            }
        }
        Ok(Self {
            model,
            config,
            optim,
            step,
            train,
            val,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optim(&self) -> &OptimState {
        &self.optim
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn log_csv(&self) -> String {
        log_csv(&self.log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            optim: self.optim.clone(),
            step: self.step,
        }
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Batch for `step`, drawn from a stream that depends only on the seed
    /// and the step index.
    fn batch(&self, step: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let stream = derived_seed(self.config.seed, 0x74_7261_696e);
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(stream, step as u64));
        let p = self.config.patch_for(self.model.config().task);
        let s = self.model.config().magnification();
        let mut inputs = Vec::with_capacity(self.config.batch);
        let mut targets = Vec::with_capacity(self.config.batch);
        for _ in 0..self.config.batch {
            let pair = &self.train[rng.gen_range(0..self.train.len())];
            let x = rng.gen_range(0..=pair.input.width() - p);
            let y = rng.gen_range(0..=pair.input.height() - p);
            let mut input = pair.input.crop(x, y, p, p)?;
            let mut target = pair.target.crop(s * x, s * y, s * p, s * p)?;
            if self.config.augment {
                let code = rng.gen_range(0..8u8);
                input = input.dihedral(code);
                target = target.dihedral(code);
            }
            inputs.push(input);
            targets.push(target);
        }
        let inputs: Vec<&Image> = inputs.iter().collect();
        let targets: Vec<&Image> = targets.iter().collect();
        Ok((Image::stack(&inputs)?, Image::stack(&targets)?))
    }

    /// One optimizer step; returns its log row.
    pub fn step_once(&mut self) -> Result<LogRow> {
        let step = self.step;
        if step >= self.config.total_steps {
            return Err(Error::Config("training already finished".into()));
        }
        let lr = self.config.lr_at(step);
        let (x, y) = self.batch(step)?;
        let tape = Tape::<f32>::new();
        let params = self.model.bind(&tape, true);
        let out = self.model.forward(&tape, &params, tape.constant(x))?;
        let target = tape.constant(y);
        let loss = match self.config.loss {
            Loss::Mse => out.mse(target)?,
            Loss::L1 => out.l1(target)?,
        };
        let loss_value = loss.value().data()[0] as f64;
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = params
            .iter()
            .map(|&p| grads.take(p).unwrap_or_else(|| Tensor::zeros(&p.shape())))
            .collect();
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !loss_value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                lr,
                grad_norm,
            });
        }
        adam_step(
            self.model.params_mut(),
            &grads,
            &mut self.optim,
            lr,
            &self.config.adam,
        )?;
        self.step += 1;
        let eval_due = self.step == self.config.total_steps
            || (self.config.eval_every > 0 && self.step.is_multiple_of(self.config.eval_every));
        let eval_psnr = if eval_due && !self.val.is_empty() {
            Some(mean_psnr(&self.model, &self.val)?)
        } else {
            None
        };
        let row = LogRow {
            step: self.step,
            loss: loss_value,
            lr,
            eval_psnr,
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains until `until` completed steps (clamped to `total_steps`).
    pub fn run(&mut self, until: usize) -> Result<()> {
        let until = until.min(self.config.total_steps);
        while self.step < until {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.run(self.config.total_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth, BlurKernel};
    use crate::gcfeat::GcStackConfig;
    use crate::models::ModelConfig;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            gc: Some(GcStackConfig {
                f: 4,
                blocks: 1,
                ..Default::default()
            }),
            ..ModelConfig::mini_deblur()
        }
    }

    fn tiny_data() -> Vec<DegradedPair> {
        synth::deblur_pairs(3, 16, BlurKernel::Gaussian { sigma: 1.5 }, 0.0, 5).unwrap()
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            lr0: 1e-3,
            total_steps: steps,
            batch: 2,
            patch: Some(8),
            eval_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        assert_eq!(lr_at(0, 1e-4, 1000), 1e-4);
        assert_eq!(lr_at(1000, 1e-4, 1000), 0.0);
        assert!((lr_at(500, 1e-4, 1000) - 5e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 0..=37 {
            let lr = lr_at(s, 3e-4, 37);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut p = vec![Tensor::<f32>::zeros(&[1])];
        let g = vec![Tensor::<f32>::full(&[1], 1.0)];
        let mut st = OptimState::zeros_like(&p);
        adam_step(&mut p, &g, &mut st, 1e-4, &AdamConfig::default()).unwrap();
        assert_eq!(st.t, 1);
        assert!((p[0].data()[0] as f64 + 1e-4).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let init = Tensor::<f32>::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut p = vec![init.clone()];
        let g = vec![Tensor::zeros(&[3])];
        let mut st = OptimState::zeros_like(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, 1e-2, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0], init);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let g = vec![Tensor::<f32>::zeros(&[3])];
        let mut st = OptimState::zeros_like(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, 1.0, &AdamConfig::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let run = || {
            let m = Model::new(tiny_model(), 1).unwrap();
            let mut t =
                Trainer::new(m, tiny_train(4), tiny_data(), tiny_data()[..1].to_vec()).unwrap();
            t.run_to_end().unwrap();
            t
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log_csv(), b.log_csv());
        assert_eq!(a.model().params(), b.model().params());
        assert!(a.log().iter().all(|r| r.loss.is_finite()));
        assert_eq!(a.log().len(), 4);
        assert!(a.log()[1].eval_psnr.is_some() && a.log()[0].eval_psnr.is_none());
        assert!(a.log_csv().starts_with("step,loss,lr,eval_psnr\n1,"));
    }

    #[test]
    fn empty_dataset_rejected() {
        let m = Model::new(tiny_model(), 1).unwrap();
        assert!(Trainer::new(m, tiny_train(1), vec![], vec![]).is_err());
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let mut m = Model::new(tiny_model(), 1).unwrap();
        m.params_mut()[0].data_mut()[0] = f32::NAN;
        let mut t = Trainer::new(m, tiny_train(3), tiny_data(), vec![]).unwrap();
        match t.step_once() {
            Err(Error::NonFinite { step, lr, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(lr, 1e-3);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
