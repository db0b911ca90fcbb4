//! Meta-training: per-task inner adaptation, the task-batched outer update,
//! fine-tuning, and the supervised baseline trainer.
//!
//! The outer update differentiates through the inner gradient steps
//! (double backward) unless first-order mode detaches them. Task gradients
//! within a meta-batch are computed independently on parameter snapshots and
//! reduced in task order, so runs are bit-reproducible regardless of the
//! worker count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{grad, Var};
use crate::episodes::{EpisodeConfig, EpisodeError, Materializer, MetaTask};
use crate::model::{cross_entropy, forward, init_params, ModelConfig};
use crate::params::{CheckpointError, ParamSet};
use crate::scalar::Scalar;
use crate::seeds::{derive_rng, derive_seed};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("divergence at {context}: loss {loss}")]
    Divergence { context: String, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training io: {0}")]
    Io(#[from] std::io::Error),
}

/// Optimization schedule. `alpha` is the task-level rate used by the inner
/// loop and fine-tuning; `beta` is the meta rate.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub inner_steps: usize,
    pub finetune_steps: usize,
    pub meta_batch: usize,
    pub meta_iterations: usize,
    pub first_order: bool,
    /// Average the query losses over tasks instead of summing them.
    pub outer_mean: bool,
    /// Adam on the outer update instead of plain gradient descent.
    pub outer_adam: bool,
    pub supervised_steps: usize,
    pub supervised_batch: usize,
    /// Iterations between checkpoints (0 = final only).
    pub ckpt_interval: usize,
    /// Abort when any loss exceeds this or goes non-finite.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.001,
            inner_steps: 5,
            finetune_steps: 10,
            meta_batch: 16,
            meta_iterations: 2000,
            first_order: false,
            outer_mean: false,
            outer_adam: false,
            supervised_steps: 500,
            supervised_batch: 32,
            ckpt_interval: 0,
            divergence_threshold: 1e4,
        }
    }
}

impl TrainConfig {
    /// Validation applied to run configurations. Library entry points accept
    /// degenerate rates (the alpha = 0 reduction is exercised by tests).
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err(TrainError::Divergence {
                context: "config".into(),
                loss: f64::NAN,
            });
        }
        if self.inner_steps == 0 || self.meta_batch == 0 {
            return Err(TrainError::Divergence {
                context: "config".into(),
                loss: f64::NAN,
            });
        }
        Ok(())
    }
}

/// A task the meta-learner can adapt to: a support objective for the inner
/// loop and a query objective for the outer one.
pub trait TaskLoss<T: Scalar> {
    fn support_loss(&self, params: &ParamSet<T>) -> Result<Var<T>, TrainError>;
    fn query_loss(&self, params: &ParamSet<T>) -> Result<Var<T>, TrainError>;
}

/// CNN episode adapter: cross-entropy of the model over the task batches.
pub struct EpisodeTask<T: Scalar> {
    model_cfg: ModelConfig,
    support_x: Tensor<T>,
    support_y: Vec<usize>,
    query_x: Tensor<T>,
    query_y: Vec<usize>,
}

impl<T: Scalar> EpisodeTask<T> {
    pub fn new(task: &MetaTask, model_cfg: &ModelConfig) -> Self {
        let (sx, sy) = task.support_batch();
        let (qx, qy) = task.query_batch();
        Self {
            model_cfg: model_cfg.clone(),
            support_x: convert(&sx),
            support_y: sy,
            query_x: convert(&qx),
            query_y: qy,
        }
    }
}

fn convert<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    Tensor::from_vec(
        t.shape().to_vec(),
        t.data().iter().map(|&v| T::from_f64(f64::from(v))).collect(),
    )
    .expect("same shape")
}

impl<T: Scalar> TaskLoss<T> for EpisodeTask<T> {
    fn support_loss(&self, params: &ParamSet<T>) -> Result<Var<T>, TrainError> {
        let logits = forward(params, &self.model_cfg, &Var::constant(self.support_x.clone()))?;
        Ok(cross_entropy(&logits, &self.support_y)?)
    }

    fn query_loss(&self, params: &ParamSet<T>) -> Result<Var<T>, TrainError> {
        let logits = forward(params, &self.model_cfg, &Var::constant(self.query_x.clone()))?;
        Ok(cross_entropy(&logits, &self.query_y)?)
    }
}

fn check_finite<T: Scalar>(loss: &Var<T>, threshold: f64, context: &str) -> Result<f64, TrainError> {
    let value = loss.value().item().to_f64();
    if !value.is_finite() || value > threshold {
        return Err(TrainError::Divergence {
            context: context.to_string(),
            loss: value,
        });
    }
    Ok(value)
}

/// Inner loop: `inner_steps` gradient steps on the support loss at rate
/// alpha. With `create_graph` the returned parameters stay differentiable
/// with respect to the originals (the meta-training path); without it they
/// are plain values (the fine-tuning path).
pub fn inner_adapt<T: Scalar>(
    theta: &ParamSet<T>,
    task: &dyn TaskLoss<T>,
    alpha: f64,
    steps: usize,
    create_graph: bool,
    threshold: f64,
) -> Result<ParamSet<T>, TrainError> {
    let mut current = theta.clone();
    for step in 0..steps {
        let loss = task.support_loss(&current)?;
        check_finite(&loss, threshold, &format!("inner step {step}"))?;
        let grads = grad(&loss, &current.vars(), create_graph)?;
        let grads: Vec<Var<T>> = if create_graph {
            grads
        } else {
            grads.iter().map(Var::detach).collect()
        };
        current = current.step(&grads, T::from_f64(alpha))?;
    }
    Ok(current)
}

/// Per-task meta-gradient: d L_Q(theta') / d theta, with theta' produced by
/// the inner loop. First-order mode detaches the inner gradients, dropping
/// every curvature term.
fn task_meta_grad<T: Scalar>(
    theta_values: &[(String, Tensor<T>)],
    task: &dyn TaskLoss<T>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    let theta = params_from_values(theta_values);
    let mut current = theta.clone();
    for step in 0..cfg.inner_steps {
        let loss = task.support_loss(&current)?;
        check_finite(&loss, cfg.divergence_threshold, &format!("inner step {step}"))?;
        let grads = grad(&loss, &current.vars(), true)?;
        let grads: Vec<Var<T>> = if cfg.first_order {
            grads.iter().map(Var::detach).collect()
        } else {
            grads
        };
        current = current.step(&grads, T::from_f64(cfg.alpha))?;
    }
    let query = task.query_loss(&current)?;
    let value = check_finite(&query, cfg.divergence_threshold, "query loss")?;
    let grads = grad(&query, &theta.vars(), false)?;
    Ok((value, grads.into_iter().map(|g| g.value().clone()).collect()))
}

fn params_from_values<T: Scalar>(values: &[(String, Tensor<T>)]) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for (name, tensor) in values {
        out.insert(name.clone(), Var::param(tensor.clone()));
    }
    out
}

fn snapshot<T: Scalar>(params: &ParamSet<T>) -> Vec<(String, Tensor<T>)> {
    params
        .iter()
        .map(|(n, v)| (n.to_string(), v.value().clone()))
        .collect()
}

/// One outer update over a batch of tasks. Returns the new parameters and
/// the summed (or averaged, per config) query loss.
///
/// Task gradients are computed independently on a read-only snapshot and
/// reduced in task order: the update for B tasks is the sum of the per-task
/// contributions applied once.
pub fn meta_step<T, L>(
    theta: &ParamSet<T>,
    tasks: &[L],
    cfg: &TrainConfig,
) -> Result<(ParamSet<T>, f64), TrainError>
where
    T: Scalar,
    L: TaskLoss<T> + Sync,
{
    let values = snapshot(theta);
    let results: Vec<Result<(f64, Vec<Tensor<T>>), TrainError>> = tasks
        .par_iter()
        .map(|task| task_meta_grad(&values, task, cfg))
        .collect();

    let mut total_loss = 0.0f64;
    let mut total: Option<Vec<Tensor<T>>> = None;
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        total = Some(match total {
            None => grads,
            Some(acc) => acc
                .into_iter()
                .zip(grads)
                .map(|(a, g)| a.zip(&g, "grad-sum", |x, y| x + y))
                .collect::<Result<Vec<_>, _>>()?,
        });
    }
    let mut total = total.unwrap_or_default();
    if cfg.outer_mean && !tasks.is_empty() {
        let scale = T::from_f64(1.0 / tasks.len() as f64);
        total = total.into_iter().map(|g| g.map(|v| v * scale)).collect();
        total_loss /= tasks.len() as f64;
    }

    let theta_new = apply_sgd(theta, &total, T::from_f64(cfg.beta));
    Ok((theta_new, total_loss))
}

fn apply_sgd<T: Scalar>(theta: &ParamSet<T>, grads: &[Tensor<T>], lr: T) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for ((name, var), g) in theta.iter().zip(grads) {
        let updated = var
            .value()
            .zip(g, "sgd", |p, gv| p - lr * gv)
            .expect("gradient shapes match parameters");
        out.insert(name, Var::param(updated));
    }
    out
}

/// One row of the training log.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub iteration: usize,
    pub meta_loss: f64,
    pub wall_ms: u64,
}

/// Where meta-training writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

pub struct TrainResult<T: Scalar> {
    pub params: ParamSet<T>,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Full meta-training: sample a meta-batch per iteration, take one outer
/// step, log, and checkpoint. Deterministic in `run_seed`.
pub fn meta_train<T: Scalar>(
    materializer: &Materializer,
    partition: &crate::dataset::ClassPartition,
    manifest: &crate::dataset::SplitManifest,
    episode_cfg: &EpisodeConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_seed: u64,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainResult<T>, TrainError> {
    let mut theta: ParamSet<T> =
        init_params(model_cfg, &mut derive_rng(run_seed, "init", &[]))?;
    let mut log = Vec::with_capacity(cfg.meta_iterations);
    let mut checkpoints = Vec::new();
    let mut adam = cfg.outer_adam.then(|| AdamState::new(&theta));
    let start = Instant::now();

    for iteration in 0..cfg.meta_iterations {
        // Plans and features are sampled per (seed, iteration, slot), so the
        // stream does not depend on scheduling.
        let plans: Vec<_> = (0..cfg.meta_batch)
            .map(|t| {
                crate::episodes::plan_meta_task(
                    partition,
                    manifest,
                    episode_cfg,
                    derive_seed(run_seed, "episode", &[iteration as u64, t as u64]),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tasks: Vec<EpisodeTask<T>> = plans
            .par_iter()
            .map(|plan| -> Result<EpisodeTask<T>, TrainError> {
                let task = materializer.realize(plan)?;
                Ok(EpisodeTask::new(&task, model_cfg))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let meta_loss;
        (theta, meta_loss) = match &mut adam {
            None => meta_step(&theta, &tasks, cfg).map_err(|e| at_iteration(e, iteration))?,
            Some(state) => {
                meta_step_adam(&theta, &tasks, cfg, state).map_err(|e| at_iteration(e, iteration))?
            }
        };
        log.push(LogRow {
            iteration: iteration + 1,
            meta_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });

        if let Some(out) = outputs {
            let last = iteration + 1 == cfg.meta_iterations;
            let due = cfg.ckpt_interval > 0 && (iteration + 1) % cfg.ckpt_interval == 0;
            if last || due {
                let path = out.dir.join(format!("ckpt_{}", iteration + 1));
                theta.save(&path)?;
                if checkpoints.last() != Some(&path) {
                    checkpoints.push(path);
                }
            }
        }
    }
    if let Some(out) = outputs {
        write_log_csv(&log, &out.dir.join("train_log.csv"))?;
        if cfg.meta_iterations == 0 {
            let path = out.dir.join("ckpt_0");
            theta.save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainResult {
        params: theta,
        log,
        checkpoints,
    })
}

fn at_iteration(e: TrainError, iteration: usize) -> TrainError {
    match e {
        TrainError::Divergence { context, loss } => TrainError::Divergence {
            context: format!("iteration {iteration}, {context}"),
            loss,
        },
        other => other,
    }
}

fn write_log_csv(log: &[LogRow], path: &Path) -> Result<(), TrainError> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "iteration,meta_loss,wall_ms")?;
    for row in log {
        writeln!(f, "{},{},{}", row.iteration, row.meta_loss, row.wall_ms)?;
    }
    Ok(())
}

struct AdamState<T: Scalar> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: usize,
}

impl<T: Scalar> AdamState<T> {
    fn new(theta: &ParamSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = theta
            .iter()
            .map(|(_, var)| Tensor::zeros(var.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

fn meta_step_adam<T, L>(
    theta: &ParamSet<T>,
    tasks: &[L],
    cfg: &TrainConfig,
    state: &mut AdamState<T>,
) -> Result<(ParamSet<T>, f64), TrainError>
where
    T: Scalar,
    L: TaskLoss<T> + Sync,
{
    // Reuse the plain path to obtain summed gradients, then re-apply Adam.
    let values = snapshot(theta);
    let results: Vec<Result<(f64, Vec<Tensor<T>>), TrainError>> = tasks
        .par_iter()
        .map(|task| task_meta_grad(&values, task, cfg))
        .collect();
    let mut total_loss = 0.0;
    let mut total: Option<Vec<Tensor<T>>> = None;
    for r in results {
        let (loss, grads) = r?;
        total_loss += loss;
        total = Some(match total {
            None => grads,
            Some(acc) => acc
                .into_iter()
                .zip(grads)
                .map(|(a, g)| a.zip(&g, "grad-sum", |x, y| x + y))
                .collect::<Result<Vec<_>, _>>()?,
        });
    }
    let total = total.unwrap_or_default();

    state.t += 1;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let bias1 = 1.0 - b1.powi(state.t as i32);
    let bias2 = 1.0 - b2.powi(state.t as i32);
    let mut out = ParamSet::new();
    for (i, ((name, var), g)) in theta.iter().zip(&total).enumerate() {
        state.m[i] = state.m[i].zip(g, "adam-m", |m, gv| {
            T::from_f64(b1) * m + T::from_f64(1.0 - b1) * gv
        })?;
        state.v[i] = state.v[i].zip(g, "adam-v", |v, gv| {
            T::from_f64(b2) * v + T::from_f64(1.0 - b2) * gv * gv
        })?;
        let mut data = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            let m_hat = state.m[i].data()[j].to_f64() / bias1;
            let v_hat = state.v[i].data()[j].to_f64() / bias2;
            let step = cfg.beta * m_hat / (v_hat.sqrt() + eps);
            data.push(var.value().data()[j] - T::from_f64(step));
        }
        out.insert(name, Var::param(Tensor::from_vec(var.shape().to_vec(), data)?));
    }
    Ok((out, total_loss))
}

/// Fine-tuning: plain gradient steps on the target support at rate alpha.
/// No second-order bookkeeping.
pub fn fine_tune<T: Scalar>(
    theta: &ParamSet<T>,
    task: &dyn TaskLoss<T>,
    cfg: &TrainConfig,
) -> Result<ParamSet<T>, TrainError> {
    let adapted = inner_adapt(
        theta,
        task,
        cfg.alpha,
        cfg.finetune_steps,
        false,
        cfg.divergence_threshold,
    )?;
    Ok(adapted.reparam())
}

/// Supervised baseline: mini-batch gradient descent on the target support
/// from a fresh random initialization, for a fixed step budget.
pub fn train_supervised<T: Scalar>(
    target: &MetaTask,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParamSet<T>, TrainError> {
    let mut theta: ParamSet<T> = init_params(model_cfg, &mut derive_rng(seed, "supervised-init", &[]))?;
    let (x, y) = target.support_batch();
    let x: Tensor<T> = convert(&x);
    let n = y.len();
    let batch = if cfg.supervised_batch == 0 {
        n
    } else {
        cfg.supervised_batch.min(n)
    };
    let mut rng = derive_rng(seed, "supervised-batch", &[]);
    let feat: usize = x.shape()[1..].iter().product();
    let (t_dim, d_dim) = (x.shape()[1], x.shape()[2]);
    for step in 0..cfg.supervised_steps {
        let idx: Vec<usize> = {
            use rand::seq::index::sample;
            if batch == n {
                (0..n).collect()
            } else {
                sample(&mut rng, n, batch).into_vec()
            }
        };
        let mut data = Vec::with_capacity(batch * feat);
        let mut labels = Vec::with_capacity(batch);
        for &i in &idx {
            data.extend_from_slice(&x.data()[i * feat..(i + 1) * feat]);
            labels.push(y[i]);
        }
        let bx = Var::constant(Tensor::from_vec(vec![batch, t_dim, d_dim], data)?);
        let logits = forward(&theta, model_cfg, &bx)?;
        let loss = cross_entropy(&logits, &labels)?;
        check_finite(&loss, cfg.divergence_threshold, &format!("supervised step {step}"))?;
        let grads = grad(&loss, &theta.vars(), false)?;
        let grad_values: Vec<Tensor<T>> = grads.iter().map(|g| g.value().clone()).collect();
        theta = apply_sgd(&theta, &grad_values, T::from_f64(cfg.alpha));
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// L_S = 0.5 (theta - a)^2, L_Q = 0.5 (theta - b)^2 over one scalar
    /// parameter named "theta".
    struct Quadratic {
        a: f64,
        b: f64,
    }

    impl TaskLoss<f64> for Quadratic {
        fn support_loss(&self, params: &ParamSet<f64>) -> Result<Var<f64>, TrainError> {
            let theta = params.get("theta").unwrap();
            let d = theta.add_scalar(-self.a);
            Ok(d.mul(&d)?.mul_scalar(0.5).sum_all()?)
        }

        fn query_loss(&self, params: &ParamSet<f64>) -> Result<Var<f64>, TrainError> {
            let theta = params.get("theta").unwrap();
            let d = theta.add_scalar(-self.b);
            Ok(d.mul(&d)?.mul_scalar(0.5).sum_all()?)
        }
    }

    fn scalar_params(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("theta", Var::param(Tensor::scalar(v)));
        p
    }

    fn theta_of(p: &ParamSet<f64>) -> f64 {
        p.get("theta").unwrap().value().item()
    }

    #[test]
    fn inner_adapt_scalar_quadratic() {
        // L_S = 0.5 theta^2 (a = 0): one step of alpha = 0.1 from 1 -> 0.9.
        let task = Quadratic { a: 0.0, b: 0.0 };
        let p = scalar_params(1.0);
        let adapted = inner_adapt(&p, &task, 0.1, 1, false, 1e4).unwrap();
        assert!((theta_of(&adapted) - 0.9).abs() < 1e-15);

        // Three steps: 0.9^3.
        let adapted = inner_adapt(&p, &task, 0.1, 3, false, 1e4).unwrap();
        assert!((theta_of(&adapted) - 0.729).abs() < 1e-15);

        // alpha = 0 leaves parameters exactly unchanged.
        let adapted = inner_adapt(&p, &task, 0.0, 4, false, 1e4).unwrap();
        assert_eq!(theta_of(&adapted), 1.0);
    }

    #[test]
    fn meta_step_closed_form() {
        // theta = 0, a = 1, b = -1, alpha = 0.1, beta = 1:
        // meta-gradient 0.99, so the new theta is -0.99.
        let cfg = TrainConfig {
            alpha: 0.1,
            beta: 1.0,
            inner_steps: 1,
            meta_batch: 1,
            ..TrainConfig::default()
        };
        let tasks = [Quadratic { a: 1.0, b: -1.0 }];
        let (theta, loss) = meta_step(&scalar_params(0.0), &tasks, &cfg).unwrap();
        assert!((theta_of(&theta) + 0.99).abs() < 1e-12);
        // Query loss at theta' = 0.1: 0.5 * 1.1^2.
        assert!((loss - 0.5 * 1.1f64 * 1.1).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_reduces_to_plain_gradient_step() {
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.5,
            inner_steps: 1,
            ..TrainConfig::default()
        };
        let tasks = [
            Quadratic { a: 1.0, b: -1.0 },
            Quadratic { a: 0.0, b: 2.0 },
        ];
        let start = 0.25;
        let (theta, _) = meta_step(&scalar_params(start), &tasks, &cfg).unwrap();
        // Plain gradient of sum L_Q at theta: (theta - b1) + (theta - b2).
        let g = (start - -1.0) + (start - 2.0);
        let expect = start - 0.5 * g;
        assert_eq!(theta_of(&theta), expect);
    }

    #[test]
    fn first_order_differs_when_hessian_is_nonzero() {
        let cfg = TrainConfig {
            alpha: 0.1,
            beta: 1.0,
            inner_steps: 1,
            ..TrainConfig::default()
        };
        let fo_cfg = TrainConfig {
            first_order: true,
            ..cfg.clone()
        };
        let tasks = [Quadratic { a: 1.0, b: -1.0 }];
        let (so, _) = meta_step(&scalar_params(0.0), &tasks, &cfg).unwrap();
        let (fo, _) = meta_step(&scalar_params(0.0), &tasks, &fo_cfg).unwrap();
        // Second order: -0.99. First order: theta - (theta' - b) = -1.1.
        assert!((theta_of(&so) + 0.99).abs() < 1e-12);
        assert!((theta_of(&fo) + 1.1).abs() < 1e-12);
    }

    /// L_S = c * theta (linear, zero Hessian).
    struct LinearSupport {
        c: f64,
        b: f64,
    }

    impl TaskLoss<f64> for LinearSupport {
        fn support_loss(&self, params: &ParamSet<f64>) -> Result<Var<f64>, TrainError> {
            Ok(params
                .get("theta")
                .unwrap()
                .mul_scalar(self.c)
                .sum_all()?)
        }

        fn query_loss(&self, params: &ParamSet<f64>) -> Result<Var<f64>, TrainError> {
            let d = params.get("theta").unwrap().add_scalar(-self.b);
            Ok(d.mul(&d)?.mul_scalar(0.5).sum_all()?)
        }
    }

    #[test]
    fn linear_inner_loss_equates_first_and_second_order() {
        let cfg = TrainConfig {
            alpha: 0.1,
            beta: 1.0,
            inner_steps: 1,
            ..TrainConfig::default()
        };
        let fo_cfg = TrainConfig {
            first_order: true,
            ..cfg.clone()
        };
        let tasks = [LinearSupport { c: 2.5, b: 0.7 }];
        let (so, _) = meta_step(&scalar_params(0.3), &tasks, &cfg).unwrap();
        let (fo, _) = meta_step(&scalar_params(0.3), &tasks, &fo_cfg).unwrap();
        assert!((theta_of(&so) - theta_of(&fo)).abs() < 1e-10);
    }

    #[test]
    fn batch_update_is_sum_of_task_contributions() {
        let cfg = TrainConfig {
            alpha: 0.1,
            beta: 0.01,
            inner_steps: 2,
            ..TrainConfig::default()
        };
        let t1 = Quadratic { a: 1.0, b: -1.0 };
        let t2 = Quadratic { a: -0.5, b: 2.0 };
        let start = 0.4;
        let (both, _) = meta_step(&scalar_params(start), &[t1, t2], &cfg).unwrap();
        let (only1, _) = meta_step(
            &scalar_params(start),
            &[Quadratic { a: 1.0, b: -1.0 }],
            &cfg,
        )
        .unwrap();
        let (only2, _) = meta_step(
            &scalar_params(start),
            &[Quadratic { a: -0.5, b: 2.0 }],
            &cfg,
        )
        .unwrap();
        let g1 = (start - theta_of(&only1)) / cfg.beta;
        let g2 = (start - theta_of(&only2)) / cfg.beta;
        let expect = start - cfg.beta * (g1 + g2);
        assert!((theta_of(&both) - expect).abs() < 1e-12);
    }

    #[test]
    fn outer_mean_rescales_the_update() {
        let cfg_sum = TrainConfig {
            alpha: 0.1,
            beta: 0.01,
            inner_steps: 1,
            ..TrainConfig::default()
        };
        let cfg_mean = TrainConfig {
            outer_mean: true,
            ..cfg_sum.clone()
        };
        let tasks = || [Quadratic { a: 1.0, b: -1.0 }, Quadratic { a: 1.0, b: -1.0 }];
        let start = 0.0;
        let (sum, _) = meta_step(&scalar_params(start), &tasks(), &cfg_sum).unwrap();
        let (mean, _) = meta_step(&scalar_params(start), &tasks(), &cfg_mean).unwrap();
        let sum_step = start - theta_of(&sum);
        let mean_step = start - theta_of(&mean);
        assert!((sum_step - 2.0 * mean_step).abs() < 1e-12);
    }

    #[test]
    fn divergence_reports_the_step() {
        struct Exploding;
        impl TaskLoss<f64> for Exploding {
            fn support_loss(&self, params: &ParamSet<f64>) -> Result<Var<f64>, TrainError> {
                // Gradient 2e6 * theta: one step at alpha 0.1 overshoots far
                // past the divergence threshold.
                let t = params.get("theta").unwrap();
                Ok(t.mul(t)?.mul_scalar(1e6).sum_all()?)
            }
            fn query_loss(&self, params: &ParamSet<f64>) -> Result<Var<f64>, TrainError> {
                self.support_loss(params)
            }
        }
        let cfg = TrainConfig {
            inner_steps: 3,
            ..TrainConfig::default()
        };
        match meta_step(&scalar_params(1.0), &[Exploding], &cfg) {
            Err(TrainError::Divergence { context, .. }) => {
                assert!(context.contains("inner step"), "{context}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fine_tune_zero_steps_is_identity() {
        let cfg = TrainConfig {
            finetune_steps: 0,
            ..TrainConfig::default()
        };
        let p = scalar_params(0.37);
        let out = fine_tune(&p, &Quadratic { a: 1.0, b: 0.0 }, &cfg).unwrap();
        assert_eq!(theta_of(&out), 0.37);
    }
}
