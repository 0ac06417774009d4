//! Maximum-likelihood training: Adam with decoupled weight decay, a
//! separate learning rate for the degrees-of-freedom parameters, optional
//! global-norm gradient clipping, and best-validation parameter selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{no_grad, Parameter};
use crate::error::{Error, Result};
use crate::model::FlowModel;
use crate::tensor::Tensor;

/// Validation NLL is recorded every this many optimisation steps (plus at
/// step zero and at the final step).
pub const VAL_EVERY: usize = 100;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning rate for the degrees-of-freedom group (never decayed).
    pub dof_learning_rate: f64,
    pub seed: u64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 512,
            learning_rate: 1e-5,
            weight_decay: 1e-6,
            dof_learning_rate: 0.01,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::validation("steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be positive"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("dof_learning_rate", self.dof_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::validation(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::validation(format!(
                    "grad_clip must be positive when set, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One recorded point of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    /// NLL of the step's minibatch (for step 0: of the first batch-sized
    /// block of the training set, before any update).
    pub train_nll: f64,
    /// NLL over the full validation set.
    pub val_nll: f64,
}

/// Training curve plus the best-validation summary. After [`fit`] returns,
/// the model parameters hold the state recorded at `best_step`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
    pub best_step: usize,
    pub best_val_nll: f64,
}

/// Scales every stored gradient so their joint L2 norm does not exceed
/// `max_norm`. Parameters without a gradient are untouched.
pub fn grad_clip_apply(params: &[Parameter], max_norm: f64) -> Result<()> {
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(Error::validation(format!(
            "gradient clip norm must be positive, got {max_norm}"
        )));
    }
    let mut sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for p in params {
            p.node().scale_grad(c);
        }
    }
    Ok(())
}

struct AdamSlot {
    param: Parameter,
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay applied per slot.
struct Adam {
    slots: Vec<AdamSlot>,
    t: u32,
}

impl Adam {
    fn new(groups: &[(Parameter, f64, f64)]) -> Self {
        let slots = groups
            .iter()
            .map(|(p, lr, wd)| AdamSlot {
                param: p.clone(),
                lr: *lr,
                weight_decay: *wd,
                m: vec![0.0; p.numel()],
                v: vec![0.0; p.numel()],
            })
            .collect();
        Adam { slots, t: 0 }
    }

    fn step(&mut self) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for slot in &mut self.slots {
            let Some(grad) = slot.param.grad() else {
                continue;
            };
            let value = slot.param.value();
            let shape = value.shape().to_vec();
            let mut data = value.into_data();
            let g = grad.data();
            for i in 0..data.len() {
                slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * g[i];
                slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -=
                    slot.lr * (m_hat / (v_hat.sqrt() + EPS) + slot.weight_decay * data[i]);
            }
            slot.param.set_value(Tensor::new(shape, data)?);
        }
        Ok(())
    }
}

fn gather_rows(data: &Tensor, rows: &[usize], dim: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len() * dim);
    for &i in rows {
        out.extend_from_slice(data.row(i));
    }
    Tensor::matrix(rows.len(), dim, out)
}

fn mean_nll(model: &FlowModel, data: &Tensor) -> Result<f64> {
    no_grad(|| {
        let lp = model.log_prob(data)?;
        Ok(-lp.value().mean_all())
    })
}

/// Trains `model` by stochastic maximum likelihood.
///
/// Three parameter groups share one Adam state: conditioner and linear
/// weights (`learning_rate`, decayed), remaining transform parameters
/// (`learning_rate`, not decayed), and trainable degrees of freedom
/// (`dof_learning_rate`, never decayed). Minibatches are drawn by epoch
/// shuffling with a fixed seed; incomplete trailing batches are dropped.
///
/// The train/validation NLL is recorded at step 0, every [`VAL_EVERY`]
/// steps, and at the final step. When training finishes the parameters are
/// reset to the recorded state with the lowest validation NLL. A non-finite
/// loss or validation NLL aborts training: the best recorded state is
/// restored and a non-finite error describing the failing step is returned.
pub fn fit(
    model: &FlowModel,
    train: &Tensor,
    val: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let (n_train, d_train) = train.dims2("training data")?;
    let (n_val, d_val) = val.dims2("validation data")?;
    if d_train != model.dim() || d_val != model.dim() {
        return Err(Error::validation(format!(
            "model dimension {} does not match data ({} train / {} val columns)",
            model.dim(),
            d_train,
            d_val
        )));
    }
    if n_val == 0 {
        return Err(Error::validation("validation set is empty"));
    }
    if cfg.batch_size > n_train {
        return Err(Error::validation(format!(
            "batch size {} exceeds the {} training rows",
            cfg.batch_size, n_train
        )));
    }
    if !train.all_finite() || !val.all_finite() {
        return Err(Error::NonFinite(
            "training or validation data contains non-finite values".to_string(),
        ));
    }

    let mut groups: Vec<(Parameter, f64, f64)> = model
        .transform_parameters()
        .into_iter()
        .map(|s| {
            let wd = if s.weight_decay { cfg.weight_decay } else { 0.0 };
            (s.param, cfg.learning_rate, wd)
        })
        .collect();
    groups.extend(
        model
            .dof_parameters()
            .into_iter()
            .map(|p| (p, cfg.dof_learning_rate, 0.0)),
    );
    let params: Vec<Parameter> = groups.iter().map(|(p, _, _)| p.clone()).collect();
    let mut adam = Adam::new(&groups);

    let snapshot = |params: &[Parameter]| -> Vec<Tensor> {
        params.iter().map(|p| p.value()).collect()
    };
    let restore = |params: &[Parameter], snap: &[Tensor]| {
        for (p, s) in params.iter().zip(snap) {
            p.set_value(s.clone());
        }
    };

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<usize> = (0..n_train).collect();
    let mut cursor = n_train; // force a shuffle before the first batch

    let first_block: Vec<usize> = (0..cfg.batch_size).collect();
    let train0 = mean_nll(model, &gather_rows(train, &first_block, d_train)?)?;
    let val0 = mean_nll(model, val)?;
    if !val0.is_finite() || !train0.is_finite() {
        return Err(Error::NonFinite(format!(
            "initial NLL is non-finite before training (train {train0}, val {val0})"
        )));
    }
    let mut entries = vec![HistoryEntry {
        step: 0,
        train_nll: train0,
        val_nll: val0,
    }];
    let mut best_snap = snapshot(&params);
    let mut best_val = val0;
    let mut best_step = 0usize;

    for step in 1..=cfg.steps {
        if cursor + cfg.batch_size > n_train {
            indices.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = gather_rows(train, &indices[cursor..cursor + cfg.batch_size], d_train)?;
        cursor += cfg.batch_size;

        for p in &params {
            p.zero_grad();
        }
        let lp = match model.log_prob(&batch) {
            Ok(node) => node,
            Err(Error::NonFinite(msg)) => {
                restore(&params, &best_snap);
                return Err(Error::NonFinite(format!(
                    "training aborted at step {step}: {msg}; \
                     parameters restored to the best recorded state (step {best_step})"
                )));
            }
            Err(e) => return Err(e),
        };
        let loss = lp.mean_all().neg();
        let loss_val = loss.scalar_value()?;
        if !loss_val.is_finite() {
            restore(&params, &best_snap);
            return Err(Error::NonFinite(format!(
                "training loss became non-finite at step {step}; \
                 parameters restored to the best recorded state (step {best_step})"
            )));
        }
        loss.backward()?;
        if let Some(max_norm) = cfg.grad_clip {
            grad_clip_apply(&params, max_norm)?;
        }
        adam.step()?;

        if step % VAL_EVERY == 0 || step == cfg.steps {
            let val_nll = match mean_nll(model, val) {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    restore(&params, &best_snap);
                    return Err(Error::NonFinite(format!(
                        "validation failed at step {step}: {msg}; \
                         parameters restored to the best recorded state (step {best_step})"
                    )));
                }
                Err(e) => return Err(e),
            };
            if !val_nll.is_finite() {
                restore(&params, &best_snap);
                return Err(Error::NonFinite(format!(
                    "validation NLL became non-finite at step {step}; \
                     parameters restored to the best recorded state (step {best_step})"
                )));
            }
            entries.push(HistoryEntry {
                step,
                train_nll: loss_val,
                val_nll,
            });
            if val_nll < best_val {
                best_val = val_nll;
                best_step = step;
                best_snap = snapshot(&params);
            }
        }
    }

    restore(&params, &best_snap);
    Ok(TrainHistory {
        entries,
        best_step,
        best_val_nll: best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Node;

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = TrainConfig {
            grad_clip: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn clipping_scales_the_joint_gradient_to_the_requested_norm() {
        let a = Parameter::new("a", Tensor::vector(vec![3.0]));
        let b = Parameter::new("b", Tensor::vector(vec![4.0]));
        // loss = 3a + 4b has gradient (3, 4), norm 5.
        let loss = a
            .node()
            .scale(3.0)
            .add(&b.node().scale(4.0))
            .unwrap()
            .sum_all();
        loss.backward().unwrap();
        let params = [a.clone(), b.clone()];
        grad_clip_apply(&params, 1.0).unwrap();
        let ga = a.grad().unwrap().data()[0];
        let gb = b.grad().unwrap().data()[0];
        let norm = (ga * ga + gb * gb).sqrt();
        assert!((norm - 1.0).abs() < 1e-12, "clipped norm {norm}");
        assert!((ga - 0.6).abs() < 1e-12 && (gb - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clipping_below_threshold_is_a_no_op() {
        let a = Parameter::new("a", Tensor::vector(vec![2.0]));
        let loss = a.node().scale(0.5).sum_all();
        loss.backward().unwrap();
        grad_clip_apply(std::slice::from_ref(&a), 10.0).unwrap();
        assert_eq!(a.grad().unwrap().data()[0], 0.5);
    }

    #[test]
    fn adam_drives_a_quadratic_to_its_minimum() {
        let p = Parameter::new("p", Tensor::vector(vec![5.0, -3.0]));
        let target = Node::constant(Tensor::vector(vec![1.0, 2.0]));
        let mut adam = Adam::new(&[(p.clone(), 0.05, 0.0)]);
        for _ in 0..2000 {
            p.zero_grad();
            let diff = p.node().sub(&target).unwrap();
            let loss = diff.mul(&diff).unwrap().sum_all();
            loss.backward().unwrap();
            adam.step().unwrap();
        }
        let v = p.value();
        assert!((v.data()[0] - 1.0).abs() < 1e-3, "got {:?}", v.data());
        assert!((v.data()[1] - 2.0).abs() < 1e-3, "got {:?}", v.data());
    }

    #[test]
    fn decoupled_decay_shrinks_without_touching_the_gradient_path() {
        // With zero gradient, one Adam step multiplies the value by
        // (1 - lr * wd) exactly.
        let p = Parameter::new("p", Tensor::vector(vec![2.0]));
        let loss = p.node().scale(0.0).sum_all();
        loss.backward().unwrap();
        let mut adam = Adam::new(&[(p.clone(), 0.1, 0.5)]);
        adam.step().unwrap();
        let got = p.value().data()[0];
        assert!((got - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12, "got {got}");
    }
}
