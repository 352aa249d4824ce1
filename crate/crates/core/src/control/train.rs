//! Supervised training of the servo network on teacher rollouts, with the
//! recurrent state unrolled over each recorded window.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{aggregate_on_policy, Dataset, Episode};
use crate::error::{Error, Result};
use crate::geometry::Twist;
use crate::graph::build_graph;
use crate::nn::{GraphIndex, Optimizer, OptimizerKind, ParamStore, ServoNet, Tape, Tensor, ERROR_SCALE_REF};
use crate::observation::{augment, AugmentationParams};
use crate::seeding::{stream_rng, tag};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the squared twist error.
    pub magnitude: f64,
    /// Weight of `1 − cos` per linear/angular branch.
    pub direction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            magnitude: 1.0,
            direction: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the configured epochs.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Heavy-ball momentum, or Adam's first-moment decay.
    pub momentum: f64,
    pub schedule: Schedule,
    /// Episodes per parameter update.
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub augmentation: AugmentationParams,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Branches whose target norm is below this skip the direction term.
    pub direction_eps: f64,
    pub on_policy: OnPolicyConfig,
    pub seed: u64,
}

/// Dataset aggregation after the teacher phase: each round rolls the current
/// network out on every training scene, records the states it reaches with
/// teacher labels, and trains on the grown dataset with a fresh optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnPolicyConfig {
    pub rounds: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for OnPolicyConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            epochs: 6,
            lr: 0.001,
        }
    }
}

/// Position of a global epoch within the phase sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Phase {
    /// 0 for the teacher phase, `r` for on-policy round `r`.
    index: usize,
    local_epoch: usize,
    epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 0.003,
            momentum: 0.9,
            schedule: Schedule::Cosine,
            batch_size: 16,
            epochs: 12,
            weights: LossWeights::default(),
            augmentation: AugmentationParams {
                mismatch_ratio: 0.0,
                dropout_ratio: 0.1,
                noise_amplitude: 0.005,
            },
            grad_clip: 5.0,
            direction_eps: 1e-3,
            on_policy: OnPolicyConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum) && self.batch_size > 0) {
            return Err(Error::InvalidArgument("train config needs lr >= 0, momentum in [0,1), batch > 0".into()));
        }
        if !(self.on_policy.lr >= 0.0) {
            return Err(Error::InvalidArgument("on-policy lr must be non-negative".into()));
        }
        if self.weights.magnitude < 0.0 || self.weights.direction < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::InvalidArgument("loss weights and clip must be non-negative".into()));
        }
        self.augmentation.validate()
    }

    /// Teacher epochs plus every on-policy round. Rounds need a trained
    /// driver, so none run when the teacher phase is empty.
    pub fn total_epochs(&self) -> usize {
        if self.epochs == 0 {
            0
        } else {
            self.epochs + self.on_policy.rounds * self.on_policy.epochs
        }
    }

    fn phase(&self, epoch: usize) -> Phase {
        if epoch < self.epochs || self.on_policy.epochs == 0 {
            return Phase {
                index: 0,
                local_epoch: epoch,
                epochs: self.epochs,
            };
        }
        let k = epoch - self.epochs;
        Phase {
            index: 1 + k / self.on_policy.epochs,
            local_epoch: k % self.on_policy.epochs,
            epochs: self.on_policy.epochs,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let phase = self.phase(epoch);
        let base = if phase.index == 0 { self.lr } else { self.on_policy.lr };
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let f = phase.local_epoch as f64 / phase.epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * f).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub epoch: usize,
    pub loss: f64,
    pub magnitude: f64,
    pub direction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,magnitude,direction\n");
        for p in &self.points {
            s.push_str(&format!("{},{:.9e},{:.9e},{:.9e}\n", p.epoch, p.loss, p.magnitude, p.direction));
        }
        s
    }
}

/// Optimizer state and progress, enough to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optimizer: Optimizer,
    pub epochs_completed: usize,
    pub curve: LossCurve,
    /// Parameters that drove each completed on-policy round; replaying them
    /// rebuilds the aggregated dataset on resume.
    pub drivers: Vec<ParamStore>,
}

impl TrainState {
    pub fn new(model: &ServoNet, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: Optimizer::new(&model.store, cfg.optimizer, cfg.lr, cfg.momentum),
            epochs_completed: 0,
            curve: LossCurve::default(),
            drivers: Vec::new(),
        }
    }
}

/// Loss terms of one prediction and the gradient with respect to it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub magnitude: f64,
    pub direction: f64,
    pub grad: [f64; 6],
}

pub fn step_loss(pred: &[f64; 6], target: &Twist, weights: &LossWeights, eps: f64) -> StepLoss {
    let y = target.to_array();
    let mut grad = [0.0; 6];
    let mut magnitude = 0.0;
    for k in 0..6 {
        let e = pred[k] - y[k];
        magnitude += e * e;
        grad[k] = 2.0 * weights.magnitude * e;
    }
    let mut direction = 0.0;
    for b in [0usize, 3] {
        let (p, t) = (&pred[b..b + 3], &y[b..b + 3]);
        let ny = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ny < eps {
            continue;
        }
        let np = (p.iter().map(|v| v * v).sum::<f64>() + 1e-16).sqrt();
        let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
        direction += 1.0 - dot / (np * ny);
        for k in 0..3 {
            let dcos = t[k] / (np * ny) - dot * p[k] / (np * np * np * ny);
            grad[b + k] -= weights.direction * dcos;
        }
    }
    StepLoss {
        loss: weights.magnitude * magnitude + weights.direction * direction,
        magnitude,
        direction,
        grad,
    }
}

/// Floor on the RMS image error when rescaling the loss of a scaled model.
const MIN_LOSS_ERROR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default)]
struct Totals {
    loss: f64,
    magnitude: f64,
    direction: f64,
    steps: usize,
}

/// Forward/backward over one episode window. Returns per-parameter
/// gradients of the mean step loss.
fn episode_gradients(
    model: &ServoNet,
    episode: &Episode,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
    totals: &mut Totals,
) -> Result<Vec<Tensor>> {
    let mut rng = stream_rng(cfg.seed, &[tag::AUGMENT, epoch as u64, index as u64]);
    let mut tape = Tape::new();
    let p = model.store.bind(&mut tape);
    let mut h = tape.constant(model.zero_hidden());
    let mut outputs = Vec::with_capacity(episode.steps.len());
    for (s, step) in episode.steps.iter().enumerate() {
        let pair = augment(&episode.pair(s), &cfg.augmentation, &mut rng);
        let gi = GraphIndex::new(&build_graph(&pair)?);
        let out = model.forward(&mut tape, &p, &gi, h)?;
        h = out.hidden;
        // scaled models are fit on the head's own scale, so steps near the
        // goal weigh as much as distant ones
        let scale = if model.config.error_scaling {
            ERROR_SCALE_REF / gi.error_rms.max(MIN_LOSS_ERROR)
        } else {
            1.0
        };
        outputs.push((out.twist, step.teacher, scale));
    }
    let n = outputs.len() as f64;
    let mut seeds = Vec::with_capacity(outputs.len());
    for (var, target, scale) in outputs {
        let v = tape.value(var).data();
        let pred = [v[0], v[1], v[2], v[3], v[4], v[5]].map(|x| x * scale);
        let mut l = step_loss(&pred, &target.scale(scale), &cfg.weights, cfg.direction_eps);
        l.grad.iter_mut().for_each(|g| *g *= scale);
        if !l.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, episode {index}")));
        }
        totals.loss += l.loss;
        totals.magnitude += l.magnitude;
        totals.direction += l.direction;
        totals.steps += 1;
        seeds.push((var, Tensor::row_vector(l.grad.iter().map(|g| g / n).collect())));
    }
    let grads = tape.backward(&seeds);
    Ok(model
        .store
        .tensors()
        .iter()
        .zip(p.vars())
        .map(|(t, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect())
}

/// Runs `cfg.epochs − state.epochs_completed` more epochs. `on_epoch` sees
/// each new curve point as it is produced.
pub fn train_with(
    model: &mut ServoNet,
    data: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&LossPoint),
) -> Result<TrainState> {
    cfg.validate()?;
    if data.episodes.is_empty() {
        return Err(Error::InvalidArgument("training needs a non-empty dataset".into()));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(model, cfg));
    state.optimizer.momentum = cfg.momentum;
    let mut working = std::borrow::Cow::Borrowed(data);
    for (r, store) in state.drivers.iter().enumerate() {
        let driver = ServoNet {
            store: store.clone(),
            ..model.clone()
        };
        aggregate_on_policy(working.to_mut(), &driver, r as u64 + 1)?;
    }
    for epoch in state.epochs_completed..cfg.total_epochs() {
        let phase = cfg.phase(epoch);
        if phase.index > state.drivers.len() {
            state.drivers.push(model.store.clone());
            aggregate_on_policy(working.to_mut(), model, phase.index as u64)?;
            state.optimizer = Optimizer::new(&model.store, cfg.optimizer, cfg.on_policy.lr, cfg.momentum);
        }
        let data = working.as_ref();
        let mut order: Vec<usize> = (0..data.episodes.len()).collect();
        state.optimizer.lr = cfg.lr_at(epoch);
        order.shuffle(&mut stream_rng(cfg.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut totals = Totals::default();
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let g = episode_gradients(model, &data.episodes[i], cfg, epoch, i, &mut totals)?;
                match &mut sum {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
                    None => sum = Some(g),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt() * scale;
            if !norm.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at epoch {epoch}")));
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            grads.iter_mut().for_each(|g| g.scale_in_place(scale * clip));
            state.optimizer.step(&mut model.store, &grads);
        }
        if !model.store.is_finite() {
            return Err(Error::Numerical(format!("parameters diverged at epoch {epoch}")));
        }
        let n = totals.steps.max(1) as f64;
        let point = LossPoint {
            epoch,
            loss: totals.loss / n,
            magnitude: totals.magnitude / n,
            direction: totals.direction / n,
        };
        state.curve.points.push(point);
        state.epochs_completed = epoch + 1;
        on_epoch(&point);
    }
    Ok(state)
}

pub fn train(model: &mut ServoNet, data: &Dataset, cfg: &TrainConfig) -> Result<LossCurve> {
    Ok(train_with(model, data, cfg, None, |_| {})?.curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DataConfig};
    use crate::nn::ModelConfig;
    use crate::shapes::builtin_models;

    fn tiny_data(scenes: usize, window: usize) -> Dataset {
        let cfg = DataConfig {
            scenes,
            window,
            ..Default::default()
        };
        generate_dataset(builtin_models(), &cfg, 3).unwrap()
    }

    fn small_model(seed: u64) -> ServoNet {
        let cfg = ModelConfig {
            d: 8,
            d_z: 4,
            hidden: 16,
            head_hidden: 16,
            ..Default::default()
        };
        ServoNet::new(cfg, seed).unwrap()
    }

    #[test]
    fn step_loss_gradient_matches_differences() {
        let w = LossWeights::default();
        let target = Twist::from_array([0.1, -0.2, 0.05, 0.3, 0.0, -0.1]);
        let pred = [0.2, 0.1, -0.1, -0.2, 0.4, 0.05];
        let g = step_loss(&pred, &target, &w, 1e-3).grad;
        for k in 0..6 {
            let (mut hi, mut lo) = (pred, pred);
            hi[k] += 1e-6;
            lo[k] -= 1e-6;
            let fd = (step_loss(&hi, &target, &w, 1e-3).loss - step_loss(&lo, &target, &w, 1e-3).loss) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-6, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn direction_term_skips_small_targets() {
        let w = LossWeights::default();
        let target = Twist::from_array([0.0, 0.0, 1e-4, 0.0, 0.2, 0.0]);
        let l = step_loss(&[0.0, 0.0, -1.0, 0.0, 0.2, 0.0], &target, &w, 1e-3);
        assert!(l.direction.abs() < 1e-12);
        let l = step_loss(&[0.0, 0.0, 0.0, 0.0, -0.2, 0.0], &target, &w, 1e-3);
        assert!((l.direction - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_data(3, 2);
        let mut model = small_model(1);
        let before = model.store.tensors().to_vec();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 2,
            on_policy: OnPolicyConfig { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        train(&mut model, &data, &cfg).unwrap();
        assert_eq!(model.store.tensors(), &before[..]);
    }

    #[test]
    fn fixed_seed_gives_identical_curves_and_resume_continues() {
        let data = tiny_data(4, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            augmentation: AugmentationParams {
                mismatch_ratio: 0.1,
                dropout_ratio: 0.1,
                noise_amplitude: 0.01,
            },
            on_policy: OnPolicyConfig { rounds: 0, ..Default::default() },
            ..Default::default()
        };
        let mut a = small_model(2);
        let mut b = small_model(2);
        let ca = train(&mut a, &data, &cfg).unwrap();
        let cb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a.store.tensors(), b.store.tensors());

        let mut c = small_model(2);
        let first = TrainConfig { epochs: 1, ..cfg.clone() };
        let state = train_with(&mut c, &data, &first, None, |_| {}).unwrap();
        let state = train_with(&mut c, &data, &cfg, Some(state), |_| {}).unwrap();
        assert_eq!(state.curve, ca);
        assert_eq!(c.store.tensors(), a.store.tensors());
    }

    #[test]
    fn overfits_ten_samples() {
        let data = tiny_data(10, 1);
        assert_eq!(data.total_steps(), 10);
        let mut model = small_model(4);
        let cfg = TrainConfig {
            schedule: Schedule::Constant,
            epochs: 400,
            batch_size: 10,
            grad_clip: 0.0,
            on_policy: OnPolicyConfig { rounds: 0, ..Default::default() },
            augmentation: AugmentationParams::none(),
            ..Default::default()
        };
        let curve = train(&mut model, &data, &cfg).unwrap();
        let last = curve.points.last().unwrap().loss;
        assert!(last < 1e-3, "final loss {last}, first {}", curve.points[0].loss);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut data = tiny_data(1, 1);
        data.episodes.clear();
        assert!(train(&mut small_model(0), &data, &TrainConfig::default()).is_err());
    }
}
