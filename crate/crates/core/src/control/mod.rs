//! Velocity controllers: the classical image-based law, the pose-based
//! teacher, and the learned network.

pub mod ibvs;
pub mod net;
pub mod teacher;
pub mod train;

use std::sync::Arc;

use crate::error::Result;
use crate::geometry::{CameraIntrinsics, Pose, Twist};
use crate::nn::ServoNet;
use crate::observation::ObservationPair;

pub use ibvs::{ibvs_velocity, IbvsConfig, IbvsDepth, IbvsOutput};
pub use net::NetController;
pub use teacher::teacher_velocity;
pub use train::{train, LossCurve, LossWeights, OnPolicyConfig, TrainConfig, TrainState};

/// Everything a controller may look at during one step. Only the teacher
/// reads the poses.
pub struct StepContext<'a> {
    pub pair: &'a ObservationPair,
    pub intrinsics: &'a CameraIntrinsics,
    pub current: &'a Pose,
    pub target: &'a Pose,
}

pub trait Controller {
    fn name(&self) -> String;
    /// Clears any per-episode state.
    fn reset(&mut self);
    fn velocity(&mut self, ctx: &StepContext<'_>) -> Result<Twist>;
}

/// Always commands zero velocity.
pub struct ZeroController;

impl Controller for ZeroController {
    fn name(&self) -> String {
        "zero".into()
    }
    fn reset(&mut self) {}
    fn velocity(&mut self, _: &StepContext<'_>) -> Result<Twist> {
        Ok(Twist::zero())
    }
}

/// Pose-based oracle controller (reads true poses).
pub struct TeacherController {
    pub gain: f64,
}

impl Controller for TeacherController {
    fn name(&self) -> String {
        "teacher".into()
    }
    fn reset(&mut self) {}
    fn velocity(&mut self, ctx: &StepContext<'_>) -> Result<Twist> {
        Ok(teacher_velocity(ctx.current, ctx.target, self.gain))
    }
}

pub struct IbvsController {
    pub config: IbvsConfig,
}

impl Controller for IbvsController {
    fn name(&self) -> String {
        "ibvs".into()
    }
    fn reset(&mut self) {}
    fn velocity(&mut self, ctx: &StepContext<'_>) -> Result<Twist> {
        Ok(ibvs_velocity(ctx.pair, ctx.intrinsics, &self.config)?.twist)
    }
}

/// A recipe for building fresh controller instances, one per episode worker.
#[derive(Clone)]
pub enum ControllerSpec {
    Zero,
    Teacher { gain: f64 },
    Ibvs(IbvsConfig),
    Net { label: String, model: Arc<ServoNet> },
}

impl ControllerSpec {
    pub fn label(&self) -> String {
        match self {
            ControllerSpec::Zero => "zero".into(),
            ControllerSpec::Teacher { .. } => "teacher".into(),
            ControllerSpec::Ibvs(_) => "ibvs".into(),
            ControllerSpec::Net { label, .. } => label.clone(),
        }
    }

    pub fn build(&self) -> Box<dyn Controller + '_> {
        match self {
            ControllerSpec::Zero => Box::new(ZeroController),
            ControllerSpec::Teacher { gain } => Box::new(TeacherController { gain: *gain }),
            ControllerSpec::Ibvs(config) => Box::new(IbvsController { config: config.clone() }),
            ControllerSpec::Net { label, model } => Box::new(NetController::new(model, label.clone())),
        }
    }
}
