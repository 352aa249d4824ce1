//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use servo_core::geometry::{sample_pose_pair, CameraIntrinsics, Level, Pose};
use servo_core::observation::{observe, DepthProvider, ObservationPair};
use servo_core::scene::{Scene, SceneConfig, SceneGenerator};
use servo_core::shapes::builtin_models;
use servo_core::visibility::HprParams;

/// A default scene with a level-S pose pair and its observation.
pub struct Fixture {
    pub scene: Scene,
    pub current: Pose,
    pub target: Pose,
    pub pair: ObservationPair,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generator = SceneGenerator::new(builtin_models(), Default::default(), SceneConfig::default()).expect("default generator");
    let scene = generator.generate(&mut rng);
    let (current, target) = sample_pose_pair(&generator.region, Level::S, &mut rng);
    let intr = CameraIntrinsics::default();
    let (hpr, provider) = (HprParams::default(), DepthProvider::true_depth());
    let a = observe(&scene, &current, &intr, &hpr, &provider, &mut rng);
    let b = observe(&scene, &target, &intr, &hpr, &provider, &mut rng);
    Fixture {
        scene,
        current,
        target,
        pair: ObservationPair::from_frames(a, b),
    }
}
