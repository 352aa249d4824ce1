use crate::geometry::{decoupled_log, Pose, Twist};

/// Decoupled pose-based velocity: `v = λ·t_err`, `ω = λ·log(R_cᵀR_t)`, both
/// in the current camera frame. Zero exactly at the goal.
pub fn teacher_velocity(current: &Pose, target: &Pose, gain: f64) -> Twist {
    let (t_err, r_err) = decoupled_log(current, target);
    Twist::new(t_err * gain, r_err * gain)
}
