//! Procedural household-object point clouds used when no model directory
//! is supplied. Twenty-one shapes of tabletop scale (2–25 cm).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Vec3;
use crate::scene::ObjectModel;

const SURFACE_SAMPLES: usize = 1500;

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Box { size: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Frustum { r_bottom: f64, r_top: f64, height: f64 },
    Ellipsoid { radii: [f64; 3] },
    Torus { major: f64, minor: f64, arc: f64 },
    Bowl { radius: f64 },
}

impl Primitive {
    fn area(&self) -> f64 {
        match *self {
            Primitive::Box { size: [a, b, c] } => 2.0 * (a * b + b * c + a * c),
            Primitive::Cylinder { radius, height } => 2.0 * PI * radius * (radius + height),
            Primitive::Frustum { r_bottom, r_top, height } => {
                let slant = ((r_bottom - r_top).powi(2) + height * height).sqrt();
                PI * (r_bottom + r_top) * slant + PI * (r_bottom * r_bottom + r_top * r_top)
            }
            Primitive::Ellipsoid { radii: [a, b, c] } => {
                // Thomsen's approximation
                let p = 1.6075;
                4.0 * PI * (((a * b).powf(p) + (a * c).powf(p) + (b * c).powf(p)) / 3.0).powf(1.0 / p)
            }
            Primitive::Torus { major, minor, arc } => arc * major * 2.0 * PI * minor,
            Primitive::Bowl { radius } => 2.0 * PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        match *self {
            Primitive::Box { size } => {
                let [a, b, c] = size;
                let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
                let face = pick_weighted(rng, &areas);
                let u: f64 = rng.random_range(-0.5..0.5);
                let v: f64 = rng.random_range(-0.5..0.5);
                let s = if face % 2 == 0 { 0.5 } else { -0.5 };
                match face / 2 {
                    0 => Vec3::new(s * a, u * b, v * c),
                    1 => Vec3::new(u * a, s * b, v * c),
                    _ => Vec3::new(u * a, v * b, s * c),
                }
            }
            Primitive::Cylinder { radius, height } => Primitive::Frustum {
                r_bottom: radius,
                r_top: radius,
                height,
            }
            .sample(rng),
            Primitive::Frustum { r_bottom, r_top, height } => {
                let slant = ((r_bottom - r_top).powi(2) + height * height).sqrt();
                let areas = [PI * (r_bottom + r_top) * slant, PI * r_bottom * r_bottom, PI * r_top * r_top];
                let ang = rng.random_range(0.0..2.0 * PI);
                match pick_weighted(rng, &areas) {
                    0 => {
                        // area-uniform along the slant
                        let w: f64 = rng.random();
                        let t = if (r_top - r_bottom).abs() < 1e-12 {
                            w
                        } else {
                            let (a0, a1) = (r_bottom * r_bottom, r_top * r_top);
                            ((a0 + w * (a1 - a0)).sqrt() - r_bottom) / (r_top - r_bottom)
                        };
                        let r = r_bottom + t * (r_top - r_bottom);
                        Vec3::new(r * ang.cos(), r * ang.sin(), (t - 0.5) * height)
                    }
                    cap => {
                        let rmax = if cap == 1 { r_bottom } else { r_top };
                        let r = rmax * rng.random::<f64>().sqrt();
                        let z = if cap == 1 { -0.5 * height } else { 0.5 * height };
                        Vec3::new(r * ang.cos(), r * ang.sin(), z)
                    }
                }
            }
            Primitive::Ellipsoid { radii } => {
                let d = crate::geometry::random_unit_vector(rng);
                Vec3::new(d.x * radii[0], d.y * radii[1], d.z * radii[2])
            }
            Primitive::Torus { major, minor, arc } => {
                loop {
                    let u = rng.random_range(0.0..arc);
                    let v = rng.random_range(0.0..2.0 * PI);
                    // rejection keeps the surface density uniform
                    let w = (major + minor * v.cos()) / (major + minor);
                    if rng.random::<f64>() <= w {
                        let r = major + minor * v.cos();
                        return Vec3::new(r * u.cos(), r * u.sin(), minor * v.sin());
                    }
                }
            }
            Primitive::Bowl { radius } => {
                let mut d = crate::geometry::random_unit_vector(rng);
                d.z = -d.z.abs();
                d * radius
            }
        }
    }
}

fn pick_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn composite(parts: &[(Primitive, Vec3)], seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let areas: Vec<f64> = parts.iter().map(|(p, _)| p.area()).collect();
    (0..SURFACE_SAMPLES)
        .map(|_| {
            let k = pick_weighted(&mut rng, &areas);
            parts[k].0.sample(&mut rng) + parts[k].1
        })
        .collect()
}

/// The built-in library of 21 object models.
pub fn builtin_models() -> Vec<ObjectModel> {
    use Primitive::*;
    let o = Vec3::zeros();
    let specs: Vec<(&str, Vec<(Primitive, Vec3)>)> = vec![
        ("can_large", vec![(Cylinder { radius: 0.05, height: 0.14 }, o)]),
        ("box_cereal", vec![(Box { size: [0.16, 0.21, 0.07] }, o)]),
        ("box_sugar", vec![(Box { size: [0.09, 0.17, 0.04] }, o)]),
        ("can_soup", vec![(Cylinder { radius: 0.033, height: 0.10 }, o)]),
        ("bottle_squeeze", vec![(Ellipsoid { radii: [0.05, 0.03, 0.09] }, o)]),
        ("can_flat", vec![(Cylinder { radius: 0.043, height: 0.033 }, o)]),
        ("box_pudding", vec![(Box { size: [0.11, 0.09, 0.035] }, o)]),
        ("box_gelatin", vec![(Box { size: [0.085, 0.07, 0.03] }, o)]),
        ("can_meat", vec![(Box { size: [0.10, 0.06, 0.08] }, o)]),
        ("banana", vec![(Torus { major: 0.08, minor: 0.018, arc: 2.0 * PI / 3.0 }, o)]),
        ("pitcher", vec![(Frustum { r_bottom: 0.08, r_top: 0.06, height: 0.22 }, o)]),
        ("bottle_cleanser", vec![(Ellipsoid { radii: [0.05, 0.035, 0.125] }, o)]),
        ("bowl", vec![(Bowl { radius: 0.08 }, o)]),
        (
            "mug",
            vec![
                (Cylinder { radius: 0.04, height: 0.08 }, o),
                (Torus { major: 0.025, minor: 0.006, arc: 2.0 * PI }, Vec3::new(0.055, 0.0, 0.0)),
            ],
        ),
        (
            "drill",
            vec![
                (Box { size: [0.05, 0.18, 0.06] }, Vec3::new(0.0, 0.0, 0.06)),
                (Cylinder { radius: 0.02, height: 0.12 }, Vec3::new(0.0, 0.05, -0.03)),
            ],
        ),
        ("block_wood", vec![(Box { size: [0.085, 0.085, 0.20] }, o)]),
        ("scissors", vec![(Box { size: [0.20, 0.06, 0.012] }, o)]),
        ("marker", vec![(Cylinder { radius: 0.009, height: 0.12 }, o)]),
        (
            "clamp_small",
            vec![
                (Box { size: [0.12, 0.03, 0.035] }, Vec3::new(0.0, 0.03, 0.0)),
                (Box { size: [0.03, 0.09, 0.035] }, Vec3::new(-0.045, 0.0, 0.0)),
            ],
        ),
        (
            "clamp_large",
            vec![
                (Box { size: [0.20, 0.04, 0.035] }, Vec3::new(0.0, 0.06, 0.0)),
                (Box { size: [0.04, 0.16, 0.035] }, Vec3::new(-0.08, 0.0, 0.0)),
            ],
        ),
        ("brick_foam", vec![(Box { size: [0.05, 0.075, 0.05] }, o)]),
    ];
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (name, parts))| ObjectModel::new(name, composite(&parts, 0x5eed_0000 + i as u64)).expect("non-empty model"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_is_stable() {
        let a = builtin_models();
        let b = builtin_models();
        assert_eq!(a.len(), 21);
        assert_eq!(a, b);
        for m in &a {
            assert_eq!(m.points.len(), SURFACE_SAMPLES);
            let extent = m.points.iter().map(|p| p.amax()).fold(0.0, f64::max);
            assert!(extent > 0.01 && extent < 0.2, "{} extent {extent}", m.id);
        }
    }
}
