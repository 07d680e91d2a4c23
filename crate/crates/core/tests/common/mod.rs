#![allow(dead_code)]
pub mod stub_http;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skybench::geometry::{quat_to_rotation, Pose, Rotation3, UnitQuaternion, Vec3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform on the sphere of unit quaternions (rejection from the 4-cube).
pub fn random_quat(rng: &mut impl Rng) -> UnitQuaternion {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            return UnitQuaternion::normalize(v[0], v[1], v[2], v[3]).unwrap();
        }
    }
}

pub fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
    quat_to_rotation(&random_quat(rng))
}

pub fn random_vec(rng: &mut impl Rng, scale: f64) -> Vec3 {
    Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

pub fn random_pose(rng: &mut impl Rng, scale: f64) -> Pose {
    Pose::new(random_rotation(rng), random_vec(rng, scale)).unwrap()
}

pub fn max_abs_diff(a: &Rotation3, b: &Rotation3) -> f64 {
    (a.matrix() - b.matrix()).abs().max()
}
