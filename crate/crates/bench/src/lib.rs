//! Fixtures shared by the criterion benchmarks in `benches/`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mapfuse_core::geometry::with_gicp_covariances;
use mapfuse_core::synth::{generate, Scenario, SynthParams, SyntheticScene};
use mapfuse_core::PointCloud;

/// Three walls and a tilted slab with GICP covariances.
pub fn corner_scene(seed: u64, per_plane: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(4 * per_plane);
    for _ in 0..per_plane {
        let (a, b) = (rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0));
        pts.push(Vector3::new(a, b, 0.0));
        pts.push(Vector3::new(a, 0.0, b * 0.6));
        pts.push(Vector3::new(0.0, a, b * 0.6));
        pts.push(Vector3::new(1.0 + a * 0.5, 2.0 + b * 0.3, 0.5 + 0.4 * a));
    }
    with_gicp_covariances(&PointCloud::new(pts).unwrap(), 10).unwrap()
}

pub fn two_loop(seed: u64) -> SyntheticScene {
    generate(&SynthParams::new(Scenario::TwoLoop, seed)).unwrap()
}
