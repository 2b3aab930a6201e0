//! Shared fixtures for the benchmarks: one mid-sized synthetic scene plus a
//! model sized like the training default.

use rgf_core::nets::{ModelDims, ModelParams, SceneTensor};
use rgf_core::synthgen::{generate_scene, oracle_keypoints, SceneParams, SyntheticScene};
use rgf_core::Point;

pub struct Fixture {
    pub scene: SyntheticScene,
    pub keypoints: Vec<Point>,
    pub gt_edges: Vec<(u32, u32)>,
    pub params: ModelParams,
    pub tensor: SceneTensor,
}

pub fn fixture() -> Fixture {
    let scene = generate_scene(17, &SceneParams::default()).expect("scene generates");
    let (keypoints, gt_edges) =
        oracle_keypoints(&scene.gt, scene.seed, 8, 40.0, 6.0).expect("keypoints extract");
    let dims = ModelDims::default();
    let params = ModelParams::init(&dims, 17).expect("params init");
    let tensor = SceneTensor::new(&scene.image, &keypoints, &dims);
    Fixture { scene, keypoints, gt_edges, params, tensor }
}
