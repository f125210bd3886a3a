#![allow(dead_code)]

use std::path::{Path, PathBuf};

use base64::Engine;
use ndarray::Array3;

use maskground::checkpoint::{model_id, Checkpoint};
use maskground::model::{Model, ModelConfig};
use maskground::synth::{generate_scene, SceneConfig};

pub const WORDS: [&str; 6] = ["background", "red", "circle", "blue", "square", "green"];

pub fn tiny_model() -> Model {
    let vocab = WORDS.iter().map(|w| w.to_string()).collect();
    Model::new(ModelConfig { image_size: 64, ..ModelConfig::tiny() }, vocab, 7).unwrap()
}

/// Writes a tiny untrained checkpoint and returns its path and model id.
pub fn write_checkpoint(dir: &Path) -> (PathBuf, String) {
    let bytes = Checkpoint::from_model(tiny_model()).to_bytes().unwrap();
    let path = dir.join("tiny.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    (path, model_id(&bytes))
}

pub fn scene_image(index: u64) -> Array3<f32> {
    generate_scene(&SceneConfig::default(), index).unwrap().image
}

pub fn png_bytes(image: &Array3<f32>) -> Vec<u8> {
    maskground_cli::imaging::encode_png(&maskground::data::to_rgb8(image))
}

pub fn png_b64(image: &Array3<f32>) -> String {
    base64::engine::general_purpose::STANDARD.encode(png_bytes(image))
}

pub fn png_b64_url(image: &Array3<f32>) -> String {
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(png_bytes(image))
}
