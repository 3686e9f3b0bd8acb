#![allow(dead_code)]

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use lomit::checkpoint::{self, Checkpoint};
use lomit::data::SyntheticConfig;
use lomit::imageio::{self, MaskRaster, Raster};
use lomit::networks::ModelBundle;
use lomit::training::TrainConfig;

pub const RES: u32 = 16;

pub fn tiny_config(dir: &Path) -> TrainConfig {
    let data = SyntheticConfig {
        count: 8,
        resolution: RES as i64,
        seed: 3,
        ..Default::default()
    };
    TrainConfig {
        batch_size: 2,
        iterations: 2,
        checkpoint_interval: 1,
        base_channels: 4,
        ..TrainConfig::synthetic(dir, data)
    }
}

pub fn tiny_checkpoint(dir: &Path) -> Checkpoint {
    let config = tiny_config(dir);
    let model = ModelBundle::new(config.architecture(), 11).unwrap();
    Checkpoint {
        iteration: 0,
        config,
        attribute_names: vec!["palette_b".into()],
        model,
        optimizer: None,
    }
}

pub fn write_tiny_checkpoint(dir: &Path, name: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    checkpoint::save_checkpoint(&tiny_checkpoint(dir), &path).unwrap();
    path
}

/// A smooth test pattern of the given size, varied by `phase`.
pub fn pattern(size: u32, phase: f32) -> Raster {
    let plane = (size * size) as usize;
    let mut pixels = vec![0f32; 3 * plane];
    for c in 0..3 {
        for i in 0..plane {
            let (y, x) = ((i as u32 / size) as f32, (i as u32 % size) as f32);
            pixels[c * plane + i] = ((x * 0.4 + y * 0.3 + c as f32 + phase).sin() * 0.8).clamp(-1.0, 1.0);
        }
    }
    Raster {
        height: size,
        width: size,
        pixels,
    }
}

pub fn png(r: &Raster) -> Vec<u8> {
    imageio::encode_image(r).unwrap()
}

pub fn mask_png(size: u32, value: impl Fn(u32, u32) -> f32) -> Vec<u8> {
    let values = (0..size * size).map(|i| value(i / size, i % size)).collect();
    imageio::encode_mask(&MaskRaster {
        height: size,
        width: size,
        values,
    })
    .unwrap()
}

pub fn b64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn unb64(s: &str) -> Vec<u8> {
    STANDARD.decode(s).unwrap()
}
