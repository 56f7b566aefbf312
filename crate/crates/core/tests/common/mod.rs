#![allow(dead_code)]

use dmv::anchors::AnchorConfig;
use dmv::backbone::BackboneConfig;
use dmv::data::{generate_synthetic, Sequence, SynthConfig};
use dmv::head::HeadConfig;
use dmv::memory::ValueConfig;
use dmv::model::{ModelConfig, Normalization};
use dmv::retrieval::{RetrievalConfig, RetrievalMode};

/// A model small enough for exhaustive finite differences.
pub fn tiny_config(mode: RetrievalMode) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { input_size: 32, widths: vec![4, 6, 8], strides: vec![2, 2, 2], key_channels: 6 },
        anchors: AnchorConfig { ratios: vec![0.5, 1.0, 2.0], base_size: 8.0, stride: 8.0, grid: 4, ..AnchorConfig::default() },
        value: ValueConfig { channels: 6, hidden: 6 },
        retrieval: RetrievalConfig { mode, k: 2, heads: 2, attn_width: 8, ffn_width: 8, mlp_width: 8 },
        head: HeadConfig { width: 6 },
        normalization: Normalization::default(),
    }
}

pub fn small_sequence(seed: u64, length: usize) -> Sequence {
    generate_synthetic(&SynthConfig { seed, length, width: 64, height: 64, target_size: [8.0, 12.0], ..SynthConfig::default() }).unwrap()
}
