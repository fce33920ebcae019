//! A miniature autoregressive vision-language transformer with full tracing.
//!
//! Visual tokens are linear embeddings of non-overlapping image patches and
//! are prepended to the text tokens. Each block is a pre-activation residual
//! block without normalization: single-head causal attention followed by a
//! GELU MLP. Activations are row vectors, so the write matrices `wo` and `w2`
//! multiply on the right and their column space is the residual stream.

mod fixture;
mod forward;

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VceError};
use crate::rng::GaussianStream;
use crate::tensor_store::{read_bundle, write_bundle, ManifestSummary, Tensor, TensorMap};

pub use fixture::{
    build_captioner, build_fixture, hadamard_pattern, plant_prior, random_scenes, render_scene,
    FixtureConfig, PlantedPrior, Scene, SceneOptions, DEFAULT_PROMPT,
};
pub use forward::{argmax, ForwardTrace, ResponseTrace};

/// Token id that terminates generation.
pub const END_TOKEN: u32 = 0;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    /// Number of visual tokens, one per patch.
    pub n_visual: usize,
    pub image_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 8,
            d_mlp: 64,
            n_visual: 16,
            image_channels: 1,
            image_height: 16,
            image_width: 16,
            patch_size: 4,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn patch_pixels(&self) -> usize {
        self.image_channels * self.patch_size * self.patch_size
    }

    pub fn image_pixels(&self) -> usize {
        self.image_channels * self.image_height * self.image_width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("d_mlp", self.d_mlp),
            ("n_visual", self.n_visual),
            ("image_channels", self.image_channels),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(VceError::Config(format!("{name} must be positive")));
        }
        if !self.image_height.is_multiple_of(self.patch_size) || !self.image_width.is_multiple_of(self.patch_size) {
            return Err(VceError::Config(format!(
                "patch size {} does not tile a {}x{} image",
                self.patch_size, self.image_height, self.image_width
            )));
        }
        if self.n_visual * self.patch_pixels() != self.image_pixels() {
            return Err(VceError::Config(format!(
                "{} visual tokens x {} patch pixels != {} image pixels",
                self.n_visual,
                self.patch_pixels(),
                self.image_pixels()
            )));
        }
        if self.max_seq_len <= self.n_visual {
            return Err(VceError::Config(
                "max_seq_len must leave room for text tokens".into(),
            ));
        }
        if self.vocab_size > 1 << 24 {
            return Err(VceError::Config(
                "token ids must be exactly representable as f32".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    /// Attention write matrix, D x D.
    pub wo: Array2<f32>,
    pub w1: Array2<f32>,
    /// MLP write matrix, F x D.
    pub w2: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    /// V x D
    pub tok_embed: Array2<f32>,
    /// patch pixels x D
    pub patch_embed: Array2<f32>,
    pub blocks: Vec<Block>,
    /// D x V
    pub unembed: Array2<f32>,
}

fn gaussian_matrix(noise: &mut GaussianStream, rows: usize, cols: usize, std: f64) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| (noise.next_normal() * std) as f32)
}

impl ToyModel {
    /// Scaled Gaussian initialization, deterministic in `config.seed`.
    ///
    /// Read matrices use std `1/sqrt(fan_in)`; the write matrices `wo` and
    /// `w2` are further scaled by `1/sqrt(2L)`. Parameters are drawn in
    /// checkpoint order.
    pub fn init(config: ToyModelConfig) -> Result<Self> {
        config.validate()?;
        let mut noise = GaussianStream::new(config.seed);
        let d = config.d_model;
        let f = config.d_mlp;
        let depth = (2.0 * config.n_layers as f64).sqrt();
        let tok_embed = gaussian_matrix(&mut noise, config.vocab_size, d, 1.0);
        let patch_embed = gaussian_matrix(
            &mut noise,
            config.patch_pixels(),
            d,
            1.0 / (config.patch_pixels() as f64).sqrt(),
        );
        let read = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                wq: gaussian_matrix(&mut noise, d, d, read),
                wk: gaussian_matrix(&mut noise, d, d, read),
                wv: gaussian_matrix(&mut noise, d, d, read),
                wo: gaussian_matrix(&mut noise, d, d, read / depth),
                w1: gaussian_matrix(&mut noise, d, f, read),
                w2: gaussian_matrix(&mut noise, f, d, 1.0 / (f as f64).sqrt() / depth),
            })
            .collect();
        let unembed = gaussian_matrix(&mut noise, d, config.vocab_size, read);
        Ok(Self {
            config,
            tok_embed,
            patch_embed,
            blocks,
            unembed,
        })
    }

    /// Canonical checkpoint names, in checkpoint order.
    pub fn tensor_names(n_layers: usize) -> Vec<String> {
        let mut names = vec!["embed.tok".to_string(), "embed.patch".to_string()];
        for i in 0..n_layers {
            for m in ["wq", "wk", "wv", "wo", "w1", "w2"] {
                names.push(format!("layer{i}.{m}"));
            }
        }
        names.push("unembed".to_string());
        names
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            Tensor::from_array2("embed.tok", &self.tok_embed),
            Tensor::from_array2("embed.patch", &self.patch_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (m, w) in [
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("w1", &b.w1),
                ("w2", &b.w2),
            ] {
                out.push(Tensor::from_array2(format!("layer{i}.{m}"), w));
            }
        }
        out.push(Tensor::from_array2("unembed", &self.unembed));
        out
    }

    pub fn from_tensors(config: ToyModelConfig, tensors: &TensorMap) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_mlp;
        let fetch = |name: &str, rows: usize, cols: usize| -> Result<Array2<f32>> {
            let t = tensors.get(name)?;
            if t.shape() != [rows, cols] {
                return Err(VceError::Shape(format!(
                    "checkpoint tensor `{name}` has shape {:?}, expected [{rows}, {cols}]",
                    t.shape()
                )));
            }
            t.to_array2()
        };
        let blocks = (0..config.n_layers)
            .map(|i| {
                Ok(Block {
                    wq: fetch(&format!("layer{i}.wq"), d, d)?,
                    wk: fetch(&format!("layer{i}.wk"), d, d)?,
                    wv: fetch(&format!("layer{i}.wv"), d, d)?,
                    wo: fetch(&format!("layer{i}.wo"), d, d)?,
                    w1: fetch(&format!("layer{i}.w1"), d, f)?,
                    w2: fetch(&format!("layer{i}.w2"), f, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            tok_embed: fetch("embed.tok", config.vocab_size, d)?,
            patch_embed: fetch("embed.patch", config.patch_pixels(), d)?,
            unembed: fetch("unembed", d, config.vocab_size)?,
            blocks,
            config,
        };
        if model.to_tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(VceError::NonFinite("checkpoint parameters".into()));
        }
        Ok(model)
    }

    /// Writes the parameter bundle plus `config.json`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<ManifestSummary> {
        let dir = dir.as_ref();
        let summary = write_bundle(&self.to_tensors(), dir)?;
        let path = dir.join(CONFIG_FILE);
        let mut text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| VceError::io(&path, e))?;
        Ok(summary)
    }

    pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = read_model_config(dir)?;
        let tensors = read_bundle(dir)?;
        Self::from_tensors(config, &tensors)
    }

    /// Column `token` of the unembedding.
    pub fn unembed_column(&self, token: u32) -> Array1<f32> {
        self.unembed.column(token as usize).to_owned()
    }
}

pub fn read_model_config(dir: impl AsRef<Path>) -> Result<ToyModelConfig> {
    let path = dir.as_ref().join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| VceError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| VceError::Config(format!("{}: {e}", path.display())))
}

/// Convenience wrapper matching the other module-level operations.
pub fn init_model(config: ToyModelConfig) -> Result<ToyModel> {
    ToyModel::init(config)
}
