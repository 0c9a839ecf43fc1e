//! Frozen patch-transformer image encoder.

use crome_autodiff::{AutodiffError, Tensor, Var};

use crate::config::VisionEncoderConfig;
use crate::error::Result;
use crate::params::{Init, ParamSpec};
use crate::session::Session;

use super::{block_specs, transformer_block};

pub fn vision_specs(cfg: &VisionEncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut v = vec![
        ParamSpec::new(
            "vision.patch_embed",
            &[cfg.patch_dim(), d],
            Init::Normal(1.0 / (cfg.patch_dim() as f64).sqrt()),
        ),
        ParamSpec::new("vision.pos_embed", &[cfg.n_patches(), d], Init::Normal(0.5)),
    ];
    let std = 1.0 / (d as f64).sqrt();
    let std_out = 1.0 / ((d * cfg.mlp_ratio) as f64).sqrt();
    for i in 0..cfg.n_layers {
        v.extend(block_specs(&format!("vision.block{i}"), d, cfg.mlp_ratio, std, std_out));
    }
    v
}

/// `[H, W, C]` image to `[n_patches, patch*patch*C]`, patches in row-major
/// order, pixels row-major within a patch.
pub fn patchify(image: &Tensor, cfg: &VisionEncoderConfig) -> Result<Tensor> {
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if image.shape() != expected {
        return Err(AutodiffError::Shape {
            op: "encode_image",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        }
        .into());
    }
    let (p, c, size) = (cfg.patch_size, cfg.channels, cfg.image_size);
    let side = size / p;
    let mut data = Vec::with_capacity(image.numel());
    for py in 0..side {
        for px in 0..side {
            for y in 0..p {
                let row = (py * p + y) * size;
                let start = (row + px * p) * c;
                data.extend_from_slice(&image.data()[start..start + p * c]);
            }
        }
    }
    Ok(Tensor::new(vec![side * side, cfg.patch_dim()], data)?)
}

/// Residual stream after the patch embedding (index 0) and after every
/// block (index `i + 1`).
pub fn encode_layers(s: &mut Session, image: &Tensor, cfg: &VisionEncoderConfig) -> Result<Vec<Var>> {
    encode_upto(s, image, cfg, cfg.n_layers)
}

fn encode_upto(s: &mut Session, image: &Tensor, cfg: &VisionEncoderConfig, blocks: usize) -> Result<Vec<Var>> {
    let patches = s.graph.constant(patchify(image, cfg)?);
    let w = s.param("vision.patch_embed")?;
    let pos = s.param("vision.pos_embed")?;
    let x = s.graph.matmul(patches, w)?;
    let mut x = s.graph.add(x, pos)?;
    let mut layers = vec![x];
    for i in 0..blocks {
        x = transformer_block(s, &format!("vision.block{i}"), x, cfg.n_heads, false)?;
        layers.push(x);
    }
    Ok(layers)
}

/// Patch features from the penultimate layer: the last block is never run.
pub fn encode_image_var(s: &mut Session, image: &Tensor, cfg: &VisionEncoderConfig) -> Result<Var> {
    let layers = encode_upto(s, image, cfg, cfg.n_layers - 1)?;
    Ok(*layers.last().unwrap())
}

/// Forward-only image encoding.
pub fn encode_image(store: &crate::params::ParamStore, image: &Tensor, cfg: &VisionEncoderConfig) -> Result<Tensor> {
    let mut s = Session::frozen(store);
    let v = encode_image_var(&mut s, image, cfg)?;
    Ok(s.graph.value(v).clone())
}
