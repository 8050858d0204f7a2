//! Transformer building blocks: patch embedding, pre-norm encoder and
//! decoder stacks, and the self-attention mask shapes they use.

mod layers;
mod mask;

pub use layers::{
    Attention, DecoderBlock, DecoderStack, EncoderBlock, EncoderStack, FeedForward, LayerNorm,
    Linear, PatchEmbed, TextDecoder, VisionEncoder,
};
pub use mask::{build_mask, MaskKind};
pub(crate) use layers::uniform_param;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{Float, Tensor};

/// Alias used where a mask describes self-attention over one sequence.
pub type AttentionMask = crate::tensor::Mask;

/// Dimensions of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Invalid(format!("degenerate stack dims {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// Splits an image into `p x p` patches in row-major patch order; each
/// patch is flattened row-major over `(y, x, channel)`.
/// Output shape `[H/p * W/p, p*p*C]`.
pub fn patchify<T: Float>(img: &Image, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let mut out = Vec::with_capacity(h * w * c);
    let src = img.data();
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let row = ((py * p + y) * w + px * p) * c;
                out.extend(src[row..row + p * c].iter().map(|&v| T::from_f64(v as f64)));
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(
    patches: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
) -> Result<Image> {
    if p == 0 || height % p != 0 || width % p != 0 {
        return Err(Error::shape(format!(
            "{height}x{width} image is not divisible into {p}x{p} patches"
        )));
    }
    let (gh, gw) = (height / p, width / p);
    if patches.shape() != [gh * gw, p * p * channels] {
        return Err(Error::shape(format!(
            "patch tensor {:?} does not fit a {height}x{width}x{channels} image",
            patches.shape()
        )));
    }
    let mut data = vec![0f32; height * width * channels];
    let src = patches.data();
    let mut i = 0;
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..p {
                let row = ((py * p + y) * width + px * p) * channels;
                for v in &mut data[row..row + p * channels] {
                    *v = src[i].as_f64() as f32;
                    i += 1;
                }
            }
        }
    }
    Image::new(height, width, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i % 251) as f32 / 251.0).collect();
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn patch_counts_on_default_canvas() {
        let img = ramp(32, 512);
        assert_eq!(patchify::<f32>(&img, 16).unwrap().shape(), [64, 768]);
        assert_eq!(patchify::<f32>(&img, 8).unwrap().shape(), [256, 192]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let img = ramp(32, 64);
        let p = patchify::<f32>(&img, 8).unwrap();
        assert_eq!(unpatchify(&p, 32, 64, 3, 8).unwrap(), img);
    }

    #[test]
    fn first_patch_holds_top_left_block() {
        let img = ramp(4, 8);
        let p = patchify::<f64>(&img, 2).unwrap();
        let want: Vec<f64> = [img.pixel(0, 0), img.pixel(0, 1), img.pixel(1, 0), img.pixel(1, 1)]
            .concat()
            .iter()
            .map(|&v| v as f64)
            .collect();
        assert_eq!(p.row(0), &want[..]);
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        assert!(patchify::<f32>(&ramp(30, 64), 8).is_err());
        assert!(patchify::<f32>(&ramp(32, 60), 8).is_err());
    }

    #[test]
    fn stack_config_needs_divisible_heads() {
        let cfg = StackConfig {
            d_model: 10,
            d_ff: 20,
            heads: 4,
            layers: 1,
        };
        assert!(cfg.validate().is_err());
    }
}
