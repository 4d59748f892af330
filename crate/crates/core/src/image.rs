//! 8-bit images and token sequences, the two raw model inputs.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Interleaved 8-bit image; pixel value `v` stands for `v / 255` in [0, 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0; height * width * channels],
        }
    }

    pub fn from_pixels(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixel values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        let i = self.index(y, x, c);
        self.pixels[i] = v;
    }

    pub fn check_dims(&self, cfg: &ModelConfig) -> Result<()> {
        if (self.height, self.width, self.channels) != (cfg.image_height, cfg.image_width, cfg.channels) {
            return Err(Error::Config(format!(
                "image is {}x{}x{}, model expects {}x{}x{}",
                self.height, self.width, self.channels, cfg.image_height, cfg.image_width, cfg.channels
            )));
        }
        Ok(())
    }

    /// Row-major patch matrix `p² x S`; within a patch, pixels are row-major
    /// with channels interleaved.
    pub fn patches<T: Scalar>(&self, patch_size: usize) -> Matrix<T> {
        let gr = self.height / patch_size;
        let gc = self.width / patch_size;
        let s = patch_size * patch_size * self.channels;
        let scale = T::one() / T::of(255.0);
        let mut m = Matrix::zeros(gr * gc, s);
        for pr in 0..gr {
            for pc in 0..gc {
                let row = m.row_mut(pr * gc + pc);
                let mut k = 0;
                for y in 0..patch_size {
                    for x in 0..patch_size {
                        for c in 0..self.channels {
                            row[k] = T::of(self.get(pr * patch_size + y, pc * patch_size + x, c) as f64) * scale;
                            k += 1;
                        }
                    }
                }
            }
        }
        m
    }

    /// Zero every pixel of the listed patches.
    pub fn zero_patches(&mut self, patch_size: usize, patches: &[usize]) {
        let gc = self.width / patch_size;
        for &p in patches {
            let (pr, pc) = (p / gc, p % gc);
            for y in 0..patch_size {
                for x in 0..patch_size {
                    for c in 0..self.channels {
                        self.set(pr * patch_size + y, pc * patch_size + x, c, 0);
                    }
                }
            }
        }
    }
}

/// Token ids plus a pad mask (`true` marks padding).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    pad: Vec<bool>,
}

impl TokenSequence {
    /// Sequence without padding.
    pub fn new(ids: Vec<u32>) -> Self {
        let pad = vec![false; ids.len()];
        Self { ids, pad }
    }

    /// Pads are derived from `PAD` ids.
    pub fn from_padded(ids: Vec<u32>) -> Self {
        let pad = ids.iter().map(|&i| i == PAD).collect();
        Self { ids, pad }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ids.len() > cfg.max_tokens {
            return Err(Error::Input(format!(
                "{} tokens exceed the {}-token limit",
                self.ids.len(),
                cfg.max_tokens
            )));
        }
        if let Some(&id) = self.ids.iter().find(|&&id| id as usize >= cfg.text_vocab) {
            return Err(Error::Vocabulary {
                id,
                vocab: cfg.text_vocab,
            });
        }
        if self.pad.iter().all(|&p| p) {
            return Err(Error::Input("token sequence has no non-pad token".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_are_row_major_with_interleaved_channels() {
        let mut img = Image::new(4, 4, 3);
        img.set(2, 3, 1, 255);
        let m: Matrix<f64> = img.patches(2);
        assert_eq!(m.shape(), (4, 12));
        // pixel (2,3) sits in patch (1,1) at local (0,1), channel 1.
        assert_eq!(m.get(3, 3 + 1), 1.0);
        assert_eq!(m.sum(), 1.0);
    }

    #[test]
    fn token_validation() {
        let cfg = ModelConfig::toy();
        assert!(TokenSequence::new(vec![BOS, 5, EOS]).validate(&cfg).is_ok());
        assert!(matches!(
            TokenSequence::new(vec![BOS, 99]).validate(&cfg),
            Err(Error::Vocabulary { id: 99, .. })
        ));
        assert!(TokenSequence::from_padded(vec![PAD, PAD]).validate(&cfg).is_err());
        assert!(TokenSequence::new(vec![1; 9]).validate(&cfg).is_err());
    }
}
