//! Image features for the fusion stage, from either a trainable patch-grid
//! encoder or a precomputed feature file. Both backends produce the same
//! `[N_I × D_I]` token layout.

use crate::autodiff::{DiffArray, ParamStore};
use crate::data::read_pcf;
use crate::error::{Error, Result};
use crate::layers::Linear;
use rand_chacha::ChaCha12Rng;
use std::path::Path;

/// RGB image with channels in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageInput {
    pub height: usize,
    pub width: usize,
    /// Row-major `H×W×3`.
    pub pixels: Vec<f32>,
}

impl ImageInput {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<ImageInput> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image data length {} does not match {height}x{width}x3",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("image channels must lie in [0, 1]".into()));
        }
        Ok(ImageInput { height, width, pixels })
    }
}

/// Token set consumed by the fusion stage.
pub struct ImageFeatures {
    /// `[N_I × D_I]`.
    pub tokens: DiffArray,
}

impl ImageFeatures {
    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Deterministic 2D sinusoidal position term for a patch grid.
/// Half the channels encode the row, half the column, each as an
/// alternating sin/cos ladder over geometric frequencies.
pub fn grid_position_term(rows: usize, cols: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(rows * cols * dim);
    let band = |pos: f64, d: usize, width: usize| -> f32 {
        let pair = (d / 2) as f64;
        let denom = 10_000f64.powf(2.0 * pair / width.max(1) as f64);
        let angle = pos / denom;
        if d % 2 == 0 {
            angle.sin() as f32
        } else {
            angle.cos() as f32
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            for d in 0..dim {
                let v = if d < half {
                    band(r as f64, d, half)
                } else {
                    band(c as f64, d - half, dim - half)
                };
                out.push(v);
            }
        }
    }
    out
}

/// Trainable stand-in for a pretrained image backbone: a learned linear
/// map of each flattened patch plus a fixed grid position term.
pub struct PatchEncoder {
    pub patch: usize,
    pub dim: usize,
    pub proj: Linear,
    pub trainable: bool,
}

impl PatchEncoder {
    pub fn new(rng: &mut ChaCha12Rng, patch: usize, dim: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        Ok(PatchEncoder {
            patch,
            dim,
            proj: Linear::new(rng, patch * patch * 3, dim),
            trainable: true,
        })
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<()> {
        if self.trainable {
            self.proj.register(store, &format!("{prefix}.proj"))?;
        }
        Ok(())
    }

    pub fn token_count(&self, img: &ImageInput) -> usize {
        (img.height / self.patch) * (img.width / self.patch)
    }

    pub fn encode(&self, img: &ImageInput) -> Result<ImageFeatures> {
        if img.height % self.patch != 0 || img.width % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                img.height, img.width, self.patch
            )));
        }
        let rows = img.height / self.patch;
        let cols = img.width / self.patch;
        let p = self.patch;
        let flat_len = p * p * 3;
        let mut patches = Vec::with_capacity(rows * cols * flat_len);
        for gr in 0..rows {
            for gc in 0..cols {
                for py in 0..p {
                    for px in 0..p {
                        let y = gr * p + py;
                        let x = gc * p + px;
                        let base = (y * img.width + x) * 3;
                        patches.extend_from_slice(&img.pixels[base..base + 3]);
                    }
                }
            }
        }
        let patches = DiffArray::from_vec(patches, &[rows * cols, flat_len])?;
        let content = self.proj.forward(&patches)?;
        let pos = DiffArray::from_vec(
            grid_position_term(rows, cols, self.dim),
            &[rows * cols, self.dim],
        )?;
        Ok(ImageFeatures { tokens: content.add(&pos)? })
    }
}

/// Load precomputed features from a PCF1 file. The array must be rank 2.
pub fn load_features(path: &Path) -> Result<ImageFeatures> {
    let (shape, data) = read_pcf(path)?;
    match shape.as_slice() {
        [n, d] if *n >= 1 && *d >= 1 => Ok(ImageFeatures {
            tokens: DiffArray::from_vec(data, &[*n, *d])?,
        }),
        other => Err(Error::Format {
            path: path.display().to_string(),
            offset: 8,
            message: format!("image features must be a rank-2 array, got shape {other:?}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_pcf;
    use rand::SeedableRng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(21)
    }

    #[test]
    fn token_count_224_patch_32() {
        let enc = PatchEncoder::new(&mut rng(), 32, 16).unwrap();
        let img = ImageInput::new(224, 224, vec![0.0; 224 * 224 * 3]).unwrap();
        assert_eq!(enc.token_count(&img), 49);
        assert_eq!(enc.encode(&img).unwrap().count(), 49);
    }

    #[test]
    fn zero_image_zero_bias_gives_position_terms() {
        let enc = PatchEncoder::new(&mut rng(), 8, 12).unwrap();
        let img = ImageInput::new(16, 16, vec![0.0; 16 * 16 * 3]).unwrap();
        let out = enc.encode(&img).unwrap();
        let expect = grid_position_term(2, 2, 12);
        assert_eq!(out.tokens.to_vec(), expect);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let enc = PatchEncoder::new(&mut rng(), 5, 8).unwrap();
        let img = ImageInput::new(16, 16, vec![0.0; 16 * 16 * 3]).unwrap();
        assert!(matches!(enc.encode(&img), Err(Error::Config(_))));
    }

    #[test]
    fn pixel_range_validated() {
        assert!(ImageInput::new(2, 2, vec![1.5; 12]).is_err());
        assert!(ImageInput::new(2, 2, vec![0.5; 12]).is_ok());
    }

    #[test]
    fn load_features_round_trip_and_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feat.pcf");
        let data: Vec<f32> = (0..49 * 768).map(|i| (i as f32 * 0.001).cos()).collect();
        write_pcf(&p, &[49, 768], &data).unwrap();
        let f = load_features(&p).unwrap();
        assert_eq!(f.count(), 49);
        assert_eq!(f.dim(), 768);
        assert_eq!(f.tokens.to_vec(), data);
    }

    #[test]
    fn truncated_feature_file_fails_without_partial_result() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("feat.pcf");
        write_pcf(&p, &[4, 4], &[0.25; 16]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_features(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn shifted_image_content_tokens_are_a_permutation() {
        use rand::Rng;
        let mut r = rng();
        let enc = PatchEncoder::new(&mut r, 4, 10).unwrap();
        let (h, w) = (12usize, 12usize);
        let pixels: Vec<f32> = (0..h * w * 3).map(|_| r.gen::<f32>()).collect();
        // Shift the image content by exactly one patch horizontally, wrapping.
        let mut shifted = vec![0.0f32; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let sx = (x + 4) % w;
                for ch in 0..3 {
                    shifted[(y * w + sx) * 3 + ch] = pixels[(y * w + x) * 3 + ch];
                }
            }
        }
        let a = enc.encode(&ImageInput::new(h, w, pixels).unwrap()).unwrap();
        let b = enc.encode(&ImageInput::new(h, w, shifted).unwrap()).unwrap();
        let pos = grid_position_term(3, 3, 10);
        let strip = |f: &ImageFeatures| -> Vec<Vec<i32>> {
            // Quantized content rows (token minus position term) for set comparison.
            let d = f.tokens.to_vec();
            (0..9)
                .map(|t| {
                    (0..10)
                        .map(|j| ((d[t * 10 + j] - pos[t * 10 + j]) * 1e4).round() as i32)
                        .collect()
                })
                .collect()
        };
        let mut ca = strip(&a);
        let mut cb = strip(&b);
        ca.sort();
        cb.sort();
        assert_eq!(ca, cb);
    }
}
