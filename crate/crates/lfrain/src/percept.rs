//! Fixed perceptual feature extractor: a small seeded convolutional stack
//! whose weights never train. Distances in its feature space serve as the
//! perceptual penalty inside the detector, restorer, and GP losses.

use crate::error::Result;
use crate::rng::{stream, uniform};
use crate::tensor::{conv2d_strided, DiffTensor};

const CHANNELS: [usize; 4] = [3, 8, 16, 16];
const KSIZE: usize = 3;
const STRIDE: usize = 2;

/// Three stride-2 3x3 convolutions (3 -> 8 -> 16 -> 16 channels) with relu
/// between layers. Weights are a pure function of the seed and are always
/// treated as constants, so gradients flow only through the input.
pub struct FeatureNet {
    layers: Vec<(DiffTensor, DiffTensor)>,
}

impl FeatureNet {
    pub fn new(seed: u64) -> Result<FeatureNet> {
        let mut rng = stream(seed, "phi");
        let mut layers = Vec::new();
        for l in 0..CHANNELS.len() - 1 {
            let (ci, co) = (CHANNELS[l], CHANNELS[l + 1]);
            let fan_in = (ci * KSIZE * KSIZE) as f64;
            let bound = (1.0 / fan_in).sqrt();
            let w: Vec<f64> = (0..co * ci * KSIZE * KSIZE)
                .map(|_| uniform(&mut rng, -bound, bound))
                .collect();
            let b: Vec<f64> = (0..co).map(|_| uniform(&mut rng, -bound, bound)).collect();
            layers.push((
                DiffTensor::from_vec(w, &[co, ci, KSIZE, KSIZE])?,
                DiffTensor::from_vec(b, &[co])?,
            ));
        }
        Ok(FeatureNet { layers })
    }

    /// Maps a [3, H, W] tensor to its feature stack output.
    pub fn forward(&self, x: &DiffTensor) -> Result<DiffTensor> {
        let mut cur = x.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            cur = conv2d_strided(&cur, w, Some(b), STRIDE)?;
            if i + 1 < self.layers.len() {
                cur = cur.relu()?;
            }
        }
        Ok(cur)
    }

    /// Squared feature-space distance sum |phi(a) - phi(b)|^2 as a scalar.
    pub fn dist2(&self, a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
        let fa = self.forward(a)?;
        let fb = self.forward(b)?;
        fa.sub(&fb)?.sum_sq()
    }
}

/// The canonical fixed extractor used across all losses.
pub fn default_feature_net() -> Result<FeatureNet> {
    FeatureNet::new(0x9e11)
}
