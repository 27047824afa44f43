//! Synthetic layered-image generator.
//!
//! Produces grayscale images of stacked horizontal layers separated by
//! smooth non-crossing boundaries (sums of 1..=max_sinusoids random
//! sinusoids around evenly spaced base lines), with a per-layer base
//! intensity and multiplicative speckle noise. The label mask assigns each
//! pixel the index of its layer, so labels are monotone non-decreasing down
//! every column.

use crate::error::{Error, Result};
use crate::rng::Rng64;

use super::ImageSample;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Number of layers; the label mask uses values 0..num_layers.
    pub num_layers: usize,
    /// Sinusoids per boundary are drawn from 1..=max_sinusoids.
    pub max_sinusoids: usize,
    /// Total boundary amplitude as a fraction of the layer spacing; must be
    /// < 0.5 so adjacent boundaries can never cross.
    pub amplitude_frac: f64,
    /// Sinusoid frequency range in cycles per image width.
    pub min_frequency: f64,
    pub max_frequency: f64,
    /// Per-layer base intensities in [0,1]; defaults to an even spread.
    pub intensity_means: Option<Vec<f64>>,
    /// Multiplicative speckle amplitude: pixel *= 1 + noise * u, u in [-1,1].
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 100,
            height: 64,
            width: 64,
            num_layers: 4,
            max_sinusoids: 3,
            amplitude_frac: 0.3,
            min_frequency: 0.5,
            max_frequency: 2.5,
            intensity_means: None,
            noise: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("synthetic dataset needs at least one image"));
        }
        if self.num_layers < 2 || self.num_layers > 256 {
            return Err(Error::config(format!("num_layers {} out of range 2..=256", self.num_layers)));
        }
        if self.height < 2 * self.num_layers || self.width < 4 {
            return Err(Error::config(format!(
                "image {}x{} too small for {} layers",
                self.height, self.width, self.num_layers
            )));
        }
        if !(0.0..0.5).contains(&self.amplitude_frac) {
            return Err(Error::config(format!(
                "amplitude_frac {} must lie in [0, 0.5) so boundaries cannot cross",
                self.amplitude_frac
            )));
        }
        if self.max_sinusoids < 1 || self.max_sinusoids > 8 {
            return Err(Error::config("max_sinusoids must be in 1..=8"));
        }
        if self.min_frequency <= 0.0 || self.max_frequency < self.min_frequency {
            return Err(Error::config("invalid boundary frequency range"));
        }
        if self.noise < 0.0 || self.noise >= 1.0 {
            return Err(Error::config("noise must lie in [0, 1)"));
        }
        if let Some(means) = &self.intensity_means {
            if means.len() != self.num_layers {
                return Err(Error::config(format!(
                    "{} intensity means for {} layers",
                    means.len(),
                    self.num_layers
                )));
            }
            if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return Err(Error::config("intensity means must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn layer_means(&self) -> Vec<f64> {
        match &self.intensity_means {
            Some(m) => m.clone(),
            None => {
                let l = self.num_layers as f64;
                (0..self.num_layers).map(|i| 0.15 + 0.75 * i as f64 / (l - 1.0)).collect()
            }
        }
    }
}

/// Generate the full dataset deterministically; each sample draws from an
/// independent stream of the master seed, so generation order is
/// irrelevant.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<ImageSample>> {
    config.validate()?;
    (0..config.count).map(|i| generate_one(config, i)).collect()
}

fn generate_one(config: &SynthConfig, index: usize) -> Result<ImageSample> {
    let mut rng = Rng64::derive(config.seed, &[0x7379_6e74, index as u64]);
    let (h, w) = (config.height, config.width);
    let layers = config.num_layers;
    let spacing = h as f64 / layers as f64;
    let means = config.layer_means();

    // boundary l sits near (l+1) * spacing, perturbed by zero-mean sinusoids
    // whose total amplitude stays below amplitude_frac * spacing
    let mut boundaries: Vec<Vec<f64>> = Vec::with_capacity(layers - 1);
    for b in 0..layers - 1 {
        let base = (b + 1) as f64 * spacing;
        let n_sin = rng.range_inclusive(1, config.max_sinusoids as u64) as usize;
        let budget = config.amplitude_frac * spacing;
        let waves: Vec<(f64, f64, f64)> = (0..n_sin)
            .map(|_| {
                let amp = budget / n_sin as f64 * rng.next_f64();
                let freq = rng.uniform(config.min_frequency, config.max_frequency);
                let phase = rng.uniform(0.0, std::f64::consts::TAU);
                (amp, freq, phase)
            })
            .collect();
        let row: Vec<f64> = (0..w)
            .map(|x| {
                let t = x as f64 / w as f64;
                base + waves
                    .iter()
                    .map(|(a, f, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                    .sum::<f64>()
            })
            .collect();
        boundaries.push(row);
    }

    let mut image = vec![0.0f64; h * w];
    let mut label = vec![0u16; h * w];
    for x in 0..w {
        for y in 0..h {
            let yy = y as f64 + 0.5;
            let mut class = 0u16;
            for row in &boundaries {
                if yy >= row[x] {
                    class += 1;
                }
            }
            let noise = 1.0 + config.noise * rng.uniform(-1.0, 1.0);
            let v = (means[class as usize] * noise).clamp(0.0, 1.0);
            image[y * w + x] = v;
            label[y * w + x] = class;
        }
    }
    Ok(ImageSample { id: format!("synth{index:05}"), h, w, image, label })
}
