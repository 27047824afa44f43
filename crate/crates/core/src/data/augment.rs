//! Crop-and-flip augmentation.
//!
//! Wide source images are trimmed at top and bottom, then cut into square
//! windows sliding left to right with the configured overlap. A final
//! window anchored at the right edge keeps the remainder instead of
//! discarding it. Each crop is optionally also emitted horizontally
//! flipped (image and label together, no interpolation anywhere).

use crate::error::{Error, Result};

use super::ImageSample;

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub window: usize,
    pub overlap: f64,
    pub trim_top: usize,
    pub trim_bottom: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { window: 300, overlap: 0.5, trim_top: 20, trim_bottom: 20, flip: true }
    }
}

/// Column offsets of the sliding windows: 0, s, 2s, .. with stride
/// s = window * (1 - overlap), plus a right-anchored final window when the
/// last aligned one does not reach the right edge.
pub fn crop_windows(width: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if window == 0 || window > width {
        return Err(Error::config(format!("crop window {window} does not fit width {width}")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config(format!("overlap {overlap} must lie in [0, 1)")));
    }
    let stride = ((window as f64) * (1.0 - overlap)).round() as usize;
    let stride = stride.max(1);
    let mut offsets = Vec::new();
    let mut off = 0usize;
    while off + window <= width {
        offsets.push(off);
        off += stride;
    }
    let anchor = width - window;
    if *offsets.last().expect("window <= width yields at least offset 0") != anchor {
        offsets.push(anchor);
    }
    Ok(offsets)
}

/// Trim, crop, and flip one source sample into window x window outputs.
pub fn augment(sample: &ImageSample, config: &AugmentConfig) -> Result<Vec<ImageSample>> {
    let trims = config.trim_top + config.trim_bottom;
    if sample.h < trims + 1 {
        return Err(Error::config(format!(
            "sample {} has {} rows, cannot trim {}+{}",
            sample.id, sample.h, config.trim_top, config.trim_bottom
        )));
    }
    let rows = sample.h - trims;
    if rows != config.window {
        return Err(Error::config(format!(
            "sample {}: {} rows after trim but window is {}; crops must be square",
            sample.id, rows, config.window
        )));
    }
    let offsets = crop_windows(sample.w, config.window, config.overlap)?;
    let mut out = Vec::with_capacity(offsets.len() * if config.flip { 2 } else { 1 });
    for off in offsets {
        let crop = cut(sample, config.trim_top, off, config.window);
        if config.flip {
            let flipped = flip_horizontal(&crop);
            out.push(crop);
            out.push(flipped);
        } else {
            out.push(crop);
        }
    }
    Ok(out)
}

fn cut(sample: &ImageSample, top: usize, left: usize, size: usize) -> ImageSample {
    let mut image = Vec::with_capacity(size * size);
    let mut label = Vec::with_capacity(size * size);
    for y in 0..size {
        let row = (top + y) * sample.w + left;
        image.extend_from_slice(&sample.image[row..row + size]);
        label.extend_from_slice(&sample.label[row..row + size]);
    }
    ImageSample { id: format!("{}_x{left}", sample.id), h: size, w: size, image, label }
}

/// Mirror columns; image and label move together.
pub fn flip_horizontal(sample: &ImageSample) -> ImageSample {
    let mut image = sample.image.clone();
    let mut label = sample.label.clone();
    for y in 0..sample.h {
        let row = y * sample.w;
        image[row..row + sample.w].reverse();
        label[row..row + sample.w].reverse();
    }
    ImageSample { id: format!("{}_f", sample.id), h: sample.h, w: sample.w, image, label }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_for_the_reference_geometry() {
        // 1024-wide image, 300 window, 50% overlap: five aligned windows
        // plus the right-anchored remainder at 724
        assert_eq!(crop_windows(1024, 300, 0.5).unwrap(), vec![0, 150, 300, 450, 600, 724]);
        // exact fit: single window
        assert_eq!(crop_windows(300, 300, 0.5).unwrap(), vec![0]);
        // exact tiling without remainder
        assert_eq!(crop_windows(600, 300, 0.5).unwrap(), vec![0, 150, 300]);
        assert!(crop_windows(200, 300, 0.5).is_err());
    }

    fn coordinate_sample(h: usize, w: usize) -> ImageSample {
        // image encodes the source coordinate of every pixel so crops and
        // flips can be traced back exactly
        let image: Vec<f64> = (0..h * w).map(|i| i as f64).collect();
        let label: Vec<u16> = (0..h * w).map(|i| (i % 7) as u16).collect();
        ImageSample { id: "src".into(), h, w, image, label }
    }

    #[test]
    fn full_sized_source_yields_twelve_crops() {
        let sample = coordinate_sample(340, 1024);
        let out = augment(&sample, &AugmentConfig::default()).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.iter().all(|s| s.h == 300 && s.w == 300));
        // flipped twins interleave with their originals
        assert_eq!(out[0].id, "src_x0");
        assert_eq!(out[1].id, "src_x0_f");
        assert_eq!(out[10].id, "src_x724");
    }

    #[test]
    fn flip_is_an_involution() {
        let sample = coordinate_sample(8, 12);
        let twice = flip_horizontal(&flip_horizontal(&sample));
        assert_eq!(twice.image, sample.image);
        assert_eq!(twice.label, sample.label);
    }

    #[test]
    fn crops_preserve_image_label_pairing() {
        let sample = coordinate_sample(340, 1024);
        let cfg = AugmentConfig::default();
        for crop in augment(&sample, &cfg).unwrap() {
            for (img_v, lab_v) in crop.image.iter().zip(&crop.label) {
                // the image value is the source linear index; the label at
                // the same output position must be the source label there
                let src_idx = *img_v as usize;
                assert_eq!(*lab_v, sample.label[src_idx], "pairing broken in {}", crop.id);
            }
        }
    }

    #[test]
    fn crops_create_no_new_label_values() {
        let mut sample = coordinate_sample(340, 1024);
        for (i, l) in sample.label.iter_mut().enumerate() {
            *l = ((i / 2048) % 3) as u16;
        }
        let present: std::collections::BTreeSet<u16> = sample.label.iter().copied().collect();
        for crop in augment(&sample, &AugmentConfig::default()).unwrap() {
            for l in &crop.label {
                assert!(present.contains(l));
            }
        }
    }

    #[test]
    fn trim_mismatch_is_rejected() {
        let sample = coordinate_sample(100, 400);
        assert!(augment(&sample, &AugmentConfig::default()).is_err());
        let short = coordinate_sample(30, 400);
        assert!(augment(&short, &AugmentConfig { trim_top: 40, ..AugmentConfig::default() }).is_err());
    }
}
