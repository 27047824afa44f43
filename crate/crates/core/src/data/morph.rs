//! Grayscale morphology with square structuring elements.
//!
//! Erosion is the window minimum, dilation the window maximum, closing a
//! dilation followed by an erosion. Borders are handled by edge
//! replication (indices clamp to the image).

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MorphOp {
    Erode,
    Dilate,
    Close,
}

impl MorphOp {
    pub fn parse(s: &str) -> Option<MorphOp> {
        match s {
            "erode" => Some(MorphOp::Erode),
            "dilate" => Some(MorphOp::Dilate),
            "close" => Some(MorphOp::Close),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MorphOp::Erode => "erode",
            MorphOp::Dilate => "dilate",
            MorphOp::Close => "close",
        }
    }
}

/// Apply one morphological operation with an odd square kernel.
pub fn morphology(image: &[f64], h: usize, w: usize, op: MorphOp, kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::config(format!("morphology kernel must be odd and positive, got {kernel}")));
    }
    if image.len() != h * w {
        return Err(Error::config(format!("morphology: {} samples for {h}x{w}", image.len())));
    }
    Ok(match op {
        MorphOp::Erode => window_extremum(image, h, w, kernel, false),
        MorphOp::Dilate => window_extremum(image, h, w, kernel, true),
        MorphOp::Close => {
            let dilated = window_extremum(image, h, w, kernel, true);
            window_extremum(&dilated, h, w, kernel, false)
        }
    })
}

fn window_extremum(image: &[f64], h: usize, w: usize, kernel: usize, take_max: bool) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut best = image[(y as usize) * w + x as usize];
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    let v = image[yy * w + xx];
                    if (take_max && v > best) || (!take_max && v < best) {
                        best = v;
                    }
                }
            }
            out[(y as usize) * w + x as usize] = best;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng64;

    #[test]
    fn kernel_one_is_identity() {
        let img: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        for op in [MorphOp::Erode, MorphOp::Dilate, MorphOp::Close] {
            assert_eq!(morphology(&img, 4, 5, op, 1).unwrap(), img);
        }
    }

    #[test]
    fn constant_image_is_unchanged() {
        let img = vec![0.42; 36];
        for op in [MorphOp::Erode, MorphOp::Dilate, MorphOp::Close] {
            assert_eq!(morphology(&img, 6, 6, op, 3).unwrap(), img);
        }
    }

    #[test]
    fn single_bright_pixel_hand_case() {
        // 5x5 zeros with one bright pixel in the center
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        // erosion removes it entirely
        let eroded = morphology(&img, 5, 5, MorphOp::Erode, 3).unwrap();
        assert!(eroded.iter().all(|&v| v == 0.0));
        // dilation grows it into a 3x3 block
        let dilated = morphology(&img, 5, 5, MorphOp::Dilate, 3).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expect = if (1..=3).contains(&y) && (1..=3).contains(&x) { 1.0 } else { 0.0 };
                assert_eq!(dilated[y * 5 + x], expect, "at ({y},{x})");
            }
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(morphology(&[0.0; 16], 4, 4, MorphOp::Erode, 2).is_err());
        assert!(morphology(&[0.0; 16], 4, 4, MorphOp::Erode, 0).is_err());
    }

    #[test]
    fn closing_is_idempotent() {
        let mut rng = Rng64::new(33);
        for trial in 0..10 {
            let (h, w) = (8 + trial % 3, 9 + trial % 4);
            let img: Vec<f64> = (0..h * w).map(|_| rng.next_f64()).collect();
            for kernel in [3usize, 5] {
                let once = morphology(&img, h, w, MorphOp::Close, kernel).unwrap();
                let twice = morphology(&once, h, w, MorphOp::Close, kernel).unwrap();
                assert_eq!(once, twice, "closing must be idempotent (k={kernel})");
            }
        }
    }

    #[test]
    fn erosion_below_dilation_pointwise() {
        let mut rng = Rng64::new(34);
        let img: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        let er = morphology(&img, 8, 8, MorphOp::Erode, 3).unwrap();
        let di = morphology(&img, 8, 8, MorphOp::Dilate, 3).unwrap();
        for ((e, v), d) in er.iter().zip(&img).zip(&di) {
            assert!(e <= v && v <= d);
        }
    }
}
