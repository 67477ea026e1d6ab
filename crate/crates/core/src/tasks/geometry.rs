use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

use super::scene::BBox;

/// Default enlargement of the target box before cropping.
pub const DEFAULT_MARGIN: f64 = 1.1;

/// `[x_min, y_min, x_max, y_max, x_center, y_center, w_box, h_box]` with coordinates
/// mapped to `[-1, 1]` by `2p/S - 1` and extents by `2w/S`.
pub fn spatial_vector(bbox: &BBox, image_size: usize) -> Result<[f64; 8]> {
    if bbox.area() == 0 {
        return Err(Error::Validation(format!("bounding box {bbox:?} has zero area")));
    }
    if bbox.x_max > image_size || bbox.y_max > image_size {
        return Err(Error::Validation(format!("bounding box {bbox:?} exceeds image size {image_size}")));
    }
    let s = image_size as f64;
    let norm = |p: usize| 2.0 * p as f64 / s - 1.0;
    let (x0, y0, x1, y1) = (norm(bbox.x_min), norm(bbox.y_min), norm(bbox.x_max), norm(bbox.y_max));
    Ok([
        x0,
        y0,
        x1,
        y1,
        (x0 + x1) / 2.0,
        (y0 + y1) / 2.0,
        2.0 * bbox.width() as f64 / s,
        2.0 * bbox.height() as f64 / s,
    ])
}

/// Recover the pixel box from the first four fields of a spatial vector.
pub fn denormalize(v: &[f64; 8], image_size: usize) -> BBox {
    let s = image_size as f64;
    let px = |x: f64| ((x + 1.0) * s / 2.0).round() as usize;
    BBox { x_min: px(v[0]), y_min: px(v[1]), x_max: px(v[2]), y_max: px(v[3]) }
}

/// Enlarge `bbox` about its centre by `margin`, clamp it to the image, and resample the
/// region to `out_size × out_size` with bilinear interpolation.
pub fn crop_and_rescale(image: &Tensor<f64>, bbox: &BBox, out_size: usize, margin: f64) -> Result<Tensor<f64>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(config_err(format!("crop expects a [C,S,S] image, got {shape:?}")));
    }
    if bbox.area() == 0 || out_size == 0 || margin <= 0.0 {
        return Err(config_err(format!("invalid crop of {bbox:?} to {out_size} with margin {margin}")));
    }
    let (channels, s) = (shape[0], shape[1]);
    let sf = s as f64;
    let (cx, cy) = ((bbox.x_min + bbox.x_max) as f64 / 2.0, (bbox.y_min + bbox.y_max) as f64 / 2.0);
    let (hw, hh) = (bbox.width() as f64 * margin / 2.0, bbox.height() as f64 * margin / 2.0);
    let (x0, x1) = ((cx - hw).max(0.0), (cx + hw).min(sf));
    let (y0, y1) = ((cy - hh).max(0.0), (cy + hh).min(sf));
    let (step_x, step_y) = ((x1 - x0) / out_size as f64, (y1 - y0) / out_size as f64);

    // Sample position in pixel-index coordinates, with clamp-to-edge.
    let taps = |origin: f64, step: f64, i: usize| {
        let p = (origin + (i as f64 + 0.5) * step - 0.5).clamp(0.0, sf - 1.0);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, p - lo as f64)
    };
    let xs: Vec<_> = (0..out_size).map(|i| taps(x0, step_x, i)).collect();
    let ys: Vec<_> = (0..out_size).map(|i| taps(y0, step_y, i)).collect();
    let src = image.data();
    let mut out = Vec::with_capacity(channels * out_size * out_size);
    for c in 0..channels {
        let plane = &src[c * s * s..(c + 1) * s * s];
        for &(ya, yb, fy) in &ys {
            for &(xa, xb, fx) in &xs {
                let top = plane[ya * s + xa] * (1.0 - fx) + plane[ya * s + xb] * fx;
                let bottom = plane[yb * s + xa] * (1.0 - fx) + plane[yb * s + xb] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(&[channels, out_size, out_size], out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn full_and_half_boxes() {
        let full = spatial_vector(&BBox { x_min: 0, y_min: 0, x_max: 64, y_max: 64 }, 64).unwrap();
        assert_eq!(full, [-1.0, -1.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        let half = spatial_vector(&BBox { x_min: 16, y_min: 16, x_max: 48, y_max: 48 }, 64).unwrap();
        assert_eq!(half, [-0.5, -0.5, 0.5, 0.5, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_area_is_rejected() {
        let b = BBox { x_min: 3, y_min: 3, x_max: 3, y_max: 9 };
        assert!(matches!(spatial_vector(&b, 32), Err(Error::Validation(_))));
    }

    #[test]
    fn identity_crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::<f64>::uniform(&[3, 16, 16], 1.0, &mut rng);
        let full = BBox { x_min: 0, y_min: 0, x_max: 16, y_max: 16 };
        assert_eq!(crop_and_rescale(&img, &full, 16, 1.0).unwrap(), img);

        let b = BBox { x_min: 3, y_min: 5, x_max: 10, y_max: 12 };
        let crop = crop_and_rescale(&img, &b, 7, 1.0).unwrap();
        for c in 0..3 {
            for y in 0..7 {
                for x in 0..7 {
                    let want = img.data()[(c * 16 + y + 5) * 16 + x + 3];
                    assert_eq!(crop.data()[(c * 7 + y) * 7 + x], want);
                }
            }
        }
    }

    #[test]
    fn margin_at_the_edge_is_clamped() {
        let img = Tensor::<f64>::from_fn(&[1, 8, 8], |i| i as f64);
        let b = BBox { x_min: 0, y_min: 0, x_max: 8, y_max: 4 };
        let crop = crop_and_rescale(&img, &b, 5, DEFAULT_MARGIN).unwrap();
        assert!(crop.data().iter().all(|&v| (0.0..=63.0).contains(&v)));
    }

    proptest! {
        #[test]
        fn extents_and_round_trip(x0 in 0usize..60, y0 in 0usize..60, w in 1usize..40, h in 1usize..40) {
            let s = 64;
            let b = BBox { x_min: x0, y_min: y0, x_max: (x0 + w).min(s), y_max: (y0 + h).min(s) };
            prop_assume!(b.area() > 0);
            let v = spatial_vector(&b, s).unwrap();
            prop_assert!((v[6] - (v[2] - v[0])).abs() < 1e-12);
            prop_assert!((v[7] - (v[3] - v[1])).abs() < 1e-12);
            prop_assert!(v.iter().take(6).all(|x| (-1.0..=1.0).contains(x)));
            prop_assert_eq!(denormalize(&v, s), b);
        }
    }
}
