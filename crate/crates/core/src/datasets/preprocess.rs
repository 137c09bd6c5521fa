use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use super::{ImageTensor, RawImage};
use crate::error::{Error, Result};

/// Affine map from `[0, 255]` onto `[-1, 1]`.
#[inline]
pub fn normalize_pixel(p: u8) -> f32 {
    (p as f32 / 127.5 - 1.0).clamp(-1.0, 1.0)
}

/// Inverse of [`normalize_pixel`], rounding to the nearest byte.
pub fn denormalize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Resize (bilinear) to `target_size`², convert the channel count
/// (grayscale is replicated into RGB, RGB is reduced by luma) and scale
/// into `[-1, 1]`.
pub fn preprocess(raw: &RawImage, target_size: usize, channels: usize) -> Result<ImageTensor> {
    if raw.height == 0 || raw.width == 0 {
        return Err(Error::Format(format!("image {} has a zero dimension", raw.id)));
    }
    if target_size < 32 || !target_size.is_power_of_two() {
        return Err(Error::Config(format!(
            "target size must be a power of two >= 32, got {target_size}"
        )));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let (w, h) = (raw.width as u32, raw.height as u32);
    let t = target_size as u32;
    let bad = || Error::Format(format!("image {}: pixel buffer does not match its size", raw.id));
    let plane = target_size * target_size;
    let mut data = vec![0.0f32; channels * plane];
    match (raw.channels, channels) {
        (1, _) => {
            let img = GrayImage::from_raw(w, h, raw.pixels.clone()).ok_or_else(bad)?;
            let img = if (w, h) == (t, t) { img } else { imageops::resize(&img, t, t, FilterType::Triangle) };
            for (i, p) in img.pixels().enumerate() {
                let v = normalize_pixel(p.0[0]);
                for c in 0..channels {
                    data[c * plane + i] = v;
                }
            }
        }
        (3, _) => {
            let img = RgbImage::from_raw(w, h, raw.pixels.clone()).ok_or_else(bad)?;
            let img = if (w, h) == (t, t) { img } else { imageops::resize(&img, t, t, FilterType::Triangle) };
            if channels == 3 {
                for (i, p) in img.pixels().enumerate() {
                    for c in 0..3 {
                        data[c * plane + i] = normalize_pixel(p.0[c]);
                    }
                }
            } else {
                let gray = imageops::grayscale(&img);
                for (i, p) in gray.pixels().enumerate() {
                    data[i] = normalize_pixel(p.0[0]);
                }
            }
        }
        (c, _) => return Err(Error::Format(format!("image {}: unsupported channel count {c}", raw.id))),
    }
    ImageTensor::new(channels, target_size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(h: usize, w: usize, c: usize, v: u8) -> RawImage {
        RawImage::new("u", h, w, c, vec![v; h * w * c]).unwrap()
    }

    #[test]
    fn endpoints() {
        assert_eq!(normalize_pixel(0), -1.0);
        assert_eq!(normalize_pixel(255), 1.0);
        let t = preprocess(&uniform(32, 32, 1, 0), 32, 1).unwrap();
        assert!(t.data().iter().all(|v| *v == -1.0));
        let t = preprocess(&uniform(32, 32, 1, 255), 32, 1).unwrap();
        assert!(t.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn constant_image_survives_resize() {
        let want = 128.0f32 / 127.5 - 1.0;
        for (h, w, size) in [(28, 28, 32), (100, 60, 64), (64, 64, 32)] {
            let t = preprocess(&uniform(h, w, 3, 128), size, 3).unwrap();
            assert_eq!(t.shape(), [3, size, size]);
            assert!(t.data().iter().all(|v| (v - want).abs() < 1e-6));
        }
    }

    #[test]
    fn gray_is_replicated_to_rgb() {
        let mut raw = uniform(32, 32, 1, 10);
        raw.pixels[5] = 200;
        let t = preprocess(&raw, 32, 3).unwrap();
        let plane = 32 * 32;
        for i in 0..plane {
            assert_eq!(t.data()[i], t.data()[plane + i]);
            assert_eq!(t.data()[i], t.data()[2 * plane + i]);
        }
    }

    #[test]
    fn rejects_bad_target() {
        assert!(matches!(preprocess(&uniform(4, 4, 1, 0), 48, 1), Err(Error::Config(_))));
        assert!(matches!(preprocess(&uniform(4, 4, 1, 0), 16, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_dimension_is_a_format_error() {
        let raw = RawImage {
            id: "z".into(),
            height: 0,
            width: 4,
            channels: 1,
            pixels: vec![],
        };
        assert!(matches!(preprocess(&raw, 32, 1), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn affine_map_stays_in_range(p in any::<u8>()) {
            let v = normalize_pixel(p);
            prop_assert!((-1.0..=1.0).contains(&v));
            prop_assert_eq!(denormalize(v), p);
        }
    }
}
