use crate::geometry::HeadBox;
use crate::model::PATCH_SIZE;
use crate::nn::Tensor;

/// Bilinear sample of channel `c` at continuous pixel coordinates, where
/// integer coordinates are pixel centers. Pixels outside the image read as 0.
fn sample(img: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (img.shape()[1] as isize, img.shape()[2] as isize);
    let data = img.data();
    let base = c * (h * w) as usize;
    let at = |ix: isize, iy: isize| -> f64 {
        if ix < 0 || iy < 0 || ix >= w || iy >= h {
            0.0
        } else {
            data[base + (iy * w + ix) as usize]
        }
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as isize, y0 as isize);
    let top = if fx == 0.0 {
        at(ix, iy)
    } else {
        at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        at(ix, iy + 1)
    } else {
        at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Crop `bbox` out of a `[C, H, W]` image with values in `[0, 1]` and resample
/// it to `size x size`. Regions outside the image are zero.
pub fn crop_resize(img: &Tensor, bbox: &HeadBox, size: usize) -> Tensor {
    let ch = img.shape()[0];
    let (x0, y0) = (bbox.cx - bbox.w / 2.0, bbox.cy - bbox.h / 2.0);
    let (sx, sy) = (bbox.w / size as f64, bbox.h / size as f64);
    let mut out = Tensor::zeros(&[ch, size, size]);
    let od = out.data_mut();
    for c in 0..ch {
        for i in 0..size {
            let y = y0 + (i as f64 + 0.5) * sy - 0.5;
            for j in 0..size {
                let x = x0 + (j as f64 + 0.5) * sx - 0.5;
                od[(c * size + i) * size + j] = sample(img, c, x, y).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn crop_head_patch(img: &Tensor, bbox: &HeadBox) -> Tensor {
    crop_resize(img, bbox, PATCH_SIZE)
}

/// Decode an image file into a `[C, H, W]` tensor in `[0, 1]`.
pub fn load_image_tensor(path: &std::path::Path, channels: usize) -> crate::Result<Tensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(_) => crate::Error::MissingImage(path.to_path_buf()),
        other => crate::Error::Image(other),
    })?;
    Ok(image_to_tensor(&img, channels))
}

/// Convert a decoded image to a `[C, H, W]` tensor in `[0, 1]`; `channels`
/// selects luma (1) or RGB (3).
pub fn image_to_tensor(img: &image::DynamicImage, channels: usize) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = if channels == 1 {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect()
    } else {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let mut planar = vec![0.0; 3 * w * h];
        for p in 0..w * h {
            for c in 0..3 {
                planar[c * w * h + p] = f64::from(raw[p * 3 + c]) / 255.0;
            }
        }
        planar
    };
    Tensor::new(vec![channels.clamp(1, 3), h, w], data).expect("image buffer matches its dims")
}

/// Mirror every row of a `[C, H, W]` tensor.
pub fn mirror_horizontal(t: &Tensor) -> Tensor {
    let w = t.shape()[2];
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| (i % 97) as f64 / 96.0).collect();
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn aligned_box_is_identity_crop() {
        let img = ramp(100, 120);
        let b = HeadBox::new(10.0 + 32.0, 20.0 + 32.0, 64.0, 64.0).unwrap();
        let p = crop_head_patch(&img, &b);
        for i in 0..64 {
            for j in 0..64 {
                assert_eq!(p.data()[i * 64 + j], img.data()[(20 + i) * 120 + 10 + j]);
            }
        }
    }

    #[test]
    fn outside_half_is_zero() {
        let img = Tensor::filled(&[1, 80, 80], 0.7);
        let b = HeadBox::new(0.0, 40.0, 64.0, 64.0).unwrap();
        let p = crop_head_patch(&img, &b);
        for i in 0..64 {
            for j in 0..64 {
                let v = p.data()[i * 64 + j];
                if j < 32 {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v, 0.7);
                }
            }
        }
    }

    #[test]
    fn constant_region_stays_constant() {
        let img = Tensor::filled(&[3, 200, 200], 0.25);
        let b = HeadBox::new(100.0, 100.0, 128.0, 128.0).unwrap();
        let p = crop_head_patch(&img, &b);
        assert_eq!(p.shape(), &[3, 64, 64]);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn mirror_is_involution() {
        let t = ramp(5, 7);
        let m = mirror_horizontal(&t);
        assert_eq!(m.data()[0], t.data()[6]);
        assert_eq!(mirror_horizontal(&m), t);
    }

    #[test]
    fn image_conversion() {
        let mut img = image::RgbImage::new(2, 1);
        img.put_pixel(1, 0, image::Rgb([255, 0, 51]));
        let t = image_to_tensor(&image::DynamicImage::ImageRgb8(img), 3);
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.2]);
    }
}
