use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::{BinaryMask, SegmentationSample};
use crate::error::{Error, Result};

const GT: Rgb<u8> = Rgb([0, 220, 0]);
const PRED: Rgb<u8> = Rgb([230, 0, 0]);
const BOTH: Rgb<u8> = Rgb([250, 230, 0]);
const BOX: Rgb<u8> = Rgb([0, 200, 230]);

/// Foreground pixels with a 4-neighbour outside the mask (or the frame).
pub fn contour(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1))
    })
}

/// The image upscaled by `scale` (nearest) with the prompt box, the
/// ground-truth contour and the predicted contour drawn on top.
pub fn render_overlay(sample: &SegmentationSample, pred: &BinaryMask, scale: usize) -> Result<RgbImage> {
    sample.mask.same_shape(pred)?;
    let scale = scale.max(1);
    let (h, w) = (sample.height(), sample.width());
    let (gt_c, pr_c) = (contour(&sample.mask), contour(pred));
    let plane = h * w;
    let img = sample.image.data();
    let b = sample.bbox;
    let out = RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let (c, r) = (x as usize / scale, y as usize / scale);
        let on_box = (r >= b.y_min && r <= b.y_max && (c == b.x_min || c == b.x_max))
            || (c >= b.x_min && c <= b.x_max && (r == b.y_min || r == b.y_max));
        match (gt_c.get(r, c), pr_c.get(r, c)) {
            (true, true) => BOTH,
            (true, false) => GT,
            (false, true) => PRED,
            _ if on_box => BOX,
            _ => {
                let px = |k: usize| (img[k * plane + r * w + c].clamp(0.0, 1.0) * 255.0).round() as u8;
                Rgb([px(0), px(1), px(2)])
            }
        }
    });
    Ok(out)
}

pub fn save_overlay(path: &Path, image: &RgbImage) -> Result<()> {
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: other.to_string(),
            },
        })
}
