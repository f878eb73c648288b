use super::dataset::SegmentationSample;
use super::mask::BinaryMask;
use crate::error::Result;
use crate::model::BoundingBox;
use crate::ops::bilinear_resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed per-channel normalisation `(x − 0.5) / 0.5`.
pub fn normalize<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    image.map(|v| (v - half) / half)
}

fn scale_coord(v: usize, from: usize, to: usize) -> usize {
    if from <= 1 {
        return 0;
    }
    let scaled = v as f64 * (to - 1) as f64 / (from - 1) as f64;
    ((scaled + 0.5).floor() as usize).min(to - 1)
}

/// Maps a box between frames by scaling corners with `(to − 1)/(from − 1)`,
/// rounding half up and clamping to the target frame.
pub fn scale_box(b: &BoundingBox, from_w: usize, from_h: usize, to_w: usize, to_h: usize) -> BoundingBox {
    BoundingBox::new(
        scale_coord(b.x_min, from_w, to_w),
        scale_coord(b.y_min, from_h, to_h),
        scale_coord(b.x_max, from_w, to_w),
        scale_coord(b.y_max, from_h, to_h),
    )
}

/// Bilinearly resizes the image to `R × R`, normalises it, and scales the box
/// into the `R` frame.
pub fn resize_for_model<T: Scalar>(
    sample: &SegmentationSample,
    res: usize,
) -> Result<(Tensor<T>, BoundingBox)> {
    let image: Tensor<T> = sample.image.cast();
    let resized = bilinear_resize(&image, res, res)?;
    let bbox = scale_box(&sample.bbox, sample.width(), sample.height(), res, res);
    Ok((normalize(&resized), bbox))
}

/// Soft `M × M` Dice target: bilinear resize of the {0, 1} mask.
pub fn downsample_gt<T: Scalar>(mask: &BinaryMask, side: usize) -> Result<Tensor<T>> {
    let t: Tensor<T> = mask.to_tensor();
    bilinear_resize(&t, side, side)
}
