use crate::data::{resize_for_model, BinaryMask, SegmentationSample};
use crate::error::{dim_err, Result};
use crate::graph::Graph;
use crate::model::{decode_masks, encode_box_prompt, forward, BoundingBox, ModelConfig};
use crate::ops::bilinear_resize;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Everything the network consumes for one sample: the normalised
/// `R × R` image and the box in original pixel coordinates.
#[derive(Clone, Debug)]
pub struct ModelInput<T> {
    pub image: Tensor<T>,
    pub bbox: BoundingBox,
    pub width: usize,
    pub height: usize,
}

pub fn model_input<T: Scalar>(sample: &SegmentationSample, cfg: &ModelConfig) -> Result<ModelInput<T>> {
    let (image, _) = resize_for_model(sample, cfg.input_res)?;
    Ok(ModelInput {
        image,
        bbox: sample.bbox,
        width: sample.width(),
        height: sample.height(),
    })
}

/// Mask logits `[3, M, M]` and IoU predictions `[3]`.
pub fn predict_logits<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (logits, iou) = forward(&mut g, &p, cfg, &input.image, &input.bbox, input.width, input.height)?;
    Ok((g.value(logits).clone(), g.value(iou).clone()))
}

/// Like [`predict_logits`] but starting from a precomputed image embedding.
pub fn predict_logits_from_embedding<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    embedding: &Tensor<T>,
    input: &ModelInput<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let emb = g.constant(embedding.clone());
    let prompt = encode_box_prompt(&mut g, &p, &input.bbox, input.width, input.height)?;
    let (logits, iou) = decode_masks(&mut g, &p, cfg, emb, prompt)?;
    Ok((g.value(logits).clone(), g.value(iou).clone()))
}

/// Resizes the primary (first) mask's logits to `H × W` and thresholds at 0.
pub fn logits_to_mask<T: Scalar>(logits: &Tensor<T>, height: usize, width: usize) -> Result<BinaryMask> {
    let primary = match logits.rank() {
        2 => logits.clone(),
        3 => logits.channel(0)?,
        _ => return dim_err(format!("logits must be [M, M] or [K, M, M], got {:?}", logits.shape())),
    };
    let full = bilinear_resize(&primary, height, width)?;
    BinaryMask::from_tensor(&full, T::zero())
}

/// Binary prediction at the sample's original resolution.
pub fn predict_full_res<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    sample: &SegmentationSample,
) -> Result<BinaryMask> {
    let input = model_input(sample, cfg)?;
    let (logits, _) = predict_logits(params, cfg, &input)?;
    logits_to_mask(&logits, sample.height(), sample.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_logits_threshold_to_full_or_empty() {
        let pos = Tensor::<f32>::full(&[3, 8, 8], 0.3);
        let m = logits_to_mask(&pos, 13, 21).unwrap();
        assert_eq!((m.height(), m.width()), (13, 21));
        assert_eq!(m.count(), 13 * 21);
        let neg = Tensor::<f32>::full(&[8, 8], -0.3);
        assert!(logits_to_mask(&neg, 5, 7).unwrap().is_empty());
    }
}
