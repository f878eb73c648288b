use super::config::ModelConfig;
use super::init::FOURIER_B;
use super::prompt::{dense_positional_encoding, encode_box_prompt, BoundingBox};
use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rearranges a `[3, R, R]` image into `[g², 3·p²]` patch rows (raster order
/// over the grid; channel, row, column within a patch).
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3()?;
    if image.rank() != 3 || h != w || h % patch != 0 {
        return dim_err(format!(
            "cannot patchify image {:?} with patch size {patch}",
            image.shape()
        ));
    }
    let g = h / patch;
    let src = image.data();
    let row = c * patch * patch;
    let mut out = Vec::with_capacity(g * g * row);
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for py in 0..patch {
                    let y = gy * patch + py;
                    let start = ch * h * w + y * w + gx * patch;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(&[g * g, row], out)
}

fn linear<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn norm<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, T::lit(eps))
}

/// Scaled dot-product attention over already-projected `q [n×D]`,
/// `k [m×D]`, `v [m×D]`, split into `heads` column groups.
fn multi_head<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.value(q).dims2()?.1;
    let dh = d / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Attention block with separate query/key/value/output projections.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    prefix: &str,
    queries: Var,
    keys: Var,
    values: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, p, &format!("{prefix}.q_proj"), queries)?;
    let k = linear(g, p, &format!("{prefix}.k_proj"), keys)?;
    let v = linear(g, p, &format!("{prefix}.v_proj"), values)?;
    let o = multi_head(g, q, k, v, heads)?;
    linear(g, p, &format!("{prefix}.out_proj"), o)
}

fn mlp2<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc2"), h)
}

fn mlp3<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.fc2"), h)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{prefix}.fc3"), h)
}

/// Patch-embedding rows `[g², D]` before any attention (projection plus
/// positional embedding).
pub fn embed_patches<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<Var> {
    let r = cfg.input_res;
    if image.shape() != [3, r, r] {
        return dim_err(format!(
            "image must be [3, {r}, {r}], got {:?}",
            image.shape()
        ));
    }
    let patches = g.constant(patchify(image, cfg.patch_size)?);
    let x = linear(g, p, "image_encoder.patch_embed", patches)?;
    let pos = p.get("image_encoder.pos_embed")?;
    g.add(x, pos)
}

/// ViT image encoder. Returns the `[D, g, g]` feature map.
pub fn encode_image<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<Var> {
    let eps = cfg.layer_norm_eps;
    let d = cfg.embed_dim;
    let mut x = embed_patches(g, p, cfg, image)?;
    for b in 0..cfg.depth {
        let pre = format!("image_encoder.blocks.{b}");
        let h = norm(g, p, &format!("{pre}.norm1"), x, eps)?;
        let qkv = linear(g, p, &format!("{pre}.attn.qkv"), h)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, 2 * d)?;
        let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
        let a = multi_head(g, q, k, v, cfg.heads)?;
        let a = linear(g, p, &format!("{pre}.attn.proj"), a)?;
        x = g.add(x, a)?;
        let h = norm(g, p, &format!("{pre}.norm2"), x, eps)?;
        let m = mlp2(g, p, &format!("{pre}.mlp"), h)?;
        x = g.add(x, m)?;
    }
    let x = norm(g, p, "image_encoder.norm", x, eps)?;
    let grid = cfg.grid();
    let t = g.transpose(x)?;
    g.reshape(t, &[d, grid, grid])
}

/// Two-way transformer decoder with the dynamic mask head and IoU head.
/// Returns `(mask_logits [3, M, M], iou_pred [3])`.
pub fn decode_masks<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image_emb: Var,
    prompt_tokens: Var,
) -> Result<(Var, Var)> {
    let d = cfg.decoder_dim;
    let grid = cfg.grid();
    let eps = cfg.layer_norm_eps;
    if g.shape(image_emb) != [d, grid, grid] {
        return dim_err(format!(
            "image embedding must be [{d}, {grid}, {grid}], got {:?}",
            g.shape(image_emb)
        ));
    }
    if g.shape(prompt_tokens) != [2, d] {
        return dim_err(format!(
            "prompt tokens must be [2, {d}], got {:?}",
            g.shape(prompt_tokens)
        ));
    }
    let n_masks = cfg.num_mask_tokens;

    let iou_tok = p.get("mask_decoder.iou_token")?;
    let mask_toks = p.get("mask_decoder.mask_tokens")?;
    let tokens0 = g.concat_rows(&[iou_tok, mask_toks, prompt_tokens])?;

    let b = g.value(p.get(FOURIER_B)?).clone();
    let image_pe = g.constant(dense_positional_encoding(grid, &b)?);
    let flat = g.reshape(image_emb, &[d, grid * grid])?;
    let mut keys = g.transpose(flat)?;
    let mut q = tokens0;

    for l in 0..cfg.decoder_depth {
        let pre = format!("mask_decoder.layers.{l}");

        let h = norm(g, p, &format!("{pre}.norm_self"), q, eps)?;
        let hq = g.add(h, tokens0)?;
        let a = attention(g, p, &format!("{pre}.self_attn"), hq, hq, h, cfg.heads)?;
        q = g.add(q, a)?;

        let h = norm(g, p, &format!("{pre}.norm_t2i"), q, eps)?;
        let hq = g.add(h, tokens0)?;
        let kp = g.add(keys, image_pe)?;
        let a = attention(g, p, &format!("{pre}.cross_t2i"), hq, kp, keys, cfg.heads)?;
        q = g.add(q, a)?;

        let h = norm(g, p, &format!("{pre}.norm_mlp"), q, eps)?;
        let m = mlp2(g, p, &format!("{pre}.mlp"), h)?;
        q = g.add(q, m)?;

        let h = norm(g, p, &format!("{pre}.norm_i2t"), keys, eps)?;
        let hk = g.add(h, image_pe)?;
        let qp = g.add(q, tokens0)?;
        let a = attention(g, p, &format!("{pre}.cross_i2t"), hk, qp, q, cfg.heads)?;
        keys = g.add(keys, a)?;
    }
    let q = norm(g, p, "mask_decoder.final_norm", q, eps)?;

    // image path: [g², D] -> [D, g, g] -> [D/2, 2g, 2g] -> [D/4, 4g, 4g]
    let t = g.transpose(keys)?;
    let fmap = g.reshape(t, &[d, grid, grid])?;
    let up = g.transposed_conv_up2(fmap, p.get("mask_decoder.upscale1.weight")?)?;
    let up = g.add_channel_bias(up, p.get("mask_decoder.upscale1.bias")?)?;
    let up = g.gelu(up);
    let up = g.transposed_conv_up2(up, p.get("mask_decoder.upscale2.weight")?)?;
    let up = g.add_channel_bias(up, p.get("mask_decoder.upscale2.bias")?)?;
    let side = cfg.mask_side();
    let feats = g.reshape(up, &[d / 4, side * side])?;

    let mut weights = Vec::with_capacity(n_masks);
    for m in 0..n_masks {
        let tok = g.slice_rows(q, 1 + m, 2 + m)?;
        weights.push(mlp3(g, p, &format!("mask_decoder.hypernet.{m}"), tok)?);
    }
    let weights = g.concat_rows(&weights)?;
    let logits = g.matmul(weights, feats)?;
    let logits = g.reshape(logits, &[n_masks, side, side])?;

    let iou_tok = g.slice_rows(q, 0, 1)?;
    let iou = mlp3(g, p, "mask_decoder.iou_head", iou_tok)?;
    let iou = g.sigmoid(iou);
    let iou = g.reshape(iou, &[n_masks])?;
    Ok((logits, iou))
}

/// Full box-prompted forward pass on a model-resolution image.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    bbox: &BoundingBox,
    orig_w: usize,
    orig_h: usize,
) -> Result<(Var, Var)> {
    let emb = encode_image(g, p, cfg, image)?;
    let prompt = encode_box_prompt(g, p, bbox, orig_w, orig_h)?;
    decode_masks(g, p, cfg, emb, prompt)
}

/// Inference without gradient recording.
pub fn predict<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    bbox: &BoundingBox,
    orig_w: usize,
    orig_h: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (logits, iou) = forward(&mut g, &p, cfg, image, bbox, orig_w, orig_h)?;
    Ok((g.value(logits).clone(), g.value(iou).clone()))
}

/// Image embedding `[D, g, g]` without gradient recording.
pub fn image_embedding<T: Scalar>(
    params: &ParameterStore<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let emb = encode_image(&mut g, &p, cfg, image)?;
    Ok(g.value(emb).clone())
}
