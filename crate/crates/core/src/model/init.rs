use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::config::ModelConfig;
use crate::error::Result;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FOURIER_B: &str = "prompt_encoder.fourier_B";
const INIT_STD: f64 = 0.02;
/// Scale of learned token and type embeddings.
const EMBED_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, 0.02²) truncated at ±2σ.
    TruncNormal,
    /// N(0, 0.02²).
    Normal,
    Zeros,
    Ones,
    /// N(0, σ²) with the config's Fourier scale; never trained.
    Fourier,
    /// N(0, 0.1²), for learned token and type embeddings.
    Embedding,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.push(format!("{prefix}.weight"), &[fan_in, fan_out], Init::TruncNormal);
        self.push(format!("{prefix}.bias"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.push(format!("{prefix}.gamma"), &[dim], Init::Ones);
        self.push(format!("{prefix}.beta"), &[dim], Init::Zeros);
    }

    fn attention(&mut self, prefix: &str, dim: usize) {
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            self.linear(&format!("{prefix}.{proj}"), dim, dim);
        }
    }

    fn mlp3(&mut self, prefix: &str, dim: usize, out: usize) {
        self.linear(&format!("{prefix}.fc1"), dim, dim);
        self.linear(&format!("{prefix}.fc2"), dim, dim);
        self.linear(&format!("{prefix}.fc3"), dim, out);
    }
}

/// Every tensor of the model, in declaration order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let g = cfg.grid();
    let mut s = Specs(Vec::new());

    s.linear("image_encoder.patch_embed", 3 * p * p, d);
    s.push("image_encoder.pos_embed".into(), &[g * g, d], Init::Normal);
    for b in 0..cfg.depth {
        let pre = format!("image_encoder.blocks.{b}");
        s.norm(&format!("{pre}.norm1"), d);
        s.linear(&format!("{pre}.attn.qkv"), d, 3 * d);
        s.linear(&format!("{pre}.attn.proj"), d, d);
        s.norm(&format!("{pre}.norm2"), d);
        s.linear(&format!("{pre}.mlp.fc1"), d, cfg.mlp_ratio * d);
        s.linear(&format!("{pre}.mlp.fc2"), cfg.mlp_ratio * d, d);
    }
    s.norm("image_encoder.norm", d);

    s.push(FOURIER_B.into(), &[cfg.fourier_freqs, 2], Init::Fourier);
    for token in ["corner_tl", "corner_br", "point_fg", "point_bg"] {
        s.push(format!("prompt_encoder.{token}"), &[1, d], Init::Embedding);
    }

    s.push("mask_decoder.iou_token".into(), &[1, d], Init::Embedding);
    s.push(
        "mask_decoder.mask_tokens".into(),
        &[cfg.num_mask_tokens, d],
        Init::Embedding,
    );
    for l in 0..cfg.decoder_depth {
        let pre = format!("mask_decoder.layers.{l}");
        s.norm(&format!("{pre}.norm_self"), d);
        s.attention(&format!("{pre}.self_attn"), d);
        s.norm(&format!("{pre}.norm_t2i"), d);
        s.attention(&format!("{pre}.cross_t2i"), d);
        s.norm(&format!("{pre}.norm_mlp"), d);
        s.linear(&format!("{pre}.mlp.fc1"), d, cfg.decoder_mlp_ratio * d);
        s.linear(&format!("{pre}.mlp.fc2"), cfg.decoder_mlp_ratio * d, d);
        s.norm(&format!("{pre}.norm_i2t"), d);
        s.attention(&format!("{pre}.cross_i2t"), d);
    }
    s.norm("mask_decoder.final_norm", d);
    s.push(
        "mask_decoder.upscale1.weight".into(),
        &[d, d / 2, 2, 2],
        Init::TruncNormal,
    );
    s.push("mask_decoder.upscale1.bias".into(), &[d / 2], Init::Zeros);
    s.push(
        "mask_decoder.upscale2.weight".into(),
        &[d / 2, d / 4, 2, 2],
        Init::TruncNormal,
    );
    s.push("mask_decoder.upscale2.bias".into(), &[d / 4], Init::Zeros);
    for m in 0..cfg.num_mask_tokens {
        s.mlp3(&format!("mask_decoder.hypernet.{m}"), d, d / 4);
    }
    s.mlp3("mask_decoder.iou_head", d, cfg.num_mask_tokens);
    s.0
}

fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

/// Deterministic random initialisation from `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fourier = Normal::new(0.0, cfg.fourier_scale).expect("validated scale");
    let mut store = ParameterStore::new();
    for spec in param_specs(cfg) {
        let numel: usize = spec.shape.iter().product();
        let values: Vec<T> = (0..numel)
            .map(|_| {
                T::lit(match spec.init {
                    Init::TruncNormal => trunc_normal(&mut rng),
                    Init::Normal => rng.sample::<f64, _>(StandardNormal) * INIT_STD,
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::Fourier => fourier.sample(&mut rng),
                    Init::Embedding => rng.sample::<f64, _>(StandardNormal) * EMBED_STD,
                })
            })
            .collect();
        let t = Tensor::new(&spec.shape, values)?;
        if spec.init == Init::Fourier {
            store.insert_constant(spec.name, t)?;
        } else {
            store.insert(spec.name, t)?;
        }
    }
    Ok(store)
}
