use serde::{Deserialize, Serialize};

use super::init::FOURIER_B;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::BoundParams;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Layout tag of the Fourier features, recorded in checkpoints. Projections
/// are `z = [B·(x, y) ; B·(x, −y)]` (2F values) and the features are
/// `[sin 2πz ; cos 2πz]`, frequency-major within each block.
pub const FOURIER_LAYOUT: &str = "sin-cos/frequency-major/[B(x,y);B(x,-y)]/v1";

/// Inclusive pixel box in an image frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min > self.x_max
            || self.y_min > self.y_max
            || self.x_max >= width
            || self.y_max >= height
        {
            return Err(Error::Range(format!(
                "box {self:?} is not inside a {width}x{height} frame"
            )));
        }
        Ok(())
    }

    /// Corners normalised by `(width − 1, height − 1)` into `[0, 1]²`.
    pub fn normalized_corners(&self, width: usize, height: usize) -> Result<[(f64, f64); 2]> {
        self.validate(width, height)?;
        let norm = |v: usize, dim: usize| {
            if dim <= 1 {
                0.0
            } else {
                v as f64 / (dim - 1) as f64
            }
        };
        Ok([
            (norm(self.x_min, width), norm(self.y_min, height)),
            (norm(self.x_max, width), norm(self.y_max, height)),
        ])
    }
}

/// Fourier features of a normalised point using the `F × 2` frequency
/// matrix `b`; returns `4F` values laid out per [`FOURIER_LAYOUT`].
pub fn fourier_point_encoding<T: Scalar>(point: (f64, f64), b: &Tensor<T>) -> Result<Tensor<T>> {
    let (x, y) = point;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::Range(format!(
            "point ({x}, {y}) lies outside the unit square"
        )));
    }
    let f = match b.shape() {
        [f, 2] => *f,
        s => {
            return Err(Error::Dimension(format!(
                "fourier matrix must be [F, 2], got {s:?}"
            )))
        }
    };
    let tau = std::f64::consts::TAU;
    let bd = b.data();
    let z: Vec<f64> = (0..f)
        .map(|i| bd[2 * i].to_f64_lossy() * x + bd[2 * i + 1].to_f64_lossy() * y)
        .chain((0..f).map(|i| bd[2 * i].to_f64_lossy() * x - bd[2 * i + 1].to_f64_lossy() * y))
        .collect();
    let mut out = Vec::with_capacity(4 * f);
    out.extend(z.iter().map(|&v| T::lit((tau * v).sin())));
    out.extend(z.iter().map(|&v| T::lit((tau * v).cos())));
    Tensor::new(&[4 * f], out)
}

/// Fourier encoding of every patch-grid cell centre, `[g², 4F]`, row-major
/// over the grid.
pub fn dense_positional_encoding<T: Scalar>(grid: usize, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut width = 0;
    for r in 0..grid {
        for c in 0..grid {
            let pt = ((c as f64 + 0.5) / grid as f64, (r as f64 + 0.5) / grid as f64);
            let e = fourier_point_encoding(pt, b)?;
            width = e.numel();
            data.extend_from_slice(e.data());
        }
    }
    Tensor::new(&[grid * grid, width], data)
}

/// Two prompt tokens `[2, D]`: the Fourier encodings of the top-left and
/// bottom-right corners plus their learned corner-type embeddings.
pub fn encode_box_prompt<T: Scalar>(
    graph: &mut Graph<T>,
    params: &BoundParams,
    bbox: &BoundingBox,
    orig_w: usize,
    orig_h: usize,
) -> Result<Var> {
    let [tl, br] = bbox.normalized_corners(orig_w, orig_h)?;
    let b = graph.value(params.get(FOURIER_B)?).clone();
    let e_tl = fourier_point_encoding(tl, &b)?;
    let e_br = fourier_point_encoding(br, &b)?;
    let d = e_tl.numel();
    let mut both = e_tl.into_data();
    both.extend(e_br.into_data());
    let fourier = graph.constant(Tensor::new(&[2, d], both)?);
    let corner_tl = params.get("prompt_encoder.corner_tl")?;
    let corner_br = params.get("prompt_encoder.corner_br")?;
    let types = graph.concat_rows(&[corner_tl, corner_br])?;
    graph.add(fourier, types)
}
