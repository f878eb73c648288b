use crate::error::{dim_err, Error, Result};
use crate::model::BoundingBox;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Binary `H × W` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return dim_err(format!(
                "mask {height}x{width} cannot hold {} values",
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width]).expect("positive extents")
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, data).expect("positive extents")
    }

    /// Foreground where `value > threshold`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, threshold: T) -> Result<Self> {
        let (h, w) = t.dims2()?;
        if t.rank() != 2 {
            return dim_err(format!("mask tensor must be [H, W], got {:?}", t.shape()));
        }
        Self::new(h, w, t.data().iter().map(|&v| v > threshold).collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width],
            self.data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask extents are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return dim_err(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            ));
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Self::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        )
    }

    /// 8-connected foreground components, ordered by their first pixel in
    /// raster order.
    pub fn connected_components(&self) -> Vec<BinaryMask> {
        let (h, w) = (self.height, self.width);
        let mut label = vec![usize::MAX; h * w];
        let mut comps = Vec::new();
        let mut stack = Vec::new();
        for start in 0..h * w {
            if !self.data[start] || label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut comp = BinaryMask::empty(h, w);
            label[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                comp.data[i] = true;
                let (r, c) = ((i / w) as isize, (i % w) as isize);
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let j = nr as usize * w + nc as usize;
                        if self.data[j] && label[j] == usize::MAX {
                            label[j] = id;
                            stack.push(j);
                        }
                    }
                }
            }
            comps.push(comp);
        }
        comps
    }
}

/// Tight inclusive box around the foreground.
pub fn extract_box(mask: &BinaryMask) -> Result<BoundingBox> {
    let mut bbox: Option<BoundingBox> = None;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if !mask.get(r, c) {
                continue;
            }
            bbox = Some(match bbox {
                None => BoundingBox::new(c, r, c, r),
                Some(b) => BoundingBox::new(
                    b.x_min.min(c),
                    b.y_min.min(r),
                    b.x_max.max(c),
                    b.y_max.max(r),
                ),
            });
        }
    }
    bbox.ok_or_else(|| {
        Error::EmptyMask(format!(
            "{}x{} mask has no foreground pixel",
            mask.height(),
            mask.width()
        ))
    })
}
