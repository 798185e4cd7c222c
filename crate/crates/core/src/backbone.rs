//! Four-stage convolutional encoder producing the feature pyramid.
//!
//! Stage 1 is conv3×3 → ELU at input resolution; each later stage halves
//! the extents with 2 × 2 average pooling, then applies conv3×3 → ELU with
//! twice the channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Conv;
use crate::params::ParamStore;

/// Stage outputs F1..F4 as graph values of shape [H_s, W_s, C_s].
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub f4: Var,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [Var; 4] {
        [self.f1, self.f2, self.f3, self.f4]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: [Conv; 4],
    c1: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, c1: usize, rng: &mut impl Rng) -> Self {
        let widths = [3, c1, 2 * c1, 4 * c1, 8 * c1];
        let stages = std::array::from_fn(|s| Conv::new(store, &format!("backbone.stage{}", s + 1), 3, widths[s], widths[s + 1], rng));
        Self { stages, c1 }
    }

    /// Channel counts of F1..F4.
    pub fn widths(&self) -> [usize; 4] {
        [self.c1, 2 * self.c1, 4 * self.c1, 8 * self.c1]
    }

    /// Encodes an [H, W, 3] image; H and W must be multiples of 8.
    pub fn encode_frame(&self, g: &mut Graph, image: Var) -> Result<FeaturePyramid> {
        let (h, w, c) = g.value(image).hwc("encode_frame")?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Config(format!(
                "image is {h}×{w}; pad height and width up to multiples of 8"
            )));
        }
        if c != 3 {
            return Err(crate::error::shape_err("encode_frame", "channels (axis 2)", 3, c));
        }
        let mut x = image;
        let mut out = [image; 4];
        for (s, conv) in self.stages.iter().enumerate() {
            if s > 0 {
                x = g.avgpool2(x)?;
            }
            let y = conv.forward(g, x)?;
            x = g.elu(y)?;
            out[s] = x;
        }
        Ok(FeaturePyramid {
            f1: out[0],
            f2: out[1],
            f3: out[2],
            f4: out[3],
        })
    }
}
