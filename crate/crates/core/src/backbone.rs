//! Desk-scale visual feature extractors: a small convolutional image
//! backbone emitting multi-scale feature maps, and a temporal squeezing
//! network for pre-extracted video frame features.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv1d, Conv2d, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Spatial or temporal layout of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Image { h: usize, w: usize },
    Video { t: usize },
}

impl Layout {
    pub fn locations(&self) -> usize {
        match self {
            Layout::Image { h, w } => h * w,
            Layout::Video { t } => *t,
        }
    }
}

/// A materialized feature map: `M x C` with `M` locations. Image maps are
/// flattened row-major over (H, W): location index `i = y * W + x`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub layout: Layout,
    pub channels: usize,
    pub scale_id: usize,
    /// `[M, C]`
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(layout: Layout, scale_id: usize, data: Tensor) -> Result<Self> {
        if data.shape().len() != 2 || data.shape()[0] != layout.locations() {
            return Err(Error::ShapeMismatch(format!(
                "feature map {:?} with data shape {:?}",
                layout,
                data.shape()
            )));
        }
        let channels = data.shape()[1];
        Ok(Self {
            layout,
            channels,
            scale_id,
            data,
        })
    }
}

/// Flattens `[H, W, C]` into `[H*W, C]`, row-major over (H, W).
pub fn flatten_spatial(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "flatten_spatial expects [H,W,C], got {:?}",
            x.shape()
        )));
    }
    x.reshape(vec![x.shape()[0] * x.shape()[1], x.shape()[2]])
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if x.shape().len() != 2 || x.shape()[0] != h * w {
        return Err(Error::ShapeMismatch(format!(
            "unflatten of {:?} into {h}x{w}",
            x.shape()
        )));
    }
    x.reshape(vec![h, w, x.shape()[1]])
}

/// A feature map still on the tape.
#[derive(Debug)]
pub struct ScaleFeat {
    /// `[M, C]`
    pub var: Var,
    pub layout: Layout,
    pub channels: usize,
    pub scale_id: usize,
}

/// Toy convolutional backbone: a stack of stride-2 3x3 stages with a 1x1
/// head per scale, emitting `levels` maps of strictly decreasing
/// resolution. A stage whose input and output shapes match gains an
/// additive skip connection.
pub struct ToyImageBackbone {
    stages: Vec<Conv2d>,
    heads: Vec<Conv2d>,
    pub levels: usize,
    pub c_in: usize,
    pub c_feat: usize,
}

impl ToyImageBackbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngState,
        c_in: usize,
        c_feat: usize,
        levels: usize,
    ) -> Self {
        let mut stages = Vec::with_capacity(levels);
        let mut heads = Vec::with_capacity(levels);
        for l in 0..levels {
            let ci = if l == 0 { c_in } else { c_feat };
            let down = Conv2d::new(
                store,
                rng,
                &format!("backbone.stage{l}"),
                3,
                3,
                ci,
                c_feat,
                2,
                1,
            );
            if l > 0 {
                // Deeper downsampling convolutions start as a
                // channel-preserving blur so the scale pyramid begins as
                // downsampled copies of the first map; the random component
                // is kept small so the deep heads' early gradients don't
                // swamp the shared trunk.
                let w = store.get_mut(down.w).value.data_mut();
                for kh in 0..3 {
                    for kw in 0..3 {
                        for c in 0..c_feat {
                            for co in 0..c_feat {
                                let idx = ((kh * 3 + kw) * c_feat + c) * c_feat + co;
                                w[idx] *= 0.1;
                                if c == co {
                                    w[idx] += 1.0 / 9.0;
                                }
                            }
                        }
                    }
                }
            }
            stages.push(down);
            heads.push(Conv2d::new(
                store,
                rng,
                &format!("backbone.head{l}"),
                1,
                1,
                c_feat,
                c_feat,
                1,
                0,
            ));
        }
        Self {
            stages,
            heads,
            levels,
            c_in,
            c_feat,
        }
    }

    /// Runs the backbone on an `[H, W, C_in]` input, returning `levels`
    /// feature maps, deepest last, `scale_id` 1..levels.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<ScaleFeat>> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "backbone expects [H,W,{}], got {:?}",
                self.c_in, shape
            )));
        }
        let min_side = 1usize << self.levels;
        if shape[0] < min_side || shape[1] < min_side {
            return Err(Error::MalformedInput(format!(
                "input {}x{} too small for {} scales; minimum is {min_side}x{min_side}",
                shape[0], shape[1], self.levels
            )));
        }
        let mut maps = Vec::with_capacity(self.levels);
        let mut cur = x;
        for (l, stage) in self.stages.iter().enumerate() {
            let before = g.value(cur).shape().to_vec();
            let mut y = stage.forward(g, cur)?;
            if g.value(y).shape() == before.as_slice() {
                y = g.add(y, cur)?; // additive skip when shapes permit
            }
            cur = g.relu(y);
            let out_shape = g.value(cur).shape().to_vec();
            let (h, w) = (out_shape[0], out_shape[1]);
            let flat = g.reshape(cur, vec![h * w, self.c_feat])?;
            let head_out = self.heads[l].forward_flat(g, flat)?;
            maps.push(ScaleFeat {
                var: head_out,
                layout: Layout::Image { h, w },
                channels: self.c_feat,
                scale_id: l + 1,
            });
        }
        Ok(maps)
    }
}

impl Conv2d {
    /// 1x1 convolution applied as a per-location linear map on `[M, C]`.
    fn forward_flat(&self, g: &mut Graph, x: Var) -> Result<Var> {
        debug_assert_eq!((self.kh, self.kw), (1, 1));
        let w = g.param(self.w);
        let b = g.param(self.b);
        let w2 = g.reshape(w, vec![self.c_in, self.c_out])?;
        let y = g.matmul(x, w2)?;
        g.add_row_broadcast(y, b)
    }
}

/// Temporal squeezing network: 4 successive 1-D convolution + average
/// pooling stages reducing `T_0` frames to `T_0 / pool^4` (ceil on
/// remainders).
pub struct SNet {
    stages: Vec<Conv1d>,
    pub pool: usize,
    pub c_in: usize,
    pub c_feat: usize,
}

pub const SNET_STAGES: usize = 4;

impl SNet {
    pub fn new(store: &mut ParamStore, rng: &mut RngState, c_in: usize, c_feat: usize, pool: usize) -> Self {
        let stages = (0..SNET_STAGES)
            .map(|l| {
                let ci = if l == 0 { c_in } else { c_feat };
                Conv1d::new(store, rng, &format!("snet.stage{l}"), 3, ci, c_feat, 1)
            })
            .collect();
        Self {
            stages,
            pool,
            c_in,
            c_feat,
        }
    }

    pub fn cumulative_pool(&self) -> usize {
        self.pool.pow(SNET_STAGES as u32)
    }

    /// Squeezes `[T0, C_in]` frame features to a `[T, C]` map, `scale_id` 1.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ScaleFeat> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.c_in {
            return Err(Error::ShapeMismatch(format!(
                "snet expects [T,{}], got {:?}",
                self.c_in, shape
            )));
        }
        if shape[0] < self.cumulative_pool() {
            return Err(Error::MalformedInput(format!(
                "{} frames is fewer than the cumulative pooling factor {}",
                shape[0],
                self.cumulative_pool()
            )));
        }
        let mut cur = x;
        for stage in &self.stages {
            let y = stage.forward(g, cur)?;
            let y = g.relu(y);
            cur = g.avg_pool1d(y, self.pool)?;
        }
        let t = g.value(cur).shape()[0];
        Ok(ScaleFeat {
            var: cur,
            layout: Layout::Video { t },
            channels: self.c_feat,
            scale_id: 1,
        })
    }
}
