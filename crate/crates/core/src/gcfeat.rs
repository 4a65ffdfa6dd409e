//! Graph convolution across the channels of a feature map.
//!
//! A `[B, C, H, W]` feature map is re-read as `B*H*W` independent graph
//! signals on `C` nodes (one node per channel), each node carrying `F`
//! features. Every position is convolved with the same aggregator and the
//! same weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};
use crate::wsgraph::Aggregator;

/// Upper bound on ResGCN blocks in one stack.
pub const MAX_RESGCN_BLOCKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcStackConfig {
    /// Graph feature width inside the stack.
    pub f: usize,
    pub blocks: usize,
    /// Mean degree of the WS graph; must be even.
    pub degree: usize,
    pub rho: f64,
    pub graph_seed: u64,
    /// When false the stack skips the 1->F and F->1 graph convolutions and
    /// runs its blocks at width 1.
    pub lift_project: bool,
}

impl Default for GcStackConfig {
    fn default() -> Self {
        Self {
            f: 8,
            blocks: 2,
            degree: 4,
            rho: 0.9,
            graph_seed: 1,
            lift_project: true,
        }
    }
}

impl GcStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks > MAX_RESGCN_BLOCKS {
            return Err(Error::Config(format!(
                "{} ResGCN blocks exceeds the limit of {MAX_RESGCN_BLOCKS}",
                self.blocks
            )));
        }
        if self.degree % 2 == 1 {
            return Err(Error::OddDegree(self.degree));
        }
        if self.f == 0 {
            return Err(Error::Config("graph feature width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1]", self.rho)));
        }
        Ok(())
    }

    /// Feature width seen by the ResGCN blocks.
    pub fn block_width(&self) -> usize {
        if self.lift_project {
            self.f
        } else {
            1
        }
    }

    /// Shapes of the stack's weight matrices in forward order.
    pub fn weight_shapes(&self) -> Vec<[usize; 2]> {
        let w = self.block_width();
        let mut shapes = Vec::new();
        if self.lift_project {
            shapes.push([1, w]);
        }
        shapes.extend(std::iter::repeat_n([w, w], 2 * self.blocks));
        if self.lift_project {
            shapes.push([w, 1]);
        }
        shapes
    }
}

/// Per-pixel graph signals `[positions, nodes, features]` plus the
/// `[B, C, H, W]` shape they came from.
#[derive(Debug, Clone, Copy)]
pub struct NodeTensor<'t, T: Scalar> {
    pub data: Var<'t, T>,
    pub origin_shape: [usize; 4],
}

impl<'t, T: Scalar> NodeTensor<'t, T> {
    pub fn positions(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn nodes(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.data.shape()[2]
    }

    fn with_data(self, data: Var<'t, T>) -> Self {
        Self { data, ..self }
    }
}

/// `[B, C, H, W] -> [B*H*W, C, 1]`.
pub fn fmap_to_nodes<T: Scalar>(x: Var<'_, T>) -> Result<NodeTensor<'_, T>> {
    let &[b, c, h, w] = x.shape().as_slice() else {
        return Err(Error::shape(
            "fmap_to_nodes",
            format!("expected [B, C, H, W], got {:?}", x.shape()),
        ));
    };
    let data = x.permute(&[0, 2, 3, 1])?.reshape(&[b * h * w, c, 1])?;
    Ok(NodeTensor {
        data,
        origin_shape: [b, c, h, w],
    })
}

/// Inverse of [`fmap_to_nodes`]; the feature axis must already be width 1.
pub fn nodes_to_fmap<T: Scalar>(nt: NodeTensor<'_, T>) -> Result<Var<'_, T>> {
    if nt.features() != 1 {
        return Err(Error::Config(format!(
            "node tensor has {} graph features; project to 1 before converting back",
            nt.features()
        )));
    }
    let [b, c, h, w] = nt.origin_shape;
    nt.data.reshape(&[b, h, w, c])?.permute(&[0, 3, 1, 2])
}

/// Aggregator as a constant on `tape`.
pub fn aggregator_var<'t, T: Scalar>(tape: &'t Tape<T>, agg: &Aggregator) -> Var<'t, T> {
    tape.constant(agg.to_tensor())
}

/// `out[p] = T * X[p] * theta` for every position `p`.
pub fn graph_conv<'t, T: Scalar>(
    nt: NodeTensor<'t, T>,
    agg: Var<'t, T>,
    theta: Var<'t, T>,
) -> Result<NodeTensor<'t, T>> {
    let n = nt.nodes();
    if agg.shape() != [n, n] {
        return Err(Error::Config(format!(
            "aggregator is {:?} but the feature map has {n} channels",
            agg.shape()
        )));
    }
    let ts = theta.shape();
    if ts.len() != 2 || ts[0] != nt.features() {
        return Err(Error::shape(
            "graph_conv",
            format!(
                "weights {ts:?} do not accept {} input features",
                nt.features()
            ),
        ));
    }
    // Apply the aggregator on whichever side has fewer features.
    let out = if ts[1] > ts[0] {
        agg.matmul(nt.data)?.matmul(theta)?
    } else {
        agg.matmul(nt.data.matmul(theta)?)?
    };
    Ok(nt.with_data(out))
}

/// `graph_conv(relu(graph_conv(x, w1)), w2) + x`.
pub fn resgcn_block<'t, T: Scalar>(
    nt: NodeTensor<'t, T>,
    agg: Var<'t, T>,
    w1: Var<'t, T>,
    w2: Var<'t, T>,
) -> Result<NodeTensor<'t, T>> {
    let f = nt.features();
    let (s1, s2) = (w1.shape(), w2.shape());
    if s1.len() != 2 || s2.len() != 2 || s1[0] != f || s2[1] != f || s1[1] != s2[0] {
        return Err(Error::shape(
            "resgcn_block",
            format!("weights {s1:?} and {s2:?} cannot form a residual branch on {f} features"),
        ));
    }
    let h = graph_conv(nt, agg, w1)?;
    let h = h.with_data(h.data.relu());
    let h = graph_conv(h, agg, w2)?;
    Ok(nt.with_data(h.data.add(nt.data)?))
}

/// Feature map in, feature map of the same shape out:
/// lift (1->F), `cfg.blocks` ResGCN blocks, project (F->1).
///
/// `weights` follow [`GcStackConfig::weight_shapes`].
pub fn gc_stack_forward<'t, T: Scalar>(
    x: Var<'t, T>,
    cfg: &GcStackConfig,
    agg: Var<'t, T>,
    weights: &[Var<'t, T>],
) -> Result<Var<'t, T>> {
    let expected = cfg.weight_shapes();
    if weights.len() != expected.len() {
        return Err(Error::Config(format!(
            "GC stack expects {} weight matrices, got {}",
            expected.len(),
            weights.len()
        )));
    }
    let c = x.shape().get(1).copied().unwrap_or(0);
    if agg.shape() != [c, c] {
        return Err(Error::Config(format!(
            "graph has {} nodes but the feature map has {c} channels",
            agg.shape()[0]
        )));
    }
    let mut w = weights.iter().copied();
    let mut nt = fmap_to_nodes(x)?;
    if cfg.lift_project {
        nt = graph_conv(nt, agg, w.next().unwrap())?;
    }
    for _ in 0..cfg.blocks {
        let (w1, w2) = (w.next().unwrap(), w.next().unwrap());
        nt = resgcn_block(nt, agg, w1, w2)?;
    }
    if cfg.lift_project {
        nt = graph_conv(nt, agg, w.next().unwrap())?;
    }
    nodes_to_fmap(nt)
}
