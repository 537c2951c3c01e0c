//! Dense tensors with reverse-mode differentiation.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a [`Node`] holding
//! the forward value and enough metadata to replay the op in reverse.
//! [`Tensor`] is a cheap handle (graph + node id). Parameters live outside
//! the graph (see [`crate::params`]) and are bound as leaves each step, so
//! the tape is rebuilt per training step and never grows across steps.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

mod backward;
mod gradcheck;
mod ops;

pub use backward::Gradients;
pub use gradcheck::finite_diff_check;

/// Recorded operation. Fields are node ids of the inputs plus whatever the
/// backward replay needs.
#[derive(Debug, Clone)]
pub(crate) enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    /// y = a*x + b elementwise.
    Affine {
        x: usize,
        a: F,
    },
    /// Batched matrix product over matching leading dims.
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        axes: Vec<usize>,
    },
    /// 3x3 convolution, stride 1, zero padding 1, NCHW.
    Conv3x3 {
        x: usize,
        kernel: usize,
        bias: usize,
    },
    /// Bilinear resampling with half-pixel centers; target extents are the
    /// output node's shape.
    Bilinear {
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    /// Keep-top-k masking fused with softmax along the last axis; masked
    /// entries are exactly zero in the output. Ties route to the lowest index.
    TopKSoftmax {
        x: usize,
    },
    Sigmoid(usize),
    Softplus(usize),
    Gelu(usize),
    SumAxis {
        x: usize,
        axis: usize,
        mean: bool,
    },
    SumAll {
        x: usize,
        mean: bool,
    },
    /// y = x + small, small broadcast over leading axes (suffix shapes match).
    AddBroadcast {
        x: usize,
        small: usize,
    },
    /// y[b, ...] = x[b, ...] * s[b].
    MulBatchScalar {
        x: usize,
        s: usize,
    },
    /// Gather along the last axis.
    SelectLast {
        x: usize,
        idx: Vec<usize>,
    },
    /// Gather along the first axis.
    SelectBatch {
        x: usize,
        idx: Vec<usize>,
    },
    /// Inverse of SelectBatch: scatter rows into a zero tensor of `batch` rows.
    ScatterBatch {
        x: usize,
        idx: Vec<usize>,
    },
    /// Stack `copies` copies of x along a new leading axis.
    ExpandLeading {
        x: usize,
        copies: usize,
    },
    /// Layer normalization over the last axis with learned gain/bias.
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: F,
    },
}

#[derive(Debug)]
pub(crate) struct Node<F> {
    pub data: Vec<F>,
    pub shape: Vec<usize>,
    pub rg: bool,
    pub op: Op<F>,
}

/// Shared tape of executed ops.
pub struct Graph<F: Scalar> {
    pub(crate) nodes: Rc<RefCell<Vec<Node<F>>>>,
}

impl<F: Scalar> Clone for Graph<F> {
    fn clone(&self) -> Self {
        Graph {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Graph`].
pub struct Tensor<F: Scalar> {
    pub(crate) graph: Graph<F>,
    pub(crate) id: usize,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, len, inner) decomposition for iteration along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Bilinear source taps for one axis with half-pixel alignment, clamped to
/// the border. Returns (lo index, hi index, hi weight).
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize, o: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Append a computed node; rejects NaN always, and Inf unless the op
    /// legitimately produces it.
    pub(crate) fn push(
        &self,
        data: Vec<F>,
        shape: Vec<usize>,
        rg: bool,
        op: Op<F>,
        opname: &'static str,
        allow_inf: bool,
    ) -> Result<Tensor<F>> {
        debug_assert_eq!(data.len(), numel(&shape));
        for (i, v) in data.iter().enumerate() {
            if v.is_nan() || (!allow_inf && v.is_infinite()) {
                return Err(Error::NonFinite {
                    op: opname,
                    detail: format!("element {i} of shape {shape:?} is {v}"),
                });
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            data,
            shape,
            rg,
            op,
        });
        Ok(Tensor {
            graph: self.clone(),
            id: nodes.len() - 1,
        })
    }

    /// New leaf. NaN is rejected; +/-inf is allowed (softmax masking uses it).
    pub fn leaf(&self, data: Vec<F>, shape: &[usize], requires_grad: bool) -> Result<Tensor<F>> {
        if data.len() != numel(shape) {
            return Err(Error::Dimension(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                op: "leaf",
                detail: "NaN in leaf data".into(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            data,
            shape: shape.to_vec(),
            rg: requires_grad,
            op: Op::Leaf,
        });
        Ok(Tensor {
            graph: self.clone(),
            id: nodes.len() - 1,
        })
    }

    pub fn constant(&self, data: Vec<F>, shape: &[usize]) -> Result<Tensor<F>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: F) -> Tensor<F> {
        self.leaf(vec![v], &[1], false).expect("scalar leaf")
    }

    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Tensor<F> {
        self.leaf(vec![F::zero(); numel(shape)], shape, requires_grad)
            .expect("zeros leaf")
    }

    pub(crate) fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node<F>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[id])
    }
}

impl<F: Scalar> Tensor<F> {
    pub fn graph(&self) -> Graph<F> {
        self.graph.clone()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_node(self.id, |n| n.shape.clone())
    }

    pub fn numel(&self) -> usize {
        self.graph.with_node(self.id, |n| n.data.len())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.with_node(self.id, |n| n.rg)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<F> {
        self.graph.with_node(self.id, |n| n.data.clone())
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> F {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        assert_eq!(n.data.len(), 1, "item() on tensor of {} elements", n.data.len());
        n.data[0]
    }
}
