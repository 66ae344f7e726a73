//! Reverse-mode differentiation over a per-example tape.
//!
//! Each operation pushes a node holding its value plus a closure that, given
//! the gradient of the output, emits contributions to its parents. The
//! backward pass visits nodes in reverse creation order (a topological order
//! by construction) and accumulates in that fixed order, so gradients are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &mut dyn FnMut(usize, Tensor<T>))>;

struct TapeNode<T: Scalar> {
    value: Tensor<T>,
    backward: Option<BackwardFn<T>>,
}

/// Computation graph for one scalar loss.
pub struct Tape<T: Scalar> {
    nodes: Vec<TapeNode<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> &Tensor<T> {
        &self.grads[var.0]
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, backward: Option<BackwardFn<T>>) -> Var {
        self.nodes.push(TapeNode { value, backward });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Insert an input node (parameter or data). Leaves receive gradients but
    /// propagate nothing further.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let out = ops::conv2d_forward(&xv, &wv, &bv, stride, padding)?;
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.push(
            out,
            Some(Box::new(move |gout, emit| {
                let (dx, dw, db) = ops::conv2d_backward(&xv, &wv, gout, stride, padding);
                emit(xi, dx);
                emit(wi, dw);
                emit(bi, db);
            })),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let out = ops::relu_forward(&xv);
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |gout, emit| {
                emit(xi, ops::relu_backward(&xv, gout));
            })),
        )
    }

    pub fn maxpool(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let (out, argmax) = ops::maxpool_forward(&xv, window)?;
        let shape = xv.shape().to_vec();
        let xi = x.0;
        Ok(self.push(
            out,
            Some(Box::new(move |gout, emit| {
                emit(xi, ops::maxpool_backward(&shape, &argmax, gout));
            })),
        ))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let n = xv.numel();
        let out = xv.reshape(vec![n]).expect("flatten");
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |gout, emit| {
                emit(xi, gout.reshape(shape.clone()).expect("flatten backward"));
            })),
        )
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = self.value(b).clone();
        let out = ops::dense_forward(&xv, &wv, &bv)?;
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.push(
            out,
            Some(Box::new(move |gout, emit| {
                let (dx, dw, db) = ops::dense_backward(&xv, &wv, gout);
                emit(xi, dx);
                emit(wi, dw);
                emit(bi, db);
            })),
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits).clone();
        let loss = ops::softmax_cross_entropy(&lv, label)?;
        let li = logits.0;
        Ok(self.push(
            Tensor::scalar(loss),
            Some(Box::new(move |gout, emit| {
                emit(li, ops::softmax_cross_entropy_backward(&lv, label, gout.scalar_value()));
            })),
        ))
    }

    /// Cosine similarity of a variable vector against a constant vector.
    pub fn cosine_similarity(&mut self, u: Var, v: &Tensor<T>) -> Result<Var> {
        let uv = self.value(u).clone();
        let c = ops::cosine_similarity(uv.data(), v.data())?;
        let vv = v.clone();
        let ui = u.0;
        let shape = uv.shape().to_vec();
        Ok(self.push(
            Tensor::scalar(c),
            Some(Box::new(move |gout, emit| {
                let du = ops::cosine_similarity_backward_u(uv.data(), vv.data(), gout.scalar_value());
                emit(ui, Tensor::new(shape.clone(), du).expect("cosine du shape"));
            })),
        ))
    }

    /// Single channel `[H,W]` of a `[K,H,W]` tensor.
    pub fn channel(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || k >= xv.shape()[0] {
            return Err(Error::shape(
                "channel",
                format!("channel {k} of {:?}", xv.shape()),
            ));
        }
        let (kk, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let plane = h * w;
        let data = xv.data()[k * plane..(k + 1) * plane].to_vec();
        let out = Tensor::new(vec![h, w], data)?;
        let xi = x.0;
        Ok(self.push(
            out,
            Some(Box::new(move |gout, emit| {
                let mut dx = vec![T::zero(); kk * plane];
                dx[k * plane..(k + 1) * plane].copy_from_slice(gout.data());
                emit(xi, Tensor::new(vec![kk, h, w], dx).expect("channel dx shape"));
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av;
        out.add_assign(bv);
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(
            out,
            Some(Box::new(move |gout, emit| {
                emit(ai, gout.clone());
                emit(bi, gout.clone());
            })),
        ))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale_in_place(k);
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |gout, emit| {
                let mut g = gout.clone();
                g.scale_in_place(k);
                emit(xi, g);
            })),
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let total = xv.sum();
        let shape = xv.shape().to_vec();
        let xi = x.0;
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |gout, emit| {
                let g = gout.scalar_value();
                let n: usize = shape.iter().product();
                emit(xi, Tensor::new(shape.clone(), vec![g; n]).expect("sum dx shape"));
            })),
        )
    }

    /// Reverse pass from a scalar loss; returns one gradient per node.
    /// Nodes that do not reach the loss keep an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("seed must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Tensor<T>> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0] = Tensor::new(self.nodes[loss.0].value.shape().to_vec(), vec![T::one()])
            .expect("seed gradient");
        for i in (0..=loss.0).rev() {
            if let Some(back) = &self.nodes[i].backward {
                let gout = std::mem::replace(&mut grads[i], Tensor::zeros(&[]));
                back(&gout, &mut |parent, contrib| {
                    grads[parent].add_assign(&contrib);
                });
                grads[i] = gout;
            }
        }
        Ok(Gradients { grads })
    }
}
