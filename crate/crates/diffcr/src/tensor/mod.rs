//! Reverse-mode autodiff over `ndarray` arrays.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and a
//! boxed backward closure. Nodes only ever reference earlier nodes, so the
//! tape order is already topological and [`Graph::backward`] is a single
//! reverse sweep. Values are `Arc`-shared `f64` arrays; backward closures
//! capture the `Arc`s they need instead of borrowing the graph.
//!
//! Parameters live outside the graph in a [`ParamStore`] and are bound into
//! a tape with [`Graph::param`]; binding is deduplicated so a parameter used
//! twice accumulates both gradient contributions on one node.
//!
//! Everything is `f64`. The networks here are small enough that the extra
//! width costs little, and it keeps finite-difference checks tight.

mod conv;
mod fft;
pub mod init;
pub mod nn;
mod ops;
mod params;

pub use fft::{dft2, radial_high_mask};
pub use ops::{erfc, phi, phi_pdf, shape4};
pub use params::{cosine_lr, Adam, ParamGroup, ParamId, ParamStore};

use ndarray::ArrayD;
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Node {
    value: Arc<ArrayD<f64>>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node: no gradient flows out of it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Bind a parameter as a leaf that collects gradient. Binding the same
    /// parameter twice returns the existing node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), None);
        self.bound.insert(id, v);
        self.bindings.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_arc(&self, v: Var) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `loss`, seeded with ones. Returns per-node
    /// gradients; use [`Gradients::of`] or [`Gradients::params`].
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &self.nodes[i].back {
                let (before, _) = grads.split_at_mut(i);
                let mut sink = |p: usize, contrib: ArrayD<f64>| {
                    debug_assert!(p < i, "backward edge must point to an earlier node");
                    match &mut before[p] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                };
                back(&g, &mut sink);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Parameters bound into this tape, in binding order.
    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }
}

pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every bound parameter that received one.
    pub fn params(&self, graph: &Graph) -> Vec<(ParamId, ArrayD<f64>)> {
        graph
            .bindings
            .iter()
            .filter_map(|&(pid, var)| self.grads[var.0].clone().map(|g| (pid, g)))
            .collect()
    }
}

#[cfg(test)]
mod grad_check;
