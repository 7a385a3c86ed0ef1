//! Reverse-mode differentiation over a recorded operation list.
//!
//! A [`Graph`] records every operation applied to its variables. Nodes are
//! appended in evaluation order, so walking the list backwards is a
//! topological traversal and each node is visited exactly once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops::{self, Elementwise};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Named trainable tensors, kept in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("params", format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid("params", format!("no parameter named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    AvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Softmax(Var, usize),
    Upsample(Var),
    Elementwise(Var, Var, Elementwise),
    Concat(Vec<Var>, usize),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Relu(Var),
    Scale(Var, T),
    Sum(Var),
    Blend {
        a: Var,
        b: Var,
        weight_a: Var,
        weight_b: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<u8>,
        clamp: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation recorder for one forward pass.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients keyed by parameter name.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Registers `name` from `store` as a trainable leaf.
    pub fn param_from(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store.get(name)?.clone();
        Ok(self.param(name, t))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
            stride,
            padding,
        )?;
        let g = self.grad_any(&[input, kernel, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            g,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(input))?;
        let g = self.grad_any(&[input]);
        Ok(self.push(out, Op::AvgPool(input), g))
    }

    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::fully_connected(self.value(input), self.value(weight), self.value(bias))?;
        let g = self.grad_any(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            g,
        ))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(input), axis)?;
        let g = self.grad_any(&[input]);
        Ok(self.push(out, Op::Softmax(input, axis), g))
    }

    pub fn bilinear_upsample(&mut self, input: Var, target_h: usize, target_w: usize) -> Result<Var> {
        let out = ops::bilinear_upsample(self.value(input), target_h, target_w)?;
        let g = self.grad_any(&[input]);
        Ok(self.push(out, Op::Upsample(input), g))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let out = ops::elementwise(self.value(a), self.value(b), kind)?;
        let g = self.grad_any(&[a, b]);
        Ok(self.push(out, Op::Elementwise(a, b, kind), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&tensors, axis)?;
        let g = self.grad_any(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), g))
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::narrow(self.value(input), axis, start, len)?;
        let g = self.grad_any(&[input]);
        Ok(self.push(out, Op::Narrow { input, axis, start }, g))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let g = self.grad_any(&[input]);
        Ok(self.push(out, Op::Reshape(input), g))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let g = self.grad_any(&[input]);
        self.push(out, Op::Relu(input), g)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let g = self.grad_any(&[input]);
        self.push(out, Op::Scale(input, factor), g)
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let g = self.grad_any(&[input]);
        self.push(out, Op::Sum(input), g)
    }

    /// Per-channel convex blend of two feature maps (see
    /// [`ops::weighted_blend`]).
    pub fn weighted_blend(&mut self, a: Var, b: Var, weight_a: Var, weight_b: Var) -> Result<Var> {
        let out = ops::weighted_blend(
            self.value(a),
            self.value(b),
            self.value(weight_a),
            self.value(weight_b),
        )?;
        let g = self.grad_any(&[a, b, weight_a, weight_b]);
        Ok(self.push(
            out,
            Op::Blend {
                a,
                b,
                weight_a,
                weight_b,
            },
            g,
        ))
    }

    /// Mean negative log-likelihood of the labelled class.
    ///
    /// `probs` is `[N, K, H, W]` class probabilities and `labels` holds one
    /// class index per pixel in `[N, H, W]` order. Probabilities are clamped
    /// into `[clamp, 1 - clamp]` before the logarithm.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[u8], clamp: T) -> Result<Var> {
        let (n, k, h, w) = self.value(probs).dims4("cross_entropy")?;
        if labels.len() != n * h * w {
            return Err(Error::shape(
                "cross_entropy",
                self.value(probs).shape(),
                &[labels.len()],
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} is not a class index below {k}"),
            ));
        }
        let p = self.value(probs).data();
        let hw = h * w;
        let upper = T::one() - clamp;
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let (b, pix) = (i / hw, i % hw);
            let v = p[(b * k + l as usize) * hw + pix];
            let v = if v.is_nan() { v } else { v.max(clamp).min(upper) };
            total = total - v.ln();
        }
        let loss = total / T::from_f64(labels.len() as f64);
        let g = self.grad_any(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                clamp,
            },
            g,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_gradients(node, &g)?;
            for (v, dv) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                accumulate(&mut grads[v.0], dv);
            }
            // Leaves keep their gradient for collection below.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape().to_vec()));
            match out.get_mut(name) {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn local_gradients(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (di, dk, db) =
                    ops::conv2d_backward(val(input), val(kernel), val(bias), stride, padding, g)?;
                vec![(input, di), (kernel, dk), (bias, db)]
            }
            &Op::AvgPool(input) => {
                vec![(input, ops::global_avg_pool_backward(val(input).shape(), g)?)]
            }
            &Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (di, dw, db) = ops::fully_connected_backward(val(input), val(weight), g)?;
                vec![(input, di), (weight, dw), (bias, db)]
            }
            &Op::Softmax(input, axis) => {
                vec![(input, ops::softmax_backward(&node.value, axis, g)?)]
            }
            &Op::Upsample(input) => {
                vec![(input, ops::bilinear_upsample_backward(val(input).shape(), g)?)]
            }
            &Op::Elementwise(a, b, kind) => {
                let (da, db) = ops::elementwise_backward(val(a), val(b), kind, g)?;
                vec![(a, da), (b, db)]
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    out.push((p, ops::narrow(g, *axis, start, len)?));
                    start += len;
                }
                out
            }
            &Op::Narrow { input, axis, start } => {
                vec![(input, ops::narrow_backward(val(input).shape(), axis, start, g)?)]
            }
            &Op::Reshape(input) => vec![(input, g.clone().reshape(val(input).shape().to_vec())?)],
            &Op::Relu(input) => vec![(input, ops::relu_backward(val(input), g))],
            &Op::Scale(input, factor) => vec![(input, g.map(|v| v * factor))],
            &Op::Sum(input) => {
                vec![(input, Tensor::full(val(input).shape().to_vec(), g.data()[0]))]
            }
            &Op::Blend {
                a,
                b,
                weight_a,
                weight_b,
            } => {
                let [da, db, dwa, dwb] = ops::weighted_blend_backward(
                    val(a),
                    val(b),
                    val(weight_a),
                    val(weight_b),
                    g,
                )?;
                vec![(a, da), (b, db), (weight_a, dwa), (weight_b, dwb)]
            }
            Op::CrossEntropy {
                probs,
                labels,
                clamp,
            } => {
                let p = val(*probs);
                let (_, k, h, w) = p.dims4("cross_entropy")?;
                let hw = h * w;
                let scale = g.data()[0] / T::from_f64(labels.len() as f64);
                let upper = T::one() - *clamp;
                let mut d = vec![T::zero(); p.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let at = ((i / hw) * k + l as usize) * hw + i % hw;
                    let v = p.data()[at];
                    if v > *clamp && v < upper {
                        d[at] = -scale / v;
                    }
                }
                vec![(*probs, Tensor::new(p.shape().to_vec(), d)?)]
            }
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Compares analytic gradients of `name` against central differences.
///
/// `loss` builds a scalar loss from a parameter set (registering whatever it
/// needs with [`Graph::param_from`]). Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over the coordinates of `name`.
pub fn finite_diff_check<F>(params: &ParamStore<f64>, name: &str, epsilon: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("epsilon {epsilon} outside [1e-7, 1e-4]"),
        ));
    }
    let mut graph = Graph::new();
    let out = loss(&mut graph, params)?;
    let analytic = graph
        .backward(out)?
        .remove(name)
        .unwrap_or_else(|| Tensor::zeros(params.get(name).map(|t| t.shape().to_vec()).unwrap_or_default()));

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, p)?;
        Ok(g.value(v).data()[0])
    };

    let mut probe = params.clone();
    let len = params.get(name)?.len();
    let mut worst = 0.0f64;
    for i in 0..len {
        let original = params.get(name)?.data()[i];
        probe.get_mut(name)?.data_mut()[i] = original + epsilon;
        let plus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[i] = original - epsilon;
        let minus = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`finite_diff_check`] over every parameter in `params`; returns the
/// largest error and the parameter it occurred in.
pub fn finite_diff_check_all<F>(params: &ParamStore<f64>, epsilon: f64, loss: F) -> Result<(f64, String)>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut worst = (0.0, String::new());
    for name in params.names() {
        let err = finite_diff_check(params, name, epsilon, &loss)?;
        if err >= worst.0 {
            worst = (err, name.clone());
        }
    }
    Ok(worst)
}
