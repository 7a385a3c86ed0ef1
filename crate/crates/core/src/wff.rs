//! Weighted feature fusion of RGB and depth feature maps.
//!
//! The two maps are summed, pooled to one value per channel, passed through
//! a bottleneck fully-connected layer (C → C/2) and two separate heads
//! (C/2 → C each). A two-way softmax across the heads gives, for every
//! channel, a pair of weights `(ψ_rgb, ψ_depth)` summing to one, and the
//! fused map is the per-channel convex combination `ψ_rgb ⊙ r + ψ_depth ⊙ d`.
//!
//! The free functions operate on plain tensors; [`wff_graph`] records the
//! same computation on a [`Graph`] for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::ops::{self, Elementwise};
use crate::tensor::{Element, Tensor};

/// One fully-connected layer: `[out, in]` weights and `[out]` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor::zeros([outputs, inputs]),
            bias: Tensor::zeros([outputs]),
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: he_uniform(&[outputs, inputs], inputs, rng),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        ops::fully_connected(input, &self.weight, &self.bias)
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn he_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(-bound..bound)))
}

/// Parameters of one fusion site.
#[derive(Clone, Debug, PartialEq)]
pub struct WffParams<T = f32> {
    /// Bottleneck, C → C/2.
    pub fc1: Linear<T>,
    /// RGB head, C/2 → C.
    pub fc21: Linear<T>,
    /// Depth head, C/2 → C.
    pub fc22: Linear<T>,
    /// Apply ReLU to the bottleneck output. Off by default: the bottleneck
    /// and heads are purely linear.
    pub hidden_relu: bool,
}

/// Names of the six tensors of a fusion site stored under `prefix`.
pub fn param_names(prefix: &str) -> [String; 6] {
    [
        format!("{prefix}.fc1.weight"),
        format!("{prefix}.fc1.bias"),
        format!("{prefix}.fc21.weight"),
        format!("{prefix}.fc21.bias"),
        format!("{prefix}.fc22.weight"),
        format!("{prefix}.fc22.bias"),
    ]
}

fn check_channels(channels: usize) -> Result<()> {
    if channels == 0 || channels % 2 != 0 {
        return Err(Error::Config(format!(
            "weighted fusion needs a positive even channel count, got {channels}"
        )));
    }
    Ok(())
}

impl<T: Element> WffParams<T> {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Result<Self> {
        check_channels(channels)?;
        let half = channels / 2;
        Ok(WffParams {
            fc1: Linear::init(channels, half, rng),
            fc21: Linear::init(half, channels, rng),
            fc22: Linear::init(half, channels, rng),
            hidden_relu: false,
        })
    }

    /// Assembles parameters, validating the layer shapes against each other.
    pub fn new(fc1: Linear<T>, fc21: Linear<T>, fc22: Linear<T>) -> Result<Self> {
        let channels = fc1.inputs();
        check_channels(channels)?;
        let half = channels / 2;
        if fc1.outputs() != half || fc1.bias.shape() != [half] {
            return Err(Error::shape("wff", &[half, channels], fc1.weight.shape()));
        }
        for head in [&fc21, &fc22] {
            if head.weight.shape() != [channels, half] || head.bias.shape() != [channels] {
                return Err(Error::shape("wff", &[channels, half], head.weight.shape()));
            }
        }
        Ok(WffParams {
            fc1,
            fc21,
            fc22,
            hidden_relu: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1.inputs()
    }

    /// Reads a fusion site from a parameter store.
    pub fn from_store(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        let [w1, b1, w21, b21, w22, b22] = param_names(prefix);
        let lin = |w: &str, b: &str| -> Result<Linear<T>> {
            Ok(Linear {
                weight: store.get(w)?.clone(),
                bias: store.get(b)?.clone(),
            })
        };
        WffParams::new(lin(&w1, &b1)?, lin(&w21, &b21)?, lin(&w22, &b22)?)
    }

    pub fn insert_into(&self, store: &mut ParamStore<T>, prefix: &str) {
        let [w1, b1, w21, b21, w22, b22] = param_names(prefix);
        store.insert(w1, self.fc1.weight.clone());
        store.insert(b1, self.fc1.bias.clone());
        store.insert(w21, self.fc21.weight.clone());
        store.insert(b21, self.fc21.bias.clone());
        store.insert(w22, self.fc22.weight.clone());
        store.insert(b22, self.fc22.bias.clone());
    }
}

/// Per-channel modality weights for each batch item.
///
/// Both vectors are `[N, C]`; `psi_rgb + psi_depth = 1` channel-wise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub psi_rgb: Vec<Vec<f64>>,
    pub psi_depth: Vec<Vec<f64>>,
}

impl FusionWeights {
    pub fn from_tensors<T: Element>(psi_rgb: &Tensor<T>, psi_depth: &Tensor<T>) -> Result<Self> {
        let (n, c) = psi_rgb.dims2("fusion_weights")?;
        if psi_depth.shape() != psi_rgb.shape() {
            return Err(Error::shape("fusion_weights", psi_rgb.shape(), psi_depth.shape()));
        }
        let rows = |t: &Tensor<T>| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| t.data()[i * c..(i + 1) * c].iter().map(|v| v.as_f64()).collect())
                .collect()
        };
        Ok(FusionWeights {
            psi_rgb: rows(psi_rgb),
            psi_depth: rows(psi_depth),
        })
    }

    pub fn batch(&self) -> usize {
        self.psi_rgb.len()
    }
}

/// Feature combination: `r + d`.
pub fn combine<T: Element>(r: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    if r.shape() != d.shape() {
        return Err(Error::shape("combine", r.shape(), d.shape()));
    }
    ops::elementwise(r, d, Elementwise::Add)
}

/// Resolution reduction: per-channel spatial mean, `[N,C,h,w] -> [N,C]`.
pub fn reduce<T: Element>(combined: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, _, _) = combined.dims4("reduce")?;
    ops::global_avg_pool(combined)?.reshape([n, c])
}

/// Preliminary separation: bottleneck then the two heads, giving `(ψ1, ψ2)`.
pub fn pre_divide<T: Element>(pooled: &Tensor<T>, params: &WffParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c) = pooled.dims2("pre_divide")?;
    if c != params.channels() {
        return Err(Error::shape("pre_divide", pooled.shape(), params.fc1.weight.shape()));
    }
    let mut hidden = params.fc1.forward(pooled)?;
    if params.hidden_relu {
        hidden = ops::relu(&hidden);
    }
    Ok((params.fc21.forward(&hidden)?, params.fc22.forward(&hidden)?))
}

/// Stacks `ψ1`/`ψ2` on a new axis and applies softmax across it.
fn pair_softmax<T: Element>(psi1: &Tensor<T>, psi2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c) = psi1.dims2("normalize")?;
    if psi2.shape() != psi1.shape() {
        return Err(Error::shape("normalize", psi1.shape(), psi2.shape()));
    }
    let a = psi1.clone().reshape([n, 1, c])?;
    let b = psi2.clone().reshape([n, 1, c])?;
    let probs = ops::softmax(&ops::concat(&[&a, &b], 1)?, 1)?;
    Ok((
        ops::narrow(&probs, 1, 0, 1)?.reshape([n, c])?,
        ops::narrow(&probs, 1, 1, 1)?.reshape([n, c])?,
    ))
}

/// Weight adjustment: channel-wise softmax over the pair `(ψ1, ψ2)`.
pub fn normalize<T: Element>(psi1: &Tensor<T>, psi2: &Tensor<T>) -> Result<FusionWeights> {
    let (rgb, depth) = pair_softmax(psi1, psi2)?;
    FusionWeights::from_tensors(&rgb, &depth)
}

fn weights_tensors<T: Element>(weights: &FusionWeights) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = weights.psi_rgb.len();
    let c = weights.psi_rgb.first().map_or(0, Vec::len);
    let flat = |rows: &[Vec<f64>]| -> Vec<T> {
        rows.iter().flatten().map(|&v| T::from_f64(v)).collect()
    };
    Ok((
        Tensor::new([n, c], flat(&weights.psi_rgb))?,
        Tensor::new([n, c], flat(&weights.psi_depth))?,
    ))
}

/// Weighted fusion: `ψ_rgb ⊙ r + ψ_depth ⊙ d`, weights broadcast over h, w.
pub fn fuse<T: Element>(r: &Tensor<T>, d: &Tensor<T>, weights: &FusionWeights) -> Result<Tensor<T>> {
    let (n, c, _, _) = r.dims4("fuse")?;
    let (wr, wd) = weights_tensors::<T>(weights)?;
    if wr.shape() != [n, c] {
        return Err(Error::shape("fuse", r.shape(), wr.shape()));
    }
    ops::weighted_blend(r, d, &wr, &wd)
}

/// The full fusion chain: combine → reduce → pre_divide → normalize → fuse.
pub fn wff_forward<T: Element>(
    r: &Tensor<T>,
    d: &Tensor<T>,
    params: &WffParams<T>,
) -> Result<(Tensor<T>, FusionWeights)> {
    let pooled = reduce(&combine(r, d)?)?;
    let (psi1, psi2) = pre_divide(&pooled, params)?;
    let (wr, wd) = pair_softmax(&psi1, &psi2)?;
    let fused = ops::weighted_blend(r, d, &wr, &wd)?;
    Ok((fused, FusionWeights::from_tensors(&wr, &wd)?))
}

/// Graph handles produced by [`wff_graph`].
#[derive(Clone, Copy, Debug)]
pub struct WffOutput {
    pub fused: Var,
    pub psi_rgb: Var,
    pub psi_depth: Var,
}

/// Records the fusion chain on `graph`, reading parameters `prefix.*` from
/// `store`.
pub fn wff_graph<T: Element>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    r: Var,
    d: Var,
    hidden_relu: bool,
) -> Result<WffOutput> {
    let (n, c, _, _) = graph.value(r).dims4("wff")?;
    if graph.value(d).shape() != graph.value(r).shape() {
        return Err(Error::shape("wff", graph.value(r).shape(), graph.value(d).shape()));
    }
    check_channels(c)?;
    let [w1, b1, w21, b21, w22, b22] = param_names(prefix);
    let (w1, b1) = (graph.param_from(store, &w1)?, graph.param_from(store, &b1)?);
    let (w21, b21) = (graph.param_from(store, &w21)?, graph.param_from(store, &b21)?);
    let (w22, b22) = (graph.param_from(store, &w22)?, graph.param_from(store, &b22)?);

    let combined = graph.add(r, d)?;
    let pooled = graph.global_avg_pool(combined)?;
    let pooled = graph.reshape(pooled, [n, c])?;
    let mut hidden = graph.fully_connected(pooled, w1, b1)?;
    if hidden_relu {
        hidden = graph.relu(hidden);
    }
    let psi1 = graph.fully_connected(hidden, w21, b21)?;
    let psi2 = graph.fully_connected(hidden, w22, b22)?;
    let psi1 = graph.reshape(psi1, [n, 1, c])?;
    let psi2 = graph.reshape(psi2, [n, 1, c])?;
    let stacked = graph.concat(&[psi1, psi2], 1)?;
    let probs = graph.softmax(stacked, 1)?;
    let psi_rgb = graph.narrow(probs, 1, 0, 1)?;
    let psi_rgb = graph.reshape(psi_rgb, [n, c])?;
    let psi_depth = graph.narrow(probs, 1, 1, 1)?;
    let psi_depth = graph.reshape(psi_depth, [n, c])?;
    let fused = graph.weighted_blend(r, d, psi_rgb, psi_depth)?;
    Ok(WffOutput {
        fused,
        psi_rgb,
        psi_depth,
    })
}

/// Fusion with both weights frozen at one half: plain feature summation
/// scaled to the mean, with no weight adjustment.
pub fn frozen_graph<T: Element>(graph: &mut Graph<T>, r: Var, d: Var) -> Result<WffOutput> {
    let (n, c, _, _) = graph.value(r).dims4("wff")?;
    let half = T::from_f64(0.5);
    let psi_rgb = graph.constant(Tensor::full([n, c], half));
    let psi_depth = graph.constant(Tensor::full([n, c], half));
    let fused = graph.weighted_blend(r, d, psi_rgb, psi_depth)?;
    Ok(WffOutput {
        fused,
        psi_rgb,
        psi_depth,
    })
}
