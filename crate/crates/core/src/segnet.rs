//! Two-stream segmentation network.
//!
//! RGB and depth images run through separate convolutional backbones. Each
//! backbone yields a shallow map (stride `shallow_stride`) and a deep map
//! (stride `deep_stride`). The two modalities are fused at both depths, the
//! deep fused map is upsampled and concatenated with the shallow one, and a
//! small convolutional decoder produces two-class logits at input
//! resolution. Only fused features reach the decoder.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::mask::Mask;
use crate::tensor::{Element, Tensor};
use crate::wff::{self, FusionWeights, WffOutput};

/// Probability floor applied before the logarithm in the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Stream id for the parameter-initialisation RNG; see [`seeded_rng`].
pub const INIT_STREAM: u64 = 1;

/// ChaCha RNG for `seed` on an independent `stream`, so different consumers
/// of one seed never share random numbers.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Weighted feature fusion.
    Wff,
    /// Channel concatenation followed by a learned 1×1 projection.
    Concat,
    /// RGB features only; the depth stream is not built.
    RgbOnly,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wff" => Ok(FusionMode::Wff),
            "concat" => Ok(FusionMode::Concat),
            "rgb_only" | "rgb-only" => Ok(FusionMode::RgbOnly),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (expected wff, concat or rgb-only)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Wff => "wff",
            FusionMode::Concat => "concat",
            FusionMode::RgbOnly => "rgb_only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Rgb,
    Depth,
}

impl Stream {
    pub fn channels(self) -> usize {
        match self {
            Stream::Rgb => 3,
            Stream::Depth => 1,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Stream::Rgb => "rgb",
            Stream::Depth => "depth",
        }
    }
}

fn default_shallow_channels() -> usize {
    16
}
fn default_deep_channels() -> usize {
    64
}
fn default_shallow_stride() -> usize {
    4
}
fn default_deep_stride() -> usize {
    16
}
fn default_decoder_channels() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_h: usize,
    pub input_w: usize,
    #[serde(default = "default_shallow_channels")]
    pub shallow_channels: usize,
    #[serde(default = "default_deep_channels")]
    pub deep_channels: usize,
    #[serde(default = "default_shallow_stride")]
    pub shallow_stride: usize,
    #[serde(default = "default_deep_stride")]
    pub deep_stride: usize,
    pub fusion_mode: FusionMode,
    #[serde(default = "default_decoder_channels")]
    pub decoder_channels: usize,
    /// Fix both fusion weights at 0.5 (feature summation without weight
    /// adjustment). Only meaningful for [`FusionMode::Wff`].
    #[serde(default)]
    pub frozen_weights: bool,
    /// ReLU between the fusion bottleneck and its heads.
    #[serde(default)]
    pub wff_hidden_relu: bool,
}

impl NetworkConfig {
    pub fn new(input_h: usize, input_w: usize, fusion_mode: FusionMode) -> Self {
        NetworkConfig {
            input_h,
            input_w,
            shallow_channels: default_shallow_channels(),
            deep_channels: default_deep_channels(),
            shallow_stride: default_shallow_stride(),
            deep_stride: default_deep_stride(),
            fusion_mode,
            decoder_channels: default_decoder_channels(),
            frozen_weights: false,
            wff_hidden_relu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.shallow_stride.is_power_of_two() || self.shallow_stride < 2 {
            return bad(format!(
                "shallow_stride must be a power of two >= 2, got {}",
                self.shallow_stride
            ));
        }
        if !self.deep_stride.is_power_of_two() || self.deep_stride <= self.shallow_stride {
            return bad(format!(
                "deep_stride must be a power of two above shallow_stride, got {}",
                self.deep_stride
            ));
        }
        if self.deep_stride % self.shallow_stride != 0 {
            return bad("deep_stride must be divisible by shallow_stride".into());
        }
        if self.input_h == 0
            || self.input_w == 0
            || self.input_h % self.deep_stride != 0
            || self.input_w % self.deep_stride != 0
        {
            return bad(format!(
                "input {}x{} must be a positive multiple of deep_stride {}",
                self.input_h, self.input_w, self.deep_stride
            ));
        }
        if self.shallow_channels == 0 || self.deep_channels == 0 || self.decoder_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.fusion_mode == FusionMode::Wff
            && (self.shallow_channels % 2 != 0 || self.deep_channels % 2 != 0)
        {
            return bad("weighted fusion needs even shallow and deep channel counts".into());
        }
        if self.frozen_weights && self.fusion_mode != FusionMode::Wff {
            return bad("frozen_weights requires fusion_mode = wff".into());
        }
        Ok(())
    }

    pub fn uses_depth(&self) -> bool {
        self.fusion_mode != FusionMode::RgbOnly
    }

    fn stage_blocks(&self) -> (usize, usize) {
        let first = self.shallow_stride.trailing_zeros() as usize;
        let second = (self.deep_stride / self.shallow_stride).trailing_zeros() as usize;
        (first, second)
    }

    /// Every parameter name and shape the configuration implies, in name
    /// order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let (s1, s2) = self.stage_blocks();
        let streams: &[Stream] = if self.uses_depth() {
            &[Stream::Rgb, Stream::Depth]
        } else {
            &[Stream::Rgb]
        };
        fn conv(out: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize) {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        }
        for &s in streams {
            let mut cin = s.channels();
            for b in 0..s1 {
                conv(&mut out, format!("{}.stage1.conv{b}", s.prefix()), cin, self.shallow_channels, 3);
                cin = self.shallow_channels;
            }
            for b in 0..s2 {
                conv(&mut out, format!("{}.stage2.conv{b}", s.prefix()), cin, self.deep_channels, 3);
                cin = self.deep_channels;
            }
        }
        let sites = [
            ("fuse_shallow", self.shallow_channels),
            ("fuse_deep", self.deep_channels),
        ];
        for (site, c) in sites {
            match self.fusion_mode {
                FusionMode::Concat => conv(&mut out, format!("{site}.proj"), 2 * c, c, 1),
                FusionMode::Wff if !self.frozen_weights => {
                    let names = wff::param_names(site);
                    let shapes = [
                        vec![c / 2, c],
                        vec![c / 2],
                        vec![c, c / 2],
                        vec![c],
                        vec![c, c / 2],
                        vec![c],
                    ];
                    for (n, s) in names.into_iter().zip(shapes) {
                        out.push((n, s));
                    }
                }
                _ => {}
            }
        }
        let dec = self.decoder_channels;
        conv(
            &mut out,
            "decoder.conv0".into(),
            self.shallow_channels + self.deep_channels,
            dec,
            3,
        );
        conv(&mut out, "decoder.conv1".into(), dec, dec, 3);
        conv(&mut out, "head".into(), dec, 2, 1);
        out.sort();
        out
    }

    /// Fresh parameters: fan-in scaled uniform weights and zero biases drawn
    /// from the initialisation stream of `seed`.
    pub fn init_params<T: Element>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut rng = seeded_rng(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in = shape[1..].iter().product();
                wff::he_uniform(&shape, fan_in, &mut rng)
            };
            store.insert(name, t);
        }
        Ok(store)
    }

    /// Checks that `params` holds exactly the tensors this configuration
    /// needs.
    pub fn check_params<T: Element>(&self, params: &ParamStore<T>) -> Result<()> {
        let expected = self.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            let t = params
                .get(&name)
                .map_err(|_| Error::Config(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn conv_block<T: Element>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    name: &str,
    input: Var,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Result<Var> {
    let w = g.param_from(params, &format!("{name}.weight"))?;
    let b = g.param_from(params, &format!("{name}.bias"))?;
    let out = g.conv2d(input, w, b, stride, padding)?;
    Ok(if relu { g.relu(out) } else { out })
}

/// Runs one modality backbone, returning `(shallow, deep)` feature maps.
pub fn encode_graph<T: Element>(
    g: &mut Graph<T>,
    config: &NetworkConfig,
    params: &ParamStore<T>,
    stream: Stream,
    image: Var,
) -> Result<(Var, Var)> {
    let (_, c, h, w) = g.value(image).dims4("encode")?;
    if c != stream.channels() {
        return Err(Error::invalid(
            "encode",
            format!(
                "{} stream expects {} input channels, got {c}",
                stream.prefix(),
                stream.channels()
            ),
        ));
    }
    if (h, w) != (config.input_h, config.input_w) {
        return Err(Error::invalid(
            "encode",
            format!(
                "input is {h}x{w} but the network expects {}x{}",
                config.input_h, config.input_w
            ),
        ));
    }
    let (s1, s2) = config.stage_blocks();
    let mut x = image;
    for b in 0..s1 {
        x = conv_block(g, params, &format!("{}.stage1.conv{b}", stream.prefix()), x, 2, 1, true)?;
    }
    let shallow = x;
    for b in 0..s2 {
        x = conv_block(g, params, &format!("{}.stage2.conv{b}", stream.prefix()), x, 2, 1, true)?;
    }
    Ok((shallow, x))
}

/// Result of fusing one pair of feature maps.
#[derive(Clone, Copy, Debug)]
pub struct FusedSite {
    pub fused: Var,
    /// Present for weighted fusion (including frozen weights).
    pub weights: Option<WffOutput>,
}

/// Fuses `r` and `d` at the named site according to the fusion mode.
pub fn fuse_stage_graph<T: Element>(
    g: &mut Graph<T>,
    config: &NetworkConfig,
    params: &ParamStore<T>,
    site: &str,
    r: Var,
    d: Option<Var>,
) -> Result<FusedSite> {
    let need_depth = || {
        d.ok_or_else(|| Error::invalid("fuse_stage", format!("{} fusion needs depth features", config.fusion_mode)))
    };
    match config.fusion_mode {
        FusionMode::RgbOnly => Ok(FusedSite {
            fused: r,
            weights: None,
        }),
        FusionMode::Concat => {
            let d = need_depth()?;
            if g.value(r).shape() != g.value(d).shape() {
                return Err(Error::shape("fuse_stage", g.value(r).shape(), g.value(d).shape()));
            }
            let cat = g.concat(&[r, d], 1)?;
            let fused = conv_block(g, params, &format!("{site}.proj"), cat, 1, 0, false)?;
            Ok(FusedSite {
                fused,
                weights: None,
            })
        }
        FusionMode::Wff => {
            let d = need_depth()?;
            let out = if config.frozen_weights {
                wff::frozen_graph(g, r, d)?
            } else {
                wff::wff_graph(g, params, site, r, d, config.wff_hidden_relu)?
            };
            Ok(FusedSite {
                fused: out.fused,
                weights: Some(out),
            })
        }
    }
}

/// Decoder: upsample deep to shallow resolution, concatenate, two 3×3
/// conv+ReLU blocks, upsample to input size, 1×1 projection to two logits.
pub fn decode_graph<T: Element>(
    g: &mut Graph<T>,
    config: &NetworkConfig,
    params: &ParamStore<T>,
    shallow: Var,
    deep: Var,
) -> Result<Var> {
    let (_, _, sh, sw) = g.value(shallow).dims4("decode")?;
    let up = g.bilinear_upsample(deep, sh, sw)?;
    let x = g.concat(&[shallow, up], 1)?;
    let x = conv_block(g, params, "decoder.conv0", x, 1, 1, true)?;
    let x = conv_block(g, params, "decoder.conv1", x, 1, 1, true)?;
    let x = g.bilinear_upsample(x, config.input_h, config.input_w)?;
    conv_block(g, params, "head", x, 1, 0, false)
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub probs: Var,
    /// `(site name, fused map, fusion weights if any)` for shallow then deep.
    pub sites: Vec<(&'static str, FusedSite)>,
}

/// Records a full forward pass. `depth` is ignored (and may be `None`) when
/// the depth stream is disabled.
pub fn forward_graph<T: Element>(
    g: &mut Graph<T>,
    config: &NetworkConfig,
    params: &ParamStore<T>,
    rgb: Tensor<T>,
    depth: Option<Tensor<T>>,
) -> Result<ForwardOutput> {
    let rgb = g.constant(rgb);
    let (r1, r4) = encode_graph(g, config, params, Stream::Rgb, rgb)?;
    let (d1, d4) = if config.uses_depth() {
        let depth = depth.ok_or_else(|| Error::invalid("forward", "depth image required"))?;
        let depth = g.constant(depth);
        let (d1, d4) = encode_graph(g, config, params, Stream::Depth, depth)?;
        (Some(d1), Some(d4))
    } else {
        (None, None)
    };
    let shallow = fuse_stage_graph(g, config, params, "fuse_shallow", r1, d1)?;
    let deep = fuse_stage_graph(g, config, params, "fuse_deep", r4, d4)?;
    let logits = decode_graph(g, config, params, shallow.fused, deep.fused)?;
    let probs = g.softmax(logits, 1)?;
    Ok(ForwardOutput {
        logits,
        probs,
        sites: vec![("fuse_shallow", shallow), ("fuse_deep", deep)],
    })
}

/// Concatenates per-class mask labels into `[N, H, W]` order.
pub fn labels_of(masks: &[Mask]) -> Vec<u8> {
    masks.iter().flat_map(|m| m.data().iter().copied()).collect()
}

/// Records the mean cross-entropy between `probs` and the masks.
pub fn bce_graph<T: Element>(g: &mut Graph<T>, probs: Var, masks: &[Mask]) -> Result<Var> {
    let (n, c, h, w) = g.value(probs).dims4("bce_loss")?;
    if c != 2 || masks.len() != n || masks.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::invalid(
            "bce_loss",
            format!(
                "{} masks do not match probabilities of shape {:?}",
                masks.len(),
                g.value(probs).shape()
            ),
        ));
    }
    g.cross_entropy(probs, &labels_of(masks), T::from_f64(PROB_CLAMP))
}

/// Per-pixel softmax over the two class logits.
pub fn classify<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = logits.dims4("classify")?;
    if c != 2 {
        return Err(Error::invalid("classify", format!("expected 2 classes, got {c}")));
    }
    crate::ops::softmax(logits, 1)
}

/// Mean cross-entropy of the true class with probabilities clamped into
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Element>(probs: &Tensor<T>, labels: &[u8]) -> Result<T> {
    if let Some(v) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::invalid("bce_loss", format!("mask value {v} is not 0 or 1")));
    }
    let (_, c, _, _) = probs.dims4("bce_loss")?;
    if c != 2 {
        return Err(Error::invalid("bce_loss", format!("expected 2 classes, got {c}")));
    }
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = g.cross_entropy(p, labels, T::from_f64(PROB_CLAMP))?;
    Ok(g.value(loss).data()[0])
}

/// Arg-max over the class axis; an exact tie goes to background.
pub fn predict<T: Element>(probs: &Tensor<T>) -> Result<Vec<Mask>> {
    let (n, c, h, w) = probs.dims4("predict")?;
    if c != 2 {
        return Err(Error::invalid("predict", format!("expected 2 classes, got {c}")));
    }
    (0..n)
        .map(|i| {
            let (bg, glass) = (probs.plane(i, 0), probs.plane(i, 1));
            Mask::new(h, w, bg.iter().zip(glass).map(|(b, g)| (g > b) as u8).collect())
        })
        .collect()
}

/// Stacks `[C,H,W]` tensors into one `[N,C,H,W]` batch.
pub fn stack<T: Element>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::invalid("stack", "empty batch"))?;
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore<f32>,
}

impl Network {
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Network { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Network { config, params })
    }

    fn run(&self, rgb: Tensor<f32>, depth: Option<Tensor<f32>>) -> Result<(Graph<f32>, ForwardOutput)> {
        let mut g = Graph::new();
        let out = forward_graph(&mut g, &self.config, &self.params, rgb, depth)?;
        Ok((g, out))
    }

    /// Logits `[N,2,H,W]` for a batch.
    pub fn logits(&self, rgb: Tensor<f32>, depth: Option<Tensor<f32>>) -> Result<Tensor<f32>> {
        let (g, out) = self.run(rgb, depth)?;
        Ok(g.value(out.logits).clone())
    }

    /// Class probabilities `[N,2,H,W]` for a batch.
    pub fn probs(&self, rgb: Tensor<f32>, depth: Option<Tensor<f32>>) -> Result<Tensor<f32>> {
        let (g, out) = self.run(rgb, depth)?;
        Ok(g.value(out.probs).clone())
    }

    pub fn predict(&self, rgb: Tensor<f32>, depth: Option<Tensor<f32>>) -> Result<Vec<Mask>> {
        predict(&self.probs(rgb, depth)?)
    }

    /// Fusion weights at each site, for weighted-fusion networks.
    pub fn fusion_weights(
        &self,
        rgb: Tensor<f32>,
        depth: Option<Tensor<f32>>,
    ) -> Result<Vec<(&'static str, FusionWeights)>> {
        if self.config.fusion_mode != FusionMode::Wff {
            return Err(Error::Config(format!(
                "fusion weights exist only for wff networks, this one uses {}",
                self.config.fusion_mode
            )));
        }
        let (g, out) = self.run(rgb, depth)?;
        out.sites
            .iter()
            .map(|(name, site)| {
                let w = site.weights.expect("wff site without weights");
                Ok((*name, FusionWeights::from_tensors(g.value(w.psi_rgb), g.value(w.psi_depth))?))
            })
            .collect()
    }
}
