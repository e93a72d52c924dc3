//! Reusable layer vocabulary: named parameter storage, convolution layers,
//! ResBlocks, DenseBlocks, and the VGG16-style encoder/decoder stacks that
//! the deraining networks are assembled from.
//!
//! Layers hold [`ParamId`]s, never values: the same layer object can be
//! applied with live weights, a frozen snapshot, or a perturbed probe set,
//! which is what the rethinking loop and the gradient checks rely on.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Act, ConvConf, Graph, NodeId, ParamId, ParamSet};
use crate::tensor::{Scalar, Tensor};

/// Weight initialization policy for a convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights (σ = √(2/fan_in)), zero bias — the default for
    /// ReLU-style stacks.
    He,
    /// All-zero weights and bias; residual output convs start here so the
    /// network is the identity map at initialization.
    Zero,
}

/// Registry mapping stable parameter names to tensors.
///
/// Registration order is deterministic (it follows network construction),
/// which keeps optimizer state and checkpoints aligned across runs.
pub struct ParamStore<T> {
    set: ParamSet<T>,
    names: Vec<String>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            set: ParamSet::new(),
            names: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a fresh parameter tensor under a unique name.
    pub fn register(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let pid = self.set.push(t);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), pid);
        pid
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, pid: ParamId) -> &str {
        &self.names[pid.index()]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        (0..self.len())
            .map(|i| self.set.get(ParamId(i as u32)).len())
            .sum()
    }

    /// The live values, bindable into graphs.
    pub fn set(&self) -> &ParamSet<T> {
        &self.set
    }

    pub fn set_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.set
    }

    /// A frozen copy of the current values. Cheap (reference counted); later
    /// optimizer updates copy-on-write and leave the snapshot untouched.
    pub fn snapshot(&self) -> ParamSet<T> {
        self.set.clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamId, &Tensor<T>)> {
        (0..self.len()).map(move |i| {
            let pid = ParamId(i as u32);
            (self.names[i].as_str(), pid, self.set.get(pid))
        })
    }

    /// Replaces the value of a named parameter (checkpoint restore); the
    /// shape must match the registered one.
    pub fn load_value(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let pid = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if self.set.get(pid).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' has shape {:?} but the stored tensor is {:?}",
                name,
                self.set.get(pid).shape(),
                t.shape()
            )));
        }
        *self.set.get_mut(pid) = t;
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn he_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let sigma = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0f64, sigma).expect("valid sigma");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// A convolution layer: geometry, fused activation, and its two parameters.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub conf: ConvConf,
    pub act: Act,
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    /// Registers weights under `<scope>/w` and `<scope>/b`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        conf: ConvConf,
        act: Act,
        init: Init,
        rng: &mut impl Rng,
    ) -> Conv2d {
        let wshape = conf.weight_shape();
        let w = match init {
            Init::He => {
                let fan_in = conf.in_ch * conf.kernel * conf.kernel;
                he_tensor(rng, &wshape, fan_in)
            }
            Init::Zero => Tensor::zeros(&wshape),
        };
        let wid = store.register(&format!("{scope}/w"), w);
        let bid = store.register(&format!("{scope}/b"), Tensor::zeros(&[conf.out_ch]));
        Conv2d {
            conf,
            act,
            w: wid,
            b: bid,
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(set, self.w, frozen);
        let b = g.param(set, self.b, frozen);
        g.conv(self.conf, self.act, w, b, x)
    }
}

/// Shorthand for the ubiquitous 3×3, stride-1, padding-1 convolution.
pub fn conv3x3(in_ch: usize, out_ch: usize) -> ConvConf {
    ConvConf::new(in_ch, out_ch, 3, 1, 1)
}

/// Shorthand for a pointwise (1×1) convolution.
pub fn conv1x1(in_ch: usize, out_ch: usize) -> ConvConf {
    ConvConf::new(in_ch, out_ch, 1, 1, 0)
}

/// Residual block: conv-ReLU-conv-ReLU-conv on a fixed channel width, then
/// the identity skip, with no activation after the addition.
#[derive(Clone, Debug)]
pub struct ResBlock {
    convs: [Conv2d; 3],
}

impl ResBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> ResBlock {
        let conf = conv3x3(channels, channels);
        let c0 = Conv2d::register(store, &format!("{scope}/conv0"), conf, Act::Relu, Init::He, rng);
        let c1 = Conv2d::register(store, &format!("{scope}/conv1"), conf, Act::Relu, Init::He, rng);
        let c2 = Conv2d::register(store, &format!("{scope}/conv2"), conf, Act::None, Init::He, rng);
        ResBlock { convs: [c0, c1, c2] }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut y = x;
        for conv in &self.convs {
            y = conv.apply(g, set, frozen, y)?;
        }
        g.add(x, y)
    }
}

/// Densely connected block: each internal 3×3 layer consumes the
/// concatenation of the block input and all previous internal outputs, and a
/// 1×1 transition restores the base width so blocks chain.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<Conv2d>,
    transition: Conv2d,
    base: usize,
}

impl DenseBlock {
    /// The default configuration used throughout the enhanced pipeline:
    /// base 16, growth 8, 4 internal layers.
    pub fn register_default<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        rng: &mut impl Rng,
    ) -> DenseBlock {
        Self::register(store, scope, 16, 8, 4, rng)
    }

    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        base: usize,
        growth: usize,
        internal_layers: usize,
        rng: &mut impl Rng,
    ) -> DenseBlock {
        let mut layers = Vec::with_capacity(internal_layers);
        for i in 0..internal_layers {
            let in_ch = base + growth * i;
            layers.push(Conv2d::register(
                store,
                &format!("{scope}/dense{i}"),
                conv3x3(in_ch, growth),
                Act::Relu,
                Init::He,
                rng,
            ));
        }
        let full = base + growth * internal_layers;
        let transition = Conv2d::register(
            store,
            &format!("{scope}/transition"),
            conv1x1(full, base),
            Act::Relu,
            Init::He,
            rng,
        );
        DenseBlock {
            layers,
            transition,
            base,
        }
    }

    pub fn base_channels(&self) -> usize {
        self.base
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut feats = vec![x];
        for layer in &self.layers {
            let input = if feats.len() == 1 {
                feats[0]
            } else {
                g.concat(&feats)?
            };
            let out = layer.apply(g, set, frozen, input)?;
            feats.push(out);
        }
        let full = g.concat(&feats)?;
        self.transition.apply(g, set, frozen, full)
    }
}

/// Channel plan of the 13-conv VGG16 feature extractor.
pub const VGG16_WIDTHS: [usize; 13] = [
    64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512,
];
/// Indices (into the conv list) after which a 2×2 max-pool runs; four stages
/// so a 128-px image keeps an 8×8 bottleneck.
pub const VGG16_POOLS_AFTER: [usize; 4] = [1, 3, 6, 9];

/// Applies a width multiplier to a channel plan, flooring at 4 channels so
/// reduced desk-scale models stay functional.
pub fn scaled_width(channels: usize, width_mult: f64) -> usize {
    ((channels as f64 * width_mult).round() as usize).max(4)
}

/// The 13-conv VGG16-topology encoder with four max-pool downsamplings.
#[derive(Clone, Debug)]
pub struct Vgg16Encoder {
    convs: Vec<Conv2d>,
    pub out_channels: usize,
}

impl Vgg16Encoder {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        in_channels: usize,
        width_mult: f64,
        rng: &mut impl Rng,
    ) -> Vgg16Encoder {
        let mut convs = Vec::with_capacity(13);
        let mut prev = in_channels;
        for (i, &w) in VGG16_WIDTHS.iter().enumerate() {
            let out = scaled_width(w, width_mult);
            convs.push(Conv2d::register(
                store,
                &format!("{scope}/conv{i:02}"),
                conv3x3(prev, out),
                Act::Relu,
                Init::He,
                rng,
            ));
            prev = out;
        }
        Vgg16Encoder {
            convs,
            out_channels: prev,
        }
    }

    /// Runs the stack; input spatial dims must be divisible by 16 (four
    /// 2× poolings).
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        image: NodeId,
    ) -> Result<NodeId> {
        let (h, w) = {
            let v = g.value(image);
            (v.height(), v.width())
        };
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Shape(format!(
                "encoder needs spatial dims divisible by 16 (got {h}x{w}); pad the image first"
            )));
        }
        let mut x = image;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.apply(g, set, frozen, x)?;
            if VGG16_POOLS_AFTER.contains(&i) {
                x = g.maxpool2(x)?;
            }
        }
        Ok(x)
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }

    /// Parameter id of the first conv's weights — used by gradient-flow
    /// probes that check multi-task sharing reaches the stem.
    pub fn first_conv_weight(&self) -> ParamId {
        self.convs[0].w
    }
}

/// The mirrored 13-conv decoder: blocks of (3,3,3,2,2) convolutions with a
/// nearest-neighbour 2× upsample before each block after the first.
#[derive(Clone, Debug)]
pub struct Decoder13 {
    convs: Vec<Conv2d>,
    ups_before: Vec<usize>,
    pub out_channels: usize,
}

impl Decoder13 {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        in_channels: usize,
        width_mult: f64,
        rng: &mut impl Rng,
    ) -> Decoder13 {
        // Mirror of the encoder plan: each conv emits the input width of its
        // mirrored encoder conv, except the last, which stays at 64 so the
        // task heads own the final projection.
        let widths: [usize; 13] = [
            512, 512, 512, 512, 512, 256, 256, 256, 128, 128, 64, 64, 64,
        ];
        let ups_before = vec![3, 6, 9, 11];
        let mut convs = Vec::with_capacity(13);
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let out = scaled_width(w, width_mult);
            convs.push(Conv2d::register(
                store,
                &format!("{scope}/conv{i:02}"),
                conv3x3(prev, out),
                Act::Relu,
                Init::He,
                rng,
            ));
            prev = out;
        }
        Decoder13 {
            convs,
            ups_before,
            out_channels: prev,
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        features: NodeId,
    ) -> Result<NodeId> {
        let mut x = features;
        for (i, conv) in self.convs.iter().enumerate() {
            if self.ups_before.contains(&i) {
                x = g.upsample2(x)?;
            }
            x = conv.apply(g, set, frozen, x)?;
        }
        Ok(x)
    }

    pub fn conv_count(&self) -> usize {
        self.convs.len()
    }
}
