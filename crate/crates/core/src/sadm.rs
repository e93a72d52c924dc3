//! The Semantic-Aware Deraining Module: one encoder, one conditional
//! decoder, and two task heads. A 2-channel one-hot task label, broadcast
//! over the bottleneck grid, selects whether the shared trunk produces a
//! derained image (3-channel linear head) or a segmentation (K-channel
//! softmax head). Both tasks traverse the same encoder/decoder weights.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Act, Graph, NodeId, ParamSet};
use crate::nn::{conv1x1, Conv2d, Decoder13, Init, ParamStore, Vgg16Encoder};
use crate::tensor::{Scalar, Tensor};

/// Which head the conditional decoder should serve.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TaskLabel {
    Derain,
    Segment,
}

impl TaskLabel {
    /// Channel carrying the 1 in the one-hot encoding.
    pub fn channel(self) -> usize {
        match self {
            TaskLabel::Derain => 0,
            TaskLabel::Segment => 1,
        }
    }

    /// The `[2, h, w]` one-hot map broadcast over a spatial grid.
    pub fn one_hot_map<T: Scalar>(self, h: usize, w: usize) -> Tensor<T> {
        let mut t = Tensor::zeros(&[2, h, w]);
        let plane = h * w;
        let base = self.channel() * plane;
        for i in 0..plane {
            t.data_mut()[base + i] = T::one();
        }
        t
    }
}

/// The module itself: registered parameters plus wiring.
#[derive(Clone, Debug)]
pub struct Sadm {
    pub encoder: Vgg16Encoder,
    pub decoder: Decoder13,
    pub head_derain: Conv2d,
    pub head_segment: Conv2d,
    pub classes: usize,
}

/// Number of broadcast task channels appended at the bottleneck.
pub const TASK_CHANNELS: usize = 2;

impl Sadm {
    /// Registers all parameters under `scope`. `width_mult` scales every
    /// trunk width (heads keep their task-defined output channels).
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        classes: usize,
        width_mult: f64,
        rng: &mut impl Rng,
    ) -> Result<Sadm> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "segmentation needs at least 2 classes, got {classes}"
            )));
        }
        let encoder = Vgg16Encoder::register(store, &format!("{scope}/encoder"), 3, width_mult, rng);
        let decoder = Decoder13::register(
            store,
            &format!("{scope}/decoder"),
            encoder.out_channels + TASK_CHANNELS,
            width_mult,
            rng,
        );
        let head_derain = Conv2d::register(
            store,
            &format!("{scope}/head_derain"),
            conv1x1(decoder.out_channels, 3),
            Act::None,
            Init::He,
            rng,
        );
        let head_segment = Conv2d::register(
            store,
            &format!("{scope}/head_segment"),
            conv1x1(decoder.out_channels, classes),
            Act::SoftmaxCh,
            Init::He,
            rng,
        );
        Ok(Sadm {
            encoder,
            decoder,
            head_derain,
            head_segment,
            classes,
        })
    }

    /// Encoder half: image `[3, H, W]` (H, W divisible by 16) to the
    /// bottleneck feature volume `[C, H/16, W/16]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        image: NodeId,
    ) -> Result<NodeId> {
        self.encoder.apply(g, set, frozen, image)
    }

    /// Conditional decoder half: appends the broadcast task label to the
    /// features, runs the shared trunk, then the selected head. The derain
    /// head is linear (clipping is an inference-time concern); the segment
    /// head is a per-pixel channel softmax.
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        features: NodeId,
        task: TaskLabel,
    ) -> Result<NodeId> {
        let (h, w) = {
            let v = g.value(features);
            (v.height(), v.width())
        };
        let label = g.leaf(task.one_hot_map(h, w));
        let conditioned = g.concat(&[features, label])?;
        let trunk = self.decoder.apply(g, set, frozen, conditioned)?;
        match task {
            TaskLabel::Derain => self.head_derain.apply(g, set, frozen, trunk),
            TaskLabel::Segment => self.head_segment.apply(g, set, frozen, trunk),
        }
    }

    /// `decode(encode(image), task)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        image: NodeId,
        task: TaskLabel,
    ) -> Result<NodeId> {
        let features = self.encode(g, set, frozen, image)?;
        self.decode(g, set, frozen, features, task)
    }

    /// Inference-mode deraining: forward pass on a fresh graph, output
    /// clipped to [0,1].
    pub fn derain_inference<T: Scalar>(
        &self,
        set: &ParamSet<T>,
        image: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let out = self.forward(&mut g, set, true, x, TaskLabel::Derain)?;
        Ok(g.value(out).clipped01())
    }

    /// Inference-mode segmentation: per-pixel class probabilities `[K, H, W]`.
    pub fn segment_inference<T: Scalar>(
        &self,
        set: &ParamSet<T>,
        image: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.leaf(image.clone());
        let out = self.forward(&mut g, set, true, x, TaskLabel::Segment)?;
        Ok(g.value(out).clone())
    }
}
