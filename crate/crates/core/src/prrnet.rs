//! PRRNet: the paired-rain-removal pipeline. Each view runs the shared
//! SADM for a coarse derained image and a segmentation, SFNet fuses the two
//! into a semantic feature volume, and VFNet fuses the feature volumes of
//! both views (weight-shared across the two orderings) into the final
//! derained stereo pair. Monocular mode feeds each view's features twice
//! into VFNet.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Act, Graph, NodeId, ParamSet};
use crate::nn::{conv1x1, conv3x3, scaled_width, Conv2d, Init, ParamStore, ResBlock};
use crate::sadm::{Sadm, TaskLabel};
use crate::tensor::{Scalar, Tensor};

/// How many views inform each final output.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ViewMode {
    /// Each view is fused with itself; no cross-view information.
    Monocular,
    /// Left and right feature volumes are cross-fused.
    Stereo,
}

impl ViewMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "monocular" => Ok(ViewMode::Monocular),
            "stereo" => Ok(ViewMode::Stereo),
            other => Err(Error::Config(format!(
                "unknown view mode '{other}' (expected monocular or stereo)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewMode::Monocular => "monocular",
            ViewMode::Stereo => "stereo",
        }
    }
}

// ---------------------------------------------------------------------------
// SFNet: semantic fusion
// ---------------------------------------------------------------------------

/// Fuses a coarse derained image with a segmentation probability map into a
/// feature volume: one private 3×3 stem per input, concatenation, then
/// three 3×3 conv layers, all ReLU. At full width the stems emit 16
/// channels each and the trunk runs at 32.
#[derive(Clone, Debug)]
pub struct SfNet {
    pub stem_img: Conv2d,
    pub stem_seg: Conv2d,
    trunk: Vec<Conv2d>,
    pub out_channels: usize,
}

impl SfNet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        classes: usize,
        width_mult: f64,
        rng: &mut impl Rng,
    ) -> SfNet {
        let stem_w = scaled_width(16, width_mult);
        let trunk_w = scaled_width(32, width_mult);
        let stem_img = Conv2d::register(
            store,
            &format!("{scope}/stem_img"),
            conv3x3(3, stem_w),
            Act::Relu,
            Init::He,
            rng,
        );
        let stem_seg = Conv2d::register(
            store,
            &format!("{scope}/stem_seg"),
            conv3x3(classes, stem_w),
            Act::Relu,
            Init::He,
            rng,
        );
        let mut trunk = Vec::with_capacity(3);
        let mut prev = 2 * stem_w;
        for i in 0..3 {
            trunk.push(Conv2d::register(
                store,
                &format!("{scope}/trunk{i}"),
                conv3x3(prev, trunk_w),
                Act::Relu,
                Init::He,
                rng,
            ));
            prev = trunk_w;
        }
        SfNet {
            stem_img,
            stem_seg,
            trunk,
            out_channels: prev,
        }
    }

    /// `fuse(image, seg_probs)`: stems, concatenation, trunk.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        image: NodeId,
        seg_probs: NodeId,
    ) -> Result<NodeId> {
        {
            let (iv, sv) = (g.value(image), g.value(seg_probs));
            if iv.height() != sv.height() || iv.width() != sv.width() {
                return Err(Error::Shape(format!(
                    "image {}x{} vs segmentation {}x{}",
                    iv.height(),
                    iv.width(),
                    sv.height(),
                    sv.width()
                )));
            }
        }
        let fi = self.stem_img.apply(g, set, frozen, image)?;
        let fs = self.stem_seg.apply(g, set, frozen, seg_probs)?;
        let mut x = g.concat(&[fi, fs])?;
        for conv in &self.trunk {
            x = conv.apply(g, set, frozen, x)?;
        }
        Ok(x)
    }
}

// ---------------------------------------------------------------------------
// VFNet: cross-view fusion
// ---------------------------------------------------------------------------

/// Fuses the two views' feature volumes. Each output view is
/// `head(resblocks(entry(concat[self, other])))`; the whole stack is shared
/// between the two orderings, which forces swap equivariance.
#[derive(Clone, Debug)]
pub struct VfNet {
    entry: Conv2d,
    blocks: Vec<ResBlock>,
    head: Conv2d,
}

impl VfNet {
    /// `in_channels` is the per-view feature width (the entry conv sees
    /// twice that after concatenation). At full width the trunk runs at 64.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        in_channels: usize,
        width_mult: f64,
        rng: &mut impl Rng,
    ) -> VfNet {
        let trunk_w = scaled_width(64, width_mult);
        let entry = Conv2d::register(
            store,
            &format!("{scope}/entry"),
            conv1x1(2 * in_channels, trunk_w),
            Act::Relu,
            Init::He,
            rng,
        );
        let blocks = (0..5)
            .map(|i| ResBlock::register(store, &format!("{scope}/res{i}"), trunk_w, rng))
            .collect();
        let head = Conv2d::register(
            store,
            &format!("{scope}/head"),
            conv1x1(trunk_w, 3),
            Act::None,
            Init::He,
            rng,
        );
        VfNet {
            entry,
            blocks,
            head,
        }
    }

    /// One ordering: the output for the `self_feat` view.
    pub fn fuse_one<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        self_feat: NodeId,
        other_feat: NodeId,
    ) -> Result<NodeId> {
        let mut x = g.concat(&[self_feat, other_feat])?;
        x = self.entry.apply(g, set, frozen, x)?;
        for block in &self.blocks {
            x = block.apply(g, set, frozen, x)?;
        }
        self.head.apply(g, set, frozen, x)
    }

    /// Both orderings with the shared stack: `(left, right)` outputs.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        feat_left: NodeId,
        feat_right: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let left = self.fuse_one(g, set, frozen, feat_left, feat_right)?;
        let right = self.fuse_one(g, set, frozen, feat_right, feat_left)?;
        Ok((left, right))
    }
}

// ---------------------------------------------------------------------------
// The full pipeline
// ---------------------------------------------------------------------------

/// Every intermediate of one stereo forward pass, for loss attachment.
#[derive(Copy, Clone, Debug)]
pub struct PrrnetOutput {
    pub coarse_left: NodeId,
    pub coarse_right: NodeId,
    /// Segmentation probability maps; `None` when the segmentation task is
    /// disabled (the fusion then sees all-zero semantics).
    pub seg_left: Option<NodeId>,
    pub seg_right: Option<NodeId>,
    pub fused_left: NodeId,
    pub fused_right: NodeId,
    pub final_left: NodeId,
    pub final_right: NodeId,
}

/// The three sub-networks with one shared parameter store scope.
#[derive(Clone, Debug)]
pub struct Prrnet {
    pub sadm: Sadm,
    pub sfnet: SfNet,
    pub vfnet: VfNet,
    pub classes: usize,
}

impl Prrnet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        classes: usize,
        width_mult: f64,
        rng: &mut impl Rng,
    ) -> Result<Prrnet> {
        let sadm = Sadm::register(store, &format!("{scope}/sadm"), classes, width_mult, rng)?;
        let sfnet = SfNet::register(store, &format!("{scope}/sfnet"), classes, width_mult, rng);
        let vfnet = VfNet::register(
            store,
            &format!("{scope}/vfnet"),
            sfnet.out_channels,
            width_mult,
            rng,
        );
        Ok(Prrnet {
            sadm,
            sfnet,
            vfnet,
            classes,
        })
    }

    /// One view's SADM + SFNet stage: encode once, decode per task, fuse.
    /// With the segmentation task disabled the fusion receives zeros.
    pub fn forward_view<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        rainy: NodeId,
        enable_seg: bool,
    ) -> Result<(NodeId, Option<NodeId>, NodeId)> {
        let features = self.sadm.encode(g, set, frozen, rainy)?;
        let coarse = self
            .sadm
            .decode(g, set, frozen, features, TaskLabel::Derain)?;
        let seg = if enable_seg {
            Some(
                self.sadm
                    .decode(g, set, frozen, features, TaskLabel::Segment)?,
            )
        } else {
            None
        };
        let seg_input = match seg {
            Some(s) => s,
            None => {
                let (h, w) = {
                    let v = g.value(rainy);
                    (v.height(), v.width())
                };
                g.leaf(Tensor::zeros(&[self.classes, h, w]))
            }
        };
        let fused = self.sfnet.fuse(g, set, frozen, coarse, seg_input)?;
        Ok((coarse, seg, fused))
    }

    /// The full stereo forward pass. All per-view stages use the same
    /// parameters for both views; `mode` decides whether VFNet cross-fuses
    /// or self-fuses.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        rainy_left: NodeId,
        rainy_right: NodeId,
        mode: ViewMode,
        enable_seg: bool,
    ) -> Result<PrrnetOutput> {
        let (coarse_left, seg_left, fused_left) =
            self.forward_view(g, set, frozen, rainy_left, enable_seg)?;
        let (coarse_right, seg_right, fused_right) =
            self.forward_view(g, set, frozen, rainy_right, enable_seg)?;
        let (final_left, final_right) = match mode {
            ViewMode::Stereo => self.vfnet.fuse(g, set, frozen, fused_left, fused_right)?,
            ViewMode::Monocular => (
                self.vfnet.fuse_one(g, set, frozen, fused_left, fused_left)?,
                self.vfnet
                    .fuse_one(g, set, frozen, fused_right, fused_right)?,
            ),
        };
        Ok(PrrnetOutput {
            coarse_left,
            coarse_right,
            seg_left,
            seg_right,
            fused_left,
            fused_right,
            final_left,
            final_right,
        })
    }

    /// Inference: final derained pair, clipped to [0,1].
    pub fn derain_pair<T: Scalar>(
        &self,
        set: &ParamSet<T>,
        rainy_left: &Tensor<T>,
        rainy_right: &Tensor<T>,
        mode: ViewMode,
        enable_seg: bool,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let l = g.leaf(rainy_left.clone());
        let r = g.leaf(rainy_right.clone());
        let out = self.forward(&mut g, set, true, l, r, mode, enable_seg)?;
        Ok((
            g.value(out.final_left).clipped01(),
            g.value(out.final_right).clipped01(),
        ))
    }
}
