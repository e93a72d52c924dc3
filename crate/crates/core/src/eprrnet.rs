//! EPRRNet: the enhanced pipeline. A coarse deraining network first reduces
//! the rain, a pluggable pre-trained segmenter reads semantics off the
//! coarse result (never the raw rainy image), ESFNet turns those semantics
//! into channel-softmax attention over image features, and EVFNet refines
//! both views through five weight-shared, cross-fused dense stages, each
//! view ending as a residual off its coarse image.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::data::{read_labels_png, LabelMap};
use crate::error::{Error, Result};
use crate::graph::{Act, Graph, NodeId, ParamSet};
use crate::nn::{conv1x1, conv3x3, Conv2d, DenseBlock, Init, ParamStore};
use crate::prrnet::ViewMode;
use crate::sadm::Sadm;
use crate::synth::View;
use crate::tensor::{Scalar, Tensor};

/// Backbone width shared by the coarse net, ESFNet features, EVFNet
/// streams, and the attention weight count n.
pub const BACKBONE_WIDTH: usize = 16;

/// Channel widths of the seven attention convolutions (the last one emits
/// the n = 16 raw weights that feed the softmax).
pub const ATTENTION_WIDTHS: [usize; 7] = [32, 32, 32, 32, 32, 32, BACKBONE_WIDTH];

// ---------------------------------------------------------------------------
// Coarse deraining network
// ---------------------------------------------------------------------------

/// Pre-processing (3×3 conv + DenseBlock), five backbone DenseBlocks, and
/// post-processing (DenseBlock + zero-initialized 3×3 conv to 3 channels).
/// The network predicts the rain residual: output = rainy − residual.
#[derive(Clone, Debug)]
pub struct CoarseNet {
    pre_conv: Conv2d,
    blocks: Vec<DenseBlock>,
    post_conv: Conv2d,
}

impl CoarseNet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        rng: &mut impl Rng,
    ) -> CoarseNet {
        let pre_conv = Conv2d::register(
            store,
            &format!("{scope}/pre"),
            conv3x3(3, BACKBONE_WIDTH),
            Act::Relu,
            Init::He,
            rng,
        );
        // One pre block, five backbone blocks, one post block: 7 total.
        let blocks = (0..7)
            .map(|i| DenseBlock::register_default(store, &format!("{scope}/block{i}"), rng))
            .collect();
        let post_conv = Conv2d::register(
            store,
            &format!("{scope}/post"),
            conv3x3(BACKBONE_WIDTH, 3),
            Act::None,
            Init::Zero,
            rng,
        );
        CoarseNet {
            pre_conv,
            blocks,
            post_conv,
        }
    }

    /// `rainy − predicted_rain` (unclipped; clip at inference).
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        rainy: NodeId,
    ) -> Result<NodeId> {
        let mut x = self.pre_conv.apply(g, set, frozen, rainy)?;
        for block in &self.blocks {
            x = block.apply(g, set, frozen, x)?;
        }
        let residual = self.post_conv.apply(g, set, frozen, x)?;
        g.sub(rainy, residual)
    }

    pub fn dense_block_count(&self) -> usize {
        self.blocks.len()
    }
}

// ---------------------------------------------------------------------------
// Segmenter handle
// ---------------------------------------------------------------------------

/// Parsed form of the segmenter configuration:
/// `oracle`, `trained:<checkpoint path>`, or `external:<label directory>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SegmenterSpec {
    Oracle,
    Trained(PathBuf),
    External(PathBuf),
}

impl SegmenterSpec {
    pub fn parse(s: &str) -> Result<SegmenterSpec> {
        if s == "oracle" {
            return Ok(SegmenterSpec::Oracle);
        }
        if let Some(path) = s.strip_prefix("trained:") {
            if path.is_empty() {
                return Err(Error::Config("trained: needs a checkpoint path".into()));
            }
            return Ok(SegmenterSpec::Trained(PathBuf::from(path)));
        }
        if let Some(dir) = s.strip_prefix("external:") {
            if dir.is_empty() {
                return Err(Error::Config("external: needs a label directory".into()));
            }
            return Ok(SegmenterSpec::External(PathBuf::from(dir)));
        }
        Err(Error::Config(format!(
            "unknown segmenter '{s}' (expected oracle, trained:<ckpt>, or external:<dir>)"
        )))
    }

    pub fn render(&self) -> String {
        match self {
            SegmenterSpec::Oracle => "oracle".to_string(),
            SegmenterSpec::Trained(p) => format!("trained:{}", p.display()),
            SegmenterSpec::External(d) => format!("external:{}", d.display()),
        }
    }
}

/// A ready-to-call semantic prior source. The prior is detached: its output
/// enters the training graph as a constant leaf, so no gradient flows back
/// through the segmenter into the coarse network.
pub enum SegmenterHandle<T: Scalar> {
    /// One-hot of the sample's ground-truth labels.
    Oracle,
    /// A frozen SADM running its segmentation task on the coarse image.
    Trained { sadm: Sadm, params: ParamSet<T> },
    /// Precomputed label maps read from `<dir>/<sample_id>_<view>.png`.
    External { dir: PathBuf },
}

/// What a segmenter may need besides the coarse image.
pub struct SegContext<'a> {
    pub sample_id: &'a str,
    pub view: View,
    pub gt_labels: Option<&'a LabelMap>,
}

impl<T: Scalar> SegmenterHandle<T> {
    /// Class probabilities `[K, H, W]` for the coarse image. `classes` is
    /// the pipeline's K; a mismatching handle is a configuration error.
    pub fn segment(
        &self,
        coarse: &Tensor<T>,
        ctx: &SegContext<'_>,
        classes: usize,
    ) -> Result<Tensor<T>> {
        let (h, w) = (coarse.height(), coarse.width());
        let check_size = |labels: &LabelMap, what: &str| -> Result<()> {
            if labels.height() != h || labels.width() != w {
                return Err(Error::Shape(format!(
                    "{what} labels are {}x{} but the image is {h}x{w}",
                    labels.height(),
                    labels.width()
                )));
            }
            Ok(())
        };
        match self {
            SegmenterHandle::Oracle => {
                let labels = ctx.gt_labels.ok_or_else(|| {
                    Error::Config(format!(
                        "oracle segmenter needs ground-truth labels, none provided for sample {}",
                        ctx.sample_id
                    ))
                })?;
                check_size(labels, "ground-truth")?;
                labels.one_hot(classes)
            }
            SegmenterHandle::Trained { sadm, params } => {
                if sadm.classes != classes {
                    return Err(Error::Config(format!(
                        "trained segmenter has {} classes but the pipeline expects {classes}",
                        sadm.classes
                    )));
                }
                sadm.segment_inference(params, coarse)
            }
            SegmenterHandle::External { dir } => {
                let path = external_label_path(dir, ctx.sample_id, ctx.view);
                let labels = read_labels_png(&path)?;
                check_size(&labels, "external")?;
                labels.one_hot(classes)
            }
        }
    }
}

/// Path of an external label map: `<dir>/<sample_id>_<L|R>.png`.
pub fn external_label_path(dir: &Path, sample_id: &str, view: View) -> PathBuf {
    dir.join(format!("{sample_id}_{}.png", view.tag()))
}

// ---------------------------------------------------------------------------
// ESFNet: semantic attention fusion
// ---------------------------------------------------------------------------

/// Encodes the coarse image to features F, computes channel-softmax
/// attention W from concat[F, seg] through seven convolutions, and emits
/// concat[W ⊙ F, F] — attended features joined with plain ones.
#[derive(Clone, Debug)]
pub struct EsfNet {
    feat_conv: Conv2d,
    feat_block: DenseBlock,
    attention: Vec<Conv2d>,
    pub classes: usize,
    pub out_channels: usize,
}

impl EsfNet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        classes: usize,
        rng: &mut impl Rng,
    ) -> EsfNet {
        let feat_conv = Conv2d::register(
            store,
            &format!("{scope}/feat_conv"),
            conv3x3(3, BACKBONE_WIDTH),
            Act::Relu,
            Init::He,
            rng,
        );
        let feat_block = DenseBlock::register_default(store, &format!("{scope}/feat_block"), rng);
        let mut attention = Vec::with_capacity(ATTENTION_WIDTHS.len());
        let mut prev = BACKBONE_WIDTH + classes;
        for (i, &width) in ATTENTION_WIDTHS.iter().enumerate() {
            let act = if i + 1 == ATTENTION_WIDTHS.len() {
                // The final conv feeds the per-pixel channel softmax that
                // normalizes the raw weights.
                Act::SoftmaxCh
            } else {
                Act::Relu
            };
            attention.push(Conv2d::register(
                store,
                &format!("{scope}/att{i}"),
                conv3x3(prev, width),
                act,
                Init::He,
                rng,
            ));
            prev = width;
        }
        EsfNet {
            feat_conv,
            feat_block,
            attention,
            classes,
            out_channels: 2 * BACKBONE_WIDTH,
        }
    }

    /// The attention map W alone (each pixel a simplex over 16 channels).
    pub fn attention_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        features: NodeId,
        seg: NodeId,
    ) -> Result<NodeId> {
        let mut x = g.concat(&[features, seg])?;
        for conv in &self.attention {
            x = conv.apply(g, set, frozen, x)?;
        }
        Ok(x)
    }

    /// Full fusion: `concat[W ⊙ F, F]`.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        coarse: NodeId,
        seg: NodeId,
    ) -> Result<NodeId> {
        {
            let (cv, sv) = (g.value(coarse), g.value(seg));
            if cv.height() != sv.height() || cv.width() != sv.width() {
                return Err(Error::Shape(format!(
                    "coarse image {}x{} vs segmentation {}x{}",
                    cv.height(),
                    cv.width(),
                    sv.height(),
                    sv.width()
                )));
            }
            if sv.channels() != self.classes {
                return Err(Error::Shape(format!(
                    "segmentation has {} channels but ESFNet expects {}",
                    sv.channels(),
                    self.classes
                )));
            }
        }
        let mut f = self.feat_conv.apply(g, set, frozen, coarse)?;
        f = self.feat_block.apply(g, set, frozen, f)?;
        let w = self.attention_weights(g, set, frozen, f, seg)?;
        let attended = g.mul(w, f)?;
        g.concat(&[attended, f])
    }
}

// ---------------------------------------------------------------------------
// EVFNet: parallel share-weight stereo fusion
// ---------------------------------------------------------------------------

/// Two weight-shared streams: a 1×1 entry conv (32→16), five stages of
/// {shared DenseBlock, then cross-view fusion via a shared 1×1 conv on
/// concat[self, other]}, and a shared post-processing DenseBlock + 3×3 conv
/// (zero-initialized) whose output is subtracted from the view's coarse
/// image.
#[derive(Clone, Debug)]
pub struct EvfNet {
    entry: Conv2d,
    stages: Vec<(DenseBlock, Conv2d)>,
    post_block: DenseBlock,
    post_conv: Conv2d,
}

impl EvfNet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> EvfNet {
        let entry = Conv2d::register(
            store,
            &format!("{scope}/entry"),
            conv1x1(in_channels, BACKBONE_WIDTH),
            Act::Relu,
            Init::He,
            rng,
        );
        let stages = (0..5)
            .map(|i| {
                let block =
                    DenseBlock::register_default(store, &format!("{scope}/stage{i}/block"), rng);
                let fuse = Conv2d::register(
                    store,
                    &format!("{scope}/stage{i}/fuse"),
                    conv1x1(2 * BACKBONE_WIDTH, BACKBONE_WIDTH),
                    Act::Relu,
                    Init::He,
                    rng,
                );
                (block, fuse)
            })
            .collect();
        let post_block = DenseBlock::register_default(store, &format!("{scope}/post_block"), rng);
        let post_conv = Conv2d::register(
            store,
            &format!("{scope}/post"),
            conv3x3(BACKBONE_WIDTH, 3),
            Act::None,
            Init::Zero,
            rng,
        );
        EvfNet {
            entry,
            stages,
            post_block,
            post_conv,
        }
    }

    /// Both streams to fine images: `fine_v = coarse_v − post(stream_v)`.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        feat_left: NodeId,
        feat_right: NodeId,
        coarse_left: NodeId,
        coarse_right: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut left = self.entry.apply(g, set, frozen, feat_left)?;
        let mut right = self.entry.apply(g, set, frozen, feat_right)?;
        for (block, fuse) in &self.stages {
            let bl = block.apply(g, set, frozen, left)?;
            let br = block.apply(g, set, frozen, right)?;
            let cl = g.concat(&[bl, br])?;
            let cr = g.concat(&[br, bl])?;
            left = fuse.apply(g, set, frozen, cl)?;
            right = fuse.apply(g, set, frozen, cr)?;
        }
        let fine_left = {
            let x = self.post_block.apply(g, set, frozen, left)?;
            let residual = self.post_conv.apply(g, set, frozen, x)?;
            g.sub(coarse_left, residual)?
        };
        let fine_right = {
            let x = self.post_block.apply(g, set, frozen, right)?;
            let residual = self.post_conv.apply(g, set, frozen, x)?;
            g.sub(coarse_right, residual)?
        };
        Ok((fine_left, fine_right))
    }

    pub fn fusion_stage_count(&self) -> usize {
        self.stages.len()
    }
}

// ---------------------------------------------------------------------------
// The composed pipeline
// ---------------------------------------------------------------------------

/// Every intermediate of one EPRRNet forward pass.
#[derive(Copy, Clone, Debug)]
pub struct EprrnetOutput {
    pub coarse_left: NodeId,
    pub coarse_right: NodeId,
    /// Detached semantic priors (constant leaves in the graph).
    pub seg_left: NodeId,
    pub seg_right: NodeId,
    pub fused_left: NodeId,
    pub fused_right: NodeId,
    pub fine_left: NodeId,
    pub fine_right: NodeId,
}

#[derive(Clone, Debug)]
pub struct Eprrnet {
    pub coarse: CoarseNet,
    pub esfnet: EsfNet,
    pub evfnet: EvfNet,
    pub classes: usize,
}

impl Eprrnet {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Eprrnet> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "segmentation needs at least 2 classes, got {classes}"
            )));
        }
        let coarse = CoarseNet::register(store, &format!("{scope}/coarse"), rng);
        let esfnet = EsfNet::register(store, &format!("{scope}/esfnet"), classes, rng);
        let evfnet = EvfNet::register(store, &format!("{scope}/evfnet"), esfnet.out_channels, rng);
        Ok(Eprrnet {
            coarse,
            esfnet,
            evfnet,
            classes,
        })
    }

    /// One view up to the fused features: coarse derain, detached semantic
    /// prior on the coarse image, ESFNet attention fusion.
    fn forward_view<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        handle: &SegmenterHandle<T>,
        rainy: NodeId,
        ctx: &SegContext<'_>,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let coarse = self.coarse.apply(g, set, frozen, rainy)?;
        // The prior reads the coarse VALUE and re-enters as a constant:
        // no gradient flows back through the segmenter.
        let seg_map = handle.segment(g.value(coarse), ctx, self.classes)?;
        let seg = g.leaf(seg_map);
        let fused = self.esfnet.fuse(g, set, frozen, coarse, seg)?;
        Ok((coarse, seg, fused))
    }

    /// The full stereo forward pass.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        set: &ParamSet<T>,
        frozen: bool,
        handle: &SegmenterHandle<T>,
        rainy_left: NodeId,
        rainy_right: NodeId,
        ctx_left: &SegContext<'_>,
        ctx_right: &SegContext<'_>,
        mode: ViewMode,
    ) -> Result<EprrnetOutput> {
        let (coarse_left, seg_left, fused_left) =
            self.forward_view(g, set, frozen, handle, rainy_left, ctx_left)?;
        let (coarse_right, seg_right, fused_right) =
            self.forward_view(g, set, frozen, handle, rainy_right, ctx_right)?;
        let (fine_left, fine_right) = match mode {
            ViewMode::Stereo => self.evfnet.fuse(
                g,
                set,
                frozen,
                fused_left,
                fused_right,
                coarse_left,
                coarse_right,
            )?,
            ViewMode::Monocular => {
                let (l, _) = self.evfnet.fuse(
                    g,
                    set,
                    frozen,
                    fused_left,
                    fused_left,
                    coarse_left,
                    coarse_left,
                )?;
                let (r, _) = self.evfnet.fuse(
                    g,
                    set,
                    frozen,
                    fused_right,
                    fused_right,
                    coarse_right,
                    coarse_right,
                )?;
                (l, r)
            }
        };
        Ok(EprrnetOutput {
            coarse_left,
            coarse_right,
            seg_left,
            seg_right,
            fused_left,
            fused_right,
            fine_left,
            fine_right,
        })
    }

    /// Inference: fine derained pair, clipped to [0,1].
    #[allow(clippy::too_many_arguments)]
    pub fn derain_pair<T: Scalar>(
        &self,
        set: &ParamSet<T>,
        handle: &SegmenterHandle<T>,
        rainy_left: &Tensor<T>,
        rainy_right: &Tensor<T>,
        ctx_left: &SegContext<'_>,
        ctx_right: &SegContext<'_>,
        mode: ViewMode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let l = g.leaf(rainy_left.clone());
        let r = g.leaf(rainy_right.clone());
        let out = self.forward(&mut g, set, true, handle, l, r, ctx_left, ctx_right, mode)?;
        Ok((
            g.value(out.fine_left).clipped01(),
            g.value(out.fine_right).clipped01(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn ctx<'a>(labels: Option<&'a LabelMap>, view: View) -> SegContext<'a> {
        SegContext {
            sample_id: "000000",
            view,
            gt_labels: labels,
        }
    }

    #[test]
    fn coarse_net_is_the_identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = CoarseNet::register(&mut store, "coarse", &mut rng);
        let set = store.snapshot();
        let img = rand_tensor(&mut rng, &[3, 8, 8]);
        let mut g = Graph::new();
        let x = g.leaf(img.clone());
        let y = net.apply(&mut g, &set, true, x).unwrap();
        assert_eq!(g.value(y).data(), img.data());
    }

    #[test]
    fn coarse_net_has_exactly_seven_dense_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let net = CoarseNet::register(&mut store, "coarse", &mut rng);
        assert_eq!(net.dense_block_count(), 7);
        // Each DenseBlock holds 4 internal convs + 1 transition, so the
        // scope should contain 7 × 5 × 2 named tensors.
        let block_params = store
            .iter()
            .filter(|(n, _, _)| n.contains("/block"))
            .count();
        assert_eq!(block_params, 7 * 5 * 2);
    }

    #[test]
    fn segmenter_spec_parses_all_three_forms() {
        assert_eq!(SegmenterSpec::parse("oracle").unwrap(), SegmenterSpec::Oracle);
        assert_eq!(
            SegmenterSpec::parse("trained:/tmp/ck.bin").unwrap(),
            SegmenterSpec::Trained(PathBuf::from("/tmp/ck.bin"))
        );
        assert_eq!(
            SegmenterSpec::parse("external:/tmp/labels").unwrap(),
            SegmenterSpec::External(PathBuf::from("/tmp/labels"))
        );
        assert!(SegmenterSpec::parse("magic").is_err());
        assert!(SegmenterSpec::parse("trained:").is_err());
        for s in ["oracle", "trained:/a/b", "external:/c"] {
            assert_eq!(SegmenterSpec::parse(s).unwrap().render(), s);
        }
    }

    #[test]
    fn oracle_segmenter_returns_the_ground_truth_one_hot() {
        let labels = LabelMap::new(4, 4, (0..16u8).map(|i| i % 3).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coarse = rand_tensor(&mut rng, &[3, 4, 4]);
        let handle = SegmenterHandle::<f64>::Oracle;
        let probs = handle
            .segment(&coarse, &ctx(Some(&labels), View::Left), 3)
            .unwrap();
        assert_eq!(LabelMap::from_argmax(&probs), labels);
    }

    #[test]
    fn oracle_segmenter_without_labels_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coarse = rand_tensor(&mut rng, &[3, 4, 4]);
        let handle = SegmenterHandle::<f64>::Oracle;
        let err = handle
            .segment(&coarse, &ctx(None, View::Left), 3)
            .unwrap_err();
        assert!(err.to_string().contains("labels"));
    }

    #[test]
    fn trained_segmenter_class_mismatch_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let sadm = Sadm::register(&mut store, "seg", 4, 0.02, &mut rng).unwrap();
        let params = store.snapshot();
        let handle = SegmenterHandle::Trained { sadm, params };
        let coarse = rand_tensor(&mut rng, &[3, 16, 16]);
        let err = handle
            .segment(&coarse, &ctx(None, View::Left), 6)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // Matching class count works and is a proper probability map.
        let probs = handle
            .segment(&coarse, &ctx(None, View::Left), 4)
            .unwrap();
        assert_eq!(probs.shape(), &[4, 16, 16]);
    }

    #[test]
    fn external_segmenter_reads_label_maps_by_view() {
        let dir = std::env::temp_dir().join(format!(
            "derain-ext-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let labels = LabelMap::new(4, 4, (0..16u8).map(|i| i % 2).collect()).unwrap();
        crate::data::write_labels_png(&external_label_path(&dir, "000007", View::Right), &labels)
            .unwrap();

        let handle = SegmenterHandle::<f64>::External { dir: dir.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coarse = rand_tensor(&mut rng, &[3, 4, 4]);
        let c = SegContext {
            sample_id: "000007",
            view: View::Right,
            gt_labels: None,
        };
        let probs = handle.segment(&coarse, &c, 2).unwrap();
        assert_eq!(LabelMap::from_argmax(&probs), labels);
        // The missing left view is a clean error.
        let c_left = SegContext {
            sample_id: "000007",
            view: View::Left,
            gt_labels: None,
        };
        assert!(handle.segment(&coarse, &c_left, 2).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn attention_weights_are_a_simplex_at_every_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let esf = EsfNet::register(&mut store, "esf", 5, &mut rng);
        let set = store.snapshot();
        let img = rand_tensor(&mut rng, &[3, 6, 6]);
        let seg = rand_tensor(&mut rng, &[5, 6, 6]);
        let mut g = Graph::new();
        let (ni, ns) = (g.leaf(img), g.leaf(seg));
        let mut f = esf.feat_conv.apply(&mut g, &set, true, ni).unwrap();
        f = esf.feat_block.apply(&mut g, &set, true, f).unwrap();
        let w = esf.attention_weights(&mut g, &set, true, f, ns).unwrap();
        let wv = g.value(w);
        assert_eq!(wv.channels(), BACKBONE_WIDTH);
        let plane = 36;
        for pix in 0..plane {
            let sum: f64 = (0..BACKBONE_WIDTH)
                .map(|c| wv.data()[c * plane + pix])
                .sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for c in 0..BACKBONE_WIDTH {
                let p = wv.data()[c * plane + pix];
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn esfnet_emits_attended_and_plain_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let esf = EsfNet::register(&mut store, "esf", 4, &mut rng);
        assert_eq!(esf.out_channels, 32);
        let set = store.snapshot();
        let img = rand_tensor(&mut rng, &[3, 6, 6]);
        let seg = rand_tensor(&mut rng, &[4, 6, 6]);
        let mut g = Graph::new();
        let (ni, ns) = (g.leaf(img), g.leaf(seg));
        let fused = esf.fuse(&mut g, &set, true, ni, ns).unwrap();
        assert_eq!(g.value(fused).shape(), &[32, 6, 6]);
        // The second half of the channels is F itself: recompute F and
        // compare.
        let mut f = esf.feat_conv.apply(&mut g, &set, true, ni).unwrap();
        f = esf.feat_block.apply(&mut g, &set, true, f).unwrap();
        let fv = g.value(f);
        let fused_v = g.value(fused);
        let plane = 36;
        for c in 0..BACKBONE_WIDTH {
            for pix in 0..plane {
                assert_eq!(
                    fused_v.data()[(BACKBONE_WIDTH + c) * plane + pix],
                    fv.data()[c * plane + pix]
                );
            }
        }
    }

    #[test]
    fn esfnet_rejects_class_count_mismatches() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let esf = EsfNet::register(&mut store, "esf", 4, &mut rng);
        let set = store.snapshot();
        let img = rand_tensor(&mut rng, &[3, 6, 6]);
        let seg = rand_tensor(&mut rng, &[5, 6, 6]);
        let mut g = Graph::new();
        let (ni, ns) = (g.leaf(img), g.leaf(seg));
        assert!(esf.fuse(&mut g, &set, true, ni, ns).is_err());
    }

    #[test]
    fn evfnet_is_swap_equivariant_and_has_five_stages() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::new();
        let evf = EvfNet::register(&mut store, "evf", 32, &mut rng);
        assert_eq!(evf.fusion_stage_count(), 5);
        let set = store.snapshot();
        let fa = rand_tensor(&mut rng, &[32, 5, 5]);
        let fb = rand_tensor(&mut rng, &[32, 5, 5]);
        let ca = rand_tensor(&mut rng, &[3, 5, 5]);
        let cb = rand_tensor(&mut rng, &[3, 5, 5]);
        let mut g = Graph::new();
        let (nfa, nfb) = (g.leaf(fa), g.leaf(fb));
        let (nca, ncb) = (g.leaf(ca), g.leaf(cb));
        let (l1, r1) = evf.fuse(&mut g, &set, true, nfa, nfb, nca, ncb).unwrap();
        let (l2, r2) = evf.fuse(&mut g, &set, true, nfb, nfa, ncb, nca).unwrap();
        assert!(max_abs_diff(g.value(l1), g.value(r2)) < 1e-5);
        assert!(max_abs_diff(g.value(r1), g.value(l2)) < 1e-5);
    }

    #[test]
    fn evfnet_identical_streams_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let evf = EvfNet::register(&mut store, "evf", 32, &mut rng);
        let set = store.snapshot();
        let f = rand_tensor(&mut rng, &[32, 5, 5]);
        let c = rand_tensor(&mut rng, &[3, 5, 5]);
        let mut g = Graph::new();
        let nf = g.leaf(f);
        let nc = g.leaf(c);
        let (l, r) = evf.fuse(&mut g, &set, true, nf, nf, nc, nc).unwrap();
        assert_eq!(g.value(l).data(), g.value(r).data());
    }

    fn synthetic_pair(seed: u64) -> crate::synth::StereoSample {
        let conf = crate::synth::SynthConfig::small_for_tests();
        crate::synth::synth_sample(seed, 0, &conf).unwrap()
    }

    #[test]
    fn whole_pipeline_is_identity_at_initialization() {
        let sample = synthetic_pair(21);
        let classes = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f64>::new();
        let net = Eprrnet::register(&mut store, "eprrnet", classes, &mut rng).unwrap();
        let set = store.snapshot();
        let handle = SegmenterHandle::Oracle;

        let rainy_l = sample.rainy_left.cast::<f64>();
        let rainy_r = sample.rainy_right.cast::<f64>();
        let mut g = Graph::new();
        let (nl, nr) = (g.leaf(rainy_l.clone()), g.leaf(rainy_r.clone()));
        let out = net
            .forward(
                &mut g,
                &set,
                true,
                &handle,
                nl,
                nr,
                &ctx(Some(&sample.labels_left), View::Left),
                &ctx(Some(&sample.labels_right), View::Right),
                ViewMode::Stereo,
            )
            .unwrap();
        // Zero-initialized output convs: coarse == fine == input, exactly.
        assert_eq!(g.value(out.coarse_left).data(), rainy_l.data());
        assert_eq!(g.value(out.fine_left).data(), rainy_l.data());
        assert_eq!(g.value(out.fine_right).data(), rainy_r.data());
    }

    #[test]
    fn pipeline_shapes_audit_with_oracle_prior() {
        let sample = synthetic_pair(22);
        let classes = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::<f64>::new();
        let net = Eprrnet::register(&mut store, "eprrnet", classes, &mut rng).unwrap();
        let set = store.snapshot();
        let handle = SegmenterHandle::Oracle;
        let (h, w) = (sample.height(), sample.width());

        let mut g = Graph::new();
        let nl = g.leaf(sample.rainy_left.cast::<f64>());
        let nr = g.leaf(sample.rainy_right.cast::<f64>());
        let out = net
            .forward(
                &mut g,
                &set,
                true,
                &handle,
                nl,
                nr,
                &ctx(Some(&sample.labels_left), View::Left),
                &ctx(Some(&sample.labels_right), View::Right),
                ViewMode::Stereo,
            )
            .unwrap();
        assert_eq!(g.value(out.coarse_left).shape(), &[3, h, w]);
        assert_eq!(g.value(out.seg_left).shape(), &[classes, h, w]);
        assert_eq!(g.value(out.fused_left).shape(), &[32, h, w]);
        assert_eq!(g.value(out.fine_left).shape(), &[3, h, w]);
        // The oracle prior is the ground truth exactly.
        assert_eq!(
            LabelMap::from_argmax(g.value(out.seg_left)),
            sample.labels_left
        );
    }

    #[test]
    fn composed_pipeline_is_swap_equivariant() {
        // Swapping inputs swaps outputs when the per-view contexts swap too.
        let sample = synthetic_pair(23);
        let classes = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut store = ParamStore::<f64>::new();
        let net = Eprrnet::register(&mut store, "eprrnet", classes, &mut rng).unwrap();
        // Perturb the zero output convs so the test sees non-identity data.
        for name in ["eprrnet/coarse/post/w", "eprrnet/evfnet/post/w"] {
            let shape = store
                .iter()
                .find(|(n, _, _)| *n == name)
                .unwrap()
                .2
                .shape()
                .to_vec();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
            store
                .load_value(name, Tensor::from_vec(&shape, data).unwrap())
                .unwrap();
        }
        let set = store.snapshot();
        let handle = SegmenterHandle::Oracle;

        let mut g = Graph::new();
        let nl = g.leaf(sample.rainy_left.cast::<f64>());
        let nr = g.leaf(sample.rainy_right.cast::<f64>());
        let cl = ctx(Some(&sample.labels_left), View::Left);
        let cr = ctx(Some(&sample.labels_right), View::Right);
        let fwd = net
            .forward(&mut g, &set, true, &handle, nl, nr, &cl, &cr, ViewMode::Stereo)
            .unwrap();
        let rev = net
            .forward(&mut g, &set, true, &handle, nr, nl, &cr, &cl, ViewMode::Stereo)
            .unwrap();
        assert!(max_abs_diff(g.value(fwd.fine_left), g.value(rev.fine_right)) < 1e-5);
        assert!(max_abs_diff(g.value(fwd.fine_right), g.value(rev.fine_left)) < 1e-5);
    }

    #[test]
    fn monocular_mode_ignores_the_other_view() {
        let sample = synthetic_pair(24);
        let classes = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::<f64>::new();
        let net = Eprrnet::register(&mut store, "eprrnet", classes, &mut rng).unwrap();
        let set = store.snapshot();
        let handle = SegmenterHandle::Oracle;
        let cl = ctx(Some(&sample.labels_left), View::Left);
        let cr = ctx(Some(&sample.labels_right), View::Right);

        let mut g = Graph::new();
        let nl = g.leaf(sample.rainy_left.cast::<f64>());
        let nr = g.leaf(sample.rainy_right.cast::<f64>());
        let out = net
            .forward(
                &mut g,
                &set,
                true,
                &handle,
                nl,
                nr,
                &cl,
                &cr,
                ViewMode::Monocular,
            )
            .unwrap();
        // Replace the right input with zeros: the left output must not move.
        let zeros = {
            let shape = g.value(nr).shape().to_vec();
            g.leaf(Tensor::zeros(&shape))
        };
        let out2 = net
            .forward(
                &mut g,
                &set,
                true,
                &handle,
                nl,
                zeros,
                &cl,
                &cr,
                ViewMode::Monocular,
            )
            .unwrap();
        assert_eq!(
            g.value(out.fine_left).data(),
            g.value(out2.fine_left).data()
        );
    }

    #[test]
    fn gradient_reaches_the_coarse_net_through_the_fine_loss() {
        let sample = synthetic_pair(25);
        let classes = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut store = ParamStore::<f64>::new();
        let net = Eprrnet::register(&mut store, "eprrnet", classes, &mut rng).unwrap();
        // At exact zero initialization the output convs block upstream
        // gradients (multiplying by W = 0), so nudge them off zero the way
        // one optimizer step would.
        for name in ["eprrnet/coarse/post/w", "eprrnet/evfnet/post/w"] {
            let shape = store
                .iter()
                .find(|(n, _, _)| *n == name)
                .unwrap()
                .2
                .shape()
                .to_vec();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-0.05..0.05)).collect();
            store
                .load_value(name, Tensor::from_vec(&shape, data).unwrap())
                .unwrap();
        }
        let set = store.snapshot();
        let handle = SegmenterHandle::Oracle;

        let mut g = Graph::new();
        let nl = g.leaf(sample.rainy_left.cast::<f64>());
        let nr = g.leaf(sample.rainy_right.cast::<f64>());
        let tl = g.leaf(sample.clean_left.cast::<f64>());
        let tr = g.leaf(sample.clean_right.cast::<f64>());
        let out = net
            .forward(
                &mut g,
                &set,
                false,
                &handle,
                nl,
                nr,
                &ctx(Some(&sample.labels_left), View::Left),
                &ctx(Some(&sample.labels_right), View::Right),
                ViewMode::Stereo,
            )
            .unwrap();
        let view = crate::objectives::view_loss_node(
            &mut g,
            out.fine_left,
            out.fine_right,
            tl,
            tr,
            crate::objectives::RefineNorm::L1,
        )
        .unwrap();
        let grads = g.backward(view, 1.0);
        let pre_w = store.id("eprrnet/coarse/pre/w").unwrap();
        let norm: f64 = grads
            .get(pre_w)
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>().sqrt())
            .unwrap_or(0.0);
        assert!(norm > 0.0, "fine loss never reached the coarse net");
    }
}
