//! Loss functions: image reconstruction, segmentation cross-entropy, the
//! rethinking consistency term, the stereo view loss, and their weighted
//! total. Every loss is a mean over elements so the balance weights keep
//! their meaning regardless of image size or batch composition.
//!
//! Plain tensor versions serve evaluation and tests; graph-node builders
//! serve training (the scalar values agree — the builders use the same
//! reductions).

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{same_shape, Scalar, Tensor};

/// Floor added inside the segmentation log so exact zeros stay finite.
pub use crate::graph::CE_EPS;

/// Norm used by the consistency and view-difference losses. The refinement
/// losses are written with single (unsquared) bars, so L1 is the default;
/// L2 is available as a switch.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum RefineNorm {
    L1,
    L2,
}

impl Default for RefineNorm {
    fn default() -> Self {
        RefineNorm::L1
    }
}

impl RefineNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(RefineNorm::L1),
            "l2" => Ok(RefineNorm::L2),
            other => Err(Error::Config(format!(
                "unknown refine norm '{other}' (expected l1 or l2)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RefineNorm::L1 => "l1",
            RefineNorm::L2 => "l2",
        }
    }
}

/// Balance weights for the composite objective.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.2,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = LossWeights {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The component losses of one step plus their weighted total.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_de: f64,
    pub l_seg: f64,
    pub l_con: f64,
    pub l_view: f64,
    pub l_total: f64,
}

impl LossBundle {
    /// Builds the bundle, computing the total from the parts.
    pub fn compose(l_de: f64, l_seg: f64, l_con: f64, l_view: f64, w: &LossWeights) -> LossBundle {
        LossBundle {
            l_de,
            l_seg,
            l_con,
            l_view,
            l_total: l_de + w.lambda1 * l_seg + w.lambda2 * l_con + w.lambda3 * l_view,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_de.is_finite()
            && self.l_seg.is_finite()
            && self.l_con.is_finite()
            && self.l_view.is_finite()
            && self.l_total.is_finite()
    }

    /// Elementwise sum, for accumulating per-sample bundles.
    pub fn add(&self, other: &LossBundle) -> LossBundle {
        LossBundle {
            l_de: self.l_de + other.l_de,
            l_seg: self.l_seg + other.l_seg,
            l_con: self.l_con + other.l_con,
            l_view: self.l_view + other.l_view,
            l_total: self.l_total + other.l_total,
        }
    }

    pub fn scale(&self, s: f64) -> LossBundle {
        LossBundle {
            l_de: self.l_de * s,
            l_seg: self.l_seg * s,
            l_con: self.l_con * s,
            l_view: self.l_view * s,
            l_total: self.l_total * s,
        }
    }
}

// ---------------------------------------------------------------------------
// Plain (tensor-level) losses
// ---------------------------------------------------------------------------

/// Image reconstruction loss: mean squared error over all pixels/channels.
pub fn loss_de<T: Scalar>(pred: &Tensor<T>, clean: &Tensor<T>) -> Result<f64> {
    same_shape(pred, clean)?;
    let n = pred.len() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(clean.data().iter())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Segmentation loss: mean per-pixel cross-entropy −log p[gt].
pub fn loss_seg<T: Scalar>(pred: &Tensor<T>, gt: &LabelMap) -> Result<f64> {
    let (k, h, w) = (pred.channels(), pred.height(), pred.width());
    if gt.height() != h || gt.width() != w {
        return Err(Error::Shape(format!(
            "segmentation prediction {}x{} vs labels {}x{}",
            h,
            w,
            gt.height(),
            gt.width()
        )));
    }
    let plane = h * w;
    let mut sum = 0.0f64;
    for (pix, &l) in gt.ids().iter().enumerate() {
        let l = l as usize;
        if l >= k {
            return Err(Error::Data(format!(
                "label id {l} out of range for {k} classes"
            )));
        }
        sum -= (pred.data()[l * plane + pix].to_f64_lossy() + CE_EPS).ln();
    }
    Ok(sum / plane as f64)
}

fn mean_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, norm: RefineNorm) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len() as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            match norm {
                RefineNorm::L1 => d.abs(),
                RefineNorm::L2 => d * d,
            }
        })
        .sum();
    Ok(sum / n)
}

/// Rethinking consistency loss: mean difference between the verification
/// and updating segmentation probability maps.
pub fn loss_con<T: Scalar>(
    seg_ver: &Tensor<T>,
    seg_up: &Tensor<T>,
    norm: RefineNorm,
) -> Result<f64> {
    mean_diff(seg_ver, seg_up, norm)
}

/// Stereo view loss: mean difference of the left pair plus mean difference
/// of the right pair.
pub fn loss_view<T: Scalar>(
    derained_l: &Tensor<T>,
    derained_r: &Tensor<T>,
    gt_l: &Tensor<T>,
    gt_r: &Tensor<T>,
    norm: RefineNorm,
) -> Result<f64> {
    Ok(mean_diff(derained_l, gt_l, norm)? + mean_diff(derained_r, gt_r, norm)?)
}

/// Computes the weighted total from precomputed components.
pub fn loss_total(
    l_de: f64,
    l_seg: f64,
    l_con: f64,
    l_view: f64,
    weights: &LossWeights,
) -> Result<LossBundle> {
    weights.validate()?;
    Ok(LossBundle::compose(l_de, l_seg, l_con, l_view, weights))
}

// ---------------------------------------------------------------------------
// Graph-node builders (training path)
// ---------------------------------------------------------------------------

/// Mean-difference loss node in the configured norm.
pub fn refine_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    a: NodeId,
    b: NodeId,
    norm: RefineNorm,
) -> Result<NodeId> {
    match norm {
        RefineNorm::L1 => g.l1_mean(a, b),
        RefineNorm::L2 => g.mse_mean(a, b),
    }
}

/// Average of two scalar nodes (the per-view mean used by l_de/l_seg/l_con
/// in stereo mode).
pub fn mean2_node<T: Scalar>(g: &mut Graph<T>, a: NodeId, b: NodeId) -> NodeId {
    g.wsum(&[(a, 0.5), (b, 0.5)])
}

/// Stereo view loss node: left-pair mean difference plus right-pair mean
/// difference.
pub fn view_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    derained_l: NodeId,
    derained_r: NodeId,
    gt_l: NodeId,
    gt_r: NodeId,
    norm: RefineNorm,
) -> Result<NodeId> {
    let left = refine_loss_node(g, derained_l, gt_l, norm)?;
    let right = refine_loss_node(g, derained_r, gt_r, norm)?;
    Ok(g.wsum(&[(left, 1.0), (right, 1.0)]))
}

/// Weighted total node: `l_de + λ1·l_seg + λ2·l_con + λ3·l_view`, where any
/// absent component contributes zero.
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    l_de: Option<NodeId>,
    l_seg: Option<NodeId>,
    l_con: Option<NodeId>,
    l_view: Option<NodeId>,
    weights: &LossWeights,
) -> NodeId {
    let mut terms = Vec::with_capacity(4);
    if let Some(n) = l_de {
        terms.push((n, 1.0));
    }
    if let Some(n) = l_seg {
        terms.push((n, weights.lambda1));
    }
    if let Some(n) = l_con {
        terms.push((n, weights.lambda2));
    }
    if let Some(n) = l_view {
        terms.push((n, weights.lambda3));
    }
    g.wsum(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn reconstruction_loss_is_zero_on_equal_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_tensor(&mut rng, &[3, 4, 4]);
        assert_eq!(loss_de(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_loss_of_constant_offset_is_squared_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clean = rand_tensor(&mut rng, &[3, 8, 8]);
        let pred = clean.map(|v| v + 0.1);
        let l = loss_de(&pred, &clean).unwrap();
        assert!((l - 0.01).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn reconstruction_loss_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = rand_tensor(&mut rng, &[2, 3, 3]);
            let b = rand_tensor(&mut rng, &[2, 3, 3]);
            assert_eq!(loss_de(&a, &b).unwrap(), loss_de(&b, &a).unwrap());
        }
    }

    #[test]
    fn segmentation_loss_is_zero_on_confident_correct_prediction() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let pred: Tensor<f64> = gt.one_hot(2).unwrap();
        let l = loss_seg(&pred, &gt).unwrap();
        // −ln(1 + eps) ≈ −eps, not exactly zero but far below any tolerance.
        assert!(l.abs() < 1e-9, "got {l}");
    }

    #[test]
    fn segmentation_loss_of_uniform_prediction_is_log_k() {
        let k = 8usize;
        let gt = LabelMap::filled(4, 4, 3);
        let pred = Tensor::<f64>::filled(&[k, 4, 4], 1.0 / k as f64);
        let l = loss_seg(&pred, &gt).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-9, "got {l}");
        assert!((l - 2.0794).abs() < 1e-3);
    }

    #[test]
    fn segmentation_loss_decreases_as_correct_mass_grows() {
        let gt = LabelMap::filled(2, 2, 0);
        let losses: Vec<f64> = [0.25, 0.5, 0.75]
            .iter()
            .map(|&p| {
                let mut pred = Tensor::<f64>::filled(&[2, 2, 2], 1.0 - p);
                for pix in 0..4 {
                    pred.data_mut()[pix] = p;
                }
                loss_seg(&pred, &gt).unwrap()
            })
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
    }

    #[test]
    fn segmentation_loss_rejects_out_of_range_ids() {
        let gt = LabelMap::new(1, 1, vec![7]).unwrap();
        let pred = Tensor::<f64>::filled(&[2, 1, 1], 0.5);
        assert!(loss_seg(&pred, &gt).is_err());
    }

    #[test]
    fn consistency_loss_matches_hand_arithmetic_on_one_pixel() {
        // K=2, single pixel: (1,0) vs (0,1) → mean |Δ| over 2 elements = 1.
        let a = Tensor::<f64>::from_vec(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(loss_con(&a, &b, RefineNorm::L1).unwrap(), 1.0);
    }

    #[test]
    fn consistency_loss_is_symmetric_and_zero_on_identical_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[4, 3, 3]);
        let b = rand_tensor(&mut rng, &[4, 3, 3]);
        assert_eq!(loss_con(&a, &a, RefineNorm::L1).unwrap(), 0.0);
        assert_eq!(
            loss_con(&a, &b, RefineNorm::L1).unwrap(),
            loss_con(&b, &a, RefineNorm::L1).unwrap()
        );
    }

    #[test]
    fn view_loss_adds_constant_left_offset_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt_l = rand_tensor(&mut rng, &[3, 4, 4]);
        let gt_r = rand_tensor(&mut rng, &[3, 4, 4]);
        let pred_l = gt_l.map(|v| v + 0.2);
        let l = loss_view(&pred_l, &gt_r, &gt_l, &gt_r, RefineNorm::L1).unwrap();
        assert!((l - 0.2).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn view_loss_is_invariant_under_pair_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, c, d) = (
            rand_tensor(&mut rng, &[3, 2, 2]),
            rand_tensor(&mut rng, &[3, 2, 2]),
            rand_tensor(&mut rng, &[3, 2, 2]),
            rand_tensor(&mut rng, &[3, 2, 2]),
        );
        let lv = loss_view(&a, &b, &c, &d, RefineNorm::L1).unwrap();
        let swapped = loss_view(&b, &a, &d, &c, RefineNorm::L1).unwrap();
        assert!((lv - swapped).abs() < 1e-15);
    }

    #[test]
    fn total_combines_components_with_default_weights() {
        let w = LossWeights::default();
        let bundle = loss_total(1.0, 1.0, 1.0, 1.0, &w).unwrap();
        assert!((bundle.l_total - 3.2).abs() < 1e-15);
        let zero = loss_total(0.0, 0.0, 0.0, 0.0, &w).unwrap();
        assert_eq!(zero.l_total, 0.0);
        let only_de = loss_total(0.7, 5.0, 5.0, 5.0, &LossWeights::new(0.0, 0.0, 0.0).unwrap())
            .unwrap();
        assert_eq!(only_de.l_total, 0.7);
    }

    #[test]
    fn total_is_linear_in_each_component() {
        let w = LossWeights::default();
        let base = loss_total(0.5, 0.25, 0.125, 2.0, &w).unwrap();
        let expected = 0.5 + 1.0 * 0.25 + 0.2 * 0.125 + 1.0 * 2.0;
        assert!((base.l_total - expected).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights::new(-0.1, 0.0, 0.0).is_err());
        assert!(loss_total(1.0, 1.0, 1.0, 1.0, &LossWeights {
            lambda1: f64::NAN,
            lambda2: 0.0,
            lambda3: 0.0,
        })
        .is_err());
    }

    #[test]
    fn graph_builders_agree_with_plain_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred_l = rand_tensor(&mut rng, &[3, 4, 4]);
        let pred_r = rand_tensor(&mut rng, &[3, 4, 4]);
        let gt_l = rand_tensor(&mut rng, &[3, 4, 4]);
        let gt_r = rand_tensor(&mut rng, &[3, 4, 4]);
        let w = LossWeights::default();

        let plain_de = loss_de(&pred_l, &gt_l).unwrap();
        let plain_view = loss_view(&pred_l, &pred_r, &gt_l, &gt_r, RefineNorm::L1).unwrap();

        let mut g = Graph::<f64>::new();
        let (pl, pr) = (g.leaf(pred_l.clone()), g.leaf(pred_r.clone()));
        let (tl, tr) = (g.leaf(gt_l.clone()), g.leaf(gt_r.clone()));
        let de = g.mse_mean(pl, tl).unwrap();
        let view = view_loss_node(&mut g, pl, pr, tl, tr, RefineNorm::L1).unwrap();
        let total = total_loss_node(&mut g, Some(de), None, None, Some(view), &w);

        assert!((g.value(de).item() - plain_de).abs() < 1e-12);
        assert!((g.value(view).item() - plain_view).abs() < 1e-12);
        let expected_total = plain_de + w.lambda3 * plain_view;
        assert!((g.value(total).item() - expected_total).abs() < 1e-12);
    }

    #[test]
    fn l2_norm_switch_squares_differences() {
        let a = Tensor::<f64>::filled(&[1, 2, 2], 0.5);
        let b = Tensor::<f64>::filled(&[1, 2, 2], 0.0);
        assert_eq!(loss_con(&a, &b, RefineNorm::L2).unwrap(), 0.25);
        assert_eq!(loss_con(&a, &b, RefineNorm::L1).unwrap(), 0.5);
        assert!(RefineNorm::parse("l2").unwrap() == RefineNorm::L2);
        assert!(RefineNorm::parse("huber").is_err());
    }
}
