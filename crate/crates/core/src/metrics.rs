//! Image quality and segmentation metrics: PSNR, SSIM, and mean IoU.
//!
//! All computation is in 64-bit floats regardless of the image scalar type.
//! The SSIM production path uses separable Gaussian filtering; a scalar-loop
//! reference implementation ([`ssim_reference`]) exists purely to validate it.

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{same_shape, Scalar, Tensor};

/// Reported PSNR for a zero-MSE (identical) image pair, and the cap applied
/// to near-zero MSE so reports contain no infinities.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window size (11×11 Gaussian).
pub const SSIM_WINDOW: usize = 11;
/// Gaussian σ of the SSIM window.
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of image values ([0,1] images).
const SSIM_L: f64 = 1.0;

/// Peak signal-to-noise ratio in dB for images in [0,1]:
/// `10·log10(1/MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Converts a `[3, H, W]` image to luma (0.299 R + 0.587 G + 0.114 B); a
/// single-channel image passes through unchanged.
pub fn luma<T: Scalar>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let plane = h * w;
    let d = img.data();
    match c {
        1 => Ok(d.iter().map(|&v| v.to_f64_lossy()).collect()),
        3 => Ok((0..plane)
            .map(|i| {
                0.299 * d[i].to_f64_lossy()
                    + 0.587 * d[plane + i].to_f64_lossy()
                    + 0.114 * d[2 * plane + i].to_f64_lossy()
            })
            .collect()),
        other => Err(Error::Shape(format!(
            "luma conversion expects 1 or 3 channels, got {other}"
        ))),
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian filter: rows then columns.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let wh = h;
    let ww = w - SSIM_WINDOW + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0; wh * ww];
    for y in 0..h {
        for x in 0..ww {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ww + x] = acc;
        }
    }
    // Vertical pass.
    let oh = h - SSIM_WINDOW + 1;
    let mut out = vec![0.0; oh * ww];
    for y in 0..oh {
        for x in 0..ww {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ww + x];
            }
            out[y * ww + x] = acc;
        }
    }
    (out, oh, ww)
}

fn ssim_from_luma(xl: &[f64], yl: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel();
    let sq_x: Vec<f64> = xl.iter().map(|v| v * v).collect();
    let sq_y: Vec<f64> = yl.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xl.iter().zip(yl.iter()).map(|(a, b)| a * b).collect();

    let (mu_x, oh, ow) = filter_valid(xl, h, w, &k);
    let (mu_y, _, _) = filter_valid(yl, h, w, &k);
    let (e_x2, _, _) = filter_valid(&sq_x, h, w, &k);
    let (e_y2, _, _) = filter_valid(&sq_y, h, w, &k);
    let (e_xy, _, _) = filter_valid(&xy, h, w, &k);

    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_x2[i] - mx * mx;
        let var_y = e_y2[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Structural similarity on luma with an 11×11 Gaussian window (σ = 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1; mean over valid window positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    ssim_from_luma(&luma(a)?, &luma(b)?, h, w)
}

/// Scalar-loop SSIM: computes every window's weighted statistics directly.
/// Slow; exists to validate the separable implementation.
pub fn ssim_reference<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let xl = luma(a)?;
    let yl = luma(b)?;
    let k1d = gaussian_kernel();
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut ex2, mut ey2, mut exy) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wgt = k1d[dy] * k1d[dx];
                    let xv = xl[(oy + dy) * w + ox + dx];
                    let yv = yl[(oy + dy) * w + ox + dx];
                    mx += wgt * xv;
                    my += wgt * yv;
                    ex2 += wgt * xv * xv;
                    ey2 += wgt * yv * yv;
                    exy += wgt * xv * yv;
                }
            }
            let var_x = ex2 - mx * mx;
            let var_y = ey2 - my * my;
            let cov = exy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Mean intersection-over-union across the classes present in either map.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "label maps {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut inter = vec![0u64; classes];
    let mut union = vec![0u64; classes];
    for (&p, &g) in pred.ids().iter().zip(gt.ids().iter()) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(Error::Data(format!(
                "label id {} out of range for {classes} classes",
                p.max(g)
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..classes {
        if union[c] > 0 {
            sum += inter[c] as f64 / union[c] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("empty label maps".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn psnr_of_identical_images_is_the_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = rand_image(&mut rng, &[3, 16, 16]);
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);
    }

    #[test]
    fn psnr_of_one_255th_offset_is_about_48_13_db() {
        let img = Tensor::<f64>::filled(&[3, 8, 8], 0.5);
        let off = img.map(|v| v + 1.0 / 255.0);
        let db = psnr(&img, &off).unwrap();
        let expected = 20.0 * 255.0f64.log10();
        assert!((db - expected).abs() < 1e-9, "got {db}, want {expected}");
        assert!((db - 48.13).abs() < 0.01);
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_image(&mut rng, &[3, 12, 12]);
        let b = rand_image(&mut rng, &[3, 12, 12]);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = rand_image(&mut rng, &[3, 16, 16]);
        let s = ssim(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "got {s}");
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let mut img = Tensor::<f64>::zeros(&[1, 16, 16]);
        for y in 0..16 {
            for x in 0..16 {
                img.set3(0, y, x, ((x + y) % 2) as f64);
            }
        }
        let inv = img.map(|v| 1.0 - v);
        let s = ssim(&img, &inv).unwrap();
        assert!(s < 0.0, "anticorrelated structure must give negative SSIM, got {s}");
    }

    #[test]
    fn ssim_stays_within_bounds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = rand_image(&mut rng, &[1, 12, 12]);
            let b = rand_image(&mut rng, &[1, 12, 12]);
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s), "out of range: {s}");
        }
    }

    #[test]
    fn ssim_rejects_images_smaller_than_the_window() {
        let a = Tensor::<f64>::zeros(&[1, 8, 16]);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn separable_ssim_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = rand_image(&mut rng, &[3, 16, 13]);
            let b = rand_image(&mut rng, &[3, 16, 13]);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b).unwrap();
            assert!((fast - slow).abs() < 1e-6, "fast {fast} vs slow {slow}");
        }
    }

    #[test]
    fn miou_of_equal_maps_is_one() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        assert_eq!(miou(&m, &m, 3).unwrap(), 1.0);
    }

    #[test]
    fn miou_matches_hand_count() {
        // gt: half class 0, half class 1; pred: all class 0.
        // IoU₀ = 2/4 = 0.5 (pred covers all 4, gt has 2), IoU₁ = 0 → mean 0.25.
        let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::filled(2, 2, 0);
        assert_eq!(miou(&pred, &gt, 2).unwrap(), 0.25);
    }

    #[test]
    fn miou_is_invariant_under_consistent_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ids_a: Vec<u8> = (0..64).map(|_| rng.random_range(0..4u8)).collect();
        let ids_b: Vec<u8> = (0..64).map(|_| rng.random_range(0..4u8)).collect();
        let a = LabelMap::new(8, 8, ids_a.clone()).unwrap();
        let b = LabelMap::new(8, 8, ids_b.clone()).unwrap();
        let perm = [2u8, 3, 0, 1];
        let pa = LabelMap::new(8, 8, ids_a.iter().map(|&i| perm[i as usize]).collect()).unwrap();
        let pb = LabelMap::new(8, 8, ids_b.iter().map(|&i| perm[i as usize]).collect()).unwrap();
        let orig = miou(&a, &b, 4).unwrap();
        let permuted = miou(&pa, &pb, 4).unwrap();
        assert!((orig - permuted).abs() < 1e-15);
    }

    #[test]
    fn miou_rejects_out_of_range_ids() {
        let a = LabelMap::filled(1, 1, 5);
        let b = LabelMap::filled(1, 1, 0);
        assert!(miou(&a, &b, 3).is_err());
    }

    #[test]
    fn luma_weights_applied_per_channel() {
        let mut img = Tensor::<f64>::zeros(&[3, 1, 1]);
        img.set3(0, 0, 0, 1.0);
        assert!((luma(&img).unwrap()[0] - 0.299).abs() < 1e-12);
        let mut img = Tensor::<f64>::zeros(&[3, 1, 1]);
        img.set3(1, 0, 0, 1.0);
        assert!((luma(&img).unwrap()[0] - 0.587).abs() < 1e-12);
    }
}
