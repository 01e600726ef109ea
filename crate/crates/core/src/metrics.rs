//! Segmentation and restoration metrics over `[-1, 1]`-encoded tensors.
//! Masks are obtained by thresholding at 0 (probability 0.5).

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::numeric::{Real, Tensor};

/// Peak-to-peak range of the encoded signal, used by [`psnr`].
pub const ENCODED_PEAK: f64 = 2.0;

pub const CSV_HEADER: &str = "method,split,iou,dice,mse,psnr,n_images";

fn counts<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<(f64, f64, f64)> {
    pred.same_shape(truth, "metrics")?;
    let (mut inter, mut p, mut q) = (0.0, 0.0, 0.0);
    for (a, b) in pred.data().iter().zip(truth.data()) {
        let a = *a > T::zero();
        let b = *b > T::zero();
        inter += (a && b) as u8 as f64;
        p += a as u8 as f64;
        q += b as u8 as f64;
    }
    Ok((inter, p, q))
}

/// Intersection over union; two empty masks score 1.
pub fn iou<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (i, p, q) = counts(pred, truth)?;
    let union = p + q - i;
    Ok(if union == 0.0 { 1.0 } else { i / union })
}

/// Sorensen-Dice coefficient; two empty masks score 1.
pub fn dice<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let (i, p, q) = counts(pred, truth)?;
    Ok(if p + q == 0.0 { 1.0 } else { 2.0 * i / (p + q) })
}

pub fn mse<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    crate::diffusion::training_loss(pred, truth)
}

/// `10 log10(peak^2 / mse)`; `+inf` for identical inputs.
pub fn psnr<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let m = mse(pred, truth)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (ENCODED_PEAK * ENCODED_PEAK / m).log10()
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub iou: f64,
    pub dice: f64,
    pub mse: f64,
    pub psnr: f64,
}

impl MetricReport {
    pub fn of<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Self> {
        Ok(MetricReport {
            iou: iou(pred, truth)?,
            dice: dice(pred, truth)?,
            mse: mse(pred, truth)?,
            psnr: psnr(pred, truth)?,
        })
    }

    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut out = MetricReport::default();
        for r in reports {
            out.iou += r.iou / n;
            out.dice += r.dice / n;
            out.mse += r.mse / n;
            out.psnr += r.psnr / n;
        }
        out
    }
}

/// Per-image reports of a batch `[B, ...]`.
pub fn per_image<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Vec<MetricReport>> {
    pred.same_shape(truth, "per_image")?;
    (0..pred.batch())
        .map(|i| MetricReport::of(&pred.slice_batch(i, 1)?, &truth.slice_batch(i, 1)?))
        .collect()
}

/// One aggregate row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub method: String,
    pub split: String,
    pub report: MetricReport,
    pub n_images: usize,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.9}")
    }
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method,
            r.split,
            fmt_value(r.report.iou),
            fmt_value(r.report.dice),
            fmt_value(r.report.mse),
            fmt_value(r.report.psnr),
            r.n_images
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8], shape: &[usize]) -> Tensor<f64> {
        Tensor::new(shape, bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect()).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = mask(&[1, 1, 0, 0], &[4]);
        let b = mask(&[0, 0, 1, 1], &[4]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn upper_half_against_full_4x4() {
        let pred = mask(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0], &[4, 4]);
        let truth = mask(&[1; 16], &[4, 4]);
        assert_eq!(iou(&pred, &truth).unwrap(), 0.5);
        assert!((dice(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_masks_agree_perfectly() {
        let e = mask(&[0; 9], &[3, 3]);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn psnr_sentinel_and_value() {
        let a = mask(&[1, 0], &[2]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Tensor::from_f64(&[2], &[0.0, -1.0]).unwrap();
        // mse = 0.5, peak 2 -> 10 log10(8)
        assert!((psnr(&b, &a).unwrap() - 10.0 * 8f64.log10()).abs() < 1e-12);
        let row = MetricRow {
            method: "x".into(),
            split: "test".into(),
            report: MetricReport::of(&a, &a).unwrap(),
            n_images: 1,
        };
        assert!(to_csv(&[row]).lines().nth(1).unwrap().contains(",inf,"));
    }

    #[test]
    fn shape_mismatch() {
        let a = mask(&[1, 0], &[2]);
        let b = mask(&[1, 0, 1], &[3]);
        assert!(iou(&a, &b).is_err());
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn csv_header() {
        assert_eq!(to_csv(&[]).trim(), "method,split,iou,dice,mse,psnr,n_images");
    }

    proptest! {
        #[test]
        fn dice_is_a_function_of_iou(bits in proptest::collection::vec(0u8..2, 32), other in proptest::collection::vec(0u8..2, 32)) {
            let a = mask(&bits, &[32]);
            let b = mask(&other, &[32]);
            let i = iou(&a, &b).unwrap();
            let d = dice(&a, &b).unwrap();
            prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            prop_assert!(d >= i);
        }
    }
}
