//! BerHu training loss and panorama depth evaluation metrics.

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_BERHU_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerHuConfig {
    threshold: f64,
}

impl Default for BerHuConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_BERHU_THRESHOLD,
        }
    }
}

impl BerHuConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if threshold.is_nan() || threshold <= 0.0 {
            return Err(Error::Config(format!("BerHu threshold must be > 0, got {threshold}")));
        }
        Ok(Self { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Reverse Huber: `|d|` below `t`, `(d^2 + t^2) / 2t` from `t` on.
///
/// The quadratic branch is evaluated as `|d| + (|d| - t)^2 / 2t`, which is
/// the same polynomial but returns exactly `t` at `|d| = t`.
pub fn berhu(y: f64, y_hat: f64, t: f64) -> f64 {
    let a = (y - y_hat).abs();
    if a < t {
        a
    } else {
        a + (a - t) * (a - t) / (2.0 * t)
    }
}

/// Derivative of [`berhu`] with respect to `y_hat`.
fn berhu_grad(y: f64, y_hat: f64, t: f64) -> f64 {
    let d = y - y_hat;
    if d.abs() < t {
        if d > 0.0 {
            -1.0
        } else if d < 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        -d / t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleLossConfig {
    weights: Vec<f64>,
}

impl MultiScaleLossConfig {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
            return Err(Error::Config(format!("scale weights must be positive, got {weights:?}")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }
}

fn check_scale_inputs(n_preds: usize, n_gts: usize, n_masks: usize, config: &MultiScaleLossConfig) -> Result<()> {
    if n_preds != config.scales() || n_gts != config.scales() || n_masks != config.scales() {
        return shape_err(format!(
            "{n_preds} predictions / {n_gts} targets / {n_masks} masks for {} scales",
            config.scales()
        ));
    }
    Ok(())
}

/// Masked BerHu mean of one scale; `None` when no element is valid.
pub fn masked_berhu_mean(pred: &[f64], gt: &[f64], mask: &[bool], berhu_cfg: BerHuConfig) -> Result<Option<f64>> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return shape_err(format!("{} / {} / {} elements", pred.len(), gt.len(), mask.len()));
    }
    let t = berhu_cfg.threshold;
    let (sum, n) = pred
        .iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((&p, &g), _)| (s + berhu(g, p, t), n + 1));
    Ok((n > 0).then(|| sum / n as f64))
}

/// `sum_i w_i * mean_{valid}(BerHu)` over scales, skipping scales without
/// valid elements.
pub fn multiscale_loss(
    preds: &[&[f64]],
    gts: &[&[f64]],
    masks: &[&[bool]],
    config: &MultiScaleLossConfig,
    berhu_cfg: BerHuConfig,
) -> Result<f64> {
    check_scale_inputs(preds.len(), gts.len(), masks.len(), config)?;
    let mut total = 0.0;
    let mut used = 0;
    for (((p, g), m), w) in preds.iter().zip(gts).zip(masks).zip(&config.weights) {
        if let Some(mean) = masked_berhu_mean(p, g, m, berhu_cfg)? {
            total += w * mean;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Evaluation("no valid elements at any scale".into()));
    }
    Ok(total)
}

/// Tape version of [`masked_berhu_mean`]; `pred` is `[F]` or `[F, 1]`.
pub fn masked_berhu_mean_var<'t>(
    pred: Var<'t>,
    gt: &[f64],
    mask: &[bool],
    berhu_cfg: BerHuConfig,
) -> Result<Option<Var<'t>>> {
    let p = pred.value();
    let Some(mean) = masked_berhu_mean(p.data(), gt, mask, berhu_cfg)? else {
        return Ok(None);
    };
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let (gt, mask) = (gt.to_vec(), mask.to_vec());
    let t = berhu_cfg.threshold;
    Ok(Some(pred.tape().record(&[pred], Tensor::scalar(mean), move |g| {
        let scale = g.item() / n;
        let data = p
            .data()
            .iter()
            .zip(&gt)
            .zip(&mask)
            .map(|((&ph, &y), &m)| if m { scale * berhu_grad(y, ph, t) } else { 0.0 })
            .collect();
        vec![Some(Tensor::new(p.shape().to_vec(), data).unwrap())]
    })))
}

pub fn multiscale_loss_var<'t>(
    preds: &[Var<'t>],
    gts: &[Vec<f64>],
    masks: &[Vec<bool>],
    config: &MultiScaleLossConfig,
    berhu_cfg: BerHuConfig,
) -> Result<Var<'t>> {
    check_scale_inputs(preds.len(), gts.len(), masks.len(), config)?;
    let mut total: Option<Var<'t>> = None;
    for (((&p, g), m), &w) in preds.iter().zip(gts).zip(masks).zip(&config.weights) {
        if let Some(mean) = masked_berhu_mean_var(p, g, m, berhu_cfg)? {
            let term = mean.scale(w);
            total = Some(match total {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::Evaluation("no valid elements at any scale".into()))
}

/// Inclusive ground-truth range considered valid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    /// 0.1 to 10 m, the default evaluation range.
    pub const STANDARD: DepthRange = DepthRange { min: 0.1, max: 10.0 };
    /// 0.1 to 16 m, for large real-world indoor scans.
    pub const EXTENDED: DepthRange = DepthRange { min: 0.1, max: 16.0 };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min < max) {
            return Err(Error::Domain(format!("invalid depth range {min}..{max}")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, d: f64) -> bool {
        self.min <= d && d <= self.max
    }
}

pub fn valid_mask(gt: &[f64], range: DepthRange) -> (Vec<bool>, usize) {
    let mask: Vec<bool> = gt.iter().map(|&d| range.contains(d)).collect();
    let n = mask.iter().filter(|&&m| m).count();
    (mask, n)
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsInput<'a> {
    pub gt: &'a [f64],
    pub pr: &'a [f64],
    pub range: DepthRange,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub mre: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n: usize,
}

/// Mean absolute / relative error, RMSE, log10 RMSE and the δ accuracies
/// (`max(gt/pr, pr/gt) < 1.25^n`), all normalized by the valid count.
pub fn evaluate(input: MetricsInput<'_>) -> Result<MetricsReport> {
    let MetricsInput { gt, pr, range } = input;
    if gt.len() != pr.len() {
        return shape_err(format!("{} ground-truth vs {} predicted values", gt.len(), pr.len()));
    }
    DepthRange::new(range.min, range.max)?;
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    let mut abs = 0.0;
    let mut rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut hits = [0usize; 3];
    let mut n = 0usize;
    for (i, (&g, &p)) in gt.iter().zip(pr).enumerate() {
        if !range.contains(g) {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::Domain(format!("prediction {p} at valid element {i}")));
        }
        n += 1;
        let diff = g - p;
        abs += diff.abs();
        rel += diff.abs() / g;
        sq += diff * diff;
        sq_log += (g.log10() - p.log10()).powi(2);
        let ratio = (g / p).max(p / g);
        for (hit, &t) in hits.iter_mut().zip(&thresholds) {
            if ratio < t {
                *hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Evaluation("no valid ground-truth elements".into()));
    }
    let nf = n as f64;
    Ok(MetricsReport {
        mae: abs / nf,
        mre: rel / nf,
        rmse: (sq / nf).sqrt(),
        rmse_log: (sq_log / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
        n,
    })
}

impl fmt::Display for MetricsReport {
    /// Single-line JSON object; floats use the shortest round-trip form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{\"mae\":{:?},\"mre\":{:?},\"rmse\":{:?},\"rmse_log\":{:?},\"delta1\":{:?},\"delta2\":{:?},\"delta3\":{:?},\"n\":{}}}",
            self.mae, self.mre, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3, self.n
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn berhu_branches() {
        assert!((berhu(1.0, 0.9, 0.2) - 0.1).abs() < 1e-15);
        assert!((berhu(1.0, 0.5, 0.2) - 0.725).abs() < 1e-15);
        assert_eq!(berhu(0.2, 0.0, 0.2), 0.2);
        assert_eq!(berhu(0.0, 0.2, 0.2), 0.2);
        assert_eq!(berhu(1.0, 1.0, 0.2), 0.0);
    }

    #[test]
    fn threshold_must_be_positive() {
        assert!(BerHuConfig::new(0.0).is_err());
        assert!(BerHuConfig::new(-1.0).is_err());
        assert_eq!(BerHuConfig::default().threshold(), 0.2);
    }

    #[test]
    fn multiscale_examples() {
        let cfg = MultiScaleLossConfig::new(vec![1.0]).unwrap();
        let b = BerHuConfig::default();
        let gt = [1.0, 2.0, 3.0];
        let all = [true; 3];
        assert_eq!(multiscale_loss(&[&gt], &[&gt], &[&all], &cfg, b).unwrap(), 0.0);

        let pr = [0.9, 2.5, 3.0];
        let plain = (berhu(1.0, 0.9, 0.2) + berhu(2.0, 2.5, 0.2)) / 3.0;
        assert_eq!(multiscale_loss(&[&pr], &[&gt], &[&all], &cfg, b).unwrap(), plain);

        let cfg2 = MultiScaleLossConfig::new(vec![1.0, 0.5]).unwrap();
        let coarse_gt = [1.0];
        let coarse_pr = [0.0];
        let a = plain;
        let bb = berhu(1.0, 0.0, 0.2);
        let got = multiscale_loss(
            &[&pr, &coarse_pr],
            &[&gt, &coarse_gt],
            &[&all, &[true]],
            &cfg2,
            b,
        )
        .unwrap();
        assert_eq!(got, a + 0.5 * bb);
    }

    #[test]
    fn empty_scales() {
        let cfg = MultiScaleLossConfig::new(vec![1.0, 1.0]).unwrap();
        let b = BerHuConfig::default();
        let x = [1.0];
        let none = [false];
        assert!(matches!(
            multiscale_loss(&[&x, &x], &[&x, &x], &[&none, &none], &cfg, b),
            Err(Error::Evaluation(_))
        ));
        // One empty scale is skipped.
        let y = [2.0];
        let got = multiscale_loss(&[&x, &x], &[&y, &y], &[&none, &[true]], &cfg, b).unwrap();
        assert_eq!(got, berhu(2.0, 1.0, 0.2));
        assert!(MultiScaleLossConfig::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn var_loss_matches_plain() {
        let tape = Tape::new();
        let pr = tape.leaf(Tensor::new([4, 1], vec![0.9, 2.5, 3.0, 1.0]).unwrap());
        let gt = vec![1.0, 2.0, 3.05, 5.0];
        let mask = vec![true, true, true, false];
        let cfg = MultiScaleLossConfig::new(vec![0.7]).unwrap();
        let b = BerHuConfig::default();
        let loss = multiscale_loss_var(&[pr], &[gt.clone()], &[mask.clone()], &cfg, b).unwrap();
        let plain = multiscale_loss(&[pr.value().data()], &[&gt], &[&mask], &cfg, b).unwrap();
        assert_eq!(loss.value().item(), plain);
        let g = tape.backward(loss).unwrap().get(pr);
        let s = 0.7 / 3.0;
        let expected = [-s, s * (0.5 / 0.2), -s, 0.0];
        for (a, b) in g.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn mask_examples() {
        let (m, n) = valid_mask(&[0.05, 0.5, 12.0], DepthRange::STANDARD);
        assert_eq!((m, n), (vec![false, true, false], 1));
        assert_eq!(valid_mask(&[0.0; 5], DepthRange::STANDARD).1, 0);
        assert_eq!(valid_mask(&[12.0, 15.9, 16.5], DepthRange::EXTENDED).1, 2);
        assert!(DepthRange::new(1.0, 1.0).is_err());
    }

    #[test]
    fn metrics_examples() {
        let gt = [1.0, 2.0, 3.0];
        let r = evaluate(MetricsInput { gt: &gt, pr: &gt, range: DepthRange::STANDARD }).unwrap();
        assert_eq!((r.mae, r.mre, r.rmse, r.rmse_log), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));

        let gt = [1.0; 4];
        let pr = [1.0, 1.2, 1.3, 2.0];
        let r = evaluate(MetricsInput { gt: &gt, pr: &pr, range: DepthRange::STANDARD }).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.5, 0.75, 0.75));

        let r = evaluate(MetricsInput { gt: &[1.0, 2.0], pr: &[2.0, 4.0], range: DepthRange::STANDARD }).unwrap();
        assert_eq!(r.mae, 1.5);
        assert_eq!(r.mre, 1.0);
        assert_eq!(r.rmse, 2.5f64.sqrt());
        assert_eq!(r.n, 2);
    }

    #[test]
    fn metrics_errors() {
        let range = DepthRange::STANDARD;
        assert!(matches!(
            evaluate(MetricsInput { gt: &[0.0, 20.0], pr: &[1.0, 1.0], range }),
            Err(Error::Evaluation(_))
        ));
        assert!(matches!(
            evaluate(MetricsInput { gt: &[1.0], pr: &[0.0], range }),
            Err(Error::Domain(_))
        ));
        // Non-positive predictions on invalid elements are ignored.
        assert!(evaluate(MetricsInput { gt: &[0.0, 1.0], pr: &[-1.0, 1.0], range }).is_ok());
        assert!(evaluate(MetricsInput { gt: &[1.0], pr: &[1.0, 2.0], range }).is_err());
    }

    #[test]
    fn report_line() {
        let r = MetricsReport {
            mae: 0.5,
            mre: 0.25,
            rmse: 1.0,
            rmse_log: 0.0,
            delta1: 1.0,
            delta2: 1.0,
            delta3: 1.0,
            n: 3,
        };
        assert_eq!(
            r.to_string(),
            "{\"mae\":0.5,\"mre\":0.25,\"rmse\":1.0,\"rmse_log\":0.0,\"delta1\":1.0,\"delta2\":1.0,\"delta3\":1.0,\"n\":3}"
        );
    }
}
