//! Segmentation metrics over per-pixel label maps.
//!
//! Per-class Dice/IoU/recall are computed per image, restricted to images
//! whose ground truth contains the class, then averaged; the summary means
//! run over foreground classes that occur anywhere. Classes absent from
//! every target are excluded and flagged.

use crate::error::{Error, Result};
use crate::phantom::{ManifestClass, SizeTier};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    pub tier: SizeTier,
    pub dice: f64,
    pub iou: f64,
    pub acc: f64,
    /// Images whose ground truth contains the class.
    pub images: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TierAggregate {
    pub tier: SizeTier,
    pub m_dice: f64,
    pub m_iou: f64,
    pub m_acc: f64,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub m_dice: f64,
    pub m_iou: f64,
    pub m_acc: f64,
    pub tiers: Vec<TierAggregate>,
    /// Classes that never occur in the targets (excluded from the means).
    pub absent_classes: Vec<String>,
}

impl MetricsReport {
    pub fn tier_dice(&self, tier: SizeTier) -> Option<f64> {
        self.tiers.iter().find(|t| t.tier == tier).map(|t| t.m_dice)
    }
}

/// `predictions` and `targets` are per-image label maps of equal length;
/// label value 0 is background, class k uses label k+1.
pub fn evaluate_metrics(
    predictions: &[Vec<u8>],
    targets: &[Vec<u8>],
    classes: &[ManifestClass],
) -> Result<MetricsReport> {
    if predictions.len() != targets.len() {
        return Err(Error::invalid(
            "evaluate_metrics",
            format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        ));
    }
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::invalid("evaluate_metrics", "prediction/target size mismatch"));
        }
    }

    let mut per_class = Vec::new();
    let mut absent = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        let label = (ci + 1) as u8;
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut images = 0usize;
        for (pred, gt) in predictions.iter().zip(targets) {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fne = 0u64;
            let mut present = false;
            for (&p, &g) in pred.iter().zip(gt) {
                let pp = p == label;
                let gg = g == label;
                present |= gg;
                match (pp, gg) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fne += 1,
                    _ => {}
                }
            }
            if !present {
                continue;
            }
            images += 1;
            let denom_d = (2 * tp + fp + fne) as f64;
            sums.0 += if denom_d > 0.0 { 2.0 * tp as f64 / denom_d } else { 0.0 };
            let denom_i = (tp + fp + fne) as f64;
            sums.1 += if denom_i > 0.0 { tp as f64 / denom_i } else { 0.0 };
            sums.2 += tp as f64 / (tp + fne) as f64; // gt nonempty
        }
        if images == 0 {
            absent.push(class.name.clone());
            continue;
        }
        per_class.push(ClassMetrics {
            name: class.name.clone(),
            tier: class.tier,
            dice: sums.0 / images as f64,
            iou: sums.1 / images as f64,
            acc: sums.2 / images as f64,
            images,
        });
    }

    let n = per_class.len().max(1) as f64;
    let m_dice = per_class.iter().map(|c| c.dice).sum::<f64>() / n;
    let m_iou = per_class.iter().map(|c| c.iou).sum::<f64>() / n;
    let m_acc = per_class.iter().map(|c| c.acc).sum::<f64>() / n;

    let mut tiers = Vec::new();
    for tier in [SizeTier::Large, SizeTier::Mid, SizeTier::Small] {
        let members: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.tier == tier).collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        tiers.push(TierAggregate {
            tier,
            m_dice: members.iter().map(|c| c.dice).sum::<f64>() / k,
            m_iou: members.iter().map(|c| c.iou).sum::<f64>() / k,
            m_acc: members.iter().map(|c| c.acc).sum::<f64>() / k,
            n_classes: members.len(),
        });
    }

    Ok(MetricsReport { per_class, m_dice, m_iou, m_acc, tiers, absent_classes: absent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: usize) -> Vec<ManifestClass> {
        (0..n)
            .map(|i| ManifestClass {
                name: format!("c{i}"),
                tier: match i % 3 {
                    0 => SizeTier::Large,
                    1 => SizeTier::Mid,
                    _ => SizeTier::Small,
                },
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_is_all_ones() {
        let maps = vec![vec![0u8, 1, 2, 1], vec![2u8, 2, 0, 1]];
        let r = evaluate_metrics(&maps, &maps, &classes(2)).unwrap();
        assert_eq!(r.m_dice, 1.0);
        assert_eq!(r.m_iou, 1.0);
        assert_eq!(r.m_acc, 1.0);
    }

    #[test]
    fn all_background_prediction_scores_zero() {
        let pred = vec![vec![0u8; 4]];
        let gt = vec![vec![0u8, 1, 1, 0]];
        let r = evaluate_metrics(&pred, &gt, &classes(1)).unwrap();
        assert_eq!(r.per_class[0].dice, 0.0);
        assert_eq!(r.per_class[0].acc, 0.0);
    }

    #[test]
    fn absent_class_is_excluded_and_flagged() {
        let pred = vec![vec![1u8, 0, 0, 0]];
        let gt = vec![vec![1u8, 1, 0, 0]];
        let r = evaluate_metrics(&pred, &gt, &classes(2)).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.absent_classes, vec!["c1".to_string()]);
        // dice of c0: tp=1, fp=0, fn=1 → 2/3
        assert!((r.m_dice - 2.0 / 3.0).abs() < 1e-12);
    }

    /// Brute-force confusion-matrix oracle.
    fn oracle(preds: &[Vec<u8>], gts: &[Vec<u8>], n_classes: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dice = vec![0.0; n_classes];
        let mut iou = vec![0.0; n_classes];
        let mut acc = vec![0.0; n_classes];
        for c in 0..n_classes {
            let label = (c + 1) as u8;
            let mut per_img = Vec::new();
            for (p, g) in preds.iter().zip(gts) {
                if !g.contains(&label) {
                    continue;
                }
                let tp = p.iter().zip(g).filter(|(a, b)| **a == label && **b == label).count() as f64;
                let pp = p.iter().filter(|&&v| v == label).count() as f64;
                let gg = g.iter().filter(|&&v| v == label).count() as f64;
                let d = if pp + gg > 0.0 { 2.0 * tp / (pp + gg) } else { 0.0 };
                let i = if pp + gg - tp > 0.0 { tp / (pp + gg - tp) } else { 0.0 };
                per_img.push((d, i, tp / gg));
            }
            if per_img.is_empty() {
                dice[c] = f64::NAN;
                continue;
            }
            let k = per_img.len() as f64;
            dice[c] = per_img.iter().map(|v| v.0).sum::<f64>() / k;
            iou[c] = per_img.iter().map(|v| v.1).sum::<f64>() / k;
            acc[c] = per_img.iter().map(|v| v.2).sum::<f64>() / k;
        }
        (dice, iou, acc)
    }

    #[test]
    fn matches_confusion_oracle_on_random_maps() {
        let mut rng = crate::rng::CounterRng::new(77);
        let n_classes = 3;
        for _ in 0..100 {
            let gen = |rng: &mut crate::rng::CounterRng| {
                (0..2)
                    .map(|_| (0..64).map(|_| rng.below(n_classes as u64 + 1) as u8).collect::<Vec<u8>>())
                    .collect::<Vec<_>>()
            };
            let preds = gen(&mut rng);
            let gts = gen(&mut rng);
            let r = evaluate_metrics(&preds, &gts, &classes(n_classes)).unwrap();
            let (dice, iou, acc) = oracle(&preds, &gts, n_classes);
            for cm in &r.per_class {
                let c: usize = cm.name[1..].parse().unwrap();
                assert_eq!(cm.dice, dice[c]);
                assert_eq!(cm.iou, iou[c]);
                assert_eq!(cm.acc, acc[c]);
            }
        }
    }

    #[test]
    fn tier_aggregates_weighted_mean_recovers_global() {
        let mut rng = crate::rng::CounterRng::new(5);
        let preds: Vec<Vec<u8>> = (0..3).map(|_| (0..100).map(|_| rng.below(7) as u8).collect()).collect();
        let gts: Vec<Vec<u8>> = (0..3).map(|_| (0..100).map(|_| rng.below(7) as u8).collect()).collect();
        let r = evaluate_metrics(&preds, &gts, &classes(6)).unwrap();
        let weighted: f64 = r.tiers.iter().map(|t| t.m_dice * t.n_classes as f64).sum::<f64>()
            / r.per_class.len() as f64;
        assert!((weighted - r.m_dice).abs() < 1e-9);
    }
}
