//! Set-prediction losses: Hungarian assignment of queries to ground-truth
//! organs, Dice / cross-entropy / BCE terms, auxiliary dense losses, and the
//! weighted total with per-term breakdown.

use crate::error::{Error, Result};
use crate::model::DecoderOutputs;
use crate::tensor::{Elem, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_bls_a: f64,
    pub lambda_bls_b: f64,
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 2.0,
            lambda_bce: 5.0,
            lambda_dice: 5.0,
            lambda_bls_a: 0.4,
            lambda_bls_b: 0.4,
            no_object_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cls,
            self.lambda_bce,
            self.lambda_dice,
            self.lambda_bls_a,
            self.lambda_bls_b,
            self.no_object_weight,
        ];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::invalid("loss weights", "all weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One ground-truth object at mask resolution. `class` is the 0-based
/// foreground index (label value minus one).
pub struct GtObject<T: Elem> {
    pub class: usize,
    pub mask: Tensor<T>,
}

/// Ground-truth objects from a full-resolution label map. Masks are resized
/// to the mask-logit resolution by area averaging (each low-res cell holds
/// its block's foreground fraction) and then peak-normalized, so sub-cell
/// extent stays visible to the mask losses while every object — including
/// ones smaller than a single mask cell — trains its strongest cell to full
/// confidence and survives the detection threshold.
pub fn extract_targets<T: Elem>(
    labels: &[u8],
    h: usize,
    w: usize,
    h4: usize,
    w4: usize,
    n_classes: usize,
) -> Vec<GtObject<T>> {
    let by = h / h4;
    let bx = w / w4;
    let mut out = Vec::new();
    for c in 1..=n_classes {
        if !labels.iter().any(|&v| v as usize == c) {
            continue;
        }
        let mut mask = vec![0.0f64; h4 * w4];
        let mut peak = 0.0f64;
        for i in 0..h4 {
            for j in 0..w4 {
                let mut hits = 0usize;
                for y in i * by..(i + 1) * by {
                    for x in j * bx..(j + 1) * bx {
                        if labels[y * w + x] as usize == c {
                            hits += 1;
                        }
                    }
                }
                let frac = hits as f64 / (by * bx) as f64;
                mask[i * w4 + j] = frac;
                peak = peak.max(frac);
            }
        }
        // Squared peak normalization: the strongest cell trains to full
        // confidence, partially-covered neighbors fall off quadratically so
        // sub-cell objects stay detectable without over-covering.
        let scale = 1.0 / peak; // class present ⇒ peak > 0
        out.push(GtObject {
            class: c - 1,
            mask: Tensor::untracked(
                vec![h4, w4],
                mask.iter().map(|&v| T::from_f64((v * scale) * (v * scale))).collect(),
            ),
        });
    }
    out
}

// ── Elementary losses ───────────────────────────────────────────────

/// 1 − (2·Σ p·t + eps) / (Σp + Σt + eps) over probabilities in [0,1].
pub fn dice_loss<T: Elem>(pred: &Tensor<T>, target: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shapes("dice_loss", pred.shape(), target.shape()));
    }
    let e = T::from_f64(eps);
    let inter = pred.mul(target)?.sum();
    let num = inter.mul_scalar(T::from_f64(2.0)).add_scalar(e);
    let den = pred.sum().add(&target.sum())?.add_scalar(e);
    Tensor::scalar(T::ONE).sub(&num.div(&den)?)
}

/// Weighted mean negative log-probability of the target class.
/// `class_weights`, when given, has one weight per class column.
pub fn cross_entropy_loss<T: Elem>(
    logits: &Tensor<T>,
    targets: &[usize],
    class_weights: Option<&[f64]>,
) -> Result<Tensor<T>> {
    if logits.shape().len() != 2 {
        return Err(Error::invalid("cross_entropy", format!("need [n, classes], got {:?}", logits.shape())));
    }
    let classes = logits.shape()[1];
    if let Some(w) = class_weights {
        if w.len() != classes {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} class weights for {} classes", w.len(), classes),
            ));
        }
    }
    for &t in targets {
        if t >= classes {
            return Err(Error::invalid("cross_entropy", format!("target {t} out of range {classes}")));
        }
    }
    let picked = logits.log_softmax(1)?.take_index(targets)?;
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| class_weights.map(|w| w[t]).unwrap_or(1.0))
        .collect();
    let wsum: f64 = weights.iter().sum();
    if wsum == 0.0 {
        return Ok(Tensor::scalar(T::ZERO));
    }
    let wt = Tensor::from_vec(&[targets.len()], weights.iter().map(|&w| T::from_f64(w)).collect())?;
    Ok(picked.mul(&wt)?.sum().mul_scalar(T::from_f64(-1.0 / wsum)))
}

/// Mean binary cross-entropy with logits (stable log-sum-exp form).
pub fn mask_bce_loss<T: Elem>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.shape() != target.shape() {
        return Err(Error::shapes("mask_bce_loss", logits.shape(), target.shape()));
    }
    Ok(logits.bce_with_logits(target)?.mean())
}

// ── Hungarian matching ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// (query index, target index) pairs, sorted by query; injective in both.
    pub assignment: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of `rows` to `cols` for `rows <= cols`;
/// O(rows²·cols) potentials algorithm. Returns col per row.
fn assign_min_cost(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1]; // row occupying col j (1-based, 0 none)
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum-total-cost injective assignment over an arbitrary rectangular
/// cost matrix [rows × cols]; |assignment| = min(rows, cols).
pub fn solve_assignment(cost: &[f64], rows: usize, cols: usize) -> MatchResult {
    if rows == 0 || cols == 0 {
        return MatchResult { assignment: vec![], total_cost: 0.0 };
    }
    let mut assignment: Vec<(usize, usize)> = if rows <= cols {
        assign_min_cost(cost, rows, cols)
            .into_iter()
            .enumerate()
            .map(|(r, c)| (r, c))
            .collect()
    } else {
        let mut t = vec![0.0; cols * rows];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = cost[r * cols + c];
            }
        }
        assign_min_cost(&t, cols, rows)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    };
    assignment.sort_unstable();
    let total_cost = assignment.iter().map(|&(r, c)| cost[r * cols + c]).sum();
    MatchResult { assignment, total_cost }
}

/// Match queries to targets with the class/BCE/Dice cost mix. Pure data
/// computation (f64), no gradients.
pub fn hungarian_match<T: Elem>(
    class_logits: &Tensor<T>,
    mask_logits: &Tensor<T>,
    targets: &[GtObject<T>],
    weights: &LossWeights,
) -> Result<MatchResult> {
    if targets.is_empty() {
        return Ok(MatchResult { assignment: vec![], total_cost: 0.0 });
    }
    let q = class_logits.shape()[0];
    let classes = class_logits.shape()[1];
    let plane = mask_logits.numel() / q;
    for t in targets {
        if t.mask.numel() != plane {
            return Err(Error::shapes("hungarian_match", t.mask.shape(), &[plane]));
        }
        if t.class + 1 >= classes {
            return Err(Error::invalid("hungarian_match", format!("class {} out of range", t.class)));
        }
    }

    // Per-query class probabilities and sigmoid masks, in f64.
    let mut probs = vec![0.0f64; q * classes];
    for qi in 0..q {
        let row = &class_logits.data()[qi * classes..(qi + 1) * classes];
        let m = row.iter().fold(f64::MIN, |acc, &v| acc.max(v.to_f64()));
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v.to_f64() - m).exp();
            probs[qi * classes + j] = e;
            z += e;
        }
        for j in 0..classes {
            probs[qi * classes + j] /= z;
        }
    }
    let sig: Vec<f64> = mask_logits.data().iter().map(|&x| 1.0 / (1.0 + (-x.to_f64()).exp())).collect();
    let sig_sums: Vec<f64> = (0..q).map(|qi| sig[qi * plane..(qi + 1) * plane].iter().sum()).collect();
    let t_sums: Vec<f64> = targets
        .iter()
        .map(|t| t.mask.data().iter().map(|&v| v.to_f64()).sum())
        .collect();

    let mut cost = vec![0.0f64; q * targets.len()];
    for qi in 0..q {
        let logit_row = &mask_logits.data()[qi * plane..(qi + 1) * plane];
        let sig_row = &sig[qi * plane..(qi + 1) * plane];
        for (ti, target) in targets.iter().enumerate() {
            let tdata = target.mask.data();
            let mut inter = 0.0f64;
            let mut bce = 0.0f64;
            for p in 0..plane {
                let t = tdata[p].to_f64();
                let x = logit_row[p].to_f64();
                inter += sig_row[p] * t;
                bce += x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln();
            }
            bce /= plane as f64;
            let dice = 1.0 - (2.0 * inter + 1.0) / (sig_sums[qi] + t_sums[ti] + 1.0);
            let cls = -probs[qi * classes + target.class];
            cost[qi * targets.len() + ti] =
                weights.lambda_cls * cls + weights.lambda_bce * bce + weights.lambda_dice * dice;
        }
    }
    Ok(solve_assignment(&cost, q, targets.len()))
}

// ── Total loss ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
    pub bls_a: f64,
    pub bls_b: f64,
    pub total: f64,
}

/// Deep-supervision total: every prediction set is matched independently and
/// contributes weighted class CE (unmatched queries supervise "no object")
/// plus BCE+Dice over matched masks; the auxiliary heads add CE+Dice against
/// the full label map (head A) and BCE+Dice against the foreground union
/// (head B).
pub fn total_loss<T: Elem>(
    outputs: &DecoderOutputs<T>,
    targets: &[GtObject<T>],
    labels_full: &[u8],
    full_shape: (usize, usize),
    n_classes: usize,
    weights: &LossWeights,
) -> Result<(Tensor<T>, LossBreakdown)> {
    weights.validate()?;
    let mut cls_sum: Option<Tensor<T>> = None;
    let mut bce_sum: Option<Tensor<T>> = None;
    let mut dice_sum: Option<Tensor<T>> = None;
    let add_to = |acc: &mut Option<Tensor<T>>, term: Tensor<T>| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(prev) => prev.add(&term)?,
            None => term,
        });
        Ok(())
    };

    for set in &outputs.sets {
        let q = set.class_logits.shape()[0];
        let matched = hungarian_match(&set.class_logits, &set.mask_logits, targets, weights)?;

        let no_object = n_classes;
        let mut cls_targets = vec![no_object; q];
        for &(qi, ti) in &matched.assignment {
            cls_targets[qi] = targets[ti].class;
        }
        let mut cw = vec![1.0f64; n_classes + 1];
        cw[no_object] = weights.no_object_weight;
        add_to(&mut cls_sum, cross_entropy_loss(&set.class_logits, &cls_targets, Some(&cw))?)?;

        if !matched.assignment.is_empty() {
            let inv = T::from_f64(1.0 / matched.assignment.len() as f64);
            let (h4, w4) = (set.mask_logits.shape()[1], set.mask_logits.shape()[2]);
            let mut bce_terms: Option<Tensor<T>> = None;
            let mut dice_terms: Option<Tensor<T>> = None;
            for &(qi, ti) in &matched.assignment {
                let logit = set.mask_logits.narrow(0, qi, 1)?.reshape(&[h4, w4])?;
                let target = &targets[ti].mask;
                add_to(&mut bce_terms, mask_bce_loss(&logit, target)?)?;
                add_to(&mut dice_terms, dice_loss(&logit.sigmoid(), target, 1.0)?)?;
            }
            add_to(&mut bce_sum, bce_terms.unwrap().mul_scalar(inv))?;
            add_to(&mut dice_sum, dice_terms.unwrap().mul_scalar(inv))?;
        }
    }

    let (h, w) = full_shape;
    let mut bls_a_term: Option<Tensor<T>> = None;
    if let Some(bls_a) = &outputs.bls_a {
        let classes = bls_a.shape()[0];
        if classes != n_classes + 1 {
            return Err(Error::shapes("total_loss bls_a", bls_a.shape(), &[n_classes + 1, h, w]));
        }
        let flat = bls_a.reshape(&[classes, h * w])?.transpose2d()?;
        let pix_targets: Vec<usize> = labels_full.iter().map(|&v| v as usize).collect();
        let ce = cross_entropy_loss(&flat, &pix_targets, None)?;
        let probs = flat.softmax(1)?;
        let mut dice_acc: Option<Tensor<T>> = None;
        for c in 1..=n_classes {
            let ind: Vec<T> = labels_full
                .iter()
                .map(|&v| if v as usize == c { T::ONE } else { T::ZERO })
                .collect();
            let ind = Tensor::from_vec(&[h * w], ind)?;
            let p_c = probs.narrow(1, c, 1)?.reshape(&[h * w])?;
            add_to(&mut dice_acc, dice_loss(&p_c, &ind, 1.0)?)?;
        }
        let d = dice_acc.unwrap().mul_scalar(T::from_f64(1.0 / n_classes as f64));
        bls_a_term = Some(ce.add(&d)?);
    }

    let mut bls_b_term: Option<Tensor<T>> = None;
    if let Some(bls_b) = &outputs.bls_b {
        let union: Vec<T> = labels_full
            .iter()
            .map(|&v| if v > 0 { T::ONE } else { T::ZERO })
            .collect();
        let union = Tensor::from_vec(&[h * w], union)?;
        let flat = bls_b.reshape(&[h * w])?;
        let bce = mask_bce_loss(&flat, &union)?;
        let d = dice_loss(&flat.sigmoid(), &union, 1.0)?;
        bls_b_term = Some(bce.add(&d)?);
    }

    // Weighted total, tracked; the breakdown reads the same weighted pieces.
    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Tensor<T>> = None;
    let add_weighted = |acc: &mut Option<Tensor<T>>,
                            term: Option<Tensor<T>>,
                            lambda: f64,
                            slot: &mut f64|
     -> Result<()> {
        if let Some(t) = term {
            let wt = t.mul_scalar(T::from_f64(lambda));
            *slot = wt.item().to_f64();
            *acc = Some(match acc.take() {
                Some(prev) => prev.add(&wt)?,
                None => wt,
            });
        }
        Ok(())
    };
    add_weighted(&mut total, cls_sum, weights.lambda_cls, &mut breakdown.cls)?;
    add_weighted(&mut total, bce_sum, weights.lambda_bce, &mut breakdown.bce)?;
    add_weighted(&mut total, dice_sum, weights.lambda_dice, &mut breakdown.dice)?;
    add_weighted(&mut total, bls_a_term, weights.lambda_bls_a, &mut breakdown.bls_a)?;
    add_weighted(&mut total, bls_b_term, weights.lambda_bls_b, &mut breakdown.bls_b)?;
    let total = total.unwrap_or_else(|| Tensor::scalar(T::ZERO));
    breakdown.total = total.item().to_f64();
    Ok((total, breakdown))
}
