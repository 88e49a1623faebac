//! Box losses, matching costs, and the appearance contrastive loss.

use std::collections::BTreeMap;

use crate::grad::{Tape, Var};
use crate::model::{AggregatedVar, BoundingBox, QueryOutputVar};

use super::hungarian::{hungarian, CostMatrix};
use super::AssocError;

const GIOU_EPS: f64 = 1e-9;

/// Loss and matching-cost coefficients. Defaults: appearance matching cost
/// 1, appearance loss coefficient 2, DETR-style L1 = 5 and gIoU = 2, and
/// negative down-weight 0.1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_app_cost: f64,
    pub w_app_loss: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_app_cost: 1.0, w_app_loss: 2.0, w_l1: 5.0, w_giou: 2.0, w_neg: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("w_app_cost", self.w_app_cost),
            ("w_app_loss", self.w_app_loss),
            ("w_l1", self.w_l1),
            ("w_giou", self.w_giou),
            ("w_neg", self.w_neg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{} must be a nonnegative finite number, got {}", name, v));
            }
        }
        Ok(())
    }
}

/// `1 − u·v / (‖u‖‖v‖)`, in `[0, 2]` for nonzero inputs.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64, AssocError> {
    assert_eq!(u.len(), v.len(), "cosine_distance: length mismatch");
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(AssocError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nu * nv))
}

/// Generalized IoU: IoU − (enclosing − union) / enclosing, in `[−1, 1]`.
pub fn giou(b1: &BoundingBox, b2: &BoundingBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = b1.corners();
    let (bx1, by1, bx2, by2) = b2.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = b1.area() + b2.area() - inter;
    let iou = inter / (union + GIOU_EPS);
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enclosing = ew * eh;
    iou - (enclosing - union) / (enclosing + GIOU_EPS)
}

/// Differentiable gIoU of a predicted box (a `[4]` tensor of
/// `(cx, cy, w, h)`) against a fixed target. Mirrors [`giou`] exactly.
pub fn giou_var(tape: &Tape, pred: &Var, gt: &BoundingBox) -> Var {
    let coord = |i: usize| pred.slice(0, i, 1);
    let (cx, cy, w, h) = (coord(0), coord(1), coord(2), coord(3));
    let x1 = cx.sub(&w.scale(0.5));
    let x2 = cx.add(&w.scale(0.5));
    let y1 = cy.sub(&h.scale(0.5));
    let y2 = cy.add(&h.scale(0.5));
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let c = |v: f64| tape.constant(crate::grad::Tensor::from_vec(vec![v]));
    let (gx1, gy1, gx2, gy2) = (c(gx1), c(gy1), c(gx2), c(gy2));

    let iw = x2.min_elem(&gx2).sub(&x1.max_elem(&gx1)).relu();
    let ih = y2.min_elem(&gy2).sub(&y1.max_elem(&gy1)).relu();
    let inter = iw.mul(&ih);
    let area_p = w.mul(&h);
    let area_g = c(gt.area());
    let union = area_p.add(&area_g).sub(&inter);
    let iou = inter.div(&union.add_const(GIOU_EPS));

    let ew = x2.max_elem(&gx2).sub(&x1.min_elem(&gx1));
    let eh = y2.max_elem(&gy2).sub(&y1.min_elem(&gy1));
    let enclosing = ew.mul(&eh);
    let penalty = enclosing.sub(&union).div(&enclosing.add_const(GIOU_EPS));
    iou.sub(&penalty).reshape(&[])
}

/// Differentiable L1 distance between a predicted `[4]` box and a target.
pub fn l1_var(tape: &Tape, pred: &Var, gt: &BoundingBox) -> Var {
    let target = tape.constant(gt.to_tensor());
    pred.sub(&target).abs().sum()
}

/// Matching cost between one prediction and one ground-truth object:
/// `w_app · cosdist(a, a_gt) + w_l1 · ‖b − b_gt‖₁ + w_giou · (1 − gIoU)`.
/// The appearance term is dropped when the target has no appearance.
pub fn match_cost(
    pred_box: &BoundingBox,
    pred_app: &[f64],
    gt_box: &BoundingBox,
    gt_app: Option<&[f64]>,
    weights: &LossWeights,
) -> f64 {
    let l1: f64 = pred_box
        .to_array()
        .iter()
        .zip(gt_box.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    let mut cost = weights.w_l1 * l1 + weights.w_giou * (1.0 - giou(pred_box, gt_box));
    if let Some(ga) = gt_app {
        let nu: f64 = pred_app.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let nv: f64 = ga.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let dot: f64 = pred_app.iter().zip(ga).map(|(a, b)| a * b).sum();
        cost += weights.w_app_cost * (1.0 - dot / (nu * nv));
    }
    cost
}

/// InfoNCE-style appearance loss for one anchor:
/// `L = −log( exp(s⁺) / (exp(s⁺) + w_neg · Σ exp(s⁻)) )` with `s` the dot
/// products of the (unit) anchor against the previous-frame positive and
/// negatives. Empty negatives force `L = 0`.
pub fn appearance_loss_var(anchor: &Var, positive: &Var, negatives: &[&Var], w_neg: f64) -> Var {
    let s_plus = anchor.dot(positive);
    let mut denom = s_plus.exp();
    if !negatives.is_empty() {
        let mut neg_sum: Option<Var> = None;
        for n in negatives {
            let e = anchor.dot(n).exp();
            neg_sum = Some(match neg_sum {
                None => e,
                Some(s) => s.add(&e),
            });
        }
        denom = denom.add(&neg_sum.expect("nonempty negatives").scale(w_neg));
    }
    denom.log().sub(&s_plus)
}

/// Value-level wrapper over [`appearance_loss_var`].
pub fn appearance_loss(
    anchor_next: &[f64],
    positive_prev: &[f64],
    negatives_prev: &[Vec<f64>],
    w_neg: f64,
) -> f64 {
    let tape = Tape::new();
    let a = tape.constant(crate::grad::Tensor::from_vec(anchor_next.to_vec()));
    let p = tape.constant(crate::grad::Tensor::from_vec(positive_prev.to_vec()));
    let negs: Vec<Var> = negatives_prev
        .iter()
        .map(|n| tape.constant(crate::grad::Tensor::from_vec(n.clone())))
        .collect();
    let refs: Vec<&Var> = negs.iter().collect();
    appearance_loss_var(&a, &p, &refs, w_neg).item()
}

/// A known track entering the tracking-step loss: its ground-truth identity,
/// its aggregated tracking-step outputs, and the index of its init-step
/// appearance output inside the previous-frame output list.
pub struct TrackPrediction {
    pub gt_id: u32,
    pub agg: AggregatedVar,
    pub prev_idx: usize,
}

/// Set-prediction loss output: the differentiable total plus diagnostics.
pub struct SetLoss {
    pub total: Var,
    pub box_value: f64,
    pub app_value: f64,
    pub n_confirmed: usize,
    pub n_det_matched: usize,
    /// Indices into `det_outputs` that were Hungarian-matched.
    pub det_matched: Vec<usize>,
}

/// Tracking-step transformer set-prediction loss.
///
/// Known tracks whose appearance confirmation succeeds (cosine distance to
/// their init-step appearance below `tau_conf`) are paired with their
/// ground-truth object by identity; the remaining ground truth is
/// Hungarian-matched against det-query outputs. Box terms are summed over
/// all pairs; every known track with visible ground truth plus every
/// det-matched pair contributes an appearance term whose negatives are all
/// other previous-frame outputs.
#[allow(clippy::too_many_arguments)]
pub fn set_prediction_loss(
    tape: &Tape,
    tracks: &[TrackPrediction],
    det_outputs: &[&QueryOutputVar],
    gt: &[(u32, BoundingBox)],
    prev_apps: &[Var],
    prev_app_of_gt: &BTreeMap<u32, usize>,
    weights: &LossWeights,
    tau_conf: f64,
) -> Result<SetLoss, AssocError> {
    {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in gt {
            if !seen.insert(*id) {
                return Err(AssocError::DuplicateGtId(*id));
            }
        }
    }

    // (pred box Var, target box) pairs entering the box loss.
    let mut box_pairs: Vec<(Var, BoundingBox)> = Vec::new();
    // (anchor Var, positive index into prev_apps) pairs for the appearance
    // loss.
    let mut anchors: Vec<(Var, usize)> = Vec::new();
    let mut claimed: Vec<u32> = Vec::new();
    let mut n_confirmed = 0;

    for t in tracks {
        let Some((_, gt_box)) = gt.iter().find(|(id, _)| *id == t.gt_id) else {
            // Object absent this frame: nothing to regress or attract.
            continue;
        };
        anchors.push((t.agg.a.clone(), t.prev_idx));
        let dist = cosine_distance(t.agg.a.value().data(), prev_apps[t.prev_idx].value().data())?;
        if dist < tau_conf {
            n_confirmed += 1;
            claimed.push(t.gt_id);
            box_pairs.push((t.agg.b.clone(), *gt_box));
        }
    }

    // Remaining ground truth against det-query outputs.
    let remaining: Vec<(u32, BoundingBox)> =
        gt.iter().filter(|(id, _)| !claimed.contains(id)).copied().collect();
    let mut n_det_matched = 0;
    let mut det_matched = Vec::new();
    if !remaining.is_empty() && !det_outputs.is_empty() {
        let costs = CostMatrix::from_fn(det_outputs.len(), remaining.len(), |r, c| {
            let out = det_outputs[r];
            let (gt_id, gt_box) = &remaining[c];
            let gt_app = prev_app_of_gt.get(gt_id).map(|i| prev_apps[*i].value());
            match_cost(
                &out.bbox(),
                out.a.value().data(),
                gt_box,
                gt_app.as_ref().map(|t| t.data()),
                weights,
            )
        })
        .expect("finite matching costs");
        for (det_i, gt_i) in hungarian(&costs).pairs {
            let (gt_id, gt_box) = remaining[gt_i];
            box_pairs.push((det_outputs[det_i].b.clone(), gt_box));
            if let Some(idx) = prev_app_of_gt.get(&gt_id) {
                anchors.push((det_outputs[det_i].a.clone(), *idx));
            }
            det_matched.push(det_i);
            n_det_matched += 1;
        }
    }

    let zero = || tape.scalar(0.0);
    let mut box_loss: Option<Var> = None;
    for (pred, target) in &box_pairs {
        let l1 = l1_var(tape, pred, target).scale(weights.w_l1);
        let g = giou_var(tape, pred, target).neg().add_const(1.0).scale(weights.w_giou);
        let term = l1.add(&g);
        box_loss = Some(match box_loss {
            None => term,
            Some(s) => s.add(&term),
        });
    }
    let box_loss = box_loss.unwrap_or_else(zero);

    let mut app_loss: Option<Var> = None;
    for (anchor, pos_idx) in &anchors {
        let negatives: Vec<&Var> = prev_apps
            .iter()
            .enumerate()
            .filter(|(i, _)| i != pos_idx)
            .map(|(_, v)| v)
            .collect();
        let term = appearance_loss_var(anchor, &prev_apps[*pos_idx], &negatives, weights.w_neg);
        app_loss = Some(match app_loss {
            None => term,
            Some(s) => s.add(&term),
        });
    }
    let app_loss = app_loss.unwrap_or_else(zero);

    let box_value = box_loss.item();
    let app_value = app_loss.item();
    let total = box_loss.add(&app_loss.scale(weights.w_app_loss));
    Ok(SetLoss { total, box_value, app_value, n_confirmed, n_det_matched, det_matched })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn default_weights_match_the_published_settings() {
        let w = LossWeights::default();
        assert_eq!(w.w_app_cost, 1.0);
        assert_eq!(w.w_app_loss, 2.0);
        assert_eq!(w.w_neg, 0.1);
        assert_eq!((w.w_l1, w.w_giou), (5.0, 2.0));
        w.validate().unwrap();
    }

    #[test]
    fn giou_identical_boxes_is_one() {
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.3).unwrap();
        assert!((giou(&b, &b) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn giou_hand_derived_disjoint_case() {
        // Enclosing area 0.36, union 0.02 → gIoU = −0.34/0.36 = −0.9444…
        let a = BoundingBox::new(0.25, 0.25, 0.1, 0.1).unwrap();
        let b = BoundingBox::new(0.75, 0.75, 0.1, 0.1).unwrap();
        assert!((giou(&a, &b) - (-0.9444)).abs() < 1e-3);
    }

    #[test]
    fn giou_is_symmetric_and_bounded() {
        let boxes = [
            BoundingBox::new(0.3, 0.4, 0.2, 0.1).unwrap(),
            BoundingBox::new(0.6, 0.5, 0.3, 0.4).unwrap(),
            BoundingBox::new(0.1, 0.9, 0.05, 0.05).unwrap(),
        ];
        for a in &boxes {
            for b in &boxes {
                let g = giou(a, b);
                assert!((g - giou(b, a)).abs() < 1e-12);
                assert!((-1.0..=1.0).contains(&g));
            }
        }
    }

    #[test]
    fn giou_var_matches_pure_route() {
        let preds = [
            BoundingBox::new(0.32, 0.41, 0.21, 0.11).unwrap(),
            BoundingBox::new(0.75, 0.71, 0.12, 0.33).unwrap(),
        ];
        let gts = [
            BoundingBox::new(0.30, 0.40, 0.20, 0.10).unwrap(),
            BoundingBox::new(0.25, 0.25, 0.10, 0.10).unwrap(),
        ];
        let tape = Tape::new();
        for p in &preds {
            for g in &gts {
                let pv = tape.constant(p.to_tensor());
                let got = giou_var(&tape, &pv, g).item();
                assert!((got - giou(p, g)).abs() < 1e-12, "{} vs {}", got, giou(p, g));
            }
        }
    }

    #[test]
    fn cosine_distance_basics() {
        let v = unit(vec![1.0, 2.0, 3.0]);
        assert!(cosine_distance(&v, &v).unwrap().abs() < 1e-12);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_distance(&v, &neg).unwrap() - 2.0).abs() < 1e-12);
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert!((cosine_distance(&e1, &e2).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(cosine_distance(&[0.0, 0.0], &e1), Err(AssocError::ZeroVector)));
    }

    #[test]
    fn match_cost_zero_for_perfect_prediction() {
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let a = unit(vec![0.3, -0.4, 0.5]);
        let w = LossWeights::default();
        let c = match_cost(&b, &a, &b, Some(&a), &w);
        assert!(c.abs() < 1e-6, "cost {}", c);
    }

    #[test]
    fn match_cost_monotone_in_l1_distance() {
        let w = LossWeights::default();
        let gt = BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let a = unit(vec![1.0, 0.0]);
        let mut last = -1.0;
        for step in 0..8 {
            let shift = step as f64 * 0.03;
            let pred = BoundingBox::new(0.5 + shift, 0.5, 0.2, 0.2).unwrap();
            let c = match_cost(&pred, &a, &gt, Some(&a), &w);
            assert!(c > last, "cost not increasing at shift {}", shift);
            last = c;
        }
    }

    #[test]
    fn appearance_loss_hand_derived_value() {
        // s⁺ = 1, two orthogonal negatives, w_neg = 0.1:
        // L = −ln(e / (e + 0.2)) = 0.070993…
        let anchor = vec![1.0, 0.0, 0.0];
        let positive = vec![1.0, 0.0, 0.0];
        let negatives = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let l = appearance_loss(&anchor, &positive, &negatives, 0.1);
        assert!((l - 0.0710).abs() < 1e-4, "loss {}", l);
    }

    #[test]
    fn appearance_loss_empty_negatives_is_zero() {
        let anchor = unit(vec![0.2, 0.5, -0.7]);
        let l = appearance_loss(&anchor, &anchor, &[], 0.1);
        assert!(l.abs() < 1e-12, "loss {}", l);
        // Not just for the maximal-similarity case: any positive works.
        let other = unit(vec![1.0, 0.0, 0.0]);
        let l = appearance_loss(&anchor, &other, &[], 0.1);
        assert!(l.abs() < 1e-12, "loss {}", l);
    }

    #[test]
    fn appearance_loss_monotonicity() {
        let e1 = vec![1.0, 0.0];
        let neg = vec![vec![0.0, 1.0]];
        // Decreasing in s⁺: anchor rotating away from positive raises loss.
        let mut last = -1.0;
        for step in 0..5 {
            let theta = step as f64 * 0.3;
            let anchor = vec![theta.cos(), theta.sin()];
            let l = appearance_loss(&anchor, &e1, &neg, 0.1);
            assert!(l > last);
            last = l;
        }
        // Increasing in s⁻ and never negative.
        let mut last = -1.0;
        for step in 0..5 {
            let theta = 1.5 - step as f64 * 0.3;
            let negatives = vec![vec![theta.cos(), theta.sin()]];
            let l = appearance_loss(&e1, &e1, &negatives, 0.1);
            assert!(l > last && l >= 0.0);
            last = l;
        }
    }
}
