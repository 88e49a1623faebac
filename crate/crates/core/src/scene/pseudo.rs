//! Pseudo-tracking pairs: two "adjacent frames" from one frame via a
//! bounded random affine transform (translation + isotropic scale).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::BoundingBox;

use super::{FrameGrid, SceneError};

const MAX_RETRIES: usize = 100;

/// Apply `p' = s·p + t` to the frame by inverse-warp bilinear sampling.
fn warp(frame: &FrameGrid, s: f64, tx: f64, ty: f64) -> FrameGrid {
    let mut out = FrameGrid::zeros(frame.h, frame.w, frame.c);
    let (wf, hf) = (frame.w as f64, frame.h as f64);
    for y in 0..frame.h {
        for x in 0..frame.w {
            let xn = (x as f64 + 0.5) / wf;
            let yn = (y as f64 + 0.5) / hf;
            // Source position in grid coordinates.
            let sx = ((xn - tx) / s) * wf - 0.5;
            let sy = ((yn - ty) / s) * hf - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            for ((ix, iy), wgt) in [
                ((x0, y0), (1.0 - fx) * (1.0 - fy)),
                ((x0 + 1.0, y0), fx * (1.0 - fy)),
                ((x0, y0 + 1.0), (1.0 - fx) * fy),
                ((x0 + 1.0, y0 + 1.0), fx * fy),
            ] {
                if wgt == 0.0 || ix < 0.0 || iy < 0.0 || ix >= wf || iy >= hf {
                    continue;
                }
                let (gx, gy) = (ix as usize, iy as usize);
                for ch in 0..frame.c {
                    *out.at_mut(y, x, ch) += wgt * frame.at(gy, gx, ch);
                }
            }
        }
    }
    out
}

fn transform_box(b: &BoundingBox, s: f64, tx: f64, ty: f64) -> BoundingBox {
    BoundingBox { cx: s * b.cx + tx, cy: s * b.cy + ty, w: s * b.w, h: s * b.h }
}

/// Clip a (possibly out-of-frame) box to the unit frame. Returns `None`
/// when nothing remains.
fn clip_box(b: &BoundingBox) -> Option<BoundingBox> {
    let (x1, y1, x2, y2) = b.corners();
    let cx1 = x1.max(0.0);
    let cy1 = y1.max(0.0);
    let cx2 = x2.min(1.0);
    let cy2 = y2.min(1.0);
    if cx2 - cx1 <= 1e-9 || cy2 - cy1 <= 1e-9 {
        return None;
    }
    Some(BoundingBox {
        cx: (cx1 + cx2) / 2.0,
        cy: (cy1 + cy2) / 2.0,
        w: cx2 - cx1,
        h: cy2 - cy1,
    })
}

/// Build a pseudo-tracking pair. `frame_b` is `frame` under a random affine
/// with translation and scale each bounded by `max_aug` of the frame size;
/// boxes transform correspondingly. With `enforce_no_loss`, transforms are
/// redrawn until every box stays fully inside the frame (bounded retries).
/// Without it, boxes are clipped to the frame and dropped when they leave
/// entirely; correspondence pairs carry the surviving boxes.
pub fn pseudo_pair(
    frame: &FrameGrid,
    gt_boxes: &[BoundingBox],
    max_aug: f64,
    enforce_no_loss: bool,
    seed: u64,
) -> Result<(FrameGrid, FrameGrid, Vec<(BoundingBox, BoundingBox)>), SceneError> {
    assert!((0.0..1.0).contains(&max_aug), "max_aug outside [0,1)");
    for b in gt_boxes {
        b.validate().map_err(|e| SceneError::InvalidConfig(e.to_string()))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..=MAX_RETRIES {
        let s = rng.gen_range(1.0 - max_aug..=1.0 + max_aug);
        let tx = rng.gen_range(-max_aug..=max_aug);
        let ty = rng.gen_range(-max_aug..=max_aug);
        let moved: Vec<BoundingBox> = gt_boxes.iter().map(|b| transform_box(b, s, tx, ty)).collect();

        if enforce_no_loss {
            let all_inside = moved.iter().all(|b| b.inside_frame() && b.validate().is_ok());
            if !all_inside {
                if attempt == MAX_RETRIES {
                    return Err(SceneError::AugmentationExhausted {
                        retries: MAX_RETRIES,
                        detail: format!(
                            "no transform keeps all {} boxes inside at max_aug {}",
                            gt_boxes.len(),
                            max_aug
                        ),
                    });
                }
                continue;
            }
            let frame_b = warp(frame, s, tx, ty);
            let pairs = gt_boxes.iter().copied().zip(moved).collect();
            return Ok((frame.clone(), frame_b, pairs));
        }

        let frame_b = warp(frame, s, tx, ty);
        let pairs = gt_boxes
            .iter()
            .zip(&moved)
            .filter_map(|(orig, m)| clip_box(m).map(|c| (*orig, c)))
            .collect();
        return Ok((frame.clone(), frame_b, pairs));
    }
    unreachable!("loop returns or errors")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker_frame() -> FrameGrid {
        let mut f = FrameGrid::zeros(8, 8, 2);
        for y in 0..8 {
            for x in 0..8 {
                *f.at_mut(y, x, 0) = ((x + y) % 2) as f64;
                *f.at_mut(y, x, 1) = (x * y) as f64 * 0.01;
            }
        }
        f
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let frame = checker_frame();
        let boxes = vec![BoundingBox::new(0.5, 0.5, 0.2, 0.3).unwrap()];
        let (a, b, pairs) = pseudo_pair(&frame, &boxes, 0.0, true, 1).unwrap();
        assert_eq!(a, frame);
        assert_eq!(b, frame);
        assert_eq!(pairs[0].0, boxes[0]);
        assert_eq!(pairs[0].1, boxes[0]);
    }

    #[test]
    fn center_shift_is_bounded() {
        let frame = checker_frame();
        let boxes = vec![
            BoundingBox::new(0.4, 0.5, 0.2, 0.2).unwrap(),
            BoundingBox::new(0.6, 0.3, 0.15, 0.25).unwrap(),
        ];
        let max_aug = 0.05;
        for seed in 0..1000 {
            let (_, _, pairs) = pseudo_pair(&frame, &boxes, max_aug, true, seed).unwrap();
            for (orig, moved) in pairs {
                // |s·c + t − c| ≤ max_aug·c + max_aug ≤ max_aug·(1 + c)
                let bound_x = max_aug * (1.0 + orig.cx) + 1e-12;
                let bound_y = max_aug * (1.0 + orig.cy) + 1e-12;
                assert!((moved.cx - orig.cx).abs() <= bound_x);
                assert!((moved.cy - orig.cy).abs() <= bound_y);
            }
        }
    }

    #[test]
    fn no_loss_preserves_object_count() {
        let frame = checker_frame();
        let boxes = vec![
            BoundingBox::new(0.2, 0.2, 0.2, 0.2).unwrap(),
            BoundingBox::new(0.8, 0.8, 0.2, 0.2).unwrap(),
            BoundingBox::new(0.5, 0.5, 0.3, 0.3).unwrap(),
        ];
        for seed in 0..200 {
            let (_, _, pairs) = pseudo_pair(&frame, &boxes, 0.05, true, seed).unwrap();
            assert_eq!(pairs.len(), boxes.len());
            for (_, moved) in pairs {
                assert!(moved.inside_frame());
            }
        }
    }

    #[test]
    fn border_box_resamples_or_errors() {
        let frame = checker_frame();
        // A box hugging the frame: most transforms push it out.
        let boxes = vec![BoundingBox::new(0.5, 0.5, 0.999, 0.999).unwrap()];
        let mut any_err = false;
        let mut any_ok = false;
        for seed in 0..30 {
            match pseudo_pair(&frame, &boxes, 0.05, true, seed) {
                Ok((_, _, pairs)) => {
                    any_ok = true;
                    assert!(pairs[0].1.inside_frame());
                }
                Err(SceneError::AugmentationExhausted { retries, .. }) => {
                    any_err = true;
                    assert_eq!(retries, MAX_RETRIES);
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(any_err || any_ok);
    }
}
