use serde::{Deserialize, Serialize};

use super::cam::CamMap;
use crate::error::{Error, Result};

/// Fraction of the CAM maximum above which pixels count as foreground.
pub const DEFAULT_CAM_THRESHOLD: f64 = 0.2;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::invalid(format!("degenerate box ({x0},{y0},{x1},{y1})")));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> u64 {
        (self.x1 - self.x0) as u64 * (self.y1 - self.y0) as u64
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0)) as u64;
    let h = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0)) as u64;
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Fraction of pairs with IoU ≥ 0.5.
pub fn gt_known_loc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "need aligned non-empty box lists, got {} predicted and {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| iou(p, g) >= 0.5).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Tight box around the largest 4-connected region with value ≥ `threshold·max`.
/// Equal-sized regions resolve to the one met first in raster order.
pub fn cam_to_box(map: &CamMap, threshold: f64) -> Result<BBox> {
    let (h, w) = (map.height, map.width);
    let max = map.data.iter().cloned().fold(0f32, f32::max);
    if max <= 0.0 {
        return Err(Error::NoActivation);
    }
    let cut = threshold as f32 * max;
    let on: Vec<bool> = map.data.iter().map(|&v| v >= cut && v > 0.0).collect();
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut size, mut x0, mut y0, mut x1, mut y1) = (0, w, h, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            size += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            let mut visit = |q: usize| {
                if on[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            let b = BBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32)?;
            best = Some((size, b));
        }
    }
    Ok(best.expect("max > 0 implies a component").1)
}
