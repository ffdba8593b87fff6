use serde::{Deserialize, Serialize};

use super::localize::{cam_to_box, gt_known_loc, BBox};
use crate::augment::{normalize, resize_bilinear, CropRect, IMAGENET_MEAN, IMAGENET_STD};
use crate::autograd::{Graph, Var};
use crate::backbone::{BnMode, HeadKind, Network};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A non-negative heat map at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub image: usize,
    pub class: usize,
}

/// Anything that exposes a target feature map and class logits.
pub trait CamModel<T: Scalar> {
    /// Returns `(feature map [1, D, h, w], logits [1, C])` for a `[1, C, H, W]` input.
    fn cam_forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)>;
}

impl<T: Scalar> CamModel<T> for Network<T> {
    fn cam_forward(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let bound = self.bind(g)?;
        let f = self.forward(g, &bound, x, BnMode::Running)?;
        let logits = self.head_forward(g, &bound, HeadKind::Classifier, f.features)?;
        Ok((f.feature_map, logits))
    }
}

/// Grad-CAM for `class` on a single `[C, H, W]` image.
///
/// Channel weights are the spatial mean of ∂logit/∂A; the map is
/// `ReLU(Σ_c w_c·A_c)`, bilinearly upsampled and scaled to max 1 (an all-zero
/// map stays zero).
pub fn grad_cam<T: Scalar, M: CamModel<T>>(model: &M, image: &Tensor<T>, class: usize, image_id: usize) -> Result<CamMap> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("grad_cam", format!("image must be [C, H, W], got {s:?}")));
    }
    let (hh, ww) = (s[1], s[2]);
    let mut g = Graph::new();
    // The input tracks gradients so a model whose feature map is the input still gets one.
    let x = g.leaf(image.clone().reshape(vec![1, s[0], hh, ww])?, true)?;
    let (fmap, logits) = model.cam_forward(&mut g, x)?;
    let classes = g.shape(logits)[1];
    if class >= classes {
        return Err(Error::invalid(format!("class {class} out of range 0..{classes}")));
    }
    let fs = g.shape(fmap).to_vec();
    if fs.len() != 4 || fs[0] != 1 {
        return Err(Error::shape("grad_cam", format!("feature map {fs:?}")));
    }
    let (d, h, w) = (fs[1], fs[2], fs[3]);
    let mut onehot = vec![T::zero(); classes];
    onehot[class] = T::one();
    let pick = g.constant(Tensor::new(vec![1, classes], onehot)?)?;
    let masked = g.mul(logits, pick)?;
    let score = g.sum(masked)?;
    let grads = g.backward(score)?;
    let a = g.value(fmap).data();
    let zeros;
    let da = match grads.get(fmap) {
        Some(t) => t.data(),
        None => {
            zeros = vec![T::zero(); a.len()];
            &zeros
        }
    };
    let hw = h * w;
    let mut cam = vec![0f64; hw];
    for c in 0..d {
        let gs = &da[c * hw..(c + 1) * hw];
        let weight = gs.iter().map(|v| v.f64()).sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, av) in cam.iter_mut().zip(&a[c * hw..(c + 1) * hw]) {
            *m += weight * av.f64();
        }
    }
    let low: Vec<f32> = cam.iter().map(|&v| v.max(0.0) as f32).collect();
    let low = Tensor::new(vec![1, h, w], low)?;
    let full = CropRect {
        top: 0,
        left: 0,
        height: h,
        width: w,
    };
    let mut data = resize_bilinear(&low, full, hh, ww).into_data();
    let max = data.iter().cloned().fold(0f32, f32::max);
    if max > 0.0 {
        for v in &mut data {
            *v = (*v / max).max(0.0);
        }
    }
    Ok(CamMap {
        height: hh,
        width: ww,
        data,
        image: image_id,
        class,
    })
}

/// Share of total CAM mass inside a quadrant (0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right). Zero for an all-zero map.
pub fn quadrant_mass(map: &CamMap, quadrant: usize) -> f64 {
    let (h, w) = (map.height, map.width);
    let (ys, xs) = if quadrant / 2 == 0 { (0, h / 2) } else { (h / 2, h) };
    let (xa, xb) = if quadrant.is_multiple_of(2) { (0, w / 2) } else { (w / 2, w) };
    let total: f64 = map.data.iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for y in ys..xs {
        for x in xa..xb {
            inside += map.data[y * w + x] as f64;
        }
    }
    inside / total
}

/// GT-known localization over a labelled image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub images: usize,
    /// Fraction of images whose CAM box has IoU ≥ 0.5 with the true box.
    pub gt_known: f64,
    /// Mean CAM mass in the quadrant holding the centre of the true box.
    pub quadrant_mass: f64,
}

/// Grad-CAM for the true class of every image that has a box. Images are
/// resized to `resolution` and normalized; boxes are mapped onto that grid.
pub fn localize_set(
    net: &Network,
    images: &[Tensor],
    labels: &[usize],
    boxes: &[Option<BBox>],
    resolution: usize,
    threshold: f64,
) -> Result<Localization> {
    let (mut pred, mut gt, mut mass) = (Vec::new(), Vec::new(), 0.0);
    for (i, ((img, &label), b)) in images.iter().zip(labels).zip(boxes).enumerate() {
        let Some(b) = b else { continue };
        let s = img.shape();
        let (h, w) = (s[1], s[2]);
        let full = CropRect {
            top: 0,
            left: 0,
            height: h,
            width: w,
        };
        let x = normalize(&resize_bilinear(img, full, resolution, resolution), &IMAGENET_MEAN, &IMAGENET_STD);
        let map = grad_cam(net, &x, label, i)?;
        let r = resolution as u64;
        let sx = |v: u32, up: bool| -> u32 {
            let n = v as u64 * r;
            let d = w as u64;
            (if up { n.div_ceil(d) } else { n / d }) as u32
        };
        let sy = |v: u32, up: bool| -> u32 {
            let n = v as u64 * r;
            let d = h as u64;
            (if up { n.div_ceil(d) } else { n / d }) as u32
        };
        let gb = BBox::new(sx(b.x0, false), sy(b.y0, false), sx(b.x1, true), sy(b.y1, true))?;
        let cx = (gb.x0 + gb.x1) as usize;
        let cy = (gb.y0 + gb.y1) as usize;
        let q = usize::from(cy >= resolution) * 2 + usize::from(cx >= resolution);
        mass += quadrant_mass(&map, q);
        // An all-zero map predicts nothing; score it with an empty-overlap box.
        let pb = cam_to_box(&map, threshold).unwrap_or(BBox {
            x0: 0,
            y0: 0,
            x1: 1,
            y1: 1,
        });
        pred.push(pb);
        gt.push(gb);
    }
    if gt.is_empty() {
        return Err(Error::invalid("no image carries a bounding box"));
    }
    Ok(Localization {
        images: gt.len(),
        gt_known: gt_known_loc(&pred, &gt)?,
        quadrant_mass: mass / gt.len() as f64,
    })
}
