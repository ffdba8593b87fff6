use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Record, Split};
use super::ppm::encode_ppm_u8;
use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::rng::{tag, SeededRng};

const SHAPES: usize = 5;
const PALETTE: [[i32; 3]; 4] = [[220, 40, 40], [40, 200, 60], [50, 80, 230], [230, 200, 40]];

/// A deterministic shape/color/quadrant classification task.
///
/// Class `c` is shape `c mod 5` in quadrant `c mod 4`, painted in palette
/// color `(c + c div 4) mod 4`, so every class owns a distinct (color,
/// quadrant) pair and a distinct (shape, color) pair. Distractors are
/// desaturated shapes in the other quadrants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub seed: u64,
    #[serde(default = "default_clutter")]
    pub clutter: usize,
    /// Amplitude of per-pixel background noise, in 8-bit levels.
    #[serde(default = "default_noise")]
    pub noise: u8,
}

fn default_clutter() -> usize {
    3
}

fn default_noise() -> u8 {
    24
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        SyntheticSpec {
            classes,
            train_per_class: per_class,
            test_per_class: per_class,
            size,
            seed,
            clutter: default_clutter(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max = 4 * PALETTE.len();
        if self.classes < 2 || self.classes > max {
            return Err(Error::config("dataset.synthetic.classes", format!("must lie in 2..={max}")));
        }
        if self.size < 16 {
            return Err(Error::config("dataset.synthetic.size", "must be at least 16"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("dataset.synthetic", "images per class must be positive"));
        }
        Ok(())
    }

    pub fn quadrant(class: usize) -> usize {
        class % 4
    }

    fn shape(class: usize) -> usize {
        class % SHAPES
    }

    fn color(class: usize) -> usize {
        (class + class / 4) % PALETTE.len()
    }
}

/// One rendered image: interleaved 8-bit RGB plus the target's box.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rendered {
    pub label: usize,
    pub split: Split,
    pub index: usize,
    pub rgb: Vec<u8>,
    pub bbox: BBox,
}

impl Rendered {
    pub fn file_name(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        format!("{split}/c{:02}_{:04}.ppm", self.label, self.index)
    }
}

fn inside(shape: usize, dx: i32, dy: i32, r: i32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        0 => ax <= r && ay <= r,
        1 => dx * dx + dy * dy <= r * r,
        2 => dy >= -r && dy <= r && 2 * ax <= dy + r,
        3 => (ax <= r / 2 && ay <= r) || (ay <= r / 2 && ax <= r),
        _ => ax + ay <= r,
    }
}

struct Canvas {
    size: i32,
    rgb: Vec<u8>,
}

impl Canvas {
    /// Paint a shape; returns the tight half-open box of painted pixels.
    fn paint(&mut self, shape: usize, cx: i32, cy: i32, r: i32, color: [i32; 3]) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
        for y in (cy - r).max(0)..=(cy + r).min(self.size - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(self.size - 1) {
                if inside(shape, x - cx, y - cy, r) {
                    let p = 3 * (y * self.size + x) as usize;
                    for c in 0..3 {
                        self.rgb[p + c] = color[c].clamp(0, 255) as u8;
                    }
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 < x1).then_some(BBox {
            x0: x0 as u32,
            y0: y0 as u32,
            x1: x1 as u32,
            y1: y1 as u32,
        })
    }
}

fn jitter(rng: &mut SeededRng, amp: i32) -> i32 {
    rng.below((2 * amp + 1) as usize) as i32 - amp
}

fn color_of(idx: usize, rng: &mut SeededRng) -> [i32; 3] {
    PALETTE[idx].map(|v| v + jitter(rng, 25))
}

/// Center of a shape of radius `r` somewhere inside quadrant `q`.
fn place(q: usize, size: i32, r: i32, rng: &mut SeededRng) -> (i32, i32) {
    let half = size / 2;
    let span = (half - 2 * r - 2).max(0);
    let ox = if q.is_multiple_of(2) { 0 } else { half };
    let oy = if q / 2 == 0 { 0 } else { half };
    let cx = ox + r + 1 + rng.below(span as usize + 1) as i32;
    let cy = oy + r + 1 + rng.below(span as usize + 1) as i32;
    (cx, cy)
}

/// Render one image. Pure function of `(spec, split, class, index)`.
pub fn render(spec: &SyntheticSpec, split: Split, label: usize, index: usize) -> Rendered {
    let split_word = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut rng = SeededRng::new(spec.seed, &[tag::SYNTH, split_word, label as u64, index as u64]);
    let size = spec.size as i32;
    let level = 60 + rng.below(70) as i32;
    let base: [i32; 3] = [0; 3].map(|_| level + jitter(&mut rng, 10));
    let amp = spec.noise as i32;
    let mut rgb = Vec::with_capacity(3 * spec.size * spec.size);
    for _ in 0..spec.size * spec.size {
        let shade = jitter(&mut rng, amp);
        for &b in &base {
            rgb.push((b + shade + jitter(&mut rng, amp / 4)).clamp(0, 255) as u8);
        }
    }
    let mut canvas = Canvas { size, rgb };
    let scale = size / 16;
    let target_q = SyntheticSpec::quadrant(label);
    for _ in 0..spec.clutter {
        let q = loop {
            let q = rng.below(4);
            if q != target_q {
                break q;
            }
        };
        let shape = rng.below(SHAPES);
        let level = 30 + rng.below(200) as i32;
        let col = [0; 3].map(|_| level + jitter(&mut rng, 15));
        let r = scale + rng.below(2) as i32;
        let (cx, cy) = place(q, size, r, &mut rng);
        canvas.paint(shape, cx, cy, r, col);
    }
    let r = (scale * 2 + 1 + rng.below(scale as usize + 1) as i32).min(size / 4 - 1);
    let (cx, cy) = place(target_q, size, r, &mut rng);
    let col = color_of(SyntheticSpec::color(label), &mut rng);
    let bbox = canvas
        .paint(SyntheticSpec::shape(label), cx, cy, r, col)
        .expect("target lies inside the canvas");
    Rendered {
        label,
        split,
        index,
        rgb: canvas.rgb,
        bbox,
    }
}

/// All images of a spec, train first, each split ordered by (class, index).
pub fn render_all(spec: &SyntheticSpec) -> Result<Vec<Rendered>> {
    spec.validate()?;
    let mut jobs = Vec::new();
    for (split, per) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for label in 0..spec.classes {
            for index in 0..per {
                jobs.push((split, label, index));
            }
        }
    }
    Ok(jobs
        .into_par_iter()
        .map(|(s, l, i)| render(spec, s, l, i))
        .collect())
}

/// Write PPM files plus `manifest.csv` under `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<Manifest> {
    let images = render_all(spec)?;
    for sub in ["train", "test"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    images.par_iter().try_for_each(|img| {
        let p = root.join(img.file_name());
        std::fs::write(&p, encode_ppm_u8(spec.size, spec.size, &img.rgb)).map_err(|e| Error::io(&p, e))
    })?;
    let records = images
        .iter()
        .map(|img| Record {
            path: img.file_name(),
            label: img.label,
            split: img.split,
            bbox: Some(img.bbox),
        })
        .collect();
    let m = Manifest::from_records(root, records)?;
    m.write_csv(&root.join("manifest.csv"))?;
    Ok(m)
}
