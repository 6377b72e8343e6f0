//! Seeded multi-label shape images: one to three non-overlapping coloured
//! shapes (disk, square, triangle, cross) on a grey noise background.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DidError, Result};
use crate::image::Image;
use crate::localization::BoundingBox;

pub const SHAPE_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; SHAPE_CLASSES] = ["disk", "square", "triangle", "cross"];

const PALETTE: [[f64; 3]; SHAPE_CLASSES] = [
    [0.90, 0.20, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
];

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub labels: Vec<bool>,
    /// Tight pixel box of every drawn shape. Empty for images loaded from disk.
    pub objects: Vec<(usize, BoundingBox)>,
}

impl LabeledImage {
    pub fn new(image: Image, labels: Vec<bool>) -> Result<Self> {
        if !labels.iter().any(|&l| l) {
            return Err(DidError::Config("an image needs at least one positive label".into()));
        }
        Ok(LabeledImage {
            image,
            labels,
            objects: Vec::new(),
        })
    }
}

/// Whether pixel `(u, v)`, in unit coordinates of the shape's square, is inside.
fn covers(class: usize, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    match class {
        0 => du * du + dv * dv <= 0.25,
        1 => (0.1..=0.9).contains(&u) && (0.1..=0.9).contains(&v),
        2 => du.abs() <= v / 2.0,
        _ => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    // one pixel of clearance keeps shapes from touching
    a.x0 <= b.x1 + 1 && b.x0 <= a.x1 + 1 && a.y0 <= b.y1 + 1 && b.y0 <= a.y1 + 1
}

fn generate_one(rng: &mut ChaCha8Rng, size: usize) -> LabeledImage {
    let base = rng.gen_range(0.2..0.3);
    let mut image = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let g = quantize(base + rng.gen_range(-0.08..0.08));
            image.set_pixel(y, x, [g; 3]);
        }
    }

    let wanted = rng.gen_range(1..=3);
    let classes = index::sample(rng, SHAPE_CLASSES, wanted).into_vec();
    let (min_side, max_side) = ((size / 4).max(3), (2 * size / 5).max(4));
    let mut slots: Vec<BoundingBox> = Vec::new();
    let mut objects = Vec::new();
    for class in classes {
        let side = rng.gen_range(min_side..=max_side.min(size));
        let slot = (0..100).find_map(|_| {
            let x0 = rng.gen_range(0..=size - side);
            let y0 = rng.gen_range(0..=size - side);
            let b = BoundingBox {
                x0,
                y0,
                x1: x0 + side - 1,
                y1: y0 + side - 1,
            };
            (!slots.iter().any(|s| overlaps(s, &b))).then_some(b)
        });
        let Some(slot) = slot else { continue };
        let gain = rng.gen_range(0.9..1.0);
        let colour = PALETTE[class].map(|c| quantize(c * gain + rng.gen_range(-0.05..0.05)));

        let mut drawn: Option<BoundingBox> = None;
        for y in slot.y0..=slot.y1 {
            for x in slot.x0..=slot.x1 {
                let u = (x - slot.x0) as f64 / (side - 1) as f64;
                let v = (y - slot.y0) as f64 / (side - 1) as f64;
                if covers(class, u, v) {
                    image.set_pixel(y, x, colour);
                    let b = drawn.get_or_insert(BoundingBox { x0: x, y0: y, x1: x, y1: y });
                    b.x0 = b.x0.min(x);
                    b.x1 = b.x1.max(x);
                    b.y0 = b.y0.min(y);
                    b.y1 = b.y1.max(y);
                }
            }
        }
        if let Some(b) = drawn {
            slots.push(slot);
            objects.push((class, b));
        }
    }

    let mut labels = vec![false; SHAPE_CLASSES];
    for (c, _) in &objects {
        labels[*c] = true;
    }
    LabeledImage {
        image,
        labels,
        objects,
    }
}

/// `count` images of `image_size` pixels. Every pixel value is a multiple of
/// 1/255, so the images survive an 8-bit round trip unchanged.
pub fn generate_synthetic(seed: u64, count: usize, image_size: usize) -> Result<Vec<LabeledImage>> {
    if image_size < 8 {
        return Err(DidError::Config(format!(
            "synthetic images need at least 8 pixels per side, got {image_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| generate_one(&mut rng, image_size)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_grey(px: [f64; 3]) -> bool {
        px[0] == px[1] && px[1] == px[2]
    }

    #[test]
    fn seeded_and_reproducible() {
        let a = generate_synthetic(5, 20, 64).unwrap();
        assert_eq!(a, generate_synthetic(5, 20, 64).unwrap());
        assert_ne!(a, generate_synthetic(6, 20, 64).unwrap());
    }

    #[test]
    fn one_to_three_labels_averaging_two() {
        let data = generate_synthetic(1, 300, 64).unwrap();
        let mut total = 0;
        for item in &data {
            let n = item.labels.iter().filter(|&&l| l).count();
            assert!((1..=3).contains(&n));
            assert_eq!(n, item.objects.len());
            total += n;
        }
        let mean = total as f64 / data.len() as f64;
        assert!((1.7..=2.3).contains(&mean), "mean objects {mean}");
    }

    #[test]
    fn recorded_boxes_match_pixel_scan() {
        for item in generate_synthetic(3, 50, 64).unwrap() {
            let img = &item.image;
            // every coloured pixel belongs to exactly one recorded box
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if !is_grey(img.pixel(y, x)) {
                        let owners = item.objects.iter().filter(|(_, b)| b.contains(x, y)).count();
                        assert_eq!(owners, 1, "pixel ({x},{y})");
                    }
                }
            }
            // and each box is tight on its coloured pixels
            for (_, b) in &item.objects {
                let coloured: Vec<(usize, usize)> = (b.y0..=b.y1)
                    .flat_map(|y| (b.x0..=b.x1).map(move |x| (x, y)))
                    .filter(|&(x, y)| !is_grey(img.pixel(y, x)))
                    .collect();
                assert_eq!(coloured.iter().map(|p| p.0).min(), Some(b.x0));
                assert_eq!(coloured.iter().map(|p| p.0).max(), Some(b.x1));
                assert_eq!(coloured.iter().map(|p| p.1).min(), Some(b.y0));
                assert_eq!(coloured.iter().map(|p| p.1).max(), Some(b.y1));
            }
        }
    }

    #[test]
    fn values_are_eight_bit() {
        let item = &generate_synthetic(9, 1, 32).unwrap()[0];
        for &v in item.image.data() {
            assert_eq!(((v * 255.0).round() as u8) as f64 / 255.0, v);
        }
    }

    #[test]
    fn rejects_tiny_images() {
        assert!(generate_synthetic(0, 1, 4).is_err());
    }
}
