//! Box proposals from instance-aware maps: upsample to image size, keep pixels
//! at or above `lambda * max`, and box the largest 4-connected foreground
//! component.

use crate::error::{DidError, Result};
use crate::reconstraint::InstanceMaps;
use crate::tensor::{bilinear_upsample, Tensor};

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn full(width: usize, height: usize) -> Self {
        BoundingBox {
            x0: 0,
            y0: 0,
            x1: width - 1,
            y1: height - 1,
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.x0 <= self.x1 && self.y0 <= self.y1 && self.x1 < width && self.y1 < height {
            Ok(())
        } else {
            Err(DidError::InvalidBox {
                bbox: self.as_array(),
                width,
                height,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceProposal {
    pub class_id: usize,
    pub bbox: BoundingBox,
    /// Sigmoid of the class's global score.
    pub confidence: f64,
}

/// Row-major boolean raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Mask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

pub fn upsample_map(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    bilinear_upsample(map, height, width)
}

/// Foreground is every pixel `>= lambda * max`. A map whose maximum is not
/// positive yields the full-image mask.
pub fn threshold_mask(map: &Tensor, lambda: f64) -> Result<Mask> {
    let (h, w) = map.dims2()?;
    let max = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bits = if max <= 0.0 {
        vec![true; h * w]
    } else {
        let threshold = lambda * max;
        map.data().iter().map(|&v| v >= threshold).collect()
    };
    Ok(Mask::new(h, w, bits))
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Tight box of the largest 4-connected component. Equal areas go to the
/// component whose first pixel comes earliest in raster order.
pub fn largest_component_bbox(mask: &Mask) -> Result<BoundingBox> {
    let (h, w) = (mask.height, mask.width);
    const NONE: usize = usize::MAX;
    // two-pass union-find labelling keyed by raster index
    let mut parent: Vec<usize> = vec![NONE; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.bits[i] {
                continue;
            }
            parent[i] = i;
            let up = (y > 0 && mask.bits[i - w]).then(|| i - w);
            let left = (x > 0 && mask.bits[i - 1]).then(|| i - 1);
            for n in [up, left].into_iter().flatten() {
                let (a, b) = (find(&mut parent, n), find(&mut parent, i));
                if a != b {
                    // the smaller raster index stays root, so a root is its
                    // component's first pixel
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }

    struct Stats {
        area: usize,
        bbox: BoundingBox,
    }
    let mut stats: Vec<Option<Stats>> = (0..h * w).map(|_| None).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask.bits[i] {
                continue;
            }
            let root = find(&mut parent, i);
            let entry = stats[root].get_or_insert(Stats {
                area: 0,
                bbox: BoundingBox { x0: x, y0: y, x1: x, y1: y },
            });
            entry.area += 1;
            let b = &mut entry.bbox;
            b.x0 = b.x0.min(x);
            b.x1 = b.x1.max(x);
            b.y0 = b.y0.min(y);
            b.y1 = b.y1.max(y);
        }
    }

    // roots iterate in raster order, strict > keeps the earliest on ties
    let mut best: Option<&Stats> = None;
    for s in stats.iter().flatten() {
        if best.is_none_or(|b| s.area > b.area) {
            best = Some(s);
        }
    }
    best.map(|s| s.bbox).ok_or(DidError::EmptyMask)
}

/// One proposal per selected class, in the order given.
pub fn localize(
    maps: &InstanceMaps,
    classes: &[usize],
    confidences: &[f64],
    lambda: f64,
    height: usize,
    width: usize,
) -> Result<Vec<InstanceProposal>> {
    if classes.is_empty() {
        return Ok(Vec::new());
    }
    let (n_sel, mh, mw) = maps.maps.dims3()?;
    if n_sel != classes.len() || confidences.len() != classes.len() {
        return Err(DidError::shape(
            "localize",
            maps.maps.shape(),
            &[classes.len(), confidences.len()],
        ));
    }
    classes
        .iter()
        .zip(confidences)
        .enumerate()
        .map(|(slot, (&class_id, &confidence))| {
            let map = Tensor::from_parts(vec![mh, mw], maps.maps.row(slot).to_vec());
            let upsampled = upsample_map(&map, height, width)?;
            let mask = threshold_mask(&upsampled, lambda)?;
            Ok(InstanceProposal {
                class_id,
                bbox: largest_component_bbox(&mask)?,
                confidence,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconstraint::Strategy as Fusion;
    use proptest::prelude::*;

    /// Stack-based flood fill over every unvisited foreground seed in raster
    /// order; keeps the first component of maximal size.
    pub(crate) fn flood_fill_oracle(mask: &Mask) -> Option<BoundingBox> {
        let (h, w) = (mask.height(), mask.width());
        let mut seen = vec![false; h * w];
        let mut best: Option<(usize, BoundingBox)> = None;
        for sy in 0..h {
            for sx in 0..w {
                if !mask.get(sy, sx) || seen[sy * w + sx] {
                    continue;
                }
                let mut stack = vec![(sy, sx)];
                seen[sy * w + sx] = true;
                let mut pixels = Vec::new();
                while let Some((y, x)) = stack.pop() {
                    pixels.push((y, x));
                    let mut push = |ny: usize, nx: usize| {
                        if mask.get(ny, nx) && !seen[ny * w + nx] {
                            seen[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    };
                    if y > 0 {
                        push(y - 1, x);
                    }
                    if y + 1 < h {
                        push(y + 1, x);
                    }
                    if x > 0 {
                        push(y, x - 1);
                    }
                    if x + 1 < w {
                        push(y, x + 1);
                    }
                }
                let bbox = BoundingBox {
                    x0: pixels.iter().map(|p| p.1).min().unwrap(),
                    y0: pixels.iter().map(|p| p.0).min().unwrap(),
                    x1: pixels.iter().map(|p| p.1).max().unwrap(),
                    y1: pixels.iter().map(|p| p.0).max().unwrap(),
                };
                if best.is_none_or(|(n, _)| pixels.len() > n) {
                    best = Some((pixels.len(), bbox));
                }
            }
        }
        best.map(|(_, b)| b)
    }

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        Mask::new(h, w, bits)
    }

    #[test]
    fn threshold_examples() {
        let m = Tensor::from_rows(&[vec![10.0, 5.0], vec![7.0, 6.0]]).unwrap();
        let mask = threshold_mask(&m, 0.6).unwrap();
        assert_eq!(mask.bits(), &[true, false, true, true]);

        let c = Tensor::filled(&[3, 3], 2.0);
        assert_eq!(threshold_mask(&c, 0.6).unwrap().count(), 9);

        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 2.999]]).unwrap();
        assert_eq!(threshold_mask(&m, 0.9999999).unwrap().bits(), &[false, false, true, false]);
    }

    #[test]
    fn non_positive_maps_fall_back_to_full_mask() {
        let m = Tensor::from_rows(&[vec![-1.0, -5.0], vec![0.0, -2.0]]).unwrap();
        assert_eq!(threshold_mask(&m, 0.6).unwrap().count(), 4);
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(threshold_mask(&z, 0.5).unwrap().count(), 6);
    }

    #[test]
    fn component_examples() {
        let all = Mask::new(4, 6, vec![true; 24]);
        assert_eq!(largest_component_bbox(&all).unwrap(), BoundingBox::full(6, 4));

        let mut bits = vec![false; 25];
        bits[2 * 5 + 3] = true;
        let single = Mask::new(5, 5, bits);
        assert_eq!(
            largest_component_bbox(&single).unwrap(),
            BoundingBox { x0: 3, y0: 2, x1: 3, y1: 2 }
        );

        let two = mask_from(&[
            "##...",
            "#....",
            ".....",
            "..###",
            "...##",
        ]);
        let expected = flood_fill_oracle(&two).unwrap();
        assert_eq!(expected, BoundingBox { x0: 2, y0: 3, x1: 4, y1: 4 });
        assert_eq!(largest_component_bbox(&two).unwrap(), expected);

        assert!(matches!(
            largest_component_bbox(&Mask::new(2, 2, vec![false; 4])),
            Err(DidError::EmptyMask)
        ));
    }

    #[test]
    fn ties_go_to_first_component_in_scan_order() {
        // the right component's first pixel comes first in raster order, the
        // left one has the smaller x0
        let m = mask_from(&[
            "...#",
            "#..#",
            "#...",
        ]);
        assert_eq!(
            largest_component_bbox(&m).unwrap(),
            BoundingBox { x0: 3, y0: 0, x1: 3, y1: 1 }
        );
        assert_eq!(flood_fill_oracle(&m), largest_component_bbox(&m).ok());
    }

    #[test]
    fn u_shape_merges_late() {
        let m = mask_from(&[
            "#.#.#",
            "#.#.#",
            "###.#",
        ]);
        assert_eq!(
            largest_component_bbox(&m).unwrap(),
            BoundingBox { x0: 0, y0: 0, x1: 2, y1: 2 }
        );
    }

    #[test]
    fn localize_examples() {
        let empty = InstanceMaps {
            maps: Tensor::zeros(&[1, 2, 2]),
            strategy: Fusion::Identity,
        };
        assert!(localize(&empty, &[], &[], 0.6, 8, 8).unwrap().is_empty());

        let constant = InstanceMaps {
            maps: Tensor::filled(&[2, 4, 4], 3.0),
            strategy: Fusion::Identity,
        };
        let props = localize(&constant, &[3, 1], &[0.9, 0.2], 0.6, 32, 32).unwrap();
        assert_eq!(props.len(), 2);
        assert_eq!(props[0].class_id, 3);
        assert_eq!(props[1].class_id, 1);
        assert!(props.iter().all(|p| p.bbox == BoundingBox::full(32, 32)));
        assert_eq!(props[0].confidence, 0.9);
    }

    #[test]
    fn bright_block_is_boxed() {
        // 8x8 map with one bright 2x2 cell block at cells (2..4, 5..7);
        // on a 64x64 image each cell spans roughly 9 pixels
        let mut data = vec![0.05; 64];
        for y in 2..4 {
            for x in 5..7 {
                data[y * 8 + x] = 1.0;
            }
        }
        let maps = InstanceMaps {
            maps: Tensor::new(vec![1, 8, 8], data.clone()).unwrap(),
            strategy: Fusion::Identity,
        };
        let props = localize(&maps, &[0], &[0.5], 0.6, 64, 64).unwrap();
        let up = upsample_map(&Tensor::matrix(8, 8, data).unwrap(), 64, 64).unwrap();
        let oracle = flood_fill_oracle(&threshold_mask(&up, 0.6).unwrap()).unwrap();
        assert_eq!(props[0].bbox, oracle);
        // block cell centres sit at 9*2..=9*3 rows and 9*5..=9*6 columns
        let b = props[0].bbox;
        assert!(b.y0 >= 14 && b.y1 <= 31, "{b:?}");
        assert!(b.x0 >= 41 && b.x1 <= 58, "{b:?}");
        assert!(b.contains(45, 22));
    }

    fn random_mask() -> impl Strategy<Value = Mask> {
        (1usize..=32, 1usize..=32, 0.2..0.8f64).prop_flat_map(|(h, w, p)| {
            prop::collection::vec(prop::bool::weighted(p), h * w)
                .prop_map(move |bits| Mask::new(h, w, bits))
        })
    }

    fn random_map() -> impl Strategy<Value = Tensor> {
        (1usize..=12, 1usize..=12).prop_flat_map(|(h, w)| {
            prop::collection::vec(-1.0..5.0f64, h * w)
                .prop_map(move |d| Tensor::matrix(h, w, d).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_flood_fill(mask in random_mask()) {
            prop_assert_eq!(largest_component_bbox(&mask).ok(), flood_fill_oracle(&mask));
        }

        #[test]
        fn threshold_is_monotone_in_lambda(map in random_map(), a in 0.01..0.99f64, b in 0.01..0.99f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let loose = threshold_mask(&map, lo).unwrap();
            let tight = threshold_mask(&map, hi).unwrap();
            for (t, l) in tight.bits().iter().zip(loose.bits()) {
                prop_assert!(!t || *l);
            }
        }

        #[test]
        fn bbox_holds_foreground(map in random_map(), lambda in 0.05..0.95f64) {
            let mask = threshold_mask(&map, lambda).unwrap();
            let b = largest_component_bbox(&mask).unwrap();
            let inside = (b.y0..=b.y1).flat_map(|y| (b.x0..=b.x1).map(move |x| (y, x)))
                .filter(|&(y, x)| mask.get(y, x)).count();
            prop_assert!(inside >= 1);
        }

        #[test]
        fn positive_scaling_keeps_mask(map in random_map(), lambda in 0.05..0.95f64, exp in -4i32..4) {
            let scale = 2f64.powi(exp);
            let a = threshold_mask(&map, lambda).unwrap();
            let b = threshold_mask(&map.map(|v| v * scale), lambda).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(largest_component_bbox(&a).unwrap(), largest_component_bbox(&b).unwrap());
        }
    }
}
