//! Boxes, anchor grids, IoU, and box displacement encoding.
//!
//! Map layouts used throughout the crate, for a grid of `G×G` cells and `A` anchors:
//! - score map `[A, G, G]`: flat anchor index `a·G² + y·G + x`;
//! - regression map `[4A, G, G]`: channel `4a + c` holds component `c` of (tx, ty, tw, th).

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

/// Axis-aligned box in center convention, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// From the interchange convention: top-left corner plus size.
    pub fn from_top_left(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    /// `(x, y, w, h)` with `(x, y)` the top-left corner.
    pub fn to_top_left(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0,
            "invalid box {:?}: width and height must be positive and finite",
            self
        );
        Ok(())
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        (self.cx - other.cx).hypot(self.cy - other.cy)
    }
}

/// Intersection over union; symmetric, 1 for identical boxes, 0 for disjoint ones.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // Areas from the same corner differences make identical boxes score exactly 1.
    let area = |b: &BBox| (b.x2() - b.x1()) * (b.y2() - b.y1());
    (inter / (area(a) + area(b) - inter)).clamp(0.0, 1.0)
}

/// Displacement of `gt` relative to `anchor`: (tx, ty, tw, th).
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode`].
pub fn decode(t: &[f64; 4], anchor: &BBox) -> Result<BBox> {
    BBox::new(
        anchor.cx + t[0] * anchor.w,
        anchor.cy + t[1] * anchor.h,
        anchor.w * t[2].exp(),
        anchor.h * t[3].exp(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Width/height ratios; each anchor has area `base_size²`.
    pub ratios: Vec<f64>,
    pub base_size: f64,
    /// Pixel spacing of grid cells in the search region.
    pub stride: f64,
    /// Cells per side.
    pub grid: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            ratios: vec![1.0 / 3.0, 0.5, 1.0, 2.0, 3.0],
            base_size: 64.0,
            stride: 16.0,
            grid: 16,
            pos_iou: 0.6,
            neg_iou: 0.3,
        }
    }
}

/// Anchor boxes for every (anchor, cell) pair, in score-map order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    config: AnchorConfig,
    boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn new(config: AnchorConfig) -> Result<Self> {
        ensure!(!config.ratios.is_empty(), "anchor set is empty");
        ensure!(config.grid > 0, "anchor grid has no cells");
        ensure!(config.base_size > 0.0 && config.stride > 0.0, "anchor size and stride must be positive");
        ensure!(config.ratios.iter().all(|r| *r > 0.0 && r.is_finite()), "anchor ratios must be positive");
        let g = config.grid;
        let mut boxes = Vec::with_capacity(config.ratios.len() * g * g);
        for &r in &config.ratios {
            let (w, h) = (config.base_size * r.sqrt(), config.base_size / r.sqrt());
            for y in 0..g {
                for x in 0..g {
                    boxes.push(BBox {
                        cx: (x as f64 + 0.5) * config.stride,
                        cy: (y as f64 + 0.5) * config.stride,
                        w,
                        h,
                    });
                }
            }
        }
        Ok(AnchorGrid { config, boxes })
    }

    pub fn config(&self) -> &AnchorConfig {
        &self.config
    }

    pub fn num_anchors(&self) -> usize {
        self.config.ratios.len()
    }

    pub fn grid(&self) -> usize {
        self.config.grid
    }

    pub fn cells(&self) -> usize {
        self.config.grid * self.config.grid
    }

    /// Total (anchor, cell) pairs.
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn anchor(&self, index: usize) -> &BBox {
        &self.boxes[index]
    }

    /// `(anchor, y, x)` of a flat score-map index.
    pub fn split_index(&self, index: usize) -> (usize, usize, usize) {
        let (cells, g) = (self.cells(), self.grid());
        (index / cells, (index % cells) / g, index % g)
    }

    /// Flat offset of component `c` for flat anchor index `index` in a `[4A, G, G]` map.
    pub fn reg_offset(&self, index: usize, c: usize) -> usize {
        let (a, y, x) = self.split_index(index);
        ((4 * a + c) * self.grid() + y) * self.grid() + x
    }

    pub fn score_shape(&self) -> [usize; 3] {
        [self.num_anchors(), self.grid(), self.grid()]
    }

    pub fn reg_shape(&self) -> [usize; 3] {
        [4 * self.num_anchors(), self.grid(), self.grid()]
    }

    /// Decode the displacement stored at flat anchor `index` of a regression map.
    pub fn decode_at(&self, reg: &Tensor, index: usize) -> Result<BBox> {
        let d = reg.data();
        let t = [0, 1, 2, 3].map(|c| d[self.reg_offset(index, c)]);
        decode(&t, self.anchor(index))
    }
}

/// Ground-truth center label of one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
    Ignore,
}

/// Per-anchor center labels and regression targets (targets only at positives).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMaps {
    pub labels: Vec<Label>,
    pub targets: Vec<Option<[f64; 4]>>,
    /// True when no anchor reached the positive threshold and the best one was forced.
    pub forced: bool,
}

impl LabelMaps {
    pub fn positives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == Label::Positive)
            .map(|(i, _)| i)
            .collect()
    }

    /// `[A, G, G]` map with 1 at positives and 0 elsewhere.
    pub fn score_map(&self, grid: &AnchorGrid) -> Tensor {
        let data = self
            .labels
            .iter()
            .map(|l| if *l == Label::Positive { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&grid.score_shape(), data).expect("label count matches grid")
    }

    /// `[4A, G, G]` map with exact displacements at positives and 0 elsewhere.
    pub fn reg_map(&self, grid: &AnchorGrid) -> Tensor {
        let mut data = vec![0.0; 4 * grid.len()];
        for (i, t) in self.targets.iter().enumerate() {
            if let Some(t) = t {
                for (c, v) in t.iter().enumerate() {
                    data[grid.reg_offset(i, c)] = *v;
                }
            }
        }
        Tensor::new(&grid.reg_shape(), data).expect("target count matches grid")
    }
}

pub const IOU_TIE_TOL: f64 = 1e-12;

/// IoU-threshold labels: positive at `≥ pos_thr`, negative at `≤ neg_thr`, ignore between.
/// When no anchor is positive, the highest-IoU anchor (lowest index on ties) is forced positive.
/// IoUs within [`IOU_TIE_TOL`] of each other count as tied.
pub fn assign_labels(gt: &BBox, grid: &AnchorGrid, pos_thr: f64, neg_thr: f64) -> Result<LabelMaps> {
    gt.validate()?;
    ensure!(!grid.is_empty(), "cannot assign labels on an empty anchor grid");
    ensure!(
        (0.0..=1.0).contains(&neg_thr) && (0.0..=1.0).contains(&pos_thr) && neg_thr < pos_thr,
        "IoU thresholds must satisfy 0 <= neg ({neg_thr}) < pos ({pos_thr}) <= 1"
    );
    let ious: Vec<f64> = grid.boxes().iter().map(|a| iou_unchecked(gt, a)).collect();
    let mut labels: Vec<Label> = ious
        .iter()
        .map(|&v| {
            if v >= pos_thr {
                Label::Positive
            } else if v <= neg_thr {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    let mut forced = false;
    if !labels.contains(&Label::Positive) {
        // Equal IoUs can differ in the last bits with anchor position; the
        // lowest index within rounding of the maximum wins.
        let max = ious.iter().copied().fold(0.0, f64::max);
        let best = ious.iter().position(|&v| v >= max - IOU_TIE_TOL).expect("grid is not empty");
        labels[best] = Label::Positive;
        forced = true;
    }
    let targets = labels
        .iter()
        .zip(grid.boxes())
        .map(|(l, a)| (*l == Label::Positive).then(|| encode(gt, a)))
        .collect();
    Ok(LabelMaps { labels, targets, forced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;
    use rand::Rng;

    fn small_grid() -> AnchorGrid {
        AnchorGrid::new(AnchorConfig { grid: 4, base_size: 16.0, stride: 8.0, ..AnchorConfig::default() }).unwrap()
    }

    /// Pixel-count IoU on a fine raster.
    fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
        let (lo_x, hi_x) = (a.x1().min(b.x1()), a.x2().max(b.x2()));
        let (lo_y, hi_y) = (a.y1().min(b.y1()), a.y2().max(b.y2()));
        let inside = |bx: &BBox, x: f64, y: f64| x >= bx.x1() && x < bx.x2() && y >= bx.y1() && y < bx.y2();
        let (mut inter, mut uni) = (0u64, 0u64);
        let nx = ((hi_x - lo_x) / res).ceil() as usize;
        let ny = ((hi_y - lo_y) / res).ceil() as usize;
        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = (lo_x + (i as f64 + 0.5) * res, lo_y + (j as f64 + 0.5) * res);
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as u64;
                uni += (ia || ib) as u64;
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = BBox::new(3.0, 4.0, 2.0, 5.0).unwrap();
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
        let far = BBox::new(30.0, 4.0, 2.0, 5.0).unwrap();
        assert_eq!(iou(&b, &far).unwrap(), 0.0);
    }

    #[test]
    fn half_overlap_unit_squares_is_one_third() {
        let a = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let b = BBox::new(1.0, 0.5, 1.0, 1.0).unwrap();
        let oracle = raster_iou(&a, &b, 1e-3);
        assert!((oracle - 1.0 / 3.0).abs() < 1e-3);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_raster_on_random_boxes() {
        let mut rng = stream(1, 0);
        for _ in 0..20 {
            let mut rb = || BBox::new(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)).unwrap();
            let (a, b) = (rb(), rb());
            assert!((iou(&a, &b).unwrap() - raster_iou(&a, &b, 0.01)).abs() < 0.02);
            assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        }
    }

    #[test]
    fn invalid_box_is_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn encode_examples() {
        let a = BBox::new(10.0, 20.0, 8.0, 4.0).unwrap();
        assert_eq!(encode(&a, &a), [0.0; 4]);
        let shifted = BBox::new(18.0, 20.0, 8.0, 4.0).unwrap();
        assert_eq!(encode(&shifted, &a)[0], 1.0);
        assert_eq!(decode(&[0.0; 4], &a).unwrap(), a);
        let wide = decode(&[0.0, 0.0, 2f64.ln(), 0.0], &a).unwrap();
        assert!((wide.w - 16.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = stream(2, 0);
        for _ in 0..1000 {
            let mut rb = || BBox::new(rng.random_range(-50.0..300.0), rng.random_range(-50.0..300.0), rng.random_range(1.0..200.0), rng.random_range(1.0..200.0)).unwrap();
            let (gt, an) = (rb(), rb());
            let back = decode(&encode(&gt, &an), &an).unwrap();
            for (x, y) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h)] {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn anchors_sit_on_stride_lattice() {
        let g = AnchorGrid::new(AnchorConfig::default()).unwrap();
        assert_eq!(g.len(), 5 * 16 * 16);
        for b in g.boxes() {
            assert_eq!((b.cx - 8.0) % 16.0, 0.0);
            assert_eq!((b.cy - 8.0) % 16.0, 0.0);
            assert!((b.area() - 64.0 * 64.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gt_equal_to_anchor_is_positive() {
        let g = small_grid();
        let idx = 2 * g.cells() + 5;
        let gt = *g.anchor(idx);
        let maps = assign_labels(&gt, &g, 0.6, 0.3).unwrap();
        assert_eq!(maps.labels[idx], Label::Positive);
        assert_eq!(maps.targets[idx], Some([0.0; 4]));
        assert!(!maps.forced);
    }

    #[test]
    fn far_away_gt_forces_single_positive() {
        let g = small_grid();
        let gt = BBox::new(1000.0, 1000.0, 10.0, 10.0).unwrap();
        let maps = assign_labels(&gt, &g, 0.6, 0.3).unwrap();
        assert_eq!(maps.positives().len(), 1);
        assert!(maps.forced);
        let negs = maps.labels.iter().filter(|l| **l == Label::Negative).count();
        assert_eq!(negs, g.len() - 1);
    }

    #[test]
    fn bad_thresholds_are_rejected() {
        let g = small_grid();
        let gt = BBox::new(10.0, 10.0, 10.0, 10.0).unwrap();
        assert!(assign_labels(&gt, &g, 0.3, 0.6).is_err());
    }

    #[test]
    fn maps_use_documented_layout() {
        let g = small_grid();
        let gt = *g.anchor(g.cells() + 6);
        let maps = assign_labels(&gt, &g, 0.6, 0.3).unwrap();
        let reg = maps.reg_map(&g);
        for p in maps.positives() {
            let back = g.decode_at(&reg, p).unwrap();
            assert!((back.cx - gt.cx).abs() < 1e-9 && (back.w - gt.w).abs() < 1e-9);
        }
        assert_eq!(maps.score_map(&g).sum(), maps.positives().len() as f64);
    }
}
