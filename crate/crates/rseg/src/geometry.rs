//! Detection geometry: boxes, IoU, delta coding, anchors, NMS and target
//! assignment. Everything here is a pure function over plain values; no
//! gradients flow through this module.
//!
//! Pixel convention: boxes are half-open `[x1, x2) x [y1, y2)` rectangles in
//! continuous image coordinates, origin top-left, x along columns.

use thiserror::Error;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("image size {0}x{1} must be divisible by 64")]
    IndivisibleImage(usize, usize),
    #[error("anchor has non-positive size: {0:?}")]
    DegenerateAnchor(BBox),
    #[error("boxes and scores differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("scores must be finite")]
    NonFiniteScore,
    #[error("target assignment needs at least one ground-truth box")]
    NoGroundTruth,
}

/// Axis-aligned rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x1: cx - 0.5 * w, y1: cy - 0.5 * h, x2: cx + 0.5 * w, y2: cy + 0.5 * h }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2
            && self.y1 <= self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    /// Clip to image bounds `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

/// Intersection-over-union of two boxes; degenerate boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Center-offset / log-size parameterization of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDeltas {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

/// Exponent clamp for decode: exp(tw) can never exceed 1000/16, keeping
/// decoded sizes finite on wild network outputs.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

impl BoxDeltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDeltas { tx: a[0], ty: a[1], tw: a[2], th: a[3] }
    }
}

/// Deltas that move `anchor` onto `gt`.
pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDeltas, GeometryError> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(GeometryError::DegenerateAnchor(*anchor));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDeltas {
        tx: (gcx - acx) / aw,
        ty: (gcy - acy) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

/// Apply deltas to an anchor. `tw`/`th` are clamped to [`DELTA_CLAMP`] before
/// exponentiation. The result is not clipped; see [`BBox::clip`].
pub fn decode(anchor: &BBox, d: &BoxDeltas) -> Result<BBox, GeometryError> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if aw <= 0.0 || ah <= 0.0 {
        return Err(GeometryError::DegenerateAnchor(*anchor));
    }
    let (acx, acy) = anchor.center();
    let cx = acx + d.tx * aw;
    let cy = acy + d.ty * ah;
    let w = aw * d.tw.min(DELTA_CLAMP).exp();
    let h = ah * d.th.min(DELTA_CLAMP).exp();
    Ok(BBox::from_center(cx, cy, w, h))
}

/// Pyramid strides, one per level P2..P6.
pub const LEVEL_STRIDES: [usize; 5] = [4, 8, 16, 32, 64];
/// Anchor scale (square-root area) per level, matched to the stride list.
pub const LEVEL_SCALES: [f64; 5] = [8.0, 16.0, 32.0, 64.0, 128.0];
/// Width:height aspect ratios, in enumeration order 1:1, 1:2, 2:1.
pub const ANCHOR_RATIOS: [f64; 3] = [1.0, 0.5, 2.0];

/// Per-level anchor grid plus the flat, deterministically ordered box list.
///
/// Enumeration order is the layout contract with the RPN head: level-major,
/// then grid location row-major, then ratio. The anchor for grid cell
/// `(i, j)` at stride `s` is centered on `((j + 0.5) s, (i + 0.5) s)` and has
/// area `scale^2` at every ratio.
pub struct AnchorSet {
    pub image_w: usize,
    pub image_h: usize,
    boxes: Vec<BBox>,
    level_dims: Vec<(usize, usize)>, // (grid_h, grid_w) per level
    level_offsets: Vec<usize>,       // start index of each level's block
}

impl AnchorSet {
    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.level_dims.len()
    }

    /// (grid_h, grid_w) of a pyramid level.
    pub fn level_dims(&self, level: usize) -> (usize, usize) {
        self.level_dims[level]
    }

    /// Global index of anchor `(level, i, j, ratio)`.
    pub fn index_of(&self, level: usize, i: usize, j: usize, ratio: usize) -> usize {
        let (_, w) = self.level_dims[level];
        self.level_offsets[level] + (i * w + j) * ANCHOR_RATIOS.len() + ratio
    }

    /// Inverse of [`AnchorSet::index_of`].
    pub fn locate(&self, index: usize) -> (usize, usize, usize, usize) {
        let level = self
            .level_offsets
            .iter()
            .rposition(|&off| off <= index)
            .expect("index in range");
        let rel = index - self.level_offsets[level];
        let (_, w) = self.level_dims[level];
        let ratio = rel % ANCHOR_RATIOS.len();
        let cell = rel / ANCHOR_RATIOS.len();
        (level, cell / w, cell % w, ratio)
    }
}

/// Enumerate anchors for an image whose sides are divisible by 64.
pub fn generate_anchors(image_w: usize, image_h: usize) -> Result<AnchorSet, GeometryError> {
    if image_w == 0 || image_h == 0 || image_w % 64 != 0 || image_h % 64 != 0 {
        return Err(GeometryError::IndivisibleImage(image_w, image_h));
    }
    let mut boxes = Vec::new();
    let mut level_dims = Vec::new();
    let mut level_offsets = Vec::new();
    for (&stride, &scale) in LEVEL_STRIDES.iter().zip(&LEVEL_SCALES) {
        level_offsets.push(boxes.len());
        let gh = image_h / stride;
        let gw = image_w / stride;
        level_dims.push((gh, gw));
        for i in 0..gh {
            for j in 0..gw {
                let cx = (j as f64 + 0.5) * stride as f64;
                let cy = (i as f64 + 0.5) * stride as f64;
                for &ratio in &ANCHOR_RATIOS {
                    // area-preserving: w = scale * sqrt(r), h = scale / sqrt(r)
                    let rs = ratio.sqrt();
                    boxes.push(BBox::from_center(cx, cy, scale * rs, scale / rs));
                }
            }
        }
    }
    Ok(AnchorSet { image_w, image_h, boxes, level_dims, level_offsets })
}

/// Greedy non-maximum suppression. Candidates are visited in descending
/// score order (ties broken by lower index); a box is kept when its IoU with
/// every already-kept box is at most `iou_threshold`. Returns kept indices
/// in descending score order.
pub fn nms(
    boxes: &[BBox],
    scores: &[f64],
    iou_threshold: f64,
) -> Result<Vec<usize>, GeometryError> {
    if boxes.len() != scores.len() {
        return Err(GeometryError::LengthMismatch(boxes.len(), scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GeometryError::NonFiniteScore);
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        if keep.iter().all(|&k| iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Label given to an anchor by RPN target assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor assignment result.
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Ground-truth index for positive anchors, `None` otherwise.
    pub matched_gt: Vec<Option<usize>>,
}

/// Assign anchors against ground-truth boxes: positive above `pos_thresh`,
/// negative below `neg_thresh`, ignored in between. Independently, the
/// highest-IoU anchor of every ground truth is forced positive (ties go to
/// the lowest anchor index), so each ground truth owns at least one positive.
pub fn assign_targets(
    anchors: &[BBox],
    gts: &[BBox],
    pos_thresh: f64,
    neg_thresh: f64,
) -> Result<MatchResult, GeometryError> {
    if gts.is_empty() {
        return Err(GeometryError::NoGroundTruth);
    }
    let n = anchors.len();
    let mut labels = vec![AnchorLabel::Ignore; n];
    let mut matched_gt = vec![None; n];
    let mut best_anchor_for_gt = vec![(0usize, -1.0f64); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best_iou = 0.0f64;
        let mut best_gt = 0usize;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best_iou {
                best_iou = v;
                best_gt = gi;
            }
            if v > best_anchor_for_gt[gi].1 {
                best_anchor_for_gt[gi] = (ai, v);
            }
        }
        if best_iou > pos_thresh {
            labels[ai] = AnchorLabel::Positive;
            matched_gt[ai] = Some(best_gt);
        } else if best_iou < neg_thresh {
            labels[ai] = AnchorLabel::Negative;
        }
    }
    for (gi, &(ai, _)) in best_anchor_for_gt.iter().enumerate() {
        labels[ai] = AnchorLabel::Positive;
        matched_gt[ai] = Some(gi);
    }
    Ok(MatchResult { labels, matched_gt })
}

/// RPN loss minibatch: up to `batch` anchors aiming for a 1:1
/// positive:negative mix, padded with negatives when positives are scarce.
/// Returns `(anchor index, is_positive)` pairs; selection order is the
/// seeded shuffle order.
pub fn sample_rpn_minibatch(
    m: &MatchResult,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, bool)> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, &l) in m.labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive => pos.push(i),
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min(batch / 2);
    let n_neg = (batch - n_pos).min(neg.len());
    let mut out: Vec<(usize, bool)> = Vec::with_capacity(n_pos + n_neg);
    out.extend(pos.into_iter().take(n_pos).map(|i| (i, true)));
    out.extend(neg.into_iter().take(n_neg).map(|i| (i, false)));
    out
}
