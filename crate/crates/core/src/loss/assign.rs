use crate::geometry::{iou, BBox};
use crate::model::DecodedGrid;

/// A ground-truth box in network-input (letterboxed) pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub bbox: BBox,
    pub class_id: usize,
}

/// A ground truth placed on one cell of one head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssignedTarget {
    pub image: usize,
    pub scale_index: usize,
    pub i: usize,
    pub j: usize,
    pub gt_box: BBox,
    pub gt_class: usize,
    /// IoU between the current prediction at the cell and the ground truth.
    pub pair_iou: f64,
}

/// Head that owns a box of this area: `< 32^2` goes to stride 8, `< 96^2` to
/// stride 16, everything else to stride 32.
pub fn scale_for_area(area: f64) -> usize {
    if area < 32.0 * 32.0 {
        0
    } else if area < 96.0 * 96.0 {
        1
    } else {
        2
    }
}

/// Assigns every ground truth to the cell containing its centre on the head
/// chosen by [`scale_for_area`].
///
/// Cells are half-open, so a centre on a boundary goes to the higher-index
/// cell. When two ground truths land on the same cell the larger one wins
/// (the earlier one on equal area). Output is ordered by image, then scale,
/// then cell.
pub fn assign_targets(grids: &[DecodedGrid], targets: &[Vec<Target>]) -> Vec<AssignedTarget> {
    let mut out = Vec::new();
    for (image, gts) in targets.iter().enumerate() {
        let mut cells: Vec<(usize, usize, usize, usize)> = Vec::new();
        for (g, t) in gts.iter().enumerate() {
            let area = t.bbox.area();
            if area <= 0.0 {
                continue;
            }
            let scale = scale_for_area(area);
            let grid = &grids[scale];
            let (cx, cy) = t.bbox.center();
            let s = grid.stride as f32;
            let j = ((cx / s).floor().max(0.0) as usize).min(grid.width - 1);
            let i = ((cy / s).floor().max(0.0) as usize).min(grid.height - 1);
            match cells.iter_mut().find(|c| (c.0, c.1, c.2) == (scale, i, j)) {
                Some(c) => {
                    if area > gts[c.3].bbox.area() {
                        c.3 = g;
                    }
                }
                None => cells.push((scale, i, j, g)),
            }
        }
        cells.sort_unstable();
        for (scale, i, j, g) in cells {
            let t = gts[g];
            out.push(AssignedTarget {
                image,
                scale_index: scale,
                i,
                j,
                gt_box: t.bbox,
                gt_class: t.class_id,
                pair_iou: iou(&grids[scale].get(image, i, j), &t.bbox),
            });
        }
    }
    out
}
