use std::f64::consts::PI;

use crate::error::Result;
use crate::geometry::{iou, BBox};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Complete-IoU loss `1 - IoU + rho^2 / c^2 + alpha * v`, where `rho` is the
/// centre distance, `c` the enclosing-box diagonal and
/// `v = 4 / pi^2 * (atan(w_g / h_g) - atan(w_p / h_p))^2`,
/// `alpha = v / (1 - IoU + v)`.
///
/// A degenerate predicted box scores 2, the value of zero overlap with the
/// largest possible distance term.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> f64 {
    if !pred.is_valid() || !gt.is_valid() {
        return 2.0;
    }
    let f = |v: f32| v as f64;
    let i = iou(pred, gt);
    let (pcx, pcy) = (f(pred.x_min + pred.x_max) / 2.0, f(pred.y_min + pred.y_max) / 2.0);
    let (gcx, gcy) = (f(gt.x_min + gt.x_max) / 2.0, f(gt.y_min + gt.y_max) / 2.0);
    let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
    let cw = f(pred.x_max.max(gt.x_max)) - f(pred.x_min.min(gt.x_min));
    let ch = f(pred.y_max.max(gt.y_max)) - f(pred.y_min.min(gt.y_min));
    let c2 = cw * cw + ch * ch;
    let v = 4.0 / (PI * PI)
        * ((f(gt.width()) / f(gt.height())).atan() - (f(pred.width()) / f(pred.height())).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / (1.0 - i + v) };
    1.0 - i + rho2 / c2 + alpha * v
}

/// Predicted boxes on the tape as four same-length 1-D tensors.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
}

/// Summed CIoU loss between predicted boxes on the tape and constant targets
/// `[x1, y1, x2, y2]`. Every term, including `alpha`, is differentiated.
pub fn ciou_loss_sum<T: Real>(tape: &mut Tape<T>, pred: &BoxVars, gt: &[[f64; 4]]) -> Result<Var> {
    let n = gt.len();
    let eps = 1e-7;
    let konst = |tape: &mut Tape<T>, f: &dyn Fn(&[f64; 4]) -> f64| {
        let data: Vec<f64> = gt.iter().map(f).collect();
        tape.constant(Tensor::from_f64(&[n], &data).expect("length matches"))
    };
    let gx1 = konst(tape, &|g| g[0]);
    let gy1 = konst(tape, &|g| g[1]);
    let gx2 = konst(tape, &|g| g[2]);
    let gy2 = konst(tape, &|g| g[3]);
    let g_area = konst(tape, &|g| (g[2] - g[0]) * (g[3] - g[1]));
    let g_atan = konst(tape, &|g| ((g[2] - g[0]) / (g[3] - g[1])).atan());
    let BoxVars { x1, y1, x2, y2 } = *pred;

    let t = tape;
    let ix1 = t.maximum(x1, gx1)?;
    let iy1 = t.maximum(y1, gy1)?;
    let ix2 = t.minimum(x2, gx2)?;
    let iy2 = t.minimum(y2, gy2)?;
    let iw = t.sub(ix2, ix1)?;
    let iw = t.relu(iw);
    let ih = t.sub(iy2, iy1)?;
    let ih = t.relu(ih);
    let inter = t.mul(iw, ih)?;
    let pw = t.sub(x2, x1)?;
    let ph = t.sub(y2, y1)?;
    let p_area = t.mul(pw, ph)?;
    let sum_area = t.add(p_area, g_area)?;
    let union = t.sub(sum_area, inter)?;
    let union = t.add_scalar(union, T::of(eps));
    let iou = t.div(inter, union)?;

    let ex1 = t.minimum(x1, gx1)?;
    let ey1 = t.minimum(y1, gy1)?;
    let ex2 = t.maximum(x2, gx2)?;
    let ey2 = t.maximum(y2, gy2)?;
    let cw = t.sub(ex2, ex1)?;
    let ch = t.sub(ey2, ey1)?;
    let cw2 = t.square(cw);
    let ch2 = t.square(ch);
    let c2 = t.add(cw2, ch2)?;
    let c2 = t.add_scalar(c2, T::of(eps));
    // 2 * (centre offset) per axis; the factor 4 is divided out below
    let psx = t.add(x1, x2)?;
    let gsx = t.add(gx1, gx2)?;
    let dx = t.sub(psx, gsx)?;
    let psy = t.add(y1, y2)?;
    let gsy = t.add(gy1, gy2)?;
    let dy = t.sub(psy, gsy)?;
    let dx2 = t.square(dx);
    let dy2 = t.square(dy);
    let rho2 = t.add(dx2, dy2)?;
    let rho2 = t.mul_scalar(rho2, T::of(0.25));
    let dist = t.div(rho2, c2)?;

    let ph_eps = t.add_scalar(ph, T::of(eps));
    let ratio = t.div(pw, ph_eps)?;
    let p_atan = t.atan(ratio);
    let da = t.sub(g_atan, p_atan)?;
    let v = t.square(da);
    let v = t.mul_scalar(v, T::of(4.0 / (PI * PI)));
    let one_minus_iou = t.neg(iou);
    let one_minus_iou = t.add_scalar(one_minus_iou, T::one());
    let denom = t.add(one_minus_iou, v)?;
    let denom = t.add_scalar(denom, T::of(eps));
    let alpha = t.div(v, denom)?;
    let av = t.mul(alpha, v)?;

    let l = t.add(one_minus_iou, dist)?;
    let l = t.add(l, av)?;
    Ok(t.sum(l))
}
