//! The UIB test matrix with hand-counted trainable parameter totals.

use msyolo::flops::layer_cost;
use msyolo::model::{build_uib, Describer, ParamBuilder, ParamKind, Session, UibSpec};
use msyolo::tensor::Tensor;

fn spec(k1: usize, k2: usize, s: usize, r: f64, c_in: usize, c_out: usize) -> UibSpec {
    UibSpec {
        k1,
        k2,
        s,
        r,
        c_in,
        c_out,
    }
}

/// Six kernel pairs, each in a width-keeping stride-1 form and a
/// downsampling form. `(0, 0)` cannot stride, so its second form widens at
/// stride 1 instead.
///
/// Counts are conv weights `k^2 * (c_in / groups) * c_out` plus `2 * c` per
/// batch norm, summed by hand.
pub fn uib_matrix() -> Vec<(UibSpec, usize)> {
    vec![
        (spec(0, 0, 1, 2.0, 8, 8), 304),
        (spec(3, 0, 1, 4.0, 8, 8), 680),
        (spec(0, 3, 1, 4.0, 8, 8), 944),
        (spec(3, 3, 1, 3.0, 8, 8), 800),
        (spec(5, 3, 1, 2.0, 8, 8), 696),
        (spec(3, 5, 1, 2.0, 8, 8), 824),
        (spec(0, 0, 1, 2.0, 8, 12), 376),
        (spec(3, 0, 2, 4.0, 8, 16), 952),
        (spec(0, 3, 2, 4.0, 8, 16), 1216),
        (spec(3, 3, 2, 3.0, 8, 16), 1008),
        (spec(5, 3, 2, 2.0, 8, 16), 840),
        (spec(3, 5, 2, 2.0, 8, 16), 968),
    ]
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Skip rule, stride placement, residual condition, parameter count and
/// shape agreement for one block on a 16x16 input.
pub fn check_uib(spec: &UibSpec, params: usize) -> Result<(), String> {
    let tag = format!("{spec:?}");
    let mut pb = ParamBuilder::new(3);
    let block = build_uib(&mut pb, "u", spec).map_err(|e| format!("{tag}: {e}"))?;
    ensure(block.dw1.is_some() == (spec.k1 > 0), || format!("{tag}: dw1 presence"))?;
    ensure(block.dw2.is_some() == (spec.k2 > 0), || format!("{tag}: dw2 presence"))?;
    let e = (spec.r * spec.c_in as f64).round() as usize;
    ensure(block.expand.c_out() == e, || format!("{tag}: expanded width {}", block.expand.c_out()))?;
    for (dw, c) in [(&block.dw1, spec.c_in), (&block.dw2, e)] {
        if let Some(dw) = dw {
            ensure(dw.conv.geom.groups == c && dw.c_out() == c, || format!("{tag}: depthwise groups"))?;
        }
    }
    let (s1, s2) = if spec.k2 > 0 { (1, spec.s) } else { (spec.s, 1) };
    ensure(block.dw1.as_ref().is_none_or(|d| d.conv.geom.stride == s1), || format!("{tag}: dw1 stride"))?;
    ensure(block.dw2.as_ref().is_none_or(|d| d.conv.geom.stride == s2), || format!("{tag}: dw2 stride"))?;

    let store = pb.store;
    let trainable: usize = store
        .entries()
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.tensor.len())
        .sum();
    ensure(trainable == params, || format!("{tag}: {trainable} trainable parameters, expected {params}"))?;

    let mut d = Describer::default();
    let out = block.describe(&mut d, "u", [spec.c_in, 16, 16]).map_err(|e| format!("{tag}: {e}"))?;
    let profiled: u64 = d
        .layers
        .iter()
        .map(|l| layer_cost(&l.kind, l.input).map(|c| c.params))
        .sum::<msyolo::Result<u64>>()
        .map_err(|e| format!("{tag}: {e}"))?;
    ensure(profiled as usize == params, || format!("{tag}: profiler counts {profiled}"))?;
    let residual = spec.s == 1 && spec.c_in == spec.c_out;
    ensure(spec.has_residual() == residual, || format!("{tag}: residual condition"))?;
    let has_add = d.layers.iter().any(|l| l.name.ends_with("residual"));
    ensure(has_add == residual, || format!("{tag}: residual layer present = {has_add}"))?;
    let expect = [spec.c_out, 16 / spec.s, 16 / spec.s];
    ensure(out == expect, || format!("{tag}: described shape {out:?}"))?;

    // Zeroing the projection's batch-norm scale leaves only the shortcut.
    let mut store = store;
    store.get_mut(block.project.bn.gamma).data_mut().fill(0.0);
    let x = {
        let n = spec.c_in * 256;
        let data = (0..n).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        Tensor::new(vec![1, spec.c_in, 16, 16], data).unwrap()
    };
    let mut s = Session::new(&store, false);
    let xv = s.tape.constant(x.clone());
    let yv = block.forward(&mut s, xv).map_err(|e| format!("{tag}: {e}"))?;
    let y = s.tape.value(yv);
    ensure(y.shape() == [1, expect[0], expect[1], expect[2]], || format!("{tag}: forward shape {:?}", y.shape()))?;
    if residual {
        ensure(y == &x, || format!("{tag}: zeroed block is not the identity"))?;
    } else {
        ensure(y.data().iter().all(|&v| v == 0.0), || format!("{tag}: zeroed block is not zero"))?;
    }
    Ok(())
}
