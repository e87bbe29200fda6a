//! Learnable positional tables and their resampling to smaller views.
//!
//! Resampling is a fixed linear map `W · table`, so it is differentiable with
//! respect to the table and runs through the ordinary matmul op.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Weights `[target, capacity]` of 1-D linear interpolation with both ends
/// pinned: output 0 is entry 0, output `target − 1` is entry `capacity − 1`.
/// A single output sits at the table centre.
pub fn linear_weights(capacity: usize, target: usize) -> Result<Vec<f64>> {
    if target == 0 {
        return Err(Error::domain("interpolation target must be positive"));
    }
    if capacity == 0 {
        return Err(Error::domain("cannot interpolate an empty table"));
    }
    let mut w = vec![0.0; target * capacity];
    for i in 0..target {
        let pos = if target == 1 {
            (capacity - 1) as f64 / 2.0
        } else {
            i as f64 * (capacity - 1) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(capacity - 1);
        let hi = (lo + 1).min(capacity - 1);
        let frac = pos - lo as f64;
        w[i * capacity + lo] += 1.0 - frac;
        if frac > 0.0 {
            w[i * capacity + hi] += frac;
        }
    }
    Ok(w)
}

/// Weights `[rows·cols, side·side]` of per-axis bilinear interpolation over a
/// square `side × side` grid stored row-major.
pub fn bilinear_weights(side: usize, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let wy = linear_weights(side, rows)?;
    let wx = linear_weights(side, cols)?;
    let n = side * side;
    let mut w = vec![0.0; rows * cols * n];
    for r in 0..rows {
        for c in 0..cols {
            let out = &mut w[(r * cols + c) * n..(r * cols + c + 1) * n];
            for y in 0..side {
                let a = wy[r * side + y];
                if a == 0.0 {
                    continue;
                }
                for x in 0..side {
                    out[y * side + x] = a * wx[c * side + x];
                }
            }
        }
    }
    Ok(w)
}

fn apply<F: Scalar>(weights: &[f64], target: usize, table: &Tensor<F>) -> Tensor<F> {
    let cap = table.shape()[0];
    let d = table.shape()[1];
    let src = table.values();
    let mut out = vec![F::ZERO; target * d];
    for i in 0..target {
        for j in 0..cap {
            let a = weights[i * cap + j];
            if a == 0.0 {
                continue;
            }
            let a = F::from_f64(a);
            for k in 0..d {
                out[i * d + k] = out[i * d + k] + a * src[j * d + k];
            }
        }
    }
    Tensor::new(vec![target, d], out).expect("non-empty table")
}

fn check_table<F: Scalar>(table: &Tensor<F>) -> Result<()> {
    if table.shape().len() != 2 {
        return Err(Error::shape(format!(
            "positional table must be [entries, D], got {:?}",
            table.shape()
        )));
    }
    Ok(())
}

/// Resample a `[capacity, D]` temporal table to `target` entries. Equal sizes
/// return a bit-identical copy.
pub fn interpolate_temporal<F: Scalar>(table: &Tensor<F>, target: usize) -> Result<Tensor<F>> {
    check_table(table)?;
    let cap = table.shape()[0];
    let w = linear_weights(cap, target)?;
    if target == cap {
        return Ok(table.clone());
    }
    Ok(apply(&w, target, table))
}

/// Resample a `[side², D]` spatial table to a `rows × cols` grid.
pub fn interpolate_spatial<F: Scalar>(
    table: &Tensor<F>,
    rows: usize,
    cols: usize,
) -> Result<Tensor<F>> {
    check_table(table)?;
    let side = square_side(table.shape()[0])?;
    let w = bilinear_weights(side, rows, cols)?;
    if rows == side && cols == side {
        return Ok(table.clone());
    }
    Ok(apply(&w, rows * cols, table))
}

fn square_side(n: usize) -> Result<usize> {
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::shape(format!("spatial table of {n} entries is not a square grid")));
    }
    Ok(side)
}

/// Graph version of [`interpolate_temporal`]; `target` may not exceed the
/// table.
pub fn temporal_slice<F: Scalar>(g: &mut Graph<F>, table: Var, target: usize) -> Result<Var> {
    let cap = g.shape(table)[0];
    if target > cap {
        return Err(Error::shape(format!(
            "{target} frames exceed the temporal capacity {cap}"
        )));
    }
    let w = linear_weights(cap, target)?;
    if target == cap {
        return Ok(table);
    }
    let w = g.constant(Tensor::new(vec![target, cap], w)?.cast());
    g.matmul(w, table)
}

/// Graph version of [`interpolate_spatial`]; the grid may not exceed the
/// table on either axis.
pub fn spatial_slice<F: Scalar>(g: &mut Graph<F>, table: Var, rows: usize, cols: usize) -> Result<Var> {
    let side = square_side(g.shape(table)[0])?;
    if rows > side || cols > side {
        return Err(Error::shape(format!(
            "patch grid {rows}×{cols} exceeds the spatial capacity {side}×{side}"
        )));
    }
    let w = bilinear_weights(side, rows, cols)?;
    if rows == side && cols == side {
        return Ok(table);
    }
    let w = g.constant(Tensor::new(vec![rows * cols, side * side], w)?.cast());
    g.matmul(w, table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: Vec<Vec<f64>>) -> Tensor<f64> {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
    }

    #[test]
    fn identity_is_bit_exact() {
        let t = Tensor::from_fn(vec![8, 5], |i| (i as f64 * 0.37).sin());
        assert_eq!(interpolate_temporal(&t, 8).unwrap(), t);
        let s = Tensor::from_fn(vec![16, 3], |i| (i as f64).cos());
        assert_eq!(interpolate_spatial(&s, 4, 4).unwrap(), s);
    }

    #[test]
    fn midpoint_of_two_entries() {
        let t = table(vec![vec![1.0, -2.0], vec![3.0, 4.0]]);
        let out = interpolate_temporal(&t, 3).unwrap();
        assert_eq!(out.values(), &[1.0, -2.0, 2.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn endpoints_preserved() {
        let t = Tensor::from_fn(vec![16, 4], |i| (i as f64 * 1.3).sin() * 10.0);
        for target in 2..=20 {
            let out = interpolate_temporal(&t, target).unwrap();
            assert_eq!(&out.values()[..4], &t.values()[..4]);
            assert_eq!(&out.values()[(target - 1) * 4..], &t.values()[15 * 4..]);
        }
    }

    #[test]
    fn spatial_corners_preserved() {
        let side = 6;
        let t = Tensor::from_fn(vec![side * side, 2], |i| i as f64);
        let out = interpolate_spatial(&t, 3, 2).unwrap();
        let v = out.values();
        let corner = |k: usize| &t.values()[k * 2..k * 2 + 2];
        assert_eq!(&v[0..2], corner(0));
        assert_eq!(&v[2..4], corner(side - 1));
        assert_eq!(&v[8..10], corner(side * side - side));
        assert_eq!(&v[10..12], corner(side * side - 1));
    }

    #[test]
    fn interpolation_stays_within_table_range() {
        let t = Tensor::from_fn(vec![7, 1], |i| (i as f64 * 2.1).sin());
        let (lo, hi) = t
            .values()
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        for target in 1..12 {
            for &v in interpolate_temporal(&t, target).unwrap().values() {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_target_is_domain_error() {
        let t = Tensor::<f64>::zeros(vec![4, 2]);
        assert!(matches!(interpolate_temporal(&t, 0), Err(Error::Domain(_))));
        assert!(matches!(interpolate_spatial(&Tensor::<f64>::zeros(vec![4, 2]), 0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn graph_slices_match_and_refuse_extrapolation() {
        let t = Tensor::from_fn(vec![8, 3], |i| i as f64 * 0.5 - 3.0);
        let mut g = Graph::<f64>::new();
        let v = g.param(t.clone());
        let s = temporal_slice(&mut g, v, 4).unwrap();
        assert_eq!(g.value(s), interpolate_temporal(&t, 4).unwrap().values());
        assert_eq!(temporal_slice(&mut g, v, 8).unwrap(), v);
        assert!(temporal_slice(&mut g, v, 9).is_err());

        let sp = Tensor::from_fn(vec![9, 2], |i| i as f64);
        let v = g.param(sp.clone());
        let s = spatial_slice(&mut g, v, 2, 2).unwrap();
        assert_eq!(g.value(s), interpolate_spatial(&sp, 2, 2).unwrap().values());
        assert!(spatial_slice(&mut g, v, 4, 2).is_err());
    }
}
