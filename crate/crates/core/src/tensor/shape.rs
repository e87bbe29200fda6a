use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Maps a row-major position in a broadcast output back to the source
/// element it reads from.
#[derive(Debug, Clone)]
pub enum BroadcastMap {
    /// Source and output have the same shape.
    Identity,
    /// Source shape is a suffix of the output shape.
    Cyclic(usize),
    Table(Vec<usize>),
}

impl BroadcastMap {
    pub fn new(input: &[usize], out: &[usize]) -> Self {
        if input == out {
            return BroadcastMap::Identity;
        }
        let n_in = numel(input);
        let rank = out.len();
        let offset = rank - input.len();
        let is_suffix = input
            .iter()
            .enumerate()
            .all(|(i, &d)| d == out[i + offset]);
        if is_suffix {
            return BroadcastMap::Cyclic(n_in.max(1));
        }
        let in_strides = row_major_strides(input);
        let mut strides = vec![0usize; rank];
        for (i, &d) in input.iter().enumerate() {
            if d != 1 {
                strides[i + offset] = in_strides[i];
            }
        }
        let total = numel(out);
        let mut table = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..total {
            table.push(pos);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                pos += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                pos -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        BroadcastMap::Table(table)
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Cyclic(n) => i % n,
            BroadcastMap::Table(t) => t[i],
        }
    }
}
