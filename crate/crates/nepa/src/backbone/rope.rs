//! Rotary position embedding tables.
//!
//! Pair `j` of a head vector is rotated by `pos·θ_j` with
//! `θ_j = base^(−2j/d_rot)`. In 1d mode `pos` is the raster index and
//! `d_rot = head_dim`; in 2d-axial mode the first half of the pairs use the
//! patch row and the second half the patch column, each with
//! `d_rot = head_dim/2`.

use super::config::RopeMode;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Grid coordinate of a patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub index: f64,
    pub row: f64,
    pub col: f64,
}

impl Position {
    pub fn shifted(self, s: f64) -> Self {
        Self {
            index: self.index + s,
            row: self.row + s,
            col: self.col + s,
        }
    }
}

/// Raster-order positions of a `rows × cols` grid.
pub fn grid_positions(rows: usize, cols: usize) -> Vec<Position> {
    (0..rows * cols)
        .map(|t| Position {
            index: t as f64,
            row: (t / cols) as f64,
            col: (t % cols) as f64,
        })
        .collect()
}

/// Cosine/sine tables of shape `[T, head_dim/2]`, stored in `f64`.
#[derive(Clone, Debug)]
pub struct RopeTable {
    seq: usize,
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(mode: RopeMode, positions: &[Position], head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("rope needs an even head_dim, got {head_dim}")));
        }
        let half = head_dim / 2;
        if mode == RopeMode::Axial2d && !half.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "2d-axial rope needs head_dim divisible by 4, got {head_dim}"
            )));
        }
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for p in positions {
            for j in 0..half {
                let angle = match mode {
                    RopeMode::OneD => p.index * base.powf(-2.0 * j as f64 / head_dim as f64),
                    RopeMode::Axial2d => {
                        let quarter = half / 2;
                        let (pos, jj) = if j < quarter { (p.row, j) } else { (p.col, j - quarter) };
                        pos * base.powf(-2.0 * jj as f64 / half as f64)
                    }
                };
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            seq: positions.len(),
            half,
            cos,
            sin,
        })
    }

    /// Number of positions.
    pub fn len(&self) -> usize {
        self.seq
    }

    pub fn is_empty(&self) -> bool {
        self.seq == 0
    }

    pub fn tensors<E: Element>(&self) -> (Tensor<E>, Tensor<E>) {
        let shape = [self.seq, self.half];
        (
            Tensor::from_fn(shape, |i| E::of(self.cos[i])),
            Tensor::from_fn(shape, |i| E::of(self.sin[i])),
        )
    }
}

/// Rotates query and key heads (`[.., T, head_dim]`) by the table.
pub fn apply_rope<'t, E: Element>(
    q: Var<'t, E>,
    k: Var<'t, E>,
    table: &RopeTable,
) -> Result<(Var<'t, E>, Var<'t, E>)> {
    let (cos, sin) = table.tensors::<E>();
    Ok((q.rope(&cos, &sin)?, k.rope(&cos, &sin)?))
}
