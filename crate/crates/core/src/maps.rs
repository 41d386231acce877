//! Dense per-cell maps shared by the labeling, loss, and tracking code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{decode_unchecked, BBox, Grid, Offsets};

/// `height x width` grid of scalars, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "score map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.width + j] = v;
    }

    pub fn same_shape(&self, other: &ScoreMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_shape(&self, other: &ScoreMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Row-major index of the maximum; the first index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = k;
            }
        }
        best
    }
}

/// `height x width` grid of `(l, t, r, b)` distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Offsets>,
}

impl OffsetMap {
    pub fn from_vec(height: usize, width: usize, data: Vec<Offsets>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "offset map {height}x{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> Offsets {
        self.data[i * self.width + j]
    }

    /// Decode every cell against the grid's points.
    pub fn decode(&self, grid: &Grid) -> Result<Vec<BBox>> {
        if grid.height != self.height || grid.width != self.width {
            return Err(Error::shape(format!(
                "grid {}x{} vs offsets {}x{}",
                grid.height, grid.width, self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..self.height {
            for j in 0..self.width {
                let o = self.get(i, j);
                if o.as_array().iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid(format!("negative offsets at ({i},{j}): {o:?}")));
                }
                out.push(decode_unchecked(grid.point(i, j), o));
            }
        }
        Ok(out)
    }
}
