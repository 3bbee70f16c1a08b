//! Splitting a `[time, features]` sequence into fixed-size chunks and
//! merging chunk grids back by coverage-normalised overlap-add.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Overlap {
    #[default]
    None,
    Half,
}

impl fmt::Display for Overlap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Overlap::None => "none",
            Overlap::Half => "half",
        })
    }
}

impl FromStr for Overlap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Overlap::None),
            "half" => Ok(Overlap::Half),
            other => Err(format!("expected `none` or `half`, got `{other}`")),
        }
    }
}

/// Chunk grid covering a sequence of `original_len` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkLayout {
    pub chunk: usize,
    pub hop: usize,
    pub num_chunks: usize,
    pub pad_len: usize,
    pub original_len: usize,
}

impl ChunkLayout {
    pub fn new(original_len: usize, chunk: usize, overlap: Overlap) -> Result<Self> {
        if chunk < 1 || original_len < 1 {
            return Err(Error::InvalidConfig(format!(
                "chunk size and sequence length must be positive (C={chunk}, T={original_len})"
            )));
        }
        let hop = match overlap {
            Overlap::None => chunk,
            Overlap::Half if chunk.is_multiple_of(2) => chunk / 2,
            Overlap::Half => {
                return Err(Error::InvalidConfig(format!(
                    "50% overlap needs an even chunk size, got {chunk}"
                )))
            }
        };
        let num_chunks = (original_len.max(chunk) - chunk).div_ceil(hop) + 1;
        let padded = hop * (num_chunks - 1) + chunk;
        Ok(Self {
            chunk,
            hop,
            num_chunks,
            pad_len: padded - original_len,
            original_len,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.original_len + self.pad_len
    }

    /// Number of chunks covering each original frame.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cov = vec![0usize; self.padded_len()];
        for n in 0..self.num_chunks {
            for c in &mut cov[n * self.hop..n * self.hop + self.chunk] {
                *c += 1;
            }
        }
        cov.truncate(self.original_len);
        cov
    }
}

fn check_rows<T: Scalar>(x: &Tensor<T>, layout: &ChunkLayout) -> Result<usize> {
    match *x.shape() {
        [t, d] if t == layout.original_len => Ok(d),
        _ => Err(Error::LayoutMismatch(format!(
            "expected [{}, D], got {:?}",
            layout.original_len,
            x.shape()
        ))),
    }
}

fn check_grid<T: Scalar>(x: &Tensor<T>, layout: &ChunkLayout) -> Result<usize> {
    match *x.shape() {
        [n, c, d] if n == layout.num_chunks && c == layout.chunk => Ok(d),
        _ => Err(Error::LayoutMismatch(format!(
            "expected [{}, {}, D], got {:?}",
            layout.num_chunks,
            layout.chunk,
            x.shape()
        ))),
    }
}

/// `[T, D]` → `[N_C, C, D]`, zero-padded on the right.
pub(crate) fn frame<T: Scalar>(x: &Tensor<T>, layout: &ChunkLayout) -> Result<Tensor<T>> {
    let d = check_rows(x, layout)?;
    let mut out = vec![T::zero(); layout.num_chunks * layout.chunk * d];
    for n in 0..layout.num_chunks {
        for c in 0..layout.chunk {
            let t = n * layout.hop + c;
            if t < layout.original_len {
                let dst = (n * layout.chunk + c) * d;
                out[dst..dst + d].copy_from_slice(&x.data()[t * d..(t + 1) * d]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![layout.num_chunks, layout.chunk, d], out))
}

/// Adjoint of [`frame`]: sums every chunk row back onto its source frame.
pub(crate) fn frame_adjoint<T: Scalar>(grid: &Tensor<T>, layout: &ChunkLayout) -> Tensor<T> {
    let d = grid.shape()[2];
    let mut out = vec![T::zero(); layout.original_len * d];
    for n in 0..layout.num_chunks {
        for c in 0..layout.chunk {
            let t = n * layout.hop + c;
            if t < layout.original_len {
                let src = (n * layout.chunk + c) * d;
                for j in 0..d {
                    out[t * d + j] += grid.data()[src + j];
                }
            }
        }
    }
    Tensor::from_parts(vec![layout.original_len, d], out)
}

/// `[N_C, C, D]` → `[T, D]`: sum at hop offsets, divide by coverage, drop padding.
pub(crate) fn overlap_add<T: Scalar>(grid: &Tensor<T>, layout: &ChunkLayout) -> Result<Tensor<T>> {
    check_grid(grid, layout)?;
    let summed = frame_adjoint(grid, layout);
    let d = grid.shape()[2];
    let cov = layout.coverage();
    let mut data = summed.into_data();
    if layout.hop != layout.chunk {
        for (t, &c) in cov.iter().enumerate() {
            let scale = T::lit(1.0 / c as f64);
            for v in &mut data[t * d..(t + 1) * d] {
                *v *= scale;
            }
        }
    }
    Ok(Tensor::from_parts(vec![layout.original_len, d], data))
}

pub(crate) fn overlap_add_adjoint<T: Scalar>(dy: &Tensor<T>, layout: &ChunkLayout) -> Tensor<T> {
    let d = dy.shape()[1];
    let mut scaled = dy.clone();
    if layout.hop != layout.chunk {
        for (t, &c) in layout.coverage().iter().enumerate() {
            let scale = T::lit(1.0 / c as f64);
            for v in &mut scaled.data_mut()[t * d..(t + 1) * d] {
                *v *= scale;
            }
        }
    }
    frame(&scaled, layout).expect("shape checked by forward")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_arithmetic() {
        let l = ChunkLayout::new(500, 250, Overlap::None).unwrap();
        assert_eq!((l.num_chunks, l.pad_len), (2, 0));
        let l = ChunkLayout::new(600, 250, Overlap::None).unwrap();
        assert_eq!((l.num_chunks, l.pad_len), (3, 150));
        let l = ChunkLayout::new(500, 250, Overlap::Half).unwrap();
        assert_eq!((l.hop, l.num_chunks, l.pad_len), (125, 3, 0));
        let l = ChunkLayout::new(7, 250, Overlap::None).unwrap();
        assert_eq!((l.num_chunks, l.pad_len), (1, 243));
        assert!(ChunkLayout::new(500, 251, Overlap::Half).is_err());
    }

    #[test]
    fn ones_stay_ones_under_half_overlap() {
        let layout = ChunkLayout::new(500, 250, Overlap::Half).unwrap();
        let grid = Tensor::<f64>::ones(&[3, 250, 2]);
        let y = overlap_add(&grid, &layout).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_grid_is_a_layout_mismatch() {
        let layout = ChunkLayout::new(500, 250, Overlap::None).unwrap();
        let err = overlap_add(&Tensor::<f64>::ones(&[3, 250, 2]), &layout).unwrap_err();
        assert!(matches!(err, Error::LayoutMismatch(_)));
    }
}
