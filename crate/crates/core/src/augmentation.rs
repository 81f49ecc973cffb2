//! Random overlapping crops and timestamp masking: the two stochastic
//! views used by contrastive pretraining.

use crate::error::{Error, Result};
use crate::numerics::{Distribution, RandomStream, Tensor};

/// Two overlapping segments `[a1, a2]` and `[b1, b2]` of a length-`T`
/// series, as 0-based inclusive row indices with `a1 < b1 < a2 < b2 < T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropPair {
    pub a1: usize,
    pub b1: usize,
    pub a2: usize,
    pub b2: usize,
}

impl CropPair {
    pub fn new(a1: usize, b1: usize, a2: usize, b2: usize, t: usize) -> Result<Self> {
        if !(a1 < b1 && b1 < a2 && a2 < b2 && b2 < t) {
            return Err(Error::Contract(format!(
                "crop ({a1}, {b1}, {a2}, {b2}) violates a1 < b1 < a2 < b2 < {t}"
            )));
        }
        Ok(Self { a1, b1, a2, b2 })
    }

    pub fn view_a(&self) -> std::ops::Range<usize> {
        self.a1..self.a2 + 1
    }

    pub fn view_b(&self) -> std::ops::Range<usize> {
        self.b1..self.b2 + 1
    }

    /// Overlap rows `[b1, a2]` in source coordinates.
    pub fn overlap(&self) -> std::ops::Range<usize> {
        self.b1..self.a2 + 1
    }

    pub fn overlap_len(&self) -> usize {
        self.a2 + 1 - self.b1
    }

    /// Where the overlap starts inside view A and view B.
    pub fn overlap_offsets(&self) -> (usize, usize) {
        (self.b1 - self.a1, 0)
    }
}

/// Draws four distinct row indices and sorts them, which is uniform over
/// all valid crop tuples.
pub fn random_crop(t: usize, stream: &mut RandomStream) -> Result<CropPair> {
    if t < 4 {
        return Err(Error::Contract(format!("random_crop needs T ≥ 4, got {t}")));
    }
    let mut idx = stream.distinct(t, 4);
    idx.sort_unstable();
    CropPair::new(idx[0], idx[1], idx[2], idx[3], t)
}

/// `T×1` keep-mask with entries `m_t ~ Bernoulli(p)`; `m_t = 0` masks row `t`.
pub fn draw_mask(t: usize, p: f64, stream: &mut RandomStream) -> Result<Tensor> {
    stream.draw(Distribution::Bernoulli(p), &[t, 1])
}

/// Zeroes the rows of `latent` whose mask entry is 0.
pub fn timestamp_mask(latent: &Tensor, stream: &mut RandomStream, p: f64) -> Result<(Tensor, Tensor)> {
    if latent.is_empty() {
        return Err(Error::Contract("timestamp_mask on an empty latent".into()));
    }
    let (rows, cols) = (latent.rows(), latent.cols());
    let mask = draw_mask(rows, p, stream)?;
    let mut out = latent.clone().reshaped(vec![rows, cols])?;
    for (r, &m) in mask.data().iter().enumerate() {
        if m == 0.0 {
            out.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
    }
    Ok((out, mask))
}
