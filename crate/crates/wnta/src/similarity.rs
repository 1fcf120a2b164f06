//! Pairwise optical similarity and the weight matrix built from it.
//!
//! Two particles are compared through the variance of the difference of
//! their averaged field images. With both images sharing the noise level
//! epsilon, that variance is the true signal difference plus twice the
//! noise, so `C = 2 eps / var(diff)` is 1 for identical particles and
//! falls toward 0 as the optical signatures diverge. Values above 1 (a
//! noise fluctuation) are clamped to 1.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{complex_variance, ParticleRecord, RytovImage};

/// Symmetric matrix of pairwise similarities in `[0, 1]` with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    size: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// All-diagonal matrix: every particle is identical to itself only.
    pub fn identity(size: usize) -> Self {
        let mut values = vec![0.0; size * size];
        for i in 0..size {
            values[i * size + i] = 1.0;
        }
        SimilarityMatrix { size, values }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// Set both `(i, j)` and `(j, i)`. Values are clamped to `[0, 1]`.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let v = value.clamp(0.0, 1.0);
        self.values[i * self.size + j] = v;
        self.values[j * self.size + i] = v;
    }

    /// Row-major copy of all entries.
    pub fn to_vec(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn from_rows(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::InvalidImage(format!(
                "similarity matrix needs {size}x{size} entries, got {}",
                values.len()
            )));
        }
        for i in 0..size {
            for j in 0..size {
                let v = values[i * size + j];
                if !(0.0..=1.0).contains(&v) || values[j * size + i] != v {
                    return Err(Error::InvalidImage(format!(
                        "similarity entry ({i}, {j}) = {v} breaks symmetry or range"
                    )));
                }
            }
            if values[i * size + i] != 1.0 {
                return Err(Error::InvalidImage(format!(
                    "similarity diagonal ({i}, {i}) must be 1"
                )));
            }
        }
        Ok(SimilarityMatrix { size, values })
    }
}

/// Element-wise exponentiation of a similarity matrix.
///
/// `n_w = 0` weighs every curve equally, the infinite exponent keeps only
/// exact matches (entries equal to 1, which always includes the diagonal).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    size: usize,
    n_w: f64,
    values: Vec<f64>,
}

impl WeightMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Exponent the weights were built with.
    pub fn exponent(&self) -> f64 {
        self.n_w
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    #[cfg(test)]
    pub(crate) fn zero_row_for_test(&mut self, i: usize) {
        for j in 0..self.size {
            self.values[i * self.size + j] = 0.0;
            self.values[j * self.size + i] = 0.0;
        }
    }
}

/// Similarity of two images at a pooled noise level:
/// `min(1, 2 eps / var(a - b))` with the variance pooled over real and
/// imaginary parts. A vanishing difference means identical images and
/// returns exactly 1 whatever the noise level.
pub fn similarity(a: &RytovImage, b: &RytovImage, epsilon_pooled: f64) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::DimensionMismatch {
            a_width: a.width,
            a_height: a.height,
            b_width: b.width,
            b_height: b.height,
            pair: None,
        });
    }
    if !(epsilon_pooled.is_finite() && epsilon_pooled >= 0.0) {
        return Err(Error::InvalidImage(format!(
            "pooled epsilon must be >= 0, got {epsilon_pooled}"
        )));
    }
    let var_diff = complex_variance(
        a.values
            .iter()
            .zip(b.values.iter())
            .map(|(x, y)| x - y),
    );
    if var_diff <= 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * epsilon_pooled / var_diff).min(1.0))
}

/// Similarity of every unordered pair of records. Per pair the noise
/// levels are pooled as their mean, so the symmetric form reduces to the
/// equal-noise case when both match. Each pair is computed once; the
/// matrix is exactly symmetric with unit diagonal.
pub fn similarity_matrix(records: &[ParticleRecord]) -> Result<SimilarityMatrix> {
    let p = records.len();
    if p < 2 {
        return Err(Error::TooFewFrames { got: p, need: 2 });
    }
    let mut eps = Vec::with_capacity(p);
    for r in records {
        match r.rytov.epsilon {
            Some(e) => eps.push(e),
            None => return Err(Error::MissingEpsilon(r.id)),
        }
        if !r.rytov.same_dims(&records[0].rytov) {
            return Err(Error::DimensionMismatch {
                a_width: records[0].rytov.width,
                a_height: records[0].rytov.height,
                b_width: r.rytov.width,
                b_height: r.rytov.height,
                pair: Some((records[0].id, r.id)),
            });
        }
    }

    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .collect();
    let computed: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let pooled = 0.5 * (eps[i] + eps[j]);
            similarity(&records[i].rytov, &records[j].rytov, pooled)
                .expect("dimensions were validated")
        })
        .collect();

    let mut matrix = SimilarityMatrix::identity(p);
    for (&(i, j), &c) in pairs.iter().zip(computed.iter()) {
        matrix.set(i, j, c);
    }
    Ok(matrix)
}

/// Raise a similarity matrix to the exponent `n_w`, element-wise.
///
/// The infinite exponent maps entries exactly equal to 1 to 1 and
/// everything else to 0; the zero exponent maps everything to 1.
pub fn weights(c: &SimilarityMatrix, n_w: f64) -> Result<WeightMatrix> {
    if n_w.is_nan() || n_w < 0.0 {
        return Err(Error::NegativeExponent(n_w));
    }
    let size = c.size();
    let values = if n_w == 0.0 {
        vec![1.0; size * size]
    } else if n_w.is_infinite() {
        c.values
            .iter()
            .map(|&v| if v >= 1.0 { 1.0 } else { 0.0 })
            .collect()
    } else {
        c.values.iter().map(|&v| v.powf(n_w)).collect()
    };
    Ok(WeightMatrix {
        size,
        n_w,
        values,
    })
}
