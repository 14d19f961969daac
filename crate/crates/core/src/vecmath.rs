//! Flat parameter vectors and deterministic random streams.
//!
//! Every reduction here sums strictly left to right so that identical inputs
//! give bit-identical outputs on every platform and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A flat, fixed-length vector of model weights, gradients or updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        axpy(self, -1.0, other)
    }

    /// Elementwise `scale * self`.
    pub fn scaled(&self, scale: f64) -> Result<ParamVector> {
        let out = ParamVector(self.0.iter().map(|v| scale * v).collect());
        ensure_finite(&out, "scaled vector")?;
        Ok(out)
    }

    /// In-place `self += scale * x`.
    pub fn axpy_assign(&mut self, scale: f64, x: &ParamVector) -> Result<()> {
        check_dims(self, x)?;
        for (y, xi) in self.0.iter_mut().zip(&x.0) {
            *y += scale * xi;
        }
        ensure_finite(self, "axpy result")
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_dims(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

fn ensure_finite(v: &ParamVector, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(what))
    }
}

/// Inner product, summed in index order.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dims(a, b)?;
    let mut acc = 0.0;
    for (x, y) in a.0.iter().zip(&b.0) {
        acc += x * y;
    }
    Ok(acc)
}

/// Returns `y + scale * x`.
pub fn axpy(y: &ParamVector, scale: f64, x: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.axpy_assign(scale, x)?;
    Ok(out)
}

/// Squared Euclidean norm, summed in index order.
pub fn l2_norm_sq(a: &ParamVector) -> f64 {
    let mut acc = 0.0;
    for x in &a.0 {
        acc += x * x;
    }
    acc
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one seed; order matters.
pub(crate) fn mix_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| mix64(acc ^ mix64(w)))
}

/// Client index reserved for streams that do not belong to any client.
const SHARED_CLIENT: u64 = u64::MAX;

/// Identifies a deterministic random stream.
///
/// A stream is a pure function of `(seed, client, round)`: the generator it
/// hands out does not depend on which other streams were drawn before it, so
/// clients can run in any order or in parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub client: u64,
    pub round: u64,
}

impl RngStream {
    pub fn new(seed: u64, client: u64, round: u64) -> Self {
        RngStream { seed, client, round }
    }

    /// A stream owned by no client, keyed by a purpose tag.
    pub fn shared(seed: u64, tag: u64) -> Self {
        RngStream {
            seed,
            client: SHARED_CLIENT,
            round: tag,
        }
    }

    /// A child stream; used for retries and nested draws.
    pub fn substream(&self, salt: u64) -> RngStream {
        RngStream {
            seed: mix_words(&[self.seed, self.client, self.round, salt]),
            client: self.client,
            round: self.round,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_words(&[self.seed, self.client, self.round]))
    }
}
