//! Flat-vector kernel shared by every other module.
//!
//! Reductions run strictly left to right over the index range so results are
//! bit-reproducible; nothing in here is parallelized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model parameters or a gradient, flattened to a single `f64` vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
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

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &ParamVector) -> Result<()> {
        check_len(self, other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += c * b;
        }
        Ok(())
    }

    /// In-place multiplication by a scalar.
    pub fn scale(&mut self, c: f64) {
        for a in &mut self.0 {
            *a *= c;
        }
    }

    /// Bit pattern of every coordinate, handy for exact equality checks and hashing.
    pub fn to_bits(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
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

fn check_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Sum of elementwise products, accumulated from index 0 upward.
pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a, b)?;
    Ok(dot_slices(&a.0, &b.0))
}

pub fn l2_norm(a: &ParamVector) -> f64 {
    dot_slices(&a.0, &a.0).sqrt()
}

/// Returns `a + c * b`.
pub fn scale_add(a: &ParamVector, c: f64, b: &ParamVector) -> Result<ParamVector> {
    let mut out = a.clone();
    out.add_scaled(c, b)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("scale_add"));
    }
    Ok(out)
}

/// Cosine similarity clamped to `[-1, 1]`. A zero vector has cosine 0 with
/// everything, so it never registers as conflicting.
pub fn cosine(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let ab = dot(a, b)?;
    let aa = dot_slices(&a.0, &a.0);
    let bb = dot_slices(&b.0, &b.0);
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    let denom = (aa * bb).sqrt();
    let denom = if denom.is_finite() && denom > 0.0 {
        denom
    } else {
        aa.sqrt() * bb.sqrt()
    };
    Ok((ab / denom).clamp(-1.0, 1.0))
}
