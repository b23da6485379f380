//! Flat parameter-space vectors.
//!
//! A [`GradVector`] is a flattened view over all named parameters of a model,
//! used for gradients, Fisher diagonals, and parameter deltas. The
//! [`IndexMap`] records where each named parameter lives in the flat vector;
//! it is shared (via `Arc`) between the vector and the `Params` it was built
//! from, so mixing vectors from different models is a checked error.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Ordered (name, offset, length) table covering a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    entries: Vec<(String, usize, usize)>,
    total_len: usize,
}

impl IndexMap {
    /// Build from (name, length) pairs; offsets are assigned contiguously.
    pub fn from_sizes(sizes: &[(String, usize)]) -> Self {
        let mut entries = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for (name, len) in sizes {
            entries.push((name.clone(), offset, *len));
            offset += len;
        }
        IndexMap { entries, total_len: offset }
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn entries(&self) -> &[(String, usize, usize)] {
        &self.entries
    }

    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, off, len)| (*off, *len))
    }
}

/// Flat f32 vector over parameter space, tagged with its index map.
#[derive(Debug, Clone)]
pub struct GradVector {
    values: Vec<f32>,
    index_map: Arc<IndexMap>,
}

impl GradVector {
    pub fn new(values: Vec<f32>, index_map: Arc<IndexMap>) -> Result<Self> {
        if values.len() != index_map.total_len() {
            return Err(Error::shape(
                "GradVector::new",
                format!("{} values vs index map total {}", values.len(), index_map.total_len()),
            ));
        }
        Ok(GradVector { values, index_map })
    }

    pub fn zeros(index_map: Arc<IndexMap>) -> Self {
        GradVector { values: vec![0.0; index_map.total_len()], index_map }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn index_map(&self) -> &Arc<IndexMap> {
        &self.index_map
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f32]> {
        let (off, len) = self.index_map.span(name)?;
        Some(&self.values[off..off + len])
    }

    fn check_same_map(&self, other: &GradVector, op: &'static str) -> Result<()> {
        if !Arc::ptr_eq(&self.index_map, &other.index_map)
            && *self.index_map != *other.index_map
        {
            return Err(Error::shape(op, "index maps differ".to_string()));
        }
        Ok(())
    }

    /// Inner product, accumulated in f64.
    pub fn dot(&self, other: &GradVector) -> Result<f64> {
        self.check_same_map(other, "GradVector::dot")?;
        Ok(dot_f64(&self.values, &other.values))
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        dot_f64(&self.values, &self.values).sqrt()
    }

    /// self += scale * other. A zero scale is an exact no-op.
    pub fn add_scaled(&mut self, scale: f32, other: &GradVector) -> Result<()> {
        self.check_same_map(other, "GradVector::add_scaled")?;
        if scale == 0.0 {
            return Ok(());
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc
}

/// Cosine similarity and angle in degrees between two gradient vectors.
///
/// The cosine is clamped to [-1, 1] before the arccos so that parallel
/// vectors report an angle of exactly 0 despite rounding.
pub fn cosine_similarity(u: &GradVector, v: &GradVector) -> Result<(f64, f64)> {
    u.check_same_map(v, "cosine_similarity")?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Degenerate("cosine of zero-norm vector".into()));
    }
    let cos = (u.dot(v)? / (nu * nv)).clamp(-1.0, 1.0);
    let angle = cos.acos().to_degrees();
    Ok((cos, angle))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(n: usize) -> Arc<IndexMap> {
        Arc::new(IndexMap::from_sizes(&[("w".to_string(), n)]))
    }

    #[test]
    fn index_map_offsets_contiguous() {
        let m = IndexMap::from_sizes(&[
            ("a".into(), 3),
            ("b".into(), 5),
            ("c".into(), 2),
        ]);
        assert_eq!(m.total_len(), 10);
        assert_eq!(m.span("b"), Some((3, 5)));
        // coverage is total: every coordinate appears exactly once
        let mut seen = vec![0u8; m.total_len()];
        for (_, off, len) in m.entries() {
            for i in *off..*off + *len {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn cosine_self_is_one() {
        let im = map(4);
        let u = GradVector::new(vec![1.0, 2.0, -3.0, 0.5], im).unwrap();
        let (cos, angle) = cosine_similarity(&u, &u).unwrap();
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(angle.abs() < 1e-5);
    }

    #[test]
    fn cosine_orthogonal_basis() {
        let im = map(2);
        let u = GradVector::new(vec![1.0, 0.0], im.clone()).unwrap();
        let v = GradVector::new(vec![0.0, 1.0], im).unwrap();
        let (cos, angle) = cosine_similarity(&u, &v).unwrap();
        assert_eq!(cos, 0.0);
        assert_eq!(angle, 90.0);
    }

    #[test]
    fn cosine_to_angle_matches_reported_operating_point() {
        // cosine 0.426 corresponds to an angle of 64.78 degrees
        let im = map(2);
        let cos_target = 0.426f64;
        let u = GradVector::new(vec![1.0, 0.0], im.clone()).unwrap();
        let v = GradVector::new(
            vec![cos_target as f32, (1.0 - cos_target * cos_target).sqrt() as f32],
            im,
        )
        .unwrap();
        let (cos, angle) = cosine_similarity(&u, &v).unwrap();
        assert!((cos - 0.426).abs() < 1e-6);
        assert!((angle - 64.78).abs() < 0.01);
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let im = map(2);
        let u = GradVector::new(vec![0.0, 0.0], im.clone()).unwrap();
        let v = GradVector::new(vec![1.0, 0.0], im).unwrap();
        assert!(cosine_similarity(&u, &v).is_err());
    }

    #[test]
    fn add_scaled_zero_is_exact_noop() {
        let im = map(3);
        let mut u = GradVector::new(vec![1.0, -2.0, 3.0], im.clone()).unwrap();
        let v = GradVector::new(vec![5.0, 7.0, -9.0], im).unwrap();
        let before = u.values().to_vec();
        u.add_scaled(0.0, &v).unwrap();
        assert_eq!(u.values(), &before[..]);
    }

    #[test]
    fn mismatched_maps_rejected() {
        let a = GradVector::zeros(map(3));
        let b = GradVector::zeros(Arc::new(IndexMap::from_sizes(&[("x".into(), 3)])));
        assert!(a.dot(&b).is_err());
    }
}
