//! Joint coordinate normalization of a source/target pair.
//!
//! Both clouds are mapped by the same similarity so that their joint bounding
//! box is centered at the origin with unit diagonal. The encoding frequencies
//! are absolute, so this fixes the coordinate convention they act on.

use serde::{Deserialize, Serialize};

use crate::types::{self, CloudError, Point3, PointCloud};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NormalizeError {
    #[error("{0} cloud is empty")]
    Empty(&'static str),
    #[error("degenerate bounding box (zero diagonal)")]
    Degenerate,
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

/// `normalized = (p - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub center: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    /// Translation applied before scaling.
    pub fn translation(&self) -> Point3 {
        types::scale(self.center, -1.0)
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        types::scale(types::sub(p, self.center), self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        types::add(types::scale(p, 1.0 / self.scale), self.center)
    }

    /// Maps a displacement (not a position) back to input units.
    pub fn invert_vector(&self, v: Point3) -> Point3 {
        types::scale(v, 1.0 / self.scale)
    }

    pub fn apply_all(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|&p| self.apply(p)).collect()
    }

    pub fn invert_all(&self, points: &[Point3]) -> Vec<Point3> {
        points.iter().map(|&p| self.invert(p)).collect()
    }
}

/// Fits the joint normalization of `source` and `target`.
pub fn fit_normalization(
    source: &PointCloud,
    target: &PointCloud,
) -> Result<Normalization, NormalizeError> {
    let (slo, shi) = source.bounds().ok_or(NormalizeError::Empty("source"))?;
    let (tlo, thi) = target.bounds().ok_or(NormalizeError::Empty("target"))?;
    let mut lo = slo;
    let mut hi = shi;
    for i in 0..3 {
        lo[i] = lo[i].min(tlo[i]);
        hi[i] = hi[i].max(thi[i]);
    }
    let diagonal = types::norm(types::sub(hi, lo));
    if !(diagonal > 0.0) || !diagonal.is_finite() {
        return Err(NormalizeError::Degenerate);
    }
    Ok(Normalization {
        center: types::scale(types::add(lo, hi), 0.5),
        scale: 1.0 / diagonal,
    })
}

/// Normalized copies of both clouds plus the record that undoes the mapping.
pub fn normalize_clouds(
    source: &PointCloud,
    target: &PointCloud,
) -> Result<(PointCloud, PointCloud, Normalization), NormalizeError> {
    let record = fit_normalization(source, target)?;
    let s = source.with_points(record.apply_all(source.points()))?;
    let t = target.with_points(record.apply_all(target.points()))?;
    Ok((s, t, record))
}
