//! Geometric value types shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CloudError {
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("attribute '{name}' has {actual} values for {expected} points")]
    AttributeLength {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("correspondence {index}: {reason}")]
    Correspondence { index: usize, reason: String },
}

/// Storage type of a per-point attribute, mirroring the PLY scalar types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    pub fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

/// A named per-point scalar carried alongside positions (colors, normals,
/// intensities). Values are widened to `f64`; `kind` records the on-disk type.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub kind: ScalarType,
    pub values: Vec<f64>,
}

/// Ordered set of finite 3-D points with optional per-point attributes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
    attributes: Vec<Attribute>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, CloudError> {
        if let Some(index) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(CloudError::NonFinite { index });
        }
        Ok(Self {
            points,
            attributes: Vec::new(),
        })
    }

    pub fn with_attributes(
        points: Vec<Point3>,
        attributes: Vec<Attribute>,
    ) -> Result<Self, CloudError> {
        let mut cloud = Self::new(points)?;
        for a in &attributes {
            if a.values.len() != cloud.len() {
                return Err(CloudError::AttributeLength {
                    name: a.name.clone(),
                    expected: cloud.len(),
                    actual: a.values.len(),
                });
            }
        }
        cloud.attributes = attributes;
        Ok(cloud)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same attributes, new positions (point order and count must match).
    pub fn with_points(&self, points: Vec<Point3>) -> Result<Self, CloudError> {
        Self::with_attributes(points, self.attributes.clone())
    }

    /// Sub-cloud of the given indices, attributes included.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            attributes: self
                .attributes
                .iter()
                .map(|a| Attribute {
                    name: a.name.clone(),
                    kind: a.kind,
                    values: indices.iter().map(|&i| a.values[i]).collect(),
                })
                .collect(),
        }
    }

    /// Axis-aligned bounding box `(min, max)`; `None` for an empty cloud.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        bounds(&self.points)
    }

    /// Length of the bounding-box diagonal (0 for empty clouds).
    pub fn diagonal(&self) -> f64 {
        self.bounds().map_or(0.0, |(lo, hi)| norm(sub(hi, lo)))
    }
}

pub fn bounds(points: &[Point3]) -> Option<(Point3, Point3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(mut lo, mut hi), p| {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
        (lo, hi)
    }))
}

pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

/// Per-point warp type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WarpFieldType {
    /// Pure displacement `x + t`.
    #[serde(rename = "r3")]
    Vector,
    /// Rigid motion `R x + t`.
    #[serde(rename = "se3")]
    Se3,
    /// Similarity `s R x + t`.
    #[serde(rename = "sim3")]
    Sim3,
}

impl WarpFieldType {
    /// Number of per-point motion parameters for this field with `rot`.
    pub fn param_dim(self, rot: RotationRepr) -> usize {
        match self {
            WarpFieldType::Vector => 3,
            WarpFieldType::Se3 => rot.param_count() + 3,
            WarpFieldType::Sim3 => rot.param_count() + 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            WarpFieldType::Vector => "r3",
            WarpFieldType::Se3 => "se3",
            WarpFieldType::Sim3 => "sim3",
        }
    }
}

impl fmt::Display for WarpFieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WarpFieldType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r3" | "vector" => Ok(WarpFieldType::Vector),
            "se3" => Ok(WarpFieldType::Se3),
            "sim3" => Ok(WarpFieldType::Sim3),
            other => Err(format!("unknown warp type '{other}' (r3|se3|sim3)")),
        }
    }
}

/// Rotation parameterization used by the SE(3) and Sim(3) fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RotationRepr {
    #[serde(rename = "axis_angle")]
    AxisAngle,
    #[serde(rename = "euler_xyz")]
    EulerXyz,
    #[serde(rename = "quaternion")]
    Quaternion,
    #[serde(rename = "6d")]
    SixD,
}

impl RotationRepr {
    pub const ALL: [RotationRepr; 4] = [
        RotationRepr::AxisAngle,
        RotationRepr::EulerXyz,
        RotationRepr::Quaternion,
        RotationRepr::SixD,
    ];

    pub fn param_count(self) -> usize {
        match self {
            RotationRepr::AxisAngle | RotationRepr::EulerXyz => 3,
            RotationRepr::Quaternion => 4,
            RotationRepr::SixD => 6,
        }
    }

    /// Parameters that encode the identity rotation.
    pub fn identity_params(self) -> &'static [f64] {
        match self {
            RotationRepr::AxisAngle | RotationRepr::EulerXyz => &[0.0, 0.0, 0.0],
            RotationRepr::Quaternion => &[1.0, 0.0, 0.0, 0.0],
            RotationRepr::SixD => &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RotationRepr::AxisAngle => "axis_angle",
            RotationRepr::EulerXyz => "euler_xyz",
            RotationRepr::Quaternion => "quaternion",
            RotationRepr::SixD => "6d",
        }
    }
}

impl fmt::Display for RotationRepr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RotationRepr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "axis_angle" | "axisangle" => Ok(RotationRepr::AxisAngle),
            "euler_xyz" | "euler" => Ok(RotationRepr::EulerXyz),
            "quaternion" | "quat" => Ok(RotationRepr::Quaternion),
            "6d" | "sixd" => Ok(RotationRepr::SixD),
            other => Err(format!(
                "unknown rotation representation '{other}' (axis_angle|euler_xyz|quaternion|6d)"
            )),
        }
    }
}

/// One putative match between a source and a target point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: usize,
    pub target: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks indices against the cloud sizes and confidences against [0, 1].
    pub fn validate(&self, n_source: usize, n_target: usize) -> Result<(), CloudError> {
        for (index, c) in self.pairs.iter().enumerate() {
            let reason = if c.source >= n_source {
                format!("source index {} out of range ({n_source} points)", c.source)
            } else if c.target >= n_target {
                format!("target index {} out of range ({n_target} points)", c.target)
            } else if !(0.0..=1.0).contains(&c.confidence) {
                format!("confidence {} outside [0, 1]", c.confidence)
            } else {
                continue;
            };
            return Err(CloudError::Correspondence { index, reason });
        }
        Ok(())
    }

    /// Drops pairs with confidence below `threshold`.
    pub fn filtered(&self, threshold: f64) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .copied()
                .filter(|c| c.confidence >= threshold)
                .collect(),
        }
    }

    /// Sub-problem view: keeps pairs whose endpoints both survive the
    /// subsampling and re-indexes them into the sampled clouds.
    pub fn restricted(
        &self,
        source_keep: &[usize],
        target_keep: &[usize],
        n1: usize,
        n2: usize,
    ) -> Self {
        let remap = |keep: &[usize], n: usize| {
            let mut map = vec![usize::MAX; n];
            for (new, &old) in keep.iter().enumerate() {
                map[old] = new;
            }
            map
        };
        let (smap, tmap) = (remap(source_keep, n1), remap(target_keep, n2));
        Self {
            pairs: self
                .pairs
                .iter()
                .filter_map(|c| {
                    let (s, t) = (smap[c.source], tmap[c.target]);
                    (s != usize::MAX && t != usize::MAX).then_some(Correspondence {
                        source: s,
                        target: t,
                        confidence: c.confidence,
                    })
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_points() {
        assert_eq!(
            PointCloud::new(vec![[0.0; 3], [1.0, f64::NAN, 0.0]]),
            Err(CloudError::NonFinite { index: 1 })
        );
        assert!(PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn attribute_length_checked() {
        let attr = Attribute {
            name: "red".into(),
            kind: ScalarType::U8,
            values: vec![1.0],
        };
        assert!(PointCloud::with_attributes(vec![[0.0; 3]; 2], vec![attr]).is_err());
    }

    #[test]
    fn param_dims_match_field_types() {
        let aa = RotationRepr::AxisAngle;
        assert_eq!(WarpFieldType::Vector.param_dim(aa), 3);
        assert_eq!(WarpFieldType::Se3.param_dim(aa), 6);
        assert_eq!(WarpFieldType::Sim3.param_dim(aa), 7);
        for r in RotationRepr::ALL {
            assert_eq!(r.identity_params().len(), r.param_count());
            assert_eq!(r.name().parse::<RotationRepr>().unwrap(), r);
        }
    }

    #[test]
    fn correspondence_validation() {
        let set = CorrespondenceSet::new(vec![
            Correspondence {
                source: 0,
                target: 1,
                confidence: 0.5,
            },
            Correspondence {
                source: 3,
                target: 0,
                confidence: 0.5,
            },
        ]);
        assert!(set.validate(4, 2).is_ok());
        assert!(matches!(
            set.validate(3, 2),
            Err(CloudError::Correspondence { index: 1, .. })
        ));
        let bad = CorrespondenceSet::new(vec![Correspondence {
            source: 0,
            target: 0,
            confidence: 1.2,
        }]);
        assert!(bad.validate(1, 1).is_err());
    }

    #[test]
    fn restriction_reindexes() {
        let set = CorrespondenceSet::new(vec![
            Correspondence {
                source: 4,
                target: 1,
                confidence: 1.0,
            },
            Correspondence {
                source: 2,
                target: 0,
                confidence: 1.0,
            },
        ]);
        let r = set.restricted(&[1, 4], &[1, 2], 5, 3);
        assert_eq!(
            r.pairs,
            vec![Correspondence {
                source: 1,
                target: 0,
                confidence: 1.0
            }]
        );
    }
}
