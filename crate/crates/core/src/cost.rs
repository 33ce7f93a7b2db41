//! Alignment costs: symmetric chamfer distance, correspondence distance,
//! deformability regularization and their weighted total.
//!
//! Nearest-neighbor assignments are recomputed on every call and enter the
//! tape as constant row indices, so gradients flow through the distances only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Tensor, Var};
use crate::config::NormKind;
use crate::nn::{self, NnError, NnIndex};
use crate::types::{CloudError, CorrespondenceSet, Point3};

/// Upper clamp on deformability inside the regularizer.
pub const ALPHA_CLAMP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CostError {
    #[error("{0} cloud is empty")]
    EmptyCloud(&'static str),
    #[error("correspondence set is empty")]
    NoMatches,
    #[error(transparent)]
    Correspondence(#[from] CloudError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tape(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, CostError>;

/// Values of the individual terms of one cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub e_cd: f64,
    pub e_cor: f64,
    pub e_reg: f64,
    pub e_total: f64,
    pub lambda_cd: f64,
    pub lambda_cor: f64,
    pub lambda_reg: f64,
}

/// Term weights; `lambda_cor` is ignored without correspondences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub lambda_cd: f64,
    pub lambda_cor: f64,
    pub lambda_reg: f64,
    pub norm: NormKind,
}

/// `rho(v)`: sum of absolute values (L1) or Euclidean length (L2).
pub fn rho(v: Point3, norm: NormKind) -> f64 {
    match norm {
        NormKind::L1 => v[0].abs() + v[1].abs() + v[2].abs(),
        NormKind::L2 => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(),
    }
}

/// The fixed side of the registration with its search index.
#[derive(Debug, Clone)]
pub struct TargetCloud {
    index: NnIndex,
    rows: Tensor,
}

impl TargetCloud {
    pub fn new(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(CostError::EmptyCloud("target"));
        }
        Ok(Self {
            index: NnIndex::build(points),
            rows: points_tensor(points),
        })
    }

    pub fn points(&self) -> &[Point3] {
        self.index.points()
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn index(&self) -> &NnIndex {
        &self.index
    }
}

pub fn points_tensor(points: &[Point3]) -> Tensor {
    Tensor::new(points.len(), 3, points.iter().flatten().copied().collect())
}

pub fn tensor_points(t: &Tensor) -> Vec<Point3> {
    assert_eq!(t.cols(), 3, "point tensors are n x 3");
    t.data()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Row-wise `rho` of an n x 3 difference batch, averaged over rows.
fn mean_rho(t: &mut Tape, diff: Var, norm: NormKind) -> autodiff::Result<Var> {
    match norm {
        NormKind::L1 => {
            let a = t.abs(diff)?;
            let m = t.mean(a)?;
            t.mul_scalar(m, 3.0)
        }
        NormKind::L2 => {
            let sq = t.mul(diff, diff)?;
            let ones = t.constant(Tensor::filled(3, 1, 1.0))?;
            let row = t.matmul(sq, ones)?;
            let len = t.sqrt(row)?;
            t.mean(len)
        }
    }
}

/// Symmetric chamfer cost between the n x 3 batch `warped` and `target`.
pub fn chamfer_cost(
    t: &mut Tape,
    warped: Var,
    target: &TargetCloud,
    norm: NormKind,
) -> Result<Var> {
    let source_points = tensor_points(t.value(warped));
    if source_points.is_empty() {
        return Err(CostError::EmptyCloud("source"));
    }
    let target_rows = t.constant(target.rows.clone())?;

    let (to_target, _) = nn::nearest_neighbors(&source_points, &target.index)?;
    let matched = t.gather(target_rows, to_target)?;
    let d = t.sub(warped, matched)?;
    let forward = mean_rho(t, d, norm)?;

    let source_index = NnIndex::build(&source_points);
    let (to_source, _) = nn::nearest_neighbors(target.points(), &source_index)?;
    let matched = t.gather(warped, to_source)?;
    let d = t.sub(matched, target_rows)?;
    let backward = mean_rho(t, d, norm)?;

    Ok(t.add(forward, backward)?)
}

/// Mean `rho(x_u - y_v)` over the matches.
pub fn correspondence_cost(
    t: &mut Tape,
    warped: Var,
    target: &TargetCloud,
    matches: &CorrespondenceSet,
    norm: NormKind,
) -> Result<Var> {
    if matches.is_empty() {
        return Err(CostError::NoMatches);
    }
    matches.validate(t.value(warped).rows(), target.len())?;
    let target_rows = t.constant(target.rows.clone())?;
    let xs = t.gather(warped, matches.pairs.iter().map(|c| c.source).collect())?;
    let ys = t.gather(
        target_rows,
        matches.pairs.iter().map(|c| c.target).collect(),
    )?;
    let d = t.sub(xs, ys)?;
    Ok(mean_rho(t, d, norm)?)
}

/// Mean of `-ln(1 - clamp(alpha, 0, 1 - 1e-6))`.
pub fn deformability_reg(t: &mut Tape, alpha: Var) -> Result<Var> {
    let a = t.clamp(alpha, 0.0, ALPHA_CLAMP)?;
    let na = t.neg(a)?;
    let one_minus = t.add_scalar(na, 1.0)?;
    let l = t.log(one_minus)?;
    let nl = t.neg(l)?;
    Ok(t.mean(nl)?)
}

/// Weighted total cost; returns the tape node and the value breakdown.
pub fn total_cost(
    t: &mut Tape,
    warped: Var,
    target: &TargetCloud,
    alpha: Var,
    matches: Option<&CorrespondenceSet>,
    weights: &CostWeights,
) -> Result<(Var, CostBreakdown)> {
    let cd = chamfer_cost(t, warped, target, weights.norm)?;
    let reg = deformability_reg(t, alpha)?;
    let cd_w = t.mul_scalar(cd, weights.lambda_cd)?;
    let reg_w = t.mul_scalar(reg, weights.lambda_reg)?;
    let mut total = t.add(cd_w, reg_w)?;
    let (e_cor, lambda_cor) = match matches {
        Some(m) if !m.is_empty() => {
            let cor = correspondence_cost(t, warped, target, m, weights.norm)?;
            let cor_w = t.mul_scalar(cor, weights.lambda_cor)?;
            total = t.add(total, cor_w)?;
            (t.value(cor).item(), weights.lambda_cor)
        }
        _ => (0.0, 0.0),
    };
    let breakdown = CostBreakdown {
        e_cd: t.value(cd).item(),
        e_cor,
        e_reg: t.value(reg).item(),
        e_total: t.value(total).item(),
        lambda_cd: weights.lambda_cd,
        lambda_cor,
        lambda_reg: weights.lambda_reg,
    };
    Ok((total, breakdown))
}

/// Plain (tape-free) symmetric chamfer distance.
pub fn chamfer_distance(a: &[Point3], b: &[Point3], norm: NormKind) -> Result<f64> {
    if a.is_empty() {
        return Err(CostError::EmptyCloud("first"));
    }
    if b.is_empty() {
        return Err(CostError::EmptyCloud("second"));
    }
    let one_way = |from: &[Point3], to: &[Point3]| -> Result<f64> {
        let index = NnIndex::build(to);
        let (idx, _) = nn::nearest_neighbors(from, &index)?;
        let sum: f64 = from
            .iter()
            .zip(idx)
            .map(|(&p, j)| rho(crate::types::sub(p, to[j]), norm))
            .sum();
        Ok(sum / from.len() as f64)
    };
    Ok(one_way(a, b)? + one_way(b, a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, Tensor};
    use crate::types::Correspondence;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cost_of(source: &[Point3], target: &[Point3], norm: NormKind) -> f64 {
        let mut t = Tape::new();
        let w = t.constant(points_tensor(source)).unwrap();
        let tc = TargetCloud::new(target).unwrap();
        let c = chamfer_cost(&mut t, w, &tc, norm).unwrap();
        t.value(c).item()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![[0.3, 0.1, -0.2], [1.0, 2.0, 3.0]];
        assert_eq!(cost_of(&a, &a, NormKind::L1), 0.0);
        assert_eq!(cost_of(&a, &a, NormKind::L2), 0.0);
        assert_eq!(cost_of(&[[0.0; 3]], &[[1.0, 0.0, 0.0]], NormKind::L2), 2.0);
        assert_eq!(cost_of(&[[0.0; 3]], &[[1.0, 1.0, 0.0]], NormKind::L1), 4.0);
        let l2 = cost_of(&[[0.0; 3]], &[[1.0, 1.0, 0.0]], NormKind::L2);
        assert!((l2 - 2.0 * 2f64.sqrt()).abs() < 1e-15);
        assert!((l2 - 2.8284).abs() < 1e-4);
    }

    #[test]
    fn empty_clouds_rejected() {
        assert!(matches!(
            TargetCloud::new(&[]),
            Err(CostError::EmptyCloud("target"))
        ));
        assert!(chamfer_distance(&[], &[[0.0; 3]], NormKind::L1).is_err());
    }

    #[test]
    fn correspondence_examples() {
        let target = TargetCloud::new(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let eval = |src: Vec<Point3>, pairs: Vec<(usize, usize)>| {
            let mut t = Tape::new();
            let w = t.constant(points_tensor(&src)).unwrap();
            let m = CorrespondenceSet::new(
                pairs
                    .into_iter()
                    .map(|(s, v)| Correspondence {
                        source: s,
                        target: v,
                        confidence: 1.0,
                    })
                    .collect(),
            );
            correspondence_cost(&mut t, w, &target, &m, NormKind::L2).map(|c| t.value(c).item())
        };
        assert_eq!(
            eval(vec![[1.0; 3], [0.0; 3]], vec![(0, 1), (1, 0)]).unwrap(),
            0.0
        );
        assert_eq!(eval(vec![[0.0, 3.0, 4.0]], vec![(0, 0)]).unwrap(), 5.0);
        assert_eq!(
            eval(vec![[1.0, 0.0, 0.0], [1.0, 1.0, 4.0]], vec![(0, 0), (1, 1)]).unwrap(),
            2.0
        );
        assert!(matches!(
            eval(vec![[0.0; 3]], vec![(0, 2)]),
            Err(CostError::Correspondence(_))
        ));
        assert!(matches!(
            eval(vec![[0.0; 3]], vec![]),
            Err(CostError::NoMatches)
        ));
    }

    fn reg_of(alpha: f64, n: usize) -> f64 {
        let mut t = Tape::new();
        let a = t.constant(Tensor::filled(n, 1, alpha)).unwrap();
        let r = deformability_reg(&mut t, a).unwrap();
        t.value(r).item()
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(reg_of(0.0, 4), 0.0);
        assert!((reg_of(0.5, 4) - 2f64.ln()).abs() < 1e-15);
        let top = reg_of(1.0, 4);
        assert!(top.is_finite());
        assert!((top - 13.8155).abs() < 1e-4);
    }

    fn weights(cd: f64, cor: f64, reg: f64) -> CostWeights {
        CostWeights {
            lambda_cd: cd,
            lambda_cor: cor,
            lambda_reg: reg,
            norm: NormKind::L1,
        }
    }

    #[test]
    fn total_cost_examples() {
        let pts = vec![[0.1, 0.2, 0.3], [0.5, -0.4, 0.0]];
        let target = TargetCloud::new(&pts).unwrap();
        let mut t = Tape::new();
        let w = t.constant(points_tensor(&pts)).unwrap();
        let a = t.constant(Tensor::filled(2, 1, 0.5)).unwrap();
        let (_, b) = total_cost(&mut t, w, &target, a, None, &weights(1.0, 1.0, 0.1)).unwrap();
        assert!((b.e_total - 0.1 * 2f64.ln()).abs() < 1e-15);
        assert!((b.e_total - 0.0693).abs() < 1e-4);
        assert_eq!(b.e_cor, 0.0);
        let (_, z) = total_cost(&mut t, w, &target, a, None, &weights(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(z.e_total, 0.0);
    }

    /// Straight-loop recomputation of every term.
    #[test]
    fn total_cost_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let src = random_cloud(&mut rng, 128);
        let tgt = random_cloud(&mut rng, 128);
        let alpha: Vec<f64> = (0..128).map(|_| rng.gen_range(0.01..0.99)).collect();
        let matches = CorrespondenceSet::new(
            (0..20)
                .map(|_| Correspondence {
                    source: rng.gen_range(0..128),
                    target: rng.gen_range(0..128),
                    confidence: 1.0,
                })
                .collect(),
        );
        let w = CostWeights {
            lambda_cd: 0.7,
            lambda_cor: 1.3,
            lambda_reg: 0.2,
            norm: NormKind::L2,
        };

        let nearest = |p: Point3, set: &[Point3]| {
            set.iter()
                .map(|&q| rho(crate::types::sub(p, q), NormKind::L2))
                .fold(f64::INFINITY, f64::min)
        };
        let e_cd = src.iter().map(|&p| nearest(p, &tgt)).sum::<f64>() / 128.0
            + tgt.iter().map(|&q| nearest(q, &src)).sum::<f64>() / 128.0;
        let e_cor = matches
            .pairs
            .iter()
            .map(|c| {
                rho(
                    crate::types::sub(src[c.source], tgt[c.target]),
                    NormKind::L2,
                )
            })
            .sum::<f64>()
            / 20.0;
        let e_reg = alpha.iter().map(|a| -(1.0 - a).ln()).sum::<f64>() / 128.0;
        let expected = 0.7 * e_cd + 1.3 * e_cor + 0.2 * e_reg;

        let target = TargetCloud::new(&tgt).unwrap();
        let mut t = Tape::new();
        let wv = t.constant(points_tensor(&src)).unwrap();
        let av = t.constant(Tensor::column(alpha)).unwrap();
        let (_, b) = total_cost(&mut t, wv, &target, av, Some(&matches), &w).unwrap();
        assert!((b.e_cd - e_cd).abs() < 1e-12);
        assert!((b.e_cor - e_cor).abs() < 1e-12);
        assert!((b.e_reg - e_reg).abs() < 1e-12);
        assert!((b.e_total - expected).abs() < 1e-12);
        assert!(
            (b.e_total - (b.lambda_cd * b.e_cd + b.lambda_cor * b.e_cor + b.lambda_reg * b.e_reg))
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn total_cost_gradient_wrt_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let src = random_cloud(&mut rng, 40);
        let tgt = random_cloud(&mut rng, 50);
        let target = TargetCloud::new(&tgt).unwrap();
        let alpha = Tensor::column((0..40).map(|_| rng.gen_range(0.1..0.9)).collect());
        let matches = CorrespondenceSet::new(
            (0..10)
                .map(|i| Correspondence {
                    source: i,
                    target: i + 3,
                    confidence: 1.0,
                })
                .collect(),
        );
        for norm in [NormKind::L1, NormKind::L2] {
            let w = CostWeights {
                lambda_cd: 1.0,
                lambda_cor: 0.5,
                lambda_reg: 0.1,
                norm,
            };
            let report = gradient_check(
                |t, v| {
                    total_cost(t, v[0], &target, v[1], Some(&matches), &w)
                        .map(|(c, _)| c)
                        .map_err(|e| match e {
                            CostError::Tape(e) => e,
                            other => panic!("{other}"),
                        })
                },
                &[points_tensor(&src), alpha.clone()],
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{norm}: {:?}", report.worst);
        }
    }

    #[test]
    fn plain_chamfer_matches_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_cloud(&mut rng, 100);
        let b = random_cloud(&mut rng, 70);
        for norm in [NormKind::L1, NormKind::L2] {
            let plain = chamfer_distance(&a, &b, norm).unwrap();
            assert!((plain - cost_of(&a, &b, norm)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn chamfer_properties(
            a in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..30),
            b in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..30),
        ) {
            for norm in [NormKind::L1, NormKind::L2] {
                prop_assert_eq!(chamfer_distance(&a, &a, norm).unwrap(), 0.0);
                let ab = chamfer_distance(&a, &b, norm).unwrap();
                let ba = chamfer_distance(&b, &a, norm).unwrap();
                prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
            }
            let l1 = chamfer_distance(&a, &b, NormKind::L1).unwrap();
            let l2 = chamfer_distance(&a, &b, NormKind::L2).unwrap();
            prop_assert!(l1 >= l2 - 1e-12);
        }
    }
}
