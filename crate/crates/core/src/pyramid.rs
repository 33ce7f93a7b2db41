//! The registration driver: coarse-to-fine optimization of one small network
//! per pyramid level.
//!
//! Level `k` starts from the cached output of levels `1..k-1`, so each
//! gradient iteration evaluates a single network. Once a level stops, its
//! weights are frozen and its output cloud becomes the next cache.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tape, Tensor};
use crate::config::{ConfigError, OptimizerKind, PyramidConfig};
use crate::cost::{self, CostBreakdown, CostError, CostWeights, TargetCloud};
use crate::encoding;
use crate::mlp::{self, MlpLevel, MlpShape};
use crate::normalize::{self, Normalization, NormalizeError};
use crate::types::{
    CloudError, CorrespondenceSet, Point3, PointCloud, RotationRepr, WarpFieldType,
};
use crate::warp;

/// Rows per forward pass when querying a frozen pyramid.
const QUERY_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistrationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("degenerate input: {0}")]
    Degenerate(#[from] NormalizeError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("non-finite {what} at level {level}, iteration {iteration}")]
    NonFinite {
        what: &'static str,
        level: usize,
        iteration: usize,
    },
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Tape(#[from] autodiff::AutodiffError),
}

impl RegistrationError {
    /// True for failures of the optimization itself rather than of its inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, RegistrationError::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, RegistrationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIter,
    CostThreshold,
    Stalled,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::MaxIter => "max_iter",
            StopReason::CostThreshold => "cost_threshold",
            StopReason::Stalled => "stalled",
        }
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Continue,
    Stop(StopReason),
}

/// Early-stop rule for one level. `history` holds the cost of every
/// iteration so far and `iter` is its length.
///
/// Stops when the latest cost is at most the threshold, when `iter` reaches
/// `max_iter`, or when the best cost has not improved by the relative stall
/// tolerance for `stall_window` consecutive iterations.
pub fn check_convergence(history: &[f64], iter: usize, cfg: &PyramidConfig) -> Convergence {
    let Some(&last) = history.last() else {
        return Convergence::Continue;
    };
    if last <= cfg.cost_threshold {
        return Convergence::Stop(StopReason::CostThreshold);
    }
    if iter >= cfg.max_iter {
        return Convergence::Stop(StopReason::MaxIter);
    }
    let mut best = history[0];
    let mut since = 0usize;
    for &c in &history[1..] {
        if c < best - cfg.stall_tolerance * best.abs() {
            since = 0;
        } else {
            since += 1;
        }
        best = best.min(c);
    }
    if since >= cfg.stall_window {
        Convergence::Stop(StopReason::Stalled)
    } else {
        Convergence::Continue
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient for parameter {index}")]
pub struct NonFiniteGradient {
    pub index: usize,
}

/// First-order optimizer over a list of parameter tensors.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u32,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    /// Adam with decay rates 0.9 / 0.999 and epsilon 1e-8.
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(lr),
            OptimizerKind::Sgd => Self::sgd(lr),
        }
    }

    /// One update. All gradients are checked before any parameter changes.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
    ) -> std::result::Result<(), NonFiniteGradient> {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NonFiniteGradient { index });
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= *lr * d;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                if m.is_empty() {
                    *m = grads
                        .iter()
                        .map(|g| Tensor::zeros(g.rows(), g.cols()))
                        .collect();
                    *v = m.clone();
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        mi[j] = *beta1 * mi[j] + (1.0 - *beta1) * d;
                        vi[j] = *beta2 * vi[j] + (1.0 - *beta2) * d * d;
                        let mh = mi[j] / c1;
                        let vh = vi[j] / c2;
                        *w -= *lr * mh / (vh.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Frozen networks of a finished registration. Queries run in input units.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationPyramid {
    pub levels: Vec<MlpLevel>,
    pub k0: i32,
    pub warp_type: WarpFieldType,
    pub rot_repr: RotationRepr,
    pub normalization: Normalization,
}

/// Output of a single level on a plain batch: `(points, alpha)`.
fn level_forward(
    level: &MlpLevel,
    k: usize,
    k0: i32,
    warp_type: WarpFieldType,
    rot_repr: RotationRepr,
    points: &[Point3],
) -> autodiff::Result<(Vec<Point3>, Vec<f64>)> {
    let mut out = Vec::with_capacity(points.len());
    let mut alpha = Vec::with_capacity(points.len());
    for chunk in points.chunks(QUERY_CHUNK) {
        let mut t = Tape::new();
        let x = t.constant(cost::points_tensor(chunk))?;
        let bound = level.bind(&mut t, false)?;
        let enc = encoding::encode_batch(&mut t, x, k, k0)?;
        let (xi, a) = level.forward(&mut t, &bound, enc)?;
        let y = warp::compose_level(&mut t, x, xi, a, warp_type, rot_repr)?;
        out.extend(cost::tensor_points(t.value(y)));
        alpha.extend_from_slice(t.value(a).data());
    }
    Ok((out, alpha))
}

impl DeformationPyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Positions after each level, in input units; entry `k-1` is the
    /// output of levels `1..=k`.
    pub fn query_levels(&self, points: &[Point3]) -> Result<Vec<Vec<Point3>>> {
        PointCloud::new(points.to_vec())?;
        let mut cur = self.normalization.apply_all(points);
        let mut outputs = Vec::with_capacity(self.levels.len());
        for (i, level) in self.levels.iter().enumerate() {
            cur = level_forward(level, i + 1, self.k0, self.warp_type, self.rot_repr, &cur)?.0;
            outputs.push(self.normalization.invert_all(&cur));
        }
        Ok(outputs)
    }

    /// Final warped positions of arbitrary points.
    pub fn query(&self, points: &[Point3]) -> Result<Vec<Point3>> {
        if self.levels.is_empty() {
            return Ok(points.to_vec());
        }
        Ok(self.query_levels(points)?.pop().unwrap_or_default())
    }
}

/// Record of one optimized level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    pub level: usize,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    pub final_cost: CostBreakdown,
    pub stop_reason: StopReason,
    pub alpha_mean: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Wall time spent optimizing this level, in seconds.
    pub seconds: f64,
    /// Source positions after levels `1..=level`, in input units.
    pub warped: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Warped source: same count, order and attributes as the input.
    pub warped: PointCloud,
    pub levels: Vec<LevelTrace>,
    pub total_iterations: usize,
    /// Seconds from start to finish, including the final query.
    pub wall_time: f64,
    pub pyramid: DeformationPyramid,
}

impl RegistrationResult {
    /// Per-point displacement `warped - source` in input units.
    pub fn flow(&self, source: &PointCloud) -> Vec<Point3> {
        self.warped
            .points()
            .iter()
            .zip(source.points())
            .map(|(&w, &s)| crate::types::sub(w, s))
            .collect()
    }
}

/// Seed of level `k`'s weight initialization.
pub fn level_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Sorted random subset of `min(n, keep)` indices.
fn subsample_indices(n: usize, keep: usize, seed: u64) -> Vec<usize> {
    if keep >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Registers `source` onto `target`; `matches` adds the correspondence term.
pub fn register(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &PyramidConfig,
    matches: Option<&CorrespondenceSet>,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    let cfg = cfg.clone().validate()?;
    let fitted = normalize::fit_normalization(source, target)?;
    let normalization = if cfg.normalize {
        fitted
    } else {
        Normalization::identity()
    };

    let matches = match matches {
        Some(m) => {
            m.validate(source.len(), target.len())?;
            Some(m.filtered(cfg.corr_conf_threshold))
        }
        None => None,
    };

    let (src_idx, tgt_idx) = match cfg.subsample {
        Some(keep) => (
            subsample_indices(source.len(), keep, level_seed(cfg.seed, 1 << 20)),
            subsample_indices(target.len(), keep, level_seed(cfg.seed, 1 << 21)),
        ),
        None => ((0..source.len()).collect(), (0..target.len()).collect()),
    };
    let matches = match (&matches, cfg.subsample) {
        (Some(m), Some(_)) => Some(m.restricted(&src_idx, &tgt_idx, source.len(), target.len())),
        _ => matches,
    };
    let matches = matches.filter(|m| !m.is_empty());

    let opt_source: Vec<Point3> = src_idx
        .iter()
        .map(|&i| normalization.apply(source.points()[i]))
        .collect();
    let opt_target: Vec<Point3> = tgt_idx
        .iter()
        .map(|&i| normalization.apply(target.points()[i]))
        .collect();
    let target_cloud = TargetCloud::new(&opt_target)?;
    let weights = CostWeights {
        lambda_cd: cfg.lambda_cd,
        lambda_cor: cfg.lambda_cor,
        lambda_reg: cfg.lambda_reg,
        norm: cfg.norm,
    };
    let shape = MlpShape::new(
        cfg.mlp_width,
        cfg.mlp_depth,
        cfg.warp_type.param_dim(cfg.rot_repr),
    );

    let mut cache = cost::points_tensor(&opt_source);
    let mut frozen = Vec::with_capacity(cfg.levels);
    let mut traces = Vec::with_capacity(cfg.levels);

    for k in 1..=cfg.levels {
        let level_start = Instant::now();
        let mut net = mlp::init_mlp(
            shape,
            level_seed(cfg.seed, k),
            cfg.init,
            cfg.activation,
            cfg.output_scale,
        );
        let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        let mut history = Vec::new();
        let mut best: Option<(f64, mlp::MlpLevel, CostBreakdown, Tensor, Tensor)> = None;
        let stop_reason = loop {
            let iteration = history.len() + 1;
            let mut t = Tape::new();
            let x = t.constant(cache.clone())?;
            let bound = net.bind(&mut t, true)?;
            let enc = encoding::encode_batch(&mut t, x, k, cfg.k0)?;
            let (xi, a) = net.forward(&mut t, &bound, enc)?;
            let y = warp::compose_level(&mut t, x, xi, a, cfg.warp_type, cfg.rot_repr)?;
            let (total, breakdown) =
                cost::total_cost(&mut t, y, &target_cloud, a, matches.as_ref(), &weights)?;
            if !breakdown.e_total.is_finite() || !t.value(y).is_finite() {
                return Err(RegistrationError::NonFinite {
                    what: "cost",
                    level: k,
                    iteration,
                });
            }
            history.push(breakdown.e_total);
            if best.as_ref().is_none_or(|b| breakdown.e_total < b.0) {
                best = Some((
                    breakdown.e_total,
                    net.clone(),
                    breakdown,
                    t.value(y).clone(),
                    t.value(a).clone(),
                ));
            }
            if let Convergence::Stop(reason) = check_convergence(&history, iteration, &cfg) {
                break reason;
            }
            let grads = t.backward(total)?;
            let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
            optimizer
                .step(&mut net.parameters_mut(), &grads)
                .map_err(|_| RegistrationError::NonFinite {
                    what: "gradient",
                    level: k,
                    iteration,
                })?;
        };
        // The level keeps its lowest-cost iterate.
        let (_, net, final_cost, level_out, alpha) = best.expect("at least one iteration");
        let a = alpha.data();
        traces.push(LevelTrace {
            level: k,
            iterations: history.len(),
            alpha_mean: a.iter().sum::<f64>() / a.len() as f64,
            alpha_min: a.iter().copied().fold(f64::INFINITY, f64::min),
            alpha_max: a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            cost_history: history,
            final_cost,
            stop_reason,
            seconds: level_start.elapsed().as_secs_f64(),
            warped: Vec::new(),
        });
        cache = level_out;
        frozen.push(net);
    }

    let pyramid = DeformationPyramid {
        levels: frozen,
        k0: cfg.k0,
        warp_type: cfg.warp_type,
        rot_repr: cfg.rot_repr,
        normalization,
    };
    let per_level = pyramid.query_levels(source.points())?;
    for (trace, pts) in traces.iter_mut().zip(per_level) {
        trace.warped = pts;
    }
    let final_points = traces
        .last()
        .map_or_else(|| source.points().to_vec(), |t| t.warped.clone());
    let warped = source.with_points(final_points)?;
    Ok(RegistrationResult {
        warped,
        total_iterations: traces.iter().map(|t| t.iterations).sum(),
        levels: traces,
        wall_time: start.elapsed().as_secs_f64(),
        pyramid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PyramidConfig {
        PyramidConfig::default()
    }

    #[test]
    fn convergence_examples() {
        let c = cfg();
        let flat = vec![1.0; 10];
        assert_eq!(
            check_convergence(&flat, 500, &c),
            Convergence::Stop(StopReason::MaxIter)
        );
        assert_eq!(
            check_convergence(&[1.0, 5e-5], 2, &c),
            Convergence::Stop(StopReason::CostThreshold)
        );
        assert_eq!(check_convergence(&[1.0, 0.5], 2, &c), Convergence::Continue);
        assert_eq!(check_convergence(&[], 0, &c), Convergence::Continue);
    }

    #[test]
    fn stall_window() {
        let c = cfg();
        // 15 consecutive improvements, each below the relative tolerance.
        let mut h = vec![1.0];
        for i in 1..=15 {
            h.push(1.0 - 5e-5 * i as f64 / 15.0 * 1.0);
            let expect = if i < 15 {
                Convergence::Continue
            } else {
                Convergence::Stop(StopReason::Stalled)
            };
            assert_eq!(check_convergence(&h, h.len(), &c), expect, "after {i}");
        }
        // A real improvement resets the window.
        h.push(0.5);
        assert_eq!(check_convergence(&h, h.len(), &c), Convergence::Continue);
    }

    #[test]
    fn sgd_example() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut [&mut w], &[Tensor::scalar(2.0)]).unwrap();
        assert!((w.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for mut opt in [Optimizer::sgd(0.1), Optimizer::adam(0.1)] {
            let mut w = Tensor::new(1, 3, vec![1.0, -2.0, 3.0]);
            for _ in 0..5 {
                opt.step(&mut [&mut w], &[Tensor::zeros(1, 3)]).unwrap();
            }
            assert_eq!(w.data(), &[1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut w = Tensor::new(1, 2, vec![1.0, -0.5]);
        let mut opt = Optimizer::adam(0.01);
        for _ in 0..2000 {
            let g = Tensor::new(1, 2, w.data().iter().map(|x| 2.0 * x).collect());
            opt.step(&mut [&mut w], &[g]).unwrap();
        }
        assert!(w.data().iter().all(|x| x.abs() < 1e-6), "{:?}", w.data());
    }

    #[test]
    fn non_finite_gradient_rejected_before_update() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut opt = Optimizer::adam(0.1);
        let err = opt
            .step(
                &mut [&mut a, &mut b],
                &[Tensor::scalar(1.0), Tensor::scalar(f64::NAN)],
            )
            .unwrap_err();
        assert_eq!(err.index, 1);
        assert_eq!((a.item(), b.item()), (1.0, 1.0));
    }

    #[test]
    fn subsample_is_sorted_and_deterministic() {
        let a = subsample_indices(10_000, 2048, 3);
        assert_eq!(a.len(), 2048);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, subsample_indices(10_000, 2048, 3));
        assert_eq!(subsample_indices(10, 2048, 3), (0..10).collect::<Vec<_>>());
    }
}
