//! Per-level coordinate network: encoded coordinate to motion increment and
//! deformability.
//!
//! A shared trunk of `depth` dense layers feeds two linear heads. The motion
//! head output is multiplied by `output_scale` so a freshly initialized level
//! starts close to the identity warp; the deformability head goes through a
//! sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Tape, Tensor, Var};
use crate::config::{Activation, InitScheme};
use crate::encoding::ENCODED_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub width: usize,
    pub depth: usize,
    pub xi_dim: usize,
}

impl MlpShape {
    pub fn new(width: usize, depth: usize, xi_dim: usize) -> Self {
        Self {
            input: ENCODED_DIM,
            width,
            depth,
            xi_dim,
        }
    }
}

/// Dense layer `y = x W + b`, `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn init(fan_in: usize, fan_out: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Self {
        let bound = match scheme {
            InitScheme::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
            InitScheme::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            InitScheme::Zeros => 0.0,
        };
        let data = (0..fan_in * fan_out)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            weight: Tensor::new(fan_in, fan_out, data),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpLevel {
    pub trunk: Vec<Dense>,
    pub xi_head: Dense,
    pub alpha_head: Dense,
    pub output_scale: f64,
    pub activation: Activation,
}

/// Tape handles of one network's parameters.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    trunk: Vec<(Var, Var)>,
    xi_head: (Var, Var),
    alpha_head: (Var, Var),
}

impl BoundMlp {
    /// Rebuilds handles from the flat order of [`BoundMlp::vars`].
    pub fn from_vars(vars: &[Var]) -> Self {
        assert!(
            vars.len() >= 6 && vars.len().is_multiple_of(2),
            "unexpected parameter count"
        );
        let pairs: Vec<(Var, Var)> = vars.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let n = pairs.len();
        Self {
            trunk: pairs[..n - 2].to_vec(),
            xi_head: pairs[n - 2],
            alpha_head: pairs[n - 1],
        }
    }

    /// Handles in the same order as [`MlpLevel::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain([&self.xi_head, &self.alpha_head])
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DumpError {
    #[error("bad magic, not a weight dump")]
    BadMagic,
    #[error("unsupported dump version {0}")]
    Version(u32),
    #[error("weight dump truncated")]
    Truncated,
    #[error("weight dump is inconsistent: {0}")]
    Inconsistent(String),
}

pub const DUMP_MAGIC: &[u8; 8] = b"NDPLEVEL";
pub const DUMP_VERSION: u32 = 1;

/// Builds a level network with weights drawn from `seed`; biases start at 0.
pub fn init_mlp(
    shape: MlpShape,
    seed: u64,
    scheme: InitScheme,
    activation: Activation,
    output_scale: f64,
) -> MlpLevel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trunk = Vec::with_capacity(shape.depth);
    let mut fan_in = shape.input;
    for _ in 0..shape.depth {
        trunk.push(Dense::init(fan_in, shape.width, scheme, &mut rng));
        fan_in = shape.width;
    }
    let xi_head = Dense::init(fan_in, shape.xi_dim, scheme, &mut rng);
    let alpha_head = Dense::init(fan_in, 1, scheme, &mut rng);
    MlpLevel {
        trunk,
        xi_head,
        alpha_head,
        output_scale,
        activation,
    }
}

impl MlpLevel {
    pub fn xi_dim(&self) -> usize {
        self.xi_head.weight.cols()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        self.trunk
            .iter()
            .chain([&self.xi_head, &self.alpha_head])
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain([&mut self.xi_head, &mut self.alpha_head])
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Records the parameters on `tape`; as leaves when `trainable`,
    /// otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> autodiff::Result<BoundMlp> {
        let mut put = |d: &Dense| -> autodiff::Result<(Var, Var)> {
            if trainable {
                Ok((tape.leaf(d.weight.clone())?, tape.leaf(d.bias.clone())?))
            } else {
                Ok((
                    tape.constant(d.weight.clone())?,
                    tape.constant(d.bias.clone())?,
                ))
            }
        };
        let trunk = self
            .trunk
            .iter()
            .map(&mut put)
            .collect::<autodiff::Result<_>>()?;
        Ok(BoundMlp {
            trunk,
            xi_head: put(&self.xi_head)?,
            alpha_head: put(&self.alpha_head)?,
        })
    }

    /// Forward pass of an n x 6 encoded batch: `(xi: n x xi_dim, alpha: n x 1)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        encoded: Var,
    ) -> autodiff::Result<(Var, Var)> {
        let mut h = encoded;
        for &(w, b) in &bound.trunk {
            let z = tape.linear(h, w, b)?;
            h = match self.activation {
                Activation::Relu => tape.relu(z)?,
                Activation::Tanh => tape.tanh(z)?,
            };
        }
        let raw = tape.linear(h, bound.xi_head.0, bound.xi_head.1)?;
        let xi = tape.mul_scalar(raw, self.output_scale)?;
        let logit = tape.linear(h, bound.alpha_head.0, bound.alpha_head.1)?;
        let alpha = tape.sigmoid(logit)?;
        Ok((xi, alpha))
    }

    /// Serializes the weights: magic, version, level, activation, output
    /// scale, tensor count, then per tensor `rows, cols` and raw values.
    /// Everything little-endian.
    pub fn to_bytes(&self, level: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DUMP_MAGIC);
        out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        out.extend_from_slice(&level.to_le_bytes());
        let act: u32 = match self.activation {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        };
        out.extend_from_slice(&act.to_le_bytes());
        out.extend_from_slice(&self.output_scale.to_le_bytes());
        let params = self.parameters();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for t in params {
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`MlpLevel::to_bytes`]; returns the level index too.
    pub fn from_bytes(bytes: &[u8]) -> Result<(u32, MlpLevel), DumpError> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8], DumpError> {
            if cur.len() < n {
                return Err(DumpError::Truncated);
            }
            let (head, rest) = cur.split_at(n);
            cur = rest;
            Ok(head)
        };
        if take(8)? != DUMP_MAGIC {
            return Err(DumpError::BadMagic);
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != DUMP_VERSION {
            return Err(DumpError::Version(version));
        }
        let level = u32_at(take(4)?);
        let activation = match u32_at(take(4)?) {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            other => return Err(DumpError::Inconsistent(format!("activation code {other}"))),
        };
        let output_scale = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32_at(take(4)?) as usize;
        if count < 6 || !count.is_multiple_of(2) {
            return Err(DumpError::Inconsistent(format!("{count} tensors")));
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = u32_at(take(4)?) as usize;
            let cols = u32_at(take(4)?) as usize;
            let raw = take(rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(rows, cols, data));
        }
        let mut layers: Vec<Dense> = tensors
            .chunks_exact(2)
            .map(|p| Dense {
                weight: p[0].clone(),
                bias: p[1].clone(),
            })
            .collect();
        let alpha_head = layers.pop().expect("count checked");
        let xi_head = layers.pop().expect("count checked");
        let net = MlpLevel {
            trunk: layers,
            xi_head,
            alpha_head,
            output_scale,
            activation,
        };
        net.check_shapes()?;
        Ok((level, net))
    }

    fn check_shapes(&self) -> Result<(), DumpError> {
        let mut fan_in = ENCODED_DIM;
        for d in self.trunk.iter().chain([&self.xi_head, &self.alpha_head]) {
            if d.weight.rows() != fan_in || d.bias.shape() != (1, d.weight.cols()) {
                return Err(DumpError::Inconsistent("layer shapes do not chain".into()));
            }
            if !std::ptr::eq(d, &self.xi_head) {
                fan_in = d.weight.cols();
            }
        }
        if self.alpha_head.weight.cols() != 1 {
            return Err(DumpError::Inconsistent(
                "alpha head must have one output".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check_with, GradCheckOptions};
    use crate::encoding::encode_batch;

    fn encoded_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let pts = Tensor::new(n, 3, (0..n * 3).map(|_| rng.gen_range(-0.5..0.5)).collect());
        let p = tape.constant(pts).unwrap();
        let e = encode_batch(&mut tape, p, 4, -2).unwrap();
        tape.value(e).clone()
    }

    fn run(net: &MlpLevel, enc: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false).unwrap();
        let e = tape.constant(enc.clone()).unwrap();
        let (xi, alpha) = net.forward(&mut tape, &bound, e).unwrap();
        (tape.value(xi).clone(), tape.value(alpha).clone())
    }

    #[test]
    fn zero_network_outputs_identity() {
        let net = init_mlp(
            MlpShape::new(16, 3, 6),
            1,
            InitScheme::Zeros,
            Activation::Relu,
            1e-4,
        );
        let (xi, alpha) = run(&net, &encoded_batch(10, 2));
        assert!(xi.data().iter().all(|&v| v == 0.0));
        assert!(alpha.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn xavier_bound_and_zero_biases() {
        let net = init_mlp(
            MlpShape::new(128, 3, 6),
            7,
            InitScheme::XavierUniform,
            Activation::Relu,
            1e-4,
        );
        let bound = (6.0f64 / 256.0).sqrt();
        assert!((bound - 0.1531).abs() < 1e-4);
        let w = &net.trunk[1].weight;
        assert_eq!(w.shape(), (128, 128));
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // The draws actually use the range.
        assert!(w.max_abs() > 0.9 * bound);
        for d in net.trunk.iter().chain([&net.xi_head, &net.alpha_head]) {
            assert!(d.bias.data().iter().all(|&b| b == 0.0));
        }
        let k = init_mlp(
            MlpShape::new(128, 3, 6),
            7,
            InitScheme::KaimingUniform,
            Activation::Relu,
            1e-4,
        );
        assert!(k.trunk[0].weight.max_abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn same_seed_same_weights() {
        let shape = MlpShape::new(32, 3, 7);
        let a = init_mlp(shape, 99, InitScheme::XavierUniform, Activation::Relu, 1e-4);
        let b = init_mlp(shape, 99, InitScheme::XavierUniform, Activation::Relu, 1e-4);
        let c = init_mlp(shape, 98, InitScheme::XavierUniform, Activation::Relu, 1e-4);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn output_shapes_and_small_initial_motion() {
        let net = init_mlp(
            MlpShape::new(128, 3, 6),
            3,
            InitScheme::XavierUniform,
            Activation::Relu,
            1e-4,
        );
        let (xi, alpha) = run(&net, &encoded_batch(1000, 4));
        assert_eq!(xi.shape(), (1000, 6));
        assert_eq!(alpha.shape(), (1000, 1));
        assert!(xi.max_abs() < 0.01, "{}", xi.max_abs());
        assert!(alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = init_mlp(
            MlpShape::new(8, 2, 6),
            3,
            InitScheme::XavierUniform,
            Activation::Relu,
            1e-4,
        );
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false).unwrap();
        let e = tape.constant(Tensor::zeros(4, 5)).unwrap();
        assert!(net.forward(&mut tape, &bound, e).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let net = init_mlp(
            MlpShape::new(12, 3, 7),
            5,
            InitScheme::XavierUniform,
            Activation::Tanh,
            1e-4,
        );
        let bytes = net.to_bytes(4);
        let (level, back) = MlpLevel::from_bytes(&bytes).unwrap();
        assert_eq!(level, 4);
        assert_eq!(back, net);
        assert_eq!(
            MlpLevel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(DumpError::Truncated)
        );
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(MlpLevel::from_bytes(&bad), Err(DumpError::BadMagic));
    }

    /// 6 -> 128 -> 128 -> 7 network with a sum loss, every weight checked.
    #[test]
    fn full_network_gradient_check() {
        let net = init_mlp(
            MlpShape::new(128, 2, 6),
            21,
            InitScheme::XavierUniform,
            Activation::Relu,
            1.0,
        );
        let enc = encoded_batch(4, 22);
        let params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
        let template = net.clone();
        let report = gradient_check_with(
            move |tape, vars| {
                let bound = BoundMlp::from_vars(vars);
                let e = tape.constant(enc.clone())?;
                let (xi, alpha) = template.forward(tape, &bound, e)?;
                let both = tape.concat(&[xi, alpha])?;
                tape.sum(both)
            },
            &params,
            &GradCheckOptions {
                step: 1e-5,
                tol: 1e-4,
                max_entries_per_param: None,
                seed: 0,
            },
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.worst);
        assert_eq!(report.checked, net.parameter_count());
    }
}
