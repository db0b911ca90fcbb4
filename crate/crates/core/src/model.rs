//! The base classifier: a stack of stride-2 conv blocks over the feature
//! map, flattened into a linear output layer with a fixed tail.
//!
//! Output slots `0..N-1` belong to the episode's sampled (or user-defined)
//! keywords; slots `N..N+M-1` are permanently assigned to the fixed classes
//! (silence at `N`, unknown at `N+1`). The rows of the output layer feeding
//! those tail slots are therefore the same stored parameters in every
//! episode and every stage.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

/// Architecture parameters. The flatten width is always derived from the
/// input geometry and block count, never hard-coded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub filters: usize,
    pub kernel: usize,
    /// Stride applied by each block ("same" padding).
    pub stride: usize,
    pub n_outputs: usize,
    pub input_shape: (usize, usize),
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            filters: 64,
            kernel: 3,
            stride: 2,
            n_outputs: 12,
            input_shape: (98, 40),
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outputs < 2 {
            return Err(TensorError::Invalid(format!(
                "n_outputs {} must be at least 2",
                self.n_outputs
            )));
        }
        if self.n_blocks == 0 || self.filters == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(TensorError::Invalid(
                "n_blocks, filters, kernel, stride must be positive".into(),
            ));
        }
        let (h, w) = self.spatial_after_blocks();
        if h == 0 || w == 0 {
            return Err(TensorError::Invalid(format!(
                "input {:?} collapses to zero after {} blocks",
                self.input_shape, self.n_blocks
            )));
        }
        Ok(())
    }

    /// Spatial dims after the conv stack (ceil division per stride-2 block).
    pub fn spatial_after_blocks(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_shape;
        for _ in 0..self.n_blocks {
            h = h.div_ceil(self.stride);
            w = w.div_ceil(self.stride);
        }
        (h, w)
    }

    /// Width of the flattened layer feeding the output.
    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.spatial_after_blocks();
        self.filters * h * w
    }
}

/// Slot layout of the output layer: N adaptable slots then M fixed ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutputLayout {
    pub n_new: usize,
    pub n_fixed: usize,
}

impl OutputLayout {
    pub fn new(n_new: usize, n_fixed: usize) -> Self {
        Self { n_new, n_fixed }
    }

    pub fn n_total(&self) -> usize {
        self.n_new + self.n_fixed
    }

    pub fn new_class_slots(&self) -> std::ops::Range<usize> {
        0..self.n_new
    }

    pub fn fixed_class_slots(&self) -> std::ops::Range<usize> {
        self.n_new..self.n_total()
    }

    /// Fixed slot of the silence class (requires M >= 1).
    pub fn silence_slot(&self) -> usize {
        self.n_new
    }

    /// Fixed slot of the unknown class (requires M >= 2).
    pub fn unknown_slot(&self) -> usize {
        self.n_new + 1
    }
}

/// He-uniform fan-in initialization: conv and linear weights drawn from
/// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, biases zero, batch-norm scale one
/// and shift zero. Draws happen in f64 so a seed produces the same
/// initializer in both precisions.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut in_c = 1usize;
    for block in 0..cfg.n_blocks {
        let fan_in = cfg.kernel * cfg.kernel * in_c;
        let shape = vec![cfg.kernel, cfg.kernel, in_c, cfg.filters];
        params.insert(
            format!("conv{block}.weight"),
            Var::param(he_uniform(shape, fan_in, rng)),
        );
        params.insert(
            format!("conv{block}.bias"),
            Var::param(Tensor::zeros(vec![cfg.filters])),
        );
        params.insert(
            format!("bn{block}.gamma"),
            Var::param(Tensor::full(vec![cfg.filters], T::one())),
        );
        params.insert(
            format!("bn{block}.beta"),
            Var::param(Tensor::zeros(vec![cfg.filters])),
        );
        in_c = cfg.filters;
    }
    let flat = cfg.flat_dim();
    params.insert(
        "fc.weight",
        Var::param(he_uniform(vec![flat, cfg.n_outputs], flat, rng)),
    );
    params.insert("fc.bias", Var::param(Tensor::zeros(vec![cfg.n_outputs])));
    Ok(params)
}

fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha20Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches draw count")
}

/// Forward pass over a stacked batch `[B, H, W]` of feature maps, producing
/// logits `[B, n_outputs]`. Blocks run conv (stride from config) -> relu ->
/// batch norm; batch norm uses batch statistics in every pass.
pub fn forward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &ModelConfig,
    batch: &Var<T>,
) -> Result<Var<T>> {
    let shape = batch.shape().to_vec();
    if shape.len() != 3 || (shape[1], shape[2]) != cfg.input_shape {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            lhs: shape,
            rhs: vec![0, cfg.input_shape.0, cfg.input_shape.1],
        });
    }
    let b = shape[0];
    let mut x = batch.reshape(vec![b, cfg.input_shape.0, cfg.input_shape.1, 1])?;
    let eps = T::from_f64(cfg.bn_eps);
    let get = |name: &str| -> Result<&Var<T>> {
        params
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("missing parameter {name}")))
    };
    for block in 0..cfg.n_blocks {
        let w = get(&format!("conv{block}.weight"))?;
        let bias = get(&format!("conv{block}.bias"))?;
        let gamma = get(&format!("bn{block}.gamma"))?;
        let beta = get(&format!("bn{block}.beta"))?;
        x = x.conv2d(w, bias, cfg.stride)?.relu();
        x = x.batch_norm(gamma, beta, eps)?;
    }
    let flat = x.flatten()?;
    flat.linear(get("fc.weight")?, get("fc.bias")?)
}

/// Sum-reduced cross-entropy: `-sum_j log softmax(logits_j)[label_j]`.
pub fn cross_entropy<T: Scalar>(logits: &Var<T>, labels: &[usize]) -> Result<Var<T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let classes = shape[1];
    let mut onehot = vec![T::zero(); labels.len() * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TensorError::Invalid(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        onehot[row * classes + label] = T::one();
    }
    let y = Var::constant(Tensor::from_vec(shape.to_vec(), onehot)?);
    Ok(logits.log_softmax()?.mul(&y)?.sum_all()?.neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad;
    use crate::seeds::derive_rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            filters: 4,
            n_outputs: 3,
            input_shape: (12, 10),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn paper_scale_geometry_flattens_to_1344() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.spatial_after_blocks(), (7, 3));
        assert_eq!(cfg.flat_dim(), 64 * 7 * 3);
    }

    #[test]
    fn init_is_deterministic_and_biases_are_zero() {
        let cfg = tiny_cfg();
        let a: ParamSet<f64> = init_params(&cfg, &mut derive_rng(11, "init", &[])).unwrap();
        let b: ParamSet<f64> = init_params(&cfg, &mut derive_rng(11, "init", &[])).unwrap();
        for (name, var) in a.iter() {
            assert_eq!(var.value(), b.get(name).unwrap().value(), "{name}");
        }
        for (name, var) in a.iter() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(var.value().data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") {
                assert!(var.value().data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn he_variance_near_target() {
        // Uniform(-limit, limit) has variance limit^2 / 3 = 2 / fan_in.
        let cfg = ModelConfig {
            n_blocks: 1,
            filters: 64,
            n_outputs: 12,
            input_shape: (20, 20),
            ..ModelConfig::default()
        };
        let mut total = 0.0f64;
        let mut count = 0usize;
        for seed in 0..10u64 {
            let p: ParamSet<f64> = init_params(&cfg, &mut derive_rng(seed, "init", &[])).unwrap();
            let w = p.get("conv0.weight").unwrap().value().clone();
            total += w.data().iter().map(|v| v * v).sum::<f64>();
            count += w.len();
        }
        let target = 2.0 / 9.0; // fan_in = 3*3*1
        let measured = total / count as f64;
        assert!(
            measured > target / 2.0 && measured < target * 2.0,
            "variance {measured} vs He target {target}"
        );
    }

    #[test]
    fn zero_input_with_zero_head_gives_uniform_softmax() {
        let cfg = tiny_cfg();
        let mut params: ParamSet<f64> =
            init_params(&cfg, &mut derive_rng(3, "init", &[])).unwrap();
        // Zero the output layer; all logits must then coincide.
        let flat = cfg.flat_dim();
        let mut replaced = ParamSet::new();
        for (name, var) in params.iter() {
            if name == "fc.weight" {
                replaced.insert(name, Var::param(Tensor::zeros(vec![flat, cfg.n_outputs])));
            } else {
                replaced.insert(name, var.clone());
            }
        }
        params = replaced;
        // One example would make batch-norm degenerate; use two.
        let batch = Var::constant(Tensor::zeros(vec![2, 12, 10]));
        let logits = forward(&params, &cfg, &batch).unwrap();
        let sm = logits.softmax().unwrap();
        for &p in sm.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_matches_config() {
        let cfg = ModelConfig {
            n_blocks: 2,
            filters: 6,
            n_outputs: 12,
            input_shape: (98, 40),
            ..ModelConfig::default()
        };
        let params: ParamSet<f32> = init_params(&cfg, &mut derive_rng(1, "init", &[])).unwrap();
        let batch = Var::constant(Tensor::full(vec![3, 98, 40], 0.1f32));
        let logits = forward(&params, &cfg, &batch).unwrap();
        assert_eq!(logits.shape(), &[3, 12]);
        assert!(logits.value().all_finite());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Var::constant(Tensor::<f64>::zeros(vec![1, 12]));
        let loss = cross_entropy(&logits, &[5]).unwrap();
        assert!((loss.value().item() - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_to_zero_at_large_margin() {
        let mut row = vec![0.0f64; 12];
        row[3] = 40.0;
        let logits = Var::constant(Tensor::from_vec(vec![1, 12], row).unwrap());
        let loss = cross_entropy(&logits, &[3]).unwrap();
        assert!(loss.value().item() < 1e-6);
    }

    #[test]
    fn cross_entropy_hand_case() {
        // logits (1, 0, 0), label 0: -log(e / (e + 2)) = 0.55144...
        let logits = Var::constant(Tensor::from_vec(vec![1, 3], vec![1.0f64, 0.0, 0.0]).unwrap());
        let loss = cross_entropy(&logits, &[0]).unwrap();
        let expect = -((1f64.exp()) / (1f64.exp() + 2.0)).ln();
        assert!((loss.value().item() - expect).abs() < 1e-10);
        assert!((loss.value().item() - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Var::constant(Tensor::<f64>::zeros(vec![1, 3]));
        assert!(cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_sums_over_the_set() {
        let logits = Var::constant(Tensor::<f64>::zeros(vec![4, 6]));
        let loss = cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!((loss.value().item() - 4.0 * 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argmax_invariant_to_constant_logit_shift() {
        let logits = Tensor::from_vec(vec![2, 3], vec![0.3f64, 0.9, 0.9, -1.0, -2.0, -0.5]).unwrap();
        let shifted = logits.map(|v| v + 123.25);
        assert_eq!(logits.argmax_rows().unwrap(), shifted.argmax_rows().unwrap());
        assert_eq!(logits.argmax_rows().unwrap(), vec![1, 2]);
    }

    #[test]
    fn forward_cross_entropy_gradient_is_finite() {
        let cfg = tiny_cfg();
        let params: ParamSet<f64> = init_params(&cfg, &mut derive_rng(5, "init", &[])).unwrap();
        let batch = Var::constant(Tensor::full(vec![4, 12, 10], 0.3f64));
        let logits = forward(&params, &cfg, &batch).unwrap();
        let loss = cross_entropy(&logits, &[0, 1, 2, 0]).unwrap();
        let grads = grad(&loss, &params.vars(), false).unwrap();
        for g in grads {
            assert!(g.value().all_finite());
        }
    }

    #[test]
    fn fixed_tail_layout() {
        let layout = OutputLayout::new(10, 2);
        assert_eq!(layout.new_class_slots(), 0..10);
        assert_eq!(layout.fixed_class_slots(), 10..12);
        assert_eq!(layout.silence_slot(), 10);
        assert_eq!(layout.unknown_slot(), 11);
    }
}
