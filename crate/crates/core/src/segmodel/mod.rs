//! The trainable 3-class segmentation network: two small encoder-decoder
//! variants, the combined cross-entropy / soft-IOU loss, Adam training on
//! random crops, sliding-window inference, and gradient checking.
//!
//! Variant A is shallower and wider (depth 3, base 8), variant B deeper and
//! thinner (depth 4, base 6); cooperative training relies on the two having
//! different structures. All math is generic over [`Real`] — the pipeline
//! trains in f32, gradient checks instantiate f64.

mod checkpoint;
mod gradcheck;
mod infer;
mod loss;
mod net;
mod optim;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, max_rel_error};
pub use infer::sliding_window_infer;
pub use loss::{loss, LossValues};
pub use net::forward;
pub use train::{train, EpochStats, TrainItem, TrainLog};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::Real;
use rand::Rng;

/// Input channels (RGB).
pub const INPUT_CHANNELS: usize = 3;
/// Output classes (background / edge / inner).
pub const OUTPUT_CLASSES: usize = 3;
/// Channel growth is capped so deep variants stay desk-scale.
const CHANNEL_CAP: usize = 64;

/// The two model structures used by cooperative training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    A,
    B,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::A => write!(f, "A"),
            Variant::B => write!(f, "B"),
        }
    }
}

/// Architecture description of one segmentation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Number of encoder levels (2x downsamplings).
    pub depth: usize,
    pub base_channels: usize,
}

impl ModelSpec {
    pub fn variant_a() -> Self {
        Self {
            variant: Variant::A,
            depth: 3,
            base_channels: 8,
        }
    }

    pub fn variant_b() -> Self {
        Self {
            variant: Variant::B,
            depth: 4,
            base_channels: 6,
        }
    }

    pub fn of(variant: Variant) -> Self {
        match variant {
            Variant::A => Self::variant_a(),
            Variant::B => Self::variant_b(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!(
                "model spec must have depth >= 1 and base_channels >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Encoder channels at level `l` (0-based; level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(CHANNEL_CAP)
    }

    /// Input dimensions must be padded to a multiple of this.
    pub fn stride(&self) -> usize {
        1 << self.depth
    }
}

/// One convolution layer of the plan.
#[derive(Debug, Clone)]
pub(crate) struct ConvDef {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
}

/// Deterministic layer plan of a spec, in forward order.
pub(crate) fn conv_plan(spec: &ModelSpec) -> Vec<ConvDef> {
    let mut plan = Vec::new();
    let mut prev = INPUT_CHANNELS;
    for l in 0..spec.depth {
        plan.push(ConvDef {
            name: format!("enc{l}"),
            c_in: prev,
            c_out: spec.channels(l),
            ksize: 3,
        });
        prev = spec.channels(l);
    }
    plan.push(ConvDef {
        name: "bott".into(),
        c_in: prev,
        c_out: spec.channels(spec.depth),
        ksize: 3,
    });
    for l in (0..spec.depth).rev() {
        let upper = spec.channels(l + 1);
        plan.push(ConvDef {
            name: format!("dec{l}.proj"),
            c_in: upper,
            c_out: spec.channels(l),
            ksize: 1,
        });
        plan.push(ConvDef {
            name: format!("dec{l}.conv"),
            c_in: spec.channels(l),
            c_out: spec.channels(l),
            ksize: 3,
        });
    }
    plan.push(ConvDef {
        name: "head".into(),
        c_in: spec.channels(0),
        c_out: OUTPUT_CLASSES,
        ksize: 1,
    });
    plan
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

impl<S: Real> NamedTensor<S> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All weights of one segmentation model, in the deterministic plan order
/// (per layer: weight `[c_out, c_in, k, k]` then bias `[c_out]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParamsOf<S> {
    spec: ModelSpec,
    tensors: Vec<NamedTensor<S>>,
}

impl<S: Real> ModelParamsOf<S> {
    /// He-normal initialization, deterministic for a fixed seed.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream(seed, "model-init", &[]);
        let mut tensors = Vec::new();
        for def in conv_plan(spec) {
            let fan_in = def.c_in * def.ksize * def.ksize;
            let std = (2.0 / fan_in as f64).sqrt();
            let n = def.c_out * fan_in;
            let data: Vec<S> = (0..n)
                .map(|_| S::of_f64(std * normal_draw(&mut rng)))
                .collect();
            tensors.push(NamedTensor {
                name: format!("{}.weight", def.name),
                shape: vec![def.c_out, def.c_in, def.ksize, def.ksize],
                data,
            });
            tensors.push(NamedTensor {
                name: format!("{}.bias", def.name),
                shape: vec![def.c_out],
                data: vec![S::zero(); def.c_out],
            });
        }
        Ok(Self {
            spec: *spec,
            tensors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[NamedTensor<S>] {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [NamedTensor<S>] {
        &mut self.tensors
    }

    pub(crate) fn from_parts(spec: ModelSpec, tensors: Vec<NamedTensor<S>>) -> Self {
        Self { spec, tensors }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Convert the scalar type (e.g. to check gradients in f64).
    pub fn cast<T: Real>(&self) -> ModelParamsOf<T> {
        ModelParamsOf {
            spec: self.spec,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| T::of_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Box-Muller standard normal from a uniform stream.
fn normal_draw(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Training hyperparameters. Defaults follow the desk-scale configuration:
/// Adam at lr 0.001, batch 16, 128-px crops, 50 initial epochs and 10 per
/// refinement round.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub epochs_initial: usize,
    pub epochs_round: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Random horizontal/vertical flips (on by default).
    pub augment_flips: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 16,
            crop_size: 128,
            epochs_initial: 50,
            epochs_round: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            augment_flips: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.crop_size == 0
            || self.adam_epsilon <= 0.0
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return Err(Error::Config(format!("invalid train config: {self:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_have_different_parameter_shapes() {
        let a = ModelParamsOf::<f32>::init(&ModelSpec::variant_a(), 1).unwrap();
        let b = ModelParamsOf::<f32>::init(&ModelSpec::variant_b(), 1).unwrap();
        let shapes_a: Vec<_> = a.tensors().iter().map(|t| t.shape.clone()).collect();
        let shapes_b: Vec<_> = b.tensors().iter().map(|t| t.shape.clone()).collect();
        assert_ne!(shapes_a, shapes_b);
        assert_eq!(ModelSpec::variant_a().depth, 3);
        assert_eq!(ModelSpec::variant_a().base_channels, 8);
        assert_eq!(ModelSpec::variant_b().depth, 4);
        assert_eq!(ModelSpec::variant_b().base_channels, 6);
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParamsOf::<f32>::init(&ModelSpec::variant_a(), 7).unwrap();
        let b = ModelParamsOf::<f32>::init(&ModelSpec::variant_a(), 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParamsOf::<f32>::init(&ModelSpec::variant_a(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn plan_channels_follow_spec() {
        let spec = ModelSpec::variant_b();
        assert_eq!(spec.channels(0), 6);
        assert_eq!(spec.channels(3), 48);
        assert_eq!(spec.channels(4), 64); // capped
        let plan = conv_plan(&spec);
        assert_eq!(plan.first().unwrap().c_in, 3);
        assert_eq!(plan.last().unwrap().c_out, 3);
    }
}
