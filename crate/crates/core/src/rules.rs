//! Cross-modal fusion rules: how per-modality feature streams merge.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::{Binding, ShapeMap};
use crate::tape::{NodeId, Tape};
use crate::tensor::Scalar;

/// The six merge mechanisms. `AdaptiveAverage` and `Direct` carry learned
/// parameters; the rest are parameter-free.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionRule {
    /// Elementwise max of the two feature streams.
    Max,
    /// Fixed convex-ish mix `g1 * E_ir + g2 * E_vis`.
    WeightedAverage { gamma_ir: f64, gamma_vis: f64 },
    /// Learned per-pixel masks with `M_ir + M_vis = 1`.
    AdaptiveAverage,
    /// Elementwise addition.
    Sum,
    /// Channel concatenation; output channel count doubles.
    ChannelConcat,
    /// Convolution over the channel-stacked raw source images, bypassing the
    /// per-modality encoders.
    Direct,
}

impl FusionRule {
    /// Symmetric weighted average, the default when weights are unspecified.
    pub fn weighted_average_default() -> Self {
        FusionRule::WeightedAverage { gamma_ir: 0.5, gamma_vis: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        if let FusionRule::WeightedAverage { gamma_ir, gamma_vis } = self {
            if *gamma_ir < 0.0 || *gamma_vis < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "weighted-average weights must be nonnegative, got ({gamma_ir}, {gamma_vis})"
                )));
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FusionRule::Max => "MAX",
            FusionRule::WeightedAverage { .. } => "WA",
            FusionRule::AdaptiveAverage => "AA",
            FusionRule::Sum => "SUM",
            FusionRule::ChannelConcat => "CC",
            FusionRule::Direct => "DIRECT",
        }
    }
}

impl fmt::Display for FusionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionRule::WeightedAverage { gamma_ir, gamma_vis } => {
                write!(f, "WA({gamma_ir},{gamma_vis})")
            }
            other => write!(f, "{}", other.tag()),
        }
    }
}

impl std::str::FromStr for FusionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "MAX" => Ok(FusionRule::Max),
            "WA" => Ok(FusionRule::weighted_average_default()),
            "AA" => Ok(FusionRule::AdaptiveAverage),
            "SUM" => Ok(FusionRule::Sum),
            "CC" => Ok(FusionRule::ChannelConcat),
            "DIRECT" => Ok(FusionRule::Direct),
            other => Err(Error::InvalidConfig(format!("unknown fusion rule `{other}`"))),
        }
    }
}

/// A rule bound to a channel width and parameter namespace.
#[derive(Clone, Debug)]
pub struct RuleModule {
    rule: FusionRule,
    channels: usize,
    prefix: String,
}

impl RuleModule {
    pub fn new(rule: FusionRule, channels: usize, prefix: impl Into<String>) -> Result<Self> {
        rule.validate()?;
        if channels == 0 {
            return Err(Error::InvalidConfig("rule channels must be positive".into()));
        }
        Ok(Self { rule, channels, prefix: prefix.into() })
    }

    pub fn rule(&self) -> FusionRule {
        self.rule
    }

    /// Channel count of the merged stream.
    pub fn out_channels(&self) -> usize {
        match self.rule {
            FusionRule::ChannelConcat => 2 * self.channels,
            _ => self.channels,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    pub fn declare(&self, shapes: &mut ShapeMap) {
        match self.rule {
            FusionRule::AdaptiveAverage => {
                shapes.insert(self.name("ir_mask.weight"), vec![1, 2, 7, 7]);
                shapes.insert(self.name("ir_mask.bias"), vec![1]);
                shapes.insert(self.name("vis_mask.weight"), vec![1, 2, 7, 7]);
                shapes.insert(self.name("vis_mask.bias"), vec![1]);
            }
            FusionRule::Direct => {
                shapes.insert(self.name("combine.weight"), vec![self.channels, 2, 3, 3]);
                shapes.insert(self.name("combine.bias"), vec![self.channels]);
            }
            _ => {}
        }
    }

    fn mask_logits<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        part: &str,
        e: NodeId,
    ) -> Result<NodeId> {
        let mean_map = tape.spatial_mean(e)?;
        let max_map = tape.channel_max(e)?;
        let stats = tape.concat_channels(&[mean_map, max_map])?;
        let w = binding.node(&self.name(&format!("{part}.weight")))?;
        let b = binding.node(&self.name(&format!("{part}.bias")))?;
        tape.conv2d(stats, w, b, 1)
    }

    /// Merge two feature streams (or, for `Direct`, the raw source images).
    /// Returns the fused stream and, for `AdaptiveAverage`, the two masks.
    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        e_ir: NodeId,
        e_vis: NodeId,
    ) -> Result<RuleOutput> {
        let fused = match self.rule {
            FusionRule::Max => tape.maximum(e_ir, e_vis)?,
            FusionRule::WeightedAverage { gamma_ir, gamma_vis } => {
                let a = tape.scale(e_ir, gamma_ir)?;
                let b = tape.scale(e_vis, gamma_vis)?;
                tape.add(a, b)?
            }
            FusionRule::AdaptiveAverage => {
                let l_ir = self.mask_logits(tape, binding, "ir_mask", e_ir)?;
                let l_vis = self.mask_logits(tape, binding, "vis_mask", e_vis)?;
                // Two-way softmax via the sigmoid of the logit difference,
                // so M_ir + M_vis = 1 per pixel.
                let diff = tape.sub(l_ir, l_vis)?;
                let m_ir = tape.sigmoid(diff)?;
                let neg = tape.scale(diff, -1.0)?;
                let m_vis = tape.sigmoid(neg)?;
                let a = tape.broadcast_mul(e_ir, m_ir)?;
                let b = tape.broadcast_mul(e_vis, m_vis)?;
                let fused = tape.add(a, b)?;
                return Ok(RuleOutput { fused, masks: Some((m_ir, m_vis)) });
            }
            FusionRule::Sum => tape.add(e_ir, e_vis)?,
            FusionRule::ChannelConcat => tape.concat_channels(&[e_ir, e_vis])?,
            FusionRule::Direct => {
                let stacked = tape.concat_channels(&[e_ir, e_vis])?;
                let w = binding.node(&self.name("combine.weight"))?;
                let b = binding.node(&self.name("combine.bias"))?;
                let y = tape.conv2d(stacked, w, b, 1)?;
                tape.relu(y)?
            }
        };
        Ok(RuleOutput { fused, masks: None })
    }
}

/// Result of a rule application.
pub struct RuleOutput {
    pub fused: NodeId,
    /// `(M_ir, M_vis)` for the adaptive average, absent otherwise.
    pub masks: Option<(NodeId, NodeId)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{bind_params, init_parameters, ParameterStore};
    use crate::tensor::Tensor;

    fn apply_free_rule(rule: FusionRule, e_ir: &Tensor<f64>, e_vis: &Tensor<f64>) -> Tensor<f64> {
        let module = RuleModule::new(rule, e_ir.shape()[1], "rule").unwrap();
        let mut tape = Tape::new();
        let store = ParameterStore::<f64>::empty(0);
        let binding = bind_params(&mut tape, &store, false);
        let a = tape.leaf(e_ir.clone(), false);
        let b = tape.leaf(e_vis.clone(), false);
        let out = module.apply(&mut tape, &binding, a, b).unwrap();
        tape.value(out.fused).clone()
    }

    #[test]
    fn sum_with_zero_is_identity() {
        let e = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 * 0.1);
        let z = Tensor::zeros(&[1, 2, 3, 3]);
        assert_eq!(apply_free_rule(FusionRule::Sum, &e, &z), e);
    }

    #[test]
    fn weighted_average_halves_are_means() {
        let a = Tensor::new(vec![1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let b = Tensor::new(vec![1, 1, 1, 2], vec![4.0, 8.0]).unwrap();
        let out = apply_free_rule(FusionRule::weighted_average_default(), &a, &b);
        assert_eq!(out.data(), &[3.0, 6.0]);
    }

    #[test]
    fn max_returns_dominating_stream_exactly() {
        let a = Tensor::from_fn(&[1, 2, 4, 4], |i| (i as f64) * 0.01);
        let b = a.map(|v| v + 0.5);
        let out = apply_free_rule(FusionRule::Max, &a, &b);
        assert_eq!(out, b);
    }

    #[test]
    fn max_is_idempotent() {
        let a = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 13 % 7) as f64) - 3.0);
        assert_eq!(apply_free_rule(FusionRule::Max, &a, &a), a);
    }

    #[test]
    fn concat_doubles_channels() {
        let a = Tensor::zeros(&[2, 3, 4, 4]);
        let out = apply_free_rule(FusionRule::ChannelConcat, &a, &a);
        assert_eq!(out.shape(), &[2, 6, 4, 4]);
    }

    #[test]
    fn adaptive_masks_are_normalized_per_pixel() {
        let module = RuleModule::new(FusionRule::AdaptiveAverage, 3, "rule").unwrap();
        let mut shapes = ShapeMap::new();
        module.declare(&mut shapes);
        let store: ParameterStore<f64> = init_parameters(&shapes, 17).unwrap();
        let mut tape = Tape::new();
        let binding = bind_params(&mut tape, &store, false);
        let e_ir = tape.leaf(Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 11 % 23) as f64) * 0.1), false);
        let e_vis = tape.leaf(Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 7 % 19) as f64) * 0.1), false);
        let out = module.apply(&mut tape, &binding, e_ir, e_vis).unwrap();
        let (m_ir, m_vis) = out.masks.unwrap();
        let mi = tape.value(m_ir);
        let mv = tape.value(m_vis);
        for (a, b) in mi.data().iter().zip(mv.data()) {
            assert!((a + b - 1.0).abs() < 1e-6);
            assert!(*a >= 0.0 && *a <= 1.0);
            assert!(*b >= 0.0 && *b <= 1.0);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let module = RuleModule::new(FusionRule::Sum, 2, "rule").unwrap();
        let mut tape = Tape::<f64>::new();
        let store = ParameterStore::<f64>::empty(0);
        let binding = bind_params(&mut tape, &store, false);
        let a = tape.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        assert!(module.apply(&mut tape, &binding, a, b).is_err());
    }

    #[test]
    fn negative_wa_weights_rejected() {
        assert!(RuleModule::new(
            FusionRule::WeightedAverage { gamma_ir: -0.1, gamma_vis: 0.5 },
            2,
            "r"
        )
        .is_err());
    }
}
