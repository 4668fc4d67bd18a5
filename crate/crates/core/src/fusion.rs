//! The fusion network family: residual-guided decomposition, the six-slot
//! pipeline topology, and the builder that instantiates a concrete network
//! from an architecture description.
//!
//! Topology per modality: stem conv (1 -> base channels), residual feature,
//! gated low/high decomposition, one slot block per branch, branch merge by
//! addition. The two modality streams merge through the fusion rule, pass two
//! post-fusion slots, and a head conv + sigmoid produces the 1-channel fused
//! image in `[0,1]`. All spatial extents are preserved throughout.

use crate::blocks::{Block, OpCode, SlotModule};
use crate::error::{Error, Result};
use crate::params::{init_parameters, Binding, ParameterStore, ShapeMap};
use crate::rules::{FusionRule, RuleModule};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Roles of the six searchable slots, in order.
pub const SLOT_ROLES: [&str; 6] = [
    "ir_low",
    "ir_high",
    "vis_low",
    "vis_high",
    "post_fusion_1",
    "post_fusion_2",
];

/// Discrete architecture: one operation per slot, the fusion rule, and the
/// stem width.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchSpec {
    pub slots: [OpCode; 6],
    pub rule: FusionRule,
    pub base_channels: usize,
}

impl ArchSpec {
    pub fn new(slots: [OpCode; 6], rule: FusionRule, base_channels: usize) -> Result<Self> {
        rule.validate()?;
        if base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be positive".into()));
        }
        Ok(Self { slots, rule, base_channels })
    }

    /// Uniform architecture: the same operation in every slot. This is the
    /// variant shape used by the operation/rule sweeps.
    pub fn uniform(code: OpCode, rule: FusionRule, base_channels: usize) -> Result<Self> {
        Self::new([code; 6], rule, base_channels)
    }

    /// The reference architecture reported by the search at full scale:
    /// (3-DB, 3-DC, 3-DB, 3-DB, CA, 7-RB) merged by the adaptive average.
    pub fn reference(base_channels: usize) -> Self {
        Self {
            slots: [
                OpCode::dense(3).expect("valid"),
                OpCode::dilated(3).expect("valid"),
                OpCode::dense(3).expect("valid"),
                OpCode::dense(3).expect("valid"),
                OpCode::channel_attention(),
                OpCode::residual(7).expect("valid"),
            ],
            rule: FusionRule::AdaptiveAverage,
            base_channels,
        }
    }
}

/// Per-pixel channel max minus channel min: a single-channel map that is
/// nonnegative and zero exactly where all channels agree.
pub fn residual_feature<T: Scalar>(tape: &mut Tape<T>, features: NodeId) -> Result<NodeId> {
    let hi = tape.channel_max(features)?;
    let lo = tape.channel_min(features)?;
    tape.sub(hi, lo)
}

/// Learned soft split of a feature stream into low/high branches, driven by
/// the residual feature. `low + high == features` by construction.
#[derive(Clone, Debug)]
pub struct DecomposeGate {
    prefix: String,
}

/// Stabilizer for the per-sample mean normalization of the residual feature.
const GATE_TAU: f64 = 1e-3;

impl DecomposeGate {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into() }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    pub fn declare(&self, shapes: &mut ShapeMap) {
        shapes.insert(self.name("scale"), vec![1]);
        shapes.insert(self.name("offset"), vec![1]);
    }

    /// Start the gate active: unit scale, zero offset.
    pub fn default_params<T: Scalar>(&self, store: &mut ParameterStore<T>) -> Result<()> {
        store.set(&self.name("scale"), Tensor::scalar(T::one()))?;
        store.set(&self.name("offset"), Tensor::zeros(&[1]))?;
        Ok(())
    }

    /// Split `features` into `(low, high)` using the gate
    /// `g = sigmoid(scale * (normalize(res) - offset))`, where `normalize`
    /// divides by the per-sample spatial mean (plus a small tau).
    pub fn split<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        features: NodeId,
        res: NodeId,
    ) -> Result<DecomposeOutput> {
        let res_shape = tape.value(res).shape().to_vec();
        let b = res_shape[0];

        let gap = tape.global_avg_pool(res)?;
        let tau = tape.constant(Tensor::full(&[b, 1, 1, 1], T::from_f64(GATE_TAU)));
        let denom = tape.add(gap, tau)?;
        let ones_b = tape.constant(Tensor::full(&[b, 1, 1, 1], T::one()));
        let recip = tape.div(ones_b, denom)?;
        let norm = tape.broadcast_mul(res, recip)?;

        let scale = binding.node(&self.name("scale"))?;
        let offset = binding.node(&self.name("offset"))?;
        let scaled = tape.broadcast_mul(norm, scale)?;
        let shift = tape.broadcast_mul(scale, offset)?;
        let ones_map = tape.constant(Tensor::full(&res_shape, T::one()));
        let shift_map = tape.broadcast_mul(ones_map, shift)?;
        let z = tape.sub(scaled, shift_map)?;
        let gate = tape.sigmoid(z)?;

        let high = tape.broadcast_mul(features, gate)?;
        let inverse = tape.sub(ones_map, gate)?;
        let low = tape.broadcast_mul(features, inverse)?;
        Ok(DecomposeOutput { low, high, gate })
    }
}

pub struct DecomposeOutput {
    pub low: NodeId,
    pub high: NodeId,
    pub gate: NodeId,
}

/// Nodes of the intermediate features of one forward pass, for inspection
/// and invariant tests. Absent when the rule is `Direct` (no per-modality
/// encoding happens).
pub struct FeatureBundle {
    pub e_ir: NodeId,
    pub e_vis: NodeId,
    pub res_ir: NodeId,
    pub res_vis: NodeId,
    pub low_ir: NodeId,
    pub high_ir: NodeId,
    pub low_vis: NodeId,
    pub high_vis: NodeId,
    pub gate_ir: NodeId,
    pub gate_vis: NodeId,
}

pub struct FusionOutput {
    /// Fused 1-channel image in `[0,1]`.
    pub fused: NodeId,
    pub bundle: Option<FeatureBundle>,
    /// Adaptive-average masks when that rule is active.
    pub rule_masks: Option<(NodeId, NodeId)>,
}

/// The shared six-slot topology, generic over what a slot computes (discrete
/// block or search-time mixture).
pub struct FusionPipeline<S> {
    base_channels: usize,
    rule: RuleModule,
    slots: Vec<S>,
    gate_ir: DecomposeGate,
    gate_vis: DecomposeGate,
}

impl<S: SlotModule> FusionPipeline<S> {
    /// Assemble a pipeline from six slot modules (ordered per `SLOT_ROLES`).
    /// The slots' channel contracts must match the topology.
    pub fn from_slots(slots: Vec<S>, rule: FusionRule, base_channels: usize) -> Result<Self> {
        if slots.len() != 6 {
            return Err(Error::InvalidConfig(format!("expected 6 slots, got {}", slots.len())));
        }
        let rule = RuleModule::new(rule, base_channels, "rule")?;
        let merged = rule.out_channels();
        let expect: [(usize, usize); 6] = [
            (base_channels, base_channels),
            (base_channels, base_channels),
            (base_channels, base_channels),
            (base_channels, base_channels),
            (merged, base_channels),
            (base_channels, base_channels),
        ];
        for (i, (slot, (ci, co))) in slots.iter().zip(expect).enumerate() {
            if slot.in_channels() != ci || slot.out_channels() != co {
                return Err(Error::InvalidConfig(format!(
                    "slot {} ({}) must map {}->{} channels, got {}->{}",
                    i,
                    SLOT_ROLES[i],
                    ci,
                    co,
                    slot.in_channels(),
                    slot.out_channels()
                )));
            }
        }
        Ok(Self {
            base_channels,
            rule,
            slots,
            gate_ir: DecomposeGate::new("gate_ir"),
            gate_vis: DecomposeGate::new("gate_vis"),
        })
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn rule(&self) -> FusionRule {
        self.rule.rule()
    }

    pub fn slots(&self) -> &[S] {
        &self.slots
    }

    fn uses_encoders(&self) -> bool {
        self.rule.rule() != FusionRule::Direct
    }

    pub fn shape_map(&self) -> ShapeMap {
        let mut shapes = ShapeMap::new();
        let c = self.base_channels;
        if self.uses_encoders() {
            shapes.insert("stem_ir.weight", vec![c, 1, 3, 3]);
            shapes.insert("stem_ir.bias", vec![c]);
            shapes.insert("stem_vis.weight", vec![c, 1, 3, 3]);
            shapes.insert("stem_vis.bias", vec![c]);
            self.gate_ir.declare(&mut shapes);
            self.gate_vis.declare(&mut shapes);
            for slot in &self.slots[..4] {
                slot.declare(&mut shapes);
            }
        }
        self.rule.declare(&mut shapes);
        for slot in &self.slots[4..] {
            slot.declare(&mut shapes);
        }
        shapes.insert("head.weight", vec![1, c, 3, 3]);
        shapes.insert("head.bias", vec![1]);
        shapes
    }

    /// Initialize parameters for this pipeline: fan-in scaled kernels, zero
    /// biases, and active decomposition gates.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore<f32>> {
        let mut store = init_parameters(&self.shape_map(), seed)?;
        if self.uses_encoders() {
            self.gate_ir.default_params(&mut store)?;
            self.gate_vis.default_params(&mut store)?;
        }
        Ok(store)
    }

    pub fn param_count(&self) -> usize {
        self.shape_map().total_elements()
    }

    fn conv<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = binding.node(&format!("{prefix}.weight"))?;
        let b = binding.node(&format!("{prefix}.bias"))?;
        tape.conv2d(x, w, b, 1)
    }

    fn encode_modality<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        image: NodeId,
        stem: &str,
        gate: &DecomposeGate,
        low_slot: &S,
        high_slot: &S,
    ) -> Result<ModalityNodes> {
        let stem_out = self.conv(tape, binding, stem, image)?;
        let features = tape.relu(stem_out)?;
        let res = residual_feature(tape, features)?;
        let split = gate.split(tape, binding, features, res)?;
        let low = low_slot.forward(tape, binding, split.low)?;
        let high = high_slot.forward(tape, binding, split.high)?;
        let merged = tape.add(low, high)?;
        Ok(ModalityNodes {
            features,
            res,
            low: split.low,
            high: split.high,
            gate: split.gate,
            merged,
        })
    }

    /// Full forward pass from raw images `x` (infrared) and `y` (visible),
    /// both `(B,1,H,W)` in `[0,1]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        x: NodeId,
        y: NodeId,
    ) -> Result<FusionOutput> {
        let (merged, bundle, rule_masks) = if self.uses_encoders() {
            let ir = self.encode_modality(
                tape,
                binding,
                x,
                "stem_ir",
                &self.gate_ir,
                &self.slots[0],
                &self.slots[1],
            )?;
            let vis = self.encode_modality(
                tape,
                binding,
                y,
                "stem_vis",
                &self.gate_vis,
                &self.slots[2],
                &self.slots[3],
            )?;
            let rule_out = self.rule.apply(tape, binding, ir.merged, vis.merged)?;
            let bundle = FeatureBundle {
                e_ir: ir.features,
                e_vis: vis.features,
                res_ir: ir.res,
                res_vis: vis.res,
                low_ir: ir.low,
                high_ir: ir.high,
                low_vis: vis.low,
                high_vis: vis.high,
                gate_ir: ir.gate,
                gate_vis: vis.gate,
            };
            (rule_out.fused, Some(bundle), rule_out.masks)
        } else {
            let rule_out = self.rule.apply(tape, binding, x, y)?;
            (rule_out.fused, None, rule_out.masks)
        };

        let p1 = self.slots[4].forward(tape, binding, merged)?;
        let p2 = self.slots[5].forward(tape, binding, p1)?;
        let head = self.conv(tape, binding, "head", p2)?;
        let fused = tape.sigmoid(head)?;
        Ok(FusionOutput { fused, bundle, rule_masks })
    }
}

struct ModalityNodes {
    features: NodeId,
    res: NodeId,
    low: NodeId,
    high: NodeId,
    gate: NodeId,
    merged: NodeId,
}

/// A concrete (non-search) fusion network.
pub type FusionNetwork = FusionPipeline<Block>;

/// Instantiate a concrete network from an architecture description.
pub fn build_fusion_network(spec: &ArchSpec) -> Result<FusionNetwork> {
    let c = spec.base_channels;
    let rule = RuleModule::new(spec.rule, c, "rule")?;
    let merged = rule.out_channels();
    let widths: [(usize, usize); 6] =
        [(c, c), (c, c), (c, c), (c, c), (merged, c), (c, c)];
    let slots = spec
        .slots
        .iter()
        .zip(SLOT_ROLES)
        .zip(widths)
        .map(|((code, role), (ci, co))| Block::new(*code, ci, co, format!("slots.{role}")))
        .collect::<Result<Vec<_>>>()?;
    FusionPipeline::from_slots(slots, spec.rule, c)
}
