//! PGD adversarial example generation against the fused segmentation
//! composite, plus offline multi-level attacked dataset generation.

use rand::Rng;

use crate::blocks::SlotModule;
use crate::data::SampleBatch;
use crate::error::{Error, Result};
use crate::fusion::FusionPipeline;
use crate::params::{bind_params, ParameterStore};
use crate::rng::{derive_seed, seeded_rng};
use crate::seg::{cross_entropy, SegHead};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// An l-infinity attack budget in image units (`4/255 ~ 0.0157`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackBudget {
    pub epsilon: f64,
    /// Step size; defaults to `epsilon / 4`.
    pub eta: f64,
    /// Iteration count; defaults to 5.
    pub steps: usize,
    pub seed: u64,
    /// Start from uniform noise in the budget ball instead of zero.
    pub random_start: bool,
}

impl AttackBudget {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, eta: epsilon / 4.0, steps: 5, seed: 0, random_start: false }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.epsilon > 0.0 && self.steps > 0 && self.eta <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eta must be > 0 for a {}-step attack",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Clamp a perturbation into the `[-epsilon, epsilon]` ball, elementwise.
pub fn project_linf(delta: &Tensor<f32>, epsilon: f64) -> Tensor<f32> {
    let e = epsilon as f32;
    delta.map(|v| v.clamp(-e, e))
}

/// Outcome of one attack: adversarial images, effective perturbations, and
/// the loss at every iterate (entry 0 is the clean loss, the last entry the
/// final attacked loss).
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub x_adv: Tensor<f32>,
    pub y_adv: Tensor<f32>,
    pub delta_ir: Tensor<f32>,
    pub delta_vis: Tensor<f32>,
    pub loss_trace: Vec<f64>,
}

fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn sign(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

fn uniform_ball(shape: &[usize], epsilon: f64, seed: u64) -> Tensor<f32> {
    let mut rng = seeded_rng(seed);
    let e = epsilon;
    Tensor::from_fn(shape, |_| {
        if e > 0.0 {
            rng.random_range(-e..e) as f32
        } else {
            0.0
        }
    })
}

/// Sign-gradient ascent on an arbitrary scalar loss of the two modality
/// images. `loss_builder` receives a fresh tape plus the current adversarial
/// image leaves and returns the loss node. Both modalities update from one
/// backward pass per iteration; the perturbation projects into the epsilon
/// ball after every step, and the returned images are clipped to `[0,1]`.
pub fn pgd_attack_with<F>(
    mut loss_builder: F,
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    budget: &AttackBudget,
) -> Result<AttackResult>
where
    F: FnMut(&mut Tape<f32>, NodeId, NodeId) -> Result<NodeId>,
{
    budget.validate()?;
    let mut delta_ir = if budget.random_start {
        project_linf(
            &uniform_ball(x.shape(), budget.epsilon, derive_seed(budget.seed, "init-ir", 0)),
            budget.epsilon,
        )
    } else {
        Tensor::zeros(x.shape())
    };
    let mut delta_vis = if budget.random_start {
        project_linf(
            &uniform_ball(y.shape(), budget.epsilon, derive_seed(budget.seed, "init-vis", 0)),
            budget.epsilon,
        )
    } else {
        Tensor::zeros(y.shape())
    };

    let mut loss_trace = Vec::with_capacity(budget.steps + 1);
    for _ in 0..budget.steps {
        let xa = x.zip_map(&delta_ir, |a, d| a + d)?;
        let ya = y.zip_map(&delta_vis, |a, d| a + d)?;
        let mut tape = Tape::new();
        let x_leaf = tape.leaf(xa, true);
        let y_leaf = tape.leaf(ya, true);
        let loss = loss_builder(&mut tape, x_leaf, y_leaf)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite { context: format!("attack loss after {} iterations", loss_trace.len()) });
        }
        loss_trace.push(loss_value.to_f64());

        let grads = tape.backward(loss)?;
        let gx = sign(&grads.get(x_leaf));
        let gy = sign(&grads.get(y_leaf));
        let eta = budget.eta as f32;
        delta_ir = project_linf(&delta_ir.zip_map(&gx, |d, s| d + eta * s)?, budget.epsilon);
        delta_vis = project_linf(&delta_vis.zip_map(&gy, |d, s| d + eta * s)?, budget.epsilon);
    }

    let x_adv = clamp01(&x.zip_map(&delta_ir, |a, d| a + d)?);
    let y_adv = clamp01(&y.zip_map(&delta_vis, |a, d| a + d)?);

    // Final attacked loss on the clipped images.
    let mut tape = Tape::new();
    let x_leaf = tape.leaf(x_adv.clone(), false);
    let y_leaf = tape.leaf(y_adv.clone(), false);
    let loss = loss_builder(&mut tape, x_leaf, y_leaf)?;
    let final_loss = tape.value(loss).item()?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite { context: "final attack loss".into() });
    }
    loss_trace.push(final_loss.to_f64());

    // Effective perturbations after image clipping; clipping toward the clean
    // image only shrinks them, so the budget still holds exactly.
    let delta_ir = x_adv.zip_map(x, |a, c| a - c)?;
    let delta_vis = y_adv.zip_map(y, |a, c| a - c)?;
    Ok(AttackResult { x_adv, y_adv, delta_ir, delta_vis, loss_trace })
}

/// PGD against the composite: maximize the segmentation cross-entropy of
/// `T(N(x + d_ir, y + d_vis))` over both perturbations jointly.
pub fn pgd_attack<S: SlotModule>(
    pipeline: &FusionPipeline<S>,
    theta: &ParameterStore<f32>,
    head: &SegHead,
    omega: &ParameterStore<f32>,
    batch: &SampleBatch,
    budget: &AttackBudget,
) -> Result<AttackResult> {
    batch.validate()?;
    pgd_attack_with(
        |tape, x, y| {
            let tb = bind_params(tape, theta, false);
            let ob = bind_params(tape, omega, false);
            let out = pipeline.forward(tape, &tb, x, y)?;
            let logits = head.forward(tape, &ob, out.fused)?;
            cross_entropy(tape, logits, &batch.labels)
        },
        &batch.x,
        &batch.y,
        budget,
    )
}

/// Apply an attack result back onto a batch, keeping the labels.
pub fn attacked_batch(batch: &SampleBatch, result: &AttackResult) -> Result<SampleBatch> {
    SampleBatch::new(result.x_adv.clone(), result.y_adv.clone(), batch.labels.clone())
}

/// Train/val tag of a persisted attacked dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
        }
    }
}

/// One split of one attack level: samples that all satisfy the level budget.
#[derive(Clone, Debug)]
pub struct AttackedDataset {
    /// 1-based level id.
    pub level: usize,
    pub budget: AttackBudget,
    pub split: SplitTag,
    pub samples: Vec<SampleBatch>,
    /// Identifier of the source model the attacks were generated against.
    pub provenance: String,
}

/// Both splits of one attack level.
#[derive(Clone, Debug)]
pub struct AttackedLevel {
    pub train: AttackedDataset,
    pub val: AttackedDataset,
}

/// Generate offline attacked datasets at several severities against a fixed
/// source model. The split is deterministic in `split_seed`; per-sample
/// attack seeds derive from `(split_seed, level, sample)` so sharding the
/// work cannot change any result.
#[allow(clippy::too_many_arguments)]
pub fn generate_offline_attack_set<S: SlotModule>(
    pipeline: &FusionPipeline<S>,
    theta: &ParameterStore<f32>,
    head: &SegHead,
    omega: &ParameterStore<f32>,
    data: &[SampleBatch],
    levels: &[AttackBudget],
    split_seed: u64,
    val_fraction: f64,
    provenance: &str,
) -> Result<Vec<AttackedLevel>> {
    if levels.is_empty() {
        return Err(Error::InvalidConfig("need at least one attack level".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty source dataset".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidConfig(format!("val fraction {val_fraction} not in [0,1)")));
    }
    if pipeline.shape_map() != theta.shape_map() {
        return Err(Error::InvalidConfig(
            "fusion parameters do not match the declared source architecture".into(),
        ));
    }
    if head.shape_map() != omega.shape_map() {
        return Err(Error::InvalidConfig(
            "task parameters do not match the declared source head".into(),
        ));
    }

    // One shuffle shared by every level keeps the splits aligned across
    // severities.
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut rng = seeded_rng(derive_seed(split_seed, "offline-split", 0));
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    let n_val = ((data.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(data.len().saturating_sub(1));
    let (val_idx, train_idx) = indices.split_at(n_val);

    let mut out = Vec::with_capacity(levels.len());
    for (li, level_budget) in levels.iter().enumerate() {
        level_budget.validate()?;
        let level = li + 1;
        let attack_split = |idx: &[usize], split: SplitTag| -> Result<AttackedDataset> {
            let mut samples = Vec::with_capacity(idx.len());
            for &i in idx {
                let sample_seed = derive_seed(derive_seed(split_seed, "level", level as u64), "sample", i as u64);
                let budget = AttackBudget { seed: sample_seed, ..*level_budget };
                let result = pgd_attack(pipeline, theta, head, omega, &data[i], &budget)?;
                samples.push(attacked_batch(&data[i], &result)?);
            }
            Ok(AttackedDataset {
                level,
                budget: *level_budget,
                split,
                samples,
                provenance: provenance.to_string(),
            })
        };
        out.push(AttackedLevel {
            train: attack_split(train_idx, SplitTag::Train)?,
            val: attack_split(val_idx, SplitTag::Val)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::OpCode;
    use crate::fusion::{build_fusion_network, ArchSpec};
    use crate::rules::FusionRule;
    use crate::seg::LabelMap;

    fn tiny_batch(seed: u64) -> SampleBatch {
        let mut rng = seeded_rng(seed);
        let x = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(0.0..1.0f32));
        let y = Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(0.0..1.0f32));
        // Seed-dependent labels so tests can match samples back to sources.
        let labels =
            LabelMap::new([1, 8, 8], (0..64).map(|i| ((i + seed as usize) % 4) as u8).collect()).unwrap();
        SampleBatch::new(x, y, labels).unwrap()
    }

    fn tiny_models() -> (crate::fusion::FusionNetwork, ParameterStore<f32>, SegHead, ParameterStore<f32>) {
        let spec = ArchSpec::uniform(OpCode::conv(3).unwrap(), FusionRule::Sum, 4).unwrap();
        let net = build_fusion_network(&spec).unwrap();
        let theta = net.init_params(11).unwrap();
        let head = SegHead::new(4, 4).unwrap();
        let omega = head.init_params(12).unwrap();
        (net, theta, head, omega)
    }

    #[test]
    fn project_linf_cases() {
        let d = Tensor::new(vec![2], vec![0.1f32, -0.1]).unwrap();
        assert_eq!(project_linf(&d, 0.0).data(), &[0.0, 0.0]);
        assert_eq!(project_linf(&d, 0.5).data(), d.data());
        assert_eq!(project_linf(&d, 0.02).data(), &[0.02, -0.02]);
    }

    #[test]
    fn zero_budget_reproduces_inputs_bit_exactly() {
        let (net, theta, head, omega) = tiny_models();
        let batch = tiny_batch(3);
        let budget = AttackBudget::new(0.0);
        let r = pgd_attack(&net, &theta, &head, &omega, &batch, &budget).unwrap();
        assert_eq!(r.x_adv, batch.x);
        assert_eq!(r.y_adv, batch.y);
        let first = r.loss_trace[0];
        assert!(r.loss_trace.iter().all(|&v| v == first), "trace {:?}", r.loss_trace);
    }

    #[test]
    fn analytic_linear_loss_saturates_one_step() {
        // loss = 3 * mean(x + d): the gradient sign is +1 everywhere, so one
        // step moves every element by min(eta, eps).
        let x = Tensor::full(&[1, 1, 4, 4], 0.5f32);
        let y = Tensor::full(&[1, 1, 4, 4], 0.5f32);
        let budget = AttackBudget { epsilon: 0.1, eta: 0.03, steps: 1, seed: 0, random_start: false };
        let r = pgd_attack_with(
            |tape, xl, _yl| {
                let m = tape.scalar_mean(xl)?;
                tape.scale(m, 3.0)
            },
            &x,
            &y,
            &budget,
        )
        .unwrap();
        for &d in r.delta_ir.data() {
            assert!((d - 0.03).abs() < 1e-7);
        }
        // The y modality never enters the loss: zero gradient, zero movement.
        assert!(r.delta_vis.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn budget_invariants_hold_exactly() {
        let (net, theta, head, omega) = tiny_models();
        for seed in 0..6 {
            let batch = tiny_batch(seed);
            let eps = 4.0 / 255.0;
            let budget = AttackBudget::new(eps).with_seed(seed);
            let r = pgd_attack(&net, &theta, &head, &omega, &batch, &budget).unwrap();
            let e32 = eps as f32;
            assert!(r.delta_ir.data().iter().all(|&d| d.abs() <= e32));
            assert!(r.delta_vis.data().iter().all(|&d| d.abs() <= e32));
            assert!(r.x_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(r.y_adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(r.loss_trace.len(), budget.steps + 1);
        }
    }

    #[test]
    fn attack_is_deterministic() {
        let (net, theta, head, omega) = tiny_models();
        let batch = tiny_batch(9);
        let budget = AttackBudget::new(8.0 / 255.0).with_seed(5);
        let a = pgd_attack(&net, &theta, &head, &omega, &batch, &budget).unwrap();
        let b = pgd_attack(&net, &theta, &head, &omega, &batch, &budget).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn offline_generation_bookkeeping() {
        let (net, theta, head, omega) = tiny_models();
        let data: Vec<SampleBatch> = (0..12).map(|i| tiny_batch(i)).collect();
        let levels: Vec<AttackBudget> = [1.0, 2.0, 4.0]
            .iter()
            .map(|v| AttackBudget { steps: 2, ..AttackBudget::new(v / 255.0) })
            .collect();
        let out = generate_offline_attack_set(&net, &theta, &head, &omega, &data, &levels, 7, 0.25, "src")
            .unwrap();
        assert_eq!(out.len(), 3);
        for (li, level) in out.iter().enumerate() {
            assert_eq!(level.train.level, li + 1);
            assert_eq!(level.train.samples.len(), 9);
            assert_eq!(level.val.samples.len(), 3);
            for (ds, src_len) in [(&level.train, 9), (&level.val, 3)] {
                assert_eq!(ds.samples.len(), src_len);
                for s in &ds.samples {
                    assert!(s.x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn zero_level_offline_set_equals_clean_data() {
        let (net, theta, head, omega) = tiny_models();
        let data: Vec<SampleBatch> = (0..4).map(|i| tiny_batch(100 + i)).collect();
        let levels = vec![AttackBudget::new(0.0)];
        let out = generate_offline_attack_set(&net, &theta, &head, &omega, &data, &levels, 3, 0.25, "src")
            .unwrap();
        let level = &out[0];
        for ds in [&level.train, &level.val] {
            for s in &ds.samples {
                let orig = data.iter().find(|d| d.labels == s.labels).unwrap();
                assert_eq!(s.x, orig.x);
                assert_eq!(s.y, orig.y);
            }
        }
    }

    #[test]
    fn emitted_samples_respect_their_budget() {
        let (net, theta, head, omega) = tiny_models();
        let data: Vec<SampleBatch> = (0..6).map(|i| tiny_batch(200 + i)).collect();
        let levels: Vec<AttackBudget> =
            [1.0, 4.0].iter().map(|v| AttackBudget { steps: 3, ..AttackBudget::new(v / 255.0) }).collect();
        let out = generate_offline_attack_set(&net, &theta, &head, &omega, &data, &levels, 11, 0.3, "src")
            .unwrap();
        for level in &out {
            let eps = level.train.budget.epsilon as f32;
            for ds in [&level.train, &level.val] {
                for s in &ds.samples {
                    let orig = data.iter().find(|d| d.labels == s.labels).unwrap();
                    for (a, c) in s.x.data().iter().zip(orig.x.data()) {
                        assert!((a - c).abs() <= eps);
                    }
                    for (a, c) in s.y.data().iter().zip(orig.y.data()) {
                        assert!((a - c).abs() <= eps);
                    }
                }
            }
        }
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let (net, _, head, omega) = tiny_models();
        let other = ArchSpec::uniform(OpCode::conv(5).unwrap(), FusionRule::Sum, 4).unwrap();
        let wrong_theta = build_fusion_network(&other).unwrap().init_params(0).unwrap();
        let data = vec![tiny_batch(0)];
        let levels = vec![AttackBudget::new(0.01)];
        assert!(generate_offline_attack_set(&net, &wrong_theta, &head, &omega, &data, &levels, 0, 0.25, "s")
            .is_err());
    }
}
