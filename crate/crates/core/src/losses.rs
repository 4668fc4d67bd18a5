//! Saliency-weighted fusion loss, differentiable SSIM, and the hybrid
//! training/validation objectives.

use crate::blocks::SlotModule;
use crate::data::SampleBatch;
use crate::error::{Error, Result};
use crate::fusion::FusionPipeline;
use crate::params::Binding;
use crate::seg::{cross_entropy, LabelMap, SegHead};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Stabilizer of the saliency normalization.
const SALIENCY_TAU: f64 = 1e-3;

/// Pixelwise convex weights assigning the fusion targets to each modality:
/// `m_x + m_y = 1` per pixel, both in `[0,1]`.
#[derive(Clone, Debug)]
pub struct SaliencyPair<T> {
    pub m_x: Tensor<T>,
    pub m_y: Tensor<T>,
}

/// Contrast-deviation saliency score: 5x5 box blur of `|image - mean(image)|`
/// per sample. Zero-padded blur, uniform 1/25 weights.
pub fn saliency_scores<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(Error::ShapeMismatch {
            op: "saliency_scores".into(),
            detail: format!("expected single-channel input, got {c} channels"),
        });
    }
    let mut out = Tensor::zeros(image.shape());
    for bi in 0..b {
        let plane = &image.data()[bi * h * w..(bi + 1) * h * w];
        let mut mean = T::zero();
        for &v in plane {
            mean = mean + v;
        }
        mean = mean / T::from_f64((h * w) as f64);
        let dev: Vec<T> = plane.iter().map(|&v| (v - mean).abs()).collect();
        let dst = &mut out.data_mut()[bi * h * w..(bi + 1) * h * w];
        let inv = T::from_f64(1.0 / 25.0);
        for py in 0..h as isize {
            for px in 0..w as isize {
                let mut s = T::zero();
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        let (iy, ix) = (py + dy, px + dx);
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            s = s + dev[iy as usize * w + ix as usize];
                        }
                    }
                }
                dst[py as usize * w + px as usize] = s * inv;
            }
        }
    }
    Ok(out)
}

/// Convex normalization of two saliency scores.
pub fn saliency_from_scores<T: Scalar>(s_x: &Tensor<T>, s_y: &Tensor<T>, tau: f64) -> Result<SaliencyPair<T>> {
    let tau = T::from_f64(tau);
    let two_tau = tau + tau;
    let m_x = s_x.zip_map(s_y, |a, b| (a + tau) / (a + b + two_tau))?;
    let m_y = m_x.map(|v| T::one() - v);
    Ok(SaliencyPair { m_x, m_y })
}

/// Saliency weights for a pair of source images.
pub fn saliency_pair<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<SaliencyPair<T>> {
    let s_x = saliency_scores(x)?;
    let s_y = saliency_scores(y)?;
    saliency_from_scores(&s_x, &s_y, SALIENCY_TAU)
}

/// Term weights of the fusion loss and the attacked-training weight of the
/// hybrid objective. The two flags select the spelled-out alternatives of the
/// loss: a raw `+SSIM` term instead of `1 - SSIM`, and mask-weighted
/// differences instead of masked targets.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda: f64,
    pub w_mse: f64,
    pub w_ssim: f64,
    pub ssim_literal: bool,
    pub masked_difference: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 1.0, w_mse: 1.0, w_ssim: 1.0, ssim_literal: false, masked_difference: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.w_mse < 0.0 || self.w_ssim < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean local structural similarity over 7x7 uniform windows, dynamic range
/// 1. Differentiable; result in `(-1, 1]`.
pub fn ssim<T: Scalar>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let shape = tape.value(a).shape().to_vec();
    if shape != tape.value(b).shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim".into(),
            detail: format!("{:?} vs {:?}", shape, tape.value(b).shape()),
        });
    }
    let mu_a = tape.box_mean_valid(a, SSIM_WINDOW).map_err(|_| Error::ShapeMismatch {
        op: "ssim".into(),
        detail: format!("{SSIM_WINDOW}x{SSIM_WINDOW} window does not fit image {shape:?}"),
    })?;
    let mu_b = tape.box_mean_valid(b, SSIM_WINDOW)?;

    let a2 = tape.square(a)?;
    let b2 = tape.square(b)?;
    let ab = tape.mul(a, b)?;
    let mu_a2 = tape.square(mu_a)?;
    let mu_b2 = tape.square(mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;

    let e_a2 = tape.box_mean_valid(a2, SSIM_WINDOW)?;
    let e_b2 = tape.box_mean_valid(b2, SSIM_WINDOW)?;
    let e_ab = tape.box_mean_valid(ab, SSIM_WINDOW)?;
    let var_a = tape.sub(e_a2, mu_a2)?;
    let var_b = tape.sub(e_b2, mu_b2)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let win_shape = tape.value(mu_a).shape().to_vec();
    let c1 = tape.constant(Tensor::full(&win_shape, T::from_f64(SSIM_C1)));
    let c2 = tape.constant(Tensor::full(&win_shape, T::from_f64(SSIM_C2)));

    let two_mu_ab = tape.scale(mu_ab, 2.0)?;
    let l_num = tape.add(two_mu_ab, c1)?;
    let two_cov = tape.scale(cov, 2.0)?;
    let c_num = tape.add(two_cov, c2)?;
    let num = tape.mul(l_num, c_num)?;

    let mu_sum = tape.add(mu_a2, mu_b2)?;
    let l_den = tape.add(mu_sum, c1)?;
    let var_sum = tape.add(var_a, var_b)?;
    let c_den = tape.add(var_sum, c2)?;
    let den = tape.mul(l_den, c_den)?;

    let map = tape.div(num, den)?;
    tape.scalar_mean(map)
}

/// The fusion objective: masked MSE terms toward each modality plus a
/// structural term against the saliency-blended target.
pub fn fusion_loss<T: Scalar>(
    tape: &mut Tape<T>,
    u: NodeId,
    x: NodeId,
    y: NodeId,
    sal: &SaliencyPair<T>,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    let m_x = tape.constant(sal.m_x.clone());
    let m_y = tape.constant(sal.m_y.clone());

    let mse_term = |tape: &mut Tape<T>, mask: NodeId, src: NodeId| -> Result<NodeId> {
        let d = if w.masked_difference {
            let diff = tape.sub(u, src)?;
            tape.mul(mask, diff)?
        } else {
            let target = tape.mul(mask, src)?;
            tape.sub(u, target)?
        };
        let sq = tape.square(d)?;
        tape.scalar_mean(sq)
    };
    let mse_x = mse_term(tape, m_x, x)?;
    let mse_y = mse_term(tape, m_y, y)?;
    let mse = tape.add(mse_x, mse_y)?;

    let tx = tape.mul(m_x, x)?;
    let ty = tape.mul(m_y, y)?;
    let blend = tape.add(tx, ty)?;
    let s = ssim(tape, u, blend)?;
    let ssim_term = if w.ssim_literal {
        s
    } else {
        let one = tape.constant(Tensor::scalar(T::one()));
        tape.sub(one, s)?
    };

    let mse_w = tape.scale(mse, w.w_mse)?;
    let ssim_w = tape.scale(ssim_term, w.w_ssim)?;
    tape.add(mse_w, ssim_w)
}

/// On-tape images of a batch, leafed once so losses and networks share nodes.
pub struct BatchNodes {
    pub x: NodeId,
    pub y: NodeId,
    pub labels: LabelMap,
}

pub fn leaf_batch<T: Scalar>(tape: &mut Tape<T>, batch: &SampleBatch, requires_grad: bool) -> BatchNodes {
    BatchNodes {
        x: tape.leaf(batch.x.cast(), requires_grad),
        y: tape.leaf(batch.y.cast(), requires_grad),
        labels: batch.labels.clone(),
    }
}

/// `0.5 * L_F + 0.5 * L_T` on one batch: the equal blend of fusion and task
/// losses used for both training and validation.
pub fn combined_loss<S: SlotModule, T: Scalar>(
    tape: &mut Tape<T>,
    pipeline: &FusionPipeline<S>,
    head: &SegHead,
    binding: &Binding,
    nodes: &BatchNodes,
    w: &LossWeights,
) -> Result<NodeId> {
    let out = pipeline.forward(tape, binding, nodes.x, nodes.y)?;
    let sal = saliency_pair(&tape.value(nodes.x).clone(), &tape.value(nodes.y).clone())?;
    let l_f = fusion_loss(tape, out.fused, nodes.x, nodes.y, &sal, w)?;
    let logits = head.forward(tape, binding, out.fused)?;
    let l_t = cross_entropy(tape, logits, &nodes.labels)?;
    let half_f = tape.scale(l_f, 0.5)?;
    let half_t = tape.scale(l_t, 0.5)?;
    tape.add(half_f, half_t)
}

/// The three hybrid terms and the lower-level objective
/// `L_tr + lambda * L_tr_at`.
pub struct HybridTerms {
    pub l_tr: NodeId,
    pub l_val: NodeId,
    pub l_tr_at: NodeId,
    pub objective: NodeId,
}

pub fn hybrid_losses<S: SlotModule, T: Scalar>(
    tape: &mut Tape<T>,
    pipeline: &FusionPipeline<S>,
    head: &SegHead,
    binding: &Binding,
    train_batch: &SampleBatch,
    val_batch: &SampleBatch,
    attacked_batch: &SampleBatch,
    w: &LossWeights,
) -> Result<HybridTerms> {
    let tr = leaf_batch(tape, train_batch, false);
    let va = leaf_batch(tape, val_batch, false);
    let at = leaf_batch(tape, attacked_batch, false);
    let l_tr = combined_loss(tape, pipeline, head, binding, &tr, w)?;
    let l_val = combined_loss(tape, pipeline, head, binding, &va, w)?;
    let l_tr_at = combined_loss(tape, pipeline, head, binding, &at, w)?;
    let weighted = tape.scale(l_tr_at, w.lambda)?;
    let objective = tape.add(l_tr, weighted)?;
    Ok(HybridTerms { l_tr, l_val, l_tr_at, objective })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone(), false);
        let bid = tape.leaf(b.clone(), false);
        let s = ssim(&mut tape, aid, bid).unwrap();
        tape.value(s).item().unwrap()
    }

    #[test]
    fn saliency_equal_images_split_evenly() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| ((i * 31 % 64) as f64) / 64.0);
        let pair = saliency_pair(&x, &x).unwrap();
        for (&a, &b) in pair.m_x.data().iter().zip(pair.m_y.data()) {
            assert!((a - 0.5).abs() < 1e-12);
            assert!((b - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn saliency_vanishing_score_yields_near_zero_weight() {
        let s_x = Tensor::<f64>::full(&[1, 1, 1, 1], 0.0);
        let s_y = Tensor::<f64>::full(&[1, 1, 1, 1], 0.5);
        let pair = saliency_from_scores(&s_x, &s_y, 1e-3).unwrap();
        let expected = 1e-3 / (0.5 + 2e-3);
        assert!((pair.m_x.data()[0] - expected).abs() < 1e-12);
        assert!(pair.m_x.data()[0] < 0.01);
    }

    #[test]
    fn saliency_two_pixel_hand_case() {
        let s_x = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![0.2, 0.0]).unwrap();
        let s_y = Tensor::<f64>::new(vec![1, 1, 1, 2], vec![0.0, 0.2]).unwrap();
        let pair = saliency_from_scores(&s_x, &s_y, 1e-3).unwrap();
        assert!((pair.m_x.data()[0] - 0.201 / 0.202).abs() < 1e-12);
        assert!((pair.m_x.data()[1] - 0.001 / 0.202).abs() < 1e-12);
        assert!((pair.m_x.data()[0] - 0.995).abs() < 1e-3);
        assert!((pair.m_x.data()[1] - 0.005).abs() < 1e-3);
    }

    #[test]
    fn saliency_weights_always_convex() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 9, 9], |i| ((i * 13 % 37) as f64) / 37.0);
        let y = Tensor::<f64>::from_fn(&[2, 1, 9, 9], |i| ((i * 7 % 29) as f64) / 29.0);
        let pair = saliency_pair(&x, &y).unwrap();
        for (&a, &b) in pair.m_x.data().iter().zip(pair.m_y.data()) {
            assert!((a + b - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = Tensor::<f64>::from_fn(&[1, 1, 9, 9], |i| ((i * 41 % 81) as f64) / 81.0);
        assert!((eval_ssim(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_contrast_closed_form() {
        let a = Tensor::<f64>::full(&[1, 1, 8, 8], 0.0);
        let b = Tensor::<f64>::full(&[1, 1, 8, 8], 1.0);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((eval_ssim(&a, &b) - expected).abs() < 1e-12);
        assert!(expected < 1.1e-4);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = Tensor::<f64>::from_fn(&[1, 1, 10, 10], |i| ((i * 17 % 50) as f64) / 50.0);
        let b = Tensor::<f64>::from_fn(&[1, 1, 10, 10], |i| ((i * 23 % 71) as f64) / 71.0);
        assert!((eval_ssim(&a, &b) - eval_ssim(&b, &a)).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        let mut tape = Tape::new();
        let aid = tape.leaf(a.clone(), false);
        let bid = tape.leaf(a, false);
        assert!(ssim(&mut tape, aid, bid).is_err());
    }

    #[test]
    fn fusion_loss_zero_for_all_zero_inputs() {
        let z = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        let sal = saliency_pair(&z, &z).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(z.clone(), false);
        let x = tape.leaf(z.clone(), false);
        let y = tape.leaf(z, false);
        let loss = fusion_loss(&mut tape, u, x, y, &sal, &LossWeights::default()).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn fusion_loss_blend_target_case() {
        // With x == y, u = M_x*x + M_y*y = x: the MSE terms reduce to
        // mean((M_y*x)^2) and mean((M_x*x)^2) and the SSIM term vanishes.
        let x = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| ((i * 19 % 64) as f64) / 64.0);
        let sal = saliency_pair(&x, &x).unwrap();
        let blend = sal
            .m_x
            .zip_map(&x, |m, v| m * v)
            .unwrap()
            .zip_map(&sal.m_y.zip_map(&x, |m, v| m * v).unwrap(), |a, b| a + b)
            .unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(blend, false);
        let xid = tape.leaf(x.clone(), false);
        let yid = tape.leaf(x.clone(), false);
        let loss = fusion_loss(&mut tape, u, xid, yid, &sal, &LossWeights::default()).unwrap();

        let m1: f64 = sal
            .m_y
            .zip_map(&x, |m, v| (m * v) * (m * v))
            .unwrap()
            .mean();
        let m2: f64 = sal
            .m_x
            .zip_map(&x, |m, v| (m * v) * (m * v))
            .unwrap()
            .mean();
        let got = tape.value(loss).item().unwrap();
        assert!((got - (m1 + m2)).abs() < 1e-9, "got {got}, expected {}", m1 + m2);
    }

    #[test]
    fn fusion_loss_is_nonnegative() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| ((i * 3 % 17) as f64) / 17.0);
        let y = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| ((i * 11 % 23) as f64) / 23.0);
        let u = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| ((i * 29 % 31) as f64) / 31.0);
        let sal = saliency_pair(&x, &y).unwrap();
        let mut tape = Tape::new();
        let uid = tape.leaf(u, false);
        let xid = tape.leaf(x, false);
        let yid = tape.leaf(y, false);
        let loss = fusion_loss(&mut tape, uid, xid, yid, &sal, &LossWeights::default()).unwrap();
        assert!(tape.value(loss).item().unwrap() >= 0.0);
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights { w_mse: -1.0, ..Default::default() };
        assert!(w.validate().is_err());
    }
}
