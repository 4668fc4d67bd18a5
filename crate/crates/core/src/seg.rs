//! Downstream perception: a small segmentation head, its cross-entropy loss,
//! and the mean-IoU metric.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{init_parameters, Binding, ParameterStore, ShapeMap};
use crate::tape::{NodeId, Primitive, Tape};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel integer class ids, shape `(B, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "LabelMap::new".into(),
                detail: format!("shape {:?} vs {} labels", shape, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Check that every id is a valid class.
    pub fn validate(&self, classes: usize) -> Result<()> {
        for &id in &self.data {
            if id as usize >= classes {
                return Err(Error::InvalidLabel { label: id as u32, classes });
            }
        }
        Ok(())
    }

    /// Stack single-sample maps into one batch map.
    pub fn stack(maps: &[&LabelMap]) -> Result<LabelMap> {
        let first = maps.first().ok_or_else(|| Error::ShapeMismatch {
            op: "LabelMap::stack".into(),
            detail: "empty list".into(),
        })?;
        let [b0, h, w] = first.shape;
        if b0 != 1 {
            return Err(Error::ShapeMismatch {
                op: "LabelMap::stack".into(),
                detail: format!("expected batch extent 1, got {b0}"),
            });
        }
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if m.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "LabelMap::stack".into(),
                    detail: format!("{:?} vs {:?}", m.shape, first.shape),
                });
            }
            data.extend_from_slice(&m.data);
        }
        LabelMap::new([maps.len(), h, w], data)
    }
}

/// Tiny segmentation head: 3 conv blocks at a fixed width, then a 1x1
/// classifier. Logits keep the input spatial extent.
#[derive(Clone, Debug)]
pub struct SegHead {
    base_channels: usize,
    classes: usize,
}

impl SegHead {
    pub fn new(base_channels: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need >= 2 classes, got {classes}")));
        }
        if base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be positive".into()));
        }
        Ok(Self { base_channels, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn shape_map(&self) -> ShapeMap {
        let c = self.base_channels;
        let mut shapes = ShapeMap::new();
        shapes.insert("seg.block0.weight", vec![c, 1, 3, 3]);
        shapes.insert("seg.block0.bias", vec![c]);
        shapes.insert("seg.block1.weight", vec![c, c, 3, 3]);
        shapes.insert("seg.block1.bias", vec![c]);
        shapes.insert("seg.block2.weight", vec![c, c, 3, 3]);
        shapes.insert("seg.block2.bias", vec![c]);
        shapes.insert("seg.classifier.weight", vec![self.classes, c, 1, 1]);
        shapes.insert("seg.classifier.bias", vec![self.classes]);
        shapes
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore<f32>> {
        init_parameters(&self.shape_map(), seed)
    }

    /// `u -> logits (B, K, H, W)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, binding: &Binding, u: NodeId) -> Result<NodeId> {
        let mut h = u;
        for i in 0..3 {
            let w = binding.node(&format!("seg.block{i}.weight"))?;
            let b = binding.node(&format!("seg.block{i}.bias"))?;
            h = tape.conv2d(h, w, b, 1)?;
            h = tape.relu(h)?;
        }
        let w = binding.node("seg.classifier.weight")?;
        let b = binding.node("seg.classifier.bias")?;
        tape.conv2d(h, w, b, 1)
    }
}

/// Mean over pixels of the negative log-probability of the true class.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: NodeId, labels: &LabelMap) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    let [b, h, w] = labels.shape();
    if shape.len() != 4 || shape[0] != b || shape[2] != h || shape[3] != w {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy".into(),
            detail: format!("logits {:?} vs labels {:?}", shape, labels.shape()),
        });
    }
    labels.validate(shape[1])?;
    let ids: Vec<u32> = labels.data().iter().map(|&v| v as u32).collect();
    tape.apply(Primitive::CrossEntropyMean { labels: Arc::new(ids) }, &[logits])
}

/// Argmax over the class axis of logits `(B,K,H,W)`; ties choose the lowest
/// class id.
pub fn predict_labels<T: Scalar>(logits: &Tensor<T>) -> Result<LabelMap> {
    let (b, k, h, w) = logits.dims4()?;
    if k > u8::MAX as usize {
        return Err(Error::InvalidConfig(format!("{k} classes exceed the label width")));
    }
    let mut data = vec![0u8; b * h * w];
    let ld = logits.data();
    for bi in 0..b {
        for p in 0..h * w {
            let mut best = ld[bi * k * h * w + p];
            let mut best_c = 0u8;
            for ci in 1..k {
                let v = ld[(bi * k + ci) * h * w + p];
                if v > best {
                    best = v;
                    best_c = ci as u8;
                }
            }
            data[bi * h * w + p] = best_c;
        }
    }
    LabelMap::new([b, h, w], data)
}

/// Per-class intersection-over-union and its mean. Classes absent from both
/// prediction and truth are excluded from the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MiouResult {
    /// IoU per class; `None` when the class appears in neither map.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<MiouResult> {
    if classes < 2 {
        return Err(Error::InvalidConfig(format!("mIoU needs >= 2 classes, got {classes}")));
    }
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "miou".into(),
            detail: format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        });
    }
    pred.validate(classes)?;
    truth.validate(classes)?;

    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        if p == t {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[t as usize] += 1;
        }
    }

    let mut per_class = Vec::with_capacity(classes);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let denom = tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp[c] as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    let mean = if counted == 0 { 0.0 } else { sum / counted as f64 };
    Ok(MiouResult { per_class, mean })
}
