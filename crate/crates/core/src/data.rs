//! Paired-modality samples and batching helpers.

use crate::error::{Error, Result};
use crate::seg::LabelMap;
use crate::tensor::{stack_batch, Tensor};

/// A batch of paired infrared/visible images with per-pixel class labels.
/// Images are `(B,1,H,W)` in `[0,1]`; labels are `(B,H,W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub x: Tensor<f32>,
    pub y: Tensor<f32>,
    pub labels: LabelMap,
}

impl SampleBatch {
    pub fn new(x: Tensor<f32>, y: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let batch = Self { x, y, labels };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, c, h, w) = self.x.dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "SampleBatch".into(),
                detail: format!("infrared channel extent must be 1, got {c}"),
            });
        }
        if self.y.shape() != self.x.shape() {
            return Err(Error::ShapeMismatch {
                op: "SampleBatch".into(),
                detail: format!("x {:?} vs y {:?}", self.x.shape(), self.y.shape()),
            });
        }
        if self.labels.shape() != [b, h, w] {
            return Err(Error::ShapeMismatch {
                op: "SampleBatch".into(),
                detail: format!("labels {:?} vs images {:?}", self.labels.shape(), self.x.shape()),
            });
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }

    /// Assemble a minibatch from single-sample entries of a dataset.
    pub fn gather(data: &[SampleBatch], indices: &[usize]) -> Result<SampleBatch> {
        let xs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &data[i].x).collect();
        let ys: Vec<&Tensor<f32>> = indices.iter().map(|&i| &data[i].y).collect();
        let ls: Vec<&LabelMap> = indices.iter().map(|&i| &data[i].labels).collect();
        SampleBatch::new(stack_batch(&xs)?, stack_batch(&ys)?, LabelMap::stack(&ls)?)
    }

    /// Split one batch into per-index sub-batches `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<SampleBatch> {
        let (b, _, h, w) = self.x.dims4()?;
        if start >= end || end > b {
            return Err(Error::InvalidConfig(format!("bad slice {start}..{end} of batch {b}")));
        }
        let plane = h * w;
        let x = Tensor::new(
            vec![end - start, 1, h, w],
            self.x.data()[start * plane..end * plane].to_vec(),
        )?;
        let y = Tensor::new(
            vec![end - start, 1, h, w],
            self.y.data()[start * plane..end * plane].to_vec(),
        )?;
        let labels = LabelMap::new(
            [end - start, h, w],
            self.labels.data()[start * plane..end * plane].to_vec(),
        )?;
        SampleBatch::new(x, y, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(v: f32, label: u8) -> SampleBatch {
        SampleBatch::new(
            Tensor::full(&[1, 1, 2, 2], v),
            Tensor::full(&[1, 1, 2, 2], v * 0.5),
            LabelMap::new([1, 2, 2], vec![label; 4]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn gather_and_slice_round_trip() {
        let data = vec![sample(0.1, 0), sample(0.2, 1), sample(0.3, 2)];
        let batch = SampleBatch::gather(&data, &[2, 0]).unwrap();
        assert_eq!(batch.batch_size(), 2);
        assert_eq!(batch.x.data()[0], 0.3);
        let back = batch.slice(1, 2).unwrap();
        assert_eq!(back, data[0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let x = Tensor::full(&[1, 1, 2, 2], 0.0);
        let y = Tensor::full(&[1, 1, 3, 3], 0.0);
        let l = LabelMap::new([1, 2, 2], vec![0; 4]).unwrap();
        assert!(SampleBatch::new(x, y, l).is_err());
    }
}
