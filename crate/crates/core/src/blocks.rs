//! Operation blocks the fusion networks are assembled from.
//!
//! Six families: plain and dilated convolutions, residual blocks, dense
//! blocks (3 layers, dense connectivity), and spatial / channel attention.
//! Every block preserves spatial extent; convolutions are stride 1 with zero
//! same-padding.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{Binding, ShapeMap};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Operation family of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpFamily {
    /// Plain convolution + relu.
    Conv,
    /// Dilation-2 convolution + relu.
    DilatedConv,
    /// conv - relu - conv plus identity skip (1x1 projection when channels differ).
    ResidualBlock,
    /// 3 densely connected conv layers plus a 1x1 fuse.
    DenseBlock,
    /// 1-channel sigmoid mask from channel-mean/max maps, applied multiplicatively.
    SpatialAttention,
    /// Per-channel sigmoid scale from a squeeze-excite bottleneck (reduction 4).
    ChannelAttention,
}

impl OpFamily {
    fn uses_kernel(self) -> bool {
        !matches!(self, OpFamily::SpatialAttention | OpFamily::ChannelAttention)
    }

    fn tag(self) -> &'static str {
        match self {
            OpFamily::Conv => "C",
            OpFamily::DilatedConv => "DC",
            OpFamily::ResidualBlock => "RB",
            OpFamily::DenseBlock => "DB",
            OpFamily::SpatialAttention => "SA",
            OpFamily::ChannelAttention => "CA",
        }
    }
}

/// A discrete operation choice: family plus kernel size (3, 5 or 7; the
/// attention families ignore it and store 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OpCode {
    pub family: OpFamily,
    pub kernel: usize,
}

impl OpCode {
    pub fn new(family: OpFamily, kernel: usize) -> Result<Self> {
        if family.uses_kernel() {
            if ![3, 5, 7].contains(&kernel) {
                return Err(Error::InvalidConfig(format!(
                    "kernel {} not in {{3,5,7}} for {}",
                    kernel,
                    family.tag()
                )));
            }
            Ok(Self { family, kernel })
        } else {
            Ok(Self { family, kernel: 0 })
        }
    }

    pub fn conv(kernel: usize) -> Result<Self> {
        Self::new(OpFamily::Conv, kernel)
    }

    pub fn dilated(kernel: usize) -> Result<Self> {
        Self::new(OpFamily::DilatedConv, kernel)
    }

    pub fn residual(kernel: usize) -> Result<Self> {
        Self::new(OpFamily::ResidualBlock, kernel)
    }

    pub fn dense(kernel: usize) -> Result<Self> {
        Self::new(OpFamily::DenseBlock, kernel)
    }

    pub fn spatial_attention() -> Self {
        Self { family: OpFamily::SpatialAttention, kernel: 0 }
    }

    pub fn channel_attention() -> Self {
        Self { family: OpFamily::ChannelAttention, kernel: 0 }
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.family.uses_kernel() {
            write!(f, "{}-{}", self.kernel, self.family.tag())
        } else {
            write!(f, "{}", self.family.tag())
        }
    }
}

impl FromStr for OpCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "SA" => return Ok(OpCode::spatial_attention()),
            "CA" => return Ok(OpCode::channel_attention()),
            _ => {}
        }
        let (k, fam) = s.split_once('-').ok_or_else(|| {
            Error::InvalidConfig(format!("cannot parse op code `{s}` (expected e.g. 3-DB, 7-RB, CA)"))
        })?;
        let kernel: usize = k
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad kernel in op code `{s}`")))?;
        let family = match fam {
            "C" => OpFamily::Conv,
            "DC" => OpFamily::DilatedConv,
            "RB" => OpFamily::ResidualBlock,
            "DB" => OpFamily::DenseBlock,
            other => return Err(Error::InvalidConfig(format!("unknown op family `{other}`"))),
        };
        OpCode::new(family, kernel)
    }
}

/// Abstraction over the per-slot computations of a fusion pipeline: discrete
/// blocks here, softmax mixtures during search.
pub trait SlotModule {
    fn declare(&self, shapes: &mut ShapeMap);
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, binding: &Binding, x: NodeId) -> Result<NodeId>;
}

/// A parameterized differentiable block `Tensor -> Tensor` built from an
/// `OpCode`. Parameters live under `prefix` in the owning store.
#[derive(Clone, Debug)]
pub struct Block {
    code: OpCode,
    in_ch: usize,
    out_ch: usize,
    prefix: String,
}

/// Dilation-2 for the DC family, 1 otherwise.
fn dilation_of(code: OpCode) -> usize {
    if code.family == OpFamily::DilatedConv {
        2
    } else {
        1
    }
}

impl Block {
    pub fn new(code: OpCode, in_ch: usize, out_ch: usize, prefix: impl Into<String>) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 {
            return Err(Error::InvalidConfig(format!(
                "block {code} requires positive channels, got {in_ch}->{out_ch}"
            )));
        }
        Ok(Self { code, in_ch, out_ch, prefix: prefix.into() })
    }

    pub fn code(&self) -> OpCode {
        self.code
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    /// Attention blocks adapt channels with a leading 1x1 conv when needed.
    fn needs_adapter(&self) -> bool {
        matches!(self.code.family, OpFamily::SpatialAttention | OpFamily::ChannelAttention)
            && self.in_ch != self.out_ch
    }

    fn bottleneck(&self) -> usize {
        (self.out_ch / 4).max(1)
    }

    /// Number of scalar parameters, by construction.
    pub fn param_count(&self) -> usize {
        let mut shapes = ShapeMap::new();
        self.declare(&mut shapes);
        shapes.total_elements()
    }

    fn conv_helper<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        binding: &Binding,
        part: &str,
        x: NodeId,
        dilation: usize,
    ) -> Result<NodeId> {
        let w = binding.node(&self.name(&format!("{part}.weight")))?;
        let b = binding.node(&self.name(&format!("{part}.bias")))?;
        tape.conv2d(x, w, b, dilation)
    }
}

impl SlotModule for Block {
    fn declare(&self, shapes: &mut ShapeMap) {
        let (ci, co, k) = (self.in_ch, self.out_ch, self.code.kernel);
        match self.code.family {
            OpFamily::Conv | OpFamily::DilatedConv => {
                shapes.insert(self.name("conv.weight"), vec![co, ci, k, k]);
                shapes.insert(self.name("conv.bias"), vec![co]);
            }
            OpFamily::ResidualBlock => {
                shapes.insert(self.name("conv1.weight"), vec![co, ci, k, k]);
                shapes.insert(self.name("conv1.bias"), vec![co]);
                shapes.insert(self.name("conv2.weight"), vec![co, co, k, k]);
                shapes.insert(self.name("conv2.bias"), vec![co]);
                if ci != co {
                    shapes.insert(self.name("skip.weight"), vec![co, ci, 1, 1]);
                    shapes.insert(self.name("skip.bias"), vec![co]);
                }
            }
            OpFamily::DenseBlock => {
                let g = co;
                for j in 0..3 {
                    shapes.insert(self.name(&format!("layer{j}.weight")), vec![g, ci + j * g, k, k]);
                    shapes.insert(self.name(&format!("layer{j}.bias")), vec![g]);
                }
                shapes.insert(self.name("fuse.weight"), vec![co, ci + 3 * g, 1, 1]);
                shapes.insert(self.name("fuse.bias"), vec![co]);
            }
            OpFamily::SpatialAttention => {
                if self.needs_adapter() {
                    shapes.insert(self.name("adapt.weight"), vec![co, ci, 1, 1]);
                    shapes.insert(self.name("adapt.bias"), vec![co]);
                }
                shapes.insert(self.name("mask.weight"), vec![1, 2, 7, 7]);
                shapes.insert(self.name("mask.bias"), vec![1]);
            }
            OpFamily::ChannelAttention => {
                if self.needs_adapter() {
                    shapes.insert(self.name("adapt.weight"), vec![co, ci, 1, 1]);
                    shapes.insert(self.name("adapt.bias"), vec![co]);
                }
                let r = self.bottleneck();
                shapes.insert(self.name("squeeze.weight"), vec![r, co, 1, 1]);
                shapes.insert(self.name("squeeze.bias"), vec![r]);
                shapes.insert(self.name("excite.weight"), vec![co, r, 1, 1]);
                shapes.insert(self.name("excite.bias"), vec![co]);
            }
        }
    }

    fn in_channels(&self) -> usize {
        self.in_ch
    }

    fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, binding: &Binding, x: NodeId) -> Result<NodeId> {
        let d = dilation_of(self.code);
        match self.code.family {
            OpFamily::Conv | OpFamily::DilatedConv => {
                let y = self.conv_helper(tape, binding, "conv", x, d)?;
                tape.relu(y)
            }
            OpFamily::ResidualBlock => {
                let h = self.conv_helper(tape, binding, "conv1", x, 1)?;
                let h = tape.relu(h)?;
                let h = self.conv_helper(tape, binding, "conv2", h, 1)?;
                let skip = if self.in_ch == self.out_ch {
                    x
                } else {
                    self.conv_helper(tape, binding, "skip", x, 1)?
                };
                tape.add(h, skip)
            }
            OpFamily::DenseBlock => {
                let mut feats = vec![x];
                for j in 0..3 {
                    let inp = if feats.len() == 1 {
                        feats[0]
                    } else {
                        tape.concat_channels(&feats)?
                    };
                    let y = self.conv_helper(tape, binding, &format!("layer{j}"), inp, 1)?;
                    feats.push(tape.relu(y)?);
                }
                let all = tape.concat_channels(&feats)?;
                self.conv_helper(tape, binding, "fuse", all, 1)
            }
            OpFamily::SpatialAttention => {
                let h = if self.needs_adapter() {
                    self.conv_helper(tape, binding, "adapt", x, 1)?
                } else {
                    x
                };
                let mean_map = tape.spatial_mean(h)?;
                let max_map = tape.channel_max(h)?;
                let stats = tape.concat_channels(&[mean_map, max_map])?;
                let logits = self.conv_helper(tape, binding, "mask", stats, 1)?;
                let mask = tape.sigmoid(logits)?;
                tape.broadcast_mul(h, mask)
            }
            OpFamily::ChannelAttention => {
                let h = if self.needs_adapter() {
                    self.conv_helper(tape, binding, "adapt", x, 1)?
                } else {
                    x
                };
                let pooled = tape.global_avg_pool(h)?;
                let z = self.conv_helper(tape, binding, "squeeze", pooled, 1)?;
                let z = tape.relu(z)?;
                let e = self.conv_helper(tape, binding, "excite", z, 1)?;
                let scales = tape.sigmoid(e)?;
                tape.broadcast_mul(h, scales)
            }
        }
    }
}
