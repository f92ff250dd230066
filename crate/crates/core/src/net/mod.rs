//! The proposal network: five residual groups with four poolings down, two
//! deconvolution stages with skip concatenation up, and a 1³ convolution head
//! emitting per-anchor classification logits and regression offsets.

mod graph;
mod params;

pub use graph::{build_network, BlockTrace, Network, PoolTrace, Trace, UpTrace};
pub use params::{PValue, ParamStore, CHECKPOINT_VERSION};

use crate::error::{Error, Result};

/// Values emitted per anchor: (logit, t_x, t_y, t_z, t_d).
pub const HEAD_VALUES: usize = 5;

/// Shape of the network family; the topology is fixed, the widths are not.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Output width of each of the five down-path residual groups.
    pub group_channels: [usize; 5],
    /// Residual blocks per down-path group.
    pub blocks_per_group: [usize; 5],
    /// Anchor cube diameters in millimetres.
    pub anchors_mm: Vec<f32>,
    /// Input crop side m; must be a multiple of 16 so all four pools divide.
    pub crop_side: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            group_channels: [24, 32, 64, 64, 64],
            blocks_per_group: [2, 2, 3, 3, 3],
            anchors_mm: vec![10.0, 30.0, 60.0],
            crop_side: 128,
        }
    }
}

impl NetworkConfig {
    /// Smallest exercisable network: m=16, channels [2,2,4,4,4], one block
    /// per group. Used for end-to-end gradient checking.
    pub fn tiny() -> Self {
        NetworkConfig {
            group_channels: [2, 2, 4, 4, 4],
            blocks_per_group: [1, 1, 1, 1, 1],
            anchors_mm: vec![10.0, 30.0, 60.0],
            crop_side: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_side == 0 || self.crop_side % 16 != 0 {
            return Err(Error::Config(format!(
                "crop side {} is not a positive multiple of 16",
                self.crop_side
            )));
        }
        if self.group_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("group channel widths must be >= 1".into()));
        }
        if self.blocks_per_group.iter().any(|&b| b == 0) {
            return Err(Error::Config("each group needs at least one block".into()));
        }
        if self.anchors_mm.is_empty() {
            return Err(Error::Config("at least one anchor diameter is required".into()));
        }
        if self.anchors_mm.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("anchor diameters must be positive".into()));
        }
        Ok(())
    }

    /// Side of the head grid: m/4 (four ÷2 pools, two ×2 deconvolutions).
    pub fn head_side(&self) -> usize {
        self.crop_side / 4
    }

    pub fn anchor_count(&self) -> usize {
        self.anchors_mm.len()
    }

    /// Channels of the head convolution output: A·5.
    pub fn head_channels(&self) -> usize {
        self.anchor_count() * HEAD_VALUES
    }
}

/// Network output reshaped to (n, s, s, s, A, 5) with s = m/4, value order
/// (logit, t_x, t_y, t_z, t_d).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    n: usize,
    side: usize,
    anchors: usize,
    data: Vec<f32>,
}

impl HeadOutput {
    pub fn zeros(n: usize, side: usize, anchors: usize) -> Self {
        HeadOutput { n, side, anchors, data: vec![0.0; n * side * side * side * anchors * HEAD_VALUES] }
    }

    /// (n, grid side, anchors).
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.side, self.anchors)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index_of(&self, n: usize, i: usize, j: usize, k: usize, a: usize, v: usize) -> usize {
        ((((n * self.side + i) * self.side + j) * self.side + k) * self.anchors + a)
            * HEAD_VALUES
            + v
    }

    #[inline]
    pub fn at(&self, n: usize, i: usize, j: usize, k: usize, a: usize, v: usize) -> f32 {
        self.data[self.index_of(n, i, j, k, a, v)]
    }

    #[inline]
    pub fn at_mut(
        &mut self,
        n: usize,
        i: usize,
        j: usize,
        k: usize,
        a: usize,
        v: usize,
    ) -> &mut f32 {
        let idx = self.index_of(n, i, j, k, a, v);
        &mut self.data[idx]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Rearranges the head convolution output (n, A·5, s, s, s), channel
    /// index a·5+v, into the grid layout.
    pub fn from_conv_output(t: &crate::tensor::Tensor5, anchors: usize) -> Result<Self> {
        let (n, c, d, h, w) = t.dims();
        if c != anchors * HEAD_VALUES || d != h || h != w {
            return Err(Error::Shape(format!(
                "head conv output {:?} does not match {anchors} anchors x {HEAD_VALUES} values on a cubic grid",
                t.dims()
            )));
        }
        let side = d;
        let mut out = HeadOutput::zeros(n, side, anchors);
        for s in 0..n {
            for a in 0..anchors {
                for v in 0..HEAD_VALUES {
                    let ch = a * HEAD_VALUES + v;
                    for i in 0..side {
                        for j in 0..side {
                            for k in 0..side {
                                *out.at_mut(s, i, j, k, a, v) = t.at(s, ch, i, j, k);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`from_conv_output`]: grid-layout values back to the
    /// (n, A·5, s, s, s) tensor layout (used to push gradients into the head).
    pub fn to_conv_layout(&self) -> crate::tensor::Tensor5 {
        let mut t = crate::tensor::Tensor5::zeros(
            self.n,
            self.anchors * HEAD_VALUES,
            self.side,
            self.side,
            self.side,
        );
        for s in 0..self.n {
            for a in 0..self.anchors {
                for v in 0..HEAD_VALUES {
                    let ch = a * HEAD_VALUES + v;
                    for i in 0..self.side {
                        for j in 0..self.side {
                            for k in 0..self.side {
                                *t.at_mut(s, ch, i, j, k) = self.at(s, i, j, k, a, v);
                            }
                        }
                    }
                }
            }
        }
        t
    }
}
