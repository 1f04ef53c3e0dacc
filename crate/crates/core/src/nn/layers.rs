use serde::{Deserialize, Serialize};

use super::init::glorot_uniform;
use super::params::{BoundParams, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::SeedScheme;
use crate::tensor::Tensor;

/// `Conv(C, K, S)`: `out_channels` square `kernel x kernel` filters with the
/// given stride, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayerParams {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    /// Output side length for a square input of side `side`, if positive.
    pub fn output_side(&self, side: usize) -> Option<usize> {
        (side >= self.kernel && self.stride > 0).then(|| (side - self.kernel) / self.stride + 1)
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedScheme, name: &str) -> Result<()> {
        let k2 = self.kernel * self.kernel;
        let w = glorot_uniform(seeds, &format!("{name}.weight"), &self.weight_shape(), self.in_channels * k2, self.out_channels * k2);
        store.insert(format!("{name}.weight"), w)?;
        store.insert(format!("{name}.bias"), Tensor::zeros([self.out_channels]))?;
        Ok(())
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        let w = p.var(&format!("{name}.weight"))?;
        let b = p.var(&format!("{name}.bias"))?;
        g.conv2d(x, w, b, self.stride)
    }
}

/// `FC(N)`: dense `inputs x outputs` weight plus bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcLayerParams {
    pub inputs: usize,
    pub outputs: usize,
}

impl FcLayerParams {
    pub fn num_params(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seeds: &SeedScheme, name: &str) -> Result<()> {
        let w = glorot_uniform(seeds, &format!("{name}.weight"), &[self.inputs, self.outputs], self.inputs, self.outputs);
        store.insert(format!("{name}.weight"), w)?;
        store.insert(format!("{name}.bias"), Tensor::zeros([self.outputs]))?;
        Ok(())
    }

    /// `x` must be `[B, inputs]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.inputs {
            return Err(Error::dim("fc", g.shape(x), &[self.inputs, self.outputs]));
        }
        let w = p.var(&format!("{name}.weight"))?;
        let b = p.var(&format!("{name}.bias"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    if g.shape(x).len() != 4 {
        return Err(Error::shape("global_avg_pool", format!("expected [B, C, H, W], got {:?}", g.shape(x))));
    }
    g.mean(x, &[2, 3])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_zeroes_biases() {
        let mut store = ParamStore::<f32>::new();
        let s = SeedScheme::new(1);
        ConvLayerParams { in_channels: 1, out_channels: 4, kernel: 3, stride: 1 }.init(&mut store, &s, "c").unwrap();
        FcLayerParams { inputs: 5, outputs: 3 }.init(&mut store, &s, "f").unwrap();
        assert!(store.get("c.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert!(store.get("f.bias").unwrap().data().iter().all(|&b| b == 0.0));
        assert_eq!(store.num_elements(), 4 * 9 + 4 + 15 + 3);
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full([2, 3, 4, 4], 1.5));
        let p = global_avg_pool(&mut g, c).unwrap();
        assert_eq!(g.shape(p), &[2, 3]);
        assert!(g.value(p).data().iter().all(|&v| v == 1.5));
        let one_hot = g.constant(Tensor::from_f64([1, 1, 2, 2], &[0.0, 1.0, 0.0, 0.0]).unwrap());
        let q = global_avg_pool(&mut g, one_hot).unwrap();
        assert_eq!(g.value(q).item(), 0.25);
    }

    #[test]
    fn output_side_arithmetic() {
        let c1 = ConvLayerParams { in_channels: 1, out_channels: 256, kernel: 9, stride: 1 };
        let c2 = ConvLayerParams { in_channels: 256, out_channels: 256, kernel: 9, stride: 2 };
        assert_eq!(c1.output_side(40).and_then(|s| c2.output_side(s)), Some(12));
        assert_eq!(c1.output_side(28).and_then(|s| c2.output_side(s)), Some(6));
        assert_eq!(c1.output_side(8), None);
    }
}
