use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// One dense layer; `weight` is stored `[out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of a dense network: rectifier on hidden layers, identity on
/// the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

/// Gradients share the layout of the parameters they differentiate.
pub type Gradient = ModelParams;

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} does not match {} outputs",
                    l.bias.len(),
                    l.fan_out()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                )));
            }
        }
        Ok(ModelParams { layers })
    }

    /// All-zero network with layer widths `sizes = [in, h1, ..., out]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        ModelParams::new(layers)
    }

    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut p = ModelParams::zeros(sizes)?;
        for layer in &mut p.layers {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for w in layer.weight.as_mut_slice() {
                *w = normal.sample(rng);
            }
        }
        Ok(p)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    /// Layer widths `[in, h1, ..., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::fan_out));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(&self.sizes()).expect("shape already validated")
    }

    /// Flattened view: per layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(sizes: &[usize], flat: &[f64]) -> Result<Self> {
        let mut p = ModelParams::zeros(sizes)?;
        if flat.len() != p.num_params() {
            return Err(Error::Shape(format!(
                "{} values for a network with {} parameters",
                flat.len(),
                p.num_params()
            )));
        }
        p.values_mut().zip(flat).for_each(|(dst, &src)| *dst = src);
        Ok(p)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.fan_in() == b.fan_in() && a.fan_out() == b.fan_out())
    }

    pub(crate) fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "networks {:?} and {:?} differ",
                self.sizes(),
                other.sizes()
            )))
        }
    }

    /// `self += scale · other`.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) -> Result<()> {
        self.check_same_shape(other)?;
        self.values_mut()
            .zip(other.values())
            .for_each(|(a, &b)| *a += scale * b);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    pub fn dot(&self, other: &ModelParams) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// FNV-1a over the raw bit patterns; equal iff bitwise-equal (modulo
    /// hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.values() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn flat_round_trip_and_shape_checks() {
        let mut rng = stream(3, Stream::ModelInit, 0, 0);
        let p = ModelParams::init(&[3, 4, 2], &mut rng).unwrap();
        assert_eq!(p.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        let q = ModelParams::from_flat(&p.sizes(), &p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
        assert!(ModelParams::from_flat(&[3, 4, 2], &[0.0; 5]).is_err());
        assert!(ModelParams::zeros(&[3]).is_err());

        let bad = vec![
            Layer {
                weight: Matrix::zeros(4, 3),
                bias: vec![0.0; 4],
            },
            Layer {
                weight: Matrix::zeros(2, 5),
                bias: vec![0.0; 2],
            },
        ];
        assert!(matches!(ModelParams::new(bad), Err(Error::Shape(_))));
    }
}
