use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    /// tanh approximation of GELU; smooth, so input gradients have no kinks.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (z + GELU_A * z * z * z);
                let th = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * z * z);
                0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du
            }
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn from_code(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Format(format!("unknown activation {other:?}"))),
        }
    }
}

/// Parameters of a fully connected network.
///
/// All weights and biases live in one flat buffer, layer by layer: the
/// `out x in` weight matrix in row-major order, then the `out` biases. The
/// optimizer, EMA and checkpoint code treat the network as that flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Tensor2>,
    /// Pre-activation values of each layer.
    pre: Vec<Tensor2>,
    pub output: Tensor2,
}

impl Mlp {
    /// Zero-initialised network with layer widths `dims` (input first).
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self> {
        ensure!(dims.len() >= 2, Config, "an MLP needs at least one layer");
        ensure!(
            activations.len() == dims.len() - 1,
            Config,
            "{} activations for {} layers",
            activations.len(),
            dims.len() - 1
        );
        ensure!(
            dims.iter().all(|&d| d > 0),
            Config,
            "layer widths must be positive"
        );
        let count = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; count],
        })
    }

    /// `hidden` layers of width `width` with activation `hidden_act`, linear output.
    pub fn with_hidden(
        input: usize,
        width: usize,
        hidden: usize,
        output: usize,
        hidden_act: Activation,
    ) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat(width).take(hidden));
        dims.push(output);
        let mut acts = vec![hidden_act; hidden];
        acts.push(Activation::Identity);
        Self::zeros(&dims, &acts)
    }

    /// Kaiming-uniform weights for rectifier layers, `1/sqrt(fan_in)` bound for
    /// the rest; zero biases.
    pub fn init_random(&mut self, rng: &mut impl Rng) {
        for l in 0..self.num_layers() {
            let fan_in = self.dims[l] as f64;
            let bound = match self.activations[l] {
                Activation::Identity => 1.0 / fan_in.sqrt(),
                Activation::Relu | Activation::Gelu => (6.0 / fan_in).sqrt(),
            };
            let (w, b) = self.layer_ranges(l);
            for v in &mut self.params[w] {
                *v = rng.random_range(-bound..bound);
            }
            self.params[b].fill(0.0);
        }
    }

    pub fn from_parts(dims: Vec<usize>, activations: Vec<Activation>, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(&dims, &activations)?;
        ensure!(
            params.len() == m.params.len(),
            Dimension,
            "expected {} parameters, got {}",
            m.params.len(),
            params.len()
        );
        ensure!(
            params.iter().all(|v| v.is_finite()),
            Domain,
            "non-finite parameter"
        );
        m.params = params;
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.dims == other.dims && self.activations == other.activations
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.dims[..=l]
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// Index ranges of (weights, biases) of layer `l` in the flat buffer.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start = self.layer_offset(l);
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (start..start + o * i, start + o * i..start + o * i + o)
    }

    pub fn layer_weights(&self, l: usize) -> &[f64] {
        &self.params[self.layer_ranges(l).0]
    }

    pub fn layer_biases(&self, l: usize) -> &[f64] {
        &self.params[self.layer_ranges(l).1]
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layer_ranges(l).0;
        &mut self.params[r]
    }

    pub fn layer_biases_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layer_ranges(l).1;
        &mut self.params[r]
    }

    fn check_input(&self, x: &Tensor2) -> Result<()> {
        ensure!(
            x.cols() == self.input_dim(),
            Dimension,
            "input has {} columns, network expects {}",
            x.cols(),
            self.input_dim()
        );
        Ok(())
    }

    fn linear(&self, l: usize, x: &Tensor2) -> Tensor2 {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let w = self.layer_weights(l);
        let b = self.layer_biases(l);
        let mut out = Tensor2::zeros(x.rows(), o);
        let n = x.rows();
        let mut r = 0;
        while r + 4 <= n {
            let xs = [x.row(r), x.row(r + 1), x.row(r + 2), x.row(r + 3)];
            for j in 0..o {
                let d = crate::tensor::dot4(xs, &w[j * i..(j + 1) * i]);
                for (k, v) in d.iter().enumerate() {
                    out.set(r + k, j, b[j] + v);
                }
            }
            r += 4;
        }
        for r in r..n {
            let xr = x.row(r);
            let yr = out.row_mut(r);
            for (j, y) in yr.iter_mut().enumerate() {
                *y = b[j] + crate::tensor::dot(xr, &w[j * i..(j + 1) * i]);
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x)?;
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let act = self.activations[l];
            let mut z = self.linear(l, &h);
            if act != Activation::Identity {
                z.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor2) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut h = x.clone();
        for l in 0..self.num_layers() {
            let z = self.linear(l, &h);
            let act = self.activations[l];
            let a = if act == Activation::Identity {
                z.clone()
            } else {
                z.map(|v| act.apply(v))
            };
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: h,
        })
    }

    /// Back-propagates `grad_out = dL/d(output)`.
    ///
    /// Returns the gradient with respect to the input; when `param_grad` is
    /// given, parameter gradients are accumulated into it (same flat layout).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &Tensor2,
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Tensor2> {
        grad_out.check_same_shape(&cache.output, "backward grad_out")?;
        if let Some(g) = param_grad.as_deref() {
            ensure!(
                g.len() == self.params.len(),
                Dimension,
                "parameter gradient buffer has wrong length"
            );
        }
        let mut upstream = grad_out.clone();
        for l in (0..self.num_layers()).rev() {
            let act = self.activations[l];
            let (i, o) = (self.dims[l], self.dims[l + 1]);
            let mut dz = upstream;
            if act != Activation::Identity {
                for (d, &z) in dz.data_mut().iter_mut().zip(cache.pre[l].data()) {
                    *d *= act.derivative(z);
                }
            }
            let x_in = &cache.inputs[l];
            if let Some(g) = param_grad.as_deref_mut() {
                let (wr, br) = self.layer_ranges(l);
                let (gw, gb) = g[wr.start..br.end].split_at_mut(o * i);
                for r in 0..dz.rows() {
                    let dzr = dz.row(r);
                    let xr = x_in.row(r);
                    for (j, &d) in dzr.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        gb[j] += d;
                        for (gwv, &xv) in gw[j * i..(j + 1) * i].iter_mut().zip(xr) {
                            *gwv += d * xv;
                        }
                    }
                }
            }
            let w = self.layer_weights(l);
            let mut dx = Tensor2::zeros(dz.rows(), i);
            for r in 0..dz.rows() {
                let dzr = dz.row(r);
                let dxr = dx.row_mut(r);
                for (j, &d) in dzr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (dxv, &wv) in dxr.iter_mut().zip(&w[j * i..(j + 1) * i]) {
                        *dxv += d * wv;
                    }
                }
            }
            upstream = dx;
        }
        Ok(upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Straight-line matrix arithmetic, independent of the flat-buffer layout code paths.
    fn oracle_forward(
        weights: &[Vec<Vec<f64>>],
        biases: &[Vec<f64>],
        acts: &[Activation],
        x: &[f64],
    ) -> Vec<f64> {
        let mut h = x.to_vec();
        for ((w, b), a) in weights.iter().zip(biases).zip(acts) {
            let mut next = Vec::new();
            for (row, bias) in w.iter().zip(b) {
                let mut s = *bias;
                for k in 0..h.len() {
                    s += row[k] * h[k];
                }
                next.push(a.apply(s));
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let m = Mlp::with_hidden(3, 8, 2, 4, Activation::Relu).unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), (2, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let m = Mlp::from_parts(
            vec![2, 2],
            vec![Activation::Identity],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let y = m.forward(&Tensor2::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn matches_hand_matrix_multiply() {
        let mut m = Mlp::with_hidden(3, 5, 2, 4, Activation::Relu).unwrap();
        m.init_random(&mut stream(11, "t", &[]));
        for v in m.layer_biases_mut(0) {
            *v = 0.1;
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..m.num_layers() {
            let (i, o) = (m.dims()[l], m.dims()[l + 1]);
            let w = m.layer_weights(l);
            weights.push((0..o).map(|j| w[j * i..(j + 1) * i].to_vec()).collect::<Vec<_>>());
            biases.push(m.layer_biases(l).to_vec());
        }
        let x = crate::rng::normal_tensor(4, 3, &mut stream(12, "x", &[]));
        let y = m.forward(&x).unwrap();
        for r in 0..4 {
            let expect = oracle_forward(&weights, &biases, m.activations(), x.row(r));
            for (a, b) in y.row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let m = Mlp::with_hidden(3, 4, 1, 2, Activation::Relu).unwrap();
        let err = m.forward(&Tensor2::zeros(1, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &z in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(z + h) - Activation::Gelu.apply(z - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(z)).abs() < 1e-8);
        }
    }
}
