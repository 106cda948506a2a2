//! Fully connected networks built on top of [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

/// A stack of dense layers `y = act(W x + b)`.
///
/// Parameters are stored as `[W0, b0, W1, b1, ...]` with `Wl` shaped
/// `[sizes[l + 1], sizes[l]]`. They are bound to `Input` nodes of the graph,
/// which lets the same graph produce gradients for both the data input and
/// the parameters.
#[derive(Clone, Debug)]
pub struct DenseNet {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<Tensor>,
    graph: Graph,
    input: NodeId,
    output: NodeId,
    param_nodes: Vec<NodeId>,
}

impl DenseNet {
    pub fn new(sizes: Vec<usize>, activations: Vec<Activation>, params: Vec<Tensor>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network needs at least two positive layer sizes, got {sizes:?}"
            )));
        }
        let layers = sizes.len() - 1;
        if activations.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "{layers} layers but {} activations",
                activations.len()
            )));
        }
        if params.len() != 2 * layers {
            return Err(Error::Shape(format!(
                "{layers} layers need {} parameter tensors, got {}",
                2 * layers,
                params.len()
            )));
        }
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            if params[2 * l].shape() != [fan_out, fan_in] {
                return Err(Error::Shape(format!(
                    "layer {l} weight is {:?}, expected [{fan_out}, {fan_in}]",
                    params[2 * l].shape()
                )));
            }
            if params[2 * l + 1].shape() != [fan_out] {
                return Err(Error::Shape(format!(
                    "layer {l} bias is {:?}, expected [{fan_out}]",
                    params[2 * l + 1].shape()
                )));
            }
        }

        let mut graph = Graph::new();
        let input = graph.input(&[sizes[0]])?;
        let mut param_nodes = Vec::with_capacity(params.len());
        let mut h = input;
        for l in 0..layers {
            let w = graph.input(&[sizes[l + 1], sizes[l]])?;
            let b = graph.input(&[sizes[l + 1]])?;
            param_nodes.push(w);
            param_nodes.push(b);
            let wx = graph.matmul(w, h)?;
            let pre = graph.add(wx, b)?;
            h = match activations[l] {
                Activation::Identity => pre,
                Activation::Relu => graph.relu(pre)?,
                Activation::Sigmoid => graph.sigmoid(pre)?,
            };
        }

        Ok(Self {
            sizes,
            activations,
            params,
            graph,
            input,
            output: h,
            param_nodes,
        })
    }

    /// He-style uniform initialisation with zero biases.
    pub fn random<R: Rng + ?Sized>(
        sizes: Vec<usize>,
        activations: Vec<Activation>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.push(Tensor::matrix(fan_out, fan_in, w)?);
            params.push(Tensor::vector(vec![0.0; fan_out])?);
        }
        Self::new(sizes, activations, params)
    }

    /// Single linear layer `y = W x + b`.
    pub fn linear(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let [fan_out, fan_in] = weight.shape() else {
            return Err(Error::Shape(format!(
                "linear weight must be 2-D, got {:?}",
                weight.shape()
            )));
        };
        let sizes = vec![*fan_in, *fan_out];
        Self::new(sizes, vec![activation], vec![weight, bias])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Self::linear(
            Tensor::matrix(n, n, w)?,
            Tensor::vector(vec![0.0; n])?,
            Activation::Identity,
        )
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Replaces the parameters, keeping the architecture.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Shape("replacement parameters have different shapes".into()));
        }
        self.params = params;
        Ok(())
    }

    fn bindings<'a>(&'a self, x: &'a Tensor) -> BTreeMap<NodeId, &'a Tensor> {
        let mut map: BTreeMap<NodeId, &Tensor> =
            self.param_nodes.iter().copied().zip(&self.params).collect();
        map.insert(self.input, x);
        map
    }

    fn input_tensor(&self, x: &[f64]) -> Result<Tensor> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Tensor::vector(x.to_vec())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = self.input_tensor(x)?;
        let bindings = self.bindings(&x);
        let eval = self.graph.forward_eval(&bindings)?;
        Ok(eval.value(self.output).data().to_vec())
    }

    /// Returns the output and `J(x)^T cotangent` with respect to the input.
    pub fn vjp(&self, x: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (out, mut grads) = self.vjp_all(x, cotangent)?;
        let gx = grads
            .remove(&self.input)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; self.input_dim()]);
        Ok((out, gx))
    }

    /// Returns the output, the input gradient and the parameter gradients
    /// (in parameter order) of `<cotangent, f(x)>`.
    pub fn vjp_params(
        &self,
        x: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<Tensor>)> {
        let (out, mut grads) = self.vjp_all(x, cotangent)?;
        let gx = grads
            .remove(&self.input)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; self.input_dim()]);
        let gp = self
            .param_nodes
            .iter()
            .zip(&self.params)
            .map(|(id, p)| {
                grads
                    .remove(id)
                    .unwrap_or_else(|| Tensor::zeros(p.shape()).expect("valid shape"))
            })
            .collect();
        Ok((out, gx, gp))
    }

    fn vjp_all(&self, x: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, BTreeMap<NodeId, Tensor>)> {
        let x = self.input_tensor(x)?;
        let bindings = self.bindings(&x);
        let eval = self.graph.forward_eval(&bindings)?;
        let out = eval.value(self.output).data().to_vec();
        let grads = self.graph.backward_from(&eval, self.output, cotangent)?;
        Ok((out, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_passes_through() {
        let net = DenseNet::identity(3).unwrap();
        assert_eq!(net.forward(&[0.1, 0.5, 0.9]).unwrap(), vec![0.1, 0.5, 0.9]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let w = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::vector(vec![0.0; 3]).unwrap();
        assert!(DenseNet::linear(w, b, Activation::Identity).is_err());
        let net = DenseNet::identity(2).unwrap();
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::random(
            vec![4, 5, 2],
            vec![Activation::Sigmoid, Activation::Identity],
            &mut rng,
        )
        .unwrap();
        let x = [0.3, -0.2, 0.8, 0.1];
        let cot = [0.7, -1.3];
        let (_, gx) = net.vjp(&x, &cot).unwrap();
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = net.forward(&xp).unwrap();
            let fm = net.forward(&xm).unwrap();
            let fd: f64 = (0..2).map(|i| cot[i] * (fp[i] - fm[i]) / (2.0 * h)).sum();
            assert!((fd - gx[j]).abs() < 1e-7, "input {j}: {fd} vs {}", gx[j]);
        }
    }
}
