//! Multilayer perceptron with ReLU activations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{visit_linear, BatchInput, Capture, Network, Outputs, Param, ParamVisitor};
use crate::linear::{DenseLinear, LinearOp};
use crate::tensor::DenseMatrix;
use crate::{Error, Result};

/// Layers `fc0 … fc{n-2}` with ReLU between them. The intermediate states
/// are the post-activation outputs of every hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<L> {
    pub sizes: Vec<usize>,
    pub layers: Vec<L>,
    cache: Option<Vec<DenseMatrix>>,
}

fn relu(x: &DenseMatrix) -> DenseMatrix {
    x.map(|v| v.max(0.0))
}

impl Mlp<DenseLinear> {
    pub(crate) fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let std = (2.0 / w[0] as f64).sqrt();
                let weight = DenseMatrix::from_fn(w[1], w[0], |_, _| {
                    std * rng.sample::<f64, _>(StandardNormal)
                });
                DenseLinear::new(weight, Some(vec![0.0; w[1]])).expect("consistent shapes")
            })
            .collect();
        Self {
            sizes: sizes.to_vec(),
            layers,
            cache: None,
        }
    }
}

impl<L: LinearOp> Mlp<L> {
    fn features(input: &BatchInput) -> Result<&DenseMatrix> {
        match input {
            BatchInput::Features(x) => Ok(x),
            BatchInput::Tokens { .. } => Err(Error::invalid("an MLP takes feature inputs")),
        }
    }

    pub(crate) fn map_linears<M: LinearOp>(
        &self,
        mut f: impl FnMut(&str, &L) -> Result<M>,
    ) -> Result<Mlp<M>> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| f(&format!("fc{i}"), l))
            .collect::<Result<_>>()?;
        Ok(Mlp {
            sizes: self.sizes.clone(),
            layers,
            cache: None,
        })
    }
}

impl<L: LinearOp> Network for Mlp<L> {
    type Linear = L;

    fn forward(&mut self, input: &BatchInput) -> Result<Outputs> {
        let mut h = Self::features(input)?.clone();
        let mut pre = Vec::new();
        let mut hidden = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let z = layer.forward(&h)?;
            if i == last {
                self.cache = Some(pre);
                return Ok(Outputs { out: z, hidden });
            }
            h = relu(&z);
            hidden.push(h.clone());
            pre.push(z);
        }
        unreachable!("an MLP has at least one layer")
    }

    fn infer_capture(&self, input: &BatchInput, capture: &mut Capture<'_>) -> Result<Outputs> {
        let mut h = Self::features(input)?.clone();
        let mut hidden = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.infer(&h)?;
            capture(&format!("fc{i}"), &h, &z);
            if i == last {
                return Ok(Outputs { out: z, hidden });
            }
            h = relu(&z);
            hidden.push(h.clone());
        }
        unreachable!("an MLP has at least one layer")
    }

    fn backward(&mut self, d_out: &DenseMatrix, d_hidden: &[Option<DenseMatrix>]) -> Result<()> {
        let pre = self.cache.take().ok_or(Error::MissingCache)?;
        let mut g = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward_input(&g)?;
            if i == 0 {
                break;
            }
            g = dx;
            if let Some(Some(dh)) = d_hidden.get(i - 1) {
                g.add_assign(dh)?;
            }
            g = g.zip_with(&pre[i - 1], |gv, z| if z > 0.0 { gv } else { 0.0 });
        }
        Ok(())
    }

    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        let mut slot = 0;
        for l in &mut self.layers {
            visit_linear(l, &mut slot, f);
        }
    }

    fn linears(&self) -> Vec<(String, &L)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("fc{i}"), l))
            .collect()
    }

    fn linears_mut(&mut self) -> Vec<(String, &mut L)> {
        self.layers
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("fc{i}"), l))
            .collect()
    }

    fn fp_params(&self) -> Vec<(String, &Param)> {
        Vec::new()
    }

    fn fp_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        Vec::new()
    }

    fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }
}
