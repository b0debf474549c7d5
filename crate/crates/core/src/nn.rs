use rand::Rng as _;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{kernels, Activation, Graph, Real, Tensor, Var};

/// Multi-layer perceptron whose weights live in a [`ParamStore`].
///
/// Hidden layers apply `activation`; the last layer applies `output` when set.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
    activation: Activation,
    output: Option<Activation>,
}

impl Mlp {
    /// Registers `name.{i}.weight` / `name.{i}.bias` for each layer. Weights
    /// are drawn from U(-1/√fan_in, 1/√fan_in), biases start at zero, and the
    /// final layer is zeroed when `zero_last` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn build<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        output: Option<Activation>,
        trainable: bool,
        zero_last: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an mlp needs input and output dims");
        let nl = dims.len() - 1;
        let mut layers = Vec::with_capacity(nl);
        for i in 0..nl {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<F> = (0..fan_in * fan_out)
                .map(|_| {
                    let u: f64 = rng.random_range(-bound..bound);
                    if zero_last && i == nl - 1 {
                        F::zero()
                    } else {
                        F::of(u)
                    }
                })
                .collect();
            let w = store.add(
                format!("{name}.{i}.weight"),
                Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
                trainable,
            );
            let b = store.add(
                format!("{name}.{i}.bias"),
                Tensor::zeros(vec![fan_out]),
                trainable,
            );
            layers.push((w, b));
        }
        Self {
            layers,
            dims: dims.to_vec(),
            activation,
            output,
        }
    }

    /// Re-binds an architecture to parameters already present in `store`.
    pub fn bind<F: Real>(
        store: &ParamStore<F>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        output: Option<Activation>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let lookup = |suffix: &str, shape: Vec<usize>| -> Result<ParamId> {
                let pname = format!("{name}.{i}.{suffix}");
                let id = store
                    .find(&pname)
                    .ok_or_else(|| Error::Format(format!("missing tensor {pname}")))?;
                if store.value(id).shape() != shape.as_slice() {
                    return Err(Error::shape("bind", store.value(id).shape(), &shape));
                }
                Ok(id)
            };
            let w = lookup("weight", vec![dims[i], dims[i + 1]])?;
            let b = lookup("bias", vec![dims[i + 1]])?;
            layers.push((w, b));
        }
        Ok(Self {
            layers,
            dims: dims.to_vec(),
            activation,
            output,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Graph forward. `frozen` inserts the weights as constants.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        frozen: bool,
    ) -> Result<Var> {
        let nl = self.layers.len();
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = if frozen {
                (g.frozen_param(store, w), g.frozen_param(store, b))
            } else {
                (g.param(store, w), g.param(store, b))
            };
            h = g.linear(h, wv, bv)?;
            if i + 1 < nl {
                h = g.activation(h, self.activation);
            } else if let Some(out) = self.output {
                h = g.activation(h, out);
            }
        }
        Ok(h)
    }

    /// Gradient-free forward over `rows` packed input rows. Uses the same
    /// kernels as [`Mlp::forward`], so results agree bit for bit.
    pub fn infer<F: Real>(&self, store: &ParamStore<F>, x: &[F], rows: usize) -> Vec<F> {
        debug_assert_eq!(x.len(), rows * self.in_dim());
        let nl = self.layers.len();
        let mut h: Vec<F> = x.to_vec();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (k, n) = (self.dims[i], self.dims[i + 1]);
            h = kernels::linear(&h, store.value(w).data(), store.value(b).data(), rows, k, n);
            if i + 1 < nl {
                kernels::act_inplace(self.activation, &mut h);
            } else if let Some(out) = self.output {
                kernels::act_inplace(out, &mut h);
            }
        }
        h
    }
}

/// Row-wise concatenation of two packed matrices.
pub fn concat_rows<F: Copy>(a: &[F], a_cols: usize, b: &[F], b_cols: usize) -> Vec<F> {
    let rows = if a_cols == 0 { 0 } else { a.len() / a_cols };
    let mut out = Vec::with_capacity(rows * (a_cols + b_cols));
    for r in 0..rows {
        out.extend_from_slice(&a[r * a_cols..(r + 1) * a_cols]);
        out.extend_from_slice(&b[r * b_cols..(r + 1) * b_cols]);
    }
    out
}
