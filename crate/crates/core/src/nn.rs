//! Dense layers with hand-written backward passes, and the parameter visitor
//! used by the optimizer and checkpoints.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::{Error, Result};

/// Named parameter tensors, visited in a fixed order.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, v| v.fill(value));
    }

    /// Flat copy of every parameter in visit order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A clone of `p` with every parameter set to zero.
pub fn zeros_like<P: Params + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.fill(0.0);
    z
}

/// `y = W x + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Weights uniform in `±1/sqrt(in_dim)`, zero bias.
    pub fn uniform<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.gen_range(-bound..bound)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("linear input", self.in_dim(), x.len()));
        }
        Ok((0..self.out_dim())
            .map(|o| {
                let row = self.weight.row(o);
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect())
    }

    /// Accumulates `dW += dy^T x`, `db += dy` and returns `dx = W^T dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim()];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = self.weight.row(o);
            let mut grow = grad.weight.row_mut(o);
            for i in 0..x.len() {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }

    /// Row-batched forward: `x` is `batch x in`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::shape("linear batch input", self.in_dim(), x.ncols()));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    pub fn backward_batch(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.shape(),
            self.weight.as_slice().expect("standard layout"),
        );
        f(
            &join(prefix, "bias"),
            self.bias.shape(),
            self.bias.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &join(prefix, "weight"),
            self.weight.as_slice_mut().expect("standard layout"),
        );
        f(
            &join(prefix, "bias"),
            self.bias.as_slice_mut().expect("standard layout"),
        );
    }
}

/// Perceptron with relu between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Activations kept from a batched forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input to each layer (post-relu for all but the first).
    pub inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// `depth` linear layers: `in -> hidden -> ... -> out`.
    pub fn uniform<R: Rng>(in_dim: usize, hidden: usize, out_dim: usize, depth: usize, rng: &mut R) -> Self {
        assert!(depth >= 1);
        let layers = (0..depth)
            .map(|l| {
                let i = if l == 0 { in_dim } else { hidden };
                let o = if l + 1 == depth { out_dim } else { hidden };
                Linear::uniform(i, o, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if l + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn forward_batch(&self, x: Array2<f64>) -> Result<MlpCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward_batch(h.view())?;
            inputs.push(h);
            if l + 1 < self.layers.len() {
                y.mapv_inplace(|v| v.max(0.0));
            }
            h = y;
        }
        Ok(MlpCache { inputs, output: h })
    }

    pub fn backward_batch(&self, cache: &MlpCache, d_out: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut dy = d_out;
        for l in (0..self.layers.len()).rev() {
            let x = &cache.inputs[l];
            let dx = self.layers[l].backward_batch(x.view(), dy.view(), &mut grad.layers[l]);
            dy = if l > 0 {
                // x is the relu output of the previous layer
                let mut dx = dx;
                ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                dx
            } else {
                dx
            };
        }
        dy
    }
}

impl Params for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, &format!("layer{l}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{l}")), f);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_batch_matches_single_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::uniform(5, 7, 3, 4, &mut rng);
        let x = Array2::from_shape_fn((6, 5), |_| rng.gen_range(-1.0..1.0));
        let r = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0));
        let cache = mlp.forward_batch(x.clone()).unwrap();
        for b in 0..6 {
            let single = mlp.forward(x.row(b).as_slice().unwrap()).unwrap();
            for o in 0..3 {
                assert!((single[o] - cache.output[(b, o)]).abs() < 1e-12);
            }
        }
        let mut grad = zeros_like(&mlp);
        let dx = mlp.backward_batch(&cache, r.clone(), &mut grad);
        let loss = |m: &Mlp, x: &Array2<f64>| (m.forward_batch(x.clone()).unwrap().output * &r).sum();
        let h = 1e-6;
        let flat = mlp.flatten();
        let gflat = grad.flatten();
        for i in (0..flat.len()).step_by(5) {
            let mut p = mlp.clone();
            let mut f = flat.clone();
            f[i] += h;
            p.assign_flat(&f);
            let lp = loss(&p, &x);
            f[i] -= 2.0 * h;
            p.assign_flat(&f);
            let lm = loss(&p, &x);
            assert!(((lp - lm) / (2.0 * h) - gflat[i]).abs() < 1e-6);
        }
        let mut xp = x.clone();
        xp[(2, 1)] += h;
        let mut xm = x.clone();
        xm[(2, 1)] -= h;
        let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
        assert!((fd - dx[(2, 1)]).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        let lp = log_softmax(&[0.0; 15]);
        assert!((lp[3] + (15f64).ln()).abs() < 1e-12);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
