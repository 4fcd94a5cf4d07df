//! Sinusoidal position/time encodings, the time projector and the shared
//! FeatureNet trunk of the deformation network.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{join, Linear, Mlp, Params};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    pub l_p: usize,
    pub l_t: usize,
    pub c_t: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig { l_p: 6, l_t: 4, c_t: 32 }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l_p == 0 || self.l_t == 0 || self.c_t == 0 {
            return Err(Error::Invalid("encoding bands and time width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        position_dim(self.l_p)
    }

    pub fn time_dim(&self) -> usize {
        2 * self.l_t + 1
    }
}

pub fn position_dim(l_p: usize) -> usize {
    3 * (2 * l_p + 1)
}

/// `[mu | sin(2^0 mu) | cos(2^0 mu) | ... ]`, raw meters, no 2π factor.
pub fn encode_position(mu: [f64; 3], l_p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(position_dim(l_p));
    out.extend_from_slice(&mu);
    for k in 0..l_p {
        let f = (1u64 << k) as f64;
        out.extend(mu.iter().map(|&x| (f * x).sin()));
        out.extend(mu.iter().map(|&x| (f * x).cos()));
    }
    out
}

pub fn encode_position_backward(mu: [f64; 3], l_p: usize, d_out: &[f64]) -> [f64; 3] {
    let mut d = [d_out[0], d_out[1], d_out[2]];
    for k in 0..l_p {
        let f = (1u64 << k) as f64;
        let base = 3 + 6 * k;
        for a in 0..3 {
            d[a] += d_out[base + a] * f * (f * mu[a]).cos() - d_out[base + 3 + a] * f * (f * mu[a]).sin();
        }
    }
    d
}

/// `[t | sin(2^0 t) | cos(2^0 t) | ... ]` with `t` the raw frame offset.
pub fn encode_time(t: f64, l_t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * l_t + 1);
    out.push(t);
    for k in 0..l_t {
        let f = (1u64 << k) as f64;
        out.push((f * t).sin());
        out.push((f * t).cos());
    }
    out
}

/// Two-layer perceptron `gamma_t -> e_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeProjector {
    pub l1: Linear,
    pub l2: Linear,
}

impl TimeProjector {
    pub fn uniform<R: Rng>(cfg: &EncodingConfig, rng: &mut R) -> Self {
        TimeProjector {
            l1: Linear::uniform(cfg.time_dim(), cfg.c_t, rng),
            l2: Linear::uniform(cfg.c_t, cfg.c_t, rng),
        }
    }

    pub fn zeros(cfg: &EncodingConfig) -> Self {
        TimeProjector {
            l1: Linear::zeros(cfg.time_dim(), cfg.c_t),
            l2: Linear::zeros(cfg.c_t, cfg.c_t),
        }
    }

    /// Returns the hidden (post-relu) activation and the embedding.
    pub fn forward(&self, gamma_t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut hidden = self.l1.forward(gamma_t)?;
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let e = self.l2.forward(&hidden)?;
        Ok((hidden, e))
    }

    /// Accumulates parameter gradients for one forward evaluation.
    pub fn backward(&self, gamma_t: &[f64], hidden: &[f64], d_e: &[f64], grad: &mut TimeProjector) {
        let mut d_hidden = self.l2.backward(hidden, d_e, &mut grad.l2);
        for (d, &h) in d_hidden.iter_mut().zip(hidden) {
            if h <= 0.0 {
                *d = 0.0;
            }
        }
        self.l1.backward(gamma_t, &d_hidden, &mut grad.l1);
    }
}

impl Params for TimeProjector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.l1.visit(&join(prefix, "l1"), f);
        self.l2.visit(&join(prefix, "l2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.l1.visit_mut(&join(prefix, "l1"), f);
        self.l2.visit_mut(&join(prefix, "l2"), f);
    }
}

pub fn embed_time(gamma_t: &[f64], projector: &TimeProjector) -> Result<Vec<f64>> {
    Ok(projector.forward(gamma_t)?.1)
}

/// Depth-`depth` relu perceptron over `[feat, gamma_p, e_t]`.
pub fn feature_net<R: Rng>(input_dim: usize, hidden_dim: usize, depth: usize, rng: &mut R) -> Mlp {
    Mlp::uniform(input_dim, hidden_dim, hidden_dim, depth, rng)
}

pub fn hidden_input(feat: &[f64], gamma_p: &[f64], e_t: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(feat.len() + gamma_p.len() + e_t.len());
    x.extend_from_slice(feat);
    x.extend_from_slice(gamma_p);
    x.extend_from_slice(e_t);
    x
}

pub fn build_hidden(feat: &[f64], gamma_p: &[f64], e_t: &[f64], featurenet: &Mlp) -> Result<Vec<f64>> {
    featurenet.forward(&hidden_input(feat, gamma_p, e_t))
}

/// Row-stacked `[feat | gamma_p | e_t]` for a batch sharing one time embedding.
pub fn hidden_input_batch(feat: &Array2<f64>, gamma_p: &Array2<f64>, e_t: &[f64]) -> Array2<f64> {
    let n = feat.nrows();
    let (cf, cp) = (feat.ncols(), gamma_p.ncols());
    let mut x = Array2::zeros((n, cf + cp + e_t.len()));
    for i in 0..n {
        let mut row = x.row_mut(i);
        for j in 0..cf {
            row[j] = feat[(i, j)];
        }
        for j in 0..cp {
            row[cf + j] = gamma_p[(i, j)];
        }
        for (j, &v) in e_t.iter().enumerate() {
            row[cf + cp + j] = v;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn position_examples() {
        assert_eq!(
            encode_position([0.0; 3], 2),
            vec![0., 0., 0., 0., 0., 0., 1., 1., 1., 0., 0., 0., 1., 1., 1.]
        );
        let e = encode_position([PI, 0.0, 0.0], 1);
        assert!(close(&e, &[PI, 0., 0., 0., 0., 0., -1., 1., 1.], 1e-15));
        let mu = [0.7, -0.2, 1.3];
        let e = encode_position(mu, 6);
        assert_eq!(e.len(), 39);
        for k in 0..6 {
            for a in 0..3 {
                let f = 2f64.powi(k as i32);
                assert_eq!(e[3 + 6 * k + a], (f * mu[a]).sin());
                assert_eq!(e[6 + 6 * k + a], (f * mu[a]).cos());
            }
        }
        for l in 1..=8 {
            assert_eq!(encode_position(mu, l).len(), 3 * (2 * l + 1));
            assert_eq!(encode_time(1.0, l).len(), 2 * l + 1);
        }
    }

    #[test]
    fn time_examples() {
        assert_eq!(encode_time(0.0, 4), vec![0., 0., 1., 0., 1., 0., 1., 0., 1.]);
        assert!(close(&encode_time(PI / 2.0, 2), &[PI / 2.0, 1.0, 0.0, 0.0, -1.0], 1e-15));
        let neg = encode_time(-3.0, 4);
        let pos = encode_time(3.0, 4);
        for k in 0..4 {
            assert_eq!(neg[1 + 2 * k], -pos[1 + 2 * k]);
            assert_eq!(neg[2 + 2 * k], pos[2 + 2 * k]);
            assert_eq!(neg[1 + 2 * k], (-3.0 * 2f64.powi(k as i32)).sin());
        }
        assert_eq!(encode_time(5.0, 4), encode_time(5.0, 4));
    }

    #[test]
    fn position_backward_matches_finite_differences() {
        let mu = [0.7, -0.2, 1.3];
        let w: Vec<f64> = (0..39).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let d = encode_position_backward(mu, 6, &w);
        let h = 1e-6;
        for a in 0..3 {
            let (mut p, mut m) = (mu, mu);
            p[a] += h;
            m[a] -= h;
            let lp: f64 = encode_position(p, 6).iter().zip(&w).map(|(x, y)| x * y).sum();
            let lm: f64 = encode_position(m, 6).iter().zip(&w).map(|(x, y)| x * y).sum();
            assert!(((lp - lm) / (2.0 * h) - d[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_time_examples() {
        let cfg = EncodingConfig { l_p: 1, l_t: 1, c_t: 3 };
        let zero = TimeProjector::zeros(&cfg);
        assert_eq!(embed_time(&[1.0, 2.0, 3.0], &zero).unwrap(), vec![0.0; 3]);

        let mut ident = TimeProjector::zeros(&cfg);
        for i in 0..3 {
            ident.l1.weight[(i, i)] = 1.0;
            ident.l2.weight[(i, i)] = 1.0;
        }
        assert_eq!(embed_time(&[-1.0, 2.0, -3.0], &ident).unwrap(), vec![0.0, 2.0, 0.0]);
        assert!(matches!(
            embed_time(&[1.0, 2.0], &ident),
            Err(Error::ShapeMismatch { .. })
        ));

        let cfg = EncodingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = TimeProjector::uniform(&cfg, &mut rng);
        let g = encode_time(1.0, cfg.l_t);
        let e = embed_time(&g, &p).unwrap();
        let hidden: Vec<f64> = (0..cfg.c_t)
            .map(|o| (p.l1.bias[o] + (0..g.len()).map(|i| p.l1.weight[(o, i)] * g[i]).sum::<f64>()).max(0.0))
            .collect();
        for o in 0..cfg.c_t {
            let want = p.l2.bias[o] + (0..cfg.c_t).map(|i| p.l2.weight[(o, i)] * hidden[i]).sum::<f64>();
            assert!((want - e[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn build_hidden_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = feature_net(9, 8, 6, &mut rng);
        let zero_net = zeros_like(&net);
        assert_eq!(build_hidden(&[0.0; 3], &[0.0; 3], &[0.0; 3], &zero_net).unwrap(), vec![0.0; 8]);

        let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = build_hidden(&a, &b, &c, &net).unwrap();
        assert_ne!(h, build_hidden(&b, &a, &c, &net).unwrap());

        // layer-by-layer oracle
        let mut x = hidden_input(&a, &b, &c);
        for (l, layer) in net.layers.iter().enumerate() {
            let mut y: Vec<f64> = (0..layer.out_dim())
                .map(|o| layer.bias[o] + (0..x.len()).map(|i| layer.weight[(o, i)] * x[i]).sum::<f64>())
                .collect();
            if l < 5 {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        assert!(close(&x, &h, 1e-12));
        assert!(build_hidden(&a, &b, &[0.0; 2], &net).is_err());
    }
}
