use serde::{Deserialize, Serialize};

use crate::nn::{log_softmax, softmax};
use crate::taxonomy::IGNORE;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_dep: f64,
    pub lambda_distill: f64,
    pub lambda_def: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_seg: 1.0,
            lambda_dep: 0.05,
            lambda_distill: 1.0,
            lambda_def: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda_seg, self.lambda_dep, self.lambda_distill, self.lambda_def]
    }

    pub fn all_zero(&self) -> bool {
        self.as_array().iter().all(|&w| w == 0.0)
    }
}

/// Unweighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub seg: f64,
    pub dep: f64,
    pub distill: f64,
    pub def: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("seg", c.seg), ("dep", c.dep), ("distill", c.distill), ("def", c.def)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    let total = w.lambda_seg * c.seg + w.lambda_dep * c.dep + w.lambda_distill * c.distill + w.lambda_def * c.def;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total = {total}")));
    }
    Ok(total)
}

/// Cross-entropy sum and count of supervised pixels of one view.
pub fn segmentation_terms(logits: &[f64], classes: usize, labels: &[u8]) -> Result<(f64, usize)> {
    if logits.len() != labels.len() * classes {
        return Err(Error::shape("segmentation logits", labels.len() * classes, logits.len()));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (px, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y as usize >= classes {
            return Err(Error::Invalid(format!("label {y} out of range")));
        }
        sum -= log_softmax(&logits[px * classes..(px + 1) * classes])[y as usize];
        count += 1;
    }
    Ok((sum, count))
}

/// Adds `scale * d CE / d logits` for every supervised pixel.
pub fn segmentation_terms_backward(logits: &[f64], classes: usize, labels: &[u8], scale: f64, d_logits: &mut [f64]) {
    for (px, &y) in labels.iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        let p = softmax(&logits[px * classes..(px + 1) * classes]);
        let d = &mut d_logits[px * classes..(px + 1) * classes];
        for c in 0..classes {
            d[c] += scale * (p[c] - if c == y as usize { 1.0 } else { 0.0 });
        }
    }
}

/// Mean cross-entropy over non-ignored pixels of all views. Pixels with low
/// alpha are included as they are.
pub fn segmentation_loss(logits: &[Vec<f64>], classes: usize, labels: &[Vec<u8>]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::shape("segmentation views", labels.len(), logits.len()));
    }
    let (mut sum, mut count) = (0.0, 0);
    for (l, y) in logits.iter().zip(labels) {
        let (s, c) = segmentation_terms(l, classes, y)?;
        sum += s;
        count += c;
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}

pub fn segmentation_loss_backward(logits: &[Vec<f64>], classes: usize, labels: &[Vec<u8>]) -> Vec<Vec<f64>> {
    let count: usize = labels.iter().flatten().filter(|&&y| y != IGNORE).count();
    logits
        .iter()
        .zip(labels)
        .map(|(l, y)| {
            let mut d = vec![0.0; l.len()];
            if count > 0 {
                segmentation_terms_backward(l, classes, y, 1.0 / count as f64, &mut d);
            }
            d
        })
        .collect()
}

fn depth_supervised(valid: bool, target: f32) -> bool {
    valid && target > 0.0
}

/// L1 sum and count over pixels valid in both the mask and the pseudo depth.
pub fn depth_terms(depth: &[f64], valid: &[bool], pseudo: &[f32]) -> Result<(f64, usize)> {
    if depth.len() != pseudo.len() || valid.len() != pseudo.len() {
        return Err(Error::shape("depth map", pseudo.len(), depth.len().min(valid.len())));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for px in 0..depth.len() {
        if depth_supervised(valid[px], pseudo[px]) {
            sum += (depth[px] - pseudo[px] as f64).abs();
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Adds `scale * d|d - d*| / d d` on supervised pixels.
pub fn depth_terms_backward(depth: &[f64], valid: &[bool], pseudo: &[f32], scale: f64, d_depth: &mut [f64]) {
    for px in 0..depth.len() {
        if depth_supervised(valid[px], pseudo[px]) {
            let diff = depth[px] - pseudo[px] as f64;
            d_depth[px] += scale * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
        }
    }
}

pub fn depth_loss(depth: &[Vec<f64>], valid: &[Vec<bool>], pseudo: &[Vec<f32>]) -> Result<f64> {
    if depth.len() != pseudo.len() || valid.len() != pseudo.len() {
        return Err(Error::shape("depth views", pseudo.len(), depth.len()));
    }
    let (mut sum, mut count) = (0.0, 0);
    for ((d, m), p) in depth.iter().zip(valid).zip(pseudo) {
        let (s, c) = depth_terms(d, m, p)?;
        sum += s;
        count += c;
    }
    Ok(if count > 0 { sum / count as f64 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn segmentation_examples() {
        let labels = vec![vec![0u8, 3, IGNORE, 14]];
        let zeros = vec![vec![0.0; 4 * 15]];
        let l = segmentation_loss(&zeros, 15, &labels).unwrap();
        assert!((l - 15f64.ln()).abs() < 1e-12);
        assert!((l - 2.70805).abs() < 1e-5);

        let mut peaked = vec![0.0; 4 * 15];
        for (px, &y) in labels[0].iter().enumerate() {
            if y != IGNORE {
                peaked[px * 15 + y as usize] = 30.0;
            }
        }
        assert!(segmentation_loss(&[peaked], 15, &labels).unwrap() < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits: Vec<f64> = (0..4 * 15).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut expect = 0.0;
        for (px, &y) in labels[0].iter().enumerate() {
            if y == IGNORE {
                continue;
            }
            let row = &logits[px * 15..(px + 1) * 15];
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += lse - row[y as usize];
        }
        let got = segmentation_loss(&[logits], 15, &labels).unwrap();
        assert!((got - expect / 3.0).abs() < 1e-10);
        assert!(matches!(
            segmentation_loss(&[vec![0.0; 10]], 15, &labels),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn depth_examples() {
        let d = vec![vec![5.0, 1.0, 2.0]];
        assert_eq!(
            depth_loss(&d, &[vec![true, false, true]], &[vec![3.0, 9.0, 0.0]]).unwrap(),
            2.0
        );
        assert_eq!(depth_loss(&d, &[vec![true; 3]], &[vec![5.0, 1.0, 2.0]]).unwrap(), 0.0);
        let mixed = depth_loss(
            &[vec![1.0, 2.0, 3.0, 4.0], vec![0.5]],
            &[vec![true, true, false, true], vec![true]],
            &[vec![1.5, 0.0, 3.0, 2.0], vec![1.0]],
        )
        .unwrap();
        assert!((mixed - (0.5 + 2.0 + 0.5) / 3.0).abs() < 1e-15);
        assert_eq!(depth_loss(&d, &[vec![false; 3]], &[vec![1.0; 3]]).unwrap(), 0.0);
    }

    #[test]
    fn total_examples() {
        let c = LossComponents {
            seg: 1.0,
            dep: 2.0,
            distill: 3.0,
            def: 4.0,
        };
        let ones = LossWeights {
            lambda_seg: 1.0,
            lambda_dep: 1.0,
            lambda_distill: 1.0,
            lambda_def: 1.0,
        };
        assert_eq!(total_loss(&c, &ones).unwrap(), 10.0);
        let zero = LossWeights {
            lambda_seg: 0.0,
            lambda_dep: 0.0,
            lambda_distill: 0.0,
            lambda_def: 0.0,
        };
        assert_eq!(total_loss(&c, &zero).unwrap(), 0.0);
        let bad = LossComponents { dep: f64::NAN, ..c };
        assert!(matches!(total_loss(&bad, &ones), Err(Error::NonFinite(_))));
    }

    #[test]
    fn segmentation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = vec![vec![1u8, IGNORE, 0, 2], vec![2, 2, IGNORE, 0]];
        let logits: Vec<Vec<f64>> = (0..2).map(|_| (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let d = segmentation_loss_backward(&logits, 3, &labels);
        let h = 1e-5;
        for v in 0..2 {
            for k in 0..12 {
                let mut p = logits.clone();
                p[v][k] += h;
                let mut m = logits.clone();
                m[v][k] -= h;
                let num = (segmentation_loss(&p, 3, &labels).unwrap() - segmentation_loss(&m, 3, &labels).unwrap())
                    / (2.0 * h);
                assert!((num - d[v][k]).abs() <= 1e-4 * num.abs().max(1e-6), "{num} {}", d[v][k]);
            }
        }
    }
}
