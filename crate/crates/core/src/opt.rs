//! Adam optimizer over flat parameter lists.

use serde::{Deserialize, Serialize};

use crate::tensor::Mat;

#[derive(Clone, Serialize, Deserialize)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    /// running mean of the global gradient norm, for adaptive clipping
    #[serde(default)]
    gnorm_ema: f64,
}

/// Spikes beyond this multiple of the running gradient-norm mean are clipped.
const CLIP_FACTOR: f64 = 3.0;

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
            gnorm_ema: 0.0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
            self.v = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        }
        let norm = grads
            .iter()
            .map(|g| g.data.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.gnorm_ema > 0.0 && norm > CLIP_FACTOR * self.gnorm_ema {
            CLIP_FACTOR * self.gnorm_ema / norm
        } else {
            1.0
        };
        self.gnorm_ema = if self.gnorm_ema == 0.0 {
            norm
        } else {
            0.99 * self.gnorm_ema + 0.01 * (norm * clip)
        };
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (idx, p) in params.iter_mut().enumerate() {
            let g = &grads[idx];
            assert!(p.same_shape(g), "param/grad shape mismatch at {}", idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
