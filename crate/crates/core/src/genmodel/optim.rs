use super::tensor::Tensor;

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows, p.cols))
                .collect()
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update; parameters without a gradient only see moment decay.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        let norm = grads
            .iter()
            .flatten()
            .map(Tensor::sum_sq)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i].data, &mut self.v[i].data);
            for k in 0..p.data.len() {
                let gk = g.data[k] * scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                if self.lr != 0.0 {
                    p.data[k] -= self.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                }
            }
        }
    }
}
