use super::TrainConfig;
use crate::model::Pmnet;

/// Step decay: `lr_initial * gamma^(epoch / step_epochs)`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr_initial * cfg.lr_gamma.powi((epoch / cfg.lr_step_epochs) as i32)
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    frozen: Vec<bool>,
}

impl Adam {
    pub fn new(model: &Pmnet<f32>, cfg: &TrainConfig) -> Self {
        let params = model.named_params();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            frozen: params
                .iter()
                .map(|(name, _)| cfg.freeze.iter().any(|f| name.starts_with(f.as_str())))
                .collect(),
        }
    }

    pub fn step(&mut self, model: &mut Pmnet<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        // fold both bias corrections into the step size
        let alpha = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (i, (_, p)) in model.named_params_mut().into_iter().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (mi, vi)) in p
                .value
                .iter_mut()
                .zip(&p.grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *w -= alpha * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
