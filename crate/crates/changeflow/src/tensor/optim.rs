use super::params::ParamStore;

/// Adam with decoupled weight decay. Moments live in the parameter store so
/// checkpoints capture the full optimizer state; bias correction uses each
/// parameter's own step count, which matters for groups that start updating
/// mid-training.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Applies one update at rate `lr` to every non-frozen parameter whose
    /// name passes `active`, consuming the accumulated gradients. Inactive
    /// parameters are untouched: no moment update, no decay.
    pub fn step(&self, store: &mut ParamStore, lr: f64, active: impl Fn(&str) -> bool) {
        for e in store.entries_mut() {
            if e.frozen || !active(&e.name) {
                continue;
            }
            e.steps += 1;
            let b1c = 1.0 - self.beta1.powi(e.steps as i32);
            let b2c = 1.0 - self.beta2.powi(e.steps as i32);
            ndarray::Zip::from(&mut e.value)
                .and(&mut e.m)
                .and(&mut e.v)
                .and(&e.grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / b1c;
                    let vhat = *v / b2c;
                    *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                });
        }
    }
}

/// Cosine-annealed learning rate from `lr0` down to `floor` over `total`
/// iterations, evaluated at iteration `t` (1-based, clamped at the end).
pub fn cosine_lr(t: u64, total: u64, lr0: f64, floor: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (t.min(total) as f64) / (total as f64);
    floor + 0.5 * (lr0 - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
}
