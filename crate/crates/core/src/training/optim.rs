use std::f64::consts::PI;

/// AdamW hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.001,
        }
    }
}

/// First and second moments for each parameter tensor, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            first: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor with decoupled weight decay.
///
/// `step` is the 1-based step used for bias correction.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    debug_assert!(param.len() == grad.len() && grad.len() == first.len());
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g;
        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then a half cosine
/// down to 0 at `total`.
pub fn cosine_lr(t: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if t < warmup {
        return peak * t as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_normalized_gradient() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for g in [0.3, -2.0, 1e-3] {
            let mut p = [1.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adamw_update(&mut p, &[g], &mut m, &mut v, 1, 0.01, &cfg);
            let expected = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = [0.5, -1.5];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert_eq!(p, [0.5, -1.5]);
    }

    #[test]
    fn decay_shrinks_by_lr_times_wd() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut p = [2.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.5, &cfg);
        assert_eq!(p[0], 2.0 * (1.0 - 0.5 * 0.1));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 100, 1e-3), 0.0);
        assert_eq!(cosine_lr(10, 10, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 10, 100, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(55, 10, 100, 1e-3) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(5, 10, 100, 1e-3), 5e-4);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let after: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-6);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
