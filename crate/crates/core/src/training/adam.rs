use crate::dcn::Dcn;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &Dcn) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut Dcn, grads: &Dcn, state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if !params.same_shape(grads) {
        return Err(Error::invalid("gradient shapes do not match parameters"));
    }
    let grad_tensors = grads.tensors();
    let mut param_tensors = params.tensors_mut();
    if state.first.len() != param_tensors.len()
        || state
            .first
            .iter()
            .zip(&param_tensors)
            .any(|(m, p)| m.len() != p.len())
    {
        return Err(Error::invalid("optimizer state does not match parameters"));
    }

    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - config.beta1.powi(t);
    let correct2 = 1.0 - config.beta2.powi(t);
    for (((p, g), m), v) in param_tensors
        .iter_mut()
        .zip(&grad_tensors)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for i in 0..p.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / correct1;
            let v_hat = v[i] / correct2;
            p[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcn::Architecture;

    fn net() -> Dcn {
        Dcn::init(Architecture::new(3, 1, vec![4]), 9).unwrap()
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = net();
        let before = p.clone();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(state.step(), 1);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y + 0.001).abs() < 1e-9, "{x} {y}");
            }
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = net();
        let before = p.clone();
        let g = p.zeros_like();
        let mut state = AdamState::new(&p);
        for _ in 0..20 {
            adam_step(&mut p, &g, &mut state, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut g = net().zeros_like();
        g.tensors_mut()[0][0] = 0.3;
        let run = || {
            let mut p = net();
            let mut s = AdamState::new(&p);
            for _ in 0..3 {
                adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());

        let mut p = net();
        let other = Dcn::init(Architecture::new(3, 2, vec![4]), 9).unwrap();
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &other, &mut s, &AdamConfig::default()).is_err());
    }
}
