//! Finite-difference check of the analytic batch gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LossKind;
use crate::dcn::{Architecture, Dcn};
use crate::error::{Error, Result};

const STEP: f64 = 1e-4;
/// Minimum distance from a ReLU or hinge kink for a sampled point.
const KINK_GAP: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub loss: LossKind,
    pub margin: f64,
    /// Largest input dimension drawn.
    pub max_dim: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossKind::Hinge,
            margin: 1.0,
            max_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub architecture: Architecture,
    pub pairs: usize,
    pub params: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Draws rejected for lying too close to a kink.
    pub resamples: usize,
}

struct Problem {
    net: Dcn,
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Problem {
    fn draw(rng: &mut ChaCha8Rng, max_dim: usize) -> Result<Self> {
        let p = rng.gen_range(1..=max_dim.max(1));
        let cross_layers = rng.gen_range(0..=3);
        let hidden: Vec<usize> = (0..rng.gen_range(0..=2)).map(|_| rng.gen_range(1..=8)).collect();
        let mut net = Dcn::init(Architecture::new(p, cross_layers, hidden), rng.gen())?;
        for t in net.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let vector = |rng: &mut ChaCha8Rng| (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
        let pairs = (0..rng.gen_range(1..=6)).map(|_| (vector(rng), vector(rng))).collect();
        Ok(Self { net, pairs })
    }

    fn loss(&self, net: &Dcn, kind: LossKind, margin: f64) -> Result<f64> {
        let mut total = 0.0;
        for (xp, xn) in &self.pairs {
            total += kind.pair_loss(net.score(xp)?, net.score(xn)?, margin).loss;
        }
        Ok(total / self.pairs.len() as f64)
    }

    fn near_kink(&self, kind: LossKind, margin: f64) -> Result<bool> {
        for (xp, xn) in &self.pairs {
            let (sp, cp) = self.net.forward(xp)?;
            let (sn, cn) = self.net.forward(xn)?;
            let relu = cp.hidden_pre.iter().chain(&cn.hidden_pre).flatten().any(|z| z.abs() < KINK_GAP);
            let hinge = kind == LossKind::Hinge && (margin - (sp - sn)).abs() < KINK_GAP;
            if relu || hinge {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn analytic(&self, kind: LossKind, margin: f64) -> Result<Dcn> {
        let mut grads = self.net.zeros_like();
        let scale = 1.0 / self.pairs.len() as f64;
        for (xp, xn) in &self.pairs {
            let (sp, cp) = self.net.forward(xp)?;
            let (sn, cn) = self.net.forward(xn)?;
            let l = kind.pair_loss(sp, sn, margin);
            self.net.backward_into(&cp, l.d_pos * scale, &mut grads)?;
            self.net.backward_into(&cn, l.d_neg * scale, &mut grads)?;
        }
        Ok(grads)
    }
}

/// Compares backpropagated gradients of the batch-mean pair loss with central
/// differences over every parameter of a randomly drawn small network.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut resamples = 0;
    let problem = loop {
        let candidate = Problem::draw(&mut rng, config.max_dim)?;
        if !candidate.near_kink(config.loss, config.margin)? {
            break candidate;
        }
        resamples += 1;
        if resamples >= MAX_ATTEMPTS {
            return Err(Error::invalid("could not draw a gradient-check point away from kinks"));
        }
    };

    let grads = problem.analytic(config.loss, config.margin)?;
    let analytic: Vec<f64> = grads.tensors().into_iter().flatten().copied().collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut net = problem.net.clone();
    let n_tensors = net.tensors().len();
    for t in 0..n_tensors {
        let len = net.tensors()[t].len();
        for i in 0..len {
            let orig = net.tensors()[t][i];
            net.tensors_mut()[t][i] = orig + STEP;
            let up = problem.loss(&net, config.loss, config.margin)?;
            net.tensors_mut()[t][i] = orig - STEP;
            let down = problem.loss(&net, config.loss, config.margin)?;
            net.tensors_mut()[t][i] = orig;
            numeric.push((up - down) / (2.0 * STEP));
        }
    }

    let mut max_abs_error = 0.0f64;
    let mut max_rel_error = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let abs = (a - n).abs();
        max_abs_error = max_abs_error.max(abs);
        max_rel_error = max_rel_error.max(abs / a.abs().max(n.abs()).max(1e-6));
    }
    Ok(GradCheckReport {
        architecture: problem.net.architecture().clone(),
        pairs: problem.pairs.len(),
        params: analytic.len(),
        max_abs_error,
        max_rel_error,
        resamples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_losses_pass_on_a_handful_of_seeds() {
        for loss in [LossKind::Hinge, LossKind::Logistic] {
            for seed in 0..20 {
                let r = grad_check(&GradCheckConfig { seed, loss, ..GradCheckConfig::default() }).unwrap();
                assert!(r.max_rel_error < 1e-4, "{loss:?} seed {seed}: {r:?}");
                assert_eq!(r.params, Dcn::zeros(r.architecture.clone()).unwrap().num_params());
            }
        }
    }

    #[test]
    fn report_is_deterministic() {
        let c = GradCheckConfig { seed: 11, ..GradCheckConfig::default() };
        assert_eq!(grad_check(&c).unwrap(), grad_check(&c).unwrap());
    }
}
