//! Decoupled-weight-decay Adam over named parameter groups.

use dhvae_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates for one parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        AdamW { cfg, step: 0, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    pub fn for_params(cfg: AdamConfig, p: &ModelParams) -> Self {
        let sizes: Vec<usize> = p.tensors().iter().map(Tensor::numel).collect();
        Self::new(cfg, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updated values for each parameter, given its gradient.
    pub fn update(&mut self, values: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if values.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!("optimizer tracks {} arrays, got {} values / {} grads", self.m.len(), values.len(), grads.len())));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut out = Vec::with_capacity(values.len());
        for (i, (p, g)) in values.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(Error::Shape(format!("array {i}: {} values, {} grads, state {}", p.len(), g.len(), self.m[i].len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut np = Vec::with_capacity(p.len());
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                np.push(p[j] - c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]));
            }
            out.push(np);
        }
        Ok(out)
    }

    /// Applies one update to `params` in place (fresh leaf tensors).
    pub fn step_params(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        let values: Vec<Vec<f64>> = params.tensors().iter().map(Tensor::to_vec).collect();
        let g: Vec<Vec<f64>> = grads.iter().map(Tensor::to_vec).collect();
        for (i, new) in self.update(&values, &g)?.into_iter().enumerate() {
            params.set_values(i, new);
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.push(format!("{prefix}/step"), &[], vec![self.step as f64]);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ckpt.push(format!("{prefix}/m{i}"), &[m.len()], m.clone());
            ckpt.push(format!("{prefix}/v{i}"), &[v.len()], v.clone());
        }
    }

    pub fn load_from(cfg: AdamConfig, ckpt: &Checkpoint, prefix: &str, sizes: &[usize]) -> Result<Self> {
        let missing = |n: &str| Error::Config(format!("checkpoint lacks optimizer array {n}"));
        let sname = format!("{prefix}/step");
        let (_, s) = ckpt.array(&sname).ok_or_else(|| missing(&sname))?;
        let mut opt = AdamW::new(cfg, sizes);
        opt.step = s.first().copied().unwrap_or(0.0) as u64;
        for (i, &n) in sizes.iter().enumerate() {
            for (slot, tag) in [(&mut opt.m[i], 'm'), (&mut opt.v[i], 'v')] {
                let name = format!("{prefix}/{tag}{i}");
                let (_, d) = ckpt.array(&name).ok_or_else(|| missing(&name))?;
                if d.len() != n {
                    return Err(Error::Shape(format!("{name}: {} values, expected {n}", d.len())));
                }
                slot.copy_from_slice(d);
            }
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..AdamConfig::default() };
        let mut o = AdamW::new(cfg, &[2]);
        let out = o.update(&[vec![1.0, -1.0]], &[vec![3.0, -0.5]]).unwrap();
        assert!((out[0][0] - 0.9).abs() < 1e-6);
        assert!((out[0][1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let cfg = AdamConfig { lr: 0.05, beta1: 0.9, ..AdamConfig::default() };
        let mut o = AdamW::new(cfg, &[1]);
        let mut x = vec![vec![3.0]];
        for _ in 0..2000 {
            let g = vec![vec![2.0 * (x[0][0] - 1.0)]];
            x = o.update(&x, &g).unwrap();
        }
        assert!((x[0][0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn state_roundtrips_through_checkpoint() {
        let mut o = AdamW::new(AdamConfig::default(), &[3, 1]);
        o.update(&[vec![1.0, 2.0, 3.0], vec![0.5]], &[vec![0.1, 0.2, 0.3], vec![-1.0]]).unwrap();
        let mut c = Checkpoint::new(0, 1);
        o.save_into(&mut c, "opt");
        let back = AdamW::load_from(o.cfg, &c, "opt", &[3, 1]).unwrap();
        assert_eq!(back, o);
        assert!(AdamW::load_from(o.cfg, &c, "opt", &[2, 1]).is_err());
    }
}
