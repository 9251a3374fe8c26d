//! Leapfrog integration of Hamiltonian dynamics in the latent space.

use std::io::Write;
use std::path::Path;

use dhvae_autograd::{grad, is_grad_enabled, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{rng_from, standard_normals};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Position and momentum, same shape.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub z: Tensor,
    pub rho: Tensor,
}

impl PhaseState {
    pub fn new(z: Tensor, rho: Tensor) -> Result<Self> {
        if z.shape() != rho.shape() {
            return Err(Error::Shape(format!("z {:?} vs rho {:?}", z.shape(), rho.shape())));
        }
        Ok(PhaseState { z, rho })
    }
}

/// Serializable leapfrog settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LeapfrogConfig {
    pub steps: usize,
    pub eps_init: f64,
    /// Diagonal of the mass matrix, one entry per latent dimension; empty
    /// means identity.
    pub mass: Vec<f64>,
    pub learnable: bool,
}

impl Default for LeapfrogConfig {
    fn default() -> Self {
        LeapfrogConfig { steps: 3, eps_init: 0.05, mass: Vec::new(), learnable: true }
    }
}

/// Per-dimension step sizes (stored as log ε), step count and diagonal mass.
#[derive(Debug, Clone)]
pub struct LeapfrogParams {
    log_eps: Tensor,
    steps: usize,
    mass: Tensor,
    learnable: bool,
}

impl LeapfrogParams {
    /// `dims` is the per-sample latent shape; ε and M broadcast over any
    /// leading batch axes.
    pub fn new(dims: &[usize], eps_init: f64, steps: usize, mass: Option<Vec<f64>>, learnable: bool) -> Result<Self> {
        if !(eps_init > 0.0) || !eps_init.is_finite() {
            return Err(Error::Config(format!("initial step size {eps_init} must be positive")));
        }
        let n: usize = dims.iter().product();
        let log_eps = vec![eps_init.ln(); n];
        let log_eps = if learnable { Tensor::param(log_eps, dims) } else { Tensor::from_vec(log_eps, dims) };
        let mass = mass.unwrap_or_else(|| vec![1.0; n]);
        check_mass(&mass)?;
        if mass.len() != n {
            return Err(Error::Config(format!("mass has {} entries, latent has {n} dimensions", mass.len())));
        }
        Ok(LeapfrogParams { log_eps, steps, mass: Tensor::from_vec(mass, dims), learnable })
    }

    pub fn from_config(dims: &[usize], cfg: &LeapfrogConfig) -> Result<Self> {
        let mass = (!cfg.mass.is_empty()).then(|| cfg.mass.clone());
        Self::new(dims, cfg.eps_init, cfg.steps, mass, cfg.learnable)
    }

    pub fn epsilon(&self) -> Tensor {
        self.log_eps.exp()
    }

    pub fn log_eps(&self) -> &Tensor {
        &self.log_eps
    }

    pub fn set_log_eps(&mut self, values: Vec<f64>) {
        let shape = self.log_eps.shape().to_vec();
        self.log_eps = if self.learnable { Tensor::param(values, &shape) } else { Tensor::from_vec(values, &shape) };
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn mass(&self) -> &Tensor {
        &self.mass
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    fn identity_mass(&self) -> bool {
        self.mass.data().iter().all(|&m| m == 1.0)
    }
}

fn check_mass(mass: &[f64]) -> Result<()> {
    match mass.iter().find(|&&m| !(m > 0.0) || !m.is_finite()) {
        Some(m) => Err(Error::Config(format!("mass entry {m} must be positive"))),
        None => Ok(()),
    }
}

/// Draws ρ ~ N(0, diag(mass)); `mass` is tiled over the leading axes of `shape`.
pub fn sample_momentum(mass: &[f64], shape: &[usize], seed: u64) -> Result<Tensor> {
    check_mass(mass)?;
    let n: usize = shape.iter().product();
    if mass.is_empty() || n % mass.len() != 0 {
        return Err(Error::Shape(format!("mass of length {} does not tile shape {shape:?}", mass.len())));
    }
    let noise = standard_normals(seed, n);
    let rho = noise.iter().enumerate().map(|(i, e)| e * mass[i % mass.len()].sqrt()).collect();
    Ok(Tensor::from_vec(rho, shape))
}

/// `½ Σ ρ² / m`, summed over every element.
pub fn kinetic_energy(rho: &Tensor, mass: &Tensor) -> Tensor {
    rho.square().div(mass).sum_all().mul_scalar(0.5)
}

/// `H = U + ½ ρᵀ M⁻¹ ρ`.
pub fn hamiltonian(state: &PhaseState, mass: &Tensor, u: f64) -> f64 {
    u + kinetic_energy(&state.rho, mass).item()
}

/// Metropolis–Hastings test `u ≤ min(1, exp(H0 − HK))`; a non-finite `HK`
/// always rejects.
pub fn mh_accept(h0: f64, hk: f64, u: f64) -> bool {
    if !hk.is_finite() {
        return false;
    }
    u <= (h0 - hk).exp().min(1.0)
}

/// `log N(z; 0, I)` summed over every element.
pub fn log_std_normal(z: &Tensor) -> Tensor {
    z.square().sum_all().mul_scalar(-0.5).add_scalar(-0.5 * LN_2PI * z.numel() as f64)
}

/// `log p(x, m | z)` summed over the batch.
pub trait LogLikelihood {
    fn log_likelihood(&self, z: &Tensor) -> Result<Tensor>;
}

/// Likelihood that ignores `z`; leaves only the prior in the potential.
pub struct ConstantLikelihood(pub f64);

impl LogLikelihood for ConstantLikelihood {
    fn log_likelihood(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.sum_all().mul_scalar(0.0).add_scalar(self.0))
    }
}

/// `U(z) = −[log p(x, m | z) + log N(z; 0, I)]`.
pub struct Potential<L> {
    pub likelihood: L,
}

impl<L: LogLikelihood> Potential<L> {
    pub fn new(likelihood: L) -> Self {
        Potential { likelihood }
    }

    pub fn energy(&self, z: &Tensor) -> Result<Tensor> {
        let u = self.likelihood.log_likelihood(z)?.add(&log_std_normal(z)).neg();
        if !u.all_finite() {
            return Err(Error::numeric("potential", format!("non-finite energy {}", u.item())));
        }
        Ok(u)
    }

    /// `∇_z U`. Inside a recording context the result stays differentiable
    /// (with respect to whatever `z` and the likelihood depend on).
    pub fn grad(&self, z: &Tensor) -> Result<Tensor> {
        let create_graph = is_grad_enabled() && z.requires_grad();
        let leaf;
        let z = if create_graph {
            z
        } else {
            leaf = z.detach_param();
            &leaf
        };
        let u = {
            let _g = dhvae_autograd::set_grad_enabled(true);
            self.energy(z)?
        };
        let g = grad(&u, &[z], create_graph).remove(0);
        if !g.all_finite() {
            return Err(Error::numeric("potential gradient", "non-finite gradient"));
        }
        Ok(g)
    }
}

fn check_stage(t: &Tensor, stage: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        let bad = t.data().iter().filter(|v| !v.is_finite()).count();
        Err(Error::numeric(format!("leapfrog {stage}"), format!("{bad} non-finite entries")))
    }
}

/// One leapfrog step; `grad_z` is `∇U(state.z)` if already known. Returns
/// the new state and `∇U` at its position.
pub fn leapfrog_step_with(
    state: &PhaseState,
    grad_z: Option<Tensor>,
    lf: &LeapfrogParams,
    gradfn: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
) -> Result<(PhaseState, Tensor)> {
    check_stage(&state.z, "input position")?;
    check_stage(&state.rho, "input momentum")?;
    let eps = lf.epsilon();
    let half = eps.mul_scalar(0.5);
    let g0 = match grad_z {
        Some(g) => g,
        None => gradfn(&state.z)?,
    };
    let rho_half = state.rho.sub(&half.mul(&g0));
    check_stage(&rho_half, "half-step momentum")?;
    let velocity = if lf.identity_mass() { rho_half.clone() } else { rho_half.div(&lf.mass) };
    let z = state.z.add(&eps.mul(&velocity));
    check_stage(&z, "full-step position")?;
    let g1 = gradfn(&z)?;
    let rho = rho_half.sub(&half.mul(&g1));
    check_stage(&rho, "final half-step momentum")?;
    Ok((PhaseState { z, rho }, g1))
}

pub fn leapfrog_step(state: &PhaseState, lf: &LeapfrogParams, gradfn: &mut dyn FnMut(&Tensor) -> Result<Tensor>) -> Result<PhaseState> {
    leapfrog_step_with(state, None, lf, gradfn).map(|(s, _)| s)
}

/// `lf.steps()` composed leapfrog steps, reusing the gradient at each
/// intermediate position. With `keep_trajectory` every visited state
/// (including the start) is returned.
pub fn evolve(
    state0: &PhaseState,
    lf: &LeapfrogParams,
    gradfn: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
    keep_trajectory: bool,
) -> Result<(PhaseState, Vec<PhaseState>)> {
    let mut traj = Vec::new();
    if keep_trajectory {
        traj.push(state0.clone());
    }
    let mut state = state0.clone();
    let mut g = None;
    for _ in 0..lf.steps() {
        let (next, gn) = leapfrog_step_with(&state, g, lf, gradfn)?;
        state = next;
        g = Some(gn);
        if keep_trajectory {
            traj.push(state.clone());
        }
    }
    Ok((state, traj))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub hamiltonian: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub accept: bool,
}

/// Energy diagnostics for a stored trajectory. `accept` marks steps whose
/// energy did not rise above the start (certain acceptance);
/// [`hmc_transition`] overwrites the final row with its actual decision.
pub fn trajectory_rows<L: LogLikelihood>(traj: &[PhaseState], potential: &Potential<L>, lf: &LeapfrogParams) -> Result<Vec<TrajectoryRow>> {
    let mut rows = Vec::with_capacity(traj.len());
    let mut h0 = None;
    for (step, s) in traj.iter().enumerate() {
        let u = dhvae_autograd::no_grad(|| potential.energy(&s.z))?.item();
        let k = kinetic_energy(&s.rho, lf.mass()).item();
        let h = u + k;
        let h_start = *h0.get_or_insert(h);
        rows.push(TrajectoryRow { step, hamiltonian: h, kinetic: k, potential: u, accept: mh_accept(h_start, h, 1.0 - f64::EPSILON) });
    }
    Ok(rows)
}

pub fn write_trajectory_csv(path: impl AsRef<Path>, rows: &[TrajectoryRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,H,kinetic,potential,accept\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.hamiltonian, r.kinetic, r.potential, u8::from(r.accept)));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One HMC transition from `z0` with fresh momentum and an optional
/// Metropolis–Hastings correction. Returns the kept position, whether the
/// proposal was accepted, and the per-step diagnostics.
pub fn hmc_transition<L: LogLikelihood>(
    potential: &Potential<L>,
    z0: &Tensor,
    lf: &LeapfrogParams,
    seed: u64,
    metropolis: bool,
) -> Result<(Tensor, bool, Vec<TrajectoryRow>)> {
    dhvae_autograd::no_grad(|| {
        let rho0 = sample_momentum(lf.mass().data(), z0.shape(), seed)?;
        let start = PhaseState::new(z0.detach(), rho0)?;
        let mut gradfn = |z: &Tensor| potential.grad(z);
        let (end, traj) = evolve(&start, lf, &mut gradfn, true)?;
        let mut rows = trajectory_rows(&traj, potential, lf)?;
        let (h0, hk) = (rows[0].hamiltonian, rows[rows.len() - 1].hamiltonian);
        let u: f64 = rng_from(seed ^ 0x5eed_acce).random();
        let accept = !metropolis || mh_accept(h0, hk, u);
        if let Some(last) = rows.last_mut() {
            last.accept = accept;
        }
        Ok((if accept { end.z } else { z0.detach() }, accept, rows))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_grad(z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }

    fn lf1(eps: f64, steps: usize) -> LeapfrogParams {
        LeapfrogParams::new(&[1], eps, steps, None, false).unwrap()
    }

    #[test]
    fn hand_example() {
        let s = PhaseState::new(Tensor::scalar(1.0).reshape(&[1]), Tensor::zeros(&[1])).unwrap();
        let out = leapfrog_step(&s, &lf1(0.1, 1), &mut gaussian_grad).unwrap();
        assert!((out.z.item() - 0.995).abs() < 1e-12);
        assert!((out.rho.item() + 0.09975).abs() < 1e-12);
    }

    #[test]
    fn free_particle() {
        let lf = LeapfrogParams::new(&[2], 0.2, 1, None, false).unwrap();
        let s = PhaseState::new(Tensor::from_vec(vec![1.0, 2.0], &[2]), Tensor::from_vec(vec![0.5, -1.0], &[2])).unwrap();
        let out = leapfrog_step(&s, &lf, &mut |z: &Tensor| Ok(Tensor::zeros(z.shape()))).unwrap();
        assert_eq!(out.rho.data(), s.rho.data());
        assert!((out.z.data()[0] - 1.1).abs() < 1e-15 && (out.z.data()[1] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn k_zero_is_identity() {
        let s = PhaseState::new(Tensor::from_vec(vec![0.3], &[1]), Tensor::from_vec(vec![-0.2], &[1])).unwrap();
        let (out, traj) = evolve(&s, &lf1(0.1, 0), &mut gaussian_grad, true).unwrap();
        assert_eq!(out.z.data(), s.z.data());
        assert_eq!(out.rho.data(), s.rho.data());
        assert_eq!(traj.len(), 1);
    }

    #[test]
    fn mass_scales_velocity() {
        let lf = LeapfrogParams::new(&[1], 0.1, 1, Some(vec![4.0]), false).unwrap();
        let s = PhaseState::new(Tensor::zeros(&[1]), Tensor::full(&[1], 2.0)).unwrap();
        let out = leapfrog_step(&s, &lf, &mut |z: &Tensor| Ok(Tensor::zeros(z.shape()))).unwrap();
        assert!((out.z.item() - 0.05).abs() < 1e-15);
        assert!(LeapfrogParams::new(&[1], 0.1, 1, Some(vec![0.0]), false).is_err());
        assert!(LeapfrogParams::new(&[1], -0.1, 1, None, false).is_err());
    }

    #[test]
    fn nonfinite_stage_is_reported() {
        let s = PhaseState::new(Tensor::ones(&[1]), Tensor::zeros(&[1])).unwrap();
        let e = leapfrog_step(&s, &lf1(0.1, 1), &mut |z: &Tensor| Ok(z.mul_scalar(f64::INFINITY))).unwrap_err();
        assert!(e.to_string().contains("half-step momentum"), "{e}");
    }

    #[test]
    fn hamiltonian_examples() {
        let m = Tensor::ones(&[3]);
        let s = PhaseState::new(Tensor::zeros(&[3]), Tensor::zeros(&[3])).unwrap();
        assert_eq!(hamiltonian(&s, &m, 1.5), 1.5);
        let s = PhaseState::new(Tensor::zeros(&[3]), Tensor::from_vec(vec![1.0, 0.0, 0.0], &[3])).unwrap();
        assert_eq!(hamiltonian(&s, &m, 0.0), 0.5);
        let s = PhaseState::new(Tensor::zeros(&[1]), Tensor::full(&[1], 2.0)).unwrap();
        assert_eq!(hamiltonian(&s, &Tensor::full(&[1], 4.0), 0.0), 0.5);
    }

    #[test]
    fn mh_examples() {
        assert!(mh_accept(1.0, 1.0, 0.999_999));
        assert!(!mh_accept(1.0, f64::INFINITY, 0.0));
        assert!(!mh_accept(1.0, f64::NAN, 0.0));
        let mut rng = rng_from(11);
        let n = 100_000;
        let acc = (0..n).filter(|_| mh_accept(0.0, -(0.5f64).ln(), rng.random())).count();
        let rate = acc as f64 / n as f64;
        assert!((rate - 0.5).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn momentum_statistics() {
        let n = 100_000;
        let rho = sample_momentum(&[1.0, 4.0], &[n, 2], 3).unwrap();
        for (d, target) in [(0, 1.0f64), (1, 4.0)] {
            let xs: Vec<f64> = rho.data().iter().skip(d).step_by(2).copied().collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 0.02 * target.sqrt(), "dim {d} mean {mean}");
            assert!((var - target).abs() < 0.05 * target, "dim {d} var {var}");
        }
        assert_eq!(sample_momentum(&[1.0], &[5], 9).unwrap().data(), sample_momentum(&[1.0], &[5], 9).unwrap().data());
        assert!(sample_momentum(&[-1.0], &[5], 9).is_err());
    }

    #[test]
    fn prior_only_potential() {
        let pot = Potential::new(ConstantLikelihood(0.0));
        let u = pot.energy(&Tensor::zeros(&[2])).unwrap().item();
        assert!((u - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let z = Tensor::from_vec(vec![0.5, -1.5, 2.0], &[3]);
        assert_eq!(pot.grad(&z).unwrap().data(), z.data());
        let z2 = Tensor::from_vec(vec![1.0, 0.0, 0.0], &[3]);
        let du = pot.energy(&z).unwrap().item() - pot.energy(&z2).unwrap().item();
        assert!((du - 0.5 * (6.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn transition_accepts_exact_energy_and_writes_csv() {
        let pot = Potential::new(ConstantLikelihood(0.0));
        let lf = LeapfrogParams::new(&[4], 0.1, 5, None, false).unwrap();
        let z0 = Tensor::from_vec(vec![0.1, 0.2, -0.3, 0.4], &[1, 4]);
        let (z, accept, rows) = hmc_transition(&pot, &z0, &lf, 5, true).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| (r.hamiltonian - rows[0].hamiltonian).abs() < 1e-2));
        if !accept {
            assert_eq!(z.data(), z0.data());
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        write_trajectory_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,H,kinetic,potential,accept\n0,"));
        assert_eq!(text.lines().count(), 7);
    }
}
