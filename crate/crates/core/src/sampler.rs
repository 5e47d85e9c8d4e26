//! Reverse-process sampling: single reverse steps, classifier-free
//! guidance and the full sampling loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conditioning, Net, StepCache};
use crate::rng::{normal_vec, stream};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// `t_1 = T > t_2 > ... > t_S = 0`.
    pub timesteps: Vec<usize>,
    pub guidance_weight: Option<f64>,
    /// Ancestral updates with fresh noise; only valid for adjacent steps.
    pub stochastic: bool,
    /// Candidate step counts drawn per finetuning iteration.
    pub step_jitter: Option<Vec<usize>>,
}

/// Evenly spaced, rounded, strictly decreasing schedule from `T` to 0
/// with `S` entries.
pub fn strided_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps < 2 {
        return Err(Error::Config(format!(
            "need at least 2 timesteps, got {num_steps}"
        )));
    }
    if num_steps - 1 > total {
        return Err(Error::Config(format!(
            "{num_steps} timesteps cannot be strictly decreasing over T = {total}"
        )));
    }
    let last = (num_steps - 1) as f64;
    Ok((0..num_steps)
        .map(|i| (total as f64 * (last - i as f64) / last).round() as usize)
        .collect())
}

impl SamplerConfig {
    /// Deterministic strided sampler with `num_steps` timesteps.
    pub fn strided(total: usize, num_steps: usize) -> Result<Self> {
        Ok(Self {
            timesteps: strided_timesteps(total, num_steps)?,
            guidance_weight: None,
            stochastic: false,
            step_jitter: None,
        })
    }

    /// Every step `T, T-1, ..., 0`.
    pub fn full(total: usize, stochastic: bool) -> Self {
        Self {
            timesteps: (0..=total).rev().collect(),
            guidance_weight: None,
            stochastic,
            step_jitter: None,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.timesteps.len()
    }

    /// Same settings with the schedule re-derived for `num_steps` entries.
    pub fn with_steps(&self, total: usize, num_steps: usize) -> Result<Self> {
        let mut c = self.clone();
        c.timesteps = strided_timesteps(total, num_steps)?;
        Ok(c)
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let ts = &self.timesteps;
        let total = schedule.num_steps();
        if ts.len() < 2 {
            return Err(Error::Config("sampler needs at least two timesteps".into()));
        }
        if ts[0] != total || *ts.last().unwrap() != 0 {
            return Err(Error::Config(format!(
                "timesteps must run from T = {total} to 0"
            )));
        }
        if ts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "timesteps must be strictly decreasing".into(),
            ));
        }
        if self.stochastic && ts.windows(2).any(|w| w[0] - w[1] != 1) {
            return Err(Error::Unsupported(
                "stochastic sampling requires adjacent timesteps".into(),
            ));
        }
        if let Some(j) = &self.step_jitter {
            if j.is_empty() || j.iter().any(|s| *s < 2 || *s - 1 > total) {
                return Err(Error::Config(
                    "step_jitter entries must lie in [2, T + 1]".into(),
                ));
            }
        }
        if let Some(w) = self.guidance_weight {
            if !(w >= 0.0) {
                return Err(Error::Config("guidance weight must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Affine form of one reverse step: `z_prev = a z + b eps + s w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs {
    pub a: f64,
    pub b: f64,
    pub s: f64,
}

pub fn step_coeffs(
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    stochastic: bool,
) -> Result<StepCoeffs> {
    if t_prev >= t || t > schedule.num_steps() {
        return Err(Error::Index(format!("invalid step pair ({t}, {t_prev})")));
    }
    if stochastic {
        if t_prev + 1 != t {
            return Err(Error::Unsupported(
                "stochastic update over a strided step".into(),
            ));
        }
        let inv = 1.0 / schedule.alpha(t).sqrt();
        let k = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let s = if t_prev > 0 { schedule.sigma(t) } else { 0.0 };
        Ok(StepCoeffs {
            a: inv,
            b: -inv * k,
            s,
        })
    } else {
        let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let a = abp.sqrt() / ab.sqrt();
        Ok(StepCoeffs {
            a,
            b: (1.0 - abp).sqrt() - a * (1.0 - ab).sqrt(),
            s: 0.0,
        })
    }
}

/// One reverse update from `t` to `t_prev`.
///
/// Stochastic mode is the ancestral update
/// `(z - beta_t / sqrt(1 - ab_t) eps) / sqrt(alpha_t) + sigma_t w` and
/// needs `t_prev = t - 1`; no noise is added on the final step into 0.
/// Deterministic mode projects to `x0_hat = (z - sqrt(1 - ab_t) eps) / sqrt(ab_t)`
/// and re-noises to `t_prev` with the same `eps`.
pub fn reverse_step(
    z: &[f64],
    eps: &[f64],
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    w: Option<&[f64]>,
    stochastic: bool,
) -> Result<Vec<f64>> {
    if z.len() != eps.len() || w.is_some_and(|w| w.len() != z.len()) {
        return Err(Error::Shape(
            "reverse step inputs differ in dimension".into(),
        ));
    }
    if t_prev >= t || t > schedule.num_steps() {
        return Err(Error::Index(format!("invalid step pair ({t}, {t_prev})")));
    }
    if stochastic {
        if t_prev + 1 != t {
            return Err(Error::Unsupported(
                "stochastic update over a strided step".into(),
            ));
        }
        let inv = 1.0 / schedule.alpha(t).sqrt();
        let k = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let sigma = if t_prev > 0 { schedule.sigma(t) } else { 0.0 };
        Ok(z.iter()
            .zip(eps)
            .enumerate()
            .map(|(i, (zi, ei))| inv * (zi - k * ei) + w.map_or(0.0, |w| sigma * w[i]))
            .collect())
    } else {
        let (ab, abp) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (spa, spn) = (abp.sqrt(), (1.0 - abp).sqrt());
        Ok(z.iter()
            .zip(eps)
            .map(|(zi, ei)| {
                let x0 = (zi - sn * ei) / sa;
                spa * x0 + spn * ei
            })
            .collect())
    }
}

/// Cache of a (possibly guided) noise prediction.
#[derive(Debug, Clone)]
pub struct GuidedCache {
    cond: StepCache,
    uncond: Option<(StepCache, f64)>,
}

/// `(1 - w) eps_null + w eps_cond`, which is exactly `eps_null` at `w = 0`
/// and exactly `eps_cond` at `w = 1`.
pub fn guided_forward(
    net: &Net<'_>,
    cond: Conditioning,
    z: &[f64],
    t: usize,
    guidance: Option<f64>,
) -> Result<(Vec<f64>, GuidedCache)> {
    let (ec, cc) = net.forward(cond, z, t)?;
    match guidance {
        None => Ok((
            ec,
            GuidedCache {
                cond: cc,
                uncond: None,
            },
        )),
        Some(w) => {
            let (eu, cu) = net.forward(Conditioning::Null, z, t)?;
            let eps = eu
                .iter()
                .zip(&ec)
                .map(|(u, c)| (1.0 - w) * u + w * c)
                .collect();
            Ok((
                eps,
                GuidedCache {
                    cond: cc,
                    uncond: Some((cu, w)),
                },
            ))
        }
    }
}

pub fn guided_backward(
    net: &Net<'_>,
    cache: &GuidedCache,
    g: &[f64],
    mut grad: Option<(&mut [f64], f64)>,
) -> Vec<f64> {
    match &cache.uncond {
        None => net.backward(&cache.cond, g, grad),
        Some((cu, w)) => {
            let gc: Vec<f64> = g.iter().map(|v| w * v).collect();
            let gu: Vec<f64> = g.iter().map(|v| (1.0 - w) * v).collect();
            let mut gz = net.backward(&cache.cond, &gc, grad.as_mut().map(|(b, s)| (&mut **b, *s)));
            let gz_u = net.backward(cu, &gu, grad);
            gz.iter_mut().zip(gz_u).for_each(|(a, b)| *a += b);
            gz
        }
    }
}

/// Noise injected at step index `i` of a stochastic run.
pub(crate) fn step_noise(noise_seed: u64, i: usize, dim: usize) -> Vec<f64> {
    normal_vec(&mut stream(noise_seed, &[0x5701, i as u64]), dim)
}

/// States visited by one sampling run: `states[i]` is `z_{t_i}`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
}

/// Runs the sampler and keeps every intermediate state.
pub fn sample_trajectory(
    net: &Net<'_>,
    cond: Conditioning,
    z_t: &[f64],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    noise_seed: u64,
) -> Result<Trajectory> {
    config.validate(schedule)?;
    if z_t.len() != net.model().data_dim() {
        return Err(Error::Shape(format!(
            "initial noise has {} dims, model expects {}",
            z_t.len(),
            net.model().data_dim()
        )));
    }
    let ts = &config.timesteps;
    let mut states = Vec::with_capacity(ts.len());
    let mut z = z_t.to_vec();
    for i in 0..ts.len() - 1 {
        let (t, tp) = (ts[i], ts[i + 1]);
        let (eps, _) = guided_forward(net, cond, &z, t, config.guidance_weight)?;
        let w = (config.stochastic && tp > 0).then(|| step_noise(noise_seed, i, z.len()));
        let next = reverse_step(&z, &eps, t, tp, schedule, w.as_deref(), config.stochastic)?;
        states.push(std::mem::replace(&mut z, next));
    }
    Ok(Trajectory { states, x0: z })
}

/// Generates one sample. Pure in (parameters, condition, `z_T`, config,
/// `noise_seed`); the seed only matters for stochastic sampling.
pub fn sample(
    net: &Net<'_>,
    cond: Conditioning,
    z_t: &[f64],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    sample_trajectory(net, cond, z_t, schedule, config, noise_seed).map(|t| t.x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserArch, DenoiserModel};
    use crate::nn::Activation;
    use approx::assert_relative_eq;

    fn toy_model(steps: usize) -> DenoiserModel {
        let arch = DenoiserArch {
            data_dim: 2,
            token_dim: 2,
            embed_dim: 3,
            hidden: vec![8],
            time_features: 4,
            prefix_len: 0,
            activation: Activation::Tanh,
            steps,
            adapter: None,
        };
        let mut rng = stream(5, &[]);
        let tokens = vec![normal_vec(&mut rng, 2)];
        DenoiserModel::new(arch, tokens, &mut rng).unwrap()
    }

    #[test]
    fn strided_schedules() {
        assert_eq!(strided_timesteps(100, 5).unwrap(), vec![100, 75, 50, 25, 0]);
        assert_eq!(strided_timesteps(2, 3).unwrap(), vec![2, 1, 0]);
        assert!(strided_timesteps(3, 5).is_err());
        assert!(strided_timesteps(3, 1).is_err());
        for s in 2..=31 {
            let ts = strided_timesteps(30, s).unwrap();
            assert!(ts.windows(2).all(|w| w[1] < w[0]));
            assert_eq!((ts[0], *ts.last().unwrap()), (30, 0));
        }
    }

    #[test]
    fn deterministic_step_inverts_forward_process() {
        let s = NoiseSchedule::build(50, 1e-3, 0.2, crate::schedule::BetaKind::Linear).unwrap();
        let x0 = [0.7, -1.2, 2.5];
        let n = [0.3, 1.1, -0.4];
        for t in [1, 10, 50] {
            let z = s.forward_diffuse(&x0, t, &n).unwrap();
            let back = reverse_step(&z, &n, t, 0, &s, None, false).unwrap();
            for (a, b) in back.iter().zip(x0) {
                assert!((a - b).abs() <= 1e-5 * b.abs(), "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_inputs_stay_zero() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        let z = reverse_step(&[0.0; 2], &[0.0; 2], 3, 2, &s, Some(&[0.0; 2]), true).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn single_step_ancestral_by_hand() {
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let (z1, eps) = ([1.0, -2.0], [0.5, 0.25]);
        let got = reverse_step(&z1, &eps, 1, 0, &s, Some(&[0.0, 0.0]), true).unwrap();
        // alpha = .64, ab = .64, beta / sqrt(1 - ab) = .36 / .6 = .6
        let want = [(1.0 - 0.6 * 0.5) / 0.8, (-2.0 - 0.6 * 0.25) / 0.8];
        assert_relative_eq!(got[0], want[0], max_relative = 1e-14);
        assert_relative_eq!(got[1], want[1], max_relative = 1e-14);
    }

    #[test]
    fn stochastic_strided_is_rejected() {
        let s = NoiseSchedule::from_betas(vec![0.1; 4]).unwrap();
        assert!(matches!(
            reverse_step(&[0.0], &[0.0], 4, 2, &s, None, true),
            Err(Error::Unsupported(_))
        ));
        let mut c = SamplerConfig::strided(4, 3).unwrap();
        c.stochastic = true;
        assert!(matches!(c.validate(&s), Err(Error::Unsupported(_))));
    }

    #[test]
    fn coefficients_match_updates() {
        let s = NoiseSchedule::build(20, 1e-3, 0.2, crate::schedule::BetaKind::Linear).unwrap();
        let (z, e, w) = ([0.4, -0.9], [1.3, 0.2], [0.7, -0.1]);
        for (t, tp, st) in [
            (20, 19, true),
            (5, 4, true),
            (1, 0, true),
            (20, 13, false),
            (7, 0, false),
        ] {
            let c = step_coeffs(&s, t, tp, st).unwrap();
            let got = reverse_step(&z, &e, t, tp, &s, Some(&w), st).unwrap();
            for i in 0..2 {
                assert_relative_eq!(
                    got[i],
                    c.a * z[i] + c.b * e[i] + c.s * w[i],
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_guidance_collapses() {
        let m = toy_model(10);
        let s = NoiseSchedule::build(10, 1e-3, 0.3, crate::schedule::BetaKind::Linear).unwrap();
        let net = m.net();
        let cfg = SamplerConfig::strided(10, 4).unwrap();
        let z = [0.3, -1.0];
        let a = sample(&net, Conditioning::Context(0), &z, &s, &cfg, 1).unwrap();
        let b = sample(&net, Conditioning::Context(0), &z, &s, &cfg, 99).unwrap();
        assert_eq!(a, b);

        let mut g = cfg.clone();
        g.guidance_weight = Some(1.0);
        assert_eq!(
            sample(&net, Conditioning::Context(0), &z, &s, &g, 1).unwrap(),
            a
        );
        g.guidance_weight = Some(0.0);
        assert_eq!(
            sample(&net, Conditioning::Context(0), &z, &s, &g, 1).unwrap(),
            sample(&net, Conditioning::Null, &z, &s, &cfg, 1).unwrap()
        );

        let st = SamplerConfig::full(10, true);
        let a = sample(&net, Conditioning::Context(0), &z, &s, &st, 3).unwrap();
        assert_eq!(
            a,
            sample(&net, Conditioning::Context(0), &z, &s, &st, 3).unwrap()
        );
        assert_ne!(
            a,
            sample(&net, Conditioning::Context(0), &z, &s, &st, 4).unwrap()
        );
        assert!(matches!(
            sample(&net, Conditioning::Context(0), &[0.0; 3], &s, &cfg, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_prediction_rescales_noise() {
        // eps == 0: every deterministic step multiplies by sqrt(ab_prev / ab_t),
        // so the chain telescopes to z_T / sqrt(ab_T)
        let s = NoiseSchedule::build(10, 1e-3, 0.3, crate::schedule::BetaKind::Linear).unwrap();
        let cfg = SamplerConfig::strided(10, 4).unwrap();
        let z = [0.8, -0.5];
        let mut cur = z.to_vec();
        for w in cfg.timesteps.windows(2) {
            cur = reverse_step(&cur, &[0.0, 0.0], w[0], w[1], &s, None, false).unwrap();
        }
        for i in 0..2 {
            assert_relative_eq!(cur[i], z[i] / s.alpha_bar(10).sqrt(), max_relative = 1e-12);
        }
    }
}
