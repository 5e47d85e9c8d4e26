//! Gradients of losses on generated samples with respect to model
//! parameters, taken through the sampling chain.
//!
//! Three modes share one forward pass:
//!
//! * [`GradMode::Naive`]: the exact derivative through the whole
//!   recurrence, including every cross-step Jacobian coupling.
//! * [`GradMode::Adjusted`]: each step's network input is detached, and
//!   the gradient reaching that step's noise prediction is multiplied by a
//!   per-step coefficient that cancels the step's weight in the unrolled
//!   chain (normalized so the coefficients have geometric mean 1).
//! * [`GradMode::DetachOnly`]: the same detach without rescaling.
//!
//! Backward passes recompute each step's activations from the stored
//! states, so only one step's cache is alive at a time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conditioning, DenoiserModel, Net, ParamGroup};
use crate::par;
use crate::rng::{derive_seed, normal_vec, stream};
use crate::sampler::{
    guided_backward, guided_forward, sample_trajectory, step_coeffs, SamplerConfig, Trajectory,
};
use crate::schedule::NoiseSchedule;

/// Default bound on `S * d` for exact differentiation.
pub const NAIVE_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCoefficients {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// `t_1 .. t_{S-1}`; the final step into 0 has no coefficient.
    pub timesteps: Vec<usize>,
}

impl GradCoefficients {
    pub fn compute(schedule: &NoiseSchedule, timesteps: &[usize]) -> Result<Self> {
        if timesteps.len() < 2 {
            return Err(Error::Config(
                "need at least two timesteps to scale gradients".into(),
            ));
        }
        let steps = &timesteps[..timesteps.len() - 1];
        if let Some(t) = steps
            .iter()
            .find(|t| **t == 0 || **t > schedule.num_steps())
        {
            return Err(Error::Config(format!(
                "timestep {t} outside [1, {}]",
                schedule.num_steps()
            )));
        }
        let raw: Vec<f64> = steps
            .iter()
            .map(|&t| 1.0 / schedule.chain_factor(t))
            .collect();
        let log_mean = raw.iter().map(|c| c.ln()).sum::<f64>() / raw.len() as f64;
        let gm = log_mean.exp();
        let normalized = raw.iter().map(|c| c / gm).collect();
        Ok(Self {
            raw,
            normalized,
            timesteps: steps.to_vec(),
        })
    }

    fn check(&self, config: &SamplerConfig) -> Result<()> {
        let ts = &config.timesteps;
        if ts.len() != self.timesteps.len() + 1 || ts[..ts.len() - 1] != self.timesteps[..] {
            return Err(Error::Config(
                "gradient coefficients were built for a different timestep schedule".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GradMode {
    Naive { budget: usize },
    Adjusted(GradCoefficients),
    DetachOnly,
}

impl GradMode {
    pub fn naive() -> Self {
        GradMode::Naive {
            budget: NAIVE_BUDGET,
        }
    }
}

/// A generated sample together with what its backward pass needs.
#[derive(Debug, Clone)]
pub struct GradSample {
    pub x0: Vec<f64>,
    cond: Conditioning,
    trajectory: Trajectory,
    config: SamplerConfig,
    mode: GradMode,
}

/// Samples `x0` (bit-identical to [`crate::sampler::sample`]) and records
/// what the chosen gradient mode needs.
pub fn sample_with_grad(
    model: &DenoiserModel,
    cond: Conditioning,
    z_t: &[f64],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    noise_seed: u64,
    mode: GradMode,
) -> Result<GradSample> {
    match &mode {
        GradMode::Adjusted(c) => c.check(config)?,
        GradMode::Naive { budget } => {
            let need = config.num_steps() * model.data_dim();
            if need > *budget {
                return Err(Error::Resource(format!(
                    "exact gradient needs S*d = {need} > budget {budget}; use the adjusted mode"
                )));
            }
        }
        GradMode::DetachOnly => {}
    }
    let net = model.net();
    let trajectory = sample_trajectory(&net, cond, z_t, schedule, config, noise_seed)?;
    Ok(GradSample {
        x0: trajectory.x0.clone(),
        cond,
        trajectory,
        config: config.clone(),
        mode,
    })
}

pub fn sample_with_adjusted_grad(
    model: &DenoiserModel,
    cond: Conditioning,
    z_t: &[f64],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    coeffs: &GradCoefficients,
    noise_seed: u64,
) -> Result<GradSample> {
    sample_with_grad(
        model,
        cond,
        z_t,
        schedule,
        config,
        noise_seed,
        GradMode::Adjusted(coeffs.clone()),
    )
}

pub fn sample_with_naive_grad(
    model: &DenoiserModel,
    cond: Conditioning,
    z_t: &[f64],
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    noise_seed: u64,
) -> Result<GradSample> {
    sample_with_grad(
        model,
        cond,
        z_t,
        schedule,
        config,
        noise_seed,
        GradMode::naive(),
    )
}

impl GradSample {
    pub fn trajectory(&self) -> &Trajectory {
        &self.trajectory
    }

    /// Accumulates `d loss / d params` with respect to the merged
    /// parameters of `net` into `grad`. Call
    /// [`DenoiserModel::pull_back`] once after accumulating a batch.
    pub fn backward_merged(
        &self,
        net: &Net<'_>,
        schedule: &NoiseSchedule,
        g_x0: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if g_x0.len() != self.x0.len() {
            return Err(Error::Shape(
                "loss gradient does not match sample dimension".into(),
            ));
        }
        let ts = &self.config.timesteps;
        let mut g = g_x0.to_vec();
        for i in (0..ts.len() - 1).rev() {
            let (t, tp) = (ts[i], ts[i + 1]);
            let c = step_coeffs(schedule, t, tp, self.config.stochastic)?;
            let (_, cache) = guided_forward(
                net,
                self.cond,
                &self.trajectory.states[i],
                t,
                self.config.guidance_weight,
            )?;
            let g_eps: Vec<f64> = g.iter().map(|v| c.b * v).collect();
            match &self.mode {
                GradMode::Naive { .. } => {
                    let gz = guided_backward(net, &cache, &g_eps, Some((&mut *grad, 1.0)));
                    g.iter_mut().zip(gz).for_each(|(gi, j)| *gi = c.a * *gi + j);
                }
                GradMode::Adjusted(coeffs) => {
                    guided_backward(
                        net,
                        &cache,
                        &g_eps,
                        Some((&mut *grad, coeffs.normalized[i])),
                    );
                    g.iter_mut().for_each(|gi| *gi *= c.a);
                }
                GradMode::DetachOnly => {
                    guided_backward(net, &cache, &g_eps, Some((&mut *grad, 1.0)));
                    g.iter_mut().for_each(|gi| *gi *= c.a);
                }
            }
        }
        Ok(())
    }

    /// Parameter gradient of a loss whose gradient at `x0` is `g_x0`.
    pub fn backward(
        &self,
        model: &DenoiserModel,
        schedule: &NoiseSchedule,
        g_x0: &[f64],
    ) -> Result<Vec<f64>> {
        let net = model.net();
        let mut grad = vec![0.0; model.params().len()];
        self.backward_merged(&net, schedule, g_x0, &mut grad)?;
        model.pull_back(&mut grad);
        Ok(grad)
    }
}

/// Mean and central 90% interval of one series at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalStat {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl IntervalStat {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Self {
            mean: if mean.is_nan() { f64::INFINITY } else { mean },
            lo: percentile(&v, 0.05),
            hi: percentile(&v, 0.95),
        }
    }
}

/// Linear-interpolated percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let f = pos - lo as f64;
    if f == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    pub naive: IntervalStat,
    pub scaled: IntervalStat,
    pub plain: IntervalStat,
}

/// Per-step magnitudes of `|R A_t B_t d eps_t / d theta|` (naive),
/// `|R A_t d eps_t / d theta|` (scaled) and `|R d eps_t / d theta|` (plain)
/// where `theta` is the noise-prediction MLP and `R` a random row vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradDiagnostics {
    pub timesteps: Vec<usize>,
    /// `[run][step]`, aligned with `timesteps`.
    pub naive_mag: Vec<Vec<f64>>,
    pub scaled_mag: Vec<Vec<f64>>,
    pub plain_mag: Vec<Vec<f64>>,
    pub runs: usize,
    pub norm: String,
    pub r_variance: f64,
    pub summary: Vec<StepSummary>,
}

/// Variance of the entries of the random row vector.
pub const R_VARIANCE: f64 = 1e-4;

fn finite_or_inf(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

struct RunSeries {
    naive: Vec<f64>,
    scaled: Vec<f64>,
    plain: Vec<f64>,
}

fn diagnose_run(
    model: &DenoiserModel,
    cond: Conditioning,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
    run: usize,
) -> Result<RunSeries> {
    let d = model.data_dim();
    let mut rng = stream(seed, &[0xD1A6, run as u64]);
    let z_t = normal_vec(&mut rng, d);
    let r: Vec<f64> = normal_vec(&mut rng, d)
        .into_iter()
        .map(|v| v * R_VARIANCE.sqrt())
        .collect();
    let net = model.net();
    let traj = sample_trajectory(
        &net,
        cond,
        &z_t,
        schedule,
        config,
        derive_seed(seed, &[0xD1A7, run as u64]),
    )?;
    let theta = model.group_ranges(ParamGroup::Denoiser);
    let restricted_norm = |g: &[f64]| -> f64 {
        theta
            .iter()
            .map(|r| g[r.clone()].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    let n_params = model.params().len();
    let ts = &config.timesteps;
    let steps = ts.len() - 1;
    let (mut naive, mut scaled, mut plain) = (vec![0.0; steps], vec![0.0; steps], vec![0.0; steps]);
    // v = R B_t, starting from B_1 = I and growing toward larger t
    let mut v = r.clone();
    for i in (0..steps).rev() {
        let t = ts[i];
        let a_t = schedule.chain_factor(t);
        let (_, cache) = guided_forward(&net, cond, &traj.states[i], t, config.guidance_weight)?;
        let mut g_plain = vec![0.0; n_params];
        guided_backward(&net, &cache, &r, Some((&mut g_plain, 1.0)));
        let p = restricted_norm(&g_plain);
        plain[i] = finite_or_inf(p);
        scaled[i] = finite_or_inf(a_t * p);
        let mut g_naive = vec![0.0; n_params];
        let jt_v = guided_backward(&net, &cache, &v, Some((&mut g_naive, 1.0)));
        naive[i] = finite_or_inf(a_t * restricted_norm(&g_naive));
        let k = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        v.iter_mut().zip(jt_v).for_each(|(vi, j)| *vi -= k * j);
        if v.iter().any(|x| !x.is_finite()) {
            v.iter_mut().for_each(|x| *x = f64::INFINITY);
        }
    }
    Ok(RunSeries {
        naive,
        scaled,
        plain,
    })
}

/// Runs the three-series gradient magnitude diagnostic along `runs`
/// independent ancestral trajectories. `config` must visit every step.
pub fn diagnose_gradients(
    model: &DenoiserModel,
    cond: Conditioning,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    runs: usize,
    seed: u64,
) -> Result<GradDiagnostics> {
    if runs == 0 {
        return Err(Error::Argument("diagnostics need at least one run".into()));
    }
    config.validate(schedule)?;
    if config.timesteps.windows(2).any(|w| w[0] - w[1] != 1) {
        return Err(Error::Config(
            "diagnostics need an adjacent-step schedule".into(),
        ));
    }
    let results = par::map_indexed(runs, |run| {
        diagnose_run(model, cond, schedule, config, seed, run)
    });
    let results: Vec<RunSeries> = results.into_iter().collect::<Result<_>>()?;
    let ts: Vec<usize> = config.timesteps[..config.timesteps.len() - 1].to_vec();
    let column = |f: &dyn Fn(&RunSeries) -> &Vec<f64>, i: usize| {
        results.iter().map(|r| f(r)[i]).collect::<Vec<_>>()
    };
    let summary = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| StepSummary {
            t,
            naive: IntervalStat::of(&column(&|r| &r.naive, i)),
            scaled: IntervalStat::of(&column(&|r| &r.scaled, i)),
            plain: IntervalStat::of(&column(&|r| &r.plain, i)),
        })
        .collect();
    Ok(GradDiagnostics {
        timesteps: ts,
        naive_mag: results.iter().map(|r| r.naive.clone()).collect(),
        scaled_mag: results.iter().map(|r| r.scaled.clone()).collect(),
        plain_mag: results.iter().map(|r| r.plain.clone()).collect(),
        runs,
        norm: "l2".into(),
        r_variance: R_VARIANCE,
        summary,
    })
}

impl GradDiagnostics {
    /// Median over the top decile of `t` of the per-step mean divided by
    /// the median over the bottom decile.
    pub fn decile_ratio(&self, series: impl Fn(&StepSummary) -> f64) -> f64 {
        let mut by_t: Vec<(usize, f64)> = self.summary.iter().map(|s| (s.t, series(s))).collect();
        by_t.sort_by_key(|p| p.0);
        let n = (by_t.len() / 10).max(1);
        let median = |xs: &[(usize, f64)]| {
            let mut v: Vec<f64> = xs.iter().map(|p| p.1).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            percentile(&v, 0.5)
        };
        median(&by_t[by_t.len() - n..]) / median(&by_t[..n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserArch;
    use crate::nn::{dot, Activation};
    use crate::sampler::sample;
    use approx::assert_relative_eq;

    #[test]
    fn two_step_worked_example() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        let c = GradCoefficients::compute(&s, &[2, 1, 0]).unwrap();
        assert_relative_eq!(c.raw[0], 0.75f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(c.raw[1], 1.0, max_relative = 1e-12);
        assert!((c.normalized[0] - 0.9306).abs() < 5e-5);
        assert!((c.normalized[1] - 1.0746).abs() < 5e-5);
        assert_relative_eq!(
            c.normalized.iter().product::<f64>(),
            1.0,
            max_relative = 1e-12
        );
        assert_eq!(c.timesteps, vec![2, 1]);
    }

    #[test]
    fn constant_raw_normalizes_to_one() {
        // t = 1 only: a single coefficient is its own geometric mean
        let s = NoiseSchedule::from_betas(vec![0.2, 0.3]).unwrap();
        let c = GradCoefficients::compute(&s, &[2, 0]).unwrap();
        assert_eq!(c.normalized, vec![1.0]);
        assert!(matches!(
            GradCoefficients::compute(&s, &[2]),
            Err(Error::Config(_))
        ));
    }

    fn tiny() -> (DenoiserModel, NoiseSchedule) {
        let arch = DenoiserArch {
            data_dim: 2,
            token_dim: 2,
            embed_dim: 2,
            hidden: vec![5],
            time_features: 2,
            prefix_len: 1,
            activation: Activation::Tanh,
            steps: 6,
            adapter: None,
        };
        let mut rng = stream(21, &[]);
        let tokens = vec![normal_vec(&mut rng, 2)];
        let m = DenoiserModel::new(arch, tokens, &mut rng).unwrap();
        (
            m,
            NoiseSchedule::build(6, 0.02, 0.3, crate::schedule::BetaKind::Linear).unwrap(),
        )
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let (m, s) = tiny();
        let cfg = SamplerConfig::strided(6, 3).unwrap();
        let coeffs = GradCoefficients::compute(&s, &cfg.timesteps).unwrap();
        for mode in [
            GradMode::naive(),
            GradMode::Adjusted(coeffs),
            GradMode::DetachOnly,
        ] {
            let gs = sample_with_grad(&m, Conditioning::Context(0), &[0.2, 0.1], &s, &cfg, 0, mode)
                .unwrap();
            assert!(gs
                .backward(&m, &s, &[0.0, 0.0])
                .unwrap()
                .iter()
                .all(|g| *g == 0.0));
        }
    }

    #[test]
    fn forward_values_identical_across_modes() {
        let (m, s) = tiny();
        let cfg = SamplerConfig::strided(6, 4).unwrap();
        let coeffs = GradCoefficients::compute(&s, &cfg.timesteps).unwrap();
        let z = [0.7, -0.3];
        let plain = sample(&m.net(), Conditioning::Context(0), &z, &s, &cfg, 0).unwrap();
        let a = sample_with_adjusted_grad(&m, Conditioning::Context(0), &z, &s, &cfg, &coeffs, 0)
            .unwrap();
        let n = sample_with_naive_grad(&m, Conditioning::Context(0), &z, &s, &cfg, 0).unwrap();
        assert_eq!(plain, a.x0);
        assert_eq!(plain, n.x0);
    }

    #[test]
    fn mismatched_coefficients_and_budget_are_errors() {
        let (m, s) = tiny();
        let cfg = SamplerConfig::strided(6, 4).unwrap();
        let other = GradCoefficients::compute(&s, &[6, 3, 0]).unwrap();
        assert!(matches!(
            sample_with_adjusted_grad(
                &m,
                Conditioning::Context(0),
                &[0.0, 0.0],
                &s,
                &cfg,
                &other,
                0
            ),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_with_grad(
                &m,
                Conditioning::Context(0),
                &[0.0, 0.0],
                &s,
                &cfg,
                0,
                GradMode::Naive { budget: 7 }
            ),
            Err(Error::Resource(_))
        ));
    }

    #[test]
    fn naive_matches_finite_differences() {
        let (m, s) = tiny();
        let cfg = SamplerConfig::strided(6, 4).unwrap();
        let z = [0.5, -0.8];
        let w = [1.0, -2.0];
        let gs = sample_with_naive_grad(&m, Conditioning::Context(0), &z, &s, &cfg, 0).unwrap();
        let grad = gs.backward(&m, &s, &w).unwrap();
        let f = |mm: &DenoiserModel| {
            dot(
                &sample(&mm.net(), Conditioning::Context(0), &z, &s, &cfg, 0).unwrap(),
                &w,
            )
        };
        let h = 1e-5;
        for i in 0..m.params().len() {
            let (mut a, mut b) = (m.clone(), m.clone());
            a.params_mut()[i] += h;
            b.params_mut()[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
    }

    #[test]
    fn zero_last_layer_makes_diagnostics_uncoupled() {
        let (mut m, s) = tiny();
        // zero output weights: d eps / d z = 0, so B_t = I
        let r = m.group_ranges(ParamGroup::Denoiser)[0].clone();
        let last_w = r.end - 2 - 2 * 5..r.end - 2;
        m.params_mut()[last_w].iter_mut().for_each(|p| *p = 0.0);
        let cfg = SamplerConfig::full(6, true);
        let d = diagnose_gradients(&m, Conditioning::Context(0), &s, &cfg, 3, 9).unwrap();
        for run in 0..3 {
            for i in 0..d.timesteps.len() {
                assert_eq!(d.naive_mag[run][i], d.scaled_mag[run][i]);
            }
        }
    }

    #[test]
    fn diagnostics_reproducible_per_run() {
        let (m, s) = tiny();
        let cfg = SamplerConfig::full(6, true);
        let one = diagnose_gradients(&m, Conditioning::Context(0), &s, &cfg, 1, 4).unwrap();
        let many = diagnose_gradients(&m, Conditioning::Context(0), &s, &cfg, 5, 4).unwrap();
        assert_eq!(one.naive_mag[0], many.naive_mag[0]);
        assert_eq!(one.plain_mag[0], many.plain_mag[0]);
        // t = 1 is the last entry; B_1 = I
        let last = one.timesteps.len() - 1;
        assert_eq!(one.timesteps[last], 1);
        assert_eq!(one.naive_mag[0][last], one.scaled_mag[0][last]);
        assert!(many
            .summary
            .iter()
            .all(|s| s.naive.lo <= s.naive.mean.max(s.naive.lo) && s.plain.mean >= 0.0));
        assert!(diagnose_gradients(&m, Conditioning::Context(0), &s, &cfg, 0, 4).is_err());
        assert!(diagnose_gradients(
            &m,
            Conditioning::Context(0),
            &s,
            &SamplerConfig::strided(6, 3).unwrap(),
            1,
            4
        )
        .is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #[test]
        fn normalized_coefficients_multiply_to_one(
            mut betas in prop::collection::vec(1e-4f64..0.4, 2..300),
            stride in 1usize..50,
        ) {
            betas.sort_by(|a, b| a.total_cmp(b));
            let t = betas.len();
            let s = NoiseSchedule::from_betas(betas).unwrap();
            let mut ts: Vec<usize> = (0..=t).rev().step_by(stride).collect();
            if *ts.last().unwrap() != 0 {
                ts.push(0);
            }
            let c = GradCoefficients::compute(&s, &ts).unwrap();
            // a running product of hundreds of spread-out factors can
            // underflow on the way, so compare in log space
            let log_product: f64 = c.normalized.iter().map(|v| v.ln()).sum();
            prop_assert!(log_product.abs() <= 1e-10);
            prop_assert!(c.normalized.iter().all(|v| v.is_finite() && *v > 0.0));
        }
    }
}
