//! Variance schedules, the closed-form forward process, conversions between
//! the noise / velocity / clean-sample parameterisations, and deterministic
//! DDIM updates over a re-spaced timestep plan.

use crate::error::{Error, Result};
use crate::grids::Grid2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaKind {
    /// `beta_t` interpolates the endpoints linearly.
    Linear,
    /// `sqrt(beta_t)` interpolates the square-rooted endpoints.
    ScaledLinear,
}

impl std::str::FromStr for BetaKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled_linear" => Ok(Self::ScaledLinear),
            other => Err(Error::InvalidRange(format!("unknown beta schedule `{other}`"))),
        }
    }
}

impl std::fmt::Display for BetaKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Linear => "linear",
            Self::ScaledLinear => "scaled_linear",
        })
    }
}

/// `T`-step variance schedule with cumulative products `alpha_bar_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t` in `0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidCount("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidRange(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(
    kind: BetaKind,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidRange("schedule needs T >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let frac = |i: usize| {
        if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        }
    };
    let betas = (0..steps)
        .map(|i| match kind {
            BetaKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            BetaKind::ScaledLinear => {
                let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
                (s + (e - s) * frac(i)).powi(2)
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// `d_t = sqrt(alpha_bar_t) d0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(d0: &Grid2, t: usize, eps: &Grid2, sched: &NoiseSchedule) -> Result<Grid2> {
    sched.check_step(t)?;
    let (a, b) = sched.coefficients(t);
    d0.zip_map(eps, |x, e| a * x + b * e)
}

/// What a denoiser output stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    /// The noise `eps` mixed into the sample.
    Eps,
    /// Velocity `v = sqrt(ab) eps - sqrt(1 - ab) x0`.
    V,
    /// The clean sample `x0`.
    X0,
}

impl std::str::FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(Self::Eps),
            "v" => Ok(Self::V),
            "x0" => Ok(Self::X0),
            other => Err(Error::InvalidRange(format!("unknown parameterisation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Eps => "eps",
            Self::V => "v",
            Self::X0 => "x0",
        })
    }
}

/// Converts a prediction between parameterisations at step `t`, given the
/// noisy sample `d_t` it was made from.
pub fn convert_param(
    value: &Grid2,
    from: Param,
    to: Param,
    t: usize,
    d_t: &Grid2,
    sched: &NoiseSchedule,
) -> Result<Grid2> {
    sched.check_step(t)?;
    if t == 0 {
        return Err(Error::InvalidRange("conversion undefined at t = 0".into()));
    }
    let (a, b) = sched.coefficients(t);
    convert_with_coefficients(value, from, to, a, b, d_t)
}

/// Conversion for explicit `(sqrt(ab), sqrt(1 - ab))`. Recovering `x0` from
/// `eps` divides by `a`; recovering `eps` from `x0` divides by `b`.
pub fn convert_with_coefficients(
    value: &Grid2,
    from: Param,
    to: Param,
    a: f64,
    b: f64,
    d_t: &Grid2,
) -> Result<Grid2> {
    if from == to {
        value.ensure_shape(d_t.shape())?;
        return Ok(value.clone());
    }
    value.zip_map(d_t, |p, d| {
        let (x0, eps) = match from {
            Param::X0 => (p, (d - a * p) / b),
            Param::Eps => ((d - b * p) / a, p),
            Param::V => (a * d - b * p, b * d + a * p),
        };
        match to {
            Param::X0 => x0,
            Param::Eps => eps,
            Param::V => a * eps - b * x0,
        }
    })
}

/// One DDIM update from `t` to `t_prev` given a noise estimate. Only the
/// deterministic variant (`eta = 0`) is provided.
pub fn ddim_step(
    d_t: &Grid2,
    eps_hat: &Grid2,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
) -> Result<Grid2> {
    if t_prev >= t {
        return Err(Error::NonMonotoneSteps { t, t_prev });
    }
    sched.check_step(t)?;
    if eta != 0.0 {
        return Err(Error::NotImplemented("stochastic DDIM (eta > 0)"));
    }
    let (a, b) = sched.coefficients(t);
    let (a_prev, b_prev) = sched.coefficients(t_prev);
    d_t.zip_map(eps_hat, |d, e| {
        let x0 = (d - b * e) / a;
        a_prev * x0 + b_prev * e
    })
}

/// Strictly decreasing subsequence of `1..=T` starting at `T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan(Vec<usize>);

impl TimestepPlan {
    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(t, t_prev)` pairs in sampling order; the last pair ends at 0.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.0.get(i + 1).copied().unwrap_or(0)))
    }
}

/// `S` steps evenly spaced from `T` down to 1 (rounded to the nearest
/// integer).
pub fn respace(total: usize, count: usize) -> Result<TimestepPlan> {
    if count == 0 || count > total {
        return Err(Error::InvalidCount(format!(
            "need 1 <= S <= T, got S = {count}, T = {total}"
        )));
    }
    if count == 1 {
        return Ok(TimestepPlan(vec![total]));
    }
    let span = (total - 1) as f64;
    let steps = (0..count)
        .map(|i| (total as f64 - span * i as f64 / (count - 1) as f64).round() as usize)
        .collect();
    Ok(TimestepPlan(steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrnoise::gaussian_noise;
    use proptest::prelude::*;

    fn max_abs_diff(a: &Grid2, b: &Grid2) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(BetaKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn linear_schedule_matches_direct_product() {
        let s = make_schedule(BetaKind::Linear, 1000, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(1000) - prod).abs() < 1e-12);
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 0.02).abs() < 1e-15);
        // frozen oracle value
        assert!((s.alpha_bar(1000) - 4.035829765376e-5).abs() < 1e-15, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn constant_betas_closed_form() {
        let s = make_schedule(BetaKind::ScaledLinear, 50, 0.03, 0.03).unwrap();
        for t in [1, 7, 50] {
            assert!((s.alpha_bar(t) - 0.97f64.powi(t as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_linear_endpoints_and_monotonicity() {
        let s = make_schedule(BetaKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap();
        assert!((s.beta(1) - 0.00085).abs() < 1e-15);
        assert!((s.beta(1000) - 0.012).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(make_schedule(BetaKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(make_schedule(BetaKind::Linear, 10, 0.2, 0.1).is_err());
        assert!(make_schedule(BetaKind::Linear, 10, 0.0, 0.1).is_err());
        assert!(make_schedule(BetaKind::Linear, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_limits() {
        let s = make_schedule(BetaKind::ScaledLinear, 100, 0.00085, 0.012).unwrap();
        let d0 = gaussian_noise(4, 4, 1);
        let eps = gaussian_noise(4, 4, 2);
        assert_eq!(forward_diffuse(&d0, 0, &eps, &s).unwrap(), d0);
        let zero = Grid2::zeros(4, 4);
        let dt = forward_diffuse(&d0, 40, &zero, &s).unwrap();
        let a = s.alpha_bar(40).sqrt();
        assert!(max_abs_diff(&dt, &d0.map(|v| a * v)) < 1e-15);
        assert!(forward_diffuse(&d0, 40, &Grid2::zeros(3, 4), &s).is_err());
        assert!(forward_diffuse(&d0, 101, &eps, &s).is_err());
    }

    #[test]
    fn forward_diffuse_preserves_unit_variance() {
        let s = make_schedule(BetaKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap();
        let n = 100_000;
        let d0 = gaussian_noise(1, n, 11);
        let eps = gaussian_noise(1, n, 12);
        for t in [1, 250, 500, 1000] {
            let dt = forward_diffuse(&d0, t, &eps, &s).unwrap();
            let mean = dt.mean();
            let var = dt.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            // standard error of the sample variance of N(0, 1) is sqrt(2 / (n - 1))
            let se = (2.0 / (n - 1) as f64).sqrt();
            assert!((var - 1.0).abs() < 3.0 * se, "t={t} var={var}");
        }
    }

    #[test]
    fn parameterisation_limits() {
        let x0 = Grid2::new(1, 2, vec![0.3, -0.7]).unwrap();
        let eps = Grid2::new(1, 2, vec![1.1, 0.4]).unwrap();
        // alpha_bar = 1: d_t = x0 and v = eps
        let v = convert_with_coefficients(&eps, Param::Eps, Param::V, 1.0, 0.0, &x0).unwrap();
        assert_eq!(v, eps);
        // alpha_bar = 0: d_t = eps and v = -x0
        let v = convert_with_coefficients(&x0, Param::X0, Param::V, 0.0, 1.0, &eps).unwrap();
        assert_eq!(v, x0.map(|x| -x));
    }

    #[test]
    fn parameterisation_round_trips() {
        let s = make_schedule(BetaKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap();
        let x0 = gaussian_noise(8, 8, 3);
        let eps = gaussian_noise(8, 8, 4);
        for t in [1, 10, 333, 999, 1000] {
            let dt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            let (a, b) = s.coefficients(t);
            let v_true = eps.zip_map(&x0, |e, x| a * e - b * x).unwrap();
            let v = convert_param(&eps, Param::Eps, Param::V, t, &dt, &s).unwrap();
            assert!(max_abs_diff(&v, &v_true) < 1e-10);
            let back = convert_param(&v, Param::V, Param::Eps, t, &dt, &s).unwrap();
            assert!(max_abs_diff(&back, &eps) < 1e-10);
            let x = convert_param(&v, Param::V, Param::X0, t, &dt, &s).unwrap();
            assert!(max_abs_diff(&x, &x0) < 1e-10);
            let e = convert_param(&x0, Param::X0, Param::Eps, t, &dt, &s).unwrap();
            assert!(max_abs_diff(&e, &eps) < 1e-10, "t={t}");
        }
    }

    #[test]
    fn ddim_with_true_noise_inverts_in_one_step() {
        let s = make_schedule(BetaKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap();
        let d0 = gaussian_noise(6, 5, 5);
        let eps = gaussian_noise(6, 5, 6);
        for t in [1, 500, 1000] {
            let dt = forward_diffuse(&d0, t, &eps, &s).unwrap();
            let rec = ddim_step(&dt, &eps, t, 0, &s, 0.0).unwrap();
            assert!(max_abs_diff(&rec, &d0) < 1e-10);
        }
    }

    #[test]
    fn ddim_rejects_bad_steps_and_eta() {
        let s = make_schedule(BetaKind::Linear, 10, 1e-4, 0.02).unwrap();
        let g = Grid2::zeros(2, 2);
        assert!(matches!(
            ddim_step(&g, &g, 5, 5, &s, 0.0),
            Err(Error::NonMonotoneSteps { .. })
        ));
        assert!(matches!(
            ddim_step(&g, &g, 5, 7, &s, 0.0),
            Err(Error::NonMonotoneSteps { .. })
        ));
        assert!(matches!(
            ddim_step(&g, &g, 5, 1, &s, 0.5),
            Err(Error::NotImplemented(_))
        ));
    }

    #[test]
    fn respace_examples() {
        assert_eq!(respace(1000, 1).unwrap().steps(), &[1000]);
        let full = respace(1000, 1000).unwrap();
        assert_eq!(full.steps(), (1..=1000).rev().collect::<Vec<_>>().as_slice());
        let plan = respace(10, 4).unwrap();
        assert_eq!(plan.steps(), &[10, 7, 4, 1]);
        for w in plan.steps().windows(2) {
            assert!(((w[0] - w[1]) as f64 - 10.0 / 4.0).abs() <= 1.0);
        }
        assert!(respace(10, 0).is_err());
        assert!(respace(10, 11).is_err());
        let pairs: Vec<_> = plan.transitions().collect();
        assert_eq!(pairs, vec![(10, 7), (7, 4), (4, 1), (1, 0)]);
    }

    proptest! {
        #[test]
        fn respace_is_strict_and_even(total in 1usize..2000, frac in 0.0f64..1.0) {
            let count = 1 + ((total - 1) as f64 * frac) as usize;
            let plan = respace(total, count).unwrap();
            prop_assert_eq!(plan.len(), count);
            prop_assert_eq!(plan.steps()[0], total);
            prop_assert!(*plan.steps().last().unwrap() >= 1);
            if count > 1 {
                let ideal = (total - 1) as f64 / (count - 1) as f64;
                for w in plan.steps().windows(2) {
                    prop_assert!(w[0] > w[1]);
                    prop_assert!(((w[0] - w[1]) as f64 - ideal).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn conversions_are_bijective(t in 1usize..=1000, seed in 0u64..500) {
            let s = make_schedule(BetaKind::ScaledLinear, 1000, 0.00085, 0.012).unwrap();
            let x0 = gaussian_noise(3, 3, seed);
            let eps = gaussian_noise(3, 3, seed + 1000);
            let dt = forward_diffuse(&x0, t, &eps, &s).unwrap();
            for (from, value) in [(Param::Eps, &eps), (Param::X0, &x0)] {
                for to in [Param::Eps, Param::V, Param::X0] {
                    let there = convert_param(value, from, to, t, &dt, &s).unwrap();
                    let back = convert_param(&there, to, from, t, &dt, &s).unwrap();
                    let tol = 1e-10;
                    prop_assert!(max_abs_diff(&back, value) < tol);
                }
            }
        }
    }
}
