//! Edge-preserving cleanup of the aggregate signal.
//!
//! Five stages run in sequence: a median filter knocks out start-up spikes, a
//! bilateral filter and an anisotropic diffusion pass flatten within-level
//! noise, a recursive domain-transform filter smooths long steady states
//! without crossing edges, and a final sharpening pass collapses the short
//! ramps left behind into single-sample steps. Every stage keeps the signal
//! length and maps a constant signal to itself.
//!
//! Convolution and diffusion stages use reflective boundaries.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::PowerTrace;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("median window {window} exceeds signal length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("median window must be odd and at least 3, got {0}")]
    EvenWindow(usize),
    #[error("{name} must be positive and finite, got {value}")]
    InvalidSigma { name: &'static str, value: f64 },
    #[error("diffusion step must lie in (0, 0.25], got {0}")]
    InvalidLambda(f64),
    #[error("{0} must be at least 1")]
    ZeroIterations(&'static str),
}

/// The five pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Median,
    Bilateral,
    Anisotropic,
    DomainTransform,
    Sharpen,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Median,
        Stage::Bilateral,
        Stage::Anisotropic,
        Stage::DomainTransform,
        Stage::Sharpen,
    ];

    /// Stable identifier used in run manifests.
    pub fn id(self) -> &'static str {
        match self {
            Stage::Median => "1a_median_filter",
            Stage::Bilateral => "1b_bilateral_filter",
            Stage::Anisotropic => "1c_anisotropic_filter",
            Stage::DomainTransform => "1d_edge_preserving_filter",
            Stage::Sharpen => "1e_edge_sharpening",
        }
    }
}

/// Parameters for every pipeline stage. Deserializes from a flat key/value
/// TOML file; missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub median_window: usize,
    pub bilateral_sigma_spatial: f64,
    pub bilateral_sigma_range: f64,
    pub bilateral_window: usize,
    pub aniso_kappa: f64,
    pub aniso_lambda: f64,
    pub aniso_iters: usize,
    pub dt_sigma_spatial: f64,
    pub dt_sigma_range: f64,
    pub dt_iters: usize,
    pub sharpen_slope_min: f64,
    pub sharpen_max_ramp: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            median_window: 5,
            bilateral_sigma_spatial: 3.0,
            bilateral_sigma_range: 30.0,
            bilateral_window: 15,
            aniso_kappa: 50.0,
            aniso_lambda: 0.1,
            aniso_iters: 20,
            dt_sigma_spatial: 60.0,
            dt_sigma_range: 40.0,
            dt_iters: 3,
            sharpen_slope_min: 20.0,
            sharpen_max_ramp: 10,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.median_window < 3 || self.median_window.is_multiple_of(2) {
            return Err(FilterError::EvenWindow(self.median_window));
        }
        check_sigma("bilateral_sigma_spatial", self.bilateral_sigma_spatial)?;
        check_sigma("bilateral_sigma_range", self.bilateral_sigma_range)?;
        check_sigma("aniso_kappa", self.aniso_kappa)?;
        check_lambda(self.aniso_lambda)?;
        check_sigma("dt_sigma_spatial", self.dt_sigma_spatial)?;
        check_sigma("dt_sigma_range", self.dt_sigma_range)?;
        check_sigma("sharpen_slope_min", self.sharpen_slope_min)?;
        if self.aniso_iters == 0 {
            return Err(FilterError::ZeroIterations("aniso_iters"));
        }
        if self.dt_iters == 0 {
            return Err(FilterError::ZeroIterations("dt_iters"));
        }
        Ok(())
    }
}

fn check_sigma(name: &'static str, value: f64) -> Result<(), FilterError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(FilterError::InvalidSigma { name, value })
    }
}

fn check_lambda(lambda: f64) -> Result<(), FilterError> {
    if lambda > 0.0 && lambda <= 0.25 {
        Ok(())
    } else {
        Err(FilterError::InvalidLambda(lambda))
    }
}

/// Half-sample symmetric reflection of an out-of-range index into `0..n`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Centered running median. Near the ends the window shrinks symmetrically
/// so it always stays odd and inside the signal.
pub fn median_filter(signal: &PowerTrace, window: usize) -> Result<PowerTrace, FilterError> {
    if window.is_multiple_of(2) {
        return Err(FilterError::EvenWindow(window));
    }
    if window > signal.len() {
        return Err(FilterError::WindowTooLarge {
            window,
            len: signal.len(),
        });
    }
    let x = &signal.samples;
    let n = x.len();
    let radius = window / 2;
    let mut buf = Vec::with_capacity(window);
    let out = (0..n)
        .map(|i| {
            let r = radius.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend_from_slice(&x[i - r..=i + r]);
            let (_, mid, _) = buf.select_nth_unstable_by(r, f64::total_cmp);
            *mid
        })
        .collect();
    Ok(signal.with_samples(out))
}

/// Bilateral filter with Gaussian spatial and range kernels over a window of
/// `window` samples (radius `window / 2`, at least 1).
pub fn bilateral_filter(
    signal: &PowerTrace,
    sigma_spatial: f64,
    sigma_range: f64,
    window: usize,
) -> Result<PowerTrace, FilterError> {
    check_sigma("sigma_spatial", sigma_spatial)?;
    check_sigma("sigma_range", sigma_range)?;
    let x = &signal.samples;
    let n = x.len();
    if n == 0 {
        return Ok(signal.clone());
    }
    let radius = (window / 2).max(1) as isize;
    let spatial: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma_spatial * sigma_spatial)).exp())
        .collect();
    let range_scale = -1.0 / (2.0 * sigma_range * sigma_range);

    let out = (0..n as isize)
        .map(|i| {
            let center = x[i as usize];
            let (mut num, mut den) = (0.0, 0.0);
            for (k, &ws) in spatial.iter().enumerate() {
                let v = x[reflect(i + k as isize - radius, n)];
                let diff = v - center;
                let w = ws * (diff * diff * range_scale).exp();
                num += w * v;
                den += w;
            }
            num / den
        })
        .collect();
    Ok(signal.with_samples(out))
}

/// Perona–Malik diffusion on a two-neighbour stencil with conduction
/// `exp(-(d/kappa)^2)`. Boundaries are zero-flux, so the sample sum is
/// conserved.
pub fn anisotropic_diffusion(
    signal: &PowerTrace,
    kappa: f64,
    lambda: f64,
    iters: usize,
) -> Result<PowerTrace, FilterError> {
    check_lambda(lambda)?;
    check_sigma("kappa", kappa)?;
    let mut x = signal.samples.clone();
    let n = x.len();
    if n < 2 {
        return Ok(signal.clone());
    }
    let inv_k2 = 1.0 / (kappa * kappa);
    // flux[i] flows from sample i+1 into sample i
    let mut flux = vec![0.0; n - 1];
    for _ in 0..iters {
        for (f, pair) in flux.iter_mut().zip(x.windows(2)) {
            let d = pair[1] - pair[0];
            *f = (-(d * d) * inv_k2).exp() * d;
        }
        x[0] += lambda * flux[0];
        for i in 1..n - 1 {
            x[i] += lambda * (flux[i] - flux[i - 1]);
        }
        x[n - 1] -= lambda * flux[n - 2];
    }
    Ok(signal.with_samples(x))
}

/// Per-iteration spatial sigma of the recursive domain-transform filter.
/// `k` runs from 1 to `iters`; the sigmas shrink geometrically so that the
/// combined variance equals `sigma_spatial^2`.
pub fn domain_transform_sigma(sigma_spatial: f64, k: usize, iters: usize) -> f64 {
    let n = iters as i32;
    sigma_spatial * 3f64.sqrt() * 2f64.powi(n - k as i32) / (4f64.powi(n) - 1.0).sqrt()
}

/// Recursive edge-aware smoothing in the transformed domain.
///
/// The domain distance between neighbours is `1 + (sigma_s/sigma_r)·|Δx|`,
/// computed once from the input. Each iteration runs a causal then an
/// anti-causal first-order recursion with feedback `a^d`.
pub fn domain_transform_filter(
    signal: &PowerTrace,
    sigma_spatial: f64,
    sigma_range: f64,
    iters: usize,
) -> Result<PowerTrace, FilterError> {
    check_sigma("sigma_spatial", sigma_spatial)?;
    check_sigma("sigma_range", sigma_range)?;
    if iters == 0 {
        return Err(FilterError::ZeroIterations("iters"));
    }
    let mut x = signal.samples.clone();
    let n = x.len();
    if n < 2 {
        return Ok(signal.clone());
    }
    let ratio = sigma_spatial / sigma_range;
    // dist[i] separates sample i-1 from sample i; dist[0] is unused.
    let dist: Vec<f64> = std::iter::once(0.0)
        .chain(x.windows(2).map(|w| 1.0 + ratio * (w[1] - w[0]).abs()))
        .collect();
    let mut feedback = vec![0.0; n];

    for k in 1..=iters {
        let sigma_h = domain_transform_sigma(sigma_spatial, k, iters);
        let a = (-(2f64.sqrt()) / sigma_h).exp();
        for (f, &d) in feedback.iter_mut().zip(&dist).skip(1) {
            *f = a.powf(d);
        }
        for i in 1..n {
            x[i] += feedback[i] * (x[i - 1] - x[i]);
        }
        for i in (0..n - 1).rev() {
            x[i] += feedback[i + 1] * (x[i + 1] - x[i]);
        }
    }
    Ok(signal.with_samples(x))
}

/// Collapse short monotone ramps into ideal steps.
///
/// A ramp is a run of at least two consecutive same-sign deltas, each at
/// least `slope_min` in magnitude, spanning at most `max_ramp` deltas. Its
/// interior samples are set to the level before or after the ramp, with the
/// switch placed where the ramp's sample sum is best preserved.
pub fn edge_sharpen(signal: &PowerTrace, slope_min: f64, max_ramp: usize) -> PowerTrace {
    let mut x = signal.samples.clone();
    let n = x.len();
    let src = &signal.samples;
    let mut i = 1;
    while i < n {
        let d = src[i] - src[i - 1];
        if d.abs() < slope_min {
            i += 1;
            continue;
        }
        let up = d > 0.0;
        let mut end = i;
        while end + 1 < n {
            let next = src[end + 1] - src[end];
            if (next > 0.0) == up && next.abs() >= slope_min {
                end += 1;
            } else {
                break;
            }
        }
        // deltas i..=end; ramp covers samples i-1..=end
        let run = end - i + 1;
        if run >= 2 && run <= max_ramp {
            collapse_ramp(&mut x, src, i - 1, end);
        }
        i = end + 1;
    }
    signal.with_samples(x)
}

fn collapse_ramp(out: &mut [f64], src: &[f64], start: usize, end: usize) {
    let low = src[start];
    let high = src[end];
    let interior = &src[start + 1..end];
    let target: f64 = interior.iter().sum();
    let len = interior.len();
    // m interior samples keep the starting level, the rest take the final level
    let best = (0..=len)
        .min_by(|&a, &b| {
            let ea = (target - (a as f64 * low + (len - a) as f64 * high)).abs();
            let eb = (target - (b as f64 * low + (len - b) as f64 * high)).abs();
            ea.total_cmp(&eb)
        })
        .unwrap_or(0);
    for (j, v) in out[start + 1..end].iter_mut().enumerate() {
        *v = if j < best { low } else { high };
    }
}

/// Which stages to bypass (ablation).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageMask {
    pub skip_median: bool,
    pub skip_bilateral: bool,
    pub skip_anisotropic: bool,
    pub skip_domain_transform: bool,
    pub skip_sharpen: bool,
}

impl StageMask {
    pub fn skips(&self, stage: Stage) -> bool {
        match stage {
            Stage::Median => self.skip_median,
            Stage::Bilateral => self.skip_bilateral,
            Stage::Anisotropic => self.skip_anisotropic,
            Stage::DomainTransform => self.skip_domain_transform,
            Stage::Sharpen => self.skip_sharpen,
        }
    }
}

pub fn apply_stage(
    stage: Stage,
    signal: &PowerTrace,
    config: &FilterConfig,
) -> Result<PowerTrace, FilterError> {
    match stage {
        Stage::Median => {
            // Traces shorter than the window get the largest odd window that fits.
            let window = if config.median_window > signal.len() {
                signal.len().saturating_sub(1 - signal.len() % 2).max(1)
            } else {
                config.median_window
            };
            median_filter(signal, window)
        }
        Stage::Bilateral => bilateral_filter(
            signal,
            config.bilateral_sigma_spatial,
            config.bilateral_sigma_range,
            config.bilateral_window,
        ),
        Stage::Anisotropic => {
            anisotropic_diffusion(signal, config.aniso_kappa, config.aniso_lambda, config.aniso_iters)
        }
        Stage::DomainTransform => {
            domain_transform_filter(signal, config.dt_sigma_spatial, config.dt_sigma_range, config.dt_iters)
        }
        Stage::Sharpen => Ok(edge_sharpen(signal, config.sharpen_slope_min, config.sharpen_max_ramp)),
    }
}

/// Filtered signal plus the wall time spent in each stage that ran.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trace: PowerTrace,
    pub timings: Vec<(Stage, Duration)>,
}

pub fn run_pipeline(signal: &PowerTrace, config: &FilterConfig) -> Result<PowerTrace, FilterError> {
    run_pipeline_timed(signal, config, StageMask::default()).map(|out| out.trace)
}

pub fn run_pipeline_timed(
    signal: &PowerTrace,
    config: &FilterConfig,
    mask: StageMask,
) -> Result<PipelineOutput, FilterError> {
    config.validate()?;
    let mut current = signal.clone();
    let mut timings = Vec::with_capacity(Stage::ALL.len());
    for stage in Stage::ALL {
        let started = Instant::now();
        if !mask.skips(stage) {
            current = apply_stage(stage, &current, config)?;
        }
        timings.push((stage, started.elapsed()));
    }
    Ok(PipelineOutput {
        trace: current,
        timings,
    })
}
