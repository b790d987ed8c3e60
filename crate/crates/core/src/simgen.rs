//! Simulated spike data over known curves and the metrics used to score a
//! pipeline run against the truth.
//!
//! Observations are `y_i = f(x_i) + mu*·1(i is a spike) + eps_i` with `x_i`
//! equispaced on `[0, 1]` and `eps_i ~ N(0, sigma*^2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{run_smoothem, PipelineConfig, PipelineError, PipelineResult, SplineBasis};

/// Points in the evaluation grid for curve errors.
pub const EVAL_GRID: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid rate specification: {0}")]
    InvalidRate(String),
    #[error("length mismatch between result and dataset")]
    LengthMismatch,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Truth curves on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Curve {
    /// `Σ c_k x^k`, lowest degree first.
    Poly4([f64; 5]),
    /// `4 x^3`.
    Beta41Density,
    /// `9π sin(x)`, taken literally.
    NinePiSine,
    /// `sin(9π x)`.
    SineFast,
}

impl Curve {
    /// Quartic with three interior extrema and a range of about 4.8.
    pub const DEFAULT_POLY4: [f64; 5] = [3.01392, -51.3348, 189.56, -243.0, 100.0];

    pub fn poly4_default() -> Self {
        Curve::Poly4(Self::DEFAULT_POLY4)
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Curve::Poly4(c) => c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck),
            Curve::Beta41Density => 4.0 * x * x * x,
            Curve::NinePiSine => 9.0 * std::f64::consts::PI * x.sin(),
            Curve::SineFast => (9.0 * std::f64::consts::PI * x).sin(),
        }
    }
}

impl Default for Curve {
    fn default() -> Self {
        Self::poly4_default()
    }
}

/// One Gaussian bump of the spike intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Spike intensity shape `Σ_j weight_j exp(-(x - center_j)^2 / (2 width_j^2))`,
/// scaled so the expected spike count matches the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSpec {
    pub bumps: Vec<Bump>,
}

impl Default for RateSpec {
    fn default() -> Self {
        Self {
            bumps: vec![
                Bump { center: 0.15, width: 0.03, weight: 1.0 },
                Bump { center: 0.45, width: 0.06, weight: 0.6 },
                Bump { center: 0.8, width: 0.02, weight: 1.5 },
            ],
        }
    }
}

impl RateSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.bumps.is_empty() {
            return Err(SimError::InvalidRate("at least one bump required".into()));
        }
        for b in &self.bumps {
            if !(b.width > 0.0 && b.weight > 0.0 && b.center.is_finite() && b.width.is_finite()) {
                return Err(SimError::InvalidRate(format!("bad bump {b:?}")));
            }
        }
        Ok(())
    }

    /// Unscaled intensity shape.
    pub fn shape(&self, x: f64) -> f64 {
        self.bumps
            .iter()
            .map(|b| b.weight * (-(x - b.center).powi(2) / (2.0 * b.width * b.width)).exp())
            .sum()
    }

    fn envelope(&self) -> f64 {
        self.bumps.iter().map(|b| b.weight).sum()
    }

    /// Scale `c` with `Σ_i (1 - exp(-c·Λ_i)) = target`, where `Λ_i` is the
    /// shape mass of grid cell `i` (midpoint rule). This is the expected
    /// number of distinct grid points hit by the thinned process.
    pub fn calibrate(&self, n: usize, target: f64) -> Result<f64, SimError> {
        self.validate()?;
        let h = 1.0 / (n - 1) as f64;
        let mass: Vec<f64> = (0..n)
            .map(|i| {
                let w = if i == 0 || i == n - 1 { 0.5 * h } else { h };
                self.shape(i as f64 * h) * w
            })
            .collect();
        let expected = |c: f64| mass.iter().map(|&m| 1.0 - (-c * m).exp()).sum::<f64>();
        let reachable = mass.iter().filter(|&&m| m > 0.0).count() as f64;
        if target <= 0.0 {
            return Ok(0.0);
        }
        if target >= reachable {
            return Err(SimError::InvalidRate(format!(
                "cannot place {target} expected spikes on {reachable} reachable points"
            )));
        }
        let mut hi = target.max(1.0);
        while expected(hi) < target {
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(SimError::InvalidRate("calibration diverged".into()));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if expected(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpikeProcess {
    /// Each point is a spike independently with probability `1 - alpha*`.
    #[default]
    Uniform,
    /// Clumped spikes from a thinned non-homogeneous Poisson process.
    Nhpp(RateSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct Scenario {
    pub n: usize,
    pub curve: Curve,
    pub sigma_star: f64,
    /// `mu* / (6 sigma*)`.
    pub stn: f64,
    pub alpha_star: f64,
    pub spike_process: SpikeProcess,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            n: 500,
            curve: Curve::default(),
            sigma_star: 1.0,
            stn: 2.0,
            alpha_star: 0.8,
            spike_process: SpikeProcess::Uniform,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn mu_star(&self) -> f64 {
        self.stn * 6.0 * self.sigma_star
    }

    pub fn theta_star(&self) -> [f64; 3] {
        [self.alpha_star, self.mu_star(), self.sigma_star * self.sigma_star]
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScenario(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if !(self.sigma_star > 0.0 && self.sigma_star.is_finite()) {
            return bad("sigma_star must be positive");
        }
        if !(self.stn >= 0.0 && self.stn.is_finite()) {
            return bad("stn must be nonnegative");
        }
        if !(self.alpha_star > 0.0 && self.alpha_star <= 1.0) {
            return bad("alpha_star must lie in (0, 1]");
        }
        if let SpikeProcess::Nhpp(rate) = &self.spike_process {
            rate.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub true_labels: Vec<bool>,
    pub true_f: Vec<f64>,
    pub theta_star: [f64; 3],
    pub scenario: Scenario,
}

/// Draws a dataset; identical scenarios give identical data.
pub fn generate(scenario: &Scenario) -> Result<Dataset, SimError> {
    scenario.validate()?;
    let n = scenario.n;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let p = 1.0 - scenario.alpha_star;
    let labels = match &scenario.spike_process {
        _ if p == 0.0 => vec![false; n],
        SpikeProcess::Uniform => (0..n).map(|_| rng.random::<f64>() < p).collect(),
        SpikeProcess::Nhpp(rate) => nhpp_labels(rate, n, p * n as f64, &mut rng)?,
    };
    let noise = Normal::new(0.0, scenario.sigma_star).expect("validated sigma");
    let mu = scenario.mu_star();
    let true_f: Vec<f64> = xs.iter().map(|&x| scenario.curve.eval(x)).collect();
    let ys = true_f
        .iter()
        .zip(&labels)
        .map(|(&f, &s)| f + if s { mu } else { 0.0 } + noise.sample(&mut rng))
        .collect();
    Ok(Dataset {
        xs,
        ys,
        true_labels: labels,
        true_f,
        theta_star: scenario.theta_star(),
        scenario: scenario.clone(),
    })
}

/// Lewis–Shedler thinning of a homogeneous process at the envelope rate;
/// each accepted event marks the nearest grid point.
fn nhpp_labels(
    rate: &RateSpec,
    n: usize,
    target: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>, SimError> {
    let c = rate.calibrate(n, target)?;
    let lambda_max = c * rate.envelope();
    let mut labels = vec![false; n];
    if lambda_max <= 0.0 {
        return Ok(labels);
    }
    let count = Poisson::new(lambda_max)
        .map_err(|e| SimError::InvalidRate(e.to_string()))?
        .sample(rng) as usize;
    for _ in 0..count {
        let x: f64 = rng.random();
        let u: f64 = rng.random();
        if u * lambda_max <= c * rate.shape(x) {
            let i = (x * (n - 1) as f64).round() as usize;
            labels[i.min(n - 1)] = true;
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub n: usize,
    pub stn: f64,
    pub one_minus_alpha: f64,
    pub seed: u64,
    pub l2: f64,
    pub linf: f64,
    pub fnr: f64,
    pub fpr: f64,
    pub sse: f64,
}

/// `(l2, linf)` of `fhat - f` over `grid` equispaced points of `[0, 1]`.
pub fn curve_errors(fhat: impl Fn(f64) -> f64, curve: &Curve, grid: usize) -> (f64, f64) {
    let mut ss = 0.0;
    let mut mx = 0.0f64;
    for i in 0..grid {
        let x = i as f64 / (grid - 1) as f64;
        let d = fhat(x) - curve.eval(x);
        ss += d * d;
        mx = mx.max(d.abs());
    }
    ((ss / grid as f64).sqrt(), mx)
}

/// `(fnr, fpr)` of predicted against true spike labels.
pub fn label_rates(pred: &[bool], truth: &[bool]) -> (f64, f64) {
    let (mut fn_, mut pos, mut fp, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if t {
            pos += 1;
            fn_ += usize::from(!p);
        } else {
            neg += 1;
            fp += usize::from(p);
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (rate(fn_, pos), rate(fp, neg))
}

/// Scores a pipeline run against the dataset it was run on.
pub fn metrics(
    result: &PipelineResult<f64>,
    data: &Dataset,
    eval_grid_size: usize,
) -> Result<MetricsRow, SimError> {
    if result.labels.len() != data.true_labels.len() {
        return Err(SimError::LengthMismatch);
    }
    let coef = &result.fit.coefficients;
    let basis = &result.basis;
    let (l2, linf) = curve_errors(
        |x| basis.knots().eval_spline(coef, basis.normalize(x)).unwrap_or(f64::NAN),
        &data.scenario.curve,
        eval_grid_size,
    );
    let (fnr, fpr) = label_rates(&result.labels, &data.true_labels);
    let est = [result.params.alpha, result.params.mu, result.params.sigma2];
    let sse = est.iter().zip(&data.theta_star).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(MetricsRow {
        n: data.scenario.n,
        stn: data.scenario.stn,
        one_minus_alpha: 1.0 - data.scenario.alpha_star,
        seed: data.scenario.seed,
        l2,
        linf,
        fnr,
        fpr,
        sse,
    })
}

/// Grid-L2 error of the fit at `lambda` that masks the true spikes.
pub fn oracle_l2(data: &Dataset, basis: &SplineBasis<f64>, lambda: f64) -> Result<f64, SimError> {
    let mask: Vec<bool> = data.true_labels.iter().map(|&l| !l).collect();
    let fit = crate::pipeline::masked_fit(basis, &data.xs, &data.ys, lambda, &mask)?;
    let c = &fit.coefficients;
    Ok(curve_errors(
        |x| basis.knots().eval_spline(c, basis.normalize(x)).unwrap_or(f64::NAN),
        &data.scenario.curve,
        EVAL_GRID,
    )
    .0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n: usize,
    pub stn: f64,
    pub one_minus_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct SweepSpec {
    pub ns: Vec<usize>,
    pub stns: Vec<f64>,
    pub one_minus_alphas: Vec<f64>,
    pub replicates: usize,
    pub curve: Curve,
    pub sigma_star: f64,
    pub spike_process: SpikeProcess,
    pub master_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ns: vec![500],
            stns: vec![2.0],
            one_minus_alphas: vec![0.1],
            replicates: 20,
            curve: Curve::default(),
            sigma_star: 1.0,
            spike_process: SpikeProcess::Uniform,
            master_seed: 0,
        }
    }
}

impl SweepSpec {
    /// Cells in `n`-major, then `stn`, then spike-fraction order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &n in &self.ns {
            for &stn in &self.stns {
                for &p in &self.one_minus_alphas {
                    out.push(SweepCell { n, stn, one_minus_alpha: p });
                }
            }
        }
        out
    }

    /// Scenario for replicate `rep` of `cell`, with its derived seed.
    pub fn scenario(&self, cell_index: usize, cell: SweepCell, rep: usize) -> Scenario {
        Scenario {
            n: cell.n,
            curve: self.curve.clone(),
            sigma_star: self.sigma_star,
            stn: cell.stn,
            alpha_star: 1.0 - cell.one_minus_alpha,
            spike_process: self.spike_process.clone(),
            seed: derive_seed(self.master_seed, cell_index as u64, rep as u64),
        }
    }
}

/// Mixes a master seed with two indices (splitmix64 finalizer).
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    let mut z = master
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    pub mean: MetricsRow,
    pub sd: MetricsRow,
    pub completed: usize,
    pub failed: usize,
    /// Some replicates failed; statistics cover the completed ones only.
    pub partial: bool,
    pub replicates: Vec<MetricsRow>,
}

/// Runs one replicate: generate, fit, score. The pipeline's perturbation
/// seed is set from the scenario seed.
pub fn run_replicate(scenario: &Scenario, cfg: &PipelineConfig) -> Result<MetricsRow, SimError> {
    let data = generate(scenario)?;
    let cfg = PipelineConfig {
        perturbation_seed: scenario.seed,
        ..cfg.clone()
    };
    let res = run_smoothem(&data.xs, &data.ys, &cfg)?;
    metrics(&res, &data, EVAL_GRID)
}

/// Mean and standard deviation of each metric.
pub fn summarize(rows: &[MetricsRow]) -> (MetricsRow, MetricsRow) {
    let k = rows.len() as f64;
    let get = |f: fn(&MetricsRow) -> f64| -> (f64, f64) {
        let mut v: Vec<f64> = rows.iter().map(f).collect();
        // fixed summation order regardless of replicate order
        v.sort_by(|a, b| a.total_cmp(b));
        let m = v.iter().sum::<f64>() / k;
        let var = if rows.len() > 1 {
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        (m, var.sqrt())
    };
    let (l2, l2s) = get(|r| r.l2);
    let (linf, linfs) = get(|r| r.linf);
    let (fnr, fnrs) = get(|r| r.fnr);
    let (fpr, fprs) = get(|r| r.fpr);
    let (sse, sses) = get(|r| r.sse);
    let echo = rows.first().copied().unwrap_or_default();
    let mk = |l2, linf, fnr, fpr, sse| MetricsRow { l2, linf, fnr, fpr, sse, seed: 0, ..echo };
    (mk(l2, linf, fnr, fpr, sse), mk(l2s, linfs, fnrs, fprs, sses))
}

/// Runs every cell for `spec.replicates` seeded replicates in parallel.
pub fn sweep(spec: &SweepSpec, cfg: &PipelineConfig) -> Result<Vec<SweepRow>, SimError> {
    if spec.replicates == 0 {
        return Err(SimError::InvalidScenario("replicates must be at least 1".into()));
    }
    cfg.validate()?;
    let cells = spec.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..spec.replicates).map(move |r| (c, r)))
        .collect();
    let results: Vec<Result<MetricsRow, SimError>> = jobs
        .par_iter()
        .map(|&(c, r)| run_replicate(&spec.scenario(c, cells[c], r), cfg))
        .collect();
    let mut rows = Vec::with_capacity(cells.len());
    for (c, cell) in cells.iter().enumerate() {
        let reps = &results[c * spec.replicates..(c + 1) * spec.replicates];
        let ok: Vec<MetricsRow> = reps.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
        let failed = reps.len() - ok.len();
        if ok.is_empty() {
            // surface the first error when nothing completed
            if let Some(Err(e)) = reps.first() {
                if matches!(e, SimError::InvalidScenario(_) | SimError::InvalidRate(_)) {
                    return Err(e.clone());
                }
            }
        }
        let (mean, sd) = if ok.is_empty() {
            let nan = MetricsRow {
                n: cell.n,
                stn: cell.stn,
                one_minus_alpha: cell.one_minus_alpha,
                seed: 0,
                l2: f64::NAN,
                linf: f64::NAN,
                fnr: f64::NAN,
                fpr: f64::NAN,
                sse: f64::NAN,
            };
            (nan, nan)
        } else {
            summarize(&ok)
        };
        rows.push(SweepRow {
            cell: *cell,
            mean,
            sd,
            completed: ok.len(),
            failed,
            partial: failed > 0,
            replicates: ok,
        });
    }
    Ok(rows)
}
