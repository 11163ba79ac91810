//! Monte Carlo audits of the score constructions on synthetic designs.
//!
//! Both audits lean on the synthetic generator's closed-form nuisances:
//! [`neyman_check`] estimates the Gateaux derivative of a mean score at
//! the truth along a chosen nuisance perturbation, and
//! [`dr_identification_check`] measures the bias of the doubly robust
//! score when one nuisance is deliberately wrong. Every reduction is a
//! pairwise sum in index order, so results are bit-identical for a given
//! seed regardless of thread count.

use crate::error::{Error, Result};
use crate::stats::{mix_seed, pairwise_sum, sample_sd};
use crate::synth::{generate_synthetic, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Step sizes for the symmetric central differences; the pair feeds a
/// Richardson extrapolation that cancels the leading quadratic error.
pub const NEYMAN_STEPS: [f64; 2] = [1e-4, 1e-5];

/// Perturbed propensities must stay inside (0,1) on this whole range, not
/// just at the steps actually used.
const PERTURBATION_RANGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// Outcome model plus inverse-propensity residual correction.
    DoublyRobust,
    /// Plain weighted outcome D(w) * Y / e_w(X); not orthogonal.
    InverseProbability,
}

impl ScoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreKind::DoublyRobust => "doubly_robust",
            ScoreKind::InverseProbability => "ipw",
        }
    }
}

type Shift = Box<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;

/// A direction in nuisance space: `mu_shift` is the difference between the
/// perturbing and the true outcome regression at (arm, x), `e_shift` the
/// same for the arm's propensity.
pub struct Direction {
    pub name: String,
    mu_shift: Shift,
    e_shift: Shift,
}

impl Direction {
    pub fn new(name: impl Into<String>, mu_shift: Shift, e_shift: Shift) -> Direction {
        Direction {
            name: name.into(),
            mu_shift,
            e_shift,
        }
    }

    /// No perturbation at all; the derivative along it is exactly zero.
    pub fn zero() -> Direction {
        Direction::new("zero", Box::new(|_, _| 0.0), Box::new(|_, _| 0.0))
    }

    /// Bounded smooth shifts moving both nuisances at once.
    pub fn smooth() -> Direction {
        Direction::new(
            "smooth",
            Box::new(|arm, x: &[f64]| 0.5 + 0.25 * x[0] + 0.1 * arm as f64),
            Box::new(|_, x: &[f64]| 0.05 * (1.0 + 0.5 * x[1])),
        )
    }

    /// Constant shift of the propensity only; along this direction the
    /// inverse-probability score has derivative -c * E[mu_w(X) / e_w(X)].
    pub fn constant_propensity(c: f64) -> Direction {
        Direction::new(
            format!("propensity+{c}"),
            Box::new(|_, _| 0.0),
            Box::new(move |_, _| c),
        )
    }

    pub fn mu_shift_at(&self, arm: usize, x: &[f64]) -> f64 {
        (self.mu_shift)(arm, x)
    }

    pub fn e_shift_at(&self, arm: usize, x: &[f64]) -> f64 {
        (self.e_shift)(arm, x)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub score: String,
    pub arm: usize,
    pub direction: String,
    pub steps: Vec<f64>,
    /// Central-difference estimate at each step size.
    pub derivative_by_step: Vec<f64>,
    /// Richardson-extrapolated derivative at r = 0.
    pub derivative: f64,
    pub mc_se: f64,
    pub n_mc: usize,
    /// |derivative| <= 4 * mc_se.
    pub pass: bool,
}

/// Estimates d/dr E[psi(Y, W; mu + r*mu_shift, e + r*e_shift)] at r = 0 on
/// a fresh Monte Carlo sample from the design. The same draws feed both
/// sides of each central difference, so the differences are exact per
/// observation and the reported standard error reflects only the averaging.
pub fn neyman_check(
    spec: &SyntheticSpec,
    score: ScoreKind,
    arm: usize,
    direction: &Direction,
    n_mc: usize,
    seed: u64,
) -> Result<OrthogonalityReport> {
    if arm >= spec.num_arms() {
        return Err(Error::invalid_param(format!(
            "arm {arm} out of range for {} arms",
            spec.num_arms()
        )));
    }
    if n_mc < 2 {
        return Err(Error::invalid_param("n_mc must be at least 2"));
    }
    let mc_spec = SyntheticSpec {
        n: n_mc,
        ..spec.clone()
    };
    let (ds, _) = generate_synthetic(&mc_spec, seed)?;

    struct Obs {
        d: f64,
        y: f64,
        mu: f64,
        e: f64,
        mu_shift: f64,
        e_shift: f64,
    }
    let obs: Vec<Obs> = (0..n_mc)
        .into_par_iter()
        .map(|i| -> Result<Obs> {
            let row = ds.x.row(i);
            let x = row.as_slice().expect("covariate rows are contiguous");
            let e = spec.propensities(x)[arm];
            let e_shift = direction.e_shift_at(arm, x);
            for r in [-PERTURBATION_RANGE, PERTURBATION_RANGE] {
                let perturbed = e + r * e_shift;
                if !(perturbed > 0.0 && perturbed < 1.0) {
                    return Err(Error::invalid_param(format!(
                        "perturbed propensity {perturbed:.4} leaves (0,1) at |r| = \
                         {PERTURBATION_RANGE}"
                    )));
                }
            }
            Ok(Obs {
                d: if ds.w[i] == arm { 1.0 } else { 0.0 },
                y: ds.y[i],
                mu: spec.true_mu(arm, x),
                e,
                mu_shift: direction.mu_shift_at(arm, x),
                e_shift,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let psi = |o: &Obs, r: f64| -> f64 {
        let e_r = o.e + r * o.e_shift;
        match score {
            ScoreKind::DoublyRobust => {
                let mu_r = o.mu + r * o.mu_shift;
                mu_r + o.d * (o.y - mu_r) / e_r
            }
            ScoreKind::InverseProbability => o.d * o.y / e_r,
        }
    };

    let diff_at = |h: f64| -> Vec<f64> {
        obs.iter()
            .map(|o| (psi(o, h) - psi(o, -h)) / (2.0 * h))
            .collect()
    };
    let d1 = diff_at(NEYMAN_STEPS[0]);
    let d2 = diff_at(NEYMAN_STEPS[1]);
    let derivative_by_step = vec![
        pairwise_sum(&d1) / n_mc as f64,
        pairwise_sum(&d2) / n_mc as f64,
    ];
    // per-observation Richardson combination, so the mean and its spread
    // describe the same quantity
    let extrapolated: Vec<f64> = d1
        .iter()
        .zip(&d2)
        .map(|(&a, &b)| (100.0 * b - a) / 99.0)
        .collect();
    let derivative = pairwise_sum(&extrapolated) / n_mc as f64;
    let mc_se = sample_sd(&extrapolated) / (n_mc as f64).sqrt();

    Ok(OrthogonalityReport {
        score: score.as_str().to_string(),
        arm,
        direction: direction.name.clone(),
        steps: NEYMAN_STEPS.to_vec(),
        derivative_by_step,
        derivative,
        mc_se,
        n_mc,
        pass: derivative.abs() <= 4.0 * mc_se,
    })
}

/// Closed-form counterpart of the inverse-probability derivative along a
/// constant propensity shift c: -c * E[mu_w(X) / e_w(X)], integrated by
/// Monte Carlo over the known covariate law alone. Returns (value, se).
pub fn analytic_ipw_derivative(
    spec: &SyntheticSpec,
    arm: usize,
    shift: f64,
    n_draws: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if arm >= spec.num_arms() {
        return Err(Error::invalid_param(format!(
            "arm {arm} out of range for {} arms",
            spec.num_arms()
        )));
    }
    if n_draws < 2 {
        return Err(Error::invalid_param("n_draws must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..n_draws)
        .map(|_| {
            let x: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            -shift * spec.true_mu(arm, &x) / spec.propensities(&x)[arm]
        })
        .collect();
    let mean = pairwise_sum(&vals) / n_draws as f64;
    let se = sample_sd(&vals) / (n_draws as f64).sqrt();
    Ok((mean, se))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    BothCorrect,
    /// Outcome regression replaced by g(x) = 0; propensity kept true.
    WrongOutcome,
    /// Propensity replaced by h(x) = 0.5; outcome regression kept true.
    WrongPropensity,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::BothCorrect => "both_correct",
            Scenario::WrongOutcome => "wrong_outcome",
            Scenario::WrongPropensity => "wrong_propensity",
        }
    }

    pub fn all() -> [Scenario; 3] {
        [
            Scenario::BothCorrect,
            Scenario::WrongOutcome,
            Scenario::WrongPropensity,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub score: String,
    pub scenario: String,
    pub arm: usize,
    pub mc_mean: f64,
    pub truth: f64,
    pub bias: f64,
    pub mc_se: f64,
    pub n_mc: usize,
    /// |bias| <= 4 * mc_se.
    pub pass: bool,
}

fn bias_report(
    score: ScoreKind,
    scenario_name: &str,
    arm: usize,
    gammas: &[f64],
    truth: f64,
) -> BiasReport {
    let n = gammas.len();
    let mc_mean = pairwise_sum(gammas) / n as f64;
    let mc_se = sample_sd(gammas) / (n as f64).sqrt();
    let bias = mc_mean - truth;
    BiasReport {
        score: score.as_str().to_string(),
        scenario: scenario_name.to_string(),
        arm,
        mc_mean,
        truth,
        bias,
        mc_se,
        n_mc: n,
        pass: bias.abs() <= 4.0 * mc_se,
    }
}

/// Monte Carlo mean of the doubly robust score with one nuisance possibly
/// misspecified, against the design's exact mean potential outcome. The
/// score stays unbiased as long as either nuisance is correct.
pub fn dr_identification_check(
    spec: &SyntheticSpec,
    scenario: Scenario,
    arm: usize,
    n_mc: usize,
    seed: u64,
) -> Result<BiasReport> {
    if arm >= spec.num_arms() {
        return Err(Error::invalid_param(format!(
            "arm {arm} out of range for {} arms",
            spec.num_arms()
        )));
    }
    if n_mc < 2 {
        return Err(Error::invalid_param("n_mc must be at least 2"));
    }
    let mc_spec = SyntheticSpec {
        n: n_mc,
        ..spec.clone()
    };
    let (ds, _) = generate_synthetic(&mc_spec, seed)?;
    let gammas: Vec<f64> = (0..n_mc)
        .into_par_iter()
        .map(|i| {
            let row = ds.x.row(i);
            let x = row.as_slice().expect("covariate rows are contiguous");
            let mu = match scenario {
                Scenario::WrongOutcome => 0.0,
                _ => spec.true_mu(arm, x),
            };
            let e = match scenario {
                Scenario::WrongPropensity => 0.5,
                _ => spec.propensities(x)[arm],
            };
            let d = if ds.w[i] == arm { 1.0 } else { 0.0 };
            mu + d * (ds.y[i] - mu) / e
        })
        .collect();
    Ok(bias_report(
        ScoreKind::DoublyRobust,
        scenario.as_str(),
        arm,
        &gammas,
        spec.analytic_apo()[arm],
    ))
}

/// Negative control: the plain inverse-probability score with the same
/// wrong propensity h(x) = 0.5 has no correction term and stays biased
/// whenever the true propensity is far from one half.
pub fn ipw_wrong_propensity_check(
    spec: &SyntheticSpec,
    arm: usize,
    n_mc: usize,
    seed: u64,
) -> Result<BiasReport> {
    if arm >= spec.num_arms() {
        return Err(Error::invalid_param(format!(
            "arm {arm} out of range for {} arms",
            spec.num_arms()
        )));
    }
    if n_mc < 2 {
        return Err(Error::invalid_param("n_mc must be at least 2"));
    }
    let mc_spec = SyntheticSpec {
        n: n_mc,
        ..spec.clone()
    };
    let (ds, _) = generate_synthetic(&mc_spec, seed)?;
    let gammas: Vec<f64> = (0..n_mc)
        .map(|i| {
            let d = if ds.w[i] == arm { 1.0 } else { 0.0 };
            d * ds.y[i] / 0.5
        })
        .collect();
    Ok(bias_report(
        ScoreKind::InverseProbability,
        "wrong_propensity",
        arm,
        &gammas,
        spec.analytic_apo()[arm],
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpwDerivativeCheck {
    pub arm: usize,
    pub shift: f64,
    pub numeric: f64,
    pub numeric_se: f64,
    pub analytic: f64,
    pub analytic_se: f64,
    /// |numeric - analytic| <= 4 * combined se.
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsBattery {
    /// Doubly robust score along a smooth joint perturbation, per arm;
    /// every entry must pass.
    pub orthogonality: Vec<OrthogonalityReport>,
    /// Doubly robust score under the three nuisance scenarios; every entry
    /// must pass.
    pub identification: Vec<BiasReport>,
    /// Inverse-probability score with the wrong propensity; must FAIL its
    /// own bias gate, otherwise the battery would not detect anything.
    pub negative_control: BiasReport,
    /// Nonzero inverse-probability derivative against its closed form.
    pub ipw_derivative: IpwDerivativeCheck,
    pub all_pass: bool,
}

/// Full audit used by the command-line `verify` run: orthogonality per
/// arm, the three identification scenarios, the biased negative control,
/// and the analytic derivative cross-check. Each piece draws its own
/// sample from a seed derived off `seed`.
pub fn run_battery(spec: &SyntheticSpec, n_mc: usize, seed: u64) -> Result<DiagnosticsBattery> {
    let direction = Direction::smooth();
    let mut orthogonality = Vec::new();
    for arm in 0..spec.num_arms() {
        orthogonality.push(neyman_check(
            spec,
            ScoreKind::DoublyRobust,
            arm,
            &direction,
            n_mc,
            mix_seed(seed, &[1, arm as u64]),
        )?);
    }
    let mut identification = Vec::new();
    for (k, scenario) in Scenario::all().into_iter().enumerate() {
        identification.push(dr_identification_check(
            spec,
            scenario,
            1,
            n_mc,
            mix_seed(seed, &[2, k as u64]),
        )?);
    }
    let negative_control = ipw_wrong_propensity_check(spec, 1, n_mc, mix_seed(seed, &[3]))?;

    let shift = 0.1;
    let numeric = neyman_check(
        spec,
        ScoreKind::InverseProbability,
        0,
        &Direction::constant_propensity(shift),
        n_mc,
        mix_seed(seed, &[4]),
    )?;
    let (analytic, analytic_se) =
        analytic_ipw_derivative(spec, 0, shift, n_mc, mix_seed(seed, &[5]))?;
    let combined_se = (numeric.mc_se.powi(2) + analytic_se.powi(2)).sqrt();
    let ipw_derivative = IpwDerivativeCheck {
        arm: 0,
        shift,
        numeric: numeric.derivative,
        numeric_se: numeric.mc_se,
        analytic,
        analytic_se,
        pass: (numeric.derivative - analytic).abs() <= 4.0 * combined_se,
    };

    let all_pass = orthogonality.iter().all(|r| r.pass)
        && identification.iter().all(|r| r.pass)
        && !negative_control.pass
        && ipw_derivative.pass;
    Ok(DiagnosticsBattery {
        orthogonality,
        identification,
        negative_control,
        ipw_derivative,
        all_pass,
    })
}
