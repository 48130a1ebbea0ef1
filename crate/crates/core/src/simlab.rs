//! Desk-scale simulations: robust mean estimation on a Gaussian mixture, the
//! fixed three-point trajectory, loss-descent curves for Newton-IRLS against
//! gradient descent, and the residual diagnostic used to compare clean and
//! perturbed token sets.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::attention_matrix;
use crate::error::{Error, Result};
use crate::estimator::{gradient_descent, newton_irls, wls_estimate, IrlsTrace, WeightedPoints};
use crate::matrix::{distance, squared_distance, Matrix};
use crate::penalty::Penalty;
use crate::rng::NormalStream;

/// Standard deviations at or below this place points exactly on the mean.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixtureSpec {
    pub n_clean: usize,
    pub n_outlier: usize,
    pub clean_mean: [f64; 2],
    pub outlier_mean: [f64; 2],
    pub clean_std: f64,
    pub outlier_std: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            n_clean: 100,
            n_outlier: 0,
            clean_mean: [0.0, 0.0],
            outlier_mean: [8.0, 8.0],
            clean_std: 1.0,
            outlier_std: 0.5,
            seed: 0,
        }
    }
}

impl MixtureSpec {
    /// Sets the outlier count so outliers make up `ratio` of all points.
    pub fn with_outlier_ratio(mut self, ratio: f64) -> Result<Self> {
        self.n_outlier = outlier_count(ratio, self.n_clean)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clean == 0 {
            return Err(Error::invalid("at least one clean sample is required"));
        }
        if !(self.clean_std > 0.0 && self.outlier_std > 0.0) {
            return Err(Error::invalid("standard deviations must be positive"));
        }
        let coords = self.clean_mean.iter().chain(&self.outlier_mean);
        if !(self.clean_std.is_finite() && self.outlier_std.is_finite()) || coords.clone().any(|x| !x.is_finite()) {
            return Err(Error::invalid("mixture parameters must be finite"));
        }
        Ok(())
    }
}

/// `round(ratio / (1 − ratio) · n_clean)`.
pub fn outlier_count(ratio: f64, n_clean: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("outlier ratio must lie in [0, 1), got {ratio}")));
    }
    Ok((ratio / (1.0 - ratio) * n_clean as f64).round() as usize)
}

/// Clean points first, then outliers; each point consumes one Box–Muller
/// pair (x from the cosine half, y from the sine half). Uniform weights.
pub fn sample_mixture(spec: &MixtureSpec) -> Result<WeightedPoints> {
    spec.validate()?;
    let mut rng = NormalStream::new(spec.seed);
    let mut data = Vec::with_capacity(2 * (spec.n_clean + spec.n_outlier));
    let groups = [
        (spec.n_clean, spec.clean_mean, spec.clean_std),
        (spec.n_outlier, spec.outlier_mean, spec.outlier_std),
    ];
    for (count, mean, std) in groups {
        for _ in 0..count {
            let (a, b) = rng.next_pair();
            if std <= STD_FLOOR {
                data.extend_from_slice(&mean);
            } else {
                data.push(mean[0] + std * a);
                data.push(mean[1] + std * b);
            }
        }
    }
    let values = Matrix::new(spec.n_clean + spec.n_outlier, 2, data)?;
    Ok(WeightedPoints::uniform(values))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRecord {
    pub penalty: String,
    pub seed: u64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub penalty: String,
    pub method: String,
    pub step: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub label: String,
    pub trace: IrlsTrace,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub metadata: BTreeMap<String, String>,
    pub errors: Vec<ErrorRecord>,
    pub curves: Vec<CurvePoint>,
    pub traces: Vec<TraceRecord>,
}

impl ExperimentReport {
    fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            ..Self::default()
        }
    }

    fn meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn errors_for(&self, penalty: &Penalty) -> Vec<f64> {
        let label = penalty.to_string();
        self.errors.iter().filter(|e| e.penalty == label).map(|e| e.error).collect()
    }

    pub fn median_error(&self, penalty: &Penalty) -> Option<f64> {
        median(&self.errors_for(penalty))
    }

    /// Mean loss per step for one penalty and method ("newton" or "gd").
    pub fn mean_curve(&self, penalty: &Penalty, method: &str) -> Vec<f64> {
        let label = penalty.to_string();
        let mut points: Vec<&CurvePoint> = self
            .curves
            .iter()
            .filter(|c| c.penalty == label && c.method == method)
            .collect();
        points.sort_by_key(|c| c.step);
        points.into_iter().map(|c| c.mean_loss).collect()
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn clean_mean(pts: &WeightedPoints, n_clean: usize) -> Vec<f64> {
    let values = pts.values();
    let mut sum = vec![0.0; values.cols()];
    for row in values.iter_rows().take(n_clean) {
        for (s, x) in sum.iter_mut().zip(row) {
            *s += x;
        }
    }
    sum.into_iter().map(|s| s / n_clean as f64).collect()
}

fn mixture_errors(spec: &MixtureSpec, penalties: &[Penalty], steps: usize, eps: f64) -> Result<Vec<ErrorRecord>> {
    let pts = sample_mixture(spec)?;
    let truth = clean_mean(&pts, spec.n_clean);
    penalties
        .iter()
        .map(|p| {
            let trace = newton_irls(p, &pts, steps, eps, None)?;
            Ok(ErrorRecord {
                penalty: p.to_string(),
                seed: spec.seed,
                error: distance(trace.final_iterate(), &truth),
            })
        })
        .collect()
}

/// Runs every penalty on one mixture sample; the error is the distance from
/// the final iterate to the mean of the clean points actually drawn.
pub fn outlier_experiment(spec: &MixtureSpec, penalties: &[Penalty], steps: usize, eps: f64) -> Result<ExperimentReport> {
    outlier_sweep(spec, &[spec.seed], penalties, steps, eps)
}

/// [`outlier_experiment`] repeated over seeds. Seeds run in parallel; rows
/// come back in seed order.
pub fn outlier_sweep(
    base: &MixtureSpec,
    seeds: &[u64],
    penalties: &[Penalty],
    steps: usize,
    eps: f64,
) -> Result<ExperimentReport> {
    if penalties.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("need at least one penalty and one seed"));
    }
    let rows = seeds
        .par_iter()
        .map(|&seed| mixture_errors(&MixtureSpec { seed, ..*base }, penalties, steps, eps))
        .collect::<Result<Vec<_>>>()?;

    let mut report = ExperimentReport::new("outliers");
    report.meta("n_clean", base.n_clean);
    report.meta("n_outlier", base.n_outlier);
    report.meta("clean_mean", format!("{:?}", base.clean_mean));
    report.meta("outlier_mean", format!("{:?}", base.outlier_mean));
    report.meta("clean_std", base.clean_std);
    report.meta("outlier_std", base.outlier_std);
    report.meta("seeds", format!("{}..={}", seeds[0], seeds[seeds.len() - 1]));
    report.meta("steps", steps);
    report.meta("eps", eps);
    report.errors = rows.into_iter().flatten().collect();
    Ok(report)
}

pub fn trajectory_attention() -> Matrix {
    Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 2.0]])
        .expect("constant matrix")
}

pub fn trajectory_values() -> Matrix {
    Matrix::from_rows(&[vec![1.0, 2.0], vec![7.0, 25.0], vec![25.0, 37.0]]).expect("constant matrix")
}

/// One trace per row of the fixed 3×3 attention matrix, each started at the
/// row's normalized weighted mean of the three 2-D values.
pub fn trajectory_experiment(penalty: &Penalty, steps: usize, eps: f64) -> Result<Vec<IrlsTrace>> {
    if steps == 0 {
        return Err(Error::invalid("trajectory needs at least one step"));
    }
    let a = trajectory_attention();
    let v = trajectory_values();
    a.iter_rows()
        .map(|row| {
            let pts = WeightedPoints::new(v.clone(), row.to_vec())?;
            newton_irls(penalty, &pts, steps, eps, None)
        })
        .collect()
}

pub fn trajectory_report(penalty: &Penalty, steps: usize, eps: f64) -> Result<ExperimentReport> {
    let traces = trajectory_experiment(penalty, steps, eps)?;
    let mut report = ExperimentReport::new("trajectory");
    report.meta("penalty", penalty);
    report.meta("steps", steps);
    report.meta("eps", eps);
    report.traces = traces
        .into_iter()
        .enumerate()
        .map(|(i, trace)| TraceRecord {
            label: format!("row{i}"),
            trace,
        })
        .collect();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentSpec {
    pub batch: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
    pub steps: usize,
    pub seed: u64,
    pub eps: f64,
    pub include_gd: bool,
    pub eta: f64,
}

impl Default for DescentSpec {
    fn default() -> Self {
        Self {
            batch: 8,
            heads: 4,
            tokens: 64,
            dim: 8,
            steps: 8,
            seed: 0,
            eps: crate::penalty::DEFAULT_EPS,
            include_gd: true,
            eta: 0.05,
        }
    }
}

/// ℓ1, MCP (γ = 4) and Huber (δ = 0.8).
pub fn default_descent_penalties() -> Vec<Penalty> {
    vec![
        Penalty::l1(),
        Penalty::mcp(4.0).expect("valid"),
        Penalty::huber(0.8).expect("valid"),
    ]
}

/// Per-token loss sequences over B·H random attention instances, averaged
/// per step. Each (batch, head) instance draws Q, K, V (N×D, unit normals,
/// in that order) from one stream seeded with `seed`.
pub fn descent_curves(spec: &DescentSpec, penalties: &[Penalty]) -> Result<ExperimentReport> {
    if spec.batch == 0 || spec.heads == 0 || spec.tokens == 0 || spec.dim == 0 {
        return Err(Error::invalid("descent dimensions must be positive"));
    }
    if penalties.is_empty() {
        return Err(Error::invalid("need at least one penalty"));
    }
    let (n, d) = (spec.tokens, spec.dim);
    let mut rng = NormalStream::new(spec.seed);
    let mut instances = Vec::with_capacity(spec.batch * spec.heads);
    for _ in 0..spec.batch * spec.heads {
        let q = Matrix::new(n, d, rng.fill(n * d))?;
        let k = Matrix::new(n, d, rng.fill(n * d))?;
        let v = Matrix::new(n, d, rng.fill(n * d))?;
        instances.push((attention_matrix(&q, &k, true)?, v));
    }

    let mut report = ExperimentReport::new("descent");
    report.meta("B", spec.batch);
    report.meta("H", spec.heads);
    report.meta("N", n);
    report.meta("D", d);
    report.meta("steps", spec.steps);
    report.meta("seed", spec.seed);
    report.meta("eps", spec.eps);
    if spec.include_gd {
        report.meta("eta", spec.eta);
    }

    let tokens_total = (spec.batch * spec.heads * n) as f64;
    for p in penalties {
        let per_instance = instances
            .par_iter()
            .map(|(a, v)| instance_loss_sums(p, a, v, spec))
            .collect::<Result<Vec<_>>>()?;
        let mut methods = vec![("newton", 0usize)];
        if spec.include_gd {
            methods.push(("gd", 1));
        }
        for (method, idx) in methods {
            let mut sums = vec![0.0; spec.steps + 1];
            for inst in &per_instance {
                for (s, x) in sums.iter_mut().zip(&inst[idx]) {
                    *s += x;
                }
            }
            for (step, s) in sums.into_iter().enumerate() {
                report.curves.push(CurvePoint {
                    penalty: p.to_string(),
                    method: method.to_string(),
                    step,
                    mean_loss: s / tokens_total,
                });
            }
        }
    }
    Ok(report)
}

/// Per-step loss sums over the tokens of one instance: `[newton, gd]`.
fn instance_loss_sums(p: &Penalty, a: &Matrix, v: &Matrix, spec: &DescentSpec) -> Result<[Vec<f64>; 2]> {
    let mut newton = vec![0.0; spec.steps + 1];
    let mut gd = vec![0.0; spec.steps + 1];
    for row in a.iter_rows() {
        let pts = WeightedPoints::new(v.clone(), row.to_vec())?;
        let trace = newton_irls(p, &pts, spec.steps, spec.eps, None)?;
        if let Some(step) = trace.first_ascent(1e-9) {
            return Err(Error::Invariant(format!("{p}: loss increased at step {step}")));
        }
        for (s, l) in newton.iter_mut().zip(&trace.losses) {
            *s += l;
        }
        if spec.include_gd {
            let trace = gradient_descent(p, &pts, spec.steps, spec.eta, spec.eps, None)?;
            for (s, l) in gd.iter_mut().zip(&trace.losses) {
                *s += l;
            }
        }
    }
    Ok([newton, gd])
}

/// Mean over tokens of `‖v_j − z*‖²` where `z*` is the weighted mean.
pub fn residual_diagnostic(values: &Matrix, weights: &[f64]) -> Result<f64> {
    let pts = WeightedPoints::new(values.clone(), weights.to_vec())?;
    let z = wls_estimate(&pts);
    let total = values.iter_rows().fold(0.0, |acc, v| acc + squared_distance(v, &z));
    Ok(total / values.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_std_places_points_on_the_mean() {
        let spec = MixtureSpec {
            n_clean: 5,
            clean_std: STD_FLOOR,
            clean_mean: [1.5, -2.0],
            ..MixtureSpec::default()
        };
        let pts = sample_mixture(&spec).unwrap();
        assert!(pts.values().iter_rows().all(|r| r == [1.5, -2.0]));
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = MixtureSpec::default().with_outlier_ratio(0.45).unwrap();
        assert_eq!(spec.n_outlier, 82);
        assert_eq!(sample_mixture(&spec).unwrap(), sample_mixture(&spec).unwrap());
        let other = MixtureSpec { seed: 1, ..spec };
        assert_ne!(sample_mixture(&spec).unwrap(), sample_mixture(&other).unwrap());
    }

    #[test]
    fn outlier_block_sits_near_its_mean() {
        let spec = MixtureSpec {
            n_outlier: 45,
            ..MixtureSpec::default()
        };
        let pts = sample_mixture(&spec).unwrap();
        let bound = 3.0 * 0.5 / 45f64.sqrt();
        for c in 0..2 {
            let m: f64 = (100..145).map(|r| pts.values().get(r, c)).sum::<f64>() / 45.0;
            assert!((m - 8.0).abs() <= bound, "coord {c}: {m}");
        }
    }

    #[test]
    fn outlier_counts() {
        assert_eq!(outlier_count(0.0, 100).unwrap(), 0);
        assert_eq!(outlier_count(0.15, 100).unwrap(), 18);
        assert!(outlier_count(1.0, 100).is_err());
        assert!(MixtureSpec { n_clean: 0, ..MixtureSpec::default() }.validate().is_err());
        assert!(MixtureSpec { outlier_std: 0.0, ..MixtureSpec::default() }.validate().is_err());
    }

    #[test]
    fn no_outliers_gives_exact_l2() {
        let spec = MixtureSpec::default();
        let report = outlier_experiment(&spec, &[Penalty::l2()], 10, 1e-6).unwrap();
        assert_eq!(report.errors[0].error, 0.0);
    }

    #[test]
    fn trajectory_single_support_rows_stay_put() {
        let traces = trajectory_experiment(&Penalty::l1(), 3, 1e-6).unwrap();
        assert!(traces[1].iterates.iter().all(|z| z == &[1.0, 2.0]));
        assert!(traces[2].iterates.iter().all(|z| z == &[25.0, 37.0]));
        assert!(trajectory_experiment(&Penalty::l1(), 0, 1e-6).is_err());
    }

    #[test]
    fn descent_with_zero_steps() {
        let spec = DescentSpec {
            batch: 1,
            heads: 1,
            tokens: 4,
            dim: 2,
            steps: 0,
            ..DescentSpec::default()
        };
        let report = descent_curves(&spec, &[Penalty::l1()]).unwrap();
        assert_eq!(report.mean_curve(&Penalty::l1(), "newton").len(), 1);
        assert_eq!(report.mean_curve(&Penalty::l1(), "gd").len(), 1);
    }

    #[test]
    fn residual_diagnostic_examples() {
        let same = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(residual_diagnostic(&same, &[1.0, 3.0]).unwrap(), 0.0);
        let two = Matrix::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(residual_diagnostic(&two, &[1.0, 1.0]).unwrap(), 1.0);
        assert!(residual_diagnostic(&two, &[1.0]).is_err());
    }

    #[test]
    fn residual_diagnostic_grows_with_shift() {
        let mut rng = NormalStream::new(4);
        let base = rng.fill(16);
        let mean_x = base.iter().step_by(2).sum::<f64>() / 8.0;
        let away = (base[0] - mean_x).signum();
        let mut last = f64::NEG_INFINITY;
        for shift in [1.0, 2.0, 4.0, 8.0] {
            let mut data = base.clone();
            data[0] += away * shift;
            let values = Matrix::new(8, 2, data).unwrap();
            let r = residual_diagnostic(&values, &[1.0; 8]).unwrap();
            assert!(r > last, "shift {shift}: {r} <= {last}");
            last = r;
        }
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
