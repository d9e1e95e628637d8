//! SRCC, PLCC with a five-parameter logistic remap, the repeated 80/20 split
//! protocol, and cross-dataset evaluation matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix5, Vector5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_dataset, DatasetManifest, ImageRecord, Split, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng};
use crate::scorer::{predict_image, ScorerParams};

pub const MIN_CORRELATION_LEN: usize = 3;
pub const MIN_FIT_LEN: usize = 5;

pub const LM_MAX_ITERATIONS: usize = 200;
pub const LM_REL_TOL: f64 = 1e-10;
pub const LM_INITIAL_DAMPING: f64 = 1e-3;
const LM_MAX_DAMPING: f64 = 1e16;

fn check_pair(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min {
        return Err(Error::invalid(format!(
            "need at least {min} points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "correlation input".into(),
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_unchecked(x: &[f64], y: &[f64], what: &'static str) -> Result<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance(what));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation (two-pass, mean-centred).
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, MIN_CORRELATION_LEN)?;
    pearson_unchecked(x, y, "pearson input")
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, MIN_CORRELATION_LEN)?;
    pearson_unchecked(&average_ranks(x), &average_ranks(y), "ranks")
}

/// `1 - 6 sum(d^2) / (N (N^2 - 1))`. Only valid without ties; tied input is an error.
pub fn srcc_tie_free(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, MIN_CORRELATION_LEN)?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    if rx.iter().chain(&ry).any(|r| r.fract() != 0.0) {
        return Err(Error::invalid("tied values; use srcc"));
    }
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = x.len() as f64;
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// The five coefficients of [`logistic_map`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams(pub [f64; 5]);

/// `b1 * (1/2 - 1/(1 + exp(b2 (s - b3)))) + b4 s + b5`
pub fn logistic_map(s: f64, betas: &LogisticParams) -> f64 {
    let [b1, b2, b3, b4, b5] = betas.0;
    b1 * (0.5 - logistic_tail(b2 * (s - b3))) + b4 * s + b5
}

/// `1 / (1 + exp(z))` without overflow.
fn logistic_tail(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

#[derive(Clone, Debug)]
pub struct LogisticFit {
    pub betas: LogisticParams,
    pub sse: f64,
    /// SSE after each accepted Levenberg-Marquardt step, starting from the initial guess.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    /// True when the affine-only fit (`b1 = 0`) was at least as good as the nonlinear one.
    pub affine_fallback: bool,
}

fn sse_of(betas: &LogisticParams, x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&s, &t)| (logistic_map(s, betas) - t).powi(2))
        .sum()
}

/// Least-squares fit of [`logistic_map`] by Levenberg-Marquardt.
///
/// Start: `b1 = max(y) - min(y)`, `b2 = ±4 / std(x)` (sign of the raw
/// correlation), `b3 = mean(x)`, `b4 = 0`, `b5 = mean(y)`. Damping is
/// `lambda * diag(J'J)`, starting at `1e-3`, divided by 10 on an accepted step
/// and multiplied by 10 on a rejected one. Stops when an accepted step improves
/// SSE by less than `1e-10` relative, or after 200 iterations.
///
/// The iteration runs on standardized `x` and `y` and the coefficients are
/// mapped back afterwards, so the fit commutes with affine rescaling of either.
pub fn fit_logistic_detailed(preds: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    check_pair(preds, mos, MIN_FIT_LEN)?;
    let n = preds.len() as f64;
    let (mx, my) = (mean(preds), mean(mos));
    let sxx: f64 = preds.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("predictions"));
    }
    let syy: f64 = mos.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = preds
        .iter()
        .zip(mos)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum();
    let slope = sxy / sxx;
    let sx = (sxx / n).sqrt();
    let affine = LogisticParams([
        0.0,
        if sxy < 0.0 { -4.0 } else { 4.0 } / sx,
        mx,
        slope,
        my - slope * mx,
    ]);
    let affine_sse = sse_of(&affine, preds, mos);
    if syy == 0.0 {
        return Ok(LogisticFit {
            betas: affine,
            sse: affine_sse,
            sse_history: vec![affine_sse],
            iterations: 0,
            affine_fallback: true,
        });
    }
    let sy = (syy / n).sqrt();
    let u: Vec<f64> = preds.iter().map(|v| (v - mx) / sx).collect();
    let w: Vec<f64> = mos.iter().map(|v| (v - my) / sy).collect();
    let back = |b: &Vector5<f64>| {
        let b4 = b[3] * sy / sx;
        LogisticParams([
            b[0] * sy,
            b[1] / sx,
            mx + b[2] * sx,
            b4,
            my + sy * b[4] - b4 * mx,
        ])
    };

    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    let sign = if sxy < 0.0 { -1.0 } else { 1.0 };
    let mut beta = Vector5::new(hi - lo, sign * 4.0, 0.0, 0.0, 0.0);
    let unit = |b: &Vector5<f64>| LogisticParams([b[0], b[1], b[2], b[3], b[4]]);
    let mut sse = sse_of(&unit(&beta), &u, &w);
    let scale = sy * sy;
    let mut history = vec![sse * scale];
    let mut lambda = LM_INITIAL_DAMPING;
    let mut iterations = 0;

    'outer: while iterations < LM_MAX_ITERATIONS && sse > 0.0 {
        iterations += 1;
        let (b1, b2, b3) = (beta[0], beta[1], beta[2]);
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (&s, &t) in u.iter().zip(&w) {
            let tail = logistic_tail(b2 * (s - b3));
            let slope_term = tail * (1.0 - tail);
            let j = Vector5::new(
                0.5 - tail,
                b1 * slope_term * (s - b3),
                -b1 * slope_term * b2,
                s,
                1.0,
            );
            let r = b1 * (0.5 - tail) + beta[3] * s + beta[4] - t;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        loop {
            let mut a = jtj;
            for k in 0..5 {
                let d = jtj[(k, k)];
                a[(k, k)] += lambda * if d > 0.0 { d } else { 1.0 };
            }
            let step = a.lu().solve(&(-jtr));
            let candidate = step.map(|d| beta + d);
            let cand_sse = candidate
                .as_ref()
                .map(|c| sse_of(&unit(c), &u, &w))
                .filter(|v| v.is_finite());
            match (candidate, cand_sse) {
                (Some(c), Some(new_sse)) if new_sse < sse => {
                    let rel = (sse - new_sse) / sse;
                    beta = c;
                    sse = new_sse;
                    history.push(sse * scale);
                    lambda = (lambda / 10.0).max(1e-300);
                    if rel < LM_REL_TOL {
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > LM_MAX_DAMPING {
                        break 'outer;
                    }
                }
            }
        }
    }

    let fitted = back(&beta);
    let fitted_sse = sse_of(&fitted, preds, mos);
    if fitted_sse.is_nan() || fitted_sse > affine_sse || fitted.0.iter().any(|v| !v.is_finite()) {
        return Ok(LogisticFit {
            betas: affine,
            sse: affine_sse,
            sse_history: history,
            iterations,
            affine_fallback: true,
        });
    }
    Ok(LogisticFit {
        betas: fitted,
        sse: fitted_sse,
        sse_history: history,
        iterations,
        affine_fallback: false,
    })
}

pub fn fit_logistic(preds: &[f64], mos: &[f64]) -> Result<LogisticParams> {
    fit_logistic_detailed(preds, mos).map(|f| f.betas)
}

/// Pearson correlation between `mos` and the logistic-remapped predictions.
pub fn plcc(preds: &[f64], mos: &[f64]) -> Result<(f64, LogisticParams)> {
    let betas = fit_logistic(preds, mos)?;
    let mapped: Vec<f64> = preds.iter().map(|&p| logistic_map(p, &betas)).collect();
    let r = pearson_unchecked(&mapped, mos, "remapped predictions")?;
    Ok((r, betas))
}

/// Anything that turns an image into a quality score.
pub trait Predictor: Sync {
    fn predict(&self, record: &ImageRecord) -> Result<f64>;
}

/// Scores an image as the mean over random crops. Each image gets its own
/// stream keyed by `(seed, image id)`, so predictions do not depend on
/// evaluation order.
#[derive(Clone, Debug)]
pub struct ScorerPredictor {
    pub params: Arc<ScorerParams>,
    pub n_patches: usize,
    pub seed: u64,
}

pub const DEFAULT_TEST_PATCHES: usize = 10;
pub const DEFAULT_EVAL_SEED: u64 = 0x5eed;

impl ScorerPredictor {
    pub fn new(params: Arc<ScorerParams>) -> Self {
        Self {
            params,
            n_patches: DEFAULT_TEST_PATCHES,
            seed: DEFAULT_EVAL_SEED,
        }
    }
}

impl Predictor for ScorerPredictor {
    fn predict(&self, record: &ImageRecord) -> Result<f64> {
        let mut rng = derived_rng(self.seed, &record.id);
        predict_image(&self.params, record, self.n_patches, &mut rng)
    }
}

/// Looks scores up by image id; used for oracle and stub predictors.
#[derive(Clone, Debug, Default)]
pub struct LookupPredictor(pub BTreeMap<String, f64>);

impl Predictor for LookupPredictor {
    fn predict(&self, record: &ImageRecord) -> Result<f64> {
        self.0
            .get(&record.id)
            .copied()
            .ok_or_else(|| Error::MissingImage(record.id.clone()))
    }
}

/// Images paired with the scores predictions are compared against.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub name: String,
    pub records: Vec<Arc<ImageRecord>>,
    pub targets: Vec<f64>,
}

impl EvalSet {
    /// Every record of `manifest` against its rescaled (else raw) label.
    pub fn from_labels(manifest: &DatasetManifest) -> Self {
        let records = manifest.records().to_vec();
        let targets = records
            .iter()
            .map(|r| {
                manifest
                    .target(&r.id)
                    .expect("manifest records are labelled")
            })
            .collect();
        Self {
            name: manifest.name.clone(),
            records,
            targets,
        }
    }

    /// Every record of `manifest` against an id-keyed score table.
    pub fn from_scores(manifest: &DatasetManifest, scores: &BTreeMap<String, f64>) -> Result<Self> {
        let records = manifest.records().to_vec();
        let targets = records
            .iter()
            .map(|r| {
                scores
                    .get(&r.id)
                    .copied()
                    .ok_or_else(|| Error::MissingImage(r.id.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: manifest.name.clone(),
            records,
            targets,
        })
    }

    pub fn subset(manifest: &DatasetManifest, ids: &[String]) -> Result<Self> {
        let mut records = Vec::with_capacity(ids.len());
        let mut targets = Vec::with_capacity(ids.len());
        for id in ids {
            let r = manifest
                .record(id)
                .ok_or_else(|| Error::MissingImage(id.clone()))?;
            records.push(r.clone());
            targets.push(manifest.target(id).expect("manifest records are labelled"));
        }
        Ok(Self {
            name: manifest.name.clone(),
            records,
            targets,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub trained_on: String,
    pub dataset: String,
    pub n: usize,
    pub srcc: f64,
    pub plcc: f64,
    pub raw_pearson: f64,
    pub betas: [f64; 5],
    pub seed: u64,
}

pub fn evaluate(
    predictor: &dyn Predictor,
    set: &EvalSet,
    model: &str,
    trained_on: &str,
    seed: u64,
) -> Result<EvalReport> {
    let preds: Vec<f64> = set
        .records
        .par_iter()
        .map(|r| predictor.predict(r))
        .collect::<Result<_>>()?;
    let s = srcc(&preds, &set.targets)?;
    let raw = pearson(&preds, &set.targets)?;
    let (p, betas) = plcc(&preds, &set.targets)?;
    Ok(EvalReport {
        model: model.to_string(),
        trained_on: trained_on.to_string(),
        dataset: set.name.clone(),
        n: preds.len(),
        srcc: s,
        plcc: p,
        raw_pearson: raw,
        betas: betas.0,
        seed,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-metric medians over several runs. SRCC, PLCC and raw Pearson medians
/// are taken independently; `betas` and `seed` come from the run holding the
/// lower-middle PLCC.
pub fn median_report(runs: &[EvalReport]) -> Result<EvalReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::invalid("no runs to summarize"))?;
    let mut by_plcc: Vec<&EvalReport> = runs.iter().collect();
    by_plcc.sort_by(|a, b| a.plcc.total_cmp(&b.plcc));
    let mid = by_plcc[(runs.len() - 1) / 2];
    Ok(EvalReport {
        model: first.model.clone(),
        trained_on: first.trained_on.clone(),
        dataset: first.dataset.clone(),
        n: mid.n,
        srcc: median(runs.iter().map(|r| r.srcc).collect()),
        plcc: median(runs.iter().map(|r| r.plcc).collect()),
        raw_pearson: median(runs.iter().map(|r| r.raw_pearson).collect()),
        betas: mid.betas,
        seed: mid.seed,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RepeatedEval {
    pub median: EvalReport,
    pub runs: Vec<EvalReport>,
}

/// Repeats split -> train -> test `k` times. Split `i` uses the seed
/// `derive_seed(base_seed, "split/<i>")`.
pub fn repeated_split_eval<P, F>(
    manifest: &DatasetManifest,
    mut train_fn: F,
    k: usize,
    base_seed: u64,
    model: &str,
) -> Result<RepeatedEval>
where
    P: Predictor,
    F: FnMut(&DatasetManifest, &Split) -> Result<P>,
{
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut runs = Vec::with_capacity(k);
    for i in 0..k {
        let seed = derive_seed(base_seed, &format!("split/{i}"));
        let split = split_dataset(manifest, seed, DEFAULT_TRAIN_FRACTION)?;
        let predictor = train_fn(manifest, &split)?;
        let test = EvalSet::subset(manifest, &split.test_ids)?;
        runs.push(evaluate(&predictor, &test, model, &manifest.name, seed)?);
    }
    Ok(RepeatedEval {
        median: median_report(&runs)?,
        runs,
    })
}

pub struct ModelEntry<'a> {
    pub name: String,
    pub trained_on: String,
    pub predictor: &'a dyn Predictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossMatrix {
    pub models: Vec<(String, String)>,
    pub datasets: Vec<String>,
    /// `cells[model][dataset]`
    pub cells: Vec<Vec<EvalReport>>,
}

impl CrossMatrix {
    pub fn cell(&self, model: &str, dataset: &str) -> Option<&EvalReport> {
        let m = self.models.iter().position(|(n, _)| n == model)?;
        let d = self.datasets.iter().position(|n| n == dataset)?;
        Some(&self.cells[m][d])
    }

    /// Mean SRCC of a model row, optionally skipping datasets.
    pub fn mean_srcc(&self, model: &str, skip: &[&str]) -> Option<f64> {
        let m = self.models.iter().position(|(n, _)| n == model)?;
        let vals: Vec<f64> = self.cells[m]
            .iter()
            .filter(|c| !skip.contains(&c.dataset.as_str()))
            .map(|c| c.srcc)
            .collect();
        (!vals.is_empty()).then(|| mean(&vals))
    }

    /// One row per model; columns `<dataset>_SRCC,<dataset>_PLCC`, 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,trained_on");
        for d in &self.datasets {
            write!(out, ",{d}_SRCC,{d}_PLCC").unwrap();
        }
        out.push('\n');
        for ((name, trained_on), row) in self.models.iter().zip(&self.cells) {
            write!(out, "{name},{trained_on}").unwrap();
            for c in row {
                write!(out, ",{:.6},{:.6}", c.srcc, c.plcc).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }
}

/// Evaluates every model on the full contents of every set, without retraining.
pub fn cross_dataset_matrix(
    models: &[ModelEntry<'_>],
    sets: &[EvalSet],
    seed: u64,
) -> Result<CrossMatrix> {
    let cells = models
        .iter()
        .map(|m| {
            sets.iter()
                .map(|s| evaluate(m.predictor, s, &m.name, &m.trained_on, seed))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossMatrix {
        models: models
            .iter()
            .map(|m| (m.name.clone(), m.trained_on.clone()))
            .collect(),
        datasets: sets.iter().map(|s| s.name.clone()).collect(),
        cells,
    })
}
