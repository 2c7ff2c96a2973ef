//! Randomized finite-difference check of [`crate::train::backward`].
//!
//! Each trial builds a small pool with one frozen task and one live task,
//! randomizes every trainable tensor, draws a batch near the live prototypes
//! and compares the analytic gradient of every scalar against a central
//! difference of [`crate::train::total_loss`]. Instances that sit close to a
//! non-smooth point (a hidden unit near zero, a coefficient near zero) are
//! redrawn, since a central difference straddling a kink measures nothing.
//! Coefficients are also kept away from zero by a fixed margin: the residual
//! divides by `|ρ_i|`, and near zero its curvature swamps the difference.
//!
//! The error for one tensor is `‖g − g̃‖ / max(‖g‖, ‖g̃‖, floor)`, with the floor
//! at 1e-8 in f64. In f32 the floor is at least 1e-4 and at least the mean
//! per-sample gradient norm, since batch gradients that cancel lose relative
//! precision that no f32 computation can keep. The floor
//! keeps tensors whose true gradient is below what a difference of O(1)
//! losses can resolve from reading as large relative errors. Temperatures are
//! drawn high enough that the softmax is not saturated, so the CE path carries
//! real gradient.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding_store::ClassId;
use crate::error::{EptError, Result};
use crate::linalg::Matrix;
use crate::nep::{Metric, NepModel};
use crate::prototype::{CalibrationPool, Components, ParamId, PoolSettings, ProjectorSharing};
use crate::real::Real;
use crate::rng::{stream, Stream};
use crate::train::{backward, total_loss, LogitSource, LossSettings, Sample};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub float32: bool,
    /// Also check the three distance-metric logit paths on every instance.
    pub metrics: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { trials: 100, seed: 0, float32: false, metrics: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub precision: String,
    pub trials: usize,
    pub step: f64,
    pub scalars_checked: usize,
    pub max_rel_err: f64,
    /// Parameter path and logit source of the worst tensor.
    pub worst: String,
    /// Worst error per parameter kind (`class_offset`, `task_offset`, `w1`, ...).
    pub per_kind: BTreeMap<String, f64>,
    /// Worst error per logit source.
    pub per_source: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Central-difference step, applied in f64.
pub const STEP: f64 = 1e-5;
/// Hidden pre-activations closer to zero than this are redrawn.
const PRE_MARGIN: f64 = 1e-3;

pub fn run_grad_check(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.trials == 0 {
        return Err(EptError::Config("grad-check needs at least one trial".into()));
    }
    if opts.float32 {
        check::<f32>(opts)
    } else {
        check::<f64>(opts)
    }
}

fn kind(id: ParamId) -> &'static str {
    match id {
        ParamId::ClassOffset(_) => "class_offset",
        ParamId::TaskOffset(_) => "task_offset",
        ParamId::W1 { .. } => "w1",
        ParamId::B1 { .. } => "b1",
        ParamId::W2 { .. } => "w2",
        ParamId::B2 { .. } => "b2",
    }
}

fn source_name(s: LogitSource) -> &'static str {
    match s {
        LogitSource::Nep => "nep",
        LogitSource::Metric(m) => m.name(),
    }
}

fn check<T: Real>(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let h = STEP;
    // Gradients smaller than this are below what the precision under test resolves.
    let floor: f64 = if T::BYTES == 4 { 1e-4 } else { 1e-8 };
    let mut sources = vec![LogitSource::Nep];
    if opts.metrics {
        sources.extend(Metric::ALL.iter().map(|&m| LogitSource::Metric(m)));
    }
    let mut report = GradCheckReport {
        precision: T::NAME.to_string(),
        trials: opts.trials,
        step: h,
        scalars_checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        per_kind: BTreeMap::new(),
        per_source: BTreeMap::new(),
    };
    for trial in 0..opts.trials {
        let mut rng = stream(opts.seed, Stream::GradCheck, trial as u64);
        let sharing = if trial % 2 == 0 { ProjectorSharing::PerClass } else { ProjectorSharing::PerTask };
        let (pool, batch, base) = draw_instance::<T, _>(&mut rng, sharing)?;
        // The reference difference always runs in f64 on the exactly widened
        // instance, so an f32 check measures the f32 backward pass alone.
        let pool64: CalibrationPool<f64> = pool.cast();
        let batch64: Vec<Sample<f64>> = batch
            .iter()
            .map(|s| Sample { feature: s.feature.iter().map(|x| x.f64()).collect(), label: s.label })
            .collect();
        let refs64: Vec<&Sample<f64>> = batch64.iter().collect();
        for &src in &sources {
            // Squared distances are an order of magnitude larger than the
            // other logit sources; scale τ to keep the softmax unsaturated.
            let tau_scale = if src == LogitSource::Metric(Metric::SquaredEuclidean) { 10.0 } else { 1.0 };
            let base = LossSettings { temperature: base.temperature * T::lit(tau_scale), ..base };
            let settings = LossSettings { logits: src, ..base };
            let settings64 = LossSettings {
                logits: src,
                lambda_reg: base.lambda_reg.f64(),
                epsilon: base.epsilon.f64(),
                lambda_inter: base.lambda_inter.f64(),
                temperature: base.temperature.f64(),
            };
            let refs: Vec<&Sample<T>> = batch.iter().collect();
            let (_, grads) = backward(&refs, &pool, &settings)?;
            let live = pool.live_task()?.expect("instance has a live task");
            let per_sample = if T::BYTES == 4 {
                refs.iter()
                    .map(|s| backward(std::slice::from_ref(s), &pool, &settings).map(|g| g.1))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            for id in pool.trainable_params(live) {
                let analytic = match grads.get(id) {
                    Some(g) => g.to_vec(),
                    None => vec![T::zero(); pool.param(id)?.len()],
                };
                let mut numeric = Vec::with_capacity(analytic.len());
                for idx in 0..analytic.len() {
                    numeric.push(central_difference(&pool64, &refs64, &settings64, id, idx, h)?);
                }
                // In f32, per-sample gradients can cancel in the batch mean, and
                // rounding acts on the terms, not on the small sum. The scale is
                // then the mean per-sample magnitude.
                let scale = per_sample
                    .iter()
                    .filter_map(|g| g.get(id))
                    .map(|g| g.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt())
                    .sum::<f64>()
                    / refs.len() as f64;
                let err = rel_err(&analytic, &numeric, floor.max(scale));
                report.scalars_checked += analytic.len();
                let k = report.per_kind.entry(kind(id).to_string()).or_insert(0.0);
                *k = k.max(err);
                let s = report.per_source.entry(source_name(src).to_string()).or_insert(0.0);
                *s = s.max(err);
                if err > report.max_rel_err || report.worst.is_empty() {
                    report.max_rel_err = err.max(report.max_rel_err);
                    report.worst = format!("trial {trial}, {}, {id}", source_name(src));
                }
            }
        }
    }
    Ok(report)
}

fn central_difference(
    pool: &CalibrationPool<f64>,
    batch: &[&Sample<f64>],
    settings: &LossSettings<f64>,
    id: ParamId,
    idx: usize,
    h: f64,
) -> Result<f64> {
    let mut plus = pool.clone();
    plus.nudge(id, idx, h)?;
    let mut minus = pool.clone();
    minus.nudge(id, idx, -h)?;
    let lp = total_loss(batch, &plus, settings)?;
    let lm = total_loss(batch, &minus, settings)?;
    Ok((lp - lm) / (2.0 * h))
}

fn rel_err<T: Real>(analytic: &[T], numeric: &[f64], floor: f64) -> f64 {
    let a: Vec<f64> = analytic.iter().map(|x| x.f64()).collect();
    let diff = a.iter().zip(numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

fn gauss<T: Real, R: Rng + ?Sized>(rng: &mut R, scale: f64, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
        .collect::<Vec<T>>()
}

const D_F: usize = 8;
const D_T: usize = 8;
const D_H: usize = 4;
const RHO_MARGIN: f64 = 0.01;

type Instance<T> = (CalibrationPool<T>, Vec<Sample<T>>, LossSettings<T>);

/// Draws instances until one keeps clear of every non-smooth point.
fn draw_instance<T: Real, R: Rng + ?Sized>(rng: &mut R, sharing: ProjectorSharing) -> Result<Instance<T>> {
    for _ in 0..1000 {
        let settings = PoolSettings { d_t: Some(D_T), d_h: D_H, alpha: 0.001, sharing };
        let mut pool = CalibrationPool::<T>::new(D_F, &settings, Components::default())?;
        for (task, classes) in [(0usize, 0u32..2), (1, 2..5)] {
            let supports: BTreeMap<ClassId, Vec<Vec<T>>> =
                classes.map(|c| (ClassId(c), vec![gauss(rng, 2.0, D_F)])).collect();
            pool.open_task(&supports, rng.random())?;
            for id in pool.trainable_params(task) {
                let scale = match id {
                    ParamId::ClassOffset(_) | ParamId::B2 { .. } => 0.3,
                    _ => 0.8,
                };
                let n = pool.param(id)?.len();
                pool.param_mut(id)?.copy_from_slice(&gauss::<T, _>(rng, scale, n));
            }
            if task == 0 {
                pool.freeze_stage(0)?;
            }
        }

        let live: Vec<ClassId> = pool.tasks()[1].class_ids().to_vec();
        let batch: Vec<Sample<T>> = (0..4)
            .map(|_| {
                let label = live[rng.random_range(0..live.len())];
                let p = pool.calibrated_prototype(label)?;
                let noise: Vec<T> = gauss(rng, 0.5, D_F);
                Ok(Sample { feature: p.iter().zip(&noise).map(|(&a, &b)| a + b).collect(), label })
            })
            .collect::<Result<_>>()?;
        let base = LossSettings {
            logits: LogitSource::Nep,
            lambda_reg: T::lit(0.3),
            epsilon: T::lit(1e-8),
            lambda_inter: T::lit(rng.random_range(0.5..2.0)),
            temperature: T::lit(rng.random_range(10.0..40.0)),
        };
        if clear_of_kinks(&pool, &batch, &base)? {
            return Ok((pool, batch, base));
        }
    }
    Err(EptError::Numeric("could not draw a grad-check instance away from non-smooth points".into()))
}

fn clear_of_kinks<T: Real>(pool: &CalibrationPool<T>, batch: &[Sample<T>], s: &LossSettings<T>) -> Result<bool> {
    let live = pool.live_task()?.expect("live task");
    for &c in pool.tasks()[live].class_ids() {
        let (proj, p) = pool.projector_of(c)?;
        if proj.hidden_pre(p).iter().any(|v| v.f64().abs() < PRE_MARGIN) {
            return Ok(false);
        }
    }
    let k = Matrix::from_rows(&pool.calibrated_rows()?)?;
    let model = NepModel::new(k, pool.class_ids(), s.lambda_reg, s.epsilon)?;
    for sample in batch {
        if model.coefficients(&sample.feature)?.iter().any(|r| r.f64().abs() < RHO_MARGIN) {
            return Ok(false);
        }
    }
    Ok(true)
}
