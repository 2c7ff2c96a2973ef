//! Calibration training: losses, reverse-mode gradients and the stage loop.
//!
//! The objective for a batch is `mean CE + λ_inter · mean L_inter`, where the
//! CE logits are `−R_i / τ` (negative NEP residuals) and
//! `L_inter = 1 / (|P_neg| · (Σ_j ‖f − p_j‖ + ε))` over every known prototype
//! except the sample's own class.
//!
//! Gradients reach the live prototypes through the ridge solve. With
//! `A = KKᵀ + λI`, `ρ = A⁻¹Kf` and upstream `ḡ = ∂L/∂ρ`, solving `A s = ḡ`
//! gives `∂L/∂K = s fᵀ − (s ρᵀ + ρ sᵀ) K`. Frozen rows of `K` are constants.
//! From a live row `p_c` the gradient flows to the class offset and through
//! the rectifier projector to its weights and the task offset. Raw prototypes
//! are constants.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{ClassId, EmbeddingDataset};
use crate::error::{validation, EptError, Result};
use crate::linalg::{axpy, dist, dot, norm, Matrix};
use crate::nep::{Metric, NepModel};
use crate::prototype::{CalibrationPool, ParamId};
use crate::real::Real;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_epochs: usize,
    pub inc_epochs: usize,
    pub batch_size: usize,
    pub lambda_inter: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_epochs: 100,
            inc_epochs: 60,
            batch_size: 64,
            lambda_inter: 0.1,
            temperature: 1.0,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EptError::Config(m.to_string()));
        if self.base_epochs == 0 || self.inc_epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lambda_inter >= 0.0) || !self.lambda_inter.is_finite() {
            return bad("lambda_inter must be non-negative");
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }

    pub fn epochs_for(&self, stage: usize) -> usize {
        if stage == 0 {
            self.base_epochs
        } else {
            self.inc_epochs
        }
    }
}

/// How training turns prototypes into logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitSource {
    /// `−R_i / τ` from the ridge-reconstruction residuals.
    Nep,
    /// `−distance_i / τ` under a plain metric.
    Metric(Metric),
}

#[derive(Debug, Clone, Copy)]
pub struct LossSettings<T> {
    pub logits: LogitSource,
    pub lambda_reg: T,
    pub epsilon: T,
    pub lambda_inter: T,
    pub temperature: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub feature: Vec<T>,
    pub label: ClassId,
}

/// `logits_i = −R_i(f) / τ`.
pub fn nep_logits<T: Real>(model: &NepModel<T>, f: &[T], temperature: T) -> Result<Vec<T>> {
    if !(temperature > T::zero()) {
        return validation(format!("temperature must be positive, got {temperature}"));
    }
    Ok(model.residuals(f)?.into_iter().map(|r| -r / temperature).collect())
}

fn metric_logits<T: Real>(k: &Matrix<T>, f: &[T], metric: Metric, temperature: T) -> Result<Vec<T>> {
    (0..k.rows()).map(|i| Ok(-metric.distance(k.row(i), f)? / temperature)).collect()
}

fn softmax<T: Real>(logits: &[T]) -> (Vec<T>, T) {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: T = exps.iter().copied().sum();
    (exps.into_iter().map(|e| e / s).collect(), m + s.ln())
}

/// `−log softmax(logits)[label]`, stabilized by subtracting the max logit.
pub fn ce_loss<T: Real>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return validation(format!("label index {label} out of range for {} logits", logits.len()));
    }
    let (_, lse) = softmax(logits);
    Ok(lse - logits[label])
}

/// `1 / (|P_neg| · (Σ_j ‖f − p_j‖ + ε))`, and 0 when there are no negatives.
pub fn inter_loss<T: Real, V: AsRef<[T]>>(f: &[T], negatives: &[V], epsilon: T) -> T {
    if negatives.is_empty() {
        return T::zero();
    }
    let s: T = negatives.iter().map(|p| dist(f, p.as_ref())).sum();
    let n = T::from_usize(negatives.len()).unwrap();
    T::one() / n / (s + epsilon)
}

struct BatchContext<T> {
    class_ids: Vec<ClassId>,
    k: Matrix<T>,
    nep: Option<NepModel<T>>,
}

fn context<T: Real>(pool: &CalibrationPool<T>, settings: &LossSettings<T>) -> Result<BatchContext<T>> {
    let class_ids = pool.class_ids();
    let k = Matrix::from_rows(&pool.calibrated_rows()?)?;
    let nep = match settings.logits {
        LogitSource::Nep => Some(NepModel::new(k.clone(), class_ids.clone(), settings.lambda_reg, settings.epsilon)?),
        LogitSource::Metric(_) => None,
    };
    Ok(BatchContext { class_ids, k, nep })
}

fn label_row<T: Real>(pool: &CalibrationPool<T>, class_ids: &[ClassId], label: ClassId) -> Result<usize> {
    let live = pool.live_task()?;
    let rec = pool.record(label).ok_or_else(|| EptError::Validation(format!("label {label} is not in the pool")))?;
    if live.is_some_and(|t| t != rec.task_index()) {
        return validation(format!("label {label} does not belong to the task being trained"));
    }
    Ok(class_ids.binary_search(&label).expect("pool ids are sorted"))
}

/// Mean CE plus `λ_inter` times mean inter-class loss over the batch, with
/// prototypes recomputed from the pool.
pub fn total_loss<T: Real>(batch: &[&Sample<T>], pool: &CalibrationPool<T>, settings: &LossSettings<T>) -> Result<T> {
    if batch.is_empty() {
        return validation("empty batch");
    }
    let ctx = context(pool, settings)?;
    let mut ce_sum = T::zero();
    let mut inter_sum = T::zero();
    for s in batch {
        let y = label_row(pool, &ctx.class_ids, s.label)?;
        let logits = match (&ctx.nep, settings.logits) {
            (Some(model), _) => nep_logits(model, &s.feature, settings.temperature)?,
            (None, LogitSource::Metric(m)) => metric_logits(&ctx.k, &s.feature, m, settings.temperature)?,
            (None, LogitSource::Nep) => unreachable!(),
        };
        ce_sum = ce_sum + ce_loss(&logits, y)?;
        let negatives: Vec<&[T]> = (0..ctx.k.rows()).filter(|&j| j != y).map(|j| ctx.k.row(j)).collect();
        inter_sum = inter_sum + inter_loss(&s.feature, &negatives, settings.epsilon);
    }
    let n = T::from_usize(batch.len()).unwrap();
    Ok(ce_sum / n + settings.lambda_inter * (inter_sum / n))
}

/// Gradients of the batch loss for every trainable tensor of the live task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet<T> {
    pub grads: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Real> GradientSet<T> {
    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(&id).map(Vec::as_slice)
    }

    pub fn max_abs(&self) -> T {
        self.grads.values().flatten().fold(T::zero(), |m, g| m.max(g.abs()))
    }
}

/// Loss value and exact gradients for one batch.
pub fn backward<T: Real>(
    batch: &[&Sample<T>],
    pool: &CalibrationPool<T>,
    settings: &LossSettings<T>,
) -> Result<(T, GradientSet<T>)> {
    if batch.is_empty() {
        return validation("empty batch");
    }
    let Some(task) = pool.live_task()? else {
        return Ok((total_loss(batch, pool, settings)?, GradientSet::default()));
    };
    let ctx = context(pool, settings)?;
    let (c, d) = (ctx.k.rows(), ctx.k.cols());
    let w = T::one() / T::from_usize(batch.len()).unwrap();
    let tau = settings.temperature;
    let eps = settings.epsilon;
    let lambda_inter = settings.lambda_inter;

    let mut dk = Matrix::<T>::zeros(c, d);
    // Σ over samples of (s ρᵀ + ρ sᵀ); applied as −M K after the batch.
    let mut sym = Matrix::<T>::zeros(c, c);
    let mut loss = T::zero();

    for s in batch {
        let f = s.feature.as_slice();
        if f.len() != d {
            return validation(format!("sample has dimension {}, prototypes have {d}", f.len()));
        }
        let y = label_row(pool, &ctx.class_ids, s.label)?;

        match (&ctx.nep, settings.logits) {
            (Some(model), _) => {
                let rho = model.coefficients(f)?;
                let mut e = Vec::with_capacity(c);
                let mut r = Vec::with_capacity(c);
                let mut den = Vec::with_capacity(c);
                let mut z = Vec::with_capacity(c);
                for i in 0..c {
                    let ki = ctx.k.row(i);
                    let ei: Vec<T> = f.iter().zip(ki).map(|(&fj, &kj)| fj - rho[i] * kj).collect();
                    let ri = norm(&ei);
                    let di = rho[i].abs() + eps;
                    z.push(-(ri / di) / tau);
                    e.push(ei);
                    r.push(ri);
                    den.push(di);
                }
                let (p, lse) = softmax(&z);
                loss = loss + w * (lse - z[y]);

                let mut drho = vec![T::zero(); c];
                for i in 0..c {
                    let dz = w * (p[i] - if i == y { T::one() } else { T::zero() });
                    let d_res = -dz / tau;
                    let dr = d_res / den[i];
                    let dden = -d_res * (r[i] / den[i]) / den[i];
                    drho[i] = drho[i] + dden * sign(rho[i]);
                    if r[i] > T::zero() {
                        let scale = dr / r[i];
                        let ki = ctx.k.row(i);
                        // e_i = f − ρ_i k_i
                        drho[i] = drho[i] - scale * dot(&e[i], ki);
                        axpy(-rho[i] * scale, &e[i], dk.row_mut(i));
                    }
                }
                let sv = model.factor().solve(&drho);
                for i in 0..c {
                    axpy(sv[i], f, dk.row_mut(i));
                    for j in 0..c {
                        let v = sym.get(i, j) + sv[i] * rho[j] + rho[i] * sv[j];
                        sym.set(i, j, v);
                    }
                }
            }
            (None, LogitSource::Metric(metric)) => {
                let z = metric_logits(&ctx.k, f, metric, tau)?;
                let (p, lse) = softmax(&z);
                loss = loss + w * (lse - z[y]);
                for i in 0..c {
                    let dz = w * (p[i] - if i == y { T::one() } else { T::zero() });
                    let d_dist = -dz / tau;
                    metric_grad(metric, ctx.k.row(i), f, d_dist, dk.row_mut(i));
                }
            }
            (None, LogitSource::Nep) => unreachable!(),
        }

        if c > 1 {
            let dists: Vec<T> = (0..c).map(|j| if j == y { T::zero() } else { dist(f, ctx.k.row(j)) }).collect();
            let total: T = dists.iter().copied().sum();
            let n_neg = T::from_usize(c - 1).unwrap();
            let denom = total + eps;
            loss = loss + w * lambda_inter / n_neg / denom;
            let d_total = -w * lambda_inter / n_neg / (denom * denom);
            for j in (0..c).filter(|&j| j != y) {
                if dists[j] > T::zero() {
                    let g = d_total / dists[j];
                    let kj = ctx.k.row(j).to_vec();
                    for (dst, (&a, &b)) in dk.row_mut(j).iter_mut().zip(kj.iter().zip(f)) {
                        *dst = *dst + g * (a - b);
                    }
                }
            }
        }
    }

    if ctx.nep.is_some() {
        let mk = sym.matmul(&ctx.k);
        for i in 0..c {
            let row = mk.row(i).to_vec();
            axpy(-T::one(), &row, dk.row_mut(i));
        }
    }

    let grads = param_grads(pool, task, &ctx.class_ids, &dk)?;
    for (id, g) in &grads.grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(EptError::Numeric(format!("non-finite gradient for {id}")));
        }
    }
    if !loss.is_finite() {
        return Err(EptError::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grads))
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Adds `upstream · ∂distance(p, f)/∂p` into `out`.
fn metric_grad<T: Real>(metric: Metric, p: &[T], f: &[T], upstream: T, out: &mut [T]) {
    match metric {
        Metric::Euclidean => {
            let dd = dist(p, f);
            if dd > T::zero() {
                for ((o, &a), &b) in out.iter_mut().zip(p).zip(f) {
                    *o = *o + upstream * (a - b) / dd;
                }
            }
        }
        Metric::SquaredEuclidean => {
            let two = T::lit(2.0);
            for ((o, &a), &b) in out.iter_mut().zip(p).zip(f) {
                *o = *o + upstream * two * (a - b);
            }
        }
        Metric::Cosine => {
            let (np, nf) = (norm(p), norm(f));
            if np > T::zero() && nf > T::zero() {
                let cos = dot(p, f) / (np * nf);
                for ((o, &a), &b) in out.iter_mut().zip(p).zip(f) {
                    *o = *o - upstream * (b / (np * nf) - cos * a / (np * np));
                }
            }
        }
    }
}

/// Maps row gradients of the prototype matrix onto the live task's tensors.
fn param_grads<T: Real>(
    pool: &CalibrationPool<T>,
    task: usize,
    class_ids: &[ClassId],
    dk: &Matrix<T>,
) -> Result<GradientSet<T>> {
    let mut out = GradientSet::default();
    let components = pool.components();
    let entry = &pool.tasks()[task];
    let (_, d_t, d_h) = pool.dims();
    if components.task_offsets {
        out.grads.insert(ParamId::TaskOffset(task), vec![T::zero(); d_t]);
        for (proj, p) in entry.projectors().iter().enumerate() {
            let (pt, ph, pf) = p.dims();
            out.grads.insert(ParamId::W1 { task, proj }, vec![T::zero(); ph * pt]);
            out.grads.insert(ParamId::B1 { task, proj }, vec![T::zero(); ph]);
            out.grads.insert(ParamId::W2 { task, proj }, vec![T::zero(); pf * ph]);
            out.grads.insert(ParamId::B2 { task, proj }, vec![T::zero(); pf]);
        }
    }
    for &class in entry.class_ids() {
        let row = class_ids.binary_search(&class).expect("live class is in the pool");
        let dp = dk.row(row);
        if components.class_offsets {
            out.grads.insert(ParamId::ClassOffset(class), dp.to_vec());
        }
        if components.task_offsets {
            let (p, t) = pool.projector_of(class)?;
            let proj = pool.record(class).expect("live class").projector_index();
            let pre = p.hidden_pre(t);
            let mut dpre = vec![T::zero(); d_h];
            {
                let dw2 = out.grads.get_mut(&ParamId::W2 { task, proj }).unwrap();
                for (i, &g) in dp.iter().enumerate() {
                    for h in 0..d_h {
                        dw2[i * d_h + h] = dw2[i * d_h + h] + g * pre[h].max(T::zero());
                        dpre[h] = dpre[h] + p.w2[i * d_h + h] * g;
                    }
                }
            }
            {
                let db2 = out.grads.get_mut(&ParamId::B2 { task, proj }).unwrap();
                axpy(T::one(), dp, db2);
            }
            // Zero pre-activations count as active, so a zero-initialized task
            // offset still receives gradient through the projector.
            for h in 0..d_h {
                if pre[h] < T::zero() {
                    dpre[h] = T::zero();
                }
            }
            {
                let dw1 = out.grads.get_mut(&ParamId::W1 { task, proj }).unwrap();
                for h in 0..d_h {
                    axpy(dpre[h], t, &mut dw1[h * d_t..(h + 1) * d_t]);
                }
            }
            axpy(T::one(), &dpre, out.grads.get_mut(&ParamId::B1 { task, proj }).unwrap());
            let dt = out.grads.get_mut(&ParamId::TaskOffset(task)).unwrap();
            for h in 0..d_h {
                axpy(dpre[h], &p.w1[h * d_t..(h + 1) * d_t], dt);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { learning_rate: c.learning_rate, beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState<T> {
    first: BTreeMap<ParamId, Vec<T>>,
    second: BTreeMap<ParamId, Vec<T>>,
    step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction.
pub fn optimizer_step<T: Real>(
    pool: &mut CalibrationPool<T>,
    grads: &GradientSet<T>,
    state: &mut OptimizerState<T>,
    config: &AdamConfig,
) -> Result<()> {
    for (&id, g) in &grads.grads {
        let len = pool.param(id)?.len();
        if g.len() != len {
            return validation(format!("gradient for {id} has length {}, parameter has {len}", g.len()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(config.beta1), T::lit(config.beta2));
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.eps);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (&id, g) in &grads.grads {
        let m = state.first.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.second.entry(id).or_insert_with(|| vec![T::zero(); g.len()]);
        let p = pool.param_mut(id)?;
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Records which dataset rows training touched.
#[derive(Debug, Default)]
pub struct AccessAudit {
    reads: Mutex<Vec<usize>>,
}

impl AccessAudit {
    pub fn take(&self) -> Vec<usize> {
        std::mem::take(&mut *self.reads.lock().unwrap())
    }

    fn record(&self, row: usize) {
        self.reads.lock().unwrap().push(row);
    }
}

/// The rows a stage may train on. Every read goes through here.
pub struct SupportView<'a> {
    dataset: &'a EmbeddingDataset,
    rows: &'a [usize],
    audit: Option<&'a AccessAudit>,
}

impl<'a> SupportView<'a> {
    pub fn new(dataset: &'a EmbeddingDataset, rows: &'a [usize], audit: Option<&'a AccessAudit>) -> Self {
        Self { dataset, rows, audit }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn read<T: Real>(&self, k: usize) -> Sample<T> {
        let row = self.rows[k];
        if let Some(a) = self.audit {
            a.record(row);
        }
        Sample {
            feature: self.dataset.row(row).iter().map(|&v| T::lit(v as f64)).collect(),
            label: self.dataset.label(row),
        }
    }

    /// Support vectors grouped per class, in row order.
    pub fn grouped<T: Real>(&self) -> BTreeMap<ClassId, Vec<Vec<T>>> {
        let mut out: BTreeMap<ClassId, Vec<Vec<T>>> = BTreeMap::new();
        for k in 0..self.len() {
            let s = self.read::<T>(k);
            out.entry(s.label).or_default().push(s.feature);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrainReport {
    pub stage: usize,
    pub epochs: usize,
    /// Mean loss per epoch, measured on each batch before its update.
    pub loss_trace: Vec<f64>,
}

/// Trains the live task on its support set, then freezes it.
pub fn train_stage<T: Real>(
    support: &SupportView<'_>,
    task_index: usize,
    pool: &mut CalibrationPool<T>,
    settings: &LossSettings<T>,
    config: &TrainConfig,
) -> Result<StageTrainReport> {
    config.validate()?;
    if task_index >= pool.tasks().len() {
        return Err(EptError::State(format!("task {task_index} has not been opened")));
    }
    if pool.is_frozen(task_index) {
        return Err(EptError::State(format!("task {task_index} is frozen")));
    }
    if pool.live_task()? != Some(task_index) {
        return Err(EptError::State(format!("task {task_index} is not the live task")));
    }
    let epochs = config.epochs_for(task_index);
    let samples: Vec<Sample<T>> = (0..support.len()).map(|k| support.read(k)).collect();
    let mut trace = Vec::new();
    if !pool.trainable_params(task_index).is_empty() && !samples.is_empty() {
        let adam = AdamConfig::from(config);
        let mut state = OptimizerState::default();
        let mut rng = stream(config.seed, Stream::Shuffle, task_index as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
                let (loss, grads) = backward(&batch, pool, settings)?;
                optimizer_step(pool, &grads, &mut state, &adam)?;
                sum += loss.f64() * chunk.len() as f64;
            }
            trace.push(sum / samples.len() as f64);
        }
    }
    pool.freeze_stage(task_index)?;
    Ok(StageTrainReport { stage: task_index, epochs, loss_trace: trace })
}
