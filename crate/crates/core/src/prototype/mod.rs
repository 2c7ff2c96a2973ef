//! Raw class prototypes and the calibration pool.
//!
//! A calibrated prototype is `raw + class_offset + projector(task_offset)`.
//! Class offsets start as small Gaussian draws, task offsets start at zero,
//! and each class (or each task, in shared mode) owns a two-layer rectifier
//! projector from the task offset into feature space. Once a task is frozen,
//! the calibrated vectors of its classes are stored and become authoritative.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedding_store::ClassId;
use crate::error::{validation, EptError, Result};
use crate::linalg::dot;
use crate::real::Real;
use crate::rng::{stream, Stream};

pub use checkpoint::{POOL_MAGIC, POOL_VERSION};

/// Mean of the support vectors, summed in the order given.
pub fn compute_raw_prototype<T: Real, V: AsRef<[T]>>(support: &[V]) -> Result<Vec<T>> {
    let Some(first) = support.first() else {
        return validation("empty support set");
    };
    let d = first.as_ref().len();
    let mut acc = vec![T::zero(); d];
    for (i, v) in support.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != d {
            return validation(format!("support vector {i} has length {}, expected {d}", v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return validation(format!("support vector {i} is not finite"));
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a = *a + x;
        }
    }
    let n = T::from_usize(support.len()).expect("support size fits the float type");
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// `alpha * N(0, I)` draw of length `d_f`.
pub fn init_class_offset<T: Real, R: Rng + ?Sized>(d_f: usize, alpha: f64, rng: &mut R) -> Result<Vec<T>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return validation(format!("class offset scale must be positive, got {alpha}"));
    }
    Ok((0..d_f)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(alpha * z)
        })
        .collect())
}

/// Two-layer rectifier network `W2 · max(W1 · p + b1, 0) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProjector<T> {
    pub(crate) d_t: usize,
    pub(crate) d_h: usize,
    pub(crate) d_f: usize,
    /// `d_h × d_t`, row-major.
    pub(crate) w1: Vec<T>,
    pub(crate) b1: Vec<T>,
    /// `d_f × d_h`, row-major.
    pub(crate) w2: Vec<T>,
    pub(crate) b2: Vec<T>,
}

impl<T: Real> ClassProjector<T> {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn seeded<R: Rng + ?Sized>(d_t: usize, d_h: usize, d_f: usize, rng: &mut R) -> Self {
        let mut draw = |n: usize, fan_in: usize| -> Vec<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| T::lit(u.sample(rng))).collect()
        };
        let w1 = draw(d_h * d_t, d_t);
        let w2 = draw(d_f * d_h, d_h);
        Self { d_t, d_h, d_f, w1, b1: vec![T::zero(); d_h], w2, b2: vec![T::zero(); d_f] }
    }

    pub fn from_parts(
        d_t: usize,
        d_h: usize,
        d_f: usize,
        w1: Vec<T>,
        b1: Vec<T>,
        w2: Vec<T>,
        b2: Vec<T>,
    ) -> Result<Self> {
        if w1.len() != d_h * d_t || b1.len() != d_h || w2.len() != d_f * d_h || b2.len() != d_f {
            return validation(format!("projector parts do not match d_t={d_t}, d_h={d_h}, d_f={d_f}"));
        }
        let p = Self { d_t, d_h, d_f, w1, b1, w2, b2 };
        if p.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return validation("projector has non-finite entries");
        }
        Ok(p)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_t, self.d_h, self.d_f)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub(crate) fn tensors(&self) -> [&Vec<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Pre-activations `W1 · p + b1`.
    pub(crate) fn hidden_pre(&self, p: &[T]) -> Vec<T> {
        (0..self.d_h).map(|h| dot(&self.w1[h * self.d_t..(h + 1) * self.d_t], p) + self.b1[h]).collect()
    }

    pub(crate) fn output_from_hidden(&self, pre: &[T]) -> Vec<T> {
        let mut out = self.b2.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w2[i * self.d_h..(i + 1) * self.d_h];
            *o = *o + row.iter().zip(pre).fold(T::zero(), |acc, (&w, &z)| acc + w * z.max(T::zero()));
        }
        out
    }

    pub fn forward(&self, p: &[T]) -> Result<Vec<T>> {
        if p.len() != self.d_t {
            return validation(format!("task offset has length {}, projector expects {}", p.len(), self.d_t));
        }
        Ok(self.output_from_hidden(&self.hidden_pre(p)))
    }
}

pub fn project_task_offset<T: Real>(proj: &ClassProjector<T>, p_task: &[T]) -> Result<Vec<T>> {
    proj.forward(p_task)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry<T> {
    pub(crate) task_offset: Vec<T>,
    pub(crate) projectors: Vec<ClassProjector<T>>,
    pub(crate) class_ids: Vec<ClassId>,
    pub(crate) frozen: bool,
}

impl<T: Real> TaskEntry<T> {
    pub fn task_offset(&self) -> &[T] {
        &self.task_offset
    }

    pub fn projectors(&self) -> &[ClassProjector<T>] {
        &self.projectors
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRecord<T> {
    pub(crate) class_id: ClassId,
    pub(crate) raw: Vec<T>,
    pub(crate) class_offset: Vec<T>,
    pub(crate) task_index: usize,
    pub(crate) projector_index: usize,
    pub(crate) frozen_calibrated: Option<Vec<T>>,
}

impl<T: Real> ClassRecord<T> {
    pub fn class_id(&self) -> ClassId {
        self.class_id
    }

    pub fn raw_prototype(&self) -> &[T] {
        &self.raw
    }

    pub fn class_offset(&self) -> &[T] {
        &self.class_offset
    }

    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn projector_index(&self) -> usize {
        self.projector_index
    }

    pub fn frozen_calibrated(&self) -> Option<&[T]> {
        self.frozen_calibrated.as_deref()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorSharing {
    /// One projector per class.
    #[default]
    PerClass,
    /// One projector shared by every class of a task.
    PerTask,
}

/// Pool hyper-parameters. `d_t = None` means "same as the feature dimension".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSettings {
    pub d_t: Option<usize>,
    pub d_h: usize,
    pub alpha: f64,
    pub sharing: ProjectorSharing,
}

impl Default for PoolSettings {
    fn default() -> Self {
        Self { d_t: None, d_h: 4, alpha: 0.001, sharing: ProjectorSharing::PerClass }
    }
}

impl PoolSettings {
    pub fn validate(&self) -> Result<()> {
        if self.d_t == Some(0) || self.d_h == 0 {
            return Err(EptError::Config("d_t and d_h must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(EptError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Which offset families are active. Disabled families contribute exactly zero
/// and expose no trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub class_offsets: bool,
    pub task_offsets: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self { class_offsets: true, task_offsets: true }
    }
}

/// Address of one trainable tensor in the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    ClassOffset(ClassId),
    TaskOffset(usize),
    W1 { task: usize, proj: usize },
    B1 { task: usize, proj: usize },
    W2 { task: usize, proj: usize },
    B2 { task: usize, proj: usize },
}

impl ParamId {
    /// Owning task for task-scoped tensors; class offsets are resolved through the pool.
    pub fn task_of(self) -> Option<usize> {
        match self {
            ParamId::ClassOffset(_) => None,
            ParamId::TaskOffset(t) => Some(t),
            ParamId::W1 { task, .. }
            | ParamId::B1 { task, .. }
            | ParamId::W2 { task, .. }
            | ParamId::B2 { task, .. } => Some(task),
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::ClassOffset(c) => write!(f, "class[{c}].offset"),
            ParamId::TaskOffset(t) => write!(f, "task[{t}].offset"),
            ParamId::W1 { task, proj } => write!(f, "task[{task}].projector[{proj}].w1"),
            ParamId::B1 { task, proj } => write!(f, "task[{task}].projector[{proj}].b1"),
            ParamId::W2 { task, proj } => write!(f, "task[{task}].projector[{proj}].w2"),
            ParamId::B2 { task, proj } => write!(f, "task[{task}].projector[{proj}].b2"),
        }
    }
}

/// Pool-C (class records) and Pool-T (task entries) accumulated over stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPool<T> {
    pub(crate) records: BTreeMap<ClassId, ClassRecord<T>>,
    pub(crate) tasks: Vec<TaskEntry<T>>,
    pub(crate) d_f: usize,
    pub(crate) d_t: usize,
    pub(crate) d_h: usize,
    pub(crate) alpha: f64,
    pub(crate) sharing: ProjectorSharing,
    pub(crate) components: Components,
}

impl<T: Real> CalibrationPool<T> {
    pub fn new(d_f: usize, settings: &PoolSettings, components: Components) -> Result<Self> {
        settings.validate()?;
        if d_f == 0 {
            return validation("feature dimension must be at least 1");
        }
        Ok(Self {
            records: BTreeMap::new(),
            tasks: Vec::new(),
            d_f,
            d_t: settings.d_t.unwrap_or(d_f),
            d_h: settings.d_h,
            alpha: settings.alpha,
            sharing: settings.sharing,
            components,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_f, self.d_t, self.d_h)
    }

    pub fn components(&self) -> Components {
        self.components
    }

    pub fn sharing(&self) -> ProjectorSharing {
        self.sharing
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tasks(&self) -> &[TaskEntry<T>] {
        &self.tasks
    }

    pub fn records(&self) -> impl Iterator<Item = &ClassRecord<T>> {
        self.records.values()
    }

    pub fn record(&self, class: ClassId) -> Option<&ClassRecord<T>> {
        self.records.get(&class)
    }

    pub fn num_classes(&self) -> usize {
        self.records.len()
    }

    /// Class ids in ascending order; this is the row order of every stacked prototype matrix.
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.records.keys().copied().collect()
    }

    /// Registers a new task. `supports` maps each new class to its support
    /// vectors in a fixed order; the raw prototype is their mean. Initial
    /// values come from streams keyed by `seed` and the new task index.
    pub fn open_task<V: AsRef<[T]>>(&mut self, supports: &BTreeMap<ClassId, Vec<V>>, seed: u64) -> Result<usize> {
        if supports.is_empty() {
            return validation("a task needs at least one class");
        }
        if let Some(dup) = supports.keys().find(|c| self.records.contains_key(c)) {
            return validation(format!("class {dup} is already in the pool"));
        }
        let task_index = self.tasks.len();
        let mut raw = BTreeMap::new();
        for (&c, support) in supports {
            let p = compute_raw_prototype(support)?;
            if p.len() != self.d_f {
                return validation(format!("class {c} support has dimension {}, pool expects {}", p.len(), self.d_f));
            }
            raw.insert(c, p);
        }

        let mut offset_rng = stream(seed, Stream::ClassOffset, task_index as u64);
        let mut proj_rng = stream(seed, Stream::Projector, task_index as u64);
        let n_proj = match self.sharing {
            ProjectorSharing::PerClass => supports.len(),
            ProjectorSharing::PerTask => 1,
        };
        let projectors =
            (0..n_proj).map(|_| ClassProjector::seeded(self.d_t, self.d_h, self.d_f, &mut proj_rng)).collect();

        for (i, (c, raw)) in raw.into_iter().enumerate() {
            let class_offset = if self.components.class_offsets {
                init_class_offset(self.d_f, self.alpha, &mut offset_rng)?
            } else {
                vec![T::zero(); self.d_f]
            };
            let projector_index = if n_proj == 1 { 0 } else { i };
            self.records.insert(
                c,
                ClassRecord { class_id: c, raw, class_offset, task_index, projector_index, frozen_calibrated: None },
            );
        }
        self.tasks.push(TaskEntry {
            task_offset: vec![T::zero(); self.d_t],
            projectors,
            class_ids: supports.keys().copied().collect(),
            frozen: false,
        });
        Ok(task_index)
    }

    /// Task contribution `o_c` for a class, zero when task offsets are disabled.
    pub fn task_contribution(&self, class: ClassId) -> Result<Vec<T>> {
        let rec = self.get(class)?;
        if !self.components.task_offsets {
            return Ok(vec![T::zero(); self.d_f]);
        }
        let task = &self.tasks[rec.task_index];
        task.projectors[rec.projector_index].forward(&task.task_offset)
    }

    /// `raw + class_offset + o_c` for live classes; the stored vector for frozen ones.
    pub fn calibrated_prototype(&self, class: ClassId) -> Result<Vec<T>> {
        let rec = self.get(class)?;
        if let Some(frozen) = &rec.frozen_calibrated {
            return Ok(frozen.clone());
        }
        let o = self.task_contribution(class)?;
        Ok(rec.raw.iter().zip(&rec.class_offset).zip(&o).map(|((&r, &c), &t)| r + c + t).collect())
    }

    /// Rows of the stacked prototype matrix, in class-id order.
    pub fn calibrated_rows(&self) -> Result<Vec<Vec<T>>> {
        self.records.keys().map(|&c| self.calibrated_prototype(c)).collect()
    }

    /// Raw prototypes in class-id order.
    pub fn raw_rows(&self) -> Vec<Vec<T>> {
        self.records.values().map(|r| r.raw.clone()).collect()
    }

    pub fn freeze_stage(&mut self, task_index: usize) -> Result<()> {
        let Some(task) = self.tasks.get(task_index) else {
            return Err(EptError::State(format!("task {task_index} has not been opened")));
        };
        if task.frozen {
            return Err(EptError::State(format!("task {task_index} is already frozen")));
        }
        let classes = task.class_ids.clone();
        let frozen: Vec<Vec<T>> = classes.iter().map(|&c| self.calibrated_prototype(c)).collect::<Result<_>>()?;
        for (c, p) in classes.iter().zip(frozen) {
            self.records.get_mut(c).expect("task classes are registered").frozen_calibrated = Some(p);
        }
        self.tasks[task_index].frozen = true;
        Ok(())
    }

    pub fn is_frozen(&self, task_index: usize) -> bool {
        self.tasks.get(task_index).is_some_and(|t| t.frozen)
    }

    /// The single unfrozen task, if any.
    pub fn live_task(&self) -> Result<Option<usize>> {
        let live: Vec<usize> = (0..self.tasks.len()).filter(|&t| !self.tasks[t].frozen).collect();
        match live.as_slice() {
            [] => Ok(None),
            [t] => Ok(Some(*t)),
            _ => Err(EptError::State(format!("more than one unfrozen task: {live:?}"))),
        }
    }

    /// Trainable tensors of a task, honoring the enabled components. Empty for frozen tasks.
    pub fn trainable_params(&self, task_index: usize) -> Vec<ParamId> {
        let Some(task) = self.tasks.get(task_index) else { return Vec::new() };
        if task.frozen {
            return Vec::new();
        }
        let mut ids = Vec::new();
        if self.components.class_offsets {
            ids.extend(task.class_ids.iter().map(|&c| ParamId::ClassOffset(c)));
        }
        if self.components.task_offsets {
            ids.push(ParamId::TaskOffset(task_index));
            for proj in 0..task.projectors.len() {
                let t = task_index;
                ids.extend([
                    ParamId::W1 { task: t, proj },
                    ParamId::B1 { task: t, proj },
                    ParamId::W2 { task: t, proj },
                    ParamId::B2 { task: t, proj },
                ]);
            }
        }
        ids
    }

    /// Number of scalars trained for a task (counted whether or not it is frozen yet).
    pub fn task_param_count(&self, task_index: usize) -> usize {
        let Some(task) = self.tasks.get(task_index) else { return 0 };
        let mut n = 0;
        if self.components.class_offsets {
            n += task.class_ids.len() * self.d_f;
        }
        if self.components.task_offsets {
            n += self.d_t + task.projectors.iter().map(ClassProjector::param_count).sum::<usize>();
        }
        n
    }

    pub fn total_param_count(&self) -> usize {
        (0..self.tasks.len()).map(|t| self.task_param_count(t)).sum()
    }

    fn get(&self, class: ClassId) -> Result<&ClassRecord<T>> {
        self.records.get(&class).ok_or_else(|| EptError::Validation(format!("class {class} is not in the pool")))
    }

    fn owning_task(&self, id: ParamId) -> Result<usize> {
        match id {
            ParamId::ClassOffset(c) => Ok(self.get(c)?.task_index),
            other => Ok(other.task_of().expect("task-scoped id")),
        }
    }

    pub fn param(&self, id: ParamId) -> Result<&[T]> {
        let missing = || EptError::Validation(format!("no parameter {id}"));
        let task = self.owning_task(id)?;
        let entry = self.tasks.get(task).ok_or_else(missing)?;
        let proj = |p: usize| entry.projectors.get(p).ok_or_else(missing);
        Ok(match id {
            ParamId::ClassOffset(c) => &self.get(c)?.class_offset,
            ParamId::TaskOffset(_) => &entry.task_offset,
            ParamId::W1 { proj: p, .. } => &proj(p)?.w1,
            ParamId::B1 { proj: p, .. } => &proj(p)?.b1,
            ParamId::W2 { proj: p, .. } => &proj(p)?.w2,
            ParamId::B2 { proj: p, .. } => &proj(p)?.b2,
        })
    }

    /// Mutable access for the optimizer. Parameters of frozen tasks are refused.
    pub fn param_mut(&mut self, id: ParamId) -> Result<&mut [T]> {
        let task = self.owning_task(id)?;
        if self.is_frozen(task) {
            return Err(EptError::State(format!("parameter {id} belongs to frozen task {task}")));
        }
        let missing = || EptError::Validation(format!("no parameter {id}"));
        Ok(match id {
            ParamId::ClassOffset(c) => &mut self.records.get_mut(&c).ok_or_else(missing)?.class_offset,
            ParamId::TaskOffset(_) => &mut self.tasks.get_mut(task).ok_or_else(missing)?.task_offset,
            ParamId::W1 { proj, .. } => &mut self.projector_mut(task, proj).ok_or_else(missing)?.w1,
            ParamId::B1 { proj, .. } => &mut self.projector_mut(task, proj).ok_or_else(missing)?.b1,
            ParamId::W2 { proj, .. } => &mut self.projector_mut(task, proj).ok_or_else(missing)?.w2,
            ParamId::B2 { proj, .. } => &mut self.projector_mut(task, proj).ok_or_else(missing)?.b2,
        })
    }

    fn projector_mut(&mut self, task: usize, proj: usize) -> Option<&mut ClassProjector<T>> {
        self.tasks.get_mut(task)?.projectors.get_mut(proj)
    }

    pub(crate) fn projector_of(&self, class: ClassId) -> Result<(&ClassProjector<T>, &[T])> {
        let rec = self.get(class)?;
        let task = &self.tasks[rec.task_index];
        Ok((&task.projectors[rec.projector_index], &task.task_offset))
    }

    /// Scalar-wise add, used by finite-difference probes.
    pub fn nudge(&mut self, id: ParamId, index: usize, delta: T) -> Result<()> {
        let p = self.param_mut(id)?;
        let len = p.len();
        let v = p
            .get_mut(index)
            .ok_or_else(|| EptError::Validation(format!("index {index} out of range for {id} (len {len})")))?;
        *v = *v + delta;
        Ok(())
    }

    /// Copies parameter values into a pool of a different float width.
    pub fn cast<U: Real>(&self) -> CalibrationPool<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.f64())).collect::<Vec<U>>();
        CalibrationPool {
            records: self
                .records
                .iter()
                .map(|(&k, r)| {
                    (
                        k,
                        ClassRecord {
                            class_id: r.class_id,
                            raw: c(&r.raw),
                            class_offset: c(&r.class_offset),
                            task_index: r.task_index,
                            projector_index: r.projector_index,
                            frozen_calibrated: r.frozen_calibrated.as_ref().map(c),
                        },
                    )
                })
                .collect(),
            tasks: self
                .tasks
                .iter()
                .map(|t| TaskEntry {
                    task_offset: c(&t.task_offset),
                    projectors: t
                        .projectors
                        .iter()
                        .map(|p| ClassProjector {
                            d_t: p.d_t,
                            d_h: p.d_h,
                            d_f: p.d_f,
                            w1: c(&p.w1),
                            b1: c(&p.b1),
                            w2: c(&p.w2),
                            b2: c(&p.b2),
                        })
                        .collect(),
                    class_ids: t.class_ids.clone(),
                    frozen: t.frozen,
                })
                .collect(),
            d_f: self.d_f,
            d_t: self.d_t,
            d_h: self.d_h,
            alpha: self.alpha,
            sharing: self.sharing,
            components: self.components,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn supports(classes: &[(u32, Vec<Vec<f64>>)]) -> BTreeMap<ClassId, Vec<Vec<f64>>> {
        classes.iter().map(|(c, s)| (ClassId(*c), s.clone())).collect()
    }

    fn small_pool() -> CalibrationPool<f64> {
        let settings = PoolSettings { d_t: Some(3), d_h: 2, ..PoolSettings::default() };
        let mut pool = CalibrationPool::new(2, &settings, Components::default()).unwrap();
        pool.open_task(&supports(&[(0, vec![vec![1.0, 2.0], vec![3.0, 4.0]]), (1, vec![vec![-1.0, 0.5]])]), 5).unwrap();
        pool
    }

    #[test]
    fn raw_prototype_is_mean() {
        let p: Vec<f64> = compute_raw_prototype(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(p, vec![2.0, 3.0]);
        let v = vec![0.1f64, -7.25, 3.0];
        assert_eq!(compute_raw_prototype(std::slice::from_ref(&v)).unwrap(), v);
    }

    #[test]
    fn raw_prototype_rejects_empty_and_ragged() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(compute_raw_prototype(&empty).is_err());
        assert!(compute_raw_prototype(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn raw_prototype_independent_of_presentation_order_once_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<(usize, Vec<f64>)> =
            (0..17).map(|i| (i, (0..6).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect())).collect();
        let sorted: Vec<Vec<f64>> = rows.iter().map(|(_, v)| v.clone()).collect();
        let reference = compute_raw_prototype(&sorted).unwrap();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(2, 9);
        shuffled.sort_by_key(|(i, _)| *i);
        let again: Vec<Vec<f64>> = shuffled.into_iter().map(|(_, v)| v).collect();
        let out = compute_raw_prototype(&again).unwrap();
        assert!(out.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn class_offset_scale_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = init_class_offset(16, 0.5, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b: Vec<f64> = init_class_offset(16, 0.5, &mut rng).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(init_class_offset::<f64, _>(16, 0.0, &mut rng).is_err());
        assert!(init_class_offset::<f64, _>(16, -1.0, &mut rng).is_err());
    }

    #[test]
    fn class_offset_mean_norm_follows_chi_distribution() {
        // E|z| for z ~ N(0, I_d) is sqrt(2) Γ((d+1)/2) / Γ(d/2), computed in log space.
        fn ln_gamma(x: f64) -> f64 {
            // Stirling series, accurate to ~1e-10 for x > 10.
            (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + 1.0 / (12.0 * x)
                - 1.0 / (360.0 * x.powi(3))
        }
        let (d, alpha) = (1024usize, 0.001);
        let chi_mean = 2f64.sqrt() * (ln_gamma((d as f64 + 1.0) / 2.0) - ln_gamma(d as f64 / 2.0)).exp();
        let expected = alpha * chi_mean;
        assert!((expected - 0.032).abs() < 5e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws = 10_000;
        let mean: f64 = (0..draws)
            .map(|_| {
                let v: Vec<f64> = init_class_offset(d, alpha, &mut rng).unwrap();
                v.iter().map(|x| x * x).sum::<f64>().sqrt()
            })
            .sum::<f64>()
            / draws as f64;
        assert!((mean / expected - 1.0).abs() < 0.05, "mean norm {mean} vs {expected}");
    }

    #[test]
    fn projector_hand_evaluation() {
        let p = ClassProjector::from_parts(1, 1, 1, vec![2.0], vec![-1.0], vec![3.0], vec![0.5]).unwrap();
        assert_eq!(project_task_offset(&p, &[1.0]).unwrap(), vec![3.5]);
        assert_eq!(project_task_offset(&p, &[-1.0]).unwrap(), vec![0.5]);
        assert!(project_task_offset(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn projector_maps_zero_to_zero_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ClassProjector::<f64>::seeded(5, 4, 7, &mut rng);
        assert_eq!(p.forward(&[0.0; 5]).unwrap(), vec![0.0; 7]);
        let bound = 1.0 / 5f64.sqrt();
        assert!(p.w1.iter().all(|w| w.abs() <= bound));
        assert!(p.w2.iter().all(|w| w.abs() <= 0.5));
    }

    #[test]
    fn open_task_zero_task_contribution() {
        let pool = small_pool();
        for c in pool.class_ids() {
            assert_eq!(pool.task_contribution(c).unwrap(), vec![0.0, 0.0]);
            let rec = pool.record(c).unwrap();
            let expect: Vec<f64> = rec.raw.iter().zip(&rec.class_offset).map(|(a, b)| a + b).collect();
            assert_eq!(pool.calibrated_prototype(c).unwrap(), expect);
        }
        assert_eq!(pool.record(ClassId(0)).unwrap().raw, vec![2.0, 3.0]);
        assert_eq!(pool.tasks()[0].projectors().len(), 2);
    }

    #[test]
    fn duplicate_class_rejected() {
        let mut pool = small_pool();
        let r = pool.open_task(&supports(&[(1, vec![vec![0.0, 0.0]])]), 5);
        assert!(matches!(r, Err(EptError::Validation(_))));
        assert_eq!(pool.tasks().len(), 1);
    }

    #[test]
    fn calibrated_addition() {
        let mut pool = small_pool();
        let rec = pool.records.get_mut(&ClassId(0)).unwrap();
        rec.raw = vec![1.0, 1.0];
        rec.class_offset = vec![0.1, -0.1];
        // Give the projector a bias-only output of (0.2, 0.2).
        let p = &mut pool.tasks[0].projectors[0];
        p.b2 = vec![0.2, 0.2];
        let got = pool.calibrated_prototype(ClassId(0)).unwrap();
        assert!((got[0] - 1.3).abs() < 1e-15 && (got[1] - 1.1).abs() < 1e-15);

        let rec = pool.records.get_mut(&ClassId(0)).unwrap();
        rec.class_offset = vec![0.0, 0.0];
        pool.tasks[0].projectors[0].b2 = vec![0.0, 0.0];
        assert_eq!(pool.calibrated_prototype(ClassId(0)).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn decomposition_holds_for_live_classes() {
        let mut pool = small_pool();
        pool.tasks[0].task_offset = vec![0.7, -0.3, 1.1];
        pool.tasks[0].projectors[1].b1 = vec![0.2, -0.4];
        for c in pool.class_ids() {
            let cal = pool.calibrated_prototype(c).unwrap();
            let rec = pool.record(c).unwrap();
            let (proj, t) = pool.projector_of(c).unwrap();
            let o = project_task_offset(proj, t).unwrap();
            for j in 0..2 {
                let resid = cal[j] - rec.raw[j] - rec.class_offset[j];
                assert!((resid - o[j]).abs() <= 4.0 * f64::EPSILON * cal[j].abs().max(1.0));
            }
        }
    }

    #[test]
    fn freeze_snapshots_and_protects() {
        let mut pool = small_pool();
        pool.tasks[0].task_offset = vec![0.3, 0.3, 0.3];
        let before: Vec<Vec<f64>> = pool.calibrated_rows().unwrap();
        pool.freeze_stage(0).unwrap();
        assert_eq!(pool.calibrated_rows().unwrap(), before);
        for (rec, b) in pool.records().zip(&before) {
            assert_eq!(rec.frozen_calibrated().unwrap(), b.as_slice());
        }
        // Illegal mutation behind the pool's back does not leak into the frozen copy.
        pool.records.get_mut(&ClassId(0)).unwrap().class_offset[0] += 10.0;
        pool.tasks[0].task_offset[1] -= 5.0;
        let after = pool.calibrated_rows().unwrap();
        assert!(after.iter().flatten().zip(before.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(pool.param_mut(ParamId::ClassOffset(ClassId(0))), Err(EptError::State(_))));
        assert!(pool.trainable_params(0).is_empty());
    }

    #[test]
    fn freeze_errors() {
        let mut pool = small_pool();
        assert!(matches!(pool.freeze_stage(3), Err(EptError::State(_))));
        pool.freeze_stage(0).unwrap();
        assert!(matches!(pool.freeze_stage(0), Err(EptError::State(_))));
    }

    #[test]
    fn rectifier_dead_zone_gives_bias() {
        let p = ClassProjector::from_parts(
            2,
            2,
            2,
            vec![1.0, 1.0, -1.0, 0.5],
            vec![-5.0, -5.0],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.25, -0.75],
        )
        .unwrap();
        assert_eq!(p.forward(&[1.0, 2.0]).unwrap(), vec![0.25, -0.75]);
    }

    #[test]
    fn trainable_params_follow_components_and_sharing() {
        let pool = small_pool();
        // 2 class offsets + task offset + 2 projectors x 4 tensors
        assert_eq!(pool.trainable_params(0).len(), 2 + 1 + 8);
        assert_eq!(pool.task_param_count(0), 2 * 2 + 3 + 2 * (2 * 3 + 2 + 2 * 2 + 2));

        let settings =
            PoolSettings { d_t: Some(3), d_h: 2, sharing: ProjectorSharing::PerTask, ..PoolSettings::default() };
        let mut shared =
            CalibrationPool::<f64>::new(2, &settings, Components { class_offsets: false, task_offsets: true }).unwrap();
        shared.open_task(&supports(&[(0, vec![vec![1.0, 2.0]]), (1, vec![vec![0.0, 1.0]])]), 1).unwrap();
        assert_eq!(shared.trainable_params(0).len(), 1 + 4);
        assert!(shared.records().all(|r| r.class_offset == vec![0.0, 0.0] && r.projector_index == 0));
    }

    #[test]
    fn disabled_task_offsets_contribute_zero() {
        let settings = PoolSettings { d_t: Some(3), d_h: 2, ..PoolSettings::default() };
        let mut pool =
            CalibrationPool::<f64>::new(2, &settings, Components { class_offsets: true, task_offsets: false }).unwrap();
        pool.open_task(&supports(&[(4, vec![vec![1.0, 2.0]])]), 1).unwrap();
        pool.tasks[0].projectors[0].b2 = vec![9.0, 9.0];
        assert_eq!(pool.task_contribution(ClassId(4)).unwrap(), vec![0.0, 0.0]);
    }
}
