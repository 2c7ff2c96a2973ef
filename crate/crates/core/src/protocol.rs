//! The multi-stage run: split, train each stage on its own support rows,
//! freeze, evaluate on every class seen so far.

use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Precision, RunConfig};
use crate::embedding_store::{bias_support, split_protocol, ClassId, EmbeddingDataset, StagePlan};
use crate::error::{EptError, Result};
use crate::linalg::Matrix;
use crate::nep::{Classifier, Metric, NepModel};
use crate::prototype::CalibrationPool;
use crate::real::Real;
use crate::train::{train_stage, AccessAudit, LossSettings, SupportView};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub accuracy: f64,
    pub num_test_samples: usize,
    /// Trainable scalars in the pool after this stage.
    pub params: usize,
    pub per_class: BTreeMap<u32, ClassAccuracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageMetrics>,
    pub average: f64,
    pub params_trainable: usize,
    pub config: RunConfig,
    pub seed: u64,
    pub ablation: Ablation,
    /// Per-stage mean epoch losses; empty for stages with nothing to train.
    pub loss_traces: Vec<Vec<f64>>,
}

impl RunReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn last_accuracy(&self) -> f64 {
        self.stages.last().map_or(0.0, |s| s.accuracy)
    }

    /// One line of stage accuracies in percent followed by the average.
    pub fn accuracy_row(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            out.push_str(&format!("{:>7.2}", 100.0 * s.accuracy));
        }
        out.push_str(&format!("  | {:>6.2}", 100.0 * self.average));
        out
    }

    pub fn accuracy_header(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            out.push_str(&format!("{:>7}", format!("S{}", s.stage)));
        }
        out.push_str("  |    Avg");
        out
    }
}

/// Rows read by training during one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageAudit {
    pub stage: usize,
    pub reads: usize,
    /// Reads outside the stage's own support rows.
    pub foreign_reads: Vec<usize>,
}

/// A run plus what the report leaves out.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub plan: StagePlan,
    pub audit: Vec<StageAudit>,
    /// Predicted class per test row of each stage, aligned with `plan.stages[t].test_indices`.
    pub predictions: Vec<Vec<ClassId>>,
    /// Bit patterns of every frozen prototype after each stage, widened to f64.
    pub frozen_snapshots: Vec<BTreeMap<ClassId, Vec<u64>>>,
}

pub type CheckpointSink<'a> = dyn FnMut(usize, &[u8]) -> Result<()> + 'a;

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Evaluation worker threads; 0 or 1 evaluates on the calling thread.
    pub threads: usize,
    /// Pool checkpoint bytes to resume from; its frozen stages are not retrained.
    pub resume: Option<Vec<u8>>,
    /// Called with the stage index and the pool checkpoint after each stage.
    pub checkpoint: Option<Box<CheckpointSink<'a>>>,
}

pub fn run_protocol(dataset: &EmbeddingDataset, config: &RunConfig) -> Result<RunReport> {
    Ok(run_protocol_with(dataset, config, &mut RunOptions::default())?.report)
}

pub fn run_protocol_with(
    dataset: &EmbeddingDataset,
    config: &RunConfig,
    opts: &mut RunOptions<'_>,
) -> Result<RunOutcome> {
    config.validate()?;
    match config.precision {
        Precision::F64 => run::<f64>(dataset, config, opts),
        Precision::F32 => run::<f32>(dataset, config, opts),
    }
}

fn resumed_pool<T: Real>(bytes: &[u8], dataset: &EmbeddingDataset, config: &RunConfig) -> Result<CalibrationPool<T>> {
    let pool = CalibrationPool::<f64>::from_checkpoint_bytes(bytes)?.cast::<T>();
    let (d_f, d_t, d_h) = pool.dims();
    let want_dt = config.pool.d_t.unwrap_or(dataset.dim());
    if d_f != dataset.dim() || d_t != want_dt || d_h != config.pool.d_h {
        return Err(EptError::Config(format!(
            "checkpoint dims (d_f {d_f}, d_t {d_t}, d_h {d_h}) do not match the run (d_f {}, d_t {want_dt}, d_h {})",
            dataset.dim(),
            config.pool.d_h
        )));
    }
    if pool.components() != config.ablation.components() || pool.sharing() != config.pool.sharing {
        return Err(EptError::Config("checkpoint components or projector sharing differ from the config".into()));
    }
    if pool.live_task()?.is_some() {
        return Err(EptError::State("checkpoint has an unfrozen task".into()));
    }
    Ok(pool)
}

fn run<T: Real>(dataset: &EmbeddingDataset, config: &RunConfig, opts: &mut RunOptions<'_>) -> Result<RunOutcome> {
    let seed = config.train.seed;
    let plan = split_protocol(dataset, &config.protocol, seed)?;
    let data: Cow<'_, EmbeddingDataset> = if config.support_bias > 0.0 {
        Cow::Owned(bias_support(dataset, &plan, config.support_bias, seed)?)
    } else {
        Cow::Borrowed(dataset)
    };
    let mut pool = match &opts.resume {
        Some(bytes) => resumed_pool::<T>(bytes, dataset, config)?,
        None => CalibrationPool::<T>::new(dataset.dim(), &config.pool, config.ablation.components())?,
    };
    if pool.tasks().len() > plan.len() {
        return Err(EptError::Config("checkpoint has more stages than the protocol".into()));
    }
    let settings = LossSettings {
        logits: config.logit_source(),
        lambda_reg: T::lit(config.nep.lambda_reg),
        epsilon: T::lit(config.nep.epsilon),
        lambda_inter: T::lit(config.train.lambda_inter),
        temperature: T::lit(config.train.temperature),
    };

    let audit = AccessAudit::default();
    let mut outcome_audit = Vec::new();
    let mut stages = Vec::new();
    let mut traces = Vec::new();
    let mut predictions = Vec::new();
    let mut snapshots = Vec::new();

    for stage in &plan.stages {
        let t = stage.index;
        let mut reads = Vec::new();
        if t < pool.tasks().len() {
            if pool.tasks()[t].class_ids() != stage.class_set.as_slice() {
                return Err(EptError::Config(format!(
                    "checkpoint stage {t} holds different classes than the protocol"
                )));
            }
            traces.push(Vec::new());
        } else {
            let view = SupportView::new(&data, &stage.support_indices, Some(&audit));
            let supports = view.grouped::<T>();
            let opened = pool.open_task(&supports, seed)?;
            debug_assert_eq!(opened, t);
            let trained = train_stage(&view, t, &mut pool, &settings, &config.train)?;
            traces.push(trained.loss_trace);
            reads = audit.take();
        }
        let foreign_reads = reads.iter().copied().filter(|r| stage.support_indices.binary_search(r).is_err()).collect();
        outcome_audit.push(StageAudit { stage: t, reads: reads.len(), foreign_reads });

        let classifier = build_classifier(&pool, config, t)?;
        let (mut metrics, preds) = evaluate_stage(&classifier, &data, &stage.test_indices, opts.threads)?;
        metrics.stage = t;
        metrics.params = (0..=t).map(|i| pool.task_param_count(i)).sum();
        stages.push(metrics);
        predictions.push(preds);
        snapshots.push(snapshot(&pool, t));

        if let Some(sink) = opts.checkpoint.as_mut() {
            sink(t, &pool.to_checkpoint_bytes())?;
        }
    }

    let average = stages.iter().map(|s| s.accuracy).sum::<f64>() / stages.len() as f64;
    let report = RunReport {
        average,
        params_trainable: pool.total_param_count(),
        stages,
        config: config.clone(),
        seed,
        ablation: config.ablation,
        loss_traces: traces,
    };
    Ok(RunOutcome { report, plan, audit: outcome_audit, predictions, frozen_snapshots: snapshots })
}

fn snapshot<T: Real>(pool: &CalibrationPool<T>, through: usize) -> BTreeMap<ClassId, Vec<u64>> {
    pool.records()
        .filter(|r| r.task_index() <= through)
        .filter_map(|r| r.frozen_calibrated().map(|p| (r.class_id(), p.iter().map(|x| x.f64().to_bits()).collect())))
        .collect()
}

/// Classifier over the prototypes of tasks `0..=through`, following the
/// ablation switches.
pub fn build_classifier<T: Real>(
    pool: &CalibrationPool<T>,
    config: &RunConfig,
    through: usize,
) -> Result<Classifier<T>> {
    let class_ids: Vec<ClassId> = pool.records().filter(|r| r.task_index() <= through).map(|r| r.class_id()).collect();
    let rows = class_ids.iter().map(|&c| pool.calibrated_prototype(c)).collect::<Result<Vec<_>>>()?;
    let k = Matrix::from_rows(&rows)?;
    if config.ablation.nep {
        Ok(Classifier::Nep(NepModel::new(k, class_ids, T::lit(config.nep.lambda_reg), T::lit(config.nep.epsilon))?))
    } else {
        Ok(Classifier::Metric { prototypes: k, class_ids, metric: config.fallback_metric })
    }
}

/// Accuracy of `classifier` over the given test rows. Rows are split into
/// contiguous chunks across `threads` workers; results are identical for any
/// thread count.
pub fn evaluate_stage<T: Real>(
    classifier: &Classifier<T>,
    dataset: &EmbeddingDataset,
    test_rows: &[usize],
    threads: usize,
) -> Result<(StageMetrics, Vec<ClassId>)> {
    if test_rows.is_empty() {
        return Err(EptError::Protocol("stage has no test samples".into()));
    }
    let known = match classifier {
        Classifier::Nep(m) => m.class_ids(),
        Classifier::Metric { class_ids, .. } => class_ids.as_slice(),
    };
    if let Some(&r) = test_rows.iter().find(|&&r| known.binary_search(&dataset.label(r)).is_err()) {
        return Err(EptError::Protocol(format!("test row {r} has unseen class {}", dataset.label(r))));
    }

    let workers = threads.max(1).min(test_rows.len());
    let chunk = test_rows.len().div_ceil(workers);
    let preds: Vec<ClassId> = if workers == 1 {
        predict_rows(classifier, dataset, test_rows)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> =
                test_rows.chunks(chunk).map(|rows| s.spawn(move || predict_rows(classifier, dataset, rows))).collect();
            let mut out = Vec::with_capacity(test_rows.len());
            for h in handles {
                out.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, EptError>(out)
        })?
    };

    let mut per_class: BTreeMap<u32, ClassAccuracy> = BTreeMap::new();
    let mut correct = 0;
    for (&r, &p) in test_rows.iter().zip(&preds) {
        let y = dataset.label(r);
        let e = per_class.entry(y.0).or_insert(ClassAccuracy { correct: 0, total: 0, accuracy: 0.0 });
        e.total += 1;
        if p == y {
            e.correct += 1;
            correct += 1;
        }
    }
    for e in per_class.values_mut() {
        e.accuracy = e.correct as f64 / e.total as f64;
    }
    let metrics = StageMetrics {
        stage: 0,
        accuracy: correct as f64 / test_rows.len() as f64,
        num_test_samples: test_rows.len(),
        params: 0,
        per_class,
    };
    Ok((metrics, preds))
}

fn predict_rows<T: Real>(
    classifier: &Classifier<T>,
    dataset: &EmbeddingDataset,
    rows: &[usize],
) -> Result<Vec<ClassId>> {
    match classifier {
        Classifier::Nep(model) => {
            let d = dataset.dim();
            let mut q = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                q.extend(dataset.row(r).iter().map(|&v| T::lit(v as f64)));
            }
            model.classify_batch(&Matrix::from_vec(rows.len(), d, q)?)
        }
        other => rows
            .iter()
            .map(|&r| {
                let f: Vec<T> = dataset.row(r).iter().map(|&v| T::lit(v as f64)).collect();
                other.predict(&f)
            })
            .collect(),
    }
}

/// One cell of the classifier × offsets grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub offsets: bool,
    pub last_accuracy: f64,
    pub average_accuracy: f64,
    pub params_trainable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, metric: &str, offsets: bool) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric && r.offsets == offsets)
    }

    /// Gain in last-stage and average accuracy from turning offsets on, per metric.
    pub fn deltas(&self) -> Vec<(String, f64, f64)> {
        let mut out = Vec::new();
        for on in self.rows.iter().filter(|r| r.offsets) {
            if let Some(off) = self.row(&on.metric, false) {
                out.push((
                    on.metric.clone(),
                    on.last_accuracy - off.last_accuracy,
                    on.average_accuracy - off.average_accuracy,
                ));
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,offsets,last_acc,avg_acc,params\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                r.metric,
                if r.offsets { "on" } else { "off" },
                r.last_accuracy,
                r.average_accuracy,
                r.params_trainable
            ));
        }
        out
    }
}

/// Runs NEP and each distance metric with calibration offsets on and off.
pub fn compare_baselines(dataset: &EmbeddingDataset, config: &RunConfig, threads: usize) -> Result<ComparisonReport> {
    let methods: Vec<Option<Metric>> = std::iter::once(None).chain(Metric::ALL.iter().copied().map(Some)).collect();
    let mut rows = Vec::new();
    for method in methods {
        for offsets in [true, false] {
            let mut cfg = config.clone();
            cfg.ablation = Ablation { nep: method.is_none(), cs: offsets, ta: offsets };
            if let Some(m) = method {
                cfg.fallback_metric = m;
            }
            let report = run_protocol_with(dataset, &cfg, &mut RunOptions { threads, ..RunOptions::default() })?.report;
            rows.push(ComparisonRow {
                metric: method.map_or("nep", Metric::name).to_string(),
                offsets,
                last_accuracy: report.last_accuracy(),
                average_accuracy: report.average,
                params_trainable: report.params_trainable,
            });
        }
    }
    Ok(ComparisonReport { rows })
}
