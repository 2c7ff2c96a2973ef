//! Binary pool checkpoint (little-endian, no padding), written after each stage
//! so a run can resume from the last completed stage.
//!
//! ```text
//! header:
//!   [u8; 4]  magic "EPTP"
//!   u32      version = 1
//!   u32      scalar width in bytes (4 = f32, 8 = f64); "S" below
//!   u32      d_f, u32 d_t, u32 d_h
//!   f64      alpha
//!   u32      flags: bit0 shared projector per task, bit1 class offsets on, bit2 task offsets on
//!   u32      number of tasks
//! per task:
//!   u32      frozen (0 or 1)
//!   u32      number of classes n, then n × u32 class ids
//!   S[d_t]   task offset
//!   u32      number of projectors, then per projector:
//!            S[d_h*d_t] W1, S[d_h] b1, S[d_f*d_h] W2, S[d_f] b2
//! u32        number of class records, then per record:
//!   u32      class id, u32 task index, u32 projector index
//!   S[d_f]   raw prototype, S[d_f] class offset
//!   u32      has frozen copy (0 or 1), then S[d_f] frozen calibrated prototype if 1
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{CalibrationPool, ClassProjector, ClassRecord, Components, ProjectorSharing, TaskEntry};
use crate::embedding_store::ClassId;
use crate::error::{EptError, Result};
use crate::real::Real;

pub const POOL_MAGIC: [u8; 4] = *b"EPTP";
pub const POOL_VERSION: u32 = 1;

struct Writer<T> {
    out: Vec<u8>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real> Writer<T> {
    fn u32(&mut self, v: usize) {
        self.out.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn reals(&mut self, v: &[T]) {
        for &x in v {
            x.write_le(&mut self.out);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    width: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            EptError::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated pool checkpoint"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn reals<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let w = self.width;
        let raw = self.take(n.checked_mul(w).ok_or_else(|| EptError::Format("checkpoint size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| if w == 4 { T::lit(f32::read_le(c) as f64) } else { T::lit(f64::read_le(c)) })
            .collect())
    }
}

impl<T: Real> CalibrationPool<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = Writer::<T> { out: Vec::new(), _t: std::marker::PhantomData };
        w.out.extend_from_slice(&POOL_MAGIC);
        w.u32(POOL_VERSION as usize);
        w.u32(T::BYTES);
        w.u32(self.d_f);
        w.u32(self.d_t);
        w.u32(self.d_h);
        w.out.extend_from_slice(&self.alpha.to_le_bytes());
        let flags = u32::from(self.sharing == ProjectorSharing::PerTask)
            | u32::from(self.components.class_offsets) << 1
            | u32::from(self.components.task_offsets) << 2;
        w.u32(flags as usize);
        w.u32(self.tasks.len());
        for t in &self.tasks {
            w.u32(usize::from(t.frozen));
            w.u32(t.class_ids.len());
            for c in &t.class_ids {
                w.u32(c.0 as usize);
            }
            w.reals(&t.task_offset);
            w.u32(t.projectors.len());
            for p in &t.projectors {
                for tensor in p.tensors() {
                    w.reals(tensor);
                }
            }
        }
        w.u32(self.records.len());
        for r in self.records.values() {
            w.u32(r.class_id.0 as usize);
            w.u32(r.task_index);
            w.u32(r.projector_index);
            w.reals(&r.raw);
            w.reals(&r.class_offset);
            match &r.frozen_calibrated {
                Some(f) => {
                    w.u32(1);
                    w.reals(f);
                }
                None => w.u32(0),
            }
        }
        w.out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && bytes[..4] != POOL_MAGIC {
            return Err(EptError::Format("bad pool checkpoint magic".into()));
        }
        let mut r = Reader { bytes, pos: 0, width: 4 };
        r.take(4)?;
        let version = r.u32()?;
        if version != POOL_VERSION as usize {
            return Err(EptError::Format(format!("unsupported pool checkpoint version {version}")));
        }
        let width = r.u32()?;
        if width != 4 && width != 8 {
            return Err(EptError::Format(format!("unsupported scalar width {width}")));
        }
        r.width = width;
        let (d_f, d_t, d_h) = (r.u32()?, r.u32()?, r.u32()?);
        let alpha = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let flags = r.u32()?;
        if flags > 0b111 {
            return Err(EptError::Format(format!("unknown checkpoint flags {flags:#x}")));
        }
        let sharing = if flags & 1 == 1 { ProjectorSharing::PerTask } else { ProjectorSharing::PerClass };
        let components = Components { class_offsets: flags & 2 != 0, task_offsets: flags & 4 != 0 };

        let n_tasks = r.u32()?;
        let mut tasks = Vec::new();
        for _ in 0..n_tasks {
            let frozen = match r.u32()? {
                0 => false,
                1 => true,
                v => return Err(EptError::Format(format!("bad frozen flag {v}"))),
            };
            let n = r.u32()?;
            let class_ids = (0..n).map(|_| r.u32().map(|c| ClassId(c as u32))).collect::<Result<Vec<_>>>()?;
            let task_offset = r.reals(d_t)?;
            let n_proj = r.u32()?;
            let mut projectors = Vec::new();
            for _ in 0..n_proj {
                let w1 = r.reals(d_h * d_t)?;
                let b1 = r.reals(d_h)?;
                let w2 = r.reals(d_f * d_h)?;
                let b2 = r.reals(d_f)?;
                projectors.push(ClassProjector::from_parts(d_t, d_h, d_f, w1, b1, w2, b2)?);
            }
            tasks.push(TaskEntry { task_offset, projectors, class_ids, frozen });
        }

        let n_records = r.u32()?;
        let mut records = BTreeMap::new();
        for _ in 0..n_records {
            let class_id = ClassId(r.u32()? as u32);
            let task_index = r.u32()?;
            let projector_index = r.u32()?;
            let raw = r.reals(d_f)?;
            let class_offset = r.reals(d_f)?;
            let frozen_calibrated = match r.u32()? {
                0 => None,
                1 => Some(r.reals(d_f)?),
                v => return Err(EptError::Format(format!("bad frozen-copy flag {v}"))),
            };
            let rec = ClassRecord { class_id, raw, class_offset, task_index, projector_index, frozen_calibrated };
            if records.insert(class_id, rec).is_some() {
                return Err(EptError::Format(format!("class {class_id} recorded twice")));
            }
        }
        if r.pos != bytes.len() {
            return Err(EptError::Format(format!("{} trailing bytes in pool checkpoint", bytes.len() - r.pos)));
        }

        for rec in records.values() {
            let task = tasks.get(rec.task_index).ok_or_else(|| {
                EptError::Format(format!("class {} points at missing task {}", rec.class_id, rec.task_index))
            })?;
            if !task.class_ids.contains(&rec.class_id) || rec.projector_index >= task.projectors.len() {
                return Err(EptError::Format(format!("class {} is inconsistent with its task", rec.class_id)));
            }
            if task.frozen != rec.frozen_calibrated.is_some() {
                return Err(EptError::Format(format!("class {} frozen state disagrees with its task", rec.class_id)));
            }
        }
        if tasks.iter().map(|t| t.class_ids.len()).sum::<usize>() != records.len() {
            return Err(EptError::Format("task class lists do not match class records".into()));
        }
        Ok(Self { records, tasks, d_f, d_t, d_h, alpha, sharing, components })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototype::PoolSettings;

    fn pool() -> CalibrationPool<f64> {
        let settings = PoolSettings { d_t: Some(2), d_h: 3, ..PoolSettings::default() };
        let mut pool = CalibrationPool::new(4, &settings, Components::default()).unwrap();
        let s0: BTreeMap<ClassId, Vec<Vec<f64>>> =
            [(ClassId(0), vec![vec![1.0, 2.0, 3.0, 4.0]]), (ClassId(1), vec![vec![0.0, 1.0, 0.0, 1.0]])].into();
        pool.open_task(&s0, 3).unwrap();
        pool.tasks[0].task_offset = vec![0.5, -0.25];
        pool.freeze_stage(0).unwrap();
        let s1: BTreeMap<ClassId, Vec<Vec<f64>>> = [(ClassId(2), vec![vec![2.0, 2.0, 2.0, 2.0]])].into();
        pool.open_task(&s1, 3).unwrap();
        pool
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = pool();
        let bytes = p.to_checkpoint_bytes();
        let back = CalibrationPool::<f64>::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let bytes = pool().to_checkpoint_bytes();
        assert!(matches!(CalibrationPool::<f64>::from_checkpoint_bytes(b"EPTBxxxx"), Err(EptError::Format(_))));
        assert!(matches!(
            CalibrationPool::<f64>::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(EptError::Io(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(CalibrationPool::<f64>::from_checkpoint_bytes(&extra), Err(EptError::Format(_))));
    }

    #[test]
    fn checkpoint_widens_f32() {
        let p32: CalibrationPool<f32> = pool().cast();
        let back = CalibrationPool::<f64>::from_checkpoint_bytes(&p32.to_checkpoint_bytes()).unwrap();
        assert_eq!(back.cast::<f32>(), p32);
    }
}
