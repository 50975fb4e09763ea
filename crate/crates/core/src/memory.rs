//! Fixed-capacity FIFO banks of key embeddings, one global and one local
//! queue per stage. Snapshots of the contents supply the negatives in the
//! contrastive denominators.

use crate::error::{DetcoError, Result};
use crate::rng::stream;
use ndarray::{Array2, ArrayView2};
use rand::Rng;

/// Row norms are validated on enqueue to this tolerance.
pub const ENQUEUE_NORM_TOL: f64 = 1e-4;

/// Ring buffer of `capacity` unit-norm rows with a moving write cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureQueue {
    storage: Array2<f64>,
    capacity: usize,
    dim: usize,
    ptr: usize,
    filled: usize,
}

impl FeatureQueue {
    /// An empty queue; [`Self::warm_start`] fills it before training.
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(DetcoError::Input(format!(
                "queue capacity and dim must be positive, got K={capacity}, d={dim}"
            )));
        }
        Ok(FeatureQueue {
            storage: Array2::zeros((capacity, dim)),
            capacity,
            dim,
            ptr: 0,
            filled: 0,
        })
    }

    /// Fill with random unit-norm rows so the denominator is well-defined
    /// from the very first step.
    pub fn warm_start(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        let mut rng = stream(seed, 0xBEEF);
        for mut row in q.storage.rows_mut() {
            loop {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                let n = row.dot(&row).sqrt();
                if n > 1e-3 {
                    row.mapv_inplace(|v| v / n);
                    break;
                }
            }
        }
        q.filled = capacity;
        Ok(q)
    }

    /// Rebuild from checkpointed parts.
    pub fn from_parts(storage: Array2<f64>, ptr: usize, filled: usize) -> Result<Self> {
        let (capacity, dim) = storage.dim();
        if capacity == 0 || dim == 0 || ptr >= capacity || filled > capacity {
            return Err(DetcoError::Checkpoint(format!(
                "inconsistent queue parts: K={capacity}, d={dim}, ptr={ptr}, filled={filled}"
            )));
        }
        Ok(FeatureQueue {
            storage,
            capacity,
            dim,
            ptr,
            filled,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ptr(&self) -> usize {
        self.ptr
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn storage(&self) -> ArrayView2<'_, f64> {
        self.storage.view()
    }

    /// Write `keys` at the cursor (wrapping), overwriting the oldest rows.
    pub fn enqueue(&mut self, keys: ArrayView2<'_, f64>) -> Result<()> {
        let (b, d) = keys.dim();
        if d != self.dim {
            return Err(DetcoError::Input(format!(
                "key dim {d} does not match queue dim {}",
                self.dim
            )));
        }
        if b > self.capacity {
            return Err(DetcoError::Input(format!(
                "cannot enqueue {b} rows into a queue of capacity {}",
                self.capacity
            )));
        }
        for (i, row) in keys.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > ENQUEUE_NORM_TOL {
                return Err(DetcoError::Validation(format!(
                    "enqueue row {i} has norm {n:.6}, expected 1 +- {ENQUEUE_NORM_TOL:e}"
                )));
            }
        }
        for row in keys.rows() {
            self.storage.row_mut(self.ptr).assign(&row);
            self.ptr = (self.ptr + 1) % self.capacity;
        }
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }

    /// Immutable snapshot of the current contents (`filled` rows). Row
    /// order is storage order; the losses are invariant to it.
    pub fn negatives(&self) -> Result<Array2<f64>> {
        if self.filled == 0 {
            return Err(DetcoError::State(
                "queue is empty; warm-start queues before reading negatives".into(),
            ));
        }
        Ok(self
            .storage
            .slice(ndarray::s![..self.filled, ..])
            .to_owned())
    }
}

/// The eight per-stage queues: `global[i]` serves the whole-image branches
/// of stage `i`, `local[i]` the patch-set branch.
#[derive(Debug, Clone, PartialEq)]
pub struct QueueBank {
    pub global: Vec<FeatureQueue>,
    pub local: Vec<FeatureQueue>,
}

impl QueueBank {
    pub fn warm_start(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut global = Vec::with_capacity(4);
        let mut local = Vec::with_capacity(4);
        for i in 0..4u64 {
            global.push(FeatureQueue::warm_start(capacity, dim, seed ^ (i + 1))?);
            local.push(FeatureQueue::warm_start(capacity, dim, seed ^ (i + 101))?);
        }
        Ok(QueueBank { global, local })
    }

    pub fn empty(capacity: usize, dim: usize) -> Result<Self> {
        let mut global = Vec::with_capacity(4);
        let mut local = Vec::with_capacity(4);
        for _ in 0..4 {
            global.push(FeatureQueue::new(capacity, dim)?);
            local.push(FeatureQueue::new(capacity, dim)?);
        }
        Ok(QueueBank { global, local })
    }

    pub fn push_keys(
        &mut self,
        global_keys: &[Array2<f64>; 4],
        local_keys: Option<&[Array2<f64>; 4]>,
    ) -> Result<()> {
        for (q, k) in self.global.iter_mut().zip(global_keys) {
            q.enqueue(k.view())?;
        }
        if let Some(keys) = local_keys {
            for (q, k) in self.local.iter_mut().zip(keys) {
                q.enqueue(k.view())?;
            }
        }
        Ok(())
    }
}
