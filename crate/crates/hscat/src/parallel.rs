//! Rayon-backed batch executor for training and evaluation.

use hscat_core::tensois::{BatchExec, ItemOut, TensoisError};
use rayon::prelude::*;

use crate::error::{HscatError, Result};

/// Runs batch items on a dedicated thread pool. Results come back in item
/// order, so aggregation is bit-identical to the sequential executor.
pub struct RayonExec {
    pool: rayon::ThreadPool,
}

impl RayonExec {
    /// `threads = None` sizes the pool to the available parallelism.
    pub fn new(threads: Option<usize>) -> Result<Self> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = threads {
            if t == 0 {
                return Err(HscatError::validation("--threads must be at least 1"));
            }
            b = b.num_threads(t);
        }
        let pool = b
            .build()
            .map_err(|e| HscatError::validation(format!("thread pool: {e}")))?;
        Ok(RayonExec { pool })
    }
}

impl BatchExec for RayonExec {
    fn run(
        &self,
        n: usize,
        job: &(dyn Fn(usize) -> std::result::Result<ItemOut, TensoisError> + Sync),
    ) -> Vec<std::result::Result<ItemOut, TensoisError>> {
        self.pool
            .install(|| (0..n).into_par_iter().map(job).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hscat_core::tensois::SeqExec;

    #[test]
    fn matches_sequential_order_and_values() {
        let job = |i: usize| {
            Ok(ItemOut {
                flat_grad: vec![i as f64, i as f64 * 0.5],
                objective: i as f64,
                l_vol: 1.0 / (i + 1) as f64,
            })
        };
        let seq = SeqExec.run(8, &job);
        let par = RayonExec::new(Some(3)).unwrap().run(8, &job);
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(par.iter()) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a.flat_grad, b.flat_grad);
            assert_eq!(a.objective, b.objective);
            assert_eq!(a.l_vol, b.l_vol);
        }
    }
}
