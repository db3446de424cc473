//! Allocation accounting for the implicit (tensor-free) kernels.
//!
//! Every scratch matrix allocated by an implicit path goes through
//! [`scratch`]. The size of each allocation is recorded in a thread-local
//! high-water mark, and debug builds assert that no single allocation exceeds
//! the ceiling installed with [`Ceiling::install`]. Tests install a ceiling of
//! `O(np + pr)` and check that nothing of size `n^d` ever appears.

use nalgebra::DMatrix;
use std::cell::Cell;

thread_local! {
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static CEILING: Cell<usize> = const { Cell::new(usize::MAX) };
}

/// Allocate a zeroed scratch matrix, recording its size.
pub fn scratch(rows: usize, cols: usize) -> DMatrix<f64> {
    record(rows * cols);
    DMatrix::zeros(rows, cols)
}

/// Record an allocation of `elements` scalars made by an implicit kernel.
pub fn record(elements: usize) {
    PEAK.with(|p| p.set(p.get().max(elements)));
    debug_assert!(
        elements <= CEILING.with(Cell::get),
        "implicit kernel allocated {elements} scalars, above the installed ceiling of {}",
        CEILING.with(Cell::get)
    );
}

/// Largest single allocation recorded on this thread since the last reset.
pub fn peak() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak() {
    PEAK.with(|p| p.set(0));
}

/// RAII guard for an allocation ceiling; the previous ceiling is restored on drop.
pub struct Ceiling {
    previous: usize,
}

impl Ceiling {
    pub fn install(limit: usize) -> Self {
        let previous = CEILING.with(|c| c.replace(limit));
        Self { previous }
    }
}

impl Drop for Ceiling {
    fn drop(&mut self) {
        CEILING.with(|c| c.set(self.previous));
    }
}
