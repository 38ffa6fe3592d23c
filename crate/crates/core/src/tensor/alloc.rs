//! Byte accounting for live tensor buffers.
//!
//! Every data and gradient buffer owned by a tensor goes through [`Buffer`],
//! which reports its size here on creation and on drop. Counters are
//! thread-local, so a measured region only sees allocations made by its own
//! thread.

use std::cell::Cell;
use std::ops::{Deref, DerefMut};

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    pub current_bytes: usize,
    pub peak_bytes: usize,
}

pub fn alloc_stats() -> AllocStats {
    AllocStats {
        current_bytes: CURRENT.with(Cell::get),
        peak_bytes: PEAK.with(Cell::get),
    }
}

/// Starts a new measured region: the high-water mark drops to the bytes
/// currently live.
pub fn reset_alloc_peak() {
    let cur = CURRENT.with(Cell::get);
    PEAK.with(|p| p.set(cur));
}

fn track_alloc(bytes: usize) {
    let cur = CURRENT.with(|c| {
        let v = c.get() + bytes;
        c.set(v);
        v
    });
    PEAK.with(|p| {
        if cur > p.get() {
            p.set(cur)
        }
    });
}

fn track_free(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// A `Vec` whose length in bytes is counted by [`alloc_stats`].
#[derive(Debug)]
pub(crate) struct Buffer<T> {
    data: Vec<T>,
}

impl<T> Buffer<T> {
    pub(crate) fn new(data: Vec<T>) -> Self {
        track_alloc(std::mem::size_of_val(data.as_slice()));
        Buffer { data }
    }
}

impl<T: Clone> Clone for Buffer<T> {
    fn clone(&self) -> Self {
        Buffer::new(self.data.clone())
    }
}

impl<T> Drop for Buffer<T> {
    fn drop(&mut self) {
        track_free(std::mem::size_of_val(self.data.as_slice()));
    }
}

impl<T> Deref for Buffer<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Buffer<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}
