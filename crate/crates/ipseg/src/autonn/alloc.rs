//! Engine-level accounting of tensor buffer bytes.
//!
//! Every buffer the engine materialises (node data, gradients, saved
//! batch-norm context, network parameters) lives in a [`TrackedVec`], so the
//! gauge's high-water mark is the peak of engine-owned tensor memory. The
//! counters are global atomics: allocation patterns are deterministic for a
//! fixed seed and config, which makes the peak a reproducible measurement
//! rather than an OS-dependent one.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn on_alloc(bytes: usize) {
    let now = CURRENT.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK.fetch_max(now, Ordering::Relaxed);
}

fn on_free(bytes: usize) {
    CURRENT.fetch_sub(bytes, Ordering::Relaxed);
}

/// Bytes currently held in live tracked buffers.
pub fn current_bytes() -> usize {
    CURRENT.load(Ordering::Relaxed)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.load(Ordering::Relaxed)
}

/// Rebases the high-water mark to the currently live bytes.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// A `Vec` whose byte footprint is reported to the global gauge.
#[derive(Debug)]
pub struct TrackedVec<E> {
    buf: Vec<E>,
    bytes: usize,
}

impl<E> TrackedVec<E> {
    pub fn from_vec(buf: Vec<E>) -> Self {
        let bytes = buf.len() * std::mem::size_of::<E>();
        on_alloc(bytes);
        Self { buf, bytes }
    }

    pub fn into_vec(mut self) -> Vec<E> {
        std::mem::take(&mut self.buf)
        // Drop still subtracts `self.bytes`; the ownership transfer is the
        // point where the engine stops accounting for the buffer.
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

impl<E: Copy + Default> TrackedVec<E> {
    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![E::default(); len])
    }
}

impl<E: Copy> Clone for TrackedVec<E> {
    fn clone(&self) -> Self {
        Self::from_vec(self.buf.clone())
    }
}

impl<E> Drop for TrackedVec<E> {
    fn drop(&mut self) {
        on_free(self.bytes);
    }
}

impl<E> Deref for TrackedVec<E> {
    type Target = [E];
    fn deref(&self) -> &[E] {
        &self.buf
    }
}

impl<E> DerefMut for TrackedVec<E> {
    fn deref_mut(&mut self) -> &mut [E] {
        &mut self.buf
    }
}
