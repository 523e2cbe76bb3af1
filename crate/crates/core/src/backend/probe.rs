//! Instrumenting wrappers used for audits, tests and benchmarks.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{ChatBackend, ChatRequest};
use crate::error::BackendError;

/// Keeps a copy of every request passed through to the inner backend.
pub struct RecordingBackend {
    inner: Arc<dyn ChatBackend>,
    log: Mutex<Vec<ChatRequest>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn ChatBackend>) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log lock poisoned").clone()
    }
}

impl ChatBackend for RecordingBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.log.lock().expect("log lock poisoned").push(request.clone());
        self.inner.complete(request)
    }

    fn default_temperature(&self) -> f64 {
        self.inner.default_temperature()
    }

    fn describe(&self) -> String {
        format!("recording({})", self.inner.describe())
    }
}

/// Tracks how many calls are inside the inner backend at once, optionally
/// holding each call for `latency` to simulate a remote model.
pub struct ConcurrencyProbe {
    inner: Arc<dyn ChatBackend>,
    latency: Duration,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    calls: AtomicUsize,
}

impl ConcurrencyProbe {
    pub fn new(inner: Arc<dyn ChatBackend>, latency: Duration) -> Self {
        Self {
            inner,
            latency,
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ConcurrencyProbe {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let out = self.inner.complete(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn default_temperature(&self) -> f64 {
        self.inner.default_temperature()
    }

    fn describe(&self) -> String {
        format!("probe({})", self.inner.describe())
    }
}
