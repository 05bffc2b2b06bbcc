//! A fixed set of backend sessions shared by evaluation threads.

use std::sync::{Condvar, Mutex};

use super::external::{ExternalBackend, ExternalConfig};
use super::{BackendError, Detector, ReconstructHint, Reconstructor};
use crate::geometry::{Detection, PatchGrid};
use crate::raster::RasterImage;

/// Hands out one idle session per call, blocking while all are busy.
pub struct SessionPool<B = ExternalBackend> {
    members: Vec<B>,
    idle: Mutex<Vec<usize>>,
    freed: Condvar,
}

impl SessionPool<ExternalBackend> {
    /// `size` lazily started external sessions with the same configuration.
    pub fn external(config: &ExternalConfig, size: usize) -> Self {
        Self::new((0..size.max(1)).map(|_| ExternalBackend::new(config.clone())).collect())
    }
}

impl<B> SessionPool<B> {
    pub fn new(members: Vec<B>) -> Self {
        assert!(!members.is_empty(), "a pool needs at least one member");
        let idle = (0..members.len()).rev().collect();
        Self {
            members,
            idle: Mutex::new(idle),
            freed: Condvar::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn with<T>(&self, f: impl FnOnce(&B) -> T) -> T {
        let index = {
            let mut idle = self.idle.lock().unwrap_or_else(|p| p.into_inner());
            loop {
                if let Some(i) = idle.pop() {
                    break i;
                }
                idle = self.freed.wait(idle).unwrap_or_else(|p| p.into_inner());
            }
        };
        struct Release<'a, B>(&'a SessionPool<B>, usize);
        impl<B> Drop for Release<'_, B> {
            fn drop(&mut self) {
                self.0.idle.lock().unwrap_or_else(|p| p.into_inner()).push(self.1);
                self.0.freed.notify_one();
            }
        }
        let _release = Release(self, index);
        f(&self.members[index])
    }
}

impl<B: Detector> Detector for SessionPool<B> {
    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, BackendError> {
        self.with(|b| b.detect(image))
    }
}

impl<B: Reconstructor> Reconstructor for SessionPool<B> {
    fn reconstruct(
        &self,
        image: &RasterImage,
        grid: &PatchGrid,
        masked: &[usize],
        hint: Option<&ReconstructHint>,
    ) -> Result<RasterImage, BackendError> {
        self.with(|b| b.reconstruct(image, grid, masked, hint))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    struct Probe {
        busy: AtomicUsize,
    }

    #[test]
    fn members_are_used_exclusively() {
        let pool = SessionPool::new((0..3).map(|_| Probe { busy: AtomicUsize::new(0) }).collect());
        let peak = AtomicUsize::new(0);
        let active = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..5 {
                        pool.with(|p| {
                            assert_eq!(p.busy.fetch_add(1, Ordering::SeqCst), 0);
                            let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                            peak.fetch_max(now, Ordering::SeqCst);
                            std::thread::sleep(Duration::from_millis(2));
                            active.fetch_sub(1, Ordering::SeqCst);
                            p.busy.fetch_sub(1, Ordering::SeqCst);
                        });
                    }
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }
}
