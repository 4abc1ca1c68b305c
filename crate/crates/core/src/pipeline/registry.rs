//! Snapshot exchange between the trainer and generation workers with a
//! bounded-staleness contract enforced on the reader side.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learner::VersionedParams;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("snapshot publisher has shut down")]
    Shutdown,
    #[error("published version {got} does not follow {latest}")]
    NonMonotonic { latest: u64, got: u64 },
}

/// `(latest published, version used)` at one acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagSample {
    pub latest: u64,
    pub used: u64,
}

impl LagSample {
    pub fn lag(&self) -> u64 {
        self.latest - self.used
    }
}

struct State<T> {
    latest: Arc<VersionedParams<T>>,
    closed: bool,
    trace: Vec<LagSample>,
}

pub struct SnapshotRegistry<T> {
    state: Mutex<State<T>>,
    changed: Condvar,
}

impl<T> SnapshotRegistry<T> {
    pub fn new(initial: VersionedParams<T>) -> Self {
        Self { state: Mutex::new(State { latest: Arc::new(initial), closed: false, trace: Vec::new() }), changed: Condvar::new() }
    }

    fn lock(&self) -> MutexGuard<'_, State<T>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Makes `snapshot` the newest version. Versions must strictly increase.
    pub fn publish(&self, snapshot: VersionedParams<T>) -> Result<(), RegistryError> {
        let mut s = self.lock();
        if s.closed {
            return Err(RegistryError::Shutdown);
        }
        if snapshot.version <= s.latest.version {
            return Err(RegistryError::NonMonotonic { latest: s.latest.version, got: snapshot.version });
        }
        s.latest = Arc::new(snapshot);
        self.changed.notify_all();
        Ok(())
    }

    /// Keeps `held` while it is at most `lag_bound` versions behind the newest
    /// snapshot, otherwise refreshes to the newest. The observed lag is
    /// recorded under the same lock.
    pub fn acquire(&self, held: Option<&Arc<VersionedParams<T>>>, lag_bound: u64) -> (Arc<VersionedParams<T>>, LagSample) {
        let mut s = self.lock();
        let latest = s.latest.version;
        let chosen = match held {
            Some(h) if h.version + lag_bound >= latest => h.clone(),
            _ => s.latest.clone(),
        };
        let sample = LagSample { latest, used: chosen.version };
        s.trace.push(sample);
        (chosen, sample)
    }

    pub fn latest(&self) -> Arc<VersionedParams<T>> {
        self.lock().latest.clone()
    }

    /// Blocks until a snapshot with at least `version` exists.
    pub fn wait_for_version(&self, version: u64) -> Result<Arc<VersionedParams<T>>, RegistryError> {
        let mut s = self.lock();
        loop {
            if s.latest.version >= version {
                return Ok(s.latest.clone());
            }
            if s.closed {
                return Err(RegistryError::Shutdown);
            }
            s = self.changed.wait(s).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Stops publication and wakes every waiting reader.
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }

    pub fn trace(&self) -> Vec<LagSample> {
        self.lock().trace.clone()
    }

    pub fn max_lag(&self) -> u64 {
        self.lock().trace.iter().map(LagSample::lag).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn snap(v: u64) -> VersionedParams<f64> {
        VersionedParams::new(v, crate::learner::ParameterSet::new())
    }

    #[test]
    fn zero_lag_always_refreshes() {
        let r = SnapshotRegistry::new(snap(0));
        let mut held = r.acquire(None, 0).0;
        for v in 1..5 {
            r.publish(snap(v)).unwrap();
            held = r.acquire(Some(&held), 0).0;
            assert_eq!(held.version, v);
        }
        assert_eq!(r.max_lag(), 0);
    }

    #[test]
    fn refresh_rule_at_bound() {
        let r = SnapshotRegistry::new(snap(0));
        for v in 1..=7 {
            r.publish(snap(v)).unwrap();
        }
        let five = Arc::new(snap(5));
        assert_eq!(r.acquire(Some(&five), 2).0.version, 5);
        let four = Arc::new(snap(4));
        assert_eq!(r.acquire(Some(&four), 2).0.version, 7);
        assert_eq!(r.trace(), vec![LagSample { latest: 7, used: 5 }, LagSample { latest: 7, used: 7 }]);
    }

    #[test]
    fn publish_must_increase() {
        let r = SnapshotRegistry::new(snap(3));
        assert_eq!(r.publish(snap(3)), Err(RegistryError::NonMonotonic { latest: 3, got: 3 }));
        r.close();
        assert_eq!(r.publish(snap(4)), Err(RegistryError::Shutdown));
    }

    #[test]
    fn waiting_reader_sees_shutdown() {
        let r = Arc::new(SnapshotRegistry::new(snap(0)));
        let reader = {
            let r = r.clone();
            thread::spawn(move || r.wait_for_version(10).map(|s| s.version))
        };
        r.publish(snap(1)).unwrap();
        r.close();
        assert_eq!(reader.join().unwrap(), Err(RegistryError::Shutdown));
    }

    #[test]
    fn waiting_reader_wakes_on_publish() {
        let r = Arc::new(SnapshotRegistry::new(snap(0)));
        let reader = {
            let r = r.clone();
            thread::spawn(move || r.wait_for_version(2).map(|s| s.version))
        };
        r.publish(snap(1)).unwrap();
        r.publish(snap(2)).unwrap();
        assert_eq!(reader.join().unwrap(), Ok(2));
    }
}
