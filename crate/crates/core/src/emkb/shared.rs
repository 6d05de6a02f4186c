use std::sync::{Arc, RwLock};

use super::KnowledgeBase;

/// Shared handle with snapshot reads and copy-on-write updates.
///
/// Readers take an immutable `Arc<KnowledgeBase>` snapshot that stays valid
/// for as long as they hold it; writers are serialized and publish a new
/// snapshot atomically.
#[derive(Debug, Clone)]
pub struct SharedKb {
    inner: Arc<RwLock<Arc<KnowledgeBase>>>,
}

impl SharedKb {
    pub fn new(kb: KnowledgeBase) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(kb))),
        }
    }

    pub fn snapshot(&self) -> Arc<KnowledgeBase> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Applies `f` to a private copy and publishes it only if `f` succeeds.
    pub fn update<T, E>(&self, f: impl FnOnce(&mut KnowledgeBase) -> Result<T, E>) -> Result<T, E> {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        let mut next = KnowledgeBase::clone(&guard);
        let out = f(&mut next)?;
        *guard = Arc::new(next);
        Ok(out)
    }

    /// Swaps in a whole new store (hot reload).
    pub fn replace(&self, kb: KnowledgeBase) -> Arc<KnowledgeBase> {
        let mut guard = self.inner.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *guard, Arc::new(kb))
    }
}
