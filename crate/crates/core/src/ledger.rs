//! Live/peak byte accounting, split by buffer category.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Category, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LedgerEvent {
    Alloc {
        id: Option<TensorId>,
        category: Category,
        bytes: usize,
    },
    Release {
        id: Option<TensorId>,
        category: Category,
        bytes: usize,
    },
    /// The post-process that closes a forward-mode chain at `end` has finished.
    PostProcessDone { end: TensorId },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FootprintLedger {
    live_bytes: BTreeMap<Category, usize>,
    peak_bytes: BTreeMap<Category, usize>,
    live_count: BTreeMap<Category, usize>,
    live_total: usize,
    peak_total: usize,
    events: Option<Vec<LedgerEvent>>,
}

/// Serializable point-in-time view of the ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub live_bytes: BTreeMap<Category, usize>,
    pub peak_bytes: BTreeMap<Category, usize>,
    pub live_count: BTreeMap<Category, usize>,
    pub live_total: usize,
    pub peak_total: usize,
}

impl FootprintLedger {
    pub fn new(log_events: bool) -> Self {
        FootprintLedger {
            events: log_events.then(Vec::new),
            ..Default::default()
        }
    }

    pub fn alloc(&mut self, id: Option<TensorId>, category: Category, bytes: usize) {
        let live = self.live_bytes.entry(category).or_default();
        *live += bytes;
        let live = *live;
        let peak = self.peak_bytes.entry(category).or_default();
        *peak = (*peak).max(live);
        *self.live_count.entry(category).or_default() += 1;
        self.live_total += bytes;
        self.peak_total = self.peak_total.max(self.live_total);
        if let Some(ev) = &mut self.events {
            ev.push(LedgerEvent::Alloc {
                id,
                category,
                bytes,
            });
        }
    }

    pub fn release(&mut self, id: Option<TensorId>, category: Category, bytes: usize) {
        let live = self.live_bytes.entry(category).or_default();
        assert!(*live >= bytes, "ledger underflow in {category:?}");
        *live -= bytes;
        *self.live_count.entry(category).or_default() -= 1;
        self.live_total -= bytes;
        if let Some(ev) = &mut self.events {
            ev.push(LedgerEvent::Release {
                id,
                category,
                bytes,
            });
        }
    }

    pub fn mark(&mut self, event: LedgerEvent) {
        if let Some(ev) = &mut self.events {
            ev.push(event);
        }
    }

    pub fn live(&self, category: Category) -> usize {
        self.live_bytes.get(&category).copied().unwrap_or(0)
    }

    pub fn peak(&self, category: Category) -> usize {
        self.peak_bytes.get(&category).copied().unwrap_or(0)
    }

    pub fn count(&self, category: Category) -> usize {
        self.live_count.get(&category).copied().unwrap_or(0)
    }

    pub fn live_total(&self) -> usize {
        self.live_total
    }

    /// High-water mark of all categories together.
    pub fn peak_total(&self) -> usize {
        self.peak_total
    }

    pub fn events(&self) -> &[LedgerEvent] {
        self.events.as_deref().unwrap_or(&[])
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            live_bytes: self.live_bytes.clone(),
            peak_bytes: self.peak_bytes.clone(),
            live_count: self.live_count.clone(),
            live_total: self.live_total,
            peak_total: self.peak_total,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water() {
        let mut l = FootprintLedger::new(true);
        for i in 0..3 {
            l.alloc(Some(TensorId(i)), Category::Intermediate, 64);
        }
        for i in 0..3 {
            l.release(Some(TensorId(i)), Category::Intermediate, 64);
        }
        assert_eq!(l.peak(Category::Intermediate), 192);
        assert_eq!(l.live(Category::Intermediate), 0);
        assert_eq!(l.events().len(), 6);
    }

    #[test]
    fn events_off_by_default() {
        let mut l = FootprintLedger::new(false);
        l.alloc(None, Category::Gradient, 8);
        assert!(l.events().is_empty());
        assert_eq!(l.count(Category::Gradient), 1);
    }
}
