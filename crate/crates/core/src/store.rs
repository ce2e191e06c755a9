//! Holder-counted tensor storage.
//!
//! A tensor stays live while its user handle is held or while anything inside
//! the engine holds it (a saved-tensor slot on a tape node, or a link from
//! another tensor's forward-mode sidecar). When both drop to zero the tensor
//! is released, and so is everything it linked, recursively.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ledger::FootprintLedger;
use crate::tensor::{Category, Dense, Shape, Tensor, TensorId};

/// Element width used for byte accounting and value rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Debug)]
struct Slot {
    tensor: Tensor,
    user_held: bool,
    holders: u32,
    links: Vec<TensorId>,
}

#[derive(Debug)]
pub struct TensorStore {
    next_id: u64,
    slots: BTreeMap<TensorId, Slot>,
    ledger: FootprintLedger,
    precision: Precision,
}

pub enum Fill {
    Scalar(f64),
    Values(Vec<f64>),
}

impl TensorStore {
    pub fn new(precision: Precision, log_events: bool) -> Self {
        TensorStore {
            next_id: 0,
            slots: BTreeMap::new(),
            ledger: FootprintLedger::new(log_events),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Allocate a user-held tensor.
    pub fn alloc(&mut self, shape: Shape, category: Category, fill: Fill) -> Result<Tensor> {
        let dense = match fill {
            Fill::Scalar(v) => Dense::filled(shape, v),
            Fill::Values(data) => Dense::new(shape, data)?,
        };
        self.insert(dense, category, true)
    }

    /// Register `dense` as a new tensor. Internal tensors (`user_held == false`)
    /// must be held right away or the next `collect` drops them.
    pub fn insert(
        &mut self,
        mut dense: Dense,
        category: Category,
        user_held: bool,
    ) -> Result<Tensor> {
        if self.precision == Precision::F32 {
            for v in &mut dense.data {
                *v = *v as f32 as f64;
            }
        }
        let id = TensorId(self.next_id);
        self.next_id += 1;
        let tensor = Tensor::new(id, dense.shape, dense.data, category)?;
        self.ledger
            .alloc(Some(id), category, tensor.numel() * self.precision.bytes());
        self.slots.insert(
            id,
            Slot {
                tensor: tensor.clone(),
                user_held,
                holders: 0,
                links: Vec::new(),
            },
        );
        Ok(tensor)
    }

    pub fn get(&self, id: TensorId) -> Result<&Tensor> {
        self.slots
            .get(&id)
            .map(|s| &s.tensor)
            .ok_or(Error::UnknownTensor(id))
    }

    pub fn is_live(&self, id: TensorId) -> bool {
        self.slots.contains_key(&id)
    }

    pub fn holders(&self, id: TensorId) -> Option<u32> {
        self.slots.get(&id).map(|s| s.holders)
    }

    pub fn user_held(&self, id: TensorId) -> bool {
        self.slots.get(&id).is_some_and(|s| s.user_held)
    }

    pub fn hold(&mut self, id: TensorId) -> Result<()> {
        let slot = self.slots.get_mut(&id).ok_or(Error::UnknownTensor(id))?;
        slot.holders += 1;
        Ok(())
    }

    /// Drop one internal holder; returns ids released as a consequence.
    pub fn unhold(&mut self, id: TensorId) -> Result<Vec<TensorId>> {
        let slot = self.slots.get_mut(&id).ok_or(Error::UnknownTensor(id))?;
        assert!(slot.holders > 0, "unhold of {id} with no holders");
        slot.holders -= 1;
        Ok(self.collect(id))
    }

    /// Drop the user's handle. Releasing twice is an error.
    pub fn release(&mut self, id: TensorId) -> Result<Vec<TensorId>> {
        match self.slots.get_mut(&id) {
            Some(slot) if slot.user_held => {
                slot.user_held = false;
                Ok(self.collect(id))
            }
            Some(_) => Err(Error::DoubleRelease(id)),
            None if id.0 < self.next_id => Err(Error::DoubleRelease(id)),
            None => Err(Error::UnknownTensor(id)),
        }
    }

    /// `owner` holds `target` until `owner` is released or unlinked.
    pub fn link(&mut self, owner: TensorId, target: TensorId) -> Result<()> {
        if !self.slots.contains_key(&owner) {
            return Err(Error::UnknownTensor(owner));
        }
        self.hold(target)?;
        self.slots
            .get_mut(&owner)
            .expect("checked")
            .links
            .push(target);
        Ok(())
    }

    pub fn links(&self, id: TensorId) -> &[TensorId] {
        self.slots
            .get(&id)
            .map(|s| s.links.as_slice())
            .unwrap_or(&[])
    }

    fn collect(&mut self, id: TensorId) -> Vec<TensorId> {
        let mut released = Vec::new();
        let mut work = vec![id];
        while let Some(id) = work.pop() {
            let dead = self
                .slots
                .get(&id)
                .is_some_and(|s| !s.user_held && s.holders == 0);
            if !dead {
                continue;
            }
            let slot = self.slots.remove(&id).expect("checked");
            self.ledger.release(
                Some(id),
                slot.tensor.category(),
                slot.tensor.numel() * self.precision.bytes(),
            );
            released.push(id);
            for link in slot.links {
                if let Some(s) = self.slots.get_mut(&link) {
                    s.holders -= 1;
                    work.push(link);
                }
            }
        }
        released
    }

    /// Drop every tensor regardless of holders.
    pub fn clear(&mut self) -> Vec<TensorId> {
        let ids: Vec<TensorId> = self.slots.keys().copied().collect();
        for id in &ids {
            let slot = self.slots.remove(id).expect("listed");
            self.ledger.release(
                Some(*id),
                slot.tensor.category(),
                slot.tensor.numel() * self.precision.bytes(),
            );
        }
        ids
    }

    pub fn ledger(&self) -> &FootprintLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut FootprintLedger {
        &mut self.ledger
    }

    /// Live bytes per category by full scan.
    pub fn scan_bytes(&self) -> BTreeMap<Category, usize> {
        let mut out = BTreeMap::new();
        for slot in self.slots.values() {
            *out.entry(slot.tensor.category()).or_default() +=
                slot.tensor.numel() * self.precision.bytes();
        }
        out
    }

    pub fn live_ids(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.slots.keys().copied()
    }
}
