//! Reservoir-sampled episodic memory.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array4;
use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Stable handle to a resident item. Evicting the item invalidates it.
pub type ItemId = u64;

#[derive(Debug, Clone)]
pub struct ReplayItem {
    pub id: ItemId,
    pub image: Vec<f32>,
    pub label: usize,
    pub logits: Option<Vec<f32>>,
}

/// Rows drawn from memory.
#[derive(Debug, Clone)]
pub struct MemoryBatch {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<ItemId>,
    /// Stored logits, `None` when any drawn item has none.
    pub logits: Option<Vec<Vec<f32>>>,
}

impl MemoryBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    image_shape: (usize, usize, usize),
    n_classes: usize,
    items: Vec<ReplayItem>,
    n_seen: u64,
    next_id: ItemId,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, image_shape: (usize, usize, usize), n_classes: usize) -> Self {
        ReplayBuffer {
            capacity,
            image_shape,
            n_classes,
            items: Vec::with_capacity(capacity),
            n_seen: 0,
            next_id: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    fn image_len(&self) -> usize {
        let (c, h, w) = self.image_shape;
        c * h * w
    }

    /// Offers one sample to the reservoir. Returns the id if it was stored.
    pub fn offer(&mut self, image: &[f32], label: usize, logits: Option<&[f32]>, rng: &mut Rng) -> Result<Option<ItemId>> {
        if image.len() != self.image_len() {
            return Err(Error::shape(self.image_len(), image.len()));
        }
        if let Some(l) = logits {
            if l.len() != self.n_classes {
                return Err(Error::shape(format!("{} logits", self.n_classes), l.len()));
            }
        }
        let slot = if self.items.len() < self.capacity {
            Some(self.items.len())
        } else {
            // keep with probability M / (n_seen + 1)
            let j = rng.random_range(0..=self.n_seen);
            (j < self.capacity as u64).then_some(j as usize)
        };
        self.n_seen += 1;
        let Some(slot) = slot else { return Ok(None) };
        let item = ReplayItem {
            id: self.next_id,
            image: image.to_vec(),
            label,
            logits: logits.map(<[f32]>::to_vec),
        };
        self.next_id += 1;
        let id = item.id;
        if slot == self.items.len() {
            self.items.push(item);
        } else {
            self.items[slot] = item;
        }
        Ok(Some(id))
    }

    /// Per-sample reservoir update with a stream batch.
    ///
    /// `logits`, when given, holds one row per batch row.
    pub fn reservoir_update(
        &mut self,
        images: &Array4<f32>,
        labels: &[usize],
        logits: Option<&[Vec<f32>]>,
        rng: &mut Rng,
    ) -> Result<Vec<Option<ItemId>>> {
        let (b, c, h, w) = images.dim();
        if (c, h, w) != self.image_shape || b != labels.len() {
            return Err(Error::shape(
                format!("[{}, {:?}]", labels.len(), self.image_shape),
                format!("{:?}", images.dim()),
            ));
        }
        if let Some(l) = logits {
            if l.len() != b {
                return Err(Error::shape(format!("{b} logit rows"), l.len()));
            }
        }
        let flat = images.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let len = c * h * w;
        (0..b)
            .map(|i| {
                self.offer(
                    &flat[i * len..(i + 1) * len],
                    labels[i],
                    logits.map(|l| l[i].as_slice()),
                    rng,
                )
            })
            .collect()
    }

    /// Uniform draw of `min(k, len)` distinct items.
    pub fn random_retrieve(&self, k: usize, rng: &mut Rng) -> MemoryBatch {
        let n = k.min(self.items.len());
        let picks = index::sample(rng, self.items.len(), n).into_vec();
        self.gather(&picks)
    }

    /// Every resident item, in slot order.
    pub fn all(&self) -> MemoryBatch {
        let picks: Vec<usize> = (0..self.items.len()).collect();
        self.gather(&picks)
    }

    fn gather(&self, slots: &[usize]) -> MemoryBatch {
        let (c, h, w) = self.image_shape;
        let mut data = Vec::with_capacity(slots.len() * c * h * w);
        let mut labels = Vec::with_capacity(slots.len());
        let mut ids = Vec::with_capacity(slots.len());
        let mut logits = Some(Vec::with_capacity(slots.len()));
        for &s in slots {
            let item = &self.items[s];
            data.extend_from_slice(&item.image);
            labels.push(item.label);
            ids.push(item.id);
            match (&mut logits, &item.logits) {
                (Some(acc), Some(l)) => acc.push(l.clone()),
                _ => logits = None,
            }
        }
        MemoryBatch {
            images: Array4::from_shape_vec((slots.len(), c, h, w), data).expect("item images match shape"),
            labels,
            ids,
            logits,
        }
    }

    fn slot_of(&self, id: ItemId) -> Option<usize> {
        self.items.iter().position(|it| it.id == id)
    }

    pub fn get(&self, id: ItemId) -> Result<&ReplayItem> {
        self.slot_of(id).map(|s| &self.items[s]).ok_or(Error::StaleItem(id))
    }

    /// Replaces stored logits of resident items. Images and labels are untouched.
    pub fn update_stored_logits(&mut self, ids: &[ItemId], logits: &[Vec<f32>]) -> Result<()> {
        if ids.len() != logits.len() {
            return Err(Error::shape(format!("{} logit rows", ids.len()), logits.len()));
        }
        let mut slots = Vec::with_capacity(ids.len());
        for (&id, l) in ids.iter().zip(logits) {
            if l.len() != self.n_classes {
                return Err(Error::shape(format!("{} logits", self.n_classes), l.len()));
            }
            slots.push(self.slot_of(id).ok_or(Error::StaleItem(id))?);
        }
        for (s, l) in slots.into_iter().zip(logits) {
            self.items[s].logits = Some(l.clone());
        }
        Ok(())
    }

    /// Writes `images.bin` (f32 little endian, slot order) and `items.tsv`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("images.bin");
        let mut bytes = Vec::with_capacity(self.items.len() * self.image_len() * 4);
        for item in &self.items {
            for v in &item.image {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;

        let path = dir.join("items.tsv");
        let mut out = Vec::new();
        let (c, h, w) = self.image_shape;
        writeln!(out, "# shape\t{c}\t{h}\t{w}\tn_seen\t{}", self.n_seen).expect("vec write");
        writeln!(out, "slot\tid\tlabel\tlogits").expect("vec write");
        for (slot, item) in self.items.iter().enumerate() {
            let logits = item
                .logits
                .as_ref()
                .map(|l| l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .unwrap_or_default();
            writeln!(out, "{slot}\t{}\t{}\t{logits}", item.id, item.label).expect("vec write");
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))
    }
}
