use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::Tensor;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a learnable tensor. Clones keep the id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        Self(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    pub value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns named parameters.
///
/// Names are dotted paths (`blocks.0.conv.w`) and must be stable; they key
/// checkpoint entries.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Param)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)>;

    /// Non-learnable state that still belongs in a checkpoint (running statistics).
    fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }

    fn params(&self) -> Vec<&Param> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.params().iter().map(|p| p.id()).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Bitwise fingerprint of all parameter and buffer values.
    fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, p) in self.named_params() {
            name.hash(&mut h);
            hash_tensor(&p.value, &mut h);
        }
        for (name, t) in self.named_buffers() {
            name.hash(&mut h);
            hash_tensor(t, &mut h);
        }
        h.finish()
    }
}

fn hash_tensor(t: &Tensor, h: &mut DefaultHasher) {
    t.shape().hash(h);
    for v in t.data() {
        v.to_bits().hash(h);
    }
}

/// Prefixes every name in a child module's listing.
pub fn prefixed<T>(prefix: &str, items: Vec<(String, T)>) -> Vec<(String, T)> {
    items
        .into_iter()
        .map(|(n, p)| (format!("{prefix}.{n}"), p))
        .collect()
}
