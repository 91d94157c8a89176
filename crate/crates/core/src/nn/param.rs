//! Parameter visitation: one stable, code-defined order per container.
//!
//! Hashing, freezing contracts, checkpoint IO, and the optimizer all walk
//! parameters through this trait, so they agree on identity by construction.

use sha2::{Digest, Sha256};

/// Read-only view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

/// A container of named parameter tensors with gradient buffers.
pub trait ParamSet {
    /// Visits `(name, shape, data)` in a stable order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(ParamView<'_>));

    /// Visits `(data, grad)` mutably, in the same order as [`ParamSet::visit`].
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32]));

    /// Clears every gradient buffer.
    fn zero_grad(&mut self);

    /// Total parameter count.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |p| n += p.data.len());
        n
    }

    /// SHA-256 over the raw little-endian bytes of every tensor, in visit
    /// order. Two containers hash equal iff they are bitwise identical.
    fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        self.visit("", &mut |p| {
            hasher.update(p.name.as_bytes());
            for v in p.data {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher.finalize().into()
    }

    /// Euclidean norm over all parameters.
    fn param_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        self.visit("", &mut |p| {
            for &v in p.data {
                acc += v as f64 * v as f64;
            }
        });
        acc.sqrt()
    }
}

/// Formats a content hash for logs.
pub fn hash_hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}
