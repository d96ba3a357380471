//! Sub-seed derivation. Every random stream in a run is keyed by the run
//! seed and a stage name (or record index), hashed with SHA-256, so a stage
//! run on its own draws exactly what it draws inside the full pipeline.

use sha2::{Digest, Sha256};

fn first_u64(bytes: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&bytes[..8]);
    u64::from_le_bytes(buf)
}

pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"stage:");
    h.update(stage.as_bytes());
    h.update(seed.to_le_bytes());
    first_u64(&h.finalize())
}

pub fn derive_index_seed(seed: u64, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"index:");
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    first_u64(&h.finalize())
}
