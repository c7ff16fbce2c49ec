//! Config hashing for output provenance.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the compact JSON serialization, hex encoded.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            a: f64,
            b: u32,
        }
        let h = config_hash(&C { a: 1.5, b: 2 });
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&C { a: 1.5, b: 2 }));
        assert_ne!(h, config_hash(&C { a: 1.5, b: 3 }));
        assert_eq!(
            bytes_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
