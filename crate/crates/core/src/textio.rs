//! Text formatting helpers shared by the CSV emitters.

/// Format a float with 17 significant digits so that parsing the text
/// recovers the exact bit pattern.
pub fn f64_repr(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Deterministic FNV-1a 64-bit hash, used to fingerprint parameter blobs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
