//! CRC32-C hashing and hash partitioning.
//!
//! The partitioning hash must be identical on every node of the cluster, so
//! the variant is fixed: Castagnoli polynomial 0x1EDC6F41 (reflected form
//! 0x82F63B78), init 0xFFFFFFFF, final xor 0xFFFFFFFF.

use crate::codec::Datum;

const POLY_REFLECTED: u32 = 0x82F6_3B78;

const fn build_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 { (crc >> 1) ^ POLY_REFLECTED } else { crc >> 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static TABLE: [u32; 256] = build_table();

/// CRC32-C of `bytes`.
#[inline]
pub fn crc32_hash(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = TABLE[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

/// Target partition for a hash value: `hash mod n`.
#[inline]
pub fn partition_for(hash: u32, n: usize) -> usize {
    debug_assert!(n >= 1);
    (hash as usize) % n
}

/// Canonical key bytes of a tuple's key columns, in key order.
pub fn key_bytes(row: &[Datum], key_columns: &[usize], out: &mut Vec<u8>) {
    out.clear();
    for &idx in key_columns {
        row[idx].write_key_bytes(out);
    }
}

/// Hash a single 64-bit key through its canonical little-endian bytes.
#[inline]
pub fn hash_i64_key(key: i64) -> u32 {
    crc32_hash(&key.to_le_bytes())
}
