//! Z-order keys. Bits interleave as x, y, z from most to least significant
//! within each triple, so a child octant index `(x<<2)|(y<<1)|z` sorts the
//! same way as the children's keys.

use crate::error::{Error, Result};

pub const MAX_COORD_BITS: u32 = 21;

#[inline]
fn spread(v: u64) -> u64 {
    let mut x = v & 0x1f_ffff;
    x = (x | (x << 32)) & 0x1f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x1f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x ^ (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x ^ (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x ^ (x >> 8)) & 0x1f_0000_ff00_00ff;
    x = (x ^ (x >> 16)) & 0x1f_0000_0000_ffff;
    x = (x ^ (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Interleaved key; panics in debug builds if a component exceeds 21 bits.
#[inline]
pub fn key(c: [u32; 3]) -> u64 {
    debug_assert!(c.iter().all(|&v| v >> MAX_COORD_BITS == 0));
    (spread(c[0] as u64) << 2) | (spread(c[1] as u64) << 1) | spread(c[2] as u64)
}

/// Checked variant of [`key`].
pub fn morton_key(c: [u32; 3]) -> Result<u64> {
    if c.iter().any(|&v| v >> MAX_COORD_BITS != 0) {
        return Err(Error::CoordOutOfRange([c[0] as i64, c[1] as i64, c[2] as i64]));
    }
    Ok(key(c))
}

pub fn decode(k: u64) -> [u32; 3] {
    [compact(k >> 2), compact(k >> 1), compact(k)]
}

/// Octant index of `c` within its parent cell.
#[inline]
pub fn octant(c: [u32; 3]) -> usize {
    (((c[0] & 1) << 2) | ((c[1] & 1) << 1) | (c[2] & 1)) as usize
}

#[inline]
pub fn child(parent: [u32; 3], octant: usize) -> [u32; 3] {
    [
        (parent[0] << 1) | ((octant as u32 >> 2) & 1),
        (parent[1] << 1) | ((octant as u32 >> 1) & 1),
        (parent[2] << 1) | (octant as u32 & 1),
    ]
}

pub fn sort(coords: &mut [[u32; 3]]) {
    coords.sort_unstable_by_key(|&c| key(c));
}

pub fn is_sorted_unique(coords: &[[u32; 3]]) -> bool {
    coords.windows(2).all(|w| key(w[0]) < key(w[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Bit-by-bit z-order comparison, independent of the magic-number path.
    fn zorder_cmp(a: [u32; 3], b: [u32; 3]) -> std::cmp::Ordering {
        for bit in (0..MAX_COORD_BITS).rev() {
            for axis in 0..3 {
                let ba = (a[axis] >> bit) & 1;
                let bb = (b[axis] >> bit) & 1;
                if ba != bb {
                    return ba.cmp(&bb);
                }
            }
        }
        std::cmp::Ordering::Equal
    }

    #[test]
    fn origin_is_zero() {
        assert_eq!(key([0, 0, 0]), 0);
    }

    #[test]
    fn axis_interleave_x_then_y_then_z() {
        assert_eq!(key([1, 0, 0]), 0b100);
        assert_eq!(key([0, 1, 0]), 0b010);
        assert_eq!(key([0, 0, 1]), 0b001);
        assert!(key([0, 0, 1]) < key([1, 0, 0]));
    }

    #[test]
    fn overflow_is_rejected() {
        assert!(matches!(morton_key([1 << 21, 0, 0]), Err(Error::CoordOutOfRange(_))));
        assert!(morton_key([(1 << 21) - 1, 0, 5]).is_ok());
    }

    #[test]
    fn sort_matches_bitwise_comparator() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[u32; 3]> = (0..1000)
            .map(|_| [rng.gen_range(0..1 << 21), rng.gen_range(0..1024), rng.gen_range(0..64)])
            .collect();
        let mut by_key = pts.clone();
        sort(&mut by_key);
        let mut by_cmp = pts;
        by_cmp.sort_by(|a, b| zorder_cmp(*a, *b));
        assert_eq!(by_key, by_cmp);
    }

    #[test]
    fn child_octant_round_trip() {
        for o in 0..8 {
            let c = child([5, 9, 2], o);
            assert_eq!(octant(c), o);
            assert_eq!([c[0] >> 1, c[1] >> 1, c[2] >> 1], [5, 9, 2]);
        }
    }

    proptest! {
        #[test]
        fn decode_inverts_key(x in 0u32..1 << 21, y in 0u32..1 << 21, z in 0u32..1 << 21) {
            prop_assert_eq!(decode(key([x, y, z])), [x, y, z]);
        }

        #[test]
        fn order_is_total(a in prop::array::uniform3(0u32..4096),
                          b in prop::array::uniform3(0u32..4096),
                          c in prop::array::uniform3(0u32..4096)) {
            let (ka, kb, kc) = (key(a), key(b), key(c));
            prop_assert_eq!(ka == kb, a == b);
            prop_assert_eq!(ka.cmp(&kb), zorder_cmp(a, b));
            if ka <= kb && kb <= kc {
                prop_assert!(ka <= kc);
            }
        }
    }
}
