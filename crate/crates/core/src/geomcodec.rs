//! Lossless octree coding of voxel coordinates.
//!
//! Nodes are visited breadth first in Morton order; every occupied node
//! emits its 8-bit child mask through the range coder. The context of a node
//! is its level and the number of its occupied siblings (capped at 3).
//! Symbol counts per context are gathered in one pass and sent ahead of the
//! mask stream as sparse varint lists.

use crate::bytes::{put_u32, put_varint, Reader};
use crate::cloud::Coord;
use crate::error::{Error, Result};
use crate::morton;
use crate::rangecoder::{CdfTable, RangeDecoder, RangeEncoder, PROB_TOTAL};

const SIBLING_CLASSES: usize = 4;

fn ctx_index(level: usize, parent_mask: u8) -> usize {
    let siblings = (parent_mask.count_ones() as usize).saturating_sub(1);
    level * SIBLING_CLASSES + siblings.min(SIBLING_CLASSES - 1)
}

/// Every mask value keeps frequency at least 1; counts share the rest.
fn table_from_counts(counts: &[u32; 256]) -> CdfTable {
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    let spare = (PROB_TOTAL - 256) as u64;
    let mut freqs: Vec<u32> = counts
        .iter()
        .map(|&c| 1 + if total == 0 { 0 } else { (c as u64 * spare / total) as u32 })
        .collect();
    let mut best = 0;
    for i in 1..256 {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    let used: u32 = freqs.iter().sum();
    freqs[best] += PROB_TOTAL - used;
    CdfTable::from_freqs(&freqs).expect("valid octree table")
}

/// One level of the tree: occupied nodes in Morton order, their masks and
/// the mask of each node's parent.
struct Level {
    masks: Vec<u8>,
    parent_masks: Vec<u8>,
}

fn build_levels(coords: &[Coord], depth: usize) -> Vec<Level> {
    // nodes[l] are the occupied nodes at level l (level `depth` = points).
    let mut nodes: Vec<Vec<Coord>> = vec![coords.to_vec()];
    for _ in 0..depth {
        let prev = nodes.last().unwrap();
        let mut up: Vec<Coord> = prev.iter().map(|c| c.map(|v| v >> 1)).collect();
        up.dedup();
        nodes.push(up);
    }
    nodes.reverse();
    let mut levels = Vec::with_capacity(depth);
    let mut parent_masks_next: Vec<u8> = vec![0];
    for l in 0..depth {
        let (parents, children) = (&nodes[l], &nodes[l + 1]);
        let mut masks = vec![0u8; parents.len()];
        let mut p = 0;
        for &c in children {
            let pc = c.map(|v| v >> 1);
            while parents[p] != pc {
                p += 1;
            }
            masks[p] |= 1 << morton::octant(c);
        }
        let parent_masks = std::mem::take(&mut parent_masks_next);
        parent_masks_next = masks
            .iter()
            .flat_map(|&m| std::iter::repeat(m).take(m.count_ones() as usize))
            .collect();
        levels.push(Level { masks, parent_masks });
    }
    levels
}

/// Code a set of unique coordinates, each component below `2^depth`.
pub fn encode_coords(coords: &[Coord], depth: u32) -> Result<Vec<u8>> {
    if depth == 0 || depth > morton::MAX_COORD_BITS {
        return Err(Error::InvalidConfig(format!("octree depth {depth}")));
    }
    let mut sorted = coords.to_vec();
    for c in &sorted {
        if c.iter().any(|&v| (v as u64) >> depth != 0) {
            return Err(Error::CoordOutOfRange(c.map(|v| v as i64)));
        }
    }
    morton::sort(&mut sorted);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicatePoints(w[0]));
    }
    let depth_us = depth as usize;
    let mut out = vec![depth as u8];
    put_u32(&mut out, sorted.len() as u32);
    if sorted.is_empty() {
        return Ok(out);
    }
    let levels = build_levels(&sorted, depth_us);
    let nctx = depth_us * SIBLING_CLASSES;
    let mut counts = vec![[0u32; 256]; nctx];
    for (l, lev) in levels.iter().enumerate() {
        for (&m, &pm) in lev.masks.iter().zip(&lev.parent_masks) {
            counts[ctx_index(l, pm)][m as usize] += 1;
        }
    }
    for c in &counts {
        let nz: Vec<usize> = (0..256).filter(|&s| c[s] > 0).collect();
        put_varint(&mut out, nz.len() as u32);
        for s in nz {
            out.push(s as u8);
            put_varint(&mut out, c[s]);
        }
    }
    let tables: Vec<CdfTable> = counts.iter().map(table_from_counts).collect();
    let mut enc = RangeEncoder::new();
    for (l, lev) in levels.iter().enumerate() {
        for (&m, &pm) in lev.masks.iter().zip(&lev.parent_masks) {
            enc.encode(&tables[ctx_index(l, pm)], m as usize);
        }
    }
    let stream = enc.finish();
    put_u32(&mut out, stream.len() as u32);
    out.extend_from_slice(&stream);
    Ok(out)
}

/// Inverse of [`encode_coords`]; `base` is the payload's offset in the
/// enclosing file, used in error reports. Returns Morton-sorted coordinates.
pub fn decode_coords_at(bytes: &[u8], base: usize) -> Result<Vec<Coord>> {
    let mut r = Reader::new(bytes, base);
    let depth = r.u8("octree depth")? as usize;
    if depth == 0 || depth > morton::MAX_COORD_BITS as usize {
        return Err(Error::decode(base, format!("invalid octree depth {depth}")));
    }
    let count = r.u32("point count")? as usize;
    if count == 0 {
        if !r.is_at_end() {
            return Err(Error::decode(r.offset(), "trailing bytes after empty octree"));
        }
        return Ok(Vec::new());
    }
    let nctx = depth * SIBLING_CLASSES;
    let mut tables = Vec::with_capacity(nctx);
    for _ in 0..nctx {
        let mut counts = [0u32; 256];
        let nz = r.varint("table size")? as usize;
        if nz > 256 {
            return Err(Error::decode(r.offset(), "table lists more than 256 symbols"));
        }
        for _ in 0..nz {
            let s = r.u8("table symbol")? as usize;
            counts[s] = r.varint("table count")?;
        }
        tables.push(table_from_counts(&counts));
    }
    let len = r.u32("mask stream length")? as usize;
    let stream_at = r.offset();
    let stream = r.take(len, "mask stream")?;
    if !r.is_at_end() {
        return Err(Error::decode(r.offset(), "trailing bytes after mask stream"));
    }
    let mut dec = RangeDecoder::new(stream);
    let mut nodes: Vec<Coord> = vec![[0, 0, 0]];
    let mut parent_masks: Vec<u8> = vec![0];
    for l in 0..depth {
        let mut next = Vec::new();
        let mut next_pm = Vec::new();
        for (&node, &pm) in nodes.iter().zip(&parent_masks) {
            let m = dec
                .decode(&tables[ctx_index(l, pm)])
                .map_err(|_| Error::decode(stream_at + dec.position().min(len), "corrupt mask stream"))?
                as u8;
            if m == 0 {
                return Err(Error::decode(stream_at + dec.position().min(len), "empty occupancy mask"));
            }
            for o in 0..8 {
                if m >> o & 1 == 1 {
                    next.push(morton::child(node, o));
                    next_pm.push(m);
                }
            }
            if next.len() > count {
                return Err(Error::decode(stream_at + dec.position().min(len), "more points than declared"));
            }
        }
        nodes = next;
        parent_masks = next_pm;
    }
    if nodes.len() != count {
        return Err(Error::decode(
            stream_at + len,
            format!("decoded {} points, header declares {count}", nodes.len()),
        ));
    }
    if dec.position() > len + 4 {
        return Err(Error::decode(stream_at + len, "mask stream overrun"));
    }
    Ok(nodes)
}

/// Code `children` as one 8-bit child mask per node of `parents`.
///
/// Both sets must be Morton sorted and `parents` must be exactly the
/// parents of `children`. Layout: table counts, stream length, stream.
pub fn encode_child_masks(parents: &[Coord], children: &[Coord]) -> Result<Vec<u8>> {
    let pm = crate::cloud::ParentMap::build(children);
    if pm.parents != parents || !morton::is_sorted_unique(children) {
        return Err(Error::ScanOrderError("children do not refine the parent set".into()));
    }
    let mut counts = [0u32; 256];
    for &m in &pm.masks {
        counts[m as usize] += 1;
    }
    let mut out = Vec::new();
    let nz: Vec<usize> = (0..256).filter(|&s| counts[s] > 0).collect();
    put_varint(&mut out, nz.len() as u32);
    for s in nz {
        out.push(s as u8);
        put_varint(&mut out, counts[s]);
    }
    let table = table_from_counts(&counts);
    let mut enc = RangeEncoder::new();
    for &m in &pm.masks {
        enc.encode(&table, m as usize);
    }
    let stream = enc.finish();
    put_u32(&mut out, stream.len() as u32);
    out.extend_from_slice(&stream);
    Ok(out)
}

/// Inverse of [`encode_child_masks`].
pub fn decode_child_masks_at(bytes: &[u8], base: usize, parents: &[Coord]) -> Result<Vec<Coord>> {
    let mut r = Reader::new(bytes, base);
    let mut counts = [0u32; 256];
    let nz = r.varint("table size")? as usize;
    if nz > 256 {
        return Err(Error::decode(r.offset(), "table lists more than 256 symbols"));
    }
    for _ in 0..nz {
        let s = r.u8("table symbol")? as usize;
        counts[s] = r.varint("table count")?;
    }
    let table = table_from_counts(&counts);
    let len = r.u32("mask stream length")? as usize;
    let stream_at = r.offset();
    let stream = r.take(len, "mask stream")?;
    if !r.is_at_end() {
        return Err(Error::decode(r.offset(), "trailing bytes after mask stream"));
    }
    let mut dec = RangeDecoder::new(stream);
    let mut out = Vec::with_capacity(parents.len() * 2);
    for &p in parents {
        let at = |d: &RangeDecoder| stream_at + d.position().min(len);
        let m = dec.decode(&table).map_err(|_| Error::decode(at(&dec), "corrupt mask stream"))? as u8;
        if m == 0 {
            return Err(Error::decode(at(&dec), "empty occupancy mask"));
        }
        out.extend((0..8).filter(|o| m >> o & 1 == 1).map(|o| morton::child(p, o)));
    }
    if dec.position() > len + 4 {
        return Err(Error::decode(stream_at + len, "mask stream overrun"));
    }
    Ok(out)
}

pub fn decode_coords(bytes: &[u8]) -> Result<Vec<Coord>> {
    decode_coords_at(bytes, 0)
}

/// Occupied-node count per level, root first; the mask count of level `l`.
pub fn masks_per_level(coords: &[Coord], depth: u32) -> Vec<usize> {
    let mut sorted = coords.to_vec();
    morton::sort(&mut sorted);
    sorted.dedup();
    build_levels(&sorted, depth as usize)
        .iter()
        .map(|l| l.masks.len())
        .collect()
}

/// The breadth-first mask sequence, for inspection and tests.
pub fn mask_sequence(coords: &[Coord], depth: u32) -> Vec<u8> {
    let mut sorted = coords.to_vec();
    morton::sort(&mut sorted);
    sorted.dedup();
    build_levels(&sorted, depth as usize)
        .into_iter()
        .flat_map(|l| l.masks)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn child_masks_round_trip() {
        let children: Vec<Coord> = vec![[0, 0, 0], [1, 1, 0], [4, 2, 2], [5, 3, 3], [9, 9, 9]];
        let mut children = children;
        morton::sort(&mut children);
        let parents = crate::cloud::coarsen(&children, 1);
        let bytes = encode_child_masks(&parents, &children).unwrap();
        assert_eq!(decode_child_masks_at(&bytes, 0, &parents).unwrap(), children);
        for cut in 0..bytes.len() {
            assert!(decode_child_masks_at(&bytes[..cut], 0, &parents).is_err());
        }
    }

    #[test]
    fn single_point_masks() {
        assert_eq!(mask_sequence(&[[0, 0, 0]], 3), vec![1, 1, 1]);
        let bytes = encode_coords(&[[0, 0, 0]], 3).unwrap();
        assert_eq!(decode_coords(&bytes).unwrap(), vec![[0, 0, 0]]);
    }

    #[test]
    fn full_cube_is_one_mask() {
        let cube: Vec<Coord> = (0..8).map(|o| morton::child([0, 0, 0], o)).collect();
        assert_eq!(mask_sequence(&cube, 1), vec![0xFF]);
        let bytes = encode_coords(&cube, 1).unwrap();
        assert_eq!(decode_coords(&bytes).unwrap(), cube);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(
            encode_coords(&[[1, 2, 3], [1, 2, 3]], 4),
            Err(Error::DuplicatePoints([1, 2, 3]))
        ));
    }

    #[test]
    fn out_of_depth_rejected() {
        assert!(matches!(encode_coords(&[[8, 0, 0]], 3), Err(Error::CoordOutOfRange(_))));
    }

    #[test]
    fn empty_round_trip() {
        let bytes = encode_coords(&[], 10).unwrap();
        assert!(decode_coords(&bytes).unwrap().is_empty());
    }

    #[test]
    fn truncation_never_panics() {
        let pts: Vec<Coord> = (0..200u32).map(|i| [i * 7 % 64, i * 13 % 64, i * 3 % 64]).collect();
        let mut pts = pts;
        morton::sort(&mut pts);
        pts.dedup();
        let bytes = encode_coords(&pts, 6).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode_coords(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
