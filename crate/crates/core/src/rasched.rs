//! Hierarchical random-access scheduling of a group of frames.
//!
//! Frame `f > 0` of a GOF of size `2^L` sits on layer `L - tz(f)` and frame
//! 0 on layer 0. Coding order is by layer, then frame index. A frame
//! references `f - lowbit(f)` and, when it exists inside the GOF,
//! `f + lowbit(f)`. Reference `-1` denotes the last frame of the previous GOF.

use crate::bytes::Reader;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameKind {
    I,
    P,
    B,
}

impl FrameKind {
    pub fn code(self) -> u8 {
        match self {
            FrameKind::I => 0,
            FrameKind::P => 1,
            FrameKind::B => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FrameKind::I),
            1 => Some(FrameKind::P),
            2 => Some(FrameKind::B),
            _ => None,
        }
    }
}

/// Reference structure of one GOF. Per-frame vectors are indexed by the
/// frame's offset inside the GOF.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GofPlan {
    pub gof_size: usize,
    pub order: Vec<usize>,
    pub layer: Vec<u8>,
    /// Past reference first, then future. `-1` is the previous GOF's last frame.
    pub refs: Vec<Vec<i32>>,
    pub kind: Vec<FrameKind>,
}

pub const MAX_GOF: usize = 128;

fn check_size(gof_size: usize) -> Result<()> {
    if gof_size < 2 || gof_size > MAX_GOF || !gof_size.is_power_of_two() {
        return Err(Error::InvalidGofSize(gof_size));
    }
    Ok(())
}

pub fn build_plan(gof_size: usize, is_first_gof: bool) -> Result<GofPlan> {
    check_size(gof_size)?;
    let levels = gof_size.trailing_zeros();
    let layer: Vec<u8> = (0..gof_size)
        .map(|f| if f == 0 { 0 } else { (levels - f.trailing_zeros()) as u8 })
        .collect();
    let mut order: Vec<usize> = (0..gof_size).collect();
    order.sort_by_key(|&f| (layer[f], f));
    let mut refs = Vec::with_capacity(gof_size);
    let mut kind = Vec::with_capacity(gof_size);
    for f in 0..gof_size {
        if f == 0 {
            if is_first_gof {
                refs.push(vec![]);
                kind.push(FrameKind::I);
            } else {
                refs.push(vec![-1]);
                kind.push(FrameKind::P);
            }
            continue;
        }
        let low = f & f.wrapping_neg();
        let (past, future) = (f - low, f + low);
        if future < gof_size {
            refs.push(vec![past as i32, future as i32]);
            kind.push(FrameKind::B);
        } else {
            refs.push(vec![past as i32]);
            kind.push(FrameKind::P);
        }
    }
    let plan = GofPlan {
        gof_size,
        order,
        layer,
        refs,
        kind,
    };
    plan.validate()?;
    Ok(plan)
}

/// Sequential plan: every frame references its predecessor.
pub fn build_low_delay_plan(len: usize, is_first_gof: bool) -> Result<GofPlan> {
    if len == 0 || len > MAX_GOF {
        return Err(Error::InvalidGofSize(len));
    }
    let mut refs = Vec::with_capacity(len);
    let mut kind = Vec::with_capacity(len);
    for f in 0..len {
        if f == 0 && is_first_gof {
            refs.push(vec![]);
            kind.push(FrameKind::I);
        } else {
            refs.push(vec![f as i32 - 1]);
            kind.push(FrameKind::P);
        }
    }
    let plan = GofPlan {
        gof_size: len,
        order: (0..len).collect(),
        layer: (0..len).map(|f| f.min(255) as u8).collect(),
        refs,
        kind,
    };
    plan.validate()?;
    Ok(plan)
}

impl GofPlan {
    /// Restrict to the first `len` frames, for a partial final GOF. Frames
    /// whose future reference falls outside become P-frames.
    pub fn truncate(&self, len: usize) -> Result<GofPlan> {
        if len == 0 || len > self.gof_size {
            return Err(Error::InvalidGofSize(len));
        }
        let mut refs = Vec::with_capacity(len);
        let mut kind = Vec::with_capacity(len);
        for f in 0..len {
            let r: Vec<i32> = self.refs[f].iter().copied().filter(|&r| r < len as i32).collect();
            let k = match (self.kind[f], r.len()) {
                (FrameKind::B, 1) => FrameKind::P,
                (k, _) => k,
            };
            refs.push(r);
            kind.push(k);
        }
        let plan = GofPlan {
            gof_size: len,
            order: self.order.iter().copied().filter(|&f| f < len).collect(),
            layer: self.layer[..len].to_vec(),
            refs,
            kind,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// The same structure for a group that is not the first: frame 0
    /// becomes a P-frame on the previous group's last frame.
    pub fn reopened(&self) -> Result<GofPlan> {
        let mut plan = self.clone();
        if plan.kind[0] == FrameKind::I {
            plan.kind[0] = FrameKind::P;
            plan.refs[0] = vec![-1];
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.gof_size
    }

    pub fn is_empty(&self) -> bool {
        self.gof_size == 0
    }

    /// Check every structural invariant; violations are `SchedulingError`s.
    pub fn validate(&self) -> Result<()> {
        let n = self.gof_size;
        let bad = |m: String| Err(Error::SchedulingError(m));
        if self.order.len() != n || self.layer.len() != n || self.refs.len() != n || self.kind.len() != n {
            return bad("plan vectors disagree in length".into());
        }
        let mut pos = vec![usize::MAX; n];
        for (i, &f) in self.order.iter().enumerate() {
            if f >= n || pos[f] != usize::MAX {
                return bad(format!("order is not a permutation at position {i}"));
            }
            pos[f] = i;
        }
        for f in 0..n {
            let refs = &self.refs[f];
            match self.kind[f] {
                FrameKind::I if !refs.is_empty() => return bad(format!("I-frame {f} has references")),
                FrameKind::P if refs.len() != 1 => return bad(format!("P-frame {f} needs one reference")),
                FrameKind::B if refs.len() != 2 => return bad(format!("B-frame {f} needs two references")),
                _ => {}
            }
            if self.kind[f] == FrameKind::B && !(refs[0] < f as i32 && refs[1] > f as i32) {
                return bad(format!("B-frame {f} needs one past and one future reference"));
            }
            for &r in refs {
                if r == -1 {
                    if f != 0 {
                        return bad(format!("frame {f} references the previous GOF"));
                    }
                    continue;
                }
                if r < 0 || r as usize >= n || r as usize == f {
                    return bad(format!("frame {f} has invalid reference {r}"));
                }
                let r = r as usize;
                if pos[r] >= pos[f] {
                    return bad(format!("frame {f} is coded before its reference {r}"));
                }
                if self.layer[r] >= self.layer[f] {
                    return bad(format!("frame {f} references {r} on a layer that is not lower"));
                }
            }
        }
        Ok(())
    }

    /// Frames grouped by layer, in coding order. Frames of one stage never
    /// reference each other.
    pub fn parallel_stages(&self) -> Result<Vec<Vec<usize>>> {
        let mut stages: Vec<Vec<usize>> = Vec::new();
        let mut last_layer = None;
        for &f in &self.order {
            if last_layer != Some(self.layer[f]) {
                stages.push(Vec::new());
                last_layer = Some(self.layer[f]);
            }
            stages.last_mut().unwrap().push(f);
        }
        for stage in &stages {
            for &f in stage {
                if self.refs[f].iter().any(|&r| r >= 0 && stage.contains(&(r as usize))) {
                    return Err(Error::SchedulingError(format!("frame {f} depends on its own stage")));
                }
            }
        }
        Ok(stages)
    }

    /// Serialized as `gof u8`, then per frame in coding order
    /// `{frame u8, kind u8, layer u8, nrefs u8, refs i8...}`.
    pub fn write(&self, out: &mut Vec<u8>) {
        out.push(self.gof_size as u8);
        for &f in &self.order {
            out.push(f as u8);
            out.push(self.kind[f].code());
            out.push(self.layer[f]);
            out.push(self.refs[f].len() as u8);
            out.extend(self.refs[f].iter().map(|&r| r as i8 as u8));
        }
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let at = r.offset();
        let n = r.u8("plan size")? as usize;
        if n == 0 || n > MAX_GOF {
            return Err(Error::decode(at, format!("invalid plan size {n}")));
        }
        let mut order = Vec::with_capacity(n);
        let mut layer = vec![0u8; n];
        let mut refs = vec![Vec::new(); n];
        let mut kind = vec![FrameKind::I; n];
        let mut seen = vec![false; n];
        for _ in 0..n {
            let at = r.offset();
            let f = r.u8("plan frame")? as usize;
            if f >= n || seen[f] {
                return Err(Error::decode(at, format!("invalid plan frame {f}")));
            }
            seen[f] = true;
            order.push(f);
            let k = r.u8("frame kind")?;
            kind[f] = FrameKind::from_code(k).ok_or_else(|| Error::decode(at + 1, format!("unknown frame kind {k}")))?;
            layer[f] = r.u8("frame layer")?;
            let nr = r.u8("reference count")? as usize;
            if nr > 2 {
                return Err(Error::decode(at + 3, format!("{nr} references")));
            }
            for _ in 0..nr {
                refs[f].push(r.i8("reference")? as i32);
            }
        }
        let plan = GofPlan {
            gof_size: n,
            order,
            layer,
            refs,
            kind,
        };
        plan.validate().map_err(|e| Error::decode(at, e.to_string()))?;
        Ok(plan)
    }
}

/// When each decoded frame may leave the buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BufferLifetimes {
    /// Position in coding order of the last frame that references each
    /// frame; `None` when nothing inside the GOF uses it.
    pub last_use: Vec<Option<usize>>,
    /// The frame kept for the next GOF's first frame.
    pub retained: usize,
    /// Most frames held simultaneously while some frame is being decoded.
    pub peak: usize,
}

pub fn buffer_lifetimes(plan: &GofPlan) -> BufferLifetimes {
    let n = plan.gof_size;
    let mut last_use = vec![None; n];
    for (i, &f) in plan.order.iter().enumerate() {
        for &r in &plan.refs[f] {
            if r >= 0 {
                last_use[r as usize] = Some(i);
            }
        }
    }
    let retained = n - 1;
    let mut pos = vec![0; n];
    for (i, &f) in plan.order.iter().enumerate() {
        pos[f] = i;
    }
    let mut peak = 0;
    for i in 0..n {
        // Frames decoded earlier and still needed at or after step i.
        let held = (0..n)
            .filter(|&f| pos[f] < i && (last_use[f].is_some_and(|u| u >= i) || f == retained))
            .count();
        let prev_gof = plan.refs.iter().enumerate().any(|(f, r)| r.contains(&-1) && pos[f] >= i);
        peak = peak.max(held + prev_gof as usize);
    }
    BufferLifetimes {
        last_use,
        retained,
        peak,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_frame_order() {
        let p = build_plan(16, true).unwrap();
        assert_eq!(p.order, vec![0, 8, 4, 12, 2, 6, 10, 14, 1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(p.refs[10], vec![8, 12]);
        assert_eq!(p.refs[14], vec![12]);
        assert_eq!(p.refs[15], vec![14]);
        assert_eq!(p.kind[0], FrameKind::I);
    }

    #[test]
    fn later_gofs_open_on_previous() {
        let p = build_plan(16, false).unwrap();
        assert_eq!(p.kind[0], FrameKind::P);
        assert_eq!(p.refs[0], vec![-1]);
    }

    #[test]
    fn size_two() {
        let p = build_plan(2, true).unwrap();
        assert_eq!(p.order, vec![0, 1]);
        assert_eq!(p.kind[1], FrameKind::P);
        assert_eq!(p.refs[1], vec![0]);
    }

    #[test]
    fn invalid_sizes() {
        for n in [0, 1, 3, 12, 256] {
            assert!(matches!(build_plan(n, true), Err(Error::InvalidGofSize(_))));
        }
    }

    #[test]
    fn truncated_plan_drops_future_refs() {
        let p = build_plan(16, true).unwrap().truncate(11).unwrap();
        assert_eq!(p.order, vec![0, 8, 4, 2, 6, 10, 1, 3, 5, 7, 9]);
        assert_eq!(p.refs[10], vec![8]);
        assert_eq!(p.kind[10], FrameKind::P);
        assert_eq!(p.refs[9], vec![8, 10]);
    }

    #[test]
    fn serialization_round_trip() {
        for n in [2, 4, 8, 16, 32] {
            for first in [true, false] {
                let p = build_plan(n, first).unwrap();
                let mut out = Vec::new();
                p.write(&mut out);
                let mut r = Reader::new(&out, 0);
                assert_eq!(GofPlan::read(&mut r).unwrap(), p);
                assert!(r.is_at_end());
            }
        }
    }
}
