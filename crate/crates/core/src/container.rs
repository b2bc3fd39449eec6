//! Bitstream file format.
//!
//! ```text
//! magic "PCDC\x01"
//! version u8, gof_size u8, bit_depth u8, lambda_index u8, frame_count u32,
//! config hash u64, weights hash u64, plan (a single 0 byte when empty)
//! per frame: frame_index u32, kind u8, N u32, 3 x u32 stage counts,
//!            4 x (tag u8, length u32), then the four sections
//! ```
//!
//! All integers are little-endian. Weights are not embedded; the decoder
//! checks their hash instead.

use crate::bytes::{put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rasched::{FrameKind, GofPlan};

pub const MAGIC: &[u8] = b"PCDC\x01";
pub const VERSION: u8 = 1;
/// Section tags in file order.
pub const TAGS: [u8; 4] = [1, 2, 3, 4];
pub const SECTION_NAMES: [&str; 4] = ["C3_OCTREE", "C4_OCTREE", "F4_RANGE", "Z_FACTORIZED"];
pub const FRAME_HEADER_BYTES: usize = 4 + 1 + 4 + 12 + 4 * 5;
/// `lambda_index` of a rate point outside the trained set.
pub const LAMBDA_CUSTOM: u8 = 0xff;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamHeader {
    pub version: u8,
    pub gof_size: u8,
    pub bit_depth: u8,
    pub lambda_index: u8,
    pub frame_count: u32,
    pub config_hash: u64,
    pub weights_hash: u64,
    /// Plan of the first group; `None` only for an empty sequence.
    pub plan: Option<GofPlan>,
}

impl StreamHeader {
    pub fn for_model(model: &Model, frame_count: u32, plan: &GofPlan) -> Self {
        Self {
            version: VERSION,
            gof_size: model.config.gof_size as u8,
            bit_depth: model.config.bit_depth as u8,
            lambda_index: model.config.lambda_index().unwrap_or(LAMBDA_CUSTOM),
            frame_count,
            config_hash: model.config_hash(),
            weights_hash: model.weights_hash(),
            plan: (frame_count > 0).then(|| plan.clone()),
        }
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[self.version, self.gof_size, self.bit_depth, self.lambda_index]);
        put_u32(out, self.frame_count);
        put_u64(out, self.config_hash);
        put_u64(out, self.weights_hash);
        match &self.plan {
            Some(p) => p.write(out),
            None => out.push(0),
        }
    }

    pub fn byte_len(&self) -> usize {
        let mut v = Vec::new();
        self.write(&mut v);
        v.len()
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC });
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: VERSION,
            });
        }
        let at = r.offset();
        let gof_size = r.u8("gof size")?;
        let bit_depth = r.u8("bit depth")?;
        let lambda_index = r.u8("lambda index")?;
        let frame_count = r.u32("frame count")?;
        let config_hash = r.u64("config hash")?;
        let weights_hash = r.u64("weights hash")?;
        let plan_at = r.offset();
        let plan = if frame_count == 0 {
            if r.u8("plan size")? != 0 {
                return Err(Error::decode(plan_at, "plan present in an empty stream"));
            }
            None
        } else {
            let p = GofPlan::read(r)?;
            if p.gof_size != gof_size as usize || p.kind[0] != FrameKind::I {
                return Err(Error::decode(plan_at, "plan does not match the group size"));
            }
            Some(p)
        };
        if !(2..=128).contains(&gof_size) || !gof_size.is_power_of_two() {
            return Err(Error::decode(at, format!("invalid gof size {gof_size}")));
        }
        Ok(Self {
            version,
            gof_size,
            bit_depth,
            lambda_index,
            frame_count,
            config_hash,
            weights_hash,
            plan,
        })
    }

    /// Refuse to decode with weights or a layout other than the encoder's.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.config_hash != model.config_hash() {
            return Err(Error::HashMismatch {
                what: "config",
                stream: self.config_hash,
                loaded: model.config_hash(),
            });
        }
        if self.weights_hash != model.weights_hash() {
            return Err(Error::HashMismatch {
                what: "weights",
                stream: self.weights_hash,
                loaded: model.weights_hash(),
            });
        }
        if self.bit_depth as u32 != model.config.bit_depth || self.gof_size as usize != model.config.gof_size {
            return Err(Error::InvalidConfig(format!(
                "stream uses bit depth {} and gof {}, model is configured for {} and {}",
                self.bit_depth, self.gof_size, model.config.bit_depth, model.config.gof_size
            )));
        }
        Ok(())
    }
}

/// One coded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePayload {
    pub frame_index: u32,
    pub kind: FrameKind,
    /// Original point count.
    pub n_points: u32,
    /// Point counts of stages 2, 1 and 0 for the upsamplers.
    pub targets: [u32; 3],
    pub c3: Vec<u8>,
    pub c4: Vec<u8>,
    pub f4: Vec<u8>,
    pub z: Vec<u8>,
}

impl FramePayload {
    pub fn sections(&self) -> [&[u8]; 4] {
        [&self.c3, &self.c4, &self.f4, &self.z]
    }

    pub fn byte_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.sections().iter().map(|s| s.len()).sum::<usize>()
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        put_u32(out, self.frame_index);
        out.push(self.kind.code());
        put_u32(out, self.n_points);
        for t in self.targets {
            put_u32(out, t);
        }
        for (tag, s) in TAGS.iter().zip(self.sections()) {
            out.push(*tag);
            put_u32(out, s.len() as u32);
        }
        for s in self.sections() {
            out.extend_from_slice(s);
        }
    }

    /// Returns the payload and the file offset of each section.
    fn read(r: &mut Reader) -> Result<(Self, [usize; 4])> {
        let frame_index = r.u32("frame index")?;
        let at = r.offset();
        let k = r.u8("frame kind")?;
        let kind = FrameKind::from_code(k).ok_or_else(|| Error::decode(at, format!("unknown frame kind {k}")))?;
        let n_points = r.u32("point count")?;
        let targets = [r.u32("stage count")?, r.u32("stage count")?, r.u32("stage count")?];
        let mut lens = [0usize; 4];
        for (i, want) in TAGS.iter().enumerate() {
            let at = r.offset();
            let tag = r.u8("section tag")?;
            if tag != *want {
                return Err(Error::decode(at, format!("section tag {tag}, expected {want}")));
            }
            lens[i] = r.u32("section length")? as usize;
        }
        let mut offsets = [0usize; 4];
        let mut secs: Vec<Vec<u8>> = Vec::with_capacity(4);
        for (i, &len) in lens.iter().enumerate() {
            offsets[i] = r.offset();
            secs.push(r.take(len, SECTION_NAMES[i])?.to_vec());
        }
        let z = secs.pop().unwrap();
        let f4 = secs.pop().unwrap();
        let c4 = secs.pop().unwrap();
        let c3 = secs.pop().unwrap();
        Ok((
            Self {
                frame_index,
                kind,
                n_points,
                targets,
                c3,
                c4,
                f4,
                z,
            },
            offsets,
        ))
    }
}

/// Parsed stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Demuxed {
    pub header: StreamHeader,
    /// In file (coding) order.
    pub frames: Vec<FramePayload>,
    /// File offsets of the four sections of each frame.
    pub offsets: Vec<[usize; 4]>,
}

pub fn mux(header: &StreamHeader, frames: &[FramePayload]) -> Vec<u8> {
    let mut out = Vec::with_capacity(header.byte_len() + frames.iter().map(|f| f.byte_len()).sum::<usize>());
    header.write(&mut out);
    for f in frames {
        f.write(&mut out);
    }
    out
}

pub fn demux(bytes: &[u8]) -> Result<Demuxed> {
    let mut r = Reader::new(bytes, 0);
    let header = StreamHeader::read(&mut r)?;
    let mut frames = Vec::new();
    let mut offsets = Vec::new();
    for _ in 0..header.frame_count {
        let (f, o) = FramePayload::read(&mut r)?;
        frames.push(f);
        offsets.push(o);
    }
    if !r.is_at_end() {
        return Err(Error::decode(r.offset(), "trailing bytes after the last frame"));
    }
    Ok(Demuxed {
        header,
        frames,
        offsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasched::build_plan;

    fn header(frames: u32) -> StreamHeader {
        StreamHeader {
            version: VERSION,
            gof_size: 4,
            bit_depth: 10,
            lambda_index: 4,
            frame_count: frames,
            config_hash: 0x1122334455667788,
            weights_hash: 0x99aabbccddeeff00,
            plan: (frames > 0).then(|| build_plan(4, true).unwrap()),
        }
    }

    fn frame(i: u32) -> FramePayload {
        FramePayload {
            frame_index: i,
            kind: FrameKind::P,
            n_points: 10 + i,
            targets: [2, 5, 10 + i],
            c3: vec![1, 2, 3],
            c4: vec![4],
            f4: vec![],
            z: vec![9; 7],
        }
    }

    #[test]
    fn empty_stream_is_thirty_bytes() {
        let bytes = mux(&header(0), &[]);
        assert_eq!(bytes.len(), 30);
        let d = demux(&bytes).unwrap();
        assert_eq!(d.header, header(0));
        assert!(d.frames.is_empty());
    }

    #[test]
    fn frames_round_trip_with_offsets() {
        let frames = vec![frame(0), frame(1)];
        let bytes = mux(&header(2), &frames);
        let d = demux(&bytes).unwrap();
        assert_eq!(d.frames, frames);
        assert_eq!(mux(&d.header, &d.frames), bytes);
        let o = d.offsets[1];
        assert_eq!(&bytes[o[3]..o[3] + 7], &[9; 7]);
    }

    #[test]
    fn every_truncation_is_a_decode_error() {
        let bytes = mux(&header(2), &[frame(0), frame(1)]);
        for cut in 0..bytes.len() {
            match demux(&bytes[..cut]) {
                Err(Error::DecodeError { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn magic_and_version_bits_are_checked() {
        let bytes = mux(&header(0), &[]);
        for bit in 0..6 * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 1 << (bit % 8);
            assert!(matches!(
                demux(&b),
                Err(Error::BadMagic { .. } | Error::VersionMismatch { .. })
            ));
        }
    }
}
