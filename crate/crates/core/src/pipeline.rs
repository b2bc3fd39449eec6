//! Frame and sequence coding.
//!
//! Encoder: three downsamples to stage 3, a motion-aware context aligned
//! from decoded references, the contextual encoder to stage 4, then
//! coordinates (octree), latent (Laplace) and hyper latent (factorized).
//! Decoder: coordinates, the same context, the latent, contextual decode,
//! attention refinement and three upsamples to the transmitted counts.
//! The encoder obtains its references by running the decoder on its own
//! payloads, so both sides hold identical state.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::cloud::{Coord, FramePointCloud, ParentMap, ScaleLevel};
use crate::container::{self, FramePayload, StreamHeader, FRAME_HEADER_BYTES};
use crate::entropy::{quantize_matrix, EntropyLinks};
use crate::error::{Error, Result};
use crate::geomcodec;
use crate::knn::build_knn;
use crate::model::Model;
use crate::morton;
use crate::nn::{Graph, Matrix, Var};
use crate::par;
use crate::rasched::{build_plan, FrameKind, GofPlan};
use crate::scale::{downsample, upsample};

/// Whether the aligned context is used or replaced by zeros (ablation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ContextMode {
    #[default]
    Aligned,
    Zeroed,
}

/// A reconstructed frame as held in the reference buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFrame {
    pub frame_index: u32,
    /// Stage-0 reconstruction, Morton sorted.
    pub coords: Vec<Coord>,
    /// Stage-3 coordinates with refined features, used by later frames.
    pub level3: ScaleLevel,
}

impl DecodedFrame {
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.frame_index.to_le_bytes());
        for c in self.coords.iter().chain(&self.level3.coords) {
            for v in c {
                h.update(v.to_le_bytes());
            }
        }
        for v in self.level3.feats.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn to_cloud(&self) -> Result<FramePointCloud> {
        FramePointCloud::from_coords(self.frame_index, self.coords.clone())
    }
}

/// Size and estimate bookkeeping of one coded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStats {
    pub frame_index: u32,
    pub kind: FrameKind,
    pub n_points: u32,
    pub header_bytes: usize,
    /// C3 octree, C4 octree, latent, hyper latent.
    pub section_bytes: [usize; 4],
    /// Model code length of the latent.
    pub f4_estimate_bits: f64,
    pub z_estimate_bits: f64,
}

impl FrameStats {
    pub fn from_payload(p: &FramePayload) -> Self {
        Self {
            frame_index: p.frame_index,
            kind: p.kind,
            n_points: p.n_points,
            header_bytes: FRAME_HEADER_BYTES,
            section_bytes: [p.c3.len(), p.c4.len(), p.f4.len(), p.z.len()],
            f4_estimate_bits: f64::NAN,
            z_estimate_bits: f64::NAN,
        }
    }

    pub fn total_bytes(&self) -> usize {
        self.header_bytes + self.section_bytes.iter().sum::<usize>()
    }

    pub fn bpp(&self) -> f64 {
        8.0 * self.total_bytes() as f64 / self.n_points.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFrame {
    pub payload: FramePayload,
    /// The decoder's output for `payload`.
    pub recon: DecodedFrame,
    pub stats: FrameStats,
    /// Context rows; `None` for I-frames.
    pub context: Option<Matrix>,
}

/// Stages 0 through 3 of a frame.
pub fn pyramid(model: &Model, cur: &FramePointCloud) -> Result<Vec<ScaleLevel>> {
    let mut levels = vec![cur.to_level()];
    for block in &model.down {
        let next = downsample(levels.last().unwrap(), block, &model.params)?;
        levels.push(next);
    }
    Ok(levels)
}

fn check_refs(kind: FrameKind, refs: &[&DecodedFrame]) -> Result<()> {
    let want = match kind {
        FrameKind::I => 0,
        FrameKind::P => 1,
        FrameKind::B => 2,
    };
    if refs.len() != want {
        return Err(Error::SchedulingError(format!(
            "{kind:?}-frame needs {want} references, got {}",
            refs.len()
        )));
    }
    Ok(())
}

/// Motion-aware context on `c3` from the decoded references.
pub fn build_context(model: &Model, c3: &[Coord], kind: FrameKind, refs: &[&DecodedFrame], mode: ContextMode) -> Result<Matrix> {
    check_refs(kind, refs)?;
    let cw = model.config.context_width;
    if kind == FrameKind::I || mode == ContextMode::Zeroed {
        return Ok(Matrix::zeros(c3.len(), cw));
    }
    let k = model.config.knn_k;
    let adjs = refs
        .iter()
        .map(|r| build_knn(c3, &r.level3.coords, k))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new(&model.params);
    let cur = model.geo.build(&mut g, c3);
    let mut aligned = Vec::new();
    for (r, adj) in refs.iter().zip(&adjs) {
        let rf = g.constant(r.level3.feats.clone());
        aligned.push(model.fmt.build(&mut g, rf, adj, c3).0);
    }
    let ctx = match aligned[..] {
        [f] => model.fuse.build_single(&mut g, cur, f),
        [f, b] => model.fuse.build_bi(&mut g, cur, f, b).0,
        _ => unreachable!(),
    };
    Ok(g.value(ctx).clone())
}

fn octant_one_hot(coords: &[Coord]) -> Matrix {
    let mut m = Matrix::zeros(coords.len(), 8);
    for (r, &c) in coords.iter().enumerate() {
        m.set(r, morton::octant(c), 1.0);
    }
    m
}

/// Contextual decoder: stage-3 features from the stage-4 latent.
pub fn build_contextual_decode(model: &Model, g: &mut Graph, y_hat: Var, ctx: Var, c3: &[Coord], parent_of: &[usize]) -> Var {
    let up = g.gather_rows(y_hat, parent_of);
    let oh = g.constant(octant_one_hot(c3));
    let x = g.concat_cols(&[up, ctx, oh]);
    model.ctx_dec.apply(g, x)
}

/// Attention refinement against each reference, gated for B-frames.
pub fn build_refine(model: &Model, g: &mut Graph, aligned: Var, c3: &[Coord], refs: &[&DecodedFrame]) -> Result<Var> {
    let k = model.config.ctr_k;
    let mut outs = Vec::new();
    for r in refs {
        let adj = build_knn(c3, &r.level3.coords, k)?;
        let rf = g.constant(r.level3.feats.clone());
        outs.push(model.ctr.build(g, aligned, rf, &adj).0);
    }
    Ok(match outs[..] {
        [] => aligned,
        [f] => f,
        [f, b] => model.ctr_gate.build(g, aligned, f, b),
        _ => unreachable!(),
    })
}

/// Intermediate decoder state of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StageThree {
    pub aligned: Matrix,
    pub refined: Matrix,
}

/// Decoder from the integer latent onward.
pub fn stage_three(model: &Model, c3: &[Coord], y_hat: &Matrix, ctx: &Matrix, refs: &[&DecodedFrame]) -> Result<StageThree> {
    let pm3 = ParentMap::build(c3);
    let mut g = Graph::new(&model.params);
    let y = g.constant(y_hat.clone());
    let cv = g.constant(ctx.clone());
    let aligned = build_contextual_decode(model, &mut g, y, cv, c3, &pm3.parent_of);
    let refined = build_refine(model, &mut g, aligned, c3, refs)?;
    Ok(StageThree {
        aligned: g.value(aligned).clone(),
        refined: g.value(refined).clone(),
    })
}

fn reconstruct(
    model: &Model,
    frame_index: u32,
    c3: Vec<Coord>,
    y_hat: &Matrix,
    ctx: &Matrix,
    refs: &[&DecodedFrame],
    targets: [u32; 3],
) -> Result<DecodedFrame> {
    let st = stage_three(model, &c3, y_hat, ctx, refs)?;
    let level3 = ScaleLevel::new(3, c3, st.refined)?;
    let mut level = level3.clone();
    for (s, &t) in (0..3).rev().zip(&targets) {
        level = upsample(&level, t as usize, &model.up[s], &model.params)?.level;
    }
    Ok(DecodedFrame {
        frame_index,
        coords: level.coords,
        level3,
    })
}

/// Code one frame and return the payload with the decoder's reconstruction.
pub fn encode_frame(
    model: &Model,
    cur: &FramePointCloud,
    kind: FrameKind,
    refs: &[&DecodedFrame],
    mode: ContextMode,
) -> Result<EncodedFrame> {
    check_refs(kind, refs)?;
    let bd = model.config.bit_depth;
    if let Some(c) = cur.coords.iter().find(|c| c.iter().any(|&v| (v as u64) >> bd != 0)) {
        return Err(Error::CoordOutOfRange(c.map(|v| v as i64)));
    }
    let levels = pyramid(model, cur)?;
    let l3 = &levels[3];
    let c3 = &l3.coords;
    let ctx = build_context(model, c3, kind, refs, mode)?;
    let pm3 = ParentMap::build(c3);
    let mut g = Graph::new(&model.params);
    let f3 = g.constant(l3.feats.clone());
    let cv = g.constant(ctx.clone());
    let x = g.concat_cols(&[f3, cv]);
    let f4 = model.ctx_enc.build(&mut g, x, &pm3);
    let c4 = pm3.parents.clone();
    let links = EntropyLinks::new(c3, &c4)?;
    let z = model.entropy.build_hyper(&mut g, f4, &links);
    let y_hat = quantize_matrix(g.value(f4));
    let z_hat = quantize_matrix(g.value(z));
    let (hyper, temporal) = model.entropy.side_rows(&model.params, &z_hat, &ctx, &links);
    let (f4_bytes, _, f4_bits) = model.entropy.encode_latent(&model.params, &y_hat, &hyper, &temporal);
    let (z_bytes, z_bits) = model.entropy.encode_hyper(&model.params, &z_hat);
    let payload = FramePayload {
        frame_index: cur.frame_index,
        kind,
        n_points: cur.len() as u32,
        targets: [levels[2].len() as u32, levels[1].len() as u32, levels[0].len() as u32],
        c3: geomcodec::encode_child_masks(&c4, c3)?,
        c4: geomcodec::encode_coords(&c4, bd - 4)?,
        f4: f4_bytes,
        z: z_bytes,
    };
    let recon = decode_frame(model, &payload, refs, mode)?;
    let mut stats = FrameStats::from_payload(&payload);
    stats.f4_estimate_bits = f4_bits;
    stats.z_estimate_bits = z_bits;
    Ok(EncodedFrame {
        payload,
        recon,
        stats,
        context: (kind != FrameKind::I).then_some(ctx),
    })
}

pub fn decode_frame(model: &Model, payload: &FramePayload, refs: &[&DecodedFrame], mode: ContextMode) -> Result<DecodedFrame> {
    decode_frame_at(model, payload, [0; 4], refs, mode)
}

/// [`decode_frame`] with the file offsets of the four sections, so errors
/// point into the enclosing stream.
pub fn decode_frame_at(
    model: &Model,
    payload: &FramePayload,
    offsets: [usize; 4],
    refs: &[&DecodedFrame],
    mode: ContextMode,
) -> Result<DecodedFrame> {
    decode_inner(model, payload, offsets, refs, mode).map_err(|e| e.in_frame(payload.frame_index))
}

fn decode_inner(
    model: &Model,
    payload: &FramePayload,
    offsets: [usize; 4],
    refs: &[&DecodedFrame],
    mode: ContextMode,
) -> Result<DecodedFrame> {
    check_refs(payload.kind, refs)?;
    let bd = model.config.bit_depth;
    if payload.c4.first().is_some_and(|&d| d as u32 != bd - 4) {
        return Err(Error::decode(offsets[1], "coordinate depth does not match the bit depth"));
    }
    let c4 = geomcodec::decode_coords_at(&payload.c4, offsets[1])?;
    if c4.is_empty() {
        return Err(Error::decode(offsets[1], "frame without points"));
    }
    let c3 = geomcodec::decode_child_masks_at(&payload.c3, offsets[0], &c4)?;
    let [t2, _, t0] = payload.targets;
    if t0 != payload.n_points || (t2 as usize) < c3.len() || t2 as u64 > 8 * c3.len() as u64 {
        return Err(Error::decode(offsets[0], "inconsistent stage counts"));
    }
    let ctx = build_context(model, &c3, payload.kind, refs, mode)?;
    let links = EntropyLinks::new(&c3, &c4)?;
    let z_hat = model.entropy.decode_hyper(&model.params, &payload.z, offsets[3], links.n5)?;
    let (hyper, temporal) = model.entropy.side_rows(&model.params, &z_hat, &ctx, &links);
    let (y_hat, _) = model.entropy.decode_latent(&model.params, &payload.f4, offsets[2], &hyper, &temporal)?;
    reconstruct(model, payload.frame_index, c3, &y_hat, &ctx, refs, payload.targets)
}

/// Output of [`encode_sequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub stream: Vec<u8>,
    pub header_bytes: usize,
    /// In coding order.
    pub frames: Vec<FrameStats>,
    /// Encoder-side reconstructions in display order.
    pub recon: Vec<DecodedFrame>,
}

impl EncodedSequence {
    pub fn total_points(&self) -> u64 {
        self.frames.iter().map(|f| f.n_points as u64).sum()
    }

    pub fn bpp(&self) -> f64 {
        8.0 * self.stream.len() as f64 / self.total_points().max(1) as f64
    }
}

/// Plans of every group of a sequence of `n` frames, with the group start.
pub fn sequence_plans(template: &GofPlan, n: usize) -> Result<Vec<(usize, GofPlan)>> {
    let g = template.gof_size;
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let base = if start == 0 { template.clone() } else { template.reopened()? };
        out.push((start, base.truncate(g.min(n - start))?));
        start += g;
    }
    Ok(out)
}

fn resolve<'b>(buffer: &'b HashMap<usize, DecodedFrame>, start: usize, refs: &[i32]) -> Result<Vec<&'b DecodedFrame>> {
    refs.iter()
        .map(|&r| {
            let idx = start as i64 + r as i64;
            usize::try_from(idx)
                .ok()
                .and_then(|i| buffer.get(&i))
                .ok_or_else(|| Error::SchedulingError(format!("reference {idx} is not in the decoded buffer")))
        })
        .collect()
}

/// Run `code` over every frame in dependency order, stage-parallel inside
/// each group. `code(index, kind, refs)` returns the decoded frame plus a
/// per-frame value. Results come back in coding order.
fn run_schedule<T, F>(plans: &[(usize, GofPlan)], code: F) -> Result<(Vec<T>, Vec<DecodedFrame>)>
where
    T: Send,
    F: Fn(usize, FrameKind, &[&DecodedFrame]) -> Result<(DecodedFrame, T)> + Sync + Send,
{
    let mut buffer: HashMap<usize, DecodedFrame> = HashMap::new();
    let mut out = Vec::new();
    for (start, plan) in plans {
        for stage in plan.parallel_stages()? {
            let results = par::map_slice(&stage, |&f| {
                let refs = resolve(&buffer, *start, &plan.refs[f])?;
                code(start + f, plan.kind[f], &refs)
            });
            for (&f, r) in stage.iter().zip(results) {
                let (frame, v) = r?;
                buffer.insert(start + f, frame);
                out.push(v);
            }
        }
    }
    let mut frames: Vec<(usize, DecodedFrame)> = buffer.into_iter().collect();
    frames.sort_by_key(|e| e.0);
    Ok((out, frames.into_iter().map(|e| e.1).collect()))
}

/// Encode a whole sequence with the random-access schedule.
pub fn encode_sequence(model: &Model, frames: &[FramePointCloud], mode: ContextMode) -> Result<EncodedSequence> {
    let template = build_plan(model.config.gof_size, true)?;
    let plans = sequence_plans(&template, frames.len())?;
    let (coded, recon) = run_schedule(&plans, |i, kind, refs| {
        let mut cur = frames[i].clone();
        cur.frame_index = i as u32;
        let e = encode_frame(model, &cur, kind, refs, mode)?;
        Ok((e.recon.clone(), e))
    })?;
    let header = StreamHeader::for_model(model, frames.len() as u32, &template);
    let payloads: Vec<FramePayload> = coded.iter().map(|e| e.payload.clone()).collect();
    let stream = container::mux(&header, &payloads);
    Ok(EncodedSequence {
        header_bytes: header.byte_len(),
        stream,
        frames: coded.into_iter().map(|e| e.stats).collect(),
        recon,
    })
}

/// Decode a stream produced by [`encode_sequence`] with the same model.
pub fn decode_sequence(model: &Model, stream: &[u8], mode: ContextMode) -> Result<Vec<DecodedFrame>> {
    let demuxed = container::demux(stream)?;
    demuxed.header.check_model(model)?;
    let n = demuxed.header.frame_count as usize;
    let Some(template) = demuxed.header.plan.clone() else {
        return Ok(Vec::new());
    };
    let mut by_index: HashMap<usize, (&FramePayload, [usize; 4])> = HashMap::new();
    for (p, off) in demuxed.frames.iter().zip(&demuxed.offsets) {
        if p.frame_index as usize >= n || by_index.insert(p.frame_index as usize, (p, *off)).is_some() {
            return Err(Error::decode(off[0], format!("unexpected frame index {}", p.frame_index)));
        }
    }
    let plans = sequence_plans(&template, n)?;
    let (_, frames) = run_schedule(&plans, |i, kind, refs| {
        let (p, off) = by_index
            .get(&i)
            .ok_or_else(|| Error::SchedulingError(format!("frame {i} missing from the stream")))?;
        if p.kind != kind {
            return Err(Error::SchedulingError(format!("frame {i} is {:?}, plan says {kind:?}", p.kind)));
        }
        Ok((decode_frame_at(model, p, *off, refs, mode)?, ()))
    })?;
    Ok(frames)
}

/// Stage-3 feature residuals of a P-frame against its true features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureResiduals {
    /// Contextual decoder output minus truth.
    pub aligned: Vec<f64>,
    /// Refined features minus truth.
    pub refined: Vec<f64>,
    /// Nearest reference feature minus truth.
    pub interpolated: Vec<f64>,
}

pub fn variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

/// Code `reference` as an I-frame and `cur` as a P-frame on it, and
/// compare the decoded stage-3 features of `cur` with its encoder features.
pub fn feature_residuals(model: &Model, reference: &FramePointCloud, cur: &FramePointCloud) -> Result<FeatureResiduals> {
    let r = encode_frame(model, reference, FrameKind::I, &[], ContextMode::Aligned)?.recon;
    let e = encode_frame(model, cur, FrameKind::P, &[&r], ContextMode::Aligned)?;
    let truth = pyramid(model, cur)?.swap_remove(3);
    let c3 = &truth.coords;
    let links = EntropyLinks::new(c3, &crate::cloud::coarsen(c3, 1))?;
    let ctx = e.context.clone().unwrap();
    let z_hat = model.entropy.decode_hyper(&model.params, &e.payload.z, 0, links.n5)?;
    let (h, t) = model.entropy.side_rows(&model.params, &z_hat, &ctx, &links);
    let (y_hat, _) = model.entropy.decode_latent(&model.params, &e.payload.f4, 0, &h, &t)?;
    let st = stage_three(model, c3, &y_hat, &ctx, &[&r])?;
    let nn = build_knn(c3, &r.level3.coords, 1)?;
    let diff = |m: &Matrix| -> Vec<f64> { m.data().iter().zip(truth.feats.data()).map(|(a, b)| a - b).collect() };
    let mut interp = Matrix::zeros(c3.len(), truth.feats.cols());
    for i in 0..c3.len() {
        interp.row_mut(i).copy_from_slice(r.level3.feats.row(nn.row(i)[0] as usize));
    }
    Ok(FeatureResiduals {
        aligned: diff(&st.aligned),
        refined: diff(&st.refined),
        interpolated: diff(&interp),
    })
}
