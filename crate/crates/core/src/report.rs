//! CSV and JSON artifacts: bitstream composition, per-frame quality,
//! rate curves and feature-residual histograms.
//!
//! Composition CSV columns: `frame,kind,points,header_bytes,c3_bytes,
//! c4_bytes,f4_bytes,z_bytes,total_bytes,bpp,header_frac,c3_frac,c4_frac,
//! f4_frac,z_frac`. Quality CSV columns: `frame,points,d1_mse,d1_psnr,
//! d2_mse,d2_psnr`. Curve CSV columns: `bpp,psnr`.

use serde::{Serialize, Serializer};

use crate::container::{demux, Demuxed};
use crate::error::{Error, Result};
use crate::pipeline::FrameStats;

pub const SCHEMA: &str = "pcdc-report/1";
pub const BD_RATE_NOTE: &str = "bd-rate: cubic least-squares fit of ln(rate) against PSNR, integrated over the common PSNR range";

/// Stats of every frame of a stream, in file order.
pub fn stream_stats(d: &Demuxed) -> Vec<FrameStats> {
    d.frames.iter().map(FrameStats::from_payload).collect()
}

pub fn composition_csv(frames: &[FrameStats]) -> String {
    let mut s = String::from(
        "frame,kind,points,header_bytes,c3_bytes,c4_bytes,f4_bytes,z_bytes,total_bytes,bpp,header_frac,c3_frac,c4_frac,f4_frac,z_frac\n",
    );
    for f in frames {
        let total = f.total_bytes();
        let frac = |b: usize| b as f64 / total as f64;
        let [c3, c4, f4, z] = f.section_bytes;
        s += &format!(
            "{},{:?},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            f.frame_index,
            f.kind,
            f.n_points,
            f.header_bytes,
            c3,
            c4,
            f4,
            z,
            total,
            f.bpp(),
            frac(f.header_bytes),
            frac(c3),
            frac(c4),
            frac(f4),
            frac(z)
        );
    }
    s
}

/// Composition CSV straight from a stream.
pub fn stream_composition_csv(stream: &[u8]) -> Result<String> {
    Ok(composition_csv(&stream_stats(&demux(stream)?)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameQuality {
    pub frame: u32,
    pub points: usize,
    pub d1_mse: f64,
    #[serde(serialize_with = "db")]
    pub d1_psnr: f64,
    pub d2_mse: f64,
    #[serde(serialize_with = "db")]
    pub d2_psnr: f64,
}

/// PSNR as a number, or `"lossless"` for the infinite sentinel.
fn db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("lossless")
    } else {
        s.serialize_f64(*v)
    }
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        "lossless".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn quality_csv(rows: &[FrameQuality]) -> String {
    let mut s = String::from("frame,points,d1_mse,d1_psnr,d2_mse,d2_psnr\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{}\n",
            r.frame,
            r.points,
            num(r.d1_mse),
            num(r.d1_psnr),
            num(r.d2_mse),
            num(r.d2_psnr)
        );
    }
    s
}

/// Parse a `bpp,psnr` CSV with a header line.
pub fn parse_curve_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("line {}: bad number {s:?}", i + 1)))
        };
        if f.len() < 2 {
            return Err(Error::InvalidConfig(format!("line {}: expected bpp,psnr", i + 1)));
        }
        out.push((parse(f[0])?, parse(f[1])?));
    }
    Ok(out)
}

/// Equal-width histogram over `[lo, hi]`; values outside land in the end bins.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub variance: f64,
}

pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    let bins = bins.max(1);
    let mut counts = vec![0u64; bins];
    let w = (hi - lo) / bins as f64;
    for &v in values {
        let b = if w > 0.0 { ((v - lo) / w).floor() } else { 0.0 };
        counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    Histogram {
        lo,
        hi,
        counts,
        variance: crate::pipeline::variance(values),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResidualReport {
    pub schema: &'static str,
    pub aligned: Histogram,
    pub refined: Histogram,
    pub interpolated: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub frame: u32,
    #[serde(serialize_with = "db")]
    pub random_access_d1: f64,
    #[serde(serialize_with = "db")]
    pub low_delay_d1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceReport {
    pub schema: &'static str,
    pub note: &'static str,
    pub quality: Vec<FrameQuality>,
    pub trace: Vec<TraceRow>,
}

pub fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasched::FrameKind;

    #[test]
    fn fractions_sum_to_one() {
        let f = FrameStats {
            frame_index: 3,
            kind: FrameKind::B,
            n_points: 100,
            header_bytes: 41,
            section_bytes: [10, 5, 70, 3],
            f4_estimate_bits: 0.0,
            z_estimate_bits: 0.0,
        };
        let csv = composition_csv(&[f]);
        let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').skip(10).map(|v| v.parse().unwrap()).collect();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn lossless_psnr_serializes_as_sentinel() {
        let q = FrameQuality {
            frame: 0,
            points: 1,
            d1_mse: 0.0,
            d1_psnr: f64::INFINITY,
            d2_mse: 0.0,
            d2_psnr: f64::INFINITY,
        };
        assert!(to_json(&q).unwrap().contains("\"d1_psnr\": \"lossless\""));
    }

    #[test]
    fn curve_csv_parses() {
        let c = parse_curve_csv("bpp,psnr\n0.1,30\n0.2, 33.5\n\n").unwrap();
        assert_eq!(c, vec![(0.1, 30.0), (0.2, 33.5)]);
    }

    #[test]
    fn histogram_clamps_to_end_bins() {
        let h = histogram(&[-5.0, 0.1, 0.9, 7.0], 2, 0.0, 1.0);
        assert_eq!(h.counts, vec![2, 2]);
    }
}
