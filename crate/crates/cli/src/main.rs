//! `pcdc`: encode, decode and evaluate dynamic point-cloud sequences.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcdc_core::align::{FmtParams, FuseParams};
use pcdc_core::cloud::{CodecConfig, Coord, LAMBDAS};
use pcdc_core::container::demux;
use pcdc_core::ctr::CtrParams;
use pcdc_core::geomcodec::{decode_coords, encode_coords};
use pcdc_core::knn::build_knn;
use pcdc_core::metrics::{bd_rate, d1_mse, d1_psnr, d2_mse, d2_psnr, format_psnr};
use pcdc_core::nn::{grad_check_with, GradCheckOptions, LinearLayer, Matrix, Mlp, ParamSet};
use pcdc_core::ply::{read_ply, write_ply};
use pcdc_core::prob::laplace_pmf;
use pcdc_core::rangecoder::{CdfTable, RangeDecoder, RangeEncoder, PROB_TOTAL};
use pcdc_core::rasched::{build_low_delay_plan, build_plan};
use pcdc_core::report::{parse_curve_csv, quality_csv, stream_composition_csv, FrameQuality};
use pcdc_core::train::{train_overfit, TrainOptions};
use pcdc_core::{decode_sequence, encode_sequence, morton, par, voxelize, ContextMode, FramePointCloud, Model};

#[derive(Parser)]
#[command(name = "pcdc", version, about = "Learned dynamic point-cloud geometry codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Code a numbered PLY sequence into one stream.
    Encode {
        /// Frame path pattern with a printf-style index, e.g. seq_%04d.ply.
        #[arg(long)]
        input: String,
        #[arg(long)]
        frames: usize,
        /// Index substituted for the first frame.
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 16)]
        gof: usize,
        #[arg(long, default_value_t = 15.0, value_parser = parse_lambda)]
        lambda: f64,
        #[arg(long, default_value_t = 10)]
        bit_depth: u32,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct every frame of a stream as frame_NNNN.ply.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Write binary little-endian PLY instead of ASCII.
        #[arg(long)]
        binary: bool,
    },
    /// Per-frame D1/D2 PSNR of reconstructions against references.
    Metrics {
        #[arg(long)]
        rec: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 1023.0)]
        peak: f64,
        /// Grid the reference points are voxelized onto.
        #[arg(long, default_value_t = 10)]
        bit_depth: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bjontegaard rate difference of curve B against curve A.
    Bdrate {
        #[arg(long)]
        curve_a: PathBuf,
        #[arg(long)]
        curve_b: PathBuf,
    },
    /// Fit weights to one frame pair and save them.
    TrainOverfit {
        #[arg(long)]
        frame_a: PathBuf,
        #[arg(long)]
        frame_b: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 15.0, value_parser = parse_lambda)]
        lambda: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        bit_depth: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame bitstream composition as CSV.
    Report {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient checks, coder round trips and scheduler legality.
    Selftest,
}

fn parse_lambda(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("not a number: {s}"))?;
    if LAMBDAS.contains(&v) {
        Ok(v)
    } else {
        Err(format!("lambda must be one of {LAMBDAS:?}"))
    }
}

/// Substitute `index` for the first `%d` / `%0Nd` in `pattern`.
fn frame_path(pattern: &str, index: usize) -> Result<PathBuf> {
    let Some(at) = pattern.find('%') else {
        bail!("input pattern {pattern:?} has no %d placeholder");
    };
    let rest = &pattern[at + 1..];
    let Some(d) = rest.find('d') else {
        bail!("input pattern {pattern:?} has no %d placeholder");
    };
    let spec = &rest[..d];
    if !spec.chars().all(|c| c.is_ascii_digit()) {
        bail!("unsupported placeholder %{spec}d in {pattern:?}");
    }
    let width: usize = if spec.is_empty() { 0 } else { spec.parse()? };
    let num = if spec.starts_with('0') {
        format!("{index:0width$}")
    } else {
        format!("{index:width$}")
    };
    Ok(PathBuf::from(format!("{}{num}{}", &pattern[..at], &rest[d + 1..])))
}

fn config(gof: usize, lambda: f64, bit_depth: u32) -> CodecConfig {
    CodecConfig {
        gof_size: gof,
        lambda,
        bit_depth,
        peak: ((1u64 << bit_depth) - 1) as f64,
        ..CodecConfig::default()
    }
}

fn load_frame(path: &Path, bit_depth: u32, index: u32) -> Result<FramePointCloud> {
    let pts = read_ply(path).with_context(|| format!("reading {}", path.display()))?;
    let mut f = voxelize(&pts, bit_depth).with_context(|| format!("voxelizing {}", path.display()))?;
    f.frame_index = index;
    Ok(f)
}

fn load_model(cfg: &CodecConfig, weights: &Path) -> Result<Model> {
    Model::load(cfg, weights).with_context(|| format!("loading weights {}", weights.display()))
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ply_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply")))
        .collect();
    v.sort();
    Ok(v)
}

fn encode(
    input: &str,
    frames: usize,
    start: usize,
    cfg: CodecConfig,
    weights: &Path,
    out: &Path,
) -> Result<()> {
    let model = load_model(&cfg, weights)?;
    let seq = (0..frames)
        .map(|i| load_frame(&frame_path(input, start + i)?, cfg.bit_depth, i as u32))
        .collect::<Result<Vec<_>>>()?;
    let t0 = Instant::now();
    let enc = encode_sequence(&model, &seq, ContextMode::Aligned)?;
    fs::write(out, &enc.stream).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "{} frames, {} points, {} bytes ({:.4} bpp) in {:.2?}",
        frames,
        enc.total_points(),
        enc.stream.len(),
        enc.bpp(),
        t0.elapsed()
    );
    Ok(())
}

fn decode(input: &Path, weights: &Path, out_dir: &Path, binary: bool) -> Result<()> {
    let stream = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let header = demux(&stream)?.header;
    let lambda = LAMBDAS.get(header.lambda_index as usize).copied().unwrap_or(15.0);
    let cfg = config(header.gof_size as usize, lambda, header.bit_depth as u32);
    let model = load_model(&cfg, weights)?;
    let t0 = Instant::now();
    let frames = decode_sequence(&model, &stream, ContextMode::Aligned)?;
    fs::create_dir_all(out_dir)?;
    for f in &frames {
        let p = out_dir.join(format!("frame_{:04}.ply", f.frame_index));
        write_ply(&p, &f.coords, binary).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!("decoded {} frames in {:.2?}", frames.len(), t0.elapsed());
    Ok(())
}

fn metrics(rec: &Path, reference: &Path, peak: f64, bit_depth: u32, out: Option<&Path>) -> Result<()> {
    let (rec, reference) = (ply_files(rec)?, ply_files(reference)?);
    if rec.len() != reference.len() || rec.is_empty() {
        bail!("{} reconstructed frames against {} references", rec.len(), reference.len());
    }
    let mut rows = Vec::new();
    for (i, (r, t)) in rec.iter().zip(&reference).enumerate() {
        let r = load_frame(r, bit_depth, i as u32)?.coords;
        let t = load_frame(t, bit_depth, i as u32)?.coords;
        rows.push(FrameQuality {
            frame: i as u32,
            points: t.len(),
            d1_mse: d1_mse(&r, &t)?,
            d1_psnr: d1_psnr(&r, &t, peak)?,
            d2_mse: d2_mse(&r, &t)?,
            d2_psnr: d2_psnr(&r, &t, peak)?,
        });
    }
    let mean = |f: fn(&FrameQuality) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    eprintln!(
        "mean D1 {} dB, D2 {} dB over {} frames",
        format_psnr(mean(|r| r.d1_psnr)),
        format_psnr(mean(|r| r.d2_psnr)),
        rows.len()
    );
    write_text(out, &quality_csv(&rows))
}

fn bdrate(a: &Path, b: &Path) -> Result<()> {
    let read = |p: &Path| -> Result<Vec<(f64, f64)>> {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(parse_curve_csv(&text)?)
    };
    let v = bd_rate(&read(a)?, &read(b)?)?;
    println!("BD-rate {v:+.3}%");
    Ok(())
}

struct TrainArgs<'a> {
    a: &'a Path,
    b: &'a Path,
    steps: usize,
    lambda: f64,
    seed: u64,
    bit_depth: u32,
    out: &'a Path,
}

fn train(t: TrainArgs) -> Result<()> {
    let cfg = CodecConfig {
        seed: t.seed,
        ..config(16, t.lambda, t.bit_depth)
    };
    let a = load_frame(t.a, t.bit_depth, 0)?;
    let b = load_frame(t.b, t.bit_depth, 1)?;
    let mut model = Model::new(&cfg)?;
    let opts = TrainOptions {
        steps: t.steps,
        lambda: t.lambda,
        seed: t.seed,
        ..TrainOptions::default()
    };
    let t0 = Instant::now();
    let r = train_overfit(&mut model, &a, &b, &opts)?;
    model.save(t.out).with_context(|| format!("writing {}", t.out.display()))?;
    eprintln!(
        "{} steps in {:.2?}: bce {:.4} -> {:.4}, rate {:.1} -> {:.1} bits",
        t.steps,
        t0.elapsed(),
        r.initial.bce,
        r.final_terms.bce,
        r.initial.rate,
        r.final_terms.rate
    );
    Ok(())
}

fn features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, depth: u32) -> Vec<Coord> {
    let mut v: Vec<Coord> = (0..n)
        .map(|_| [0; 3].map(|_: u32| rng.gen_range(0..1u32 << depth)))
        .collect();
    morton::sort(&mut v);
    v.dedup();
    v
}

fn grad_checks(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let opts = GradCheckOptions {
        max_per_tensor: Some(16),
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    let mut check = |name, r: pcdc_core::Result<f64>| out.push((name, r.unwrap_or(f64::INFINITY)));
    let x = features(rng, 4, 5);

    let mut ps = ParamSet::new();
    let lin = LinearLayer::new(&mut ps, "lin", 5, 3, 1);
    check("LinearLayer", grad_check_with(|g, v| lin.apply(g, v[0]), &ps, &[x.clone()], &opts));

    let mut ps = ParamSet::new();
    let mlp = Mlp::new(&mut ps, "mlp", &[5, 8, 3], 2);
    check("Mlp", grad_check_with(|g, v| mlp.apply(g, v[0]), &ps, &[x], &opts));

    let cur = random_cloud(rng, 16, 3);
    let refs = random_cloud(rng, 20, 3);
    let adj = build_knn(&cur, &refs, 4).expect("nonempty clouds");
    let rf = features(rng, refs.len(), 4);
    let mut ps = ParamSet::new();
    let fmt = FmtParams::new(&mut ps, "fmt", 4, 2, 8.0, 3);
    check(
        "fmt_align",
        grad_check_with(|g, v| fmt.build(g, v[0], &adj, &cur).0, &ps, &[rf.clone()], &opts),
    );

    let n = cur.len();
    let mut ps = ParamSet::new();
    let fuse = FuseParams::new(&mut ps, "fuse", 4, 3, 4);
    let ins = [features(rng, n, 4), features(rng, n, 4), features(rng, n, 4)];
    check("bi_fuse", grad_check_with(|g, v| fuse.build_bi(g, v[0], v[1], v[2]).0, &ps, &ins, &opts));

    let mut ps = ParamSet::new();
    let ctr = CtrParams::new(&mut ps, "ctr", 4, 2, 3, 5);
    let cadj = build_knn(&cur, &refs, 3).expect("nonempty clouds");
    let q = features(rng, n, 4);
    check(
        "ctr_refine",
        grad_check_with(|g, v| ctr.build(g, v[0], v[1], &cadj).0, &ps, &[q, rf], &opts),
    );
    out
}

fn range_coder_round_trip(rng: &mut ChaCha8Rng) -> bool {
    let tables: Vec<CdfTable> = (0..16)
        .map(|_| {
            let mu = rng.gen_range(-3.0..3.0);
            let sigma = rng.gen_range(0.11..4.0);
            CdfTable::from_probs(&(-24..=24).map(|n| laplace_pmf(n, mu, sigma)).collect::<Vec<_>>())
        })
        .collect();
    let syms: Vec<(usize, usize)> = (0..100_000)
        .map(|_| {
            let t = rng.gen_range(0..tables.len());
            (t, tables[t].find(rng.gen_range(0..PROB_TOTAL)))
        })
        .collect();
    let mut enc = RangeEncoder::new();
    for &(t, s) in &syms {
        enc.encode(&tables[t], s);
    }
    let bytes = enc.finish();
    let mut dec = RangeDecoder::new(&bytes);
    syms.iter().all(|&(t, s)| dec.decode(&tables[t]).ok() == Some(s))
}

fn geometry_round_trip(rng: &mut ChaCha8Rng) -> bool {
    (0..10).all(|_| {
        let n = rng.gen_range(1..=2000);
        let cloud = random_cloud(rng, n, 10);
        encode_coords(&cloud, 10)
            .and_then(|b| decode_coords(&b))
            .is_ok_and(|d| d == cloud)
    })
}

fn scheduler_legality() -> bool {
    let mut size = 2;
    let mut ok = true;
    while size <= 128 {
        for first in [true, false] {
            for plan in [build_plan(size, first), build_low_delay_plan(size, first)] {
                ok &= plan.is_ok_and(|p| p.validate().is_ok() && p.parallel_stages().is_ok());
            }
        }
        size *= 2;
    }
    ok
}

fn selftest() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failed = 0;
    let mut line = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    };
    for (name, err) in grad_checks(&mut rng) {
        line(&format!("grad_check {name}"), err < 1e-4, format!("max relative error {err:.2e}"));
    }
    line("range coder", range_coder_round_trip(&mut rng), "100000 symbols round trip".into());
    line("octree codec", geometry_round_trip(&mut rng), "10 random clouds round trip".into());
    line("scheduler", scheduler_legality(), "plans of size 2..128 legal".into());
    if failed > 0 {
        bail!("{failed} self-test checks failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode {
            input,
            frames,
            start,
            gof,
            lambda,
            bit_depth,
            weights,
            out,
        } => encode(&input, frames, start, config(gof, lambda, bit_depth), &weights, &out),
        Command::Decode {
            input,
            weights,
            out_dir,
            binary,
        } => decode(&input, &weights, &out_dir, binary),
        Command::Metrics {
            rec,
            reference,
            peak,
            bit_depth,
            out,
        } => metrics(&rec, &reference, peak, bit_depth, out.as_deref()),
        Command::Bdrate { curve_a, curve_b } => bdrate(&curve_a, &curve_b),
        Command::TrainOverfit {
            frame_a,
            frame_b,
            steps,
            lambda,
            seed,
            bit_depth,
            out,
        } => train(TrainArgs {
            a: &frame_a,
            b: &frame_b,
            steps,
            lambda,
            seed,
            bit_depth,
            out: &out,
        }),
        Command::Report { stream, out } => {
            let bytes = fs::read(&stream).with_context(|| format!("reading {}", stream.display()))?;
            write_text(out.as_deref(), &stream_composition_csv(&bytes)?)
        }
        Command::Selftest => selftest(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match std::env::var("PCDC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: PCDC_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(2);
            }
        },
        Err(_) => None,
    };
    let result = match threads {
        Some(n) => par::with_threads(n, || run(cli)),
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_patterns() {
        assert_eq!(frame_path("seq_%04d.ply", 7).unwrap(), PathBuf::from("seq_0007.ply"));
        assert_eq!(frame_path("f%d.ply", 12).unwrap(), PathBuf::from("f12.ply"));
        assert!(frame_path("plain.ply", 1).is_err());
        assert!(frame_path("a_%s.ply", 1).is_err());
    }

    #[test]
    fn lambda_must_be_a_trained_point() {
        assert_eq!(parse_lambda("8"), Ok(8.0));
        assert!(parse_lambda("2").is_err());
    }
}
