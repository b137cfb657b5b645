//! Deterministic stand-in for the embedding extractor, following the same
//! invocation contract. Each image becomes the per-channel means of a 16×16
//! grid of cells (768 values), so spectral edits to an image show up in its
//! features.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use clipflow::feature_store::{write_feature_file, FeatureMatrix};
use clipflow::proxy::RasterImage;

const GRID: usize = 16;

#[derive(Debug, Parser)]
struct Args {
    /// Text file with one image path per line.
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    square_resize: bool,
    /// Cells per side are fixed; this only truncates or zero-pads the output.
    #[arg(long, default_value_t = 3 * GRID * GRID)]
    dim: usize,
}

fn cell_means(img: &RasterImage, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * GRID * GRID);
    for c in 0..3 {
        for gy in 0..GRID {
            for gx in 0..GRID {
                let (x0, x1) = (gx * img.width() / GRID, ((gx + 1) * img.width() / GRID).max(gx * img.width() / GRID + 1));
                let (y0, y1) = (gy * img.height() / GRID, ((gy + 1) * img.height() / GRID).max(gy * img.height() / GRID + 1));
                let mut sum = 0.0;
                for y in y0..y1.min(img.height()) {
                    for x in x0..x1.min(img.width()) {
                        sum += img.get(x, y, c);
                    }
                }
                let n = ((y1.min(img.height()) - y0) * (x1.min(img.width()) - x0)).max(1);
                out.push((sum / n as f64 / 255.0) as f32);
            }
        }
    }
    out.resize(dim, 0.0);
    out
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.mode != "train" && args.mode != "test" {
        eprintln!("--mode must be train or test");
        return ExitCode::FAILURE;
    }
    let list = match fs::read_to_string(&args.images) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot read image list {}: {e}", args.images.display());
            return ExitCode::FAILURE;
        }
    };
    let mut rows = Vec::new();
    let mut skipped = 0;
    for line in list.lines().filter(|l| !l.trim().is_empty()) {
        match RasterImage::load(line.trim().as_ref()) {
            Ok(img) => rows.push(cell_means(&img, args.dim)),
            Err(e) => {
                eprintln!("skipping {line}: {e}");
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        eprintln!("{skipped} image(s) skipped");
    }
    let result = FeatureMatrix::from_rows(&rows).and_then(|m| write_feature_file(&m, &args.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
