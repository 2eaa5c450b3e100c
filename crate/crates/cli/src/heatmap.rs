//! Binary PGM heatmaps of 2-D sample histograms.

use std::path::Path;

use anyhow::{ensure, Context, Result};

use mdm_steer::sequence::Sequence;

/// Counts of two-token samples on a `width × height` grid, indexed
/// `[y * width + x]` with `x` the first token.
pub fn histogram_2d(samples: &[Sequence], width: usize, height: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; width * height];
    for s in samples {
        let t = s.tokens();
        ensure!(t.len() == 2, "heatmaps need two-token samples, got length {}", t.len());
        let (x, y) = (t[0] as usize, t[1] as usize);
        ensure!(x < width && y < height, "sample {s} lies outside the {width}x{height} grid");
        counts[y * width + x] += 1;
    }
    Ok(counts)
}

/// 8-bit pixels scaled so the largest count maps to 255. An all-zero
/// histogram gives an all-zero image.
pub fn normalize(hist: &[u64]) -> Vec<u8> {
    let max = hist.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0; hist.len()];
    }
    hist.iter().map(|&c| ((c as f64 / max as f64) * 255.0).round() as u8).collect()
}

/// Writes a binary `P5` PGM, row-major.
pub fn write_heatmap(hist: &[u64], width: usize, height: usize, path: &Path) -> Result<()> {
    ensure!(hist.len() == width * height, "histogram has {} cells, expected {width}x{height}", hist.len());
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(normalize(hist));
    std::fs::write(path, out).with_context(|| format!("writing heatmap {}", path.display()))
}
