//! Full-image evaluation against ground truth.

use crate::dataio::{bicubic_upsample, DegradedPair};
use crate::error::Result;
use crate::metrics::{psnr, ssim, MetricReport, MetricRow};
use crate::models::Model;

/// Worker cap from `GCFS_THREADS`; 1 when unset or invalid.
pub fn worker_threads() -> usize {
    std::env::var("GCFS_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
pub(crate) fn par_map<I: Sync, O: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(&I) -> O + Sync,
) -> Vec<O> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    })
}

fn score(model: &Model, name: &str, pair: &DegradedPair) -> Result<MetricRow> {
    let (out, padded) = model.infer(&pair.input)?;
    let baseline = match pair.scale() {
        1 => pair.input.clone(),
        s => bicubic_upsample(&pair.input, s)?,
    };
    let s = ssim(&out, &pair.target)?;
    let b = ssim(&baseline, &pair.target)?;
    let mut notes = Vec::new();
    if padded {
        let m = model.config().size_multiple();
        notes.push(format!(
            "mirror-padded to {}x{} and cropped",
            pair.input.width().div_ceil(m) * m,
            pair.input.height().div_ceil(m) * m
        ));
    }
    if s.global_fallback {
        notes.push("ssim global fallback".to_string());
    }
    Ok(MetricRow {
        name: name.to_string(),
        psnr: psnr(&out, &pair.target, 1.0)?,
        ssim: s.value,
        input_psnr: Some(psnr(&baseline, &pair.target, 1.0)?),
        input_ssim: Some(b.value),
        note: notes.join("; "),
    })
}

/// Per-image and mean PSNR/SSIM of `model`, with the degraded input
/// (bicubic-upsampled for SR) as baseline. Images are scored on
/// [`worker_threads`] threads; rows keep input order.
pub fn evaluate(model: &Model, pairs: &[(String, DegradedPair)]) -> Result<MetricReport> {
    let rows = par_map(pairs, worker_threads(), |(name, pair)| {
        score(model, name, pair)
    });
    Ok(MetricReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}
