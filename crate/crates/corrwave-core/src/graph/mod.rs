//! Correlation-graph structure: the coarse prior over segments, per-segment
//! fine graphs sampled around it, the threshold filter, and the raw-data
//! correlation reports.
//!
//! The coarse prior is the mean of per-segment cosine-similarity matrices.
//! A fine graph perturbs the prior entry-wise with a learned Gaussian scale
//! (reparameterized, so gradients flow through the sample) and is then
//! hard-thresholded at `theta1` to enforce sparsity.

pub mod fine;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::signal::SegmentSeries;

/// Subject-level prior adjacency: expected pairwise cosine over segments.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoarsePrior {
    pub a_coarse: Array2<f64>,
}

/// Cosine similarity between two raw columns, in f64.
fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

/// Pairwise cosine-similarity matrix of a segment's channel columns.
///
/// Degenerate (all-zero) columns produce zero rows/columns including the
/// diagonal; non-degenerate diagonals are exactly 1.
pub fn cosine_matrix(segment: &ArrayView2<f32>) -> Array2<f64> {
    let (_, channels) = segment.dim();
    let cols: Vec<Vec<f64>> = (0..channels)
        .map(|c| segment.column(c).iter().map(|&v| v as f64).collect())
        .collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt())
        .collect();
    let mut out = Array2::zeros((channels, channels));
    for i in 0..channels {
        if norms[i] == 0.0 {
            continue;
        }
        out[[i, i]] = 1.0;
        for j in i + 1..channels {
            if norms[j] == 0.0 {
                continue;
            }
            let v = cosine(&cols[i], &cols[j]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Mean of per-segment cosine matrices over all supplied segments.
pub fn coarse_prior(series: &SegmentSeries) -> Result<CoarsePrior> {
    coarse_prior_over(std::iter::once(series))
}

/// Coarse prior pooled over several segment series (e.g. all SSL clips).
pub fn coarse_prior_over<'a>(
    series: impl IntoIterator<Item = &'a SegmentSeries>,
) -> Result<CoarsePrior> {
    let mut sum: Option<Array2<f64>> = None;
    let mut count = 0usize;
    for s in series {
        for t in 0..s.num_segments() {
            let m = cosine_matrix(&s.segments.index_axis(ndarray::Axis(0), t));
            match &mut sum {
                Some(acc) => *acc += &m,
                None => sum = Some(m),
            }
            count += 1;
        }
    }
    let sum = sum.ok_or_else(|| {
        Error::InvalidArgument("coarse prior needs at least one segment".into())
    })?;
    Ok(CoarsePrior {
        a_coarse: sum / count as f64,
    })
}

/// Hard-threshold filter: entries below `theta1` drop to zero.
pub fn threshold_filter(a_fine: &Array2<f64>, theta1: f64) -> Array2<f64> {
    a_fine.mapv(|v| if v >= theta1 { v } else { 0.0 })
}

/// Delayed correlation matrix `B[k2-1, j] = cos(s[t][:, i], s[t+k2][:, j])`
/// for `k2 = 1..=k2_steps`.
pub fn delayed_correlation_matrix(
    series: &SegmentSeries,
    t: usize,
    channel: usize,
    k2_steps: usize,
) -> Result<Array2<f64>> {
    delayed_cosine(&series.segments.view(), t, channel, k2_steps)
}

/// Same as [`delayed_correlation_matrix`] on a raw `[S, W, C]` view.
pub fn delayed_cosine(
    segments: &ndarray::ArrayView3<f32>,
    t: usize,
    channel: usize,
    k2_steps: usize,
) -> Result<Array2<f64>> {
    let (num_segments, _, channels) = segments.dim();
    if channel >= channels {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {channels} channels"
        )));
    }
    if k2_steps == 0 || t + k2_steps > num_segments.saturating_sub(1) {
        return Err(Error::InvalidArgument(format!(
            "anchor t = {t} with K2 = {k2_steps} exceeds {num_segments} segments"
        )));
    }
    let anchor: Vec<f64> = segments
        .index_axis(ndarray::Axis(0), t)
        .column(channel)
        .iter()
        .map(|&v| v as f64)
        .collect();
    let mut out = Array2::zeros((k2_steps, channels));
    for k2 in 1..=k2_steps {
        let seg = segments.index_axis(ndarray::Axis(0), t + k2);
        for j in 0..channels {
            let col: Vec<f64> = seg.column(j).iter().map(|&v| v as f64).collect();
            out[[k2 - 1, j]] = cosine(&anchor, &col);
        }
    }
    Ok(out)
}

/// Mean cosine matrices of two spans and their elementwise difference.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShiftReport {
    pub mean_a: Array2<f64>,
    pub mean_b: Array2<f64>,
    pub difference: Array2<f64>,
}

/// Compare the average correlations of two segment spans.
pub fn correlation_shift_report(
    series_a: &SegmentSeries,
    series_b: &SegmentSeries,
) -> Result<ShiftReport> {
    if series_a.channels() != series_b.channels() {
        return Err(Error::Shape {
            what: "shift report inputs".into(),
            expected: format!("{} channels", series_a.channels()),
            actual: format!("{} channels", series_b.channels()),
        });
    }
    let mean_a = coarse_prior(series_a)?.a_coarse;
    let mean_b = coarse_prior(series_b)?.a_coarse;
    let difference = &mean_a - &mean_b;
    Ok(ShiftReport {
        mean_a,
        mean_b,
        difference,
    })
}

/// Write a matrix as CSV: header row of channel names, float cells.
pub fn write_matrix_csv<W: std::io::Write>(
    writer: W,
    channel_names: &[String],
    matrix: &Array2<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(channel_names)?;
    for row in matrix.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Write the off-diagonal edges of a thresholded adjacency as
/// `i,j,weight` rows. Entries are already zero below the threshold, so
/// every emitted weight is at least `theta1`.
pub fn write_edge_list_csv<W: std::io::Write>(writer: W, a_t: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "weight"])?;
    for ((i, j), &v) in a_t.indexed_iter() {
        if i != j && v != 0.0 {
            w.write_record([i.to_string(), j.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
