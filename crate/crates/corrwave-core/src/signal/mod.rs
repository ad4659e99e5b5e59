//! Raw data model: recordings, segmentation, normalization, labeling.
//!
//! A [`Recording`] is an `[L time points x C channels]` matrix with binary
//! per-point labels. Segmenting it with a `W`-length non-overlapping window
//! yields a [`SegmentSeries`] with `floor(L / W)` segments; the trailing
//! remainder is discarded, never padded. A segment's label for a channel is
//! the max of the point labels inside its window.

pub mod io;

use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations during normalization.
pub const STD_FLOOR: f64 = 1e-8;

/// Raw multi-channel series with per-point channel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    /// `[L, C]` samples in arbitrary amplitude units.
    pub samples: Array2<f32>,
    pub sample_rate_hz: f64,
    pub channel_names: Vec<String>,
    /// `[L, C]` binary labels; 1 marks the seizure state.
    pub point_labels: Array2<u8>,
}

impl Recording {
    /// Build a recording, validating the type invariants.
    pub fn new(
        samples: Array2<f32>,
        sample_rate_hz: f64,
        channel_names: Vec<String>,
        point_labels: Array2<u8>,
    ) -> Result<Self> {
        let (len, channels) = samples.dim();
        if len < 1 || channels < 2 {
            return Err(Error::Shape {
                what: "recording".into(),
                expected: "L >= 1, C >= 2".into(),
                actual: format!("L = {len}, C = {channels}"),
            });
        }
        if channel_names.len() != channels {
            return Err(Error::Shape {
                what: "channel names".into(),
                expected: format!("{channels} names"),
                actual: format!("{} names", channel_names.len()),
            });
        }
        for (i, a) in channel_names.iter().enumerate() {
            if channel_names[..i].contains(a) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate channel name `{a}`"
                )));
            }
        }
        if point_labels.dim() != samples.dim() {
            return Err(Error::Shape {
                what: "point labels".into(),
                expected: format!("{:?}", samples.dim()),
                actual: format!("{:?}", point_labels.dim()),
            });
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "recording samples".into(),
            });
        }
        if point_labels.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(
                "point labels must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            channel_names,
            point_labels,
        })
    }

    /// Recording with all-zero labels.
    pub fn unlabeled(
        samples: Array2<f32>,
        sample_rate_hz: f64,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let labels = Array2::zeros(samples.dim());
        Self::new(samples, sample_rate_hz, channel_names, labels)
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.samples.ncols()
    }
}

/// Non-overlapping `W`-length windows per channel plus segment-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSeries {
    /// `[|S|, W, C]`.
    pub segments: Array3<f32>,
    /// `[|S|, C]` binary labels, max over each window.
    pub segment_labels: Array2<u8>,
    pub window_len: usize,
    pub source_id: String,
}

impl SegmentSeries {
    pub fn num_segments(&self) -> usize {
        self.segments.dim().0
    }

    pub fn channels(&self) -> usize {
        self.segments.dim().2
    }
}

/// Per-channel standardization statistics, kept for the inverse mapping.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationStats {
    pub per_channel_mean: Vec<f64>,
    /// Population standard deviations, floored at [`STD_FLOOR`].
    pub per_channel_std: Vec<f64>,
}

/// Standardize each channel to mean 0, std 1 (population convention).
///
/// Constant channels get a floored std and map to all-zeros; a warning is
/// logged for each.
pub fn normalize_channels(rec: &Recording) -> Result<(Recording, NormalizationStats)> {
    let len = rec.len();
    if len < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalization needs at least 2 time points, got {len}"
        )));
    }
    let channels = rec.channels();
    let n = len as f64;
    let mut means = Vec::with_capacity(channels);
    let mut stds = Vec::with_capacity(channels);
    let mut out = rec.samples.clone();
    for c in 0..channels {
        let col = rec.samples.column(c);
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let mut std = var.sqrt();
        if std < STD_FLOOR {
            log::warn!(
                "channel {} ({}) is constant; normalizing to zeros",
                c,
                rec.channel_names[c]
            );
            std = STD_FLOOR;
        }
        for (dst, &src) in out.column_mut(c).iter_mut().zip(col.iter()) {
            *dst = ((src as f64 - mean) / std) as f32;
        }
        means.push(mean);
        stds.push(std);
    }
    let normalized = Recording {
        samples: out,
        sample_rate_hz: rec.sample_rate_hz,
        channel_names: rec.channel_names.clone(),
        point_labels: rec.point_labels.clone(),
    };
    Ok((
        normalized,
        NormalizationStats {
            per_channel_mean: means,
            per_channel_std: stds,
        },
    ))
}

/// Invert [`normalize_channels`].
pub fn denormalize_channels(rec: &Recording, stats: &NormalizationStats) -> Result<Recording> {
    if stats.per_channel_mean.len() != rec.channels() {
        return Err(Error::Shape {
            what: "normalization stats".into(),
            expected: format!("{} channels", rec.channels()),
            actual: format!("{} channels", stats.per_channel_mean.len()),
        });
    }
    let mut out = rec.samples.clone();
    for c in 0..rec.channels() {
        let mean = stats.per_channel_mean[c];
        let std = stats.per_channel_std[c];
        for v in out.column_mut(c).iter_mut() {
            *v = (*v as f64 * std + mean) as f32;
        }
    }
    Ok(Recording {
        samples: out,
        sample_rate_hz: rec.sample_rate_hz,
        channel_names: rec.channel_names.clone(),
        point_labels: rec.point_labels.clone(),
    })
}

/// Divide a recording into consecutive non-overlapping `W`-length segments.
///
/// `|S| = floor(L / W)`; the trailing `L mod W` samples are discarded.
pub fn segment_recording(rec: &Recording, window_len: usize) -> Result<SegmentSeries> {
    let len = rec.len();
    if window_len == 0 || window_len > len {
        return Err(Error::InvalidWindow {
            window: window_len,
            len,
        });
    }
    let channels = rec.channels();
    let num_segments = len / window_len;
    let mut segments = Array3::zeros((num_segments, window_len, channels));
    for t in 0..num_segments {
        let start = t * window_len;
        segments
            .slice_mut(s![t, .., ..])
            .assign(&rec.samples.slice(s![start..start + window_len, ..]));
    }
    let segment_labels = derive_segment_labels(&rec.point_labels.view(), window_len)?;
    Ok(SegmentSeries {
        segments,
        segment_labels,
        window_len,
        source_id: String::new(),
    })
}

/// Per-window max of point labels: `Y_s[t, i] = max over window t of Y[., i]`.
pub fn derive_segment_labels(
    point_labels: &ndarray::ArrayView2<u8>,
    window_len: usize,
) -> Result<Array2<u8>> {
    let (len, channels) = point_labels.dim();
    if window_len == 0 || window_len > len {
        return Err(Error::InvalidWindow {
            window: window_len,
            len,
        });
    }
    let num_segments = len / window_len;
    let mut labels = Array2::zeros((num_segments, channels));
    for t in 0..num_segments {
        let start = t * window_len;
        for i in 0..channels {
            let any = (start..start + window_len).any(|l| point_labels[[l, i]] == 1);
            labels[[t, i]] = u8::from(any);
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ch{i}")).collect()
    }

    #[test]
    fn normalize_two_point_channel() {
        // Channel [1, 3]: mean 2, population std 1 -> [-1, 1].
        let samples = array![[1.0_f32, 5.0], [3.0, 5.0]];
        let rec = Recording::unlabeled(samples, 100.0, names(2)).unwrap();
        let (norm, stats) = normalize_channels(&rec).unwrap();
        assert!((norm.samples[[0, 0]] + 1.0).abs() < 1e-6);
        assert!((norm.samples[[1, 0]] - 1.0).abs() < 1e-6);
        assert!((stats.per_channel_mean[0] - 2.0).abs() < 1e-12);
        assert!((stats.per_channel_std[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent_on_standardized_noise() {
        let mut rng = crate::rng::stream(11, "test-noise", 0);
        use rand::Rng;
        let raw: Vec<f32> = (0..400).map(|_| rng.random::<f32>() - 0.5).collect();
        let samples = Array2::from_shape_vec((200, 2), raw).unwrap();
        let rec = Recording::unlabeled(samples, 50.0, names(2)).unwrap();
        let (once, _) = normalize_channels(&rec).unwrap();
        let (twice, _) = normalize_channels(&once).unwrap();
        for (a, b) in once.samples.iter().zip(twice.samples.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_maps_to_zeros() {
        let samples = array![[5.0_f32, 1.0], [5.0, 2.0], [5.0, 3.0]];
        let rec = Recording::unlabeled(samples, 10.0, names(2)).unwrap();
        let (norm, stats) = normalize_channels(&rec).unwrap();
        for l in 0..3 {
            assert_eq!(norm.samples[[l, 0]], 0.0);
        }
        assert_eq!(stats.per_channel_std[0], STD_FLOOR);
    }

    #[test]
    fn denormalize_roundtrip() {
        let mut rng = crate::rng::stream(3, "test-denorm", 0);
        use rand::Rng;
        let raw: Vec<f32> = (0..300)
            .map(|_| rng.random::<f32>() * 40.0 + 7.0)
            .collect();
        let samples = Array2::from_shape_vec((100, 3), raw).unwrap();
        let rec = Recording::unlabeled(samples, 50.0, names(3)).unwrap();
        let (norm, stats) = normalize_channels(&rec).unwrap();
        let back = denormalize_channels(&norm, &stats).unwrap();
        for (a, b) in rec.samples.iter().zip(back.samples.iter()) {
            let rel = (a - b).abs() / a.abs().max(1.0);
            assert!(rel < 1e-5, "roundtrip drift {a} vs {b}");
        }
    }

    #[test]
    fn segmentation_floor_and_discard() {
        let samples = Array2::from_shape_fn((10, 2), |(l, c)| (l * 2 + c) as f32);
        let rec = Recording::unlabeled(samples, 10.0, names(2)).unwrap();
        let series = segment_recording(&rec, 3).unwrap();
        assert_eq!(series.num_segments(), 3);
        assert_eq!(series.segments.dim(), (3, 3, 2));
    }

    #[test]
    fn segmentation_shape() {
        let samples = Array2::zeros((8, 2));
        let rec = Recording::unlabeled(samples, 10.0, names(2)).unwrap();
        let series = segment_recording(&rec, 4).unwrap();
        assert_eq!(series.segments.dim(), (2, 4, 2));
    }

    #[test]
    fn segments_match_raw_slices_exactly() {
        let mut rng = crate::rng::stream(5, "test-slices", 0);
        use rand::Rng;
        let raw: Vec<f32> = (0..(23 * 3)).map(|_| rng.random::<f32>()).collect();
        let samples = Array2::from_shape_vec((23, 3), raw).unwrap();
        let rec = Recording::unlabeled(samples.clone(), 10.0, names(3)).unwrap();
        let series = segment_recording(&rec, 5).unwrap();
        assert_eq!(series.num_segments(), 4);
        for t in 0..4 {
            for w in 0..5 {
                for c in 0..3 {
                    assert_eq!(series.segments[[t, w, c]], samples[[t * 5 + w, c]]);
                }
            }
        }
    }

    #[test]
    fn window_longer_than_recording_rejected() {
        let rec = Recording::unlabeled(Array2::zeros((4, 2)), 10.0, names(2)).unwrap();
        assert!(matches!(
            segment_recording(&rec, 5),
            Err(Error::InvalidWindow { window: 5, len: 4 })
        ));
    }

    #[test]
    fn segment_label_is_window_max() {
        let labels = array![[0u8], [0], [1], [0]];
        let labels2 = ndarray::concatenate![ndarray::Axis(1), labels, Array2::zeros((4, 1))];
        let got = derive_segment_labels(&labels2.view(), 4).unwrap();
        assert_eq!(got[[0, 0]], 1);
        assert_eq!(got[[0, 1]], 0);
    }

    #[test]
    fn segment_labels_match_bruteforce() {
        let mut rng = crate::rng::stream(9, "test-labels", 0);
        use rand::Rng;
        let labels = Array2::from_shape_fn((20, 4), |_| u8::from(rng.random::<f32>() < 0.3));
        let got = derive_segment_labels(&labels.view(), 5).unwrap();
        for t in 0..4 {
            for i in 0..4 {
                let mut m = 0;
                for l in t * 5..(t + 1) * 5 {
                    m = m.max(labels[[l, i]]);
                }
                assert_eq!(got[[t, i]], m);
            }
        }
    }

    #[test]
    fn segment_labels_monotone_in_point_labels() {
        let mut rng = crate::rng::stream(13, "test-monotone", 0);
        use rand::Rng;
        let labels = Array2::from_shape_fn((20, 3), |_| u8::from(rng.random::<f32>() < 0.2));
        let base = derive_segment_labels(&labels.view(), 4).unwrap();
        for _ in 0..20 {
            let mut bumped = labels.clone();
            let l = rng.random_range(0..20);
            let i = rng.random_range(0..3);
            bumped[[l, i]] = 1;
            let after = derive_segment_labels(&bumped.view(), 4).unwrap();
            for (a, b) in base.iter().zip(after.iter()) {
                assert!(b >= a);
            }
        }
    }

    #[test]
    fn concatenated_segments_reproduce_prefix() {
        let mut rng = crate::rng::stream(17, "test-partition", 0);
        use rand::Rng;
        let raw: Vec<f32> = (0..(17 * 2)).map(|_| rng.random::<f32>()).collect();
        let samples = Array2::from_shape_vec((17, 2), raw).unwrap();
        let rec = Recording::unlabeled(samples.clone(), 10.0, names(2)).unwrap();
        let series = segment_recording(&rec, 4).unwrap();
        for t in 0..series.num_segments() {
            for w in 0..4 {
                for c in 0..2 {
                    assert_eq!(
                        series.segments[[t, w, c]].to_bits(),
                        samples[[t * 4 + w, c]].to_bits()
                    );
                }
            }
        }
    }
}
