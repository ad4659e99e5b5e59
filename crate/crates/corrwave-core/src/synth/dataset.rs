//! Dataset bundles: directories of per-clip `mbrn` files plus a JSON manifest.
//!
//! Each clip derives its own random stream from `(dataset seed, clip index)`,
//! so generation is a pure function of the config regardless of worker count
//! or ordering.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::signal::io::{load_recording, save_recording, RecordingFormat};
use crate::signal::{derive_segment_labels, Recording};
use crate::synth::{generate_background, inject_events, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Ssl,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Ssl, Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Ssl => "ssl",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// How many clips land in each split, and the test class ratio.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub ssl_clips: usize,
    /// Labeled pool, divided by `train_fraction` into train/val.
    pub labeled_clips: usize,
    pub train_fraction: f64,
    pub test_clips: usize,
    /// `(positive, negative)` ratio enforced exactly in the test split.
    pub test_pos_neg: (usize, usize),
    /// Positive-clip fraction in the labeled pool.
    pub labeled_positive_fraction: f64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::InvalidArgument(format!(
                "train fraction must be in [0, 1], got {}",
                self.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.labeled_positive_fraction) {
            return Err(Error::InvalidArgument(format!(
                "labeled positive fraction must be in [0, 1], got {}",
                self.labeled_positive_fraction
            )));
        }
        let (p, n) = self.test_pos_neg;
        if p == 0 || n == 0 {
            return Err(Error::InvalidArgument(
                "test pos:neg ratio parts must be positive".into(),
            ));
        }
        if self.test_clips % (p + n) != 0 {
            let achievable = self.test_clips / (p + n) * (p + n);
            return Err(Error::Infeasible(format!(
                "test ratio {p}:{n} cannot be met exactly with {} clips; \
                 largest feasible count is {achievable}",
                self.test_clips
            )));
        }
        if self.test_clips > 0 && self.test_clips / (p + n) * p == 0 {
            return Err(Error::Infeasible(format!(
                "test ratio {p}:{n} yields zero positive clips for {} clips",
                self.test_clips
            )));
        }
        Ok(())
    }

    pub fn train_clips(&self) -> usize {
        (self.labeled_clips as f64 * self.train_fraction).round() as usize
    }

    pub fn val_clips(&self) -> usize {
        self.labeled_clips - self.train_clips()
    }

    pub fn test_positives(&self) -> usize {
        let (p, n) = self.test_pos_neg;
        self.test_clips / (p + n) * p
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub file: String,
    pub split: Split,
    pub positive: bool,
    /// Count of positive `(segment, channel)` cells at the manifest window.
    pub positive_cells: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub subject_id: String,
    pub dataset_seed: u64,
    pub window_len: usize,
    pub clip_len: usize,
    pub channels: usize,
    pub sample_rate_hz: f64,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn clip_ids(&self, split: Split) -> Vec<&str> {
        self.clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id.as_str())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.clips.iter().filter(|c| c.split == split).count()
    }
}

fn generate_clip(base: &SynthConfig, clip_seed: u64, positive: bool) -> Result<Recording> {
    let mut cfg = base.clone();
    cfg.seed = clip_seed;
    cfg.event_count = if positive { base.event_count.max(1) } else { 0 };
    let bg = generate_background(&cfg)?;
    if positive {
        inject_events(&bg, &cfg)
    } else {
        Ok(bg)
    }
}

/// Generate and persist a full SSL/train/val/test bundle under `out_dir`.
///
/// `cfg.length` is the clip length; `cfg.event_count` the bursts per
/// positive clip. The test split carries exactly the requested class ratio.
pub fn build_dataset(
    cfg: &SynthConfig,
    split: &SplitSpec,
    window_len: usize,
    subject_id: &str,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    split.validate()?;
    if window_len == 0 || window_len > cfg.length {
        return Err(Error::InvalidWindow {
            window: window_len,
            len: cfg.length,
        });
    }
    let clips_dir = out_dir.join("clips");
    fs::create_dir_all(&clips_dir)?;

    // Deterministic split-sequence layout: clip index -> (split, positive).
    let mut layout: Vec<(Split, bool)> = Vec::new();
    for i in 0..split.ssl_clips {
        // SSL clips are unlabeled in use, but ~half carry events so the
        // pretext tasks see both regimes.
        layout.push((Split::Ssl, i % 2 == 0));
    }
    let train = split.train_clips();
    for i in 0..split.labeled_clips {
        let sp = if i < train { Split::Train } else { Split::Val };
        let pos =
            (i as f64 + 0.5) / (split.labeled_clips.max(1) as f64) < split.labeled_positive_fraction;
        layout.push((sp, pos));
    }
    let test_pos = split.test_positives();
    for i in 0..split.test_clips {
        // Spread positives evenly through the test sequence.
        let pos = i % (split.test_clips / test_pos.max(1)).max(1) == 0
            && layout
                .iter()
                .skip(split.ssl_clips + split.labeled_clips)
                .filter(|(_, p)| *p)
                .count()
                < test_pos;
        layout.push((Split::Test, pos));
    }

    let mut clips = Vec::with_capacity(layout.len());
    for (index, &(sp, positive)) in layout.iter().enumerate() {
        let clip_seed = derive_seed(cfg.seed, "clip", index as u64);
        let rec = generate_clip(cfg, clip_seed, positive)?;
        let id = format!("{subject_id}-{}-{index:05}", sp.as_str());
        let file = format!("clips/{id}.mbrn");
        save_recording(&rec, &out_dir.join(&file), RecordingFormat::Mbrn)?;
        let seg_labels = derive_segment_labels(&rec.point_labels.view(), window_len)?;
        let positive_cells = seg_labels.iter().filter(|&&v| v == 1).count();
        clips.push(ClipEntry {
            id,
            file,
            split: sp,
            positive: rec.point_labels.iter().any(|&v| v == 1),
            positive_cells,
            seed: clip_seed,
        });
    }

    let manifest = DatasetManifest {
        subject_id: subject_id.to_string(),
        dataset_seed: cfg.seed,
        window_len,
        clip_len: cfg.length,
        channels: cfg.channels,
        sample_rate_hz: cfg.sample_rate_hz,
        clips,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load all clips of a split as recordings, manifest order.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Recording>> {
    manifest
        .clips
        .iter()
        .filter(|c| c.split == split)
        .map(|c| load_recording(&dir.join(&c.file), RecordingFormat::Mbrn))
        .collect()
}

/// Paths of every clip file in the bundle, manifest order.
pub fn clip_paths(dir: &Path, manifest: &DatasetManifest) -> Vec<PathBuf> {
    manifest.clips.iter().map(|c| dir.join(&c.file)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn base_cfg() -> SynthConfig {
        SynthConfig {
            channels: 3,
            length: 800,
            sample_rate_hz: 250.0,
            event_count: 1,
            event_len_range: (150, 250),
            propagation_delay_per_hop: 60,
            propagation_graph: vec![(0, 1, 1.0)],
            amplitude_boost: 3.0,
            frequency_shift_hz: 10.0,
            seed: 99,
        }
    }

    fn small_split() -> SplitSpec {
        SplitSpec {
            ssl_clips: 4,
            labeled_clips: 5,
            train_fraction: 0.8,
            test_clips: 6,
            test_pos_neg: (1, 2),
            labeled_positive_fraction: 0.4,
        }
    }

    #[test]
    fn split_counts_match_ratios() {
        let spec = SplitSpec {
            ssl_clips: 0,
            labeled_clips: 1000,
            train_fraction: 0.8,
            test_clips: 510,
            test_pos_neg: (1, 50),
            labeled_positive_fraction: 0.5,
        };
        spec.validate().unwrap();
        assert_eq!(spec.train_clips(), 800);
        assert_eq!(spec.val_clips(), 200);
        assert_eq!(spec.test_positives(), 10);
    }

    #[test]
    fn infeasible_ratio_reports_achievable() {
        let spec = SplitSpec {
            test_clips: 500,
            ..small_split()
        };
        let spec = SplitSpec {
            test_pos_neg: (1, 50),
            ..spec
        };
        match spec.validate() {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("459"), "{msg}"),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn bundle_is_disjoint_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&base_cfg(), &small_split(), 200, "subj0", dir.path()).unwrap();
        let ids: HashSet<_> = manifest.clips.iter().map(|c| c.id.clone()).collect();
        assert_eq!(ids.len(), manifest.clips.len());
        assert_eq!(manifest.count(Split::Ssl), 4);
        assert_eq!(manifest.count(Split::Train), 4);
        assert_eq!(manifest.count(Split::Val), 1);
        assert_eq!(manifest.count(Split::Test), 6);
        let test_pos = manifest
            .clips
            .iter()
            .filter(|c| c.split == Split::Test && c.positive)
            .count();
        assert_eq!(test_pos, 2);

        let dir2 = tempfile::tempdir().unwrap();
        let manifest2 =
            build_dataset(&base_cfg(), &small_split(), 200, "subj0", dir2.path()).unwrap();
        assert_eq!(manifest, manifest2);
        for clip in &manifest.clips {
            let a = std::fs::read(dir.path().join(&clip.file)).unwrap();
            let b = std::fs::read(dir2.path().join(&clip.file)).unwrap();
            assert_eq!(a, b, "clip bytes differ for {}", clip.id);
        }
    }

    #[test]
    fn positive_flags_match_labels() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&base_cfg(), &small_split(), 200, "s", dir.path()).unwrap();
        for clip in &manifest.clips {
            let rec = load_recording(&dir.path().join(&clip.file), RecordingFormat::Mbrn).unwrap();
            let has_pos = rec.point_labels.iter().any(|&v| v == 1);
            assert_eq!(has_pos, clip.positive, "clip {}", clip.id);
        }
    }
}
