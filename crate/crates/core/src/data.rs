//! Synthetic frame-feature datasets, the `AVD1` binary format, a JSON-lines
//! debug export, and deterministic splits.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"AVD1";
pub const DATASET_VERSION: u8 = 1;

/// One video: per-frame features for both modalities plus a multi-hot label vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoExample {
    pub id: String,
    pub video: Tensor,
    pub audio: Tensor,
    pub labels: Vec<f32>,
}

impl VideoExample {
    pub fn num_frames(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn frames(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
        }
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y > 0.5)
            .map(|(k, _)| k)
            .collect()
    }

    /// L2 norm over both modalities together.
    pub fn joint_norm(&self) -> f64 {
        (self.video.l2_norm().powi(2) + self.audio.l2_norm().powi(2)).sqrt()
    }

    /// Same example with `delta` added to each modality.
    pub fn perturbed(&self, dv: &Tensor, da: &Tensor) -> Result<VideoExample> {
        Ok(VideoExample {
            id: self.id.clone(),
            video: self.video.add(dv)?,
            audio: self.audio.add(da)?,
            labels: self.labels.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub examples: Vec<VideoExample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.examples.iter().map(|e| e.num_frames()).max().unwrap_or(0)
    }

    pub fn with_examples(&self, examples: Vec<VideoExample>) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            video_dim: self.video_dim,
            audio_dim: self.audio_dim,
            examples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.examples {
            let t = e.num_frames();
            if e.video.shape() != [t, self.video_dim] || e.audio.shape() != [t, self.audio_dim] {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "video {}: frames {:?}/{:?} do not match dims {}/{}",
                        e.id,
                        e.video.shape(),
                        e.audio.shape(),
                        self.video_dim,
                        self.audio_dim
                    ),
                ));
            }
            if e.labels.len() != self.num_classes || e.label_indices().is_empty() {
                return Err(Error::Contract(format!(
                    "video {} needs a non-empty {}-class label vector",
                    e.id, self.num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub num_videos: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub noise_std: f32,
    /// Standard deviation of the per-class motif entries.
    pub motif_std: f32,
    pub motif_length: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            video_dim: 64,
            audio_dim: 16,
            min_frames: 10,
            max_frames: 30,
            num_videos: 5000,
            min_labels: 1,
            max_labels: 3,
            noise_std: 0.3,
            motif_std: 1.0,
            motif_length: 3,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("video_dim", self.video_dim),
            ("audio_dim", self.audio_dim),
            ("min_frames", self.min_frames),
            ("num_videos", self.num_videos),
            ("min_labels", self.min_labels),
            ("motif_length", self.motif_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.min_frames > self.max_frames {
            return Err(Error::Config("min_frames > max_frames".into()));
        }
        if self.min_labels > self.max_labels || self.max_labels > self.num_classes {
            return Err(Error::Config(format!(
                "label range {}..={} invalid for {} classes",
                self.min_labels, self.max_labels, self.num_classes
            )));
        }
        if self.motif_length > self.min_frames {
            return Err(Error::Config(format!(
                "motif_length {} exceeds min_frames {}",
                self.motif_length, self.min_frames
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite())
            || !(self.motif_std > 0.0 && self.motif_std.is_finite())
        {
            return Err(Error::Config("noise_std must be >= 0 and motif_std > 0".into()));
        }
        Ok(())
    }
}

/// Per-class motifs, `motif_length x dim` for each modality.
#[derive(Clone, Debug)]
pub struct Motifs {
    pub video: Vec<Tensor>,
    pub audio: Vec<Tensor>,
}

pub fn class_motifs(spec: &SyntheticSpec) -> Result<Motifs> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dist = Normal::new(0.0f32, spec.motif_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |dim: usize| -> Tensor {
        let data = (0..spec.motif_length * dim).map(|_| dist.sample(&mut rng)).collect();
        Tensor::new(&[spec.motif_length, dim], data).expect("positive extents")
    };
    let video = (0..spec.num_classes).map(|_| draw(spec.video_dim)).collect();
    let audio = (0..spec.num_classes).map(|_| draw(spec.audio_dim)).collect();
    Ok(Motifs { video, audio })
}

/// Draws non-overlapping start offsets for `count` motifs of length `len`
/// in `t` frames, uniformly over the order of motifs and the free gaps.
fn place_motifs(rng: &mut ChaCha8Rng, t: usize, len: usize, count: usize) -> Option<Vec<usize>> {
    let free = t.checked_sub(len * count)?;
    // Stars and bars: choose `count` gap positions among `free + count` slots.
    let mut slots: Vec<usize> = rand::seq::index::sample(rng, free + count, count).into_vec();
    slots.sort_unstable();
    Some(
        slots
            .iter()
            .enumerate()
            .map(|(i, &s)| s - i + i * len)
            .collect(),
    )
}

/// Generates a dataset: each class owns a fixed motif per modality, and each
/// video embeds the motifs of its labels at random non-overlapping offsets
/// into Gaussian background noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let motifs = class_motifs(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_DA7A_0000_0001);
    let noise = Normal::new(0.0f32, spec.noise_std.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let classes: Vec<usize> = (0..spec.num_classes).collect();
    let mut examples = Vec::with_capacity(spec.num_videos);
    for i in 0..spec.num_videos {
        let t = rng.gen_range(spec.min_frames..=spec.max_frames);
        let mut n_labels = rng.gen_range(spec.min_labels..=spec.max_labels);
        // Only as many motifs as fit in this video.
        n_labels = n_labels.min(t / spec.motif_length).max(1);
        let mut labels: Vec<usize> = classes.choose_multiple(&mut rng, n_labels).copied().collect();
        labels.shuffle(&mut rng);
        let offsets = place_motifs(&mut rng, t, spec.motif_length, n_labels).ok_or_else(|| {
            Error::Config(format!("{n_labels} motifs do not fit in {t} frames"))
        })?;

        let frames = |dim: usize, table: &[Tensor], rng: &mut ChaCha8Rng| -> Tensor {
            let mut data: Vec<f32> = if spec.noise_std > 0.0 {
                (0..t * dim).map(|_| noise.sample(rng)).collect()
            } else {
                vec![0.0; t * dim]
            };
            for (&k, &off) in labels.iter().zip(&offsets) {
                let m = table[k].data();
                for (j, v) in m.iter().enumerate() {
                    data[off * dim + j] += v;
                }
            }
            Tensor::new(&[t, dim], data).expect("positive extents")
        };
        let video = frames(spec.video_dim, &motifs.video, &mut rng);
        let audio = frames(spec.audio_dim, &motifs.audio, &mut rng);
        let mut y = vec![0f32; spec.num_classes];
        for &k in &labels {
            y[k] = 1.0;
        }
        examples.push(VideoExample {
            id: format!("v{i:06}"),
            video,
            audio,
            labels: y,
        });
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        video_dim: spec.video_dim,
        audio_dim: spec.audio_dim,
        examples,
    })
}

/// Encodes the `AVD1` format: magic, `u8` version, `u32` num_videos, K, D_v,
/// D_a; then per video a `u16`-prefixed UTF-8 id, `u32` T, `u16` label count
/// with `u32` label indices, and the `f32` video then audio frames, row-major.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u8(DATASET_VERSION);
    for v in [ds.examples.len(), ds.num_classes, ds.video_dim, ds.audio_dim] {
        w.u32(u32::try_from(v).map_err(|_| Error::Config("header field overflows u32".into()))?);
    }
    for e in &ds.examples {
        let id = e.id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Config(format!("id of {} bytes too long", id.len())))?;
        w.u16(id_len);
        w.bytes(id);
        w.u32(e.num_frames() as u32);
        let labels = e.label_indices();
        w.u16(labels.len() as u16);
        for k in labels {
            w.u32(k as u32);
        }
        w.f32s(e.video.data());
        w.f32s(e.audio.data());
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, expected AVD1".into(),
        });
    }
    let version = r.u8("version")?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = r.u32("num_videos")? as usize;
    let k = r.u32("num_classes")? as usize;
    let dv = r.u32("video_dim")? as usize;
    let da = r.u32("audio_dim")? as usize;
    if k == 0 || dv == 0 || da == 0 {
        return Err(r.err("zero dimension in header"));
    }
    let mut examples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let id_len = r.u16("id length")? as usize;
        let at = r.offset();
        let id = std::str::from_utf8(r.bytes(id_len, "id")?)
            .map_err(|_| Error::Parse {
                offset: at,
                msg: format!("video {i}: id is not UTF-8"),
            })?
            .to_string();
        let at = r.offset();
        let t = r.u32("frame count")? as usize;
        if t == 0 {
            return Err(Error::Parse {
                offset: at,
                msg: format!("video {id}: zero frames"),
            });
        }
        let nl = r.u16("label count")? as usize;
        let mut labels = vec![0f32; k];
        for _ in 0..nl {
            let at = r.offset();
            let l = r.u32("label")? as usize;
            if l >= k {
                return Err(Error::Parse {
                    offset: at,
                    msg: format!("video {id}: label {l} >= {k}"),
                });
            }
            labels[l] = 1.0;
        }
        let video = Tensor::new(&[t, dv], r.f32s(t * dv, "video frames")?)?;
        let audio = Tensor::new(&[t, da], r.f32s(t * da, "audio frames")?)?;
        examples.push(VideoExample {
            id,
            video,
            audio,
            labels,
        });
    }
    if !r.is_at_end() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Dataset {
        num_classes: k,
        video_dim: dv,
        audio_dim: da,
        examples,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

#[derive(Serialize)]
struct JsonVideo<'a> {
    id: &'a str,
    frames: usize,
    labels: Vec<usize>,
    video_dim: usize,
    audio_dim: usize,
    /// base64 of little-endian `f32`, row-major
    video: String,
    audio: String,
}

fn b64_f32(data: &[f32]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

/// One JSON object per line, with base64 feature payloads.
pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for e in &ds.examples {
        let rec = JsonVideo {
            id: &e.id,
            frames: e.num_frames(),
            labels: e.label_indices(),
            video_dim: ds.video_dim,
            audio_dim: ds.audio_dim,
            video: b64_f32(e.video.data()),
            audio: b64_f32(e.audio.data()),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Splits into train/val/test by a seeded permutation. Sizes are
/// `round(n * f_train)`, `round(n * f_val)` and the remainder.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    if fractions.iter().any(|f| *f < 0.0 || !f.is_finite())
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = ds.len();
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let sizes = [n_train, n_val, n - n_train - n_val];
    for (size, frac) in sizes.iter().zip(fractions) {
        if *size == 0 && frac > 0.0 {
            return Err(Error::Empty(format!(
                "split fraction {frac} of {n} videos is empty"
            )));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut it = order.into_iter();
    for (part, size) in parts.iter_mut().zip(sizes) {
        let mut idx: Vec<usize> = it.by_ref().take(size).collect();
        idx.sort_unstable();
        *part = idx.into_iter().map(|i| ds.examples[i].clone()).collect();
    }
    let [a, b, c] = parts;
    Ok([ds.with_examples(a), ds.with_examples(b), ds.with_examples(c)])
}

/// Ids present in a dataset, for disjointness checks.
pub fn ids(ds: &Dataset) -> BTreeSet<&str> {
    ds.examples.iter().map(|e| e.id.as_str()).collect()
}
