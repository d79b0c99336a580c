//! C ABI over the `aart` core library.
//!
//! Datasets and models cross the boundary as opaque handles created by the
//! `*_generate`, `*_read`, `*_load` and `aart_train` functions and released
//! with the matching `*_free`. Every fallible function returns an
//! [`AartStatus`]; on failure a description is available from
//! [`aart_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aart::data::{self, Dataset, SyntheticSpec, VideoExample};
use aart::eval::evaluate;
use aart::losses::fgsm_perturbation;
use aart::model::{self, ModelConfig, ModelParams};
use aart::training::{train, TrainConfig};
use aart::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AartStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    NonFinite = 6,
    Empty = 7,
    Panic = 8,
}

/// Dataset handle.
pub struct AartDataset(Dataset);

/// Model handle: architecture plus weights.
pub struct AartModel {
    config: ModelConfig,
    params: ModelParams,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AartSyntheticSpec {
    pub num_classes: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub num_videos: usize,
    pub min_labels: usize,
    pub max_labels: usize,
    pub noise_std: f32,
    pub motif_std: f32,
    pub motif_length: usize,
    pub seed: u64,
}

impl From<AartSyntheticSpec> for SyntheticSpec {
    fn from(s: AartSyntheticSpec) -> Self {
        SyntheticSpec {
            num_classes: s.num_classes,
            video_dim: s.video_dim,
            audio_dim: s.audio_dim,
            min_frames: s.min_frames,
            max_frames: s.max_frames,
            num_videos: s.num_videos,
            min_labels: s.min_labels,
            max_labels: s.max_labels,
            noise_std: s.noise_std,
            motif_std: s.motif_std,
            motif_length: s.motif_length,
            seed: s.seed,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AartMetrics {
    pub gap: f64,
    pub perr: f64,
    pub hit_at_1: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AartStatus {
    match e {
        Error::Shape { .. } => AartStatus::Shape,
        Error::NonFinite { .. } | Error::Divergence { .. } => AartStatus::NonFinite,
        Error::Parse { .. } | Error::UnsupportedVersion(_) | Error::Json(_) => AartStatus::Parse,
        Error::Io(_) => AartStatus::Io,
        Error::Empty(_) => AartStatus::Empty,
        Error::Contract(_) | Error::Config(_) => AartStatus::InvalidArgument,
    }
}

struct Fail(AartStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AartStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(AartStatus::InvalidArgument, msg.into())
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> AartStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AartStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AartStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f32, len: usize, what: &str) -> Result<&'a mut [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aart_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aart_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn aart_synthetic_spec_default() -> AartSyntheticSpec {
    let s = SyntheticSpec::default();
    AartSyntheticSpec {
        num_classes: s.num_classes,
        video_dim: s.video_dim,
        audio_dim: s.audio_dim,
        min_frames: s.min_frames,
        max_frames: s.max_frames,
        num_videos: s.num_videos,
        min_labels: s.min_labels,
        max_labels: s.max_labels,
        noise_std: s.noise_std,
        motif_std: s.motif_std,
        motif_length: s.motif_length,
        seed: s.seed,
    }
}

/// # Safety
/// `spec` must point to a valid spec and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_generate(
    spec: *const AartSyntheticSpec,
    out: *mut *mut AartDataset,
) -> AartStatus {
    guard(|| {
        let spec = SyntheticSpec::from(*as_ref(spec, "spec")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = data::generate_synthetic(&spec)?;
        put(out, Box::into_raw(Box::new(AartDataset(ds))), "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_read(path: *const c_char, out: *mut *mut AartDataset) -> AartStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = data::read_dataset(&path)?;
        put(out, Box::into_raw(Box::new(AartDataset(ds))), "out")
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_write(ds: *const AartDataset, path: *const c_char) -> AartStatus {
    guard(|| {
        let ds = as_ref(ds, "dataset")?;
        data::write_dataset(&ds.0, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of videos, classes and per-frame feature sizes.
///
/// # Safety
/// `ds` must be a live handle; each out pointer may be NULL to skip it.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_dims(
    ds: *const AartDataset,
    num_videos: *mut usize,
    num_classes: *mut usize,
    video_dim: *mut usize,
    audio_dim: *mut usize,
) -> AartStatus {
    guard(|| {
        let ds = &as_ref(ds, "dataset")?.0;
        for (p, v) in [
            (num_videos, ds.len()),
            (num_classes, ds.num_classes),
            (video_dim, ds.video_dim),
            (audio_dim, ds.audio_dim),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Frame count of video `index`.
///
/// # Safety
/// `ds` must be a live handle and `frames` writable.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_frames(ds: *const AartDataset, index: usize, frames: *mut usize) -> AartStatus {
    guard(|| {
        let e = example(as_ref(ds, "dataset")?, index)?;
        put(frames, e.num_frames(), "frames")
    })
}

fn example(ds: &AartDataset, index: usize) -> Result<&VideoExample, Fail> {
    ds.0
        .examples
        .get(index)
        .ok_or_else(|| invalid(format!("index {index} out of range for {} videos", ds.0.len())))
}

fn copy_into(dst: &mut [f32], src: &[f32], what: &str) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(invalid(format!("{what} buffer holds {} values, need {}", dst.len(), src.len())));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Copies video `index` into caller buffers: `frames * video_dim` video
/// features, `frames * audio_dim` audio features and the `num_classes`
/// multi-hot label vector, all row-major.
///
/// # Safety
/// Buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_example(
    ds: *const AartDataset,
    index: usize,
    video: *mut f32,
    video_len: usize,
    audio: *mut f32,
    audio_len: usize,
    labels: *mut f32,
    labels_len: usize,
) -> AartStatus {
    guard(|| {
        let e = example(as_ref(ds, "dataset")?, index)?;
        copy_into(slice_mut(video, video_len, "video")?, e.video.data(), "video")?;
        copy_into(slice_mut(audio, audio_len, "audio")?, e.audio.data(), "audio")?;
        copy_into(slice_mut(labels, labels_len, "labels")?, &e.labels, "labels")
    })
}

/// Seeded train/val/test split; three new handles are returned.
///
/// # Safety
/// `ds` must be a live handle, `fractions` three doubles, outs writable.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_split(
    ds: *const AartDataset,
    fractions: *const f64,
    seed: u64,
    train_out: *mut *mut AartDataset,
    val_out: *mut *mut AartDataset,
    test_out: *mut *mut AartDataset,
) -> AartStatus {
    guard(|| {
        let ds = as_ref(ds, "dataset")?;
        if fractions.is_null() {
            return Err(null("fractions"));
        }
        if train_out.is_null() || val_out.is_null() || test_out.is_null() {
            return Err(null("output handle"));
        }
        let f = std::slice::from_raw_parts(fractions, 3);
        let [a, b, c] = data::split(&ds.0, [f[0], f[1], f[2]], seed)?;
        train_out.write(Box::into_raw(Box::new(AartDataset(a))));
        val_out.write(Box::into_raw(Box::new(AartDataset(b))));
        test_out.write(Box::into_raw(Box::new(AartDataset(c))));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn aart_dataset_free(ds: *mut AartDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aart_model_load(path: *const c_char, out: *mut *mut AartModel) -> AartStatus {
    guard(|| {
        let path = path_arg(path)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (config, params) = model::load_checkpoint(&path)?;
        put(out, Box::into_raw(Box::new(AartModel { config, params })), "out")
    })
}

/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aart_model_save(m: *const AartModel, path: *const c_char) -> AartStatus {
    guard(|| {
        let m = as_ref(m, "model")?;
        model::save_checkpoint(&path_arg(path)?, &m.config, &m.params)?;
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle; each out pointer may be NULL to skip it.
#[no_mangle]
pub unsafe extern "C" fn aart_model_dims(
    m: *const AartModel,
    num_classes: *mut usize,
    video_dim: *mut usize,
    audio_dim: *mut usize,
    max_frames: *mut usize,
) -> AartStatus {
    guard(|| {
        let c = &as_ref(m, "model")?.config;
        for (p, v) in [
            (num_classes, c.num_classes),
            (video_dim, c.video_dim),
            (audio_dim, c.audio_dim),
            (max_frames, c.max_frames),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Trains a model on `train_set`, early-stopping on `val_set`. `config` is
/// optional `key = value` text with the same keys as the CLI config file.
///
/// # Safety
/// Handles must be live; `config` NULL or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aart_train(
    train_set: *const AartDataset,
    val_set: *const AartDataset,
    config: *const c_char,
    out: *mut *mut AartModel,
) -> AartStatus {
    guard(|| {
        let tr = as_ref(train_set, "train_set")?;
        let va = as_ref(val_set, "val_set")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = TrainConfig::default();
        if !config.is_null() {
            let text = CStr::from_ptr(config)
                .to_str()
                .map_err(|_| invalid("config is not valid UTF-8"))?;
            cfg.apply_kv_text(text)?;
        }
        let res = train(&cfg, &tr.0, &va.0)?;
        put(
            out,
            Box::into_raw(Box::new(AartModel {
                config: res.config,
                params: res.params,
            })),
            "out",
        )
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn aart_model_free(m: *mut AartModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

fn frames_to_tensors(
    cfg: &ModelConfig,
    video: &[f32],
    audio: &[f32],
    frames: usize,
) -> Result<(Tensor, Tensor), Fail> {
    if frames == 0 {
        return Err(invalid("frames must be >= 1"));
    }
    let v = Tensor::new(&[frames, cfg.video_dim], video.to_vec())?;
    let a = Tensor::new(&[frames, cfg.audio_dim], audio.to_vec())?;
    Ok((v, a))
}

/// Class probabilities of one video. `video` holds `frames * video_dim`
/// floats, `audio` holds `frames * audio_dim`, `probs` receives
/// `num_classes`.
///
/// # Safety
/// Buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn aart_model_forward(
    m: *const AartModel,
    video: *const f32,
    audio: *const f32,
    frames: usize,
    probs: *mut f32,
    probs_len: usize,
) -> AartStatus {
    guard(|| {
        let m = as_ref(m, "model")?;
        let c = &m.config;
        let vs = slice(video, frames * c.video_dim, "video")?;
        let as_ = slice(audio, frames * c.audio_dim, "audio")?;
        let (v, a) = frames_to_tensors(c, vs, as_, frames)?;
        let out = model::forward(&v, &a, &m.params, c)?;
        copy_into(slice_mut(probs, probs_len, "probs")?, out.probs.data(), "probs")
    })
}

/// FGSM perturbation of one video against the model: each modality's
/// perturbation has L2 norm `epsilon` unless its loss gradient vanishes.
///
/// # Safety
/// Buffers must hold `frames * dim` floats per modality and `num_classes`
/// labels.
#[no_mangle]
pub unsafe extern "C" fn aart_fgsm(
    m: *const AartModel,
    video: *const f32,
    audio: *const f32,
    frames: usize,
    labels: *const f32,
    epsilon: f32,
    r_video: *mut f32,
    r_audio: *mut f32,
) -> AartStatus {
    guard(|| {
        let m = as_ref(m, "model")?;
        let c = &m.config;
        let (v, a) = frames_to_tensors(
            c,
            slice(video, frames * c.video_dim, "video")?,
            slice(audio, frames * c.audio_dim, "audio")?,
            frames,
        )?;
        let example = VideoExample {
            id: String::new(),
            video: v,
            audio: a,
            labels: slice(labels, c.num_classes, "labels")?.to_vec(),
        };
        let r = fgsm_perturbation(&example, &m.params, c, epsilon)?;
        copy_into(slice_mut(r_video, frames * c.video_dim, "r_video")?, r.video.data(), "r_video")?;
        copy_into(slice_mut(r_audio, frames * c.audio_dim, "r_audio")?, r.audio.data(), "r_audio")
    })
}

/// GAP, PERR and Hit@1 of the model on `ds`, FGSM-perturbed at `epsilon`
/// when it is positive.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aart_evaluate(
    m: *const AartModel,
    ds: *const AartDataset,
    epsilon: f32,
    out: *mut AartMetrics,
) -> AartStatus {
    guard(|| {
        let m = as_ref(m, "model")?;
        let ds = as_ref(ds, "dataset")?;
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        let summary = if epsilon > 0.0 {
            let adv = aart::attack::make_adversarial_testset(&ds.0, &m.params, &m.config, epsilon)?;
            evaluate(&adv, &m.params, &m.config)?
        } else {
            evaluate(&ds.0, &m.params, &m.config)?
        };
        put(
            out,
            AartMetrics {
                gap: summary.gap,
                perr: summary.perr,
                hit_at_1: summary.hit_at_1,
            },
            "out",
        )
    })
}
