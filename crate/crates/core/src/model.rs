//! Two-modality, single-layer multi-head attention classifier.
//!
//! Each modality (video, audio) is projected to `model_dim`, passed through
//! one multi-head scaled dot-product self-attention block, and mean-pooled
//! over time. The two pooled vectors are concatenated and fed to a linear
//! classifier with per-class sigmoid outputs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AAT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Video,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Video, Modality::Audio];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub max_frames: usize,
    pub seed: u64,
    /// Learned positional embeddings added after the input projection.
    pub positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            video_dim: 64,
            audio_dim: 16,
            model_dim: 32,
            num_heads: 8,
            max_frames: 30,
            seed: 1,
            positional: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_classes", self.num_classes),
            ("video_dim", self.video_dim),
            ("audio_dim", self.audio_dim),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Video => self.video_dim,
            Modality::Audio => self.audio_dim,
        }
    }
}

/// Weights of one modality's attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityParams {
    pub w_in: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub pos: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub video: ModalityParams,
    pub audio: ModalityParams,
    pub w_c: Tensor,
    pub b_c: Tensor,
}

impl ModelParams {
    pub fn modality(&self, m: Modality) -> &ModalityParams {
        match m {
            Modality::Video => &self.video,
            Modality::Audio => &self.audio,
        }
    }

    /// All weight tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for mp in [&self.video, &self.audio] {
            out.extend([&mp.w_in, &mp.w_q, &mp.w_k, &mp.w_v]);
            out.extend(mp.pos.as_ref());
        }
        out.push(&self.w_c);
        out.push(&self.b_c);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for mp in [&mut self.video, &mut self.audio] {
            out.extend([&mut mp.w_in, &mut mp.w_q, &mut mp.w_k, &mut mp.w_v]);
            out.extend(mp.pos.as_mut());
        }
        out.push(&mut self.w_c);
        out.push(&mut self.b_c);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape is non-empty")
}

/// Deterministic scaled-uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.model_dim;
    let block = |din: usize, rng: &mut ChaCha8Rng| ModalityParams {
        w_in: uniform(rng, &[din, d], din),
        w_q: uniform(rng, &[d, d], d),
        w_k: uniform(rng, &[d, d], d),
        w_v: uniform(rng, &[d, d], d),
        pos: config
            .positional
            .then(|| uniform(rng, &[config.max_frames, d], d)),
    };
    let video = block(config.video_dim, &mut rng);
    let audio = block(config.audio_dim, &mut rng);
    let w_c = uniform(&mut rng, &[2 * d, config.num_classes], 2 * d);
    Ok(ModelParams {
        video,
        audio,
        w_c,
        b_c: Tensor::zeros(&[1, config.num_classes]),
    })
}

/// Result of one forward pass, with values copied out of the graph.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub probs: Tensor,
    pub logits: Tensor,
    pub attn_video: Tensor,
    pub attn_audio: Tensor,
    /// `num_heads x T x T` per modality.
    pub per_head_video: Tensor,
    pub per_head_audio: Tensor,
}

impl ForwardOutput {
    pub fn attention(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Video => &self.attn_video,
            Modality::Audio => &self.attn_audio,
        }
    }
}

/// Graph nodes holding the model weights.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub video: [NodeId; 4],
    pub video_pos: Option<NodeId>,
    pub audio: [NodeId; 4],
    pub audio_pos: Option<NodeId>,
    pub w_c: NodeId,
    pub b_c: NodeId,
}

impl ParamNodes {
    /// Registers the weights on `g`, as parameter leaves when `trainable`
    /// and as constants otherwise.
    pub fn register(g: &mut Graph, params: &ModelParams, trainable: bool) -> Result<Self> {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let v = &params.video;
        let video = [leaf(&v.w_in)?, leaf(&v.w_q)?, leaf(&v.w_k)?, leaf(&v.w_v)?];
        let video_pos = v.pos.as_ref().map(&mut leaf).transpose()?;
        let a = &params.audio;
        let audio = [leaf(&a.w_in)?, leaf(&a.w_q)?, leaf(&a.w_k)?, leaf(&a.w_v)?];
        let audio_pos = a.pos.as_ref().map(&mut leaf).transpose()?;
        let w_c = leaf(&params.w_c)?;
        let b_c = leaf(&params.b_c)?;
        Ok(Self {
            video,
            video_pos,
            audio,
            audio_pos,
            w_c,
            b_c,
        })
    }

    /// Leaf ids in the same order as [`ModelParams::tensors`].
    pub fn ids(&self) -> Vec<NodeId> {
        let mut out = self.video.to_vec();
        out.extend(self.video_pos);
        out.extend(self.audio);
        out.extend(self.audio_pos);
        out.push(self.w_c);
        out.push(self.b_c);
        out
    }
}

/// Nodes produced by one forward pass inside a larger graph.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub probs: NodeId,
    pub attn_video: NodeId,
    pub attn_audio: NodeId,
    pub heads_video: NodeId,
    pub heads_audio: NodeId,
}

impl ForwardNodes {
    pub fn attention(&self, m: Modality) -> NodeId {
        match m {
            Modality::Video => self.attn_video,
            Modality::Audio => self.attn_audio,
        }
    }

    pub fn output(&self, g: &Graph) -> Result<ForwardOutput> {
        let k = g.value(self.logits).len();
        Ok(ForwardOutput {
            probs: g.value(self.probs).clone().reshape(&[k])?,
            logits: g.value(self.logits).clone().reshape(&[k])?,
            attn_video: g.value(self.attn_video).clone(),
            attn_audio: g.value(self.attn_audio).clone(),
            per_head_video: g.value(self.heads_video).clone(),
            per_head_audio: g.value(self.heads_audio).clone(),
        })
    }
}

struct BlockNodes {
    pooled: NodeId,
    avg_attn: NodeId,
    heads: NodeId,
}

fn attention_block(
    g: &mut Graph,
    config: &ModelConfig,
    weights: [NodeId; 4],
    pos: Option<NodeId>,
    x: NodeId,
) -> Result<BlockNodes> {
    let [w_in, w_q, w_k, w_v] = weights;
    let t = g.value(x).rows_cols().0;
    let mut h = g.matmul(x, w_in)?;
    if let Some(pos) = pos {
        let mut sel = vec![0f32; t * config.max_frames];
        for i in 0..t {
            sel[i * config.max_frames + i] = 1.0;
        }
        let sel = g.constant(Tensor::new(&[t, config.max_frames], sel)?)?;
        let p = g.matmul(sel, pos)?;
        h = g.add(h, p)?;
    }
    let q = g.matmul(h, w_q)?;
    let k = g.matmul(h, w_k)?;
    let v = g.matmul(h, w_v)?;
    let scale = 1.0 / (config.head_dim() as f32).sqrt();
    let heads = g.head_attention(q, k, config.num_heads, scale)?;
    let o = g.head_mix(heads, v)?;
    let pooled = g.mean(o, 0)?;
    let avg_attn = g.mean_heads(heads)?;
    Ok(BlockNodes {
        pooled,
        avg_attn,
        heads,
    })
}

fn check_input(config: &ModelConfig, m: Modality, x: &Tensor) -> Result<usize> {
    let want = config.input_dim(m);
    match x.shape() {
        [t, d] if *d == want && *t >= 1 && *t <= config.max_frames => Ok(*t),
        s => Err(Error::shape(
            "forward",
            format!(
                "{} input {:?}, expected T x {want} with 1 <= T <= {}",
                m.name(),
                s,
                config.max_frames
            ),
        )),
    }
}

/// Appends a forward pass to `g` over already-registered input nodes.
pub fn forward_nodes(
    g: &mut Graph,
    config: &ModelConfig,
    params: &ParamNodes,
    x_video: NodeId,
    x_audio: NodeId,
) -> Result<ForwardNodes> {
    let tv = check_input(config, Modality::Video, g.value(x_video))?;
    let ta = check_input(config, Modality::Audio, g.value(x_audio))?;
    if tv != ta {
        return Err(Error::shape(
            "forward",
            format!("video has {tv} frames, audio has {ta}"),
        ));
    }
    let vb = attention_block(g, config, params.video, params.video_pos, x_video)?;
    let ab = attention_block(g, config, params.audio, params.audio_pos, x_audio)?;
    let z = g.concat(&[vb.pooled, ab.pooled], 1)?;
    let logits = g.matmul(z, params.w_c)?;
    let logits = g.add_row(logits, params.b_c)?;
    let probs = g.sigmoid(logits)?;
    Ok(ForwardNodes {
        logits,
        probs,
        attn_video: vb.avg_attn,
        attn_audio: ab.avg_attn,
        heads_video: vb.heads,
        heads_audio: ab.heads,
    })
}

/// Inference-only forward pass.
pub fn forward(
    x_video: &Tensor,
    x_audio: &Tensor,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let pn = ParamNodes::register(&mut g, params, false)?;
    let xv = g.constant(x_video.clone())?;
    let xa = g.constant(x_audio.clone())?;
    forward_nodes(&mut g, config, &pn, xv, xa)?.output(&g)
}

/// Elementwise mean over the head axis of an `H x T x T` stack.
pub fn average_attention(per_head: &Tensor) -> Result<Tensor> {
    let [h, t, t2] = per_head.shape() else {
        return Err(Error::shape(
            "average_attention",
            format!("expected H x T x T, got {:?}", per_head.shape()),
        ));
    };
    if t != t2 {
        return Err(Error::shape("average_attention", "maps are not square"));
    }
    let n = t * t2;
    let mut acc = vec![0f64; n];
    for chunk in per_head.data().chunks(n) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += f64::from(v);
        }
    }
    let data = acc.into_iter().map(|v| (v / *h as f64) as f32).collect();
    Tensor::new(&[*t, *t2], data)
}

/// Serializes a checkpoint: magic `AAT1`; `u32` num_classes, video_dim,
/// audio_dim, model_dim, num_heads, max_frames; `u64` seed; `u8` positional
/// flag; `u32` tensor count; then each tensor of [`ModelParams::tensors`] as
/// `u8` rank, `u32` extents and `f32` payload. All little-endian.
pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    for v in [
        config.num_classes,
        config.video_dim,
        config.audio_dim,
        config.model_dim,
        config.num_heads,
        config.max_frames,
    ] {
        w.u32(v as u32);
    }
    w.u64(config.seed);
    w.u8(u8::from(config.positional));
    let ts = params.tensors();
    w.u32(ts.len() as u32);
    for t in ts {
        w.tensor(t);
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, expected AAT1".into(),
        });
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32("config")? as usize;
    }
    let seed = r.u64("seed")?;
    let flag_at = r.offset();
    let positional = match r.u8("positional flag")? {
        0 => false,
        1 => true,
        v => {
            return Err(Error::Parse {
                offset: flag_at,
                msg: format!("positional flag {v}"),
            })
        }
    };
    let config = ModelConfig {
        num_classes: dims[0],
        video_dim: dims[1],
        audio_dim: dims[2],
        model_dim: dims[3],
        num_heads: dims[4],
        max_frames: dims[5],
        seed,
        positional,
    };
    config.validate().map_err(|e| r.err(e.to_string()))?;
    let mut expected = init_shapes(&config);
    let count_at = r.offset();
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Parse {
            offset: count_at,
            msg: format!("{count} tensors, expected {}", expected.len()),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, shape) in expected.drain(..).enumerate() {
        let at = r.offset();
        let t = r.tensor("weight")?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Parse {
                offset: at,
                msg: format!("tensor {i} has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        if !t.is_finite() {
            return Err(Error::Parse {
                offset: at,
                msg: format!("tensor {i} has non-finite entries"),
            });
        }
        tensors.push(t);
    }
    if !r.is_at_end() {
        return Err(r.err("trailing bytes"));
    }
    let mut it = tensors.into_iter();
    let block = |it: &mut std::vec::IntoIter<Tensor>| ModalityParams {
        w_in: it.next().unwrap(),
        w_q: it.next().unwrap(),
        w_k: it.next().unwrap(),
        w_v: it.next().unwrap(),
        pos: if positional { it.next() } else { None },
    };
    let video = block(&mut it);
    let audio = block(&mut it);
    let w_c = it.next().unwrap();
    let b_c = it.next().unwrap();
    Ok((
        config,
        ModelParams {
            video,
            audio,
            w_c,
            b_c,
        },
    ))
}

fn init_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let d = config.model_dim;
    let mut out = Vec::new();
    for din in [config.video_dim, config.audio_dim] {
        out.extend([vec![din, d], vec![d, d], vec![d, d], vec![d, d]]);
        if config.positional {
            out.push(vec![config.max_frames, d]);
        }
    }
    out.push(vec![2 * d, config.num_classes]);
    out.push(vec![1, config.num_classes]);
    out
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(config, params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    decode_checkpoint(&fs::read(path)?)
}
