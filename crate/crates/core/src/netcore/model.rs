use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fam::{fam_on_tape, FamParams, FamVars};
use crate::plane::Image;
use crate::rng::substream;
use crate::spectral::DEFAULT_LOW_FRACTION;
use crate::tensorcore::{conv_output_size, Checkpoint, Tape, Tensor, Var};

/// Label of the bonafide class.
pub const BONAFIDE: usize = 0;
/// Label of the attack class; scores are the probability of this class.
pub const ATTACK: usize = 1;

/// Value subtracted from unit-range pixels before the stem.
const INPUT_CENTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub fam_enabled: bool,
    pub fam_band_fraction: f64,
    pub input_size: usize,
    pub crop_size: usize,
    /// Side and stride of the non-overlapping patch stem.
    pub stem_stride: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            fam_enabled: false,
            fam_band_fraction: DEFAULT_LOW_FRACTION,
            input_size: 200,
            crop_size: 180,
            stem_stride: 4,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad(format!(
                "stage_channels {:?} must be non-empty and positive",
                self.stage_channels
            ));
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!(
                "stage_channels {:?} must be nondecreasing",
                self.stage_channels
            ));
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fam_band_fraction) {
            return bad(format!("fam_band_fraction {} outside [0, 1]", self.fam_band_fraction));
        }
        if self.crop_size == 0 || self.crop_size > self.input_size {
            return bad(format!(
                "crop_size {} must be in 1..={}",
                self.crop_size, self.input_size
            ));
        }
        if self.stem_stride == 0 || !self.crop_size.is_multiple_of(self.stem_stride) {
            return bad(format!(
                "crop_size {} is not a multiple of stem_stride {}",
                self.crop_size, self.stem_stride
            ));
        }
        if self.num_classes != 2 {
            return bad(format!("num_classes must be 2, got {}", self.num_classes));
        }
        Ok(())
    }

    /// Spatial side of each stage's output.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut side = self.crop_size / self.stem_stride;
        let mut out = vec![side];
        for _ in 1..self.stage_channels.len() {
            side = side.div_ceil(2);
            out.push(side);
        }
        out
    }
}

/// Kernel and padding of a stride-2 downsampling conv on a `side`-long
/// input, and of its projection shortcut. Odd sides use 3x3/pad 1 with a
/// 1x1 shortcut; even sides use 4x4/pad 1 with a 2x2 shortcut. Both give
/// `ceil(side / 2)` with no leftover stride remainder.
fn downsample_geometry(side: usize) -> (usize, usize) {
    if side % 2 == 1 {
        (3, 1)
    } else {
        (4, 2)
    }
}

/// Convolution followed by batch normalization. `gamma`/`beta` index the
/// parameters, `running_mean`/`running_var` the buffers.
#[derive(Debug, Clone)]
struct ConvSpec {
    weight: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct BlockSpec {
    conv1: ConvSpec,
    conv2: ConvSpec,
    shortcut: Option<ConvSpec>,
}

#[derive(Debug, Clone)]
struct StageSpec {
    blocks: Vec<BlockSpec>,
    fam: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvSpec,
    stages: Vec<StageSpec>,
    head_weight: usize,
    head_bias: usize,
}

/// Residual CNN: patch stem, residual stages (optionally followed by
/// frequency attention), global average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    /// Normalization running statistics; saved, but not trained.
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
    layout: Layout,
}

/// Batch statistics (training) or running statistics (inference) for
/// the normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const NORM_EPS: f64 = 1e-5;

/// Batch statistics of every normalization layer, averaged over the
/// train-mode passes fed to [`Model::accumulate_norm_stats`].
#[derive(Debug, Clone, Default)]
pub struct NormStats {
    batches: usize,
    /// `(running_mean buffer, Σ mean, Σ var)` per layer.
    sums: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Attention map `[N,1,H,W]` per stage when attention is enabled.
    pub attention: Vec<Var>,
    /// Train mode only: `(running_mean buffer, normalized node)` pairs.
    norm_nodes: Vec<(usize, Var)>,
}

struct Builder<'a, R: Rng> {
    names: Vec<String>,
    params: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn he(&mut self, shape: Vec<usize>, gain: f64) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        Tensor::new(shape, data).expect("init shape")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        out_c: usize,
        in_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> ConvSpec {
        let w = self.he(vec![out_c, in_c, k, k], 1.0);
        let buffer = |b: &mut Self, suffix: &str, v: f64| {
            b.buffer_names.push(format!("{name}.norm.{suffix}"));
            b.buffers.push(Tensor::full(vec![out_c], v));
            b.buffers.len() - 1
        };
        ConvSpec {
            weight: self.push(format!("{name}.weight"), w),
            gamma: self.push(format!("{name}.norm.gamma"), Tensor::full(vec![out_c, 1, 1], gain)),
            beta: self.push(format!("{name}.norm.beta"), Tensor::zeros(vec![out_c, 1, 1])),
            running_mean: buffer(self, "running_mean", 0.0),
            running_var: buffer(self, "running_var", 1.0),
            stride,
            pad,
        }
    }
}

/// Initial normalization scale of the last conv in each residual branch.
const BRANCH_OUT_GAIN: f64 = 0.5;

impl Model {
    /// Builds and initializes a model; initialization draws from the
    /// `init` substream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "init");
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            rng: &mut rng,
        };
        let sizes = cfg.stage_sizes();
        let c0 = cfg.stage_channels[0];
        let s = cfg.stem_stride;
        let stem = b.conv("stem", c0, 1, s, s, 0, 1.0);
        let mut stages = Vec::new();
        let mut in_c = c0;
        let mut side = sizes[0];
        for (si, &out_c) in cfg.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..cfg.blocks_per_stage {
                let prefix = format!("stage{si}.block{bi}");
                let downsample = si > 0 && bi == 0;
                let (conv1, shortcut) = if downsample {
                    let (k, sk) = downsample_geometry(side);
                    let conv1 = b.conv(&format!("{prefix}.conv1"), out_c, in_c, k, 2, 1, 1.0);
                    let proj = b.conv(&format!("{prefix}.proj"), out_c, in_c, sk, 2, 0, 1.0);
                    side = side.div_ceil(2);
                    (conv1, Some(proj))
                } else {
                    let conv1 = b.conv(&format!("{prefix}.conv1"), out_c, in_c, 3, 1, 1, 1.0);
                    let proj = (in_c != out_c).then(|| b.conv(&format!("{prefix}.proj"), out_c, in_c, 1, 1, 0, 1.0));
                    (conv1, proj)
                };
                let conv2 = b.conv(&format!("{prefix}.conv2"), out_c, out_c, 3, 1, 1, BRANCH_OUT_GAIN);
                blocks.push(BlockSpec { conv1, conv2, shortcut });
                in_c = out_c;
            }
            debug_assert_eq!(side, sizes[si]);
            let fam = if cfg.fam_enabled {
                let p = FamParams::new(out_c, side, side, cfg.fam_band_fraction)?;
                Some((
                    b.push(format!("fam{si}.agg_weights"), p.agg_weights),
                    b.push(format!("fam{si}.mask"), p.mask),
                ))
            } else {
                None
            };
            stages.push(StageSpec { blocks, fam });
        }
        let head_w = Normal::new(0.0, (1.0 / in_c as f64).sqrt()).expect("finite std");
        let hw: Vec<f64> = (0..2 * in_c).map(|_| head_w.sample(b.rng)).collect();
        let head_weight = b.push("head.weight".into(), Tensor::new(vec![2, in_c], hw)?);
        let head_bias = b.push("head.bias".into(), Tensor::zeros(vec![2]));
        let layout = Layout {
            stem,
            stages,
            head_weight,
            head_bias,
        };
        let model = Self {
            cfg,
            names: b.names,
            params: b.params,
            buffer_names: b.buffer_names,
            buffers: b.buffers,
            layout,
        };
        model.check_geometry()?;
        Ok(model)
    }

    fn check_geometry(&self) -> Result<()> {
        let mut side = conv_output_size(self.cfg.crop_size, self.cfg.stem_stride, self.cfg.stem_stride, 0)?;
        for stage in &self.layout.stages {
            for block in &stage.blocks {
                let k = self.params[block.conv1.weight].shape()[2];
                let next = conv_output_size(side, k, block.conv1.stride, block.conv1.pad)?;
                if let Some(sc) = &block.shortcut {
                    let ks = self.params[sc.weight].shape()[2];
                    let s2 = conv_output_size(side, ks, sc.stride, sc.pad)?;
                    if s2 != next {
                        return Err(Error::Config(format!("shortcut size {s2} != branch size {next}")));
                    }
                }
                side = next;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// Number of trainable scalars (buffers excluded).
    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Attention parameters of stage `stage`, if attention is enabled.
    pub fn fam_params(&self, stage: usize) -> Option<FamParams> {
        let (a, m) = self.layout.stages.get(stage)?.fam?;
        FamParams::from_parts(self.params[a].clone(), self.params[m].clone()).ok()
    }

    pub fn num_stages(&self) -> usize {
        self.layout.stages.len()
    }

    /// Registers every parameter on `tape` as a gradient leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn conv(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        c: &ConvSpec,
        mode: Mode,
        norms: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, vars[c.weight], c.stride, c.pad)?;
        let z = match mode {
            Mode::Train => {
                let z = tape.normalize_channels(y, NORM_EPS)?;
                norms.push((c.running_mean, z));
                z
            }
            Mode::Eval => {
                let mean = &self.buffers[c.running_mean];
                let var = &self.buffers[c.running_var];
                let ch = mean.len();
                let shift = Tensor::new(vec![ch, 1, 1], mean.data().iter().map(|m| -m).collect())?;
                let scale = Tensor::new(
                    vec![ch, 1, 1],
                    var.data().iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
                )?;
                let shift = tape.constant(shift);
                let scale = tape.constant(scale);
                let centered = tape.add(y, shift)?;
                tape.mul(centered, scale)?
            }
        };
        let scaled = tape.mul(z, vars[c.gamma])?;
        tape.add(scaled, vars[c.beta])
    }

    /// Forward pass on a `[N,1,crop,crop]` batch of centered pixels.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mode: Mode) -> Result<Forward> {
        let mut norms = Vec::new();
        let norms = &mut norms;
        let mut h = self.conv(tape, vars, x, &self.layout.stem, mode, norms)?;
        h = tape.relu(h)?;
        let mut attention = Vec::new();
        for stage in &self.layout.stages {
            for block in &stage.blocks {
                let a = self.conv(tape, vars, h, &block.conv1, mode, norms)?;
                let a = tape.relu(a)?;
                let a = self.conv(tape, vars, a, &block.conv2, mode, norms)?;
                let skip = match &block.shortcut {
                    Some(sc) => self.conv(tape, vars, h, sc, mode, norms)?,
                    None => h,
                };
                let sum = tape.add(a, skip)?;
                h = tape.relu(sum)?;
            }
            if let Some((agg, mask)) = stage.fam {
                let out = fam_on_tape(
                    tape,
                    h,
                    FamVars {
                        agg_weights: vars[agg],
                        mask: vars[mask],
                    },
                )?;
                h = out.features;
                attention.push(out.attention);
            }
        }
        let pooled = tape.global_avgpool(h)?;
        let logits = tape.linear(pooled, vars[self.layout.head_weight], Some(vars[self.layout.head_bias]))?;
        Ok(Forward {
            logits,
            attention,
            norm_nodes: std::mem::take(norms),
        })
    }

    pub fn accumulate_norm_stats(&self, tape: &Tape, fwd: &Forward, acc: &mut NormStats) -> Result<()> {
        if acc.sums.is_empty() {
            acc.sums = fwd
                .norm_nodes
                .iter()
                .map(|&(b, _)| (b, vec![0.0; self.buffers[b].len()], vec![0.0; self.buffers[b].len()]))
                .collect();
        }
        if acc.sums.len() != fwd.norm_nodes.len() {
            return Err(Error::InvalidArgument("forward pass was not in train mode".into()));
        }
        for ((b, sm, sv), &(nb, node)) in acc.sums.iter_mut().zip(&fwd.norm_nodes) {
            let (mean, var) = tape
                .channel_stats(node)
                .filter(|_| *b == nb)
                .ok_or_else(|| Error::InvalidArgument("forward pass was not in train mode".into()))?;
            sm.iter_mut().zip(mean).for_each(|(a, m)| *a += m);
            sv.iter_mut().zip(var).for_each(|(a, v)| *a += v);
        }
        acc.batches += 1;
        Ok(())
    }

    /// Replaces the running statistics with the averages in `acc`.
    pub fn set_running_stats(&mut self, acc: &NormStats) -> Result<()> {
        if acc.batches == 0 {
            return Err(Error::InvalidArgument("no batch statistics collected".into()));
        }
        let k = acc.batches as f64;
        for (b, sm, sv) in &acc.sums {
            // running_var is always allocated right after running_mean
            for (dst, src) in self.buffers[*b].data_mut().iter_mut().zip(sm) {
                *dst = src / k;
            }
            for (dst, src) in self.buffers[*b + 1].data_mut().iter_mut().zip(sv) {
                *dst = src / k;
            }
        }
        Ok(())
    }

    /// Stacks equally sized images into a centered `[N,1,H,W]` batch.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.shape() != (h, w) {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?}", (h, w), img.shape())));
            }
            data.extend(img.as_slice().iter().map(|v| v - INPUT_CENTER));
        }
        Tensor::new(vec![images.len(), 1, h, w], data)
    }

    /// Eval-time crop: the centered `crop`x`crop` window of an
    /// `input`x`input` image.
    pub fn eval_crop(&self, img: &Image) -> Result<Image> {
        let n = self.cfg.input_size;
        if img.shape() != (n, n) {
            return Err(Error::Shape(format!("expected {n}x{n} image, got {:?}", img.shape())));
        }
        img.center_crop(self.cfg.crop_size, self.cfg.crop_size)
    }

    /// Attack-class probability per image (center-cropped).
    pub fn predict(&self, images: &[Image]) -> Result<Vec<f64>> {
        const CHUNK: usize = 32;
        let mut scores = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let crops = chunk.iter().map(|i| self.eval_crop(i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Image> = crops.iter().collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
            let x = tape.constant(Self::batch_tensor(&refs)?);
            let fwd = self.forward(&mut tape, &vars, x, Mode::Eval)?;
            scores.extend(softmax_attack(tape.value(fwd.logits)));
        }
        Ok(scores)
    }

    /// Attention map of stage `stage` for one (center-cropped) image.
    pub fn attention_map(&self, img: &Image, stage: usize) -> Result<Image> {
        if !self.cfg.fam_enabled {
            return Err(Error::InvalidArgument("model has no attention layers".into()));
        }
        if stage >= self.num_stages() {
            return Err(Error::InvalidArgument(format!(
                "stage {stage} out of range (model has {})",
                self.num_stages()
            )));
        }
        let crop = self.eval_crop(img)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let x = tape.constant(Self::batch_tensor(&[&crop])?);
        let fwd = self.forward(&mut tape, &vars, x, Mode::Eval)?;
        let att = tape.value(fwd.attention[stage]);
        let side = att.shape()[2];
        Image::new(side, att.shape()[3], att.data().to_vec())
    }

    pub fn to_checkpoint(&self, seed: u64, step: u64, meta: serde_json::Value) -> Checkpoint {
        let mut meta = meta;
        if let serde_json::Value::Object(map) = &mut meta {
            map.insert(
                "model".into(),
                serde_json::to_value(&self.cfg).expect("config serializes"),
            );
        }
        Checkpoint {
            params: self
                .names
                .iter()
                .chain(&self.buffer_names)
                .cloned()
                .zip(self.params.iter().chain(&self.buffers).cloned())
                .collect(),
            seed,
            step,
            meta,
        }
    }

    /// Rebuilds a model from a checkpoint whose metadata carries its config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Format("checkpoint lacks model config".into()))?,
        )
        .map_err(|e| Error::Format(format!("checkpoint model config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        let n_params = model.params.len();
        if ck.params.len() != n_params + model.buffers.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.params.len(),
                n_params + model.buffers.len()
            )));
        }
        for (i, (name, t)) in ck.params.iter().enumerate() {
            let (want_name, slot) = if i < n_params {
                (&model.names[i], &mut model.params[i])
            } else {
                (&model.buffer_names[i - n_params], &mut model.buffers[i - n_params])
            };
            if name != want_name || t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} does not fit the model"
                )));
            }
            *slot = t.clone();
        }
        Ok(model)
    }
}

/// Row-wise softmax probability of [`ATTACK`] for `[N,2]` logits.
pub fn softmax_attack(logits: &Tensor) -> Vec<f64> {
    logits
        .data()
        .chunks_exact(2)
        .map(|row| {
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            e1 / (e0 + e1)
        })
        .collect()
}
