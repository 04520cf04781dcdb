//! Early-fusion U-shaped FCN mapping a concatenated pre/post pair to per-pixel logits.
//!
//! Layout for depth `D` and base width `C`:
//! encoder level `l` (1..=D) runs conv-relu x2 at width `C * 2^(l-1)` then pools;
//! the bottleneck runs conv-relu x2 at width `C * 2^D`; decoder level `l`
//! upsamples, concatenates the level-`l` skip, and runs conv-relu x2 back at
//! width `C * 2^(l-1)`; a final 3x3 conv projects to `num_classes` logits.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::raster::{ChangeMask, Raster};
use crate::tensor::{Scalar, Tape, Tensor4, Var};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"CDFCN1\0\0";
const CONFIG_TENSOR: &str = "__config";
/// Largest integer every f32 represents exactly; config values are stored as f32.
const MAX_EXACT_F32_INT: u64 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FcnConfig {
    /// Bands per image; the network sees twice this many input channels.
    pub in_bands: usize,
    /// `K + 1`.
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub seed: u64,
}

impl FcnConfig {
    pub fn new(in_bands: usize, num_classes: usize) -> Self {
        Self {
            in_bands,
            num_classes,
            base_channels: 16,
            depth: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 {
            return Err(invalid!("in_bands must be positive"));
        }
        if self.num_classes < 2 {
            return Err(invalid!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.base_channels == 0 {
            return Err(invalid!("base_channels must be positive"));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(invalid!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.seed > MAX_EXACT_F32_INT {
            return Err(invalid!(
                "model seed {} exceeds 2^24 and cannot be stored exactly in the weights file",
                self.seed
            ));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.in_bands
    }

    /// Width of encoder/decoder level `level` (1-based).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }

    /// Spatial sizes are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    /// `[cout, cin, 3, 3]` for kernels, `[cout, 1, 1, 1]` for biases.
    pub shape: [usize; 4],
}

impl ParamSpec {
    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }

    /// Dimensions as written to the weights file (biases are 1-D).
    pub fn file_dims(&self) -> Vec<usize> {
        if self.is_bias() {
            vec![self.shape[0]]
        } else {
            self.shape.to_vec()
        }
    }

    fn fan_in(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }
}

/// Parameter names and shapes in canonical order; a pure function of the config.
pub fn architecture(cfg: &FcnConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut conv = |prefix: String, cin: usize, cout: usize| {
        specs.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: [cout, cin, 3, 3],
        });
        specs.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: [cout, 1, 1, 1],
        });
    };
    let mut cin = cfg.input_channels();
    for level in 1..=cfg.depth {
        let c = cfg.level_channels(level);
        conv(format!("enc{level}.conv1"), cin, c);
        conv(format!("enc{level}.conv2"), c, c);
        cin = c;
    }
    let b = cfg.bottleneck_channels();
    conv("bottleneck.conv1".into(), cin, b);
    conv("bottleneck.conv2".into(), b, b);
    let mut below = b;
    for level in (1..=cfg.depth).rev() {
        let c = cfg.level_channels(level);
        conv(format!("dec{level}.conv1"), below + c, c);
        conv(format!("dec{level}.conv2"), c, c);
        below = c;
    }
    conv("head".into(), below, cfg.num_classes);
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor4<f32>,
}

/// Trained (or freshly initialized) weights of the change-detection network.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel {
    config: FcnConfig,
    params: Vec<NamedTensor>,
}

/// Per-pixel logits `z_0 .. z_K` at the input scene's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap(Raster);

impl LogitMap {
    pub fn new(r: Raster) -> Result<Self> {
        if r.channels() < 2 {
            return Err(invalid!("a logit map needs at least two classes"));
        }
        Ok(Self(r))
    }

    pub fn num_classes(&self) -> usize {
        self.0.channels()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    /// Logits of pixel `p` (row-major index) written into `buf`.
    pub fn pixel_into(&self, p: usize, buf: &mut [f32]) {
        let n = self.0.pixels();
        for (k, v) in buf.iter_mut().enumerate() {
            *v = self.0.data()[k * n + p];
        }
    }

    /// Argmax per pixel; ties go to the lower class index.
    pub fn argmax(&self) -> Result<ChangeMask> {
        let n = self.0.pixels();
        let k = self.num_classes();
        let data = self.0.data();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if data[c * n + p] > data[best * n + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        ChangeMask::with_classes(self.height(), self.width(), labels, k - 1)
    }
}

pub struct ForwardOut {
    pub logits: Var,
    /// Encoder activations before pooling, one per level.
    pub skips: Vec<Var>,
}

/// Records the network on `tape`. `params` follow [`architecture`] order.
pub fn record_forward<T: Scalar>(
    cfg: &FcnConfig,
    tape: &mut Tape<T>,
    params: &[Var],
    input: Var,
) -> Result<ForwardOut> {
    let mut next = params.iter().copied();
    let mut conv_relu = |tape: &mut Tape<T>, x: Var, relu: bool| -> Result<Var> {
        let k = next.next().ok_or_else(|| shape_err!("missing kernel"))?;
        let b = next.next().ok_or_else(|| shape_err!("missing bias"))?;
        let y = tape.conv2d(x, k, b)?;
        Ok(if relu { tape.relu(y) } else { y })
    };

    let mut x = input;
    let mut skips = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        x = conv_relu(tape, x, true)?;
        x = conv_relu(tape, x, true)?;
        skips.push(x);
        x = tape.maxpool2(x)?;
    }
    x = conv_relu(tape, x, true)?;
    x = conv_relu(tape, x, true)?;
    for level in (0..cfg.depth).rev() {
        let up = tape.upsample2(x);
        x = tape.concat_channels(up, skips[level])?;
        x = conv_relu(tape, x, true)?;
        x = conv_relu(tape, x, true)?;
    }
    let logits = conv_relu(tape, x, false)?;
    Ok(ForwardOut { logits, skips })
}

/// Mirror index into `0..n` (edge not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Concatenates `pre` then `post` along channels and reflect-pads bottom/right
/// to `(ph, pw)`. Output shape `[1, 2B, ph, pw]`.
pub(crate) fn fuse_and_pad(pre: &Raster, post: &Raster, ph: usize, pw: usize) -> Tensor4<f32> {
    let (h, w) = (pre.height(), pre.width());
    let bands = pre.channels();
    let mut data = Vec::with_capacity(2 * bands * ph * pw);
    for img in [pre, post] {
        for c in 0..bands {
            let plane = img.plane(c);
            for y in 0..ph {
                let row = &plane[reflect(y, h) * w..][..w];
                data.extend((0..pw).map(|x| row[reflect(x, w)]));
            }
        }
    }
    Tensor4::new([1, 2 * bands, ph, pw], data).expect("sized above")
}

impl FcnModel {
    /// He-normal kernels (variance `2 / fan_in`) from ChaCha8 seeded by `cfg.seed`; zero biases.
    pub fn init(cfg: FcnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = architecture(&cfg)
            .into_iter()
            .map(|spec| {
                let tensor = if spec.is_bias() {
                    Tensor4::zeros(spec.shape)
                } else {
                    let std = (2.0 / spec.fan_in() as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let n = spec.shape.iter().product();
                    let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                    Tensor4::new(spec.shape, data).expect("sized from spec")
                };
                NamedTensor {
                    name: spec.name,
                    tensor,
                }
            })
            .collect();
        Ok(Self { config: cfg, params })
    }

    /// Builds a model from explicit parameters, checking names and shapes.
    pub fn from_params(cfg: FcnConfig, params: Vec<NamedTensor>) -> Result<Self> {
        cfg.validate()?;
        let specs = architecture(&cfg);
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    spec.name,
                    spec.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(Self { config: cfg, params })
    }

    pub fn config(&self) -> &FcnConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn check_pair(&self, pre: &Raster, post: &Raster) -> Result<()> {
        if !pre.same_shape(post) {
            return Err(shape_err!("pre and post images differ in shape"));
        }
        if pre.channels() != self.config.in_bands {
            return Err(shape_err!(
                "model expects {} bands per image, got {}",
                self.config.in_bands,
                pre.channels()
            ));
        }
        Ok(())
    }

    fn run<T: Scalar>(&self, pre: &Raster, post: &Raster) -> Result<(Tape<T>, ForwardOut, usize, usize)> {
        self.check_pair(pre, post)?;
        let m = self.config.size_multiple();
        let (ph, pw) = (round_up(pre.height(), m), round_up(pre.width(), m));
        let input = fuse_and_pad(pre, post, ph, pw).cast::<T>();
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.input(p.tensor.cast())).collect();
        let x = tape.input(input);
        let out = record_forward(&self.config, &mut tape, &vars, x)?;
        Ok((tape, out, ph, pw))
    }

    /// Logits for a (normalized) scene; any spatial size is accepted.
    pub fn forward_logits(&self, pre: &Raster, post: &Raster) -> Result<LogitMap> {
        let (tape, out, _, pw) = self.run::<f32>(pre, post)?;
        let logits = tape.value(out.logits);
        let (h, w) = (pre.height(), pre.width());
        let mut data = Vec::with_capacity(logits.c() * h * w);
        for c in 0..logits.c() {
            let plane = logits.plane(0, c);
            for y in 0..h {
                data.extend_from_slice(&plane[y * pw..y * pw + w]);
            }
        }
        LogitMap::new(Raster::new(h, w, logits.c(), data)?)
    }

    /// Argmax change map; class 0 is unchanged and wins ties.
    pub fn predict_map(&self, pre: &Raster, post: &Raster) -> Result<ChangeMask> {
        self.forward_logits(pre, post)?.argmax()
    }

    /// Activation after encoder level `level` (before pooling), nearest-upsampled
    /// back to the input resolution.
    pub fn encoder_features(&self, pre: &Raster, post: &Raster, level: usize) -> Result<Raster> {
        if level == 0 || level > self.config.depth {
            return Err(invalid!(
                "encoder level must be in 1..={}, got {level}",
                self.config.depth
            ));
        }
        let (tape, out, _, _) = self.run::<f32>(pre, post)?;
        let feat = tape.value(out.skips[level - 1]);
        let f = 1 << (level - 1);
        let (h, w) = (pre.height(), pre.width());
        let fw = feat.w();
        let mut data = Vec::with_capacity(feat.c() * h * w);
        for c in 0..feat.c() {
            let plane = feat.plane(0, c);
            for y in 0..h {
                data.extend((0..w).map(|x| plane[(y / f) * fw + x / f]));
            }
        }
        Raster::new(h, w, feat.c(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = WEIGHTS_MAGIC.to_vec();
        let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        push_u32(&mut out, self.params.len() + 1);

        let c = &self.config;
        let config_values = [
            c.in_bands as u64,
            c.num_classes as u64,
            c.base_channels as u64,
            c.depth as u64,
            c.seed,
        ];
        push_u32(&mut out, CONFIG_TENSOR.len());
        out.extend_from_slice(CONFIG_TENSOR.as_bytes());
        push_u32(&mut out, 1);
        push_u32(&mut out, config_values.len());
        for v in config_values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }

        for (spec, p) in architecture(c).iter().zip(&self.params) {
            push_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            let dims = spec.file_dims();
            push_u32(&mut out, dims.len());
            for d in dims {
                push_u32(&mut out, d);
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != WEIGHTS_MAGIC {
            return Err(Error::Format("missing CDFCN1 magic".into()));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(Error::Format("weights file holds no tensors".into()));
        }
        let (name, dims, values) = r.tensor()?;
        if name != CONFIG_TENSOR || dims != [5] {
            return Err(Error::Format(format!(
                "first tensor must be {CONFIG_TENSOR} with 5 values, found {name} {dims:?}"
            )));
        }
        let as_int = |v: f32| -> Result<u64> {
            if v < 0.0 || v.fract() != 0.0 || v > MAX_EXACT_F32_INT as f32 {
                return Err(Error::Format(format!("config value {v} is not a valid integer")));
            }
            Ok(v as u64)
        };
        let cfg = FcnConfig {
            in_bands: as_int(values[0])? as usize,
            num_classes: as_int(values[1])? as usize,
            base_channels: as_int(values[2])? as usize,
            depth: as_int(values[3])? as usize,
            seed: as_int(values[4])?,
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;

        let specs = architecture(&cfg);
        if count != specs.len() + 1 {
            return Err(Error::Format(format!(
                "config implies {} tensors, header declares {}",
                specs.len() + 1,
                count
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for spec in &specs {
            let (name, dims, values) = r.tensor()?;
            if name != spec.name || dims != spec.file_dims() {
                return Err(Error::Format(format!(
                    "expected tensor {} {:?}, found {name} {dims:?}",
                    spec.name,
                    spec.file_dims()
                )));
            }
            params.push(NamedTensor {
                name,
                tensor: Tensor4::new(spec.shape, values)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Self::from_params(cfg, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Corruption(format!(
                "weights file truncated at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("tensor {name} has {ndim} dims")));
        }
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, dims, values))
    }
}
