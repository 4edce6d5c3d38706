//! Task-specific feature encoders on a 50-layer residual backbone.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{max_pool_3x3_s2, nchw_to_nhwc, nhwc_to_nchw};
use crate::nn::{kernel_from_oihw, kernel_to_oihw, BatchNorm2d, Conv2d, Mode, ParamBuilder, ParamStore};

/// Channel counts of the four pyramid levels.
pub const PYRAMID_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];
/// Spatial strides of the four pyramid levels.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const STAGE_WIDTH: [usize; 4] = [64, 128, 256, 512];
const EXPANSION: usize = 4;

/// Four feature maps, stored channels-last (`B×H×W×C`).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    /// Checks channel counts and the halving of spatial sizes between levels.
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<(usize, usize, usize)> = None;
        for (i, level) in self.levels.iter().enumerate() {
            let (b, h, w, c) = level.dims4()?;
            if c != PYRAMID_CHANNELS[i] {
                return Err(Error::argument(format!(
                    "pyramid level {} has {c} channels, expected {}",
                    i + 1,
                    PYRAMID_CHANNELS[i]
                )));
            }
            if let Some((pb, ph, pw)) = prev {
                if b != pb || ph != 2 * h || pw != 2 * w {
                    return Err(Error::argument(format!(
                        "pyramid level {} is {h}x{w}, expected half of {ph}x{pw}",
                        i + 1
                    )));
                }
            }
            prev = Some((b, h, w));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.levels[0].dims()[0]
    }

    /// `(C, H, W)` of level `i` (0-based).
    pub fn level_shape(&self, i: usize) -> (usize, usize, usize) {
        let d = self.levels[i].dims();
        (d[3], d[1], d[2])
    }

    /// Level `i` as a channels-first `B×C×H×W` tensor.
    pub fn level_nchw(&self, i: usize) -> Result<Tensor> {
        nhwc_to_nchw(&self.levels[i])
    }
}

/// Bottleneck residual block (stride on the 3×3 convolution).
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn new(b: &mut ParamBuilder, in_ch: usize, width: usize, stride: usize) -> Result<Self> {
        let out = width * EXPANSION;
        let downsample = if stride != 1 || in_ch != out {
            let mut d = b.sub("downsample");
            Some((
                Conv2d::new(&mut d.sub(0), in_ch, out, 1, stride, 0, false)?,
                BatchNorm2d::new(&mut d.sub(1), out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&mut b.sub("conv1"), in_ch, width, 1, 1, 0, false)?,
            bn1: BatchNorm2d::new(&mut b.sub("bn1"), width)?,
            conv2: Conv2d::new(&mut b.sub("conv2"), width, width, 3, stride, 1, false)?,
            bn2: BatchNorm2d::new(&mut b.sub("bn2"), width)?,
            conv3: Conv2d::new(&mut b.sub("conv3"), width, out, 1, 1, 0, false)?,
            bn3: BatchNorm2d::new(&mut b.sub("bn3"), out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, mode)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?, mode)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// One residual stage (`layer1` … `layer4`).
pub struct Stage {
    blocks: Vec<Bottleneck>,
}

impl Stage {
    /// Builds stage `index` (0-based) of the backbone under the builder's prefix.
    pub fn new(b: &mut ParamBuilder, index: usize) -> Result<Self> {
        let width = STAGE_WIDTH[index];
        let in_ch = if index == 0 {
            64
        } else {
            STAGE_WIDTH[index - 1] * EXPANSION
        };
        let stride = if index == 0 { 1 } else { 2 };
        let mut blocks = Vec::with_capacity(STAGE_BLOCKS[index]);
        for i in 0..STAGE_BLOCKS[index] {
            let (cin, s) = if i == 0 {
                (in_ch, stride)
            } else {
                (width * EXPANSION, 1)
            };
            blocks.push(Bottleneck::new(&mut b.sub(i), cin, width, s)?);
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
        }
        Ok(h)
    }
}

/// Backbone network with its own parameter store.
pub struct Encoder {
    store: ParamStore,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Stage>,
}

impl Encoder {
    /// Randomly initialized encoder.
    pub fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let (conv1, bn1, stages) = Self::build(&mut ParamBuilder::new(&mut store, rng))?;
        Ok(Self {
            store,
            conv1,
            bn1,
            stages,
        })
    }

    /// Zero-filled encoder whose values are about to be overwritten.
    pub fn skeleton() -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (conv1, bn1, stages) = Self::build(&mut ParamBuilder::skeleton(&mut store, &mut rng))?;
        Ok(Self {
            store,
            conv1,
            bn1,
            stages,
        })
    }

    fn build(b: &mut ParamBuilder) -> Result<(Conv2d, BatchNorm2d, Vec<Stage>)> {
        let conv1 = Conv2d::new(&mut b.sub("conv1"), 3, 64, 7, 2, 3, false)?;
        let bn1 = BatchNorm2d::new(&mut b.sub("bn1"), 64)?;
        let stages = (0..4)
            .map(|i| Stage::new(&mut b.sub(format!("layer{}", i + 1)), i))
            .collect::<Result<Vec<_>>>()?;
        Ok((conv1, bn1, stages))
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Encodes a channels-first `B×3×H×W` batch; `H` and `W` must be multiples of 32.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::argument(format!("expected 3 image channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::argument(format!(
                "image size {h}x{w} must be a positive multiple of 32"
            )));
        }
        let x = nchw_to_nhwc(images)?;
        let x = self.bn1.forward(&self.conv1.forward(&x)?, mode)?.relu()?;
        let x = max_pool_3x3_s2(&x)?;
        let f1 = self.stages[0].forward(&x, mode)?;
        let f2 = self.stages[1].forward(&f1, mode)?;
        let f3 = self.stages[2].forward(&f2, mode)?;
        let f4 = self.stages[3].forward(&f3, mode)?;
        Ok(FeaturePyramid {
            levels: [f1, f2, f3, f4],
        })
    }

    /// Overwrites all values from a backbone store in the conventional
    /// channels-first naming (`conv1.weight`, `layer1.0.bn1.running_mean`, ...).
    pub fn load_backbone(&self, source: &HashMap<String, Tensor>, origin: &Path) -> Result<()> {
        let entries = self.store.tensors().into_iter().map(|(k, t)| (k.clone(), k, t));
        let converted = convert_backbone(entries, source, origin)?;
        self.store.load_from(&converted, "", origin)
    }

    /// Exports the parameters in channels-first backbone naming.
    pub fn export_backbone(&self) -> Result<HashMap<String, Tensor>> {
        export_backbone(&self.store)
    }
}

/// Converts backbone entries from channels-first naming to this crate's layout.
///
/// Each item is `(target name, source key, target tensor)`; convolution kernels
/// are converted from `O×I×k×k`. Every missing or mismatched entry is reported.
pub(crate) fn convert_backbone(
    entries: impl IntoIterator<Item = (String, String, Tensor)>,
    source: &HashMap<String, Tensor>,
    origin: &Path,
) -> Result<HashMap<String, Tensor>> {
    let mut out = HashMap::new();
    let mut bad = Vec::new();
    for (name, key, t) in entries {
        let Some(src) = source.get(&key) else {
            bad.push(format!("{key}: missing"));
            continue;
        };
        let converted = if t.rank() == 2 && name.ends_with("weight") {
            if src.rank() != 4 {
                bad.push(format!("{key}: expected a 4-d kernel, found {:?}", src.dims()));
                continue;
            }
            kernel_from_oihw(src)?
        } else {
            src.clone()
        };
        if converted.dims() != t.dims() {
            bad.push(format!("{key}: shape {:?} does not fit {:?}", src.dims(), t.dims()));
            continue;
        }
        out.insert(name, converted);
    }
    if !bad.is_empty() {
        return Err(Error::Load {
            path: origin.to_path_buf(),
            entries: bad,
        });
    }
    Ok(out)
}

pub(crate) fn export_backbone(store: &ParamStore) -> Result<HashMap<String, Tensor>> {
    store
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            let t = if t.rank() == 2 && name.ends_with("weight") {
                kernel_to_oihw(&t, backbone_kernel(&name))?
            } else {
                t
            };
            Ok((name, t))
        })
        .collect()
}

fn backbone_kernel(name: &str) -> usize {
    if name == "conv1.weight" {
        7
    } else if name.ends_with("conv2.weight") {
        3
    } else {
        1
    }
}

/// Reads a serialized backbone store from disk.
pub fn read_store(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    Ok(candle_core::safetensors::load(path, &candle_core::Device::Cpu)?)
}

/// Builds the saliency and camouflage encoders.
///
/// With a backbone store both start from identical (deep-copied) values;
/// otherwise each draws independent random values from `rng`.
pub fn init_encoders(pretrained: Option<&Path>, rng: &mut ChaCha8Rng) -> Result<(Encoder, Encoder)> {
    let sod = Encoder::new(rng)?;
    let cod = Encoder::new(rng)?;
    if let Some(path) = pretrained {
        let source = read_store(path)?;
        sod.load_backbone(&source, path)?;
        cod.load_backbone(&source, path)?;
    }
    Ok((sod, cod))
}
