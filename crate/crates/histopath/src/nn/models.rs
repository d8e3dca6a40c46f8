//! Model builders and the `NNW1` model file format.
//!
//! Two families are provided. The segmentation family is an encoder-decoder
//! with skip connections; `skip_convs` extra 3x3 conv+relu blocks are
//! applied to each skip connection before concatenation, and zero extra
//! blocks give the plain encoder-decoder (see [`build_unet`], an
//! independently written construction used to cross-check that reduction).
//! The classification family is a conv/pool stack finished by average
//! spatial pyramid pooling and a dense layer, so it accepts patches of any
//! spatial size.
//!
//! Model files start with the magic `NNW1\n`, then one ASCII architecture
//! line, then the flat parameter vector as little-endian 32-bit floats. The
//! architecture line alone determines the expected parameter count.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, GraphBuilder};

/// Shape of a segmentation network: `depth` encoder levels with channel
/// counts doubling from `base_channels`, `skip_convs` extra conv blocks on
/// each skip connection (0 = plain encoder-decoder), and `out_classes`
/// output channels at the input's spatial size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TNetSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub skip_convs: usize,
    pub out_classes: usize,
}

impl TNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::validation("segmenter depth must be at least 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::validation("segmenter base channel count must be at least 1"));
        }
        if self.out_classes == 0 {
            return Err(Error::validation("segmenter needs at least one output class"));
        }
        level_channels(self.base_channels, self.depth - 1)?;
        Ok(())
    }
}

/// Shape of a patch classifier: `blocks` conv3x3+relu+maxpool2 stages with
/// doubling channels, then `spp_levels` of average pyramid pooling and a
/// dense layer with `classes` logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub blocks: usize,
    pub base_channels: usize,
    pub spp_levels: usize,
    pub classes: usize,
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::validation("classifier needs at least one conv block"));
        }
        if self.base_channels == 0 {
            return Err(Error::validation("classifier base channel count must be at least 1"));
        }
        if self.spp_levels == 0 {
            return Err(Error::validation("classifier needs at least one pyramid level"));
        }
        if self.classes < 2 {
            return Err(Error::validation("classifier needs at least two classes"));
        }
        level_channels(self.base_channels, self.blocks - 1)?;
        Ok(())
    }
}

fn level_channels(base: usize, level: usize) -> Result<usize> {
    if level >= usize::BITS as usize {
        return Err(Error::validation(format!("network depth {level} is far past practical")));
    }
    base.checked_mul(1usize << level)
        .ok_or_else(|| Error::validation("channel count overflows at this depth"))
}

/// A complete, self-describing architecture. Its `Display`/`FromStr` forms
/// are the ASCII line stored in model files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchDescriptor {
    Segmenter {
        in_channels: usize,
        spec: TNetSpec,
        /// Append a sigmoid so the network emits probabilities directly
        /// (used by single-channel tumor-map models); multi-class models
        /// emit logits instead.
        sigmoid: bool,
    },
    Classifier {
        in_channels: usize,
        spec: ClassifierSpec,
    },
}

impl ArchDescriptor {
    pub fn segmenter(spec: TNetSpec, in_channels: usize, sigmoid: bool) -> Self {
        ArchDescriptor::Segmenter {
            in_channels,
            spec,
            sigmoid,
        }
    }

    pub fn classifier(spec: ClassifierSpec, in_channels: usize) -> Self {
        ArchDescriptor::Classifier { in_channels, spec }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchDescriptor::Segmenter {
                in_channels, spec, ..
            } => {
                if *in_channels == 0 {
                    return Err(Error::validation("segmenter needs at least one input channel"));
                }
                spec.validate()
            }
            ArchDescriptor::Classifier { in_channels, spec } => {
                if *in_channels == 0 {
                    return Err(Error::validation("classifier needs at least one input channel"));
                }
                spec.validate()
            }
        }
    }

    /// Construct the network graph with zero weights.
    pub fn build(&self) -> Result<Graph<f32>> {
        self.validate()?;
        match self {
            ArchDescriptor::Segmenter {
                in_channels,
                spec,
                sigmoid,
            } => segmenter_graph(spec, *in_channels, *sigmoid),
            ArchDescriptor::Classifier { in_channels, spec } => {
                classifier_graph(spec, *in_channels)
            }
        }
    }

    /// Check that an input of `h` x `w` pixels can flow through the network.
    /// Segmenters need dimensions divisible by 2^(depth-1) so pooled maps
    /// line up with the upsampled ones; classifiers only need enough pixels
    /// to survive the pooling stack into the pyramid.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        match self {
            ArchDescriptor::Segmenter { spec, .. } => {
                let div = 1usize << (spec.depth - 1);
                if h % div != 0 || w % div != 0 {
                    return Err(Error::shape(format!(
                        "segmenter of depth {} needs input dims divisible by {div}, got {h}x{w}",
                        spec.depth
                    )));
                }
                Ok(())
            }
            ArchDescriptor::Classifier { spec, .. } => {
                let need = spec.spp_levels << spec.blocks;
                if h < need || w < need {
                    return Err(Error::shape(format!(
                        "classifier with {} blocks and {} pyramid levels needs at least {need}x{need} input, got {h}x{w}",
                        spec.blocks, spec.spp_levels
                    )));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchDescriptor::Segmenter {
                in_channels,
                spec,
                sigmoid,
            } => write!(
                f,
                "segmenter in={} depth={} base={} skip={} out={} sigmoid={}",
                in_channels,
                spec.depth,
                spec.base_channels,
                spec.skip_convs,
                spec.out_classes,
                u8::from(*sigmoid)
            ),
            ArchDescriptor::Classifier { in_channels, spec } => write!(
                f,
                "classifier in={} blocks={} base={} spp={} classes={}",
                in_channels, spec.blocks, spec.base_channels, spec.spp_levels, spec.classes
            ),
        }
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut tokens = s.split_whitespace();
        let kind = tokens
            .next()
            .ok_or_else(|| Error::validation("empty architecture line"))?;
        let keys: &[&str] = match kind {
            "segmenter" => &["in", "depth", "base", "skip", "out", "sigmoid"],
            "classifier" => &["in", "blocks", "base", "spp", "classes"],
            other => {
                return Err(Error::validation(format!(
                    "unknown architecture kind `{other}` (expected `segmenter` or `classifier`)"
                )))
            }
        };
        let mut values: Vec<Option<usize>> = vec![None; keys.len()];
        for tok in tokens {
            let (key, val) = tok.split_once('=').ok_or_else(|| {
                Error::validation(format!("architecture field `{tok}` is not key=value"))
            })?;
            let slot = keys.iter().position(|k| *k == key).ok_or_else(|| {
                Error::validation(format!("unknown architecture field `{key}` for `{kind}`"))
            })?;
            if values[slot].is_some() {
                return Err(Error::validation(format!("duplicate architecture field `{key}`")));
            }
            let parsed: usize = val.parse().map_err(|_| {
                Error::validation(format!("architecture field `{key}` has non-numeric value `{val}`"))
            })?;
            values[slot] = Some(parsed);
        }
        for (k, v) in keys.iter().zip(&values) {
            if v.is_none() {
                return Err(Error::validation(format!("architecture line missing field `{k}`")));
            }
        }
        let v = |i: usize| values[i].unwrap();
        let desc = match kind {
            "segmenter" => {
                if v(5) > 1 {
                    return Err(Error::validation("sigmoid flag must be 0 or 1"));
                }
                ArchDescriptor::Segmenter {
                    in_channels: v(0),
                    spec: TNetSpec {
                        depth: v(1),
                        base_channels: v(2),
                        skip_convs: v(3),
                        out_classes: v(4),
                    },
                    sigmoid: v(5) == 1,
                }
            }
            _ => ArchDescriptor::Classifier {
                in_channels: v(0),
                spec: ClassifierSpec {
                    blocks: v(1),
                    base_channels: v(2),
                    spp_levels: v(3),
                    classes: v(4),
                },
            },
        };
        desc.validate()?;
        Ok(desc)
    }
}

fn segmenter_graph(spec: &TNetSpec, in_channels: usize, sigmoid: bool) -> Result<Graph<f32>> {
    let mut b = GraphBuilder::new(in_channels)?;
    let mut skips = Vec::with_capacity(spec.depth);
    let mut x = 0;
    for level in 0..spec.depth {
        let c = level_channels(spec.base_channels, level)?;
        if level > 0 {
            x = b.maxpool2(x)?;
        }
        x = b.conv3(x, c)?;
        x = b.relu(x)?;
        x = b.conv3(x, c)?;
        x = b.relu(x)?;
        skips.push(x);
    }
    for level in (0..spec.depth.saturating_sub(1)).rev() {
        let c = level_channels(spec.base_channels, level)?;
        x = b.upsample2(x)?;
        x = b.conv3(x, c)?;
        x = b.relu(x)?;
        let mut skip = skips[level];
        for _ in 0..spec.skip_convs {
            skip = b.conv3(skip, c)?;
            skip = b.relu(skip)?;
        }
        x = b.concat(&[skip, x])?;
        x = b.conv3(x, c)?;
        x = b.relu(x)?;
        x = b.conv3(x, c)?;
        x = b.relu(x)?;
    }
    let mut out = b.conv1(x, spec.out_classes)?;
    if sigmoid {
        out = b.sigmoid(out)?;
    }
    b.finish(out)
}

/// Segmentation network with raw (logit) outputs.
pub fn build_tnet(spec: &TNetSpec, in_channels: usize) -> Result<Graph<f32>> {
    ArchDescriptor::segmenter(*spec, in_channels, false).validate()?;
    segmenter_graph(spec, in_channels, false)
}

/// Plain encoder-decoder, written independently of [`build_tnet`] as a
/// cross-check: with `skip_convs = 0` the two constructions must agree
/// bit-for-bit given the same weights. Parameter order is encoder levels
/// top-down, then each decoder level with its upsample conv before the
/// merge convs, then the final 1x1 projection.
pub fn build_unet(
    in_channels: usize,
    depth: usize,
    base_channels: usize,
    out_classes: usize,
) -> Result<Graph<f32>> {
    let spec = TNetSpec {
        depth,
        base_channels,
        skip_convs: 0,
        out_classes,
    };
    ArchDescriptor::segmenter(spec, in_channels, false).validate()?;
    let mut b = GraphBuilder::new(in_channels)?;

    // Contracting path: double conv per level, pool between levels.
    let mut level_outputs = Vec::new();
    let mut cur = 0;
    for level in 0..depth {
        let width = base_channels * (1 << level);
        if level > 0 {
            cur = b.maxpool2(cur)?;
        }
        let c1 = b.conv3(cur, width)?;
        let a1 = b.relu(c1)?;
        let c2 = b.conv3(a1, width)?;
        cur = b.relu(c2)?;
        level_outputs.push(cur);
    }

    // Expanding path: upsample, halve channels, merge with the matching
    // contracting-path output, double conv.
    let mut level = depth;
    while level > 1 {
        level -= 1;
        let width = base_channels * (1 << (level - 1));
        let up = b.upsample2(cur)?;
        let uc = b.conv3(up, width)?;
        let ua = b.relu(uc)?;
        let merged = b.concat(&[level_outputs[level - 1], ua])?;
        let m1 = b.conv3(merged, width)?;
        let a1 = b.relu(m1)?;
        let m2 = b.conv3(a1, width)?;
        cur = b.relu(m2)?;
    }
    let head = b.conv1(cur, out_classes)?;
    b.finish(head)
}

fn classifier_graph(spec: &ClassifierSpec, in_channels: usize) -> Result<Graph<f32>> {
    let mut b = GraphBuilder::new(in_channels)?;
    let mut x = 0;
    for block in 0..spec.blocks {
        let c = level_channels(spec.base_channels, block)?;
        x = b.conv3(x, c)?;
        x = b.relu(x)?;
        x = b.maxpool2(x)?;
    }
    x = b.spp(x, spec.spp_levels)?;
    let out = b.dense(x, spec.classes)?;
    b.finish(out)
}

/// Patch classifier emitting class logits.
pub fn build_classifier(spec: &ClassifierSpec, in_channels: usize) -> Result<Graph<f32>> {
    ArchDescriptor::classifier(*spec, in_channels).validate()?;
    classifier_graph(spec, in_channels)
}

/// An architecture plus its flat weight vector; what model files store.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchDescriptor,
    pub weights: Vec<f32>,
}

impl ModelBundle {
    pub fn from_graph(arch: ArchDescriptor, graph: &Graph<f32>) -> Result<Self> {
        let weights = graph.flat_weights();
        let expect = arch.build()?.param_count();
        if weights.len() != expect {
            return Err(Error::validation(format!(
                "graph has {} parameters but architecture `{arch}` needs {expect}",
                weights.len()
            )));
        }
        Ok(ModelBundle { arch, weights })
    }

    /// Rebuild the runnable network from the bundle.
    pub fn to_graph(&self) -> Result<Graph<f32>> {
        let mut graph = self.arch.build()?;
        if self.weights.len() != graph.param_count() {
            return Err(Error::validation(format!(
                "model has {} weights but architecture `{}` needs {}",
                self.weights.len(),
                self.arch,
                graph.param_count()
            )));
        }
        graph.set_flat_weights(&self.weights)?;
        Ok(graph)
    }
}

const MODEL_MAGIC: &[u8; 5] = b"NNW1\n";

pub fn save_model(path: &Path, bundle: &ModelBundle) -> Result<()> {
    // Validate before touching the filesystem.
    let expect = bundle.arch.build()?.param_count();
    if bundle.weights.len() != expect {
        return Err(Error::validation(format!(
            "refusing to save: {} weights for architecture `{}` needing {expect}",
            bundle.weights.len(),
            bundle.arch
        )));
    }
    let mut bytes = Vec::with_capacity(5 + 64 + 4 * bundle.weights.len());
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(bundle.arch.to_string().as_bytes());
    bytes.push(b'\n');
    for w in &bundle.weights {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path)?;
    parse_model(&bytes)
}

pub fn parse_model(bytes: &[u8]) -> Result<ModelBundle> {
    for (i, want) in MODEL_MAGIC.iter().enumerate() {
        match bytes.get(i) {
            Some(got) if got == want => {}
            Some(got) => {
                return Err(Error::format(
                    i as u64,
                    format!("bad model magic byte {got:#04x}, expected {want:#04x} (`NNW1`)"),
                ))
            }
            None => {
                return Err(Error::format(
                    bytes.len() as u64,
                    "file too short for model magic `NNW1`",
                ))
            }
        }
    }
    let body = &bytes[MODEL_MAGIC.len()..];
    let nl = body.iter().position(|b| *b == b'\n').ok_or_else(|| {
        Error::format(bytes.len() as u64, "unterminated architecture line")
    })?;
    let line = std::str::from_utf8(&body[..nl]).map_err(|_| {
        Error::format(MODEL_MAGIC.len() as u64, "architecture line is not ASCII")
    })?;
    let arch: ArchDescriptor = line.parse().map_err(|e| {
        Error::format(MODEL_MAGIC.len() as u64, format!("bad architecture line: {e}"))
    })?;
    let expect = arch.build()?.param_count();
    let payload = &body[nl + 1..];
    let payload_off = (MODEL_MAGIC.len() + nl + 1) as u64;
    let need = expect
        .checked_mul(4)
        .ok_or_else(|| Error::validation("weight payload size overflows"))?;
    if payload.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated weight payload: architecture `{arch}` needs {expect} floats ({need} bytes), found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > need {
        return Err(Error::format(
            payload_off + need as u64,
            format!("{} trailing bytes after weight payload", payload.len() - need),
        ));
    }
    let mut weights = Vec::with_capacity(expect);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(Error::format(
                payload_off + (4 * i) as u64,
                format!("weight {i} is not finite"),
            ));
        }
        weights.push(v);
    }
    Ok(ModelBundle { arch, weights })
}
