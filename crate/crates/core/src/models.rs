//! Toy backbones (sub-group-attention ViT and a BagNet-style conv stack),
//! the attention-to-local conversion, and weight persistence.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    self, AttentionSpec, AttentionWeights, ConvSpec, LayerSpec, Padding, PatchEmbedSpec, Tensor3,
};
use crate::util::{fnv1a64, Fnv1a};

/// Architecture description. Layers are grouped into a stem, the backbone
/// blocks that the splitting index counts, and the classification head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input: (usize, usize, usize),
    pub n_classes: usize,
    pub stem: Vec<LayerSpec>,
    pub blocks: Vec<Vec<LayerSpec>>,
    pub head: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Number of backbone blocks (`L`).
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        self.stem
            .iter()
            .chain(self.blocks.iter().flatten())
            .chain(&self.head)
            .copied()
            .collect()
    }

    /// Flat index of the first layer after block `k - 1`; 0 for `k = 0`.
    pub fn split_point(&self, k: usize) -> Result<usize> {
        if k > self.depth() {
            return Err(Error::config(format!(
                "splitting index k={k} outside 0..={}",
                self.depth()
            )));
        }
        if k == 0 {
            return Ok(0);
        }
        Ok(self.stem.len() + self.blocks[..k].iter().map(Vec::len).sum::<usize>())
    }

    pub fn validate(&self) -> Result<()> {
        let mut dims = self.input;
        for (i, layer) in self.layers().iter().enumerate() {
            layer.validate()?;
            dims = layer
                .output_dims(dims)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
        }
        if dims != (1, 1, self.n_classes) {
            return Err(Error::config(format!(
                "model ends in {dims:?}, expected a {}-class score vector",
                self.n_classes
            )));
        }
        Ok(())
    }

    /// FNV-1a over the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        fnv1a64(&serde_json::to_vec(self).expect("spec serialises"))
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBlock {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parameters keyed `"{layer index}.{param}"`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    pub seed: u64,
    pub blocks: BTreeMap<String, WeightBlock>,
}

fn fan_in(layer: &LayerSpec, param: &str) -> usize {
    match (layer, param) {
        (LayerSpec::Conv(c), _) => c.kh * c.kw * c.cin,
        (LayerSpec::PatchEmbed(p), _) => p.ph * p.pw * p.cin,
        (LayerSpec::Mlp { hidden, .. }, "w2") => *hidden,
        (LayerSpec::LocalAttention(a), _) => a.d,
        (LayerSpec::Mlp { d, .. }, _) | (LayerSpec::PooledLinearHead { d, .. }, _) => *d,
        _ => 1,
    }
}

impl WeightStore {
    /// Uniform `[-a, a]` weights with `a = fan_in^-1/2`, zero biases and unit
    /// layer-norm gains. Each layer draws from its own stream of `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> WeightStore {
        let mut blocks = BTreeMap::new();
        for (idx, layer) in spec.layers().iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(idx as u64);
            for (param, shape) in layer.param_shapes() {
                let len: usize = shape.iter().product();
                let data = match (layer, param) {
                    (LayerSpec::LayerNorm { .. }, "gain") => vec![1.0; len],
                    (_, p) if p.starts_with('b') => vec![0.0; len],
                    _ => {
                        let a = (fan_in(layer, param) as f32).powf(-0.5);
                        (0..len).map(|_| rng.gen_range(-a..=a)).collect()
                    }
                };
                blocks.insert(format!("{idx}.{param}"), WeightBlock { shape, data });
            }
        }
        WeightStore { seed, blocks }
    }

    pub fn get(&self, layer: usize, param: &str) -> Result<&[f32]> {
        let key = format!("{layer}.{param}");
        self.blocks
            .get(&key)
            .map(|b| b.data.as_slice())
            .ok_or_else(|| Error::WeightBlock {
                name: key,
                reason: "missing".into(),
            })
    }

    pub fn get_mut(&mut self, layer: usize, param: &str) -> Result<&mut Vec<f32>> {
        let key = format!("{layer}.{param}");
        match self.blocks.get_mut(&key) {
            Some(b) => Ok(&mut b.data),
            None => Err(Error::WeightBlock {
                name: key,
                reason: "missing".into(),
            }),
        }
    }

    /// Checks that every parameterised layer has blocks of the exact shape.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        for (idx, layer) in spec.layers().iter().enumerate() {
            for (param, shape) in layer.param_shapes() {
                let name = format!("{idx}.{param}");
                let block = self.blocks.get(&name).ok_or_else(|| Error::WeightBlock {
                    name: name.clone(),
                    reason: "missing".into(),
                })?;
                if block.shape != shape || block.data.len() != shape.iter().product::<usize>() {
                    return Err(Error::WeightBlock {
                        name,
                        reason: format!("shape {:?}, expected {:?}", block.shape, shape),
                    });
                }
            }
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.update(&self.seed.to_le_bytes());
        for (name, b) in &self.blocks {
            h.update(name.as_bytes());
            for &s in &b.shape {
                h.update(&(s as u64).to_le_bytes());
            }
            for v in &b.data {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// A contiguous run of layers, each tagged with its index in the full model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stack {
    pub layers: Vec<(usize, LayerSpec)>,
}

impl Stack {
    pub fn new(first_index: usize, layers: &[LayerSpec]) -> Self {
        Stack {
            layers: layers.iter().enumerate().map(|(i, l)| (first_index + i, *l)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|(_, l)| *l).collect()
    }

    /// True iff the stack is only a pooled linear head.
    pub fn is_head_only(&self) -> bool {
        matches!(self.layers.as_slice(), [(_, LayerSpec::PooledLinearHead { .. })])
    }

    pub fn output_dims(&self, mut dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        for (_, l) in &self.layers {
            dims = l.output_dims(dims)?;
        }
        Ok(dims)
    }

    pub fn macs(&self, mut dims: (usize, usize, usize)) -> Result<u64> {
        let mut total = 0;
        for (_, l) in &self.layers {
            total += l.macs(dims)?;
            dims = l.output_dims(dims)?;
        }
        Ok(total)
    }

    /// Runs the stack. `head_skip` flags cells of the head's input grid that
    /// pooling should ignore; it is only honoured when the head is the first
    /// layer of the stack.
    pub fn forward(&self, x: &Tensor3, store: &WeightStore, head_skip: Option<&[bool]>) -> Result<Tensor3> {
        let mut cur: Option<Tensor3> = None;
        for (pos, (idx, layer)) in self.layers.iter().enumerate() {
            let input = cur.as_ref().unwrap_or(x);
            let out = run_layer(input, *idx, layer, store, if pos == 0 { head_skip } else { None })?;
            cur = Some(out);
        }
        Ok(cur.unwrap_or_else(|| x.clone()))
    }
}

fn run_layer(x: &Tensor3, idx: usize, layer: &LayerSpec, store: &WeightStore, skip: Option<&[bool]>) -> Result<Tensor3> {
    match layer {
        LayerSpec::Conv(c) => {
            let mut y = tensor::conv2d(x, c, store.get(idx, "kernel")?, store.get(idx, "bias")?)?;
            if c.relu {
                tensor::relu_inplace(&mut y);
            }
            Ok(y)
        }
        LayerSpec::MaxPool(p) => tensor::max_pool(x, p),
        LayerSpec::PatchEmbed(p) => tensor::patch_embed(x, p, store.get(idx, "kernel")?, store.get(idx, "bias")?),
        LayerSpec::LocalAttention(a) => {
            let w = AttentionWeights {
                wq: store.get(idx, "wq")?,
                bq: store.get(idx, "bq")?,
                wk: store.get(idx, "wk")?,
                bk: store.get(idx, "bk")?,
                wv: store.get(idx, "wv")?,
                bv: store.get(idx, "bv")?,
                wo: store.get(idx, "wo")?,
                bo: store.get(idx, "bo")?,
            };
            tensor::local_attention(x, a, &w)
        }
        LayerSpec::LayerNorm { .. } => tensor::layer_norm(x, store.get(idx, "gain")?, store.get(idx, "bias")?),
        LayerSpec::Mlp { hidden, .. } => tensor::mlp(
            x,
            *hidden,
            store.get(idx, "w1")?,
            store.get(idx, "b1")?,
            store.get(idx, "w2")?,
            store.get(idx, "b2")?,
        ),
        LayerSpec::PooledLinearHead { n_classes, .. } => {
            let scores = tensor::pooled_linear_head(x, store.get(idx, "weight")?, store.get(idx, "bias")?, skip)?;
            Tensor3::new(1, 1, *n_classes, scores)
        }
    }
}

/// Full forward pass of an unsplit model, returning class scores.
pub fn forward(spec: &ModelSpec, store: &WeightStore, x: &Tensor3) -> Result<Vec<f32>> {
    Ok(Stack::new(0, &spec.layers()).forward(x, store, None)?.into_data())
}

/// Toy ViT configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image: (usize, usize, usize),
    /// Pixel size of one square token.
    pub patch: usize,
    pub depth: usize,
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Attention sub-group in tokens; the full token grid gives global attention.
    pub group: (usize, usize),
    pub n_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image: (48, 48, 3),
            patch: 8,
            depth: 4,
            d: 32,
            heads: 2,
            hidden: 64,
            group: (6, 6),
            n_classes: 8,
        }
    }
}

impl VitConfig {
    pub fn tokens(&self) -> (usize, usize) {
        (self.image.0 / self.patch, self.image.1 / self.patch)
    }
}

/// PatchEmbed followed by `depth` x (LayerNorm, attention, LayerNorm, MLP) and
/// a pooled linear head.
pub fn build_vit_srf(cfg: &VitConfig, seed: u64) -> Result<(ModelSpec, WeightStore)> {
    let (th, tw) = cfg.tokens();
    if cfg.patch == 0 || !cfg.image.0.is_multiple_of(cfg.patch) || !cfg.image.1.is_multiple_of(cfg.patch) {
        return Err(Error::config(format!(
            "{}x{} image is not divisible into {}-pixel tokens",
            cfg.image.0, cfg.image.1, cfg.patch
        )));
    }
    let (gh, gw) = cfg.group;
    if gh == 0 || gw == 0 || th % gh != 0 || tw % gw != 0 {
        return Err(Error::config(format!(
            "attention group {gh}x{gw} does not tile the {th}x{tw} token grid"
        )));
    }
    let d = cfg.d;
    let block = vec![
        LayerSpec::LayerNorm { d },
        LayerSpec::LocalAttention(AttentionSpec {
            gh,
            gw,
            heads: cfg.heads,
            d,
        }),
        LayerSpec::LayerNorm { d },
        LayerSpec::Mlp { d, hidden: cfg.hidden },
    ];
    let spec = ModelSpec {
        name: format!("vit{gh}x{gw}-d{}", cfg.depth),
        input: cfg.image,
        n_classes: cfg.n_classes,
        stem: vec![LayerSpec::PatchEmbed(PatchEmbedSpec {
            ph: cfg.patch,
            pw: cfg.patch,
            cin: cfg.image.2,
            d,
        })],
        blocks: vec![block; cfg.depth],
        head: vec![LayerSpec::PooledLinearHead {
            d,
            n_classes: cfg.n_classes,
        }],
    };
    spec.validate()?;
    let store = WeightStore::init(&spec, seed);
    Ok((spec, store))
}

/// Receptive fields reachable by the BagNet-style template.
pub const BAGNET_RF: [usize; 6] = [1, 3, 5, 9, 17, 33];

/// Stem conv plus four conv blocks: the first `n` blocks are 3x3 stride 2, the
/// rest 1x1 stride 1, giving `r = 2^(n+1) + 1` and stride `2^n`. A target of
/// 1 makes every kernel 1x1.
pub fn build_bagnet_toy(
    image: (usize, usize, usize),
    rf_target: usize,
    n_classes: usize,
    width: usize,
    seed: u64,
) -> Result<(ModelSpec, WeightStore)> {
    let Some(pos) = BAGNET_RF.iter().position(|&r| r == rf_target) else {
        return Err(Error::config(format!(
            "receptive field {rf_target} is not reachable; achievable values are {BAGNET_RF:?}"
        )));
    };
    let conv = |k: usize, s: usize, cin: usize| {
        LayerSpec::Conv(ConvSpec {
            kh: k,
            kw: k,
            sh: s,
            sw: s,
            pad: Padding::Valid,
            cin,
            cout: width,
            relu: true,
        })
    };
    let stem_k = if pos == 0 { 1 } else { 3 };
    let strided = pos.saturating_sub(1);
    let blocks = (0..4)
        .map(|b| {
            if b < strided {
                vec![conv(3, 2, width)]
            } else {
                vec![conv(1, 1, width)]
            }
        })
        .collect();
    let spec = ModelSpec {
        name: format!("bagnet{rf_target}"),
        input: image,
        n_classes,
        stem: vec![conv(stem_k, 1, image.2)],
        blocks,
        head: vec![LayerSpec::PooledLinearHead { d: width, n_classes }],
    };
    spec.validate()?;
    let store = WeightStore::init(&spec, seed);
    Ok((spec, store))
}

/// Replaces every attention layer with sub-group attention over `group`.
pub fn to_srf(prefix: &[LayerSpec], group: (usize, usize)) -> Result<Vec<LayerSpec>> {
    prefix
        .iter()
        .map(|layer| match *layer {
            LayerSpec::LocalAttention(a) => Ok(LayerSpec::LocalAttention(AttentionSpec {
                gh: group.0,
                gw: group.1,
                ..a
            })),
            LayerSpec::PatchEmbed(_) | LayerSpec::LayerNorm { .. } | LayerSpec::Mlp { .. } => Ok(*layer),
            other => Err(Error::config(format!(
                "cannot convert {other:?} to a small receptive field by narrowing attention"
            ))),
        })
        .collect()
}

const MAGIC: &[u8; 4] = b"PCW1";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    spec_hash: String,
    seed: u64,
    blocks: Vec<BlockEntry>,
}

/// Writes `PCW1`, a length-prefixed JSON header, raw little-endian f32 blocks
/// and a trailing FNV-1a checksum of everything before it.
pub fn encode_weights(store: &WeightStore, spec_hash: u64) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, b) in &store.blocks {
        entries.push(BlockEntry {
            name: name.clone(),
            shape: b.shape.clone(),
            offset,
        });
        offset += b.data.len() * 4;
    }
    let header = Header {
        version: WEIGHT_FORMAT_VERSION,
        spec_hash: format!("{spec_hash:016x}"),
        seed: store.seed,
        blocks: entries,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for b in store.blocks.values() {
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Parses a weight file, returning the store and the recorded spec hash.
pub fn decode_weights(bytes: &[u8]) -> Result<(WeightStore, u64)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing PCW1 magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let hlen = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
    let data_start = 8 + hlen;
    if data_start > body.len() {
        return Err(Error::Format("header length runs past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&body[8..data_start])?;
    if header.version != WEIGHT_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "weight file",
            found: header.version,
            supported: WEIGHT_FORMAT_VERSION,
        });
    }
    let spec_hash = u64::from_str_radix(&header.spec_hash, 16)
        .map_err(|_| Error::Format(format!("bad spec hash `{}`", header.spec_hash)))?;
    let data = &body[data_start..];
    let mut blocks = BTreeMap::new();
    for e in header.blocks {
        let len: usize = e.shape.iter().product();
        let end = e.offset + len * 4;
        if end > data.len() {
            return Err(Error::WeightBlock {
                name: e.name,
                reason: "extends past the data section".into(),
            });
        }
        let values = data[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        blocks.insert(
            e.name,
            WeightBlock {
                shape: e.shape,
                data: values,
            },
        );
    }
    Ok((
        WeightStore {
            seed: header.seed,
            blocks,
        },
        spec_hash,
    ))
}

pub fn save_weights(path: &Path, store: &WeightStore, spec: &ModelSpec) -> Result<()> {
    let bytes = encode_weights(store, spec.hash());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(WeightStore, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads weights and checks them against `spec`.
pub fn load_weights_for(path: &Path, spec: &ModelSpec) -> Result<WeightStore> {
    let (store, hash) = load_weights(path)?;
    if hash != spec.hash() {
        return Err(Error::Format(format!(
            "weights were saved for spec {hash:016x}, manifest spec is {:016x}",
            spec.hash()
        )));
    }
    store.check_against(spec)?;
    Ok(store)
}
