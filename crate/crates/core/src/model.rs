//! The three pair models behind one type, and their checkpoint container.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic  b"OSHOTCKP"
//! u32    format version (1)
//! u64    manifest length n
//! [u8;n] UTF-8 JSON manifest: model spec, threshold, parameter names+shapes
//! f64*   parameter values, concatenated in manifest order
//! ```

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capsules::{longest_capsule, CapsNet, CapsNetConfig};
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::image::{self, Image};
use crate::layers::{CnnConfig, LayerStack};
use crate::pairing::{merge, MergeMode, PairSample};
use crate::params::ParamStore;
use crate::seed;
use crate::tensor::{Tape, Tensor, Var};

/// The three identification approaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Approach {
    #[serde(rename = "merged")]
    Merged,
    #[serde(rename = "siamese-cnn")]
    SiameseCnn,
    #[serde(rename = "siamese-capsnet")]
    SiameseCapsnet,
}

impl Approach {
    pub fn name(self) -> &'static str {
        match self {
            Approach::Merged => "merged",
            Approach::SiameseCnn => "siamese-cnn",
            Approach::SiameseCapsnet => "siamese-capsnet",
        }
    }

    pub fn is_siamese(self) -> bool {
        self != Approach::Merged
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Approach {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merged" => Ok(Approach::Merged),
            "siamese-cnn" => Ok(Approach::SiameseCnn),
            "siamese-capsnet" => Ok(Approach::SiameseCapsnet),
            other => Err(Error::Config(format!(
                "unknown approach {other:?} (merged, siamese-cnn, siamese-capsnet)"
            ))),
        }
    }
}

/// Architecture of a pair model, sufficient to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "approach", rename_all = "kebab-case")]
pub enum ModelSpec {
    Merged { cnn: CnnConfig, mode: MergeMode },
    SiameseCnn { cnn: CnnConfig },
    SiameseCapsnet { caps: CapsNetConfig },
}

/// Architecture overrides applied on top of the default towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub merge_mode: MergeMode,
    pub conv_filters: Option<Vec<usize>>,
    pub pool_after: Option<Vec<usize>>,
    pub dense: Option<Vec<usize>>,
    pub padding: Option<usize>,
    pub conv1_channels: Option<usize>,
    pub conv1_kernel: Option<usize>,
    pub feature_maps: Option<usize>,
    pub conv2_kernel: Option<usize>,
    pub conv2_stride: Option<usize>,
    pub primary_dim: Option<usize>,
    pub capsules: Option<usize>,
    pub capsule_dim: Option<usize>,
    pub routing_iters: Option<usize>,
    pub decoder_hidden: Option<Vec<usize>>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            merge_mode: MergeMode::Stacked,
            conv_filters: None,
            pool_after: None,
            dense: None,
            padding: None,
            conv1_channels: None,
            conv1_kernel: None,
            feature_maps: None,
            conv2_kernel: None,
            conv2_stride: None,
            primary_dim: None,
            capsules: None,
            capsule_dim: None,
            routing_iters: None,
            decoder_hidden: None,
        }
    }
}

impl ModelSpec {
    /// Spec for `approach` on images of shape `[H, W, C]`.
    pub fn new(approach: Approach, image_shape: [usize; 3], opts: &ModelOptions) -> ModelSpec {
        let [h, w, c] = image_shape;
        let tune = |mut cnn: CnnConfig| {
            if let Some(f) = &opts.conv_filters {
                cnn.conv_filters = f.clone();
            }
            if let Some(p) = &opts.pool_after {
                cnn.pool_after = p.clone();
            }
            if let Some(d) = &opts.dense {
                cnn.dense = d.clone();
            }
            if let Some(p) = opts.padding {
                cnn.padding = p;
            }
            cnn
        };
        match approach {
            Approach::Merged => {
                let input = opts.merge_mode.input_shape(image_shape);
                ModelSpec::Merged {
                    cnn: tune(CnnConfig::merged(&input)),
                    mode: opts.merge_mode,
                }
            }
            Approach::SiameseCnn => ModelSpec::SiameseCnn {
                cnn: tune(CnnConfig::siamese(&[c, h, w])),
            },
            Approach::SiameseCapsnet => {
                let mut caps = CapsNetConfig::new(&[c, h, w]);
                let set = |slot: &mut usize, v: Option<usize>| {
                    if let Some(v) = v {
                        *slot = v;
                    }
                };
                set(&mut caps.conv1_channels, opts.conv1_channels);
                set(&mut caps.conv1_kernel, opts.conv1_kernel);
                set(&mut caps.feature_maps, opts.feature_maps);
                set(&mut caps.conv2_kernel, opts.conv2_kernel);
                set(&mut caps.conv2_stride, opts.conv2_stride);
                set(&mut caps.primary_dim, opts.primary_dim);
                set(&mut caps.capsules, opts.capsules);
                set(&mut caps.capsule_dim, opts.capsule_dim);
                set(&mut caps.routing_iters, opts.routing_iters);
                if let Some(d) = &opts.decoder_hidden {
                    caps.decoder_hidden = d.clone();
                }
                ModelSpec::SiameseCapsnet { caps }
            }
        }
    }

    pub fn approach(&self) -> Approach {
        match self {
            ModelSpec::Merged { .. } => Approach::Merged,
            ModelSpec::SiameseCnn { .. } => Approach::SiameseCnn,
            ModelSpec::SiameseCapsnet { .. } => Approach::SiameseCapsnet,
        }
    }

    /// `[H, W, C]` of the source images the model accepts.
    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            ModelSpec::Merged { cnn, mode } => {
                let [c, h, w] = cnn.input_shape[..] else { return [0; 3] };
                match mode {
                    MergeMode::Stacked => [h, w, c / 2],
                    MergeMode::HJoin => [h, w / 2, c],
                    MergeMode::VJoin => [h / 2, w, c],
                }
            }
            ModelSpec::SiameseCnn { cnn } => {
                let [c, h, w] = cnn.input_shape[..] else { return [0; 3] };
                [h, w, c]
            }
            ModelSpec::SiameseCapsnet { caps } => {
                let [c, h, w] = caps.input_shape[..] else { return [0; 3] };
                [h, w, c]
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Merged(LayerStack, MergeMode),
    SiameseCnn(LayerStack),
    SiameseCaps(CapsNet),
}

/// What a pair forward pass produced.
pub enum PairOutput {
    /// `[B, 2]` logits, index 1 meaning "same".
    Logits(Var),
    Embeddings {
        a: Var,
        b: Var,
        /// Capsule vectors `[B, J, D]` of each side, for capsule towers.
        capsules: Option<(Var, Var)>,
    },
}

/// A pair model with its parameters and decision threshold.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    net: Net,
    threshold: Option<f64>,
}

impl Model {
    /// Builds the model with parameters initialized from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        let mut rng = seed::derived_rng(seed, "init", 0);
        let mut store = ParamStore::new();
        let net = match &spec {
            ModelSpec::Merged { cnn, mode } => Net::Merged(cnn.build(&mut store, "merged", &mut rng)?, *mode),
            ModelSpec::SiameseCnn { cnn } => Net::SiameseCnn(cnn.build(&mut store, "tower", &mut rng)?),
            ModelSpec::SiameseCapsnet { caps } => Net::SiameseCaps(CapsNet::build(caps, &mut store, &mut rng)?),
        };
        if let Net::Merged(stack, _) | Net::SiameseCnn(stack) = &net {
            if spec.approach() == Approach::Merged && stack.output_shape() != [2] {
                return Err(Error::Config(format!(
                    "merged classifier must end in 2 logits, has {:?}",
                    stack.output_shape()
                )));
            }
        }
        Ok(Model {
            spec,
            store,
            net,
            threshold: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn approach(&self) -> Approach {
        self.spec.approach()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Distance below which a siamese model calls a pair "same".
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn set_threshold(&mut self, t: Option<f64>) {
        self.threshold = t;
    }

    pub fn capsnet(&self) -> Option<&CapsNet> {
        match &self.net {
            Net::SiameseCaps(c) => Some(c),
            _ => None,
        }
    }

    pub fn capsnet_mut(&mut self) -> Option<&mut CapsNet> {
        match &mut self.net {
            Net::SiameseCaps(c) => Some(c),
            _ => None,
        }
    }

    /// Fails unless the dataset's images fit this model.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        match ds.image_shape() {
            Some(s) if s != self.spec.image_shape() => Err(shape_err!(
                "model expects images of shape {:?}, dataset has {s:?}",
                self.spec.image_shape()
            )),
            _ => Ok(()),
        }
    }

    fn side_batch(ds: &Dataset, idx: impl Iterator<Item = usize>) -> Result<Tensor> {
        let imgs: Vec<&Image> = idx.map(|i| ds.image(i)).collect();
        image::batch(&imgs)
    }

    /// Runs a batch of pairs through the model.
    pub fn forward_pairs(&self, tape: &mut Tape, ds: &Dataset, pairs: &[PairSample]) -> Result<PairOutput> {
        if pairs.is_empty() {
            return Err(Error::Data("empty pair batch".into()));
        }
        match &self.net {
            Net::Merged(stack, mode) => {
                let merged = pairs
                    .iter()
                    .map(|p| merge(ds.image(p.a), ds.image(p.b), *mode).map(|m| m.image))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Image> = merged.iter().collect();
                let x = tape.constant(image::batch(&refs)?);
                Ok(PairOutput::Logits(stack.forward(tape, &self.store, x)?))
            }
            Net::SiameseCnn(stack) => {
                let xa = tape.constant(Self::side_batch(ds, pairs.iter().map(|p| p.a))?);
                let xb = tape.constant(Self::side_batch(ds, pairs.iter().map(|p| p.b))?);
                let a = stack.forward(tape, &self.store, xa)?;
                let b = stack.forward(tape, &self.store, xb)?;
                Ok(PairOutput::Embeddings { a, b, capsules: None })
            }
            Net::SiameseCaps(caps) => {
                let n = pairs.len();
                let xa = tape.constant(Self::side_batch(ds, pairs.iter().map(|p| p.a))?);
                let xb = tape.constant(Self::side_batch(ds, pairs.iter().map(|p| p.b))?);
                let ea = caps.encode(tape, &self.store, xa)?;
                let eb = caps.encode(tape, &self.store, xb)?;
                let a = tape.reshape(ea.capsules, &[n, caps.embedding_dim()])?;
                let b = tape.reshape(eb.capsules, &[n, caps.embedding_dim()])?;
                Ok(PairOutput::Embeddings {
                    a,
                    b,
                    capsules: Some((ea.capsules, eb.capsules)),
                })
            }
        }
    }

    /// Embeddings `[N, d]` of single images (siamese models only).
    pub fn embed(&self, ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(Self::side_batch(ds, indices.iter().copied())?);
        let e = match &self.net {
            Net::SiameseCnn(stack) => stack.forward(&mut tape, &self.store, x)?,
            Net::SiameseCaps(caps) => caps.embed(&mut tape, &self.store, x)?,
            Net::Merged(..) => return Err(Error::Config("merged models do not embed single images".into())),
        };
        Ok(tape.value(e).clone())
    }

    /// Index of the longest capsule per sample of `[N, J, D]` capsule values.
    pub fn capsule_masks(v: &Tensor) -> Result<Vec<usize>> {
        let s = v.shape();
        if s.len() != 3 {
            return Err(shape_err!("capsule masks need [N, J, D], got {s:?}"));
        }
        let per = s[1] * s[2];
        (0..s[0])
            .map(|n| {
                let one = Tensor::new(vec![s[1], s[2]], v.data()[n * per..(n + 1) * per].to_vec())?;
                longest_capsule(&one)
            })
            .collect()
    }

    /// Writes the checkpoint container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            spec: self.spec.clone(),
            threshold: self.threshold,
            reconstruction_loss: self.capsnet().and_then(CapsNet::reconstruction_loss),
            params: self
                .store
                .iter()
                .map(|(_, name, t)| ParamEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.store.count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(path.display()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        let trunc = |_| Error::Format("checkpoint truncated".into());
        r.read_exact(&mut magic).map_err(trunc)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(trunc)?;
        let version = u32::from_le_bytes(u32b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(trunc)?;
        let len = u64::from_le_bytes(u64b) as usize;
        if r.len() < len {
            return Err(Error::Format("checkpoint manifest truncated".into()));
        }
        let manifest: Manifest =
            serde_json::from_slice(&r[..len]).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        r = &r[len..];
        let mut model = Model::build(manifest.spec, 0)?;
        if model.store.len() != manifest.params.len() {
            return Err(Error::Format(format!(
                "manifest lists {} parameters, architecture has {}",
                manifest.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, entry) in ids.into_iter().zip(&manifest.params) {
            if model.store.name(id) != entry.name || model.store.get(id).shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match architecture {} {:?}",
                    entry.name,
                    entry.shape,
                    model.store.name(id),
                    model.store.get(id).shape()
                )));
            }
            let n: usize = entry.shape.iter().product();
            if r.len() < 8 * n {
                return Err(Error::Format(format!("parameter {} truncated", entry.name)));
            }
            let vals = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[8 * n..];
            model.store.set(id, Tensor::new(entry.shape.clone(), vals)?)?;
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.len())));
        }
        model.threshold = manifest.threshold;
        if let Some(c) = model.capsnet_mut() {
            c.set_reconstruction_loss(manifest.reconstruction_loss);
        }
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OSHOTCKP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    threshold: Option<f64>,
    reconstruction_loss: Option<f64>,
    params: Vec<ParamEntry>,
}
