//! Configurable staged denoising network.
//!
//! The network mirrors the usual encoder/decoder layout: `Dn` stages that
//! halve the token count, a `Mid` stage, and `Up` stages that restore it,
//! with a skip connection from each `Dn` stage end into the matching `Up`
//! stage. Interior residual and token-mixer layers are shape preserving, so
//! any subset of them can be removed without breaking the forward pass;
//! samplers, skip projections, conditioning, and the output head are not
//! removable.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Tensor, TensorError};
use crate::textio::fnv1a64;

const CHECKPOINT_MAGIC: &str = "slimnet-checkpoint v1";

/// Result alias for network operations.
pub type NetResult<T> = Result<T, NetError>;

/// Errors emitted by network construction, evaluation, and persistence.
#[derive(Debug)]
pub enum NetError {
    InvalidSpec(String),
    UnknownLayer(LayerId),
    NotPrunable(LayerId),
    CondOutOfRange { y: usize, vocab: usize },
    InputShape { expected: (usize, usize), got: Vec<usize> },
    Tensor(TensorError),
    Io(std::io::Error),
    Format(String),
    VersionMismatch { found: String },
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::InvalidSpec(msg) => write!(f, "invalid network spec: {msg}"),
            NetError::UnknownLayer(id) => write!(f, "unknown layer {id}"),
            NetError::NotPrunable(id) => write!(f, "layer {id} is not prunable"),
            NetError::CondOutOfRange { y, vocab } => {
                write!(f, "condition id {y} out of range for vocabulary {vocab}")
            }
            NetError::InputShape { expected, got } => {
                write!(f, "input shape {got:?} does not match ({}, {})", expected.0, expected.1)
            }
            NetError::Tensor(e) => write!(f, "tensor error: {e}"),
            NetError::Io(e) => write!(f, "io error: {e}"),
            NetError::Format(msg) => write!(f, "checkpoint format error: {msg}"),
            NetError::VersionMismatch { found } => {
                write!(f, "checkpoint version mismatch: found {found:?}, expected {CHECKPOINT_MAGIC:?}")
            }
        }
    }
}

impl std::error::Error for NetError {}

impl From<TensorError> for NetError {
    fn from(e: TensorError) -> Self {
        NetError::Tensor(e)
    }
}

impl From<std::io::Error> for NetError {
    fn from(e: std::io::Error) -> Self {
        NetError::Io(e)
    }
}

/// Stage identifier. `Dn(k)` and `Up(k)` pair through a skip connection;
/// smaller `k` is shallower (closer to input/output).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageId {
    Dn(usize),
    Mid,
    Up(usize),
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageId::Dn(k) => write!(f, "dn{k}"),
            StageId::Mid => write!(f, "mid"),
            StageId::Up(k) => write!(f, "up{k}"),
        }
    }
}

impl std::str::FromStr for StageId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "mid" {
            return Ok(StageId::Mid);
        }
        if let Some(k) = s.strip_prefix("dn") {
            return k.parse().map(StageId::Dn).map_err(|e| e.to_string());
        }
        if let Some(k) = s.strip_prefix("up") {
            return k.parse().map(StageId::Up).map_err(|e| e.to_string());
        }
        Err(format!("unrecognized stage id {s:?}"))
    }
}

/// Kind of a named layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerKind {
    Residual,
    Mixer,
    Sampler,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Residual => write!(f, "residual"),
            LayerKind::Mixer => write!(f, "mixer"),
            LayerKind::Sampler => write!(f, "sampler"),
        }
    }
}

/// Identifier of a layer: stage, position within the stage, and kind.
/// For residual/mixer layers `index` is the position in the stage's prunable
/// layer sequence; samplers have their own index space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub stage: StageId,
    pub index: usize,
    pub kind: LayerKind,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.stage, self.kind, self.index)
    }
}

/// Construction parameters of a network. `widths[k]` is the channel width at
/// depth level `k`; the Mid stage reuses the deepest width. `stage_res` and
/// `stage_mix` give per-stage layer counts in network order
/// (Dn0..Dn(K-1), Mid, Up(K-1)..Up0), so they have length `2K + 1`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub tokens: usize,
    pub widths: Vec<usize>,
    pub stage_res: Vec<usize>,
    pub stage_mix: Vec<usize>,
    pub cond_vocab: usize,
    pub embed_width: usize,
    pub seed: u64,
}

impl NetworkSpec {
    /// Desk-scale default: 2 Dn stages + Mid + 2 Up stages, 25 prunable layers.
    pub fn default_with_seed(seed: u64) -> Self {
        NetworkSpec {
            tokens: 16,
            widths: vec![8, 16],
            stage_res: vec![3; 5],
            stage_mix: vec![2; 5],
            cond_vocab: 8,
            embed_width: 8,
            seed,
        }
    }

    /// Number of Dn stages (equals the number of Up stages).
    pub fn num_dn_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> NetResult<()> {
        let k = self.widths.len();
        if k == 0 {
            return Err(NetError::InvalidSpec("widths must list at least one stage".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidSpec("zero-width stage".into()));
        }
        let n_stages = 2 * k + 1;
        if self.stage_res.len() != n_stages || self.stage_mix.len() != n_stages {
            return Err(NetError::InvalidSpec(format!(
                "stage_res/stage_mix must have {n_stages} entries (Dn0..Dn{}, Mid, Up{}..Up0)",
                k - 1,
                k - 1
            )));
        }
        if self.tokens % (1 << k) != 0 || self.tokens >> k == 0 {
            return Err(NetError::InvalidSpec(format!(
                "token count {} must be a positive multiple of 2^{k}",
                self.tokens
            )));
        }
        if self.cond_vocab == 0 {
            return Err(NetError::InvalidSpec("condition vocabulary must be nonempty".into()));
        }
        if self.embed_width == 0 {
            return Err(NetError::InvalidSpec("embedding width must be positive".into()));
        }
        Ok(())
    }

    /// Stage ids in network (execution) order.
    pub fn stage_order(&self) -> Vec<StageId> {
        let k = self.num_dn_stages();
        let mut order: Vec<StageId> = (0..k).map(StageId::Dn).collect();
        order.push(StageId::Mid);
        order.extend((0..k).rev().map(StageId::Up));
        order
    }

    /// (tokens, width) at a stage.
    pub fn stage_dims(&self, stage: StageId) -> (usize, usize) {
        let k = self.num_dn_stages();
        match stage {
            StageId::Dn(i) | StageId::Up(i) => (self.tokens >> i, self.widths[i]),
            StageId::Mid => (self.tokens >> k, self.widths[k - 1]),
        }
    }

    fn stage_slot(&self, stage: StageId) -> usize {
        let k = self.num_dn_stages();
        match stage {
            StageId::Dn(i) => i,
            StageId::Mid => k,
            StageId::Up(i) => 2 * k - i,
        }
    }

    /// Per-stage prunable layer kinds, interleaved residual-first.
    fn stage_layer_kinds(&self, stage: StageId) -> Vec<LayerKind> {
        let slot = self.stage_slot(stage);
        let (mut res, mut mix) = (self.stage_res[slot], self.stage_mix[slot]);
        let mut kinds = Vec::with_capacity(res + mix);
        while res > 0 || mix > 0 {
            if res > 0 {
                kinds.push(LayerKind::Residual);
                res -= 1;
            }
            if mix > 0 {
                kinds.push(LayerKind::Mixer);
                mix -= 1;
            }
        }
        kinds
    }
}

/// A named parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Forward outputs: the noise prediction plus the feature map captured at the
/// end of every stage, in network order.
pub struct ForwardOut<'g> {
    pub eps: Tensor<'g>,
    pub taps: Vec<(StageId, Tensor<'g>)>,
}

impl<'g> ForwardOut<'g> {
    pub fn tap(&self, stage: StageId) -> Option<Tensor<'g>> {
        self.taps.iter().find(|(s, _)| *s == stage).map(|(_, t)| *t)
    }
}

/// The staged denoising network: spec, named parameters, and the set of
/// removed layers. Removal is non-destructive; parameters of removed layers
/// stay in storage and are simply skipped by the forward pass.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: BTreeMap<String, Param>,
    removed: BTreeSet<LayerId>,
}

fn prefix(stage: StageId, index: usize) -> String {
    format!("{stage}.l{index:02}")
}

/// Parameter name suffixes of a prunable layer.
fn layer_suffixes(kind: LayerKind) -> &'static [&'static str] {
    match kind {
        LayerKind::Residual => &["w1", "b1", "w2", "b2"],
        LayerKind::Mixer => &["tm1", "tm2", "cw1", "cb1", "cw2", "cb2"],
        LayerKind::Sampler => &[],
    }
}

impl Network {
    /// Build a network with seeded parameter initialization.
    pub fn build(spec: &NetworkSpec) -> NetResult<Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = BTreeMap::new();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut fill = |params: &mut BTreeMap<String, Param>, name: String, shape: Vec<usize>, std: f64| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) * std).collect();
            params.insert(name, Param { shape, data });
        };

        let e = spec.embed_width;
        fill(&mut params, "cond.embed".into(), vec![spec.cond_vocab, e], 1.0);

        let k = spec.num_dn_stages();
        for stage in spec.stage_order() {
            let (t, w) = spec.stage_dims(stage);
            let sw = 1.0 / (w as f64).sqrt();
            let st = 1.0 / (t as f64).sqrt();
            // Residual branch outputs are damped so depth does not blow up
            // feature scales.
            let out_damp = 0.3;
            fill(&mut params, format!("{stage}.cond.w"), vec![e, w], 1.0 / (e as f64).sqrt());
            fill(&mut params, format!("{stage}.cond.b"), vec![1, w], 0.1);
            for (i, kind) in spec.stage_layer_kinds(stage).iter().enumerate() {
                let p = prefix(stage, i);
                match kind {
                    LayerKind::Residual => {
                        fill(&mut params, format!("{p}.w1"), vec![w, w], sw);
                        fill(&mut params, format!("{p}.b1"), vec![1, w], 0.1);
                        fill(&mut params, format!("{p}.w2"), vec![w, w], sw * out_damp);
                        fill(&mut params, format!("{p}.b2"), vec![1, w], 0.1 * out_damp);
                    }
                    LayerKind::Mixer => {
                        fill(&mut params, format!("{p}.tm1"), vec![t, t], st);
                        fill(&mut params, format!("{p}.tm2"), vec![t, t], st * out_damp);
                        fill(&mut params, format!("{p}.cw1"), vec![w, w], sw);
                        fill(&mut params, format!("{p}.cb1"), vec![1, w], 0.1);
                        fill(&mut params, format!("{p}.cw2"), vec![w, w], sw * out_damp);
                        fill(&mut params, format!("{p}.cb2"), vec![1, w], 0.1 * out_damp);
                    }
                    LayerKind::Sampler => unreachable!("samplers are not stage layers"),
                }
            }
            match stage {
                StageId::Dn(i) => {
                    let (tn, wn) = if i + 1 < k {
                        spec.stage_dims(StageId::Dn(i + 1))
                    } else {
                        spec.stage_dims(StageId::Mid)
                    };
                    fill(&mut params, format!("down{i}.p"), vec![tn, t], st);
                    fill(&mut params, format!("down{i}.q"), vec![w, wn], sw);
                    fill(&mut params, format!("down{i}.b"), vec![1, wn], 0.1);
                }
                StageId::Up(i) => {
                    let (tb, wb) = if i + 1 < k {
                        spec.stage_dims(StageId::Up(i + 1))
                    } else {
                        spec.stage_dims(StageId::Mid)
                    };
                    fill(&mut params, format!("upsamp{i}.p"), vec![t, tb], 1.0 / (tb as f64).sqrt());
                    fill(&mut params, format!("upsamp{i}.q"), vec![wb, w], 1.0 / (wb as f64).sqrt());
                    fill(&mut params, format!("upsamp{i}.b"), vec![1, w], 0.1);
                    fill(&mut params, format!("skip{i}.w"), vec![2 * w, w], 1.0 / (2.0 * w as f64).sqrt());
                    fill(&mut params, format!("skip{i}.b"), vec![1, w], 0.1);
                }
                StageId::Mid => {}
            }
        }
        let w0 = spec.widths[0];
        fill(&mut params, "head.w".into(), vec![w0, w0], 1.0 / (w0 as f64).sqrt());
        fill(&mut params, "head.b".into(), vec![1, w0], 0.1);

        Ok(Network { spec: spec.clone(), params, removed: BTreeSet::new() })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Param> {
        &self.params
    }

    /// Mutable parameter access, used by training updates and by fixtures
    /// that overwrite weights.
    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Param> {
        &mut self.params
    }

    pub fn removed(&self) -> &BTreeSet<LayerId> {
        &self.removed
    }

    /// Expected input/output shape `(tokens, width)`.
    pub fn input_shape(&self) -> (usize, usize) {
        (self.spec.tokens, self.spec.widths[0])
    }

    /// All prunable layers in network order, including removed ones.
    pub fn prunable_layers_full(&self) -> Vec<LayerId> {
        let mut out = Vec::new();
        for stage in self.spec.stage_order() {
            for (i, kind) in self.spec.stage_layer_kinds(stage).iter().enumerate() {
                out.push(LayerId { stage, index: i, kind: *kind });
            }
        }
        out
    }

    /// Surviving prunable layers in network order.
    pub fn prunable_layers(&self) -> Vec<LayerId> {
        self.prunable_layers_full()
            .into_iter()
            .filter(|id| !self.removed.contains(id))
            .collect()
    }

    /// Every identified layer: prunable layers plus samplers/skip projections.
    pub fn all_layers(&self) -> Vec<LayerId> {
        let mut out = self.prunable_layers_full();
        let k = self.spec.num_dn_stages();
        for i in 0..k {
            out.push(LayerId { stage: StageId::Dn(i), index: 0, kind: LayerKind::Sampler });
            out.push(LayerId { stage: StageId::Up(i), index: 0, kind: LayerKind::Sampler });
            out.push(LayerId { stage: StageId::Up(i), index: 1, kind: LayerKind::Sampler });
        }
        out
    }

    fn contains_layer(&self, id: &LayerId) -> bool {
        match id.kind {
            LayerKind::Sampler => {
                let k = self.spec.num_dn_stages();
                match id.stage {
                    StageId::Dn(i) => i < k && id.index == 0,
                    StageId::Up(i) => i < k && id.index <= 1,
                    StageId::Mid => false,
                }
            }
            _ => {
                let kinds = self.spec.stage_layer_kinds(id.stage);
                match id.stage {
                    StageId::Dn(i) | StageId::Up(i) if i >= self.spec.num_dn_stages() => false,
                    _ => kinds.get(id.index).is_some_and(|k| *k == id.kind),
                }
            }
        }
    }

    /// Parameter names owned by a layer.
    pub fn layer_param_names(&self, id: &LayerId) -> NetResult<Vec<String>> {
        if !self.contains_layer(id) {
            return Err(NetError::UnknownLayer(*id));
        }
        Ok(match id.kind {
            LayerKind::Sampler => match id.stage {
                StageId::Dn(i) => {
                    vec![format!("down{i}.p"), format!("down{i}.q"), format!("down{i}.b")]
                }
                StageId::Up(i) if id.index == 0 => {
                    vec![format!("upsamp{i}.p"), format!("upsamp{i}.q"), format!("upsamp{i}.b")]
                }
                StageId::Up(i) => vec![format!("skip{i}.w"), format!("skip{i}.b")],
                StageId::Mid => unreachable!(),
            },
            kind => {
                let p = prefix(id.stage, id.index);
                layer_suffixes(kind).iter().map(|s| format!("{p}.{s}")).collect()
            }
        })
    }

    /// Exact parameter count of a layer (its knapsack weight).
    pub fn param_count(&self, id: &LayerId) -> NetResult<u64> {
        let names = self.layer_param_names(id)?;
        Ok(names.iter().map(|n| self.params[n].len() as u64).sum())
    }

    /// Total parameter count of the network, including non-prunable parts.
    pub fn total_params(&self) -> u64 {
        self.params.values().map(|p| p.len() as u64).sum()
    }

    /// Total parameter count over all prunable layers (removed ones included;
    /// this is a property of the architecture, not of the current removal
    /// set).
    pub fn prunable_params(&self) -> u64 {
        self.prunable_layers_full()
            .iter()
            .map(|id| self.param_count(id).expect("layer from own layout"))
            .sum()
    }

    /// Fraction of total parameters held by prunable layers.
    pub fn prunable_fraction(&self) -> f64 {
        self.prunable_params() as f64 / self.total_params() as f64
    }

    /// Return a copy of the network with `removal` additionally removed.
    /// The receiver is untouched; removal is idempotent set union.
    pub fn remove_layers(&self, removal: &BTreeSet<LayerId>) -> NetResult<Network> {
        for id in removal {
            if !self.contains_layer(id) {
                return Err(NetError::UnknownLayer(*id));
            }
            if id.kind == LayerKind::Sampler {
                return Err(NetError::NotPrunable(*id));
            }
        }
        let mut next = self.clone();
        next.removed.extend(removal.iter().copied());
        Ok(next)
    }

    /// Deterministic fingerprint over the spec, parameters, and removal set.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(format!("{:?}", self.spec).as_bytes());
        for (name, p) in &self.params {
            bytes.extend_from_slice(name.as_bytes());
            for v in &p.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for id in &self.removed {
            bytes.extend_from_slice(id.to_string().as_bytes());
        }
        fnv1a64(&bytes)
    }

    /// Register all parameters as graph leaves. With `trainable` set, leaves
    /// participate in backward and receive gradients.
    pub fn bind<'n, 'g>(&'n self, graph: &'g Graph, trainable: bool) -> BoundNet<'n, 'g> {
        let mut leaves = BTreeMap::new();
        for (name, p) in &self.params {
            let t = graph
                .leaf(p.shape.clone(), p.data.clone(), trainable)
                .expect("stored param shapes are consistent");
            leaves.insert(name.as_str(), t);
        }
        BoundNet { net: self, leaves }
    }

    /// Convenience single-input evaluation on a private graph. Returns the
    /// prediction and the per-stage feature taps as raw buffers.
    pub fn predict(
        &self,
        z: &[f64],
        y: usize,
        t: usize,
    ) -> NetResult<(Vec<f64>, Vec<(StageId, Vec<f64>)>)> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let (tok, w) = self.input_shape();
        if z.len() != tok * w {
            return Err(NetError::InputShape { expected: (tok, w), got: vec![z.len()] });
        }
        let zt = g.constant(vec![tok, w], z.to_vec())?;
        let out = bound.forward(zt, y, t)?;
        let taps = out.taps.iter().map(|(s, f)| (*s, f.data())).collect();
        Ok((out.eps.data(), taps))
    }

    // ── checkpoint io ───────────────────────────────────────────────────

    /// Write the checkpoint: text header (format version, spec echo, removal
    /// set, block count) followed by length-prefixed little-endian f64 blocks
    /// in sorted parameter-name order.
    pub fn save(&self, path: &Path) -> NetResult<()> {
        let mut buf = Vec::new();
        let s = &self.spec;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        writeln!(buf, "{CHECKPOINT_MAGIC}")?;
        writeln!(buf, "tokens={}", s.tokens)?;
        writeln!(buf, "widths={}", join(&s.widths))?;
        writeln!(buf, "stage_res={}", join(&s.stage_res))?;
        writeln!(buf, "stage_mix={}", join(&s.stage_mix))?;
        writeln!(buf, "cond_vocab={}", s.cond_vocab)?;
        writeln!(buf, "embed_width={}", s.embed_width)?;
        writeln!(buf, "seed={}", s.seed)?;
        let removed = self
            .removed
            .iter()
            .map(|id| format!("{}:{}", id.stage, id.index))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(buf, "removed={removed}")?;
        writeln!(buf, "params={}", self.params.len())?;
        writeln!(buf)?;
        for (name, p) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
            for v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Load a checkpoint written by [`Network::save`].
    pub fn load(path: &Path) -> NetResult<Network> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    fn from_bytes(bytes: &[u8]) -> NetResult<Network> {
        let header_end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| NetError::Format("missing header terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| NetError::Format("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != CHECKPOINT_MAGIC {
            return Err(NetError::VersionMismatch { found: magic.to_string() });
        }
        let mut kv = BTreeMap::new();
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NetError::Format(format!("malformed header line {line:?}")))?;
            kv.insert(key.to_string(), value.to_string());
        }
        let get = |k: &str| -> NetResult<&String> {
            kv.get(k).ok_or_else(|| NetError::Format(format!("missing header key {k:?}")))
        };
        let parse_u = |k: &str| -> NetResult<usize> {
            get(k)?.parse().map_err(|_| NetError::Format(format!("bad value for {k:?}")))
        };
        let parse_list = |k: &str| -> NetResult<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse().map_err(|_| NetError::Format(format!("bad value for {k:?}"))))
                .collect()
        };
        let spec = NetworkSpec {
            tokens: parse_u("tokens")?,
            widths: parse_list("widths")?,
            stage_res: parse_list("stage_res")?,
            stage_mix: parse_list("stage_mix")?,
            cond_vocab: parse_u("cond_vocab")?,
            embed_width: parse_u("embed_width")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| NetError::Format("bad value for \"seed\"".into()))?,
        };
        let mut net = Network::build(&spec)?;

        // Removal set: stage:index pairs over the prunable layout.
        let removed_str = get("removed")?;
        let mut removal = BTreeSet::new();
        if !removed_str.is_empty() {
            for pair in removed_str.split(';') {
                let (stage, index) = pair
                    .split_once(':')
                    .ok_or_else(|| NetError::Format(format!("malformed removal entry {pair:?}")))?;
                let stage: StageId =
                    stage.parse().map_err(|e| NetError::Format(format!("removal entry: {e}")))?;
                let index: usize = index
                    .parse()
                    .map_err(|_| NetError::Format(format!("malformed removal entry {pair:?}")))?;
                let kind = *spec
                    .stage_layer_kinds(stage)
                    .get(index)
                    .ok_or_else(|| NetError::Format(format!("removal entry {pair:?} out of range")))?;
                removal.insert(LayerId { stage, index, kind });
            }
        }
        net = net.remove_layers(&removal)?;

        // Parameter blocks.
        let n_params = parse_u("params")?;
        let mut pos = header_end + 2;
        let take = |pos: &mut usize, n: usize| -> NetResult<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(NetError::Format("truncated parameter block".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let mut seen = 0usize;
        for _ in 0..n_params {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| NetError::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let param = net
                .params
                .get_mut(&name)
                .ok_or_else(|| NetError::Format(format!("unexpected parameter {name:?}")))?;
            if param.len() != count {
                return Err(NetError::Format(format!(
                    "parameter {name:?} has {count} elements, expected {}",
                    param.len()
                )));
            }
            let raw = take(&mut pos, count * 8)?;
            for (i, chunk) in raw.chunks_exact(8).enumerate() {
                param.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            seen += 1;
        }
        if seen != net.params.len() {
            return Err(NetError::Format(format!(
                "checkpoint holds {seen} parameters, network expects {}",
                net.params.len()
            )));
        }
        if pos != bytes.len() {
            return Err(NetError::Format("trailing bytes after parameter blocks".into()));
        }
        Ok(net)
    }
}

/// Sinusoidal timestep embedding of width `e`.
pub fn timestep_embedding(t: usize, e: usize) -> Vec<f64> {
    let mut out = vec![0.0; e];
    let half = e / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half.max(1) as f64);
        out[2 * i] = (t as f64 * freq).sin();
        out[2 * i + 1] = (t as f64 * freq).cos();
    }
    if e % 2 == 1 {
        out[e - 1] = (t as f64).sin();
    }
    out
}

/// A network whose parameters are registered as leaves of one graph.
pub struct BoundNet<'n, 'g> {
    net: &'n Network,
    leaves: BTreeMap<&'n str, Tensor<'g>>,
}

impl<'n, 'g> BoundNet<'n, 'g> {
    fn p(&self, name: &str) -> Tensor<'g> {
        self.leaves[name]
    }

    pub fn leaf(&self, name: &str) -> Option<Tensor<'g>> {
        self.leaves.get(name).copied()
    }

    pub fn network(&self) -> &'n Network {
        self.net
    }

    /// One forward pass. Returns the prediction (same shape as `z`) and the
    /// feature tap at the end of every stage.
    pub fn forward(&self, z: Tensor<'g>, y: usize, t: usize) -> NetResult<ForwardOut<'g>> {
        let spec = &self.net.spec;
        let (tok, w0) = self.net.input_shape();
        if z.shape() != vec![tok, w0] {
            return Err(NetError::InputShape { expected: (tok, w0), got: z.shape() });
        }
        if y >= spec.cond_vocab {
            return Err(NetError::CondOutOfRange { y, vocab: spec.cond_vocab });
        }
        let graph = z.graph();
        let t_embed = graph.constant(vec![1, spec.embed_width], timestep_embedding(t, spec.embed_width))?;
        let cond = self.p("cond.embed").row(y)?.add(&t_embed)?;

        let k = spec.num_dn_stages();
        let mut taps: Vec<(StageId, Tensor<'g>)> = Vec::with_capacity(2 * k + 1);
        let mut x = z;
        for i in 0..k {
            x = self.apply_stage(StageId::Dn(i), x, cond)?;
            taps.push((StageId::Dn(i), x));
            x = self.sampler(&format!("down{i}"), x)?;
        }
        x = self.apply_stage(StageId::Mid, x, cond)?;
        taps.push((StageId::Mid, x));
        for i in (0..k).rev() {
            x = self.sampler(&format!("upsamp{i}"), x)?;
            let skip = taps[i].1;
            x = x
                .concat_cols(&skip)?
                .matmul(&self.p(&format!("skip{i}.w")))?
                .add_row(&self.p(&format!("skip{i}.b")))?;
            x = self.apply_stage(StageId::Up(i), x, cond)?;
            taps.push((StageId::Up(i), x));
        }
        let eps = x.matmul(&self.p("head.w"))?.add_row(&self.p("head.b"))?;
        Ok(ForwardOut { eps, taps })
    }

    fn sampler(&self, name: &str, x: Tensor<'g>) -> NetResult<Tensor<'g>> {
        Ok(self
            .p(&format!("{name}.p"))
            .matmul(&x)?
            .matmul(&self.p(&format!("{name}.q")))?
            .add_row(&self.p(&format!("{name}.b")))?)
    }

    fn apply_stage(&self, stage: StageId, mut x: Tensor<'g>, cond: Tensor<'g>) -> NetResult<Tensor<'g>> {
        let spec = &self.net.spec;
        let cond_row = cond
            .matmul(&self.p(&format!("{stage}.cond.w")))?
            .add(&self.p(&format!("{stage}.cond.b")))?;
        x = x.add_row(&cond_row)?;
        for (i, kind) in spec.stage_layer_kinds(stage).iter().enumerate() {
            let id = LayerId { stage, index: i, kind: *kind };
            if self.net.removed.contains(&id) {
                continue;
            }
            let p = prefix(stage, i);
            match kind {
                LayerKind::Residual => {
                    let h = x
                        .matmul(&self.p(&format!("{p}.w1")))?
                        .add_row(&self.p(&format!("{p}.b1")))?
                        .silu();
                    let branch = h
                        .matmul(&self.p(&format!("{p}.w2")))?
                        .add_row(&self.p(&format!("{p}.b2")))?;
                    x = x.add(&branch)?;
                }
                LayerKind::Mixer => {
                    let mixed = self
                        .p(&format!("{p}.tm2"))
                        .matmul(&self.p(&format!("{p}.tm1")).matmul(&x)?.silu())?;
                    x = x.add(&mixed)?;
                    let h = x
                        .matmul(&self.p(&format!("{p}.cw1")))?
                        .add_row(&self.p(&format!("{p}.cb1")))?
                        .silu();
                    let branch = h
                        .matmul(&self.p(&format!("{p}.cw2")))?
                        .add_row(&self.p(&format!("{p}.cb2")))?;
                    x = x.add(&branch)?;
                }
                LayerKind::Sampler => unreachable!(),
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            tokens: 4,
            widths: vec![4],
            stage_res: vec![1, 1, 1],
            stage_mix: vec![0, 0, 0],
            cond_vocab: 2,
            embed_width: 4,
            seed: 3,
        }
    }

    fn input_for(net: &Network, scale: f64) -> Vec<f64> {
        let (t, w) = net.input_shape();
        (0..t * w).map(|i| scale * ((i as f64 * 0.37).sin())).collect()
    }

    fn forward_eps(net: &Network, z: &[f64], y: usize, t: usize) -> Vec<f64> {
        net.predict(z, y, t).unwrap().0
    }

    #[test]
    fn prunable_count_formula() {
        // 2 Dn stages, 2 residual + 1 mixer per stage: 2*(2+1)*2 + mid layers.
        let spec = NetworkSpec {
            tokens: 16,
            widths: vec![8, 8],
            stage_res: vec![2; 5],
            stage_mix: vec![1; 5],
            cond_vocab: 4,
            embed_width: 4,
            seed: 0,
        };
        let net = Network::build(&spec).unwrap();
        assert_eq!(net.prunable_layers().len(), 2 * (2 + 1) * 2 + 3);
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let spec = NetworkSpec::default_with_seed(9);
        let a = Network::build(&spec).unwrap();
        let b = Network::build(&spec).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn forward_preserves_input_shape() {
        let spec = NetworkSpec::default_with_seed(1);
        let net = Network::build(&spec).unwrap();
        assert_eq!(net.input_shape(), (16, 8));
        let z = input_for(&net, 1.0);
        let (eps, taps) = net.predict(&z, 3, 10).unwrap();
        assert_eq!(eps.len(), 16 * 8);
        let stages: Vec<StageId> = taps.iter().map(|(s, _)| *s).collect();
        assert_eq!(stages, spec.stage_order());
    }

    #[test]
    fn zeroed_residual_branch_is_a_noop_layer() {
        let spec = tiny_spec();
        let mut net = Network::build(&spec).unwrap();
        let layer = LayerId { stage: StageId::Mid, index: 0, kind: LayerKind::Residual };
        for suffix in ["w2", "b2"] {
            let p = net.params_mut().get_mut(&format!("mid.l00.{suffix}")).unwrap();
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z = input_for(&net, 0.8);
        let full = forward_eps(&net, &z, 1, 5);
        let pruned = net.remove_layers(&BTreeSet::from([layer])).unwrap();
        assert_eq!(full, forward_eps(&pruned, &z, 1, 5));
    }

    #[test]
    fn removal_set_semantics() {
        let spec = tiny_spec();
        let net = Network::build(&spec).unwrap();
        let z = input_for(&net, 1.0);
        let base = forward_eps(&net, &z, 0, 2);

        // Empty removal is the identity.
        let same = net.remove_layers(&BTreeSet::new()).unwrap();
        assert_eq!(base, forward_eps(&same, &z, 0, 2));

        // Sequential removal equals removing the union.
        let ids = net.prunable_layers();
        let ab = net
            .remove_layers(&BTreeSet::from([ids[0]]))
            .unwrap()
            .remove_layers(&BTreeSet::from([ids[2]]))
            .unwrap();
        let union = net.remove_layers(&BTreeSet::from([ids[0], ids[2]])).unwrap();
        assert_eq!(ab.removed(), union.removed());
        assert_eq!(forward_eps(&ab, &z, 0, 2), forward_eps(&union, &z, 0, 2));

        // Original untouched.
        assert!(net.removed().is_empty());
        assert_eq!(base, forward_eps(&net, &z, 0, 2));

        // Removing everything still forwards with unchanged shape.
        let all: BTreeSet<LayerId> = ids.iter().copied().collect();
        let empty_net = net.remove_layers(&all).unwrap();
        assert_eq!(forward_eps(&empty_net, &z, 0, 2).len(), z.len());
    }

    #[test]
    fn sampler_and_unknown_removals_are_rejected() {
        let net = Network::build(&tiny_spec()).unwrap();
        let sampler = LayerId { stage: StageId::Dn(0), index: 0, kind: LayerKind::Sampler };
        assert!(matches!(
            net.remove_layers(&BTreeSet::from([sampler])),
            Err(NetError::NotPrunable(_))
        ));
        let unknown = LayerId { stage: StageId::Up(0), index: 9, kind: LayerKind::Residual };
        assert!(matches!(
            net.remove_layers(&BTreeSet::from([unknown])),
            Err(NetError::UnknownLayer(_))
        ));
    }

    #[test]
    fn residual_param_count_is_2w2_plus_2w() {
        let net = Network::build(&tiny_spec()).unwrap();
        let layer = net.prunable_layers()[0];
        let w = 4u64;
        assert_eq!(net.param_count(&layer).unwrap(), 2 * w * w + 2 * w);
        assert!(net.prunable_params() <= net.total_params());
        let frac = net.prunable_fraction();
        assert!(frac > 0.0 && frac < 1.0, "{frac}");
    }

    #[test]
    fn condition_out_of_range_rejected() {
        let net = Network::build(&tiny_spec()).unwrap();
        let z = input_for(&net, 1.0);
        assert!(matches!(
            net.predict(&z, 5, 0),
            Err(NetError::CondOutOfRange { y: 5, vocab: 2 })
        ));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = tiny_spec();
        spec.widths = vec![0];
        assert!(matches!(Network::build(&spec), Err(NetError::InvalidSpec(_))));
        let mut spec = tiny_spec();
        spec.tokens = 3;
        assert!(Network::build(&spec).is_err());
        let mut spec = tiny_spec();
        spec.stage_res = vec![1, 1];
        assert!(Network::build(&spec).is_err());
    }

    // ── manual composition oracle ───────────────────────────────────────
    //
    // Re-implements the forward pass of the 3-layer tiny net with plain
    // loops and compares against Network::forward for every removal subset.

    fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn silu_v(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| v / (1.0 + (-v).exp())).collect()
    }

    fn add_v(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    fn add_row_v(x: &[f64], row: &[f64], cols: usize) -> Vec<f64> {
        x.chunks(cols).flat_map(|r| add_v(r, row)).collect()
    }

    fn manual_forward(net: &Network, z: &[f64], y: usize, t: usize, keep: [bool; 3]) -> Vec<f64> {
        let p = |name: &str| net.params()[name].data.clone();
        let w = 4usize;

        // Conditioning vector: embedding row plus sinusoidal embedding.
        let embed = p("cond.embed");
        let mut c: Vec<f64> = embed[y * w..(y + 1) * w].to_vec();
        let half = w / 2;
        for i in 0..half {
            let freq = (10_000f64).powf(-(i as f64) / half as f64);
            c[2 * i] += (t as f64 * freq).sin();
            c[2 * i + 1] += (t as f64 * freq).cos();
        }

        let stage = |x: &[f64], tag: &str, tokens: usize, keep_layer: bool| -> Vec<f64> {
            let row = add_v(&mm(&c, &p(&format!("{tag}.cond.w")), 1, w, w), &p(&format!("{tag}.cond.b")));
            let mut x = add_row_v(x, &row, w);
            if keep_layer {
                let h = silu_v(&add_row_v(
                    &mm(&x, &p(&format!("{tag}.l00.w1")), tokens, w, w),
                    &p(&format!("{tag}.l00.b1")),
                    w,
                ));
                let branch = add_row_v(
                    &mm(&h, &p(&format!("{tag}.l00.w2")), tokens, w, w),
                    &p(&format!("{tag}.l00.b2")),
                    w,
                );
                x = add_v(&x, &branch);
            }
            x
        };

        let x = stage(z, "dn0", 4, keep[0]);
        let tap_dn0 = x.clone();
        let x = add_row_v(&mm(&mm(&p("down0.p"), &x, 2, 4, w), &p("down0.q"), 2, w, w), &p("down0.b"), w);
        let x = stage(&x, "mid", 2, keep[1]);
        let x = add_row_v(&mm(&mm(&p("upsamp0.p"), &x, 4, 2, w), &p("upsamp0.q"), 4, w, w), &p("upsamp0.b"), w);
        // Skip merge: concat columns then project.
        let mut cat = Vec::new();
        for r in 0..4 {
            cat.extend_from_slice(&x[r * w..(r + 1) * w]);
            cat.extend_from_slice(&tap_dn0[r * w..(r + 1) * w]);
        }
        let x = add_row_v(&mm(&cat, &p("skip0.w"), 4, 2 * w, w), &p("skip0.b"), w);
        let x = stage(&x, "up0", 4, keep[2]);
        add_row_v(&mm(&x, &p("head.w"), 4, w, w), &p("head.b"), w)
    }

    #[test]
    fn forward_matches_manual_composition_for_every_subset() {
        let net = Network::build(&tiny_spec()).unwrap();
        let z = input_for(&net, 1.3);
        let layers = net.prunable_layers();
        assert_eq!(layers.len(), 3);
        for mask in 0u32..8 {
            let keep = [mask & 1 == 0, mask & 2 == 0, mask & 4 == 0];
            let removal: BTreeSet<LayerId> = layers
                .iter()
                .enumerate()
                .filter(|(i, _)| !keep[*i])
                .map(|(_, id)| *id)
                .collect();
            let pruned = net.remove_layers(&removal).unwrap();
            let got = forward_eps(&pruned, &z, 1, 7);
            let want = manual_forward(&net, &z, 1, 7, keep);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "mask {mask}: {g} vs {w}");
            }
        }
    }

    // ── checkpoint io ───────────────────────────────────────────────────

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = Network::build(&NetworkSpec::default_with_seed(21)).unwrap();
        let z = input_for(&net, 0.9);
        let before = forward_eps(&net, &z, 2, 33);
        net.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(net.params(), loaded.params());
        let after = forward_eps(&loaded, &z, 2, 33);
        assert_eq!(
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_removed_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pruned.ckpt");
        let net = Network::build(&tiny_spec()).unwrap();
        let layer = net.prunable_layers()[1];
        let pruned = net.remove_layers(&BTreeSet::from([layer])).unwrap();
        pruned.save(&path).unwrap();
        let loaded = Network::load(&path).unwrap();
        assert_eq!(loaded.removed(), pruned.removed());
        let z = input_for(&net, 1.1);
        assert_eq!(forward_eps(&pruned, &z, 0, 4), forward_eps(&loaded, &z, 0, 4));
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = Network::build(&tiny_spec()).unwrap();
        net.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();

        // Wrong magic line.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(Network::load(&path), Err(NetError::VersionMismatch { .. })));

        // Truncated parameter block.
        let trunc = &bytes[..bytes.len() - 9];
        fs::write(&path, trunc).unwrap();
        assert!(matches!(Network::load(&path), Err(NetError::Format(_))));
    }
}
