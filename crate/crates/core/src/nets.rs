//! Primal (attention) and dual (residual convolution) classifiers, the shared
//! projection head, the bundle of all five parameter sets, and the
//! checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Gradients, Tape, Var};
use crate::csi_sim::mix;
use crate::error::{BtsError, Result};
use crate::preprocess::{embed_into, DiversityTable, DEFAULT_DIVERSITY, DEFAULT_WINDOW};

pub const NUM_CLASSES: usize = 4;

const CHECKPOINT_MAGIC: &[u8; 8] = b"BTSCKPT\n";
const CHECKPOINT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 64;

/// Every dimension of the four networks and the projection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub tau: usize,
    pub subcarriers: usize,
    pub pairs: usize,
    pub classes: usize,
    pub eta: f64,
    pub model_width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub blocks: usize,
    /// Latent size of both encoders.
    pub latent: usize,
    /// Output channels of each residual block; every block halves the grid.
    pub dual_widths: Vec<usize>,
    /// Layer widths of the projection head after the latent input.
    pub projection: Vec<usize>,
    /// Extra factor on the initial weights of the projection head's output layer.
    pub projection_gain: f64,
    /// Whether the projection head's layers carry bias terms.
    pub projection_bias: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            tau: DEFAULT_WINDOW,
            subcarriers: crate::csi_sim::DEFAULT_SUBCARRIERS,
            pairs: crate::csi_sim::DEFAULT_PAIRS,
            classes: NUM_CLASSES,
            eta: DEFAULT_DIVERSITY,
            model_width: 64,
            heads: 4,
            ff_width: 128,
            blocks: 2,
            latent: 64,
            dual_widths: vec![32, 32, 32],
            projection: vec![64, 32],
            projection_gain: 0.3,
            projection_bias: false,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// Reduced widths that train in minutes on one core.
    pub fn desk() -> Self {
        NetConfig {
            model_width: 32,
            heads: 4,
            ff_width: 64,
            latent: 32,
            dual_widths: vec![8, 16, 32],
            projection: vec![32, 16],
            ..NetConfig::default()
        }
    }

    pub fn input_width(&self) -> usize {
        self.subcarriers * self.pairs
    }

    pub fn frame_len(&self) -> usize {
        self.tau * self.subcarriers * self.pairs
    }

    pub fn projection_dim(&self) -> usize {
        *self.projection.last().unwrap_or(&self.latent)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BtsError::Config(m.to_string()));
        if self.tau == 0 || self.subcarriers == 0 || self.pairs == 0 {
            return bad("tau, subcarriers and pairs must be positive");
        }
        if self.classes < 2 {
            return bad("at least two classes are required");
        }
        if !(self.eta > 0.0) {
            return bad("diversity constant must be positive");
        }
        if self.model_width == 0 || self.heads == 0 || self.model_width % self.heads != 0 {
            return bad("model width must be a positive multiple of the head count");
        }
        if self.latent != self.model_width {
            return bad("latent size must equal the attention model width");
        }
        if self.ff_width == 0 || self.blocks == 0 || self.dual_widths.is_empty() || self.projection.is_empty() {
            return bad("layer counts and widths must be positive");
        }
        if self.dual_widths.iter().chain(&self.projection).any(|w| *w == 0) {
            return bad("layer widths must be positive");
        }
        Ok(())
    }
}

/// Named parameter tensors stored as flat `f64` buffers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl ParamSet {
    fn push(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.values.iter().map(Vec::len).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    /// Register every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().zip(&self.shapes).map(|(v, s)| tape.leaf(v.clone(), s)).collect()
    }

    /// Register every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().zip(&self.shapes).map(|(v, s)| tape.constant(v.clone(), s)).collect()
    }

    pub fn gradients(&self, grads: &Gradients, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().zip(&self.values).map(|(v, p)| grads.of(*v, p.len())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64, tag: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(mix(seed, tag)) }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect()
    }

    /// `std = sqrt(gain / fan_in)`.
    fn scaled(&mut self, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
        self.normal(n, (gain / fan_in as f64).sqrt())
    }
}

const LECUN: f64 = 1.0;
const HE: f64 = 2.0;

/// Symbolic outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetOutput {
    pub latent: Var,
    pub logits: Var,
}

/// Concrete outputs for a batch of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub batch: usize,
    /// `(batch, D)`.
    pub latent: Vec<f64>,
    /// `(batch, C)`.
    pub logits: Vec<f64>,
    /// `(batch, C)`, rows on the simplex.
    pub probs: Vec<f64>,
}

/// Pre-norm transformer encoder over the time axis of an embedded frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalNet {
    pub params: ParamSet,
}

const PRIMAL_BLOCK_TENSORS: usize = 12;

impl PrimalNet {
    pub fn new(cfg: &NetConfig, seed: u64, prefix: &str) -> Self {
        let mut init = Init::new(seed, 0x9A11);
        let mut p = ParamSet::default();
        let (pw, d, ff, c) = (cfg.input_width(), cfg.model_width, cfg.ff_width, cfg.classes);
        p.push(format!("{prefix}.input.weight"), vec![pw, d], init.scaled(pw * d, pw, LECUN));
        p.push(format!("{prefix}.input.bias"), vec![d], vec![0.0; d]);
        for b in 0..cfg.blocks {
            let n = |s: &str| format!("{prefix}.block{b}.{s}");
            p.push(n("norm1.gain"), vec![d], vec![1.0; d]);
            p.push(n("norm1.shift"), vec![d], vec![0.0; d]);
            p.push(n("qkv.weight"), vec![d, 3 * d], init.scaled(d * 3 * d, d, LECUN));
            p.push(n("qkv.bias"), vec![3 * d], vec![0.0; 3 * d]);
            p.push(n("out.weight"), vec![d, d], init.scaled(d * d, d, LECUN));
            p.push(n("out.bias"), vec![d], vec![0.0; d]);
            p.push(n("norm2.gain"), vec![d], vec![1.0; d]);
            p.push(n("norm2.shift"), vec![d], vec![0.0; d]);
            p.push(n("ff1.weight"), vec![d, ff], init.scaled(d * ff, d, HE));
            p.push(n("ff1.bias"), vec![ff], vec![0.0; ff]);
            p.push(n("ff2.weight"), vec![ff, d], init.scaled(ff * d, ff, LECUN));
            p.push(n("ff2.bias"), vec![d], vec![0.0; d]);
        }
        p.push(format!("{prefix}.norm.gain"), vec![d], vec![1.0; d]);
        p.push(format!("{prefix}.norm.shift"), vec![d], vec![0.0; d]);
        p.push(format!("{prefix}.head.weight"), vec![d, c], init.scaled(d * c, d, LECUN));
        p.push(format!("{prefix}.head.bias"), vec![c], vec![0.0; c]);
        PrimalNet { params: p }
    }

    /// Encoding of every time step, `(batch * tau, width)`, after the final norm.
    pub fn encode(&self, cfg: &NetConfig, tape: &mut Tape, v: &[Var], input: Var, batch: usize) -> Var {
        let mut h = tape.linear(input, v[0], v[1]);
        for b in 0..cfg.blocks {
            let o = 2 + PRIMAL_BLOCK_TENSORS * b;
            let n1 = tape.layer_norm(h, v[o], v[o + 1]);
            let qkv = tape.linear(n1, v[o + 2], v[o + 3]);
            let att = tape.attention(qkv, batch, cfg.tau, cfg.heads);
            let att = tape.linear(att, v[o + 4], v[o + 5]);
            h = tape.add(h, att);
            let n2 = tape.layer_norm(h, v[o + 6], v[o + 7]);
            let f = tape.linear(n2, v[o + 8], v[o + 9]);
            let f = tape.relu(f);
            let f = tape.linear(f, v[o + 10], v[o + 11]);
            h = tape.add(h, f);
        }
        let o = 2 + PRIMAL_BLOCK_TENSORS * cfg.blocks;
        tape.layer_norm(h, v[o], v[o + 1])
    }

    /// `input` is `(batch * tau, S * K)`, already embedded.
    pub fn forward(&self, cfg: &NetConfig, tape: &mut Tape, v: &[Var], input: Var, batch: usize) -> NetOutput {
        let enc = self.encode(cfg, tape, v, input, batch);
        let latent = tape.select_step(enc, batch, cfg.tau, cfg.tau - 1);
        let o = 4 + PRIMAL_BLOCK_TENSORS * cfg.blocks;
        let logits = tape.linear(latent, v[o], v[o + 1]);
        NetOutput { latent, logits }
    }
}

/// Residual convolutional encoder with the antenna pairs as channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DualNet {
    pub params: ParamSet,
}

impl DualNet {
    pub fn new(cfg: &NetConfig, seed: u64, prefix: &str) -> Self {
        let mut init = Init::new(seed, 0xD0A1);
        let mut p = ParamSet::default();
        let mut cin = cfg.pairs;
        for (b, &w) in cfg.dual_widths.iter().enumerate() {
            let n = |s: &str| format!("{prefix}.block{b}.{s}");
            p.push(n("conv1.weight"), vec![w, cin, 3, 3], init.scaled(w * cin * 9, cin * 9, HE));
            p.push(n("conv1.bias"), vec![w], vec![0.0; w]);
            p.push(n("conv2.weight"), vec![w, w, 3, 3], init.scaled(w * w * 9, w * 9, HE));
            p.push(n("conv2.bias"), vec![w], vec![0.0; w]);
            p.push(n("shortcut.weight"), vec![w, cin, 1, 1], init.scaled(w * cin, cin, LECUN));
            p.push(n("shortcut.bias"), vec![w], vec![0.0; w]);
            cin = w;
        }
        let (d, c) = (cfg.latent, cfg.classes);
        p.push(format!("{prefix}.latent.weight"), vec![cin, d], init.scaled(cin * d, cin, LECUN));
        p.push(format!("{prefix}.latent.bias"), vec![d], vec![0.0; d]);
        p.push(format!("{prefix}.head.weight"), vec![d, c], init.scaled(d * c, d, LECUN));
        p.push(format!("{prefix}.head.bias"), vec![c], vec![0.0; c]);
        DualNet { params: p }
    }

    /// `input` is `(batch, K, tau, S)`.
    pub fn forward(&self, cfg: &NetConfig, tape: &mut Tape, v: &[Var], input: Var) -> NetOutput {
        let mut x = input;
        for b in 0..cfg.dual_widths.len() {
            let o = 6 * b;
            let y = tape.conv2d(x, v[o], v[o + 1], 2);
            let y = tape.relu(y);
            let y = tape.conv2d(y, v[o + 2], v[o + 3], 1);
            let s = tape.conv2d(x, v[o + 4], v[o + 5], 2);
            let sum = tape.add(y, s);
            x = tape.relu(sum);
        }
        let pooled = tape.global_avg_pool(x);
        let o = 6 * cfg.dual_widths.len();
        let latent = tape.linear(pooled, v[o], v[o + 1]);
        let logits = tape.linear(latent, v[o + 2], v[o + 3]);
        NetOutput { latent, logits }
    }
}

/// Multilayer perceptron applied to the latent vectors of both teachers.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub params: ParamSet,
}

impl ProjectionHead {
    pub fn new(cfg: &NetConfig, seed: u64) -> Self {
        Self::with_layers(cfg.latent, &cfg.projection, cfg.projection_gain, cfg.projection_bias, seed)
    }

    pub fn with_layers(input: usize, layers: &[usize], out_gain: f64, bias: bool, seed: u64) -> Self {
        let mut init = Init::new(seed, 0x951);
        let mut p = ParamSet::default();
        let mut fan_in = input;
        for (i, &w) in layers.iter().enumerate() {
            let last = i + 1 == layers.len();
            let mut weight = init.scaled(fan_in * w, fan_in, if last { LECUN } else { HE });
            if last {
                weight.iter_mut().for_each(|x| *x *= out_gain);
            }
            p.push(format!("projection.layer{i}.weight"), vec![fan_in, w], weight);
            if bias {
                p.push(format!("projection.layer{i}.bias"), vec![w], vec![0.0; w]);
            }
            fan_in = w;
        }
        ProjectionHead { params: p }
    }

    pub fn forward(&self, tape: &mut Tape, v: &[Var], latent: Var) -> Var {
        let names = &self.params.names;
        let mut h = latent;
        let mut i = 0;
        while i < v.len() {
            h = tape.matmul(h, v[i]);
            i += 1;
            if i < v.len() && names[i].ends_with(".bias") {
                h = tape.add_bias(h, v[i]);
                i += 1;
            }
            if i < v.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Apply to concrete `(rows, D)` vectors.
    pub fn apply(&self, latent: &[f64], rows: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = self.params.bind_frozen(&mut tape);
        let width = latent.len() / rows.max(1);
        let x = tape.constant(latent.to_vec(), &[rows, width]);
        let y = self.forward(&mut tape, &v, x);
        tape.value(y).to_vec()
    }
}

/// Build the `(batch * tau, S * K)` primal input from `(tau, S, K)` frames.
pub fn primal_input(frames: &[&[f64]], cfg: &NetConfig, table: &DiversityTable) -> Vec<f64> {
    let n = cfg.frame_len();
    let mut out = vec![0.0; frames.len() * n];
    for (f, dst) in frames.iter().zip(out.chunks_exact_mut(n)) {
        embed_into(f, (cfg.tau, cfg.subcarriers, cfg.pairs), table, dst);
    }
    out
}

/// Build the `(batch, K, tau, S)` dual input from `(tau, S, K)` frames.
pub fn dual_input(frames: &[&[f64]], cfg: &NetConfig) -> Vec<f64> {
    let (tau, s_n, k_n) = (cfg.tau, cfg.subcarriers, cfg.pairs);
    let n = cfg.frame_len();
    let mut out = vec![0.0; frames.len() * n];
    for (f, dst) in frames.iter().zip(out.chunks_exact_mut(n)) {
        for t in 0..tau {
            for s in 0..s_n {
                for k in 0..k_n {
                    dst[(k * tau + t) * s_n + s] = f[(t * s_n + s) * k_n + k];
                }
            }
        }
    }
    out
}

/// Which teacher answers at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predictor {
    Primal,
    Dual,
}

/// All trainable state plus the frozen hypersphere center.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: NetConfig,
    pub primal_teacher: PrimalNet,
    pub primal_student: PrimalNet,
    pub dual_teacher: DualNet,
    pub dual_student: DualNet,
    pub projection: ProjectionHead,
    pub center: Option<Vec<f64>>,
    pub predictor: Predictor,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: NetConfig,
    predictor: Predictor,
    center: Option<Vec<f64>>,
    tensors: Vec<TensorEntry>,
}

impl ModelBundle {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        Ok(ModelBundle {
            primal_teacher: PrimalNet::new(&config, mix(s, 1), "primal_teacher"),
            primal_student: PrimalNet::new(&config, mix(s, 2), "primal_student"),
            dual_teacher: DualNet::new(&config, mix(s, 3), "dual_teacher"),
            dual_student: DualNet::new(&config, mix(s, 4), "dual_student"),
            projection: ProjectionHead::new(&config, mix(s, 5)),
            center: None,
            predictor: Predictor::Primal,
            config,
        })
    }

    pub fn diversity_table(&self) -> DiversityTable {
        DiversityTable::new(self.config.tau, self.config.input_width(), self.config.eta)
    }

    pub fn center(&self) -> Result<&[f64]> {
        self.center.as_deref().ok_or(BtsError::CenterUninitialized)
    }

    fn param_sets(&self) -> [&ParamSet; 5] {
        [
            &self.primal_teacher.params,
            &self.primal_student.params,
            &self.dual_teacher.params,
            &self.dual_student.params,
            &self.projection.params,
        ]
    }

    fn param_sets_mut(&mut self) -> [&mut ParamSet; 5] {
        [
            &mut self.primal_teacher.params,
            &mut self.primal_student.params,
            &mut self.dual_teacher.params,
            &mut self.dual_student.params,
            &mut self.projection.params,
        ]
    }

    pub fn check_dims(&self, dims: (usize, usize, usize)) -> Result<()> {
        let own = (self.config.tau, self.config.subcarriers, self.config.pairs);
        if dims != own {
            return Err(BtsError::DimensionMismatch { expected: own, actual: dims });
        }
        Ok(())
    }

    /// Evaluate the primal network with the given parameters, in chunks.
    pub fn eval_primal(&self, net: &PrimalNet, frames: &[&[f64]]) -> EncoderOutput {
        let table = self.diversity_table();
        self.eval_chunks(frames, |tape, chunk| {
            let v = net.params.bind_frozen(tape);
            let x = primal_input(chunk, &self.config, &table);
            let x = tape.constant(x, &[chunk.len() * self.config.tau, self.config.input_width()]);
            net.forward(&self.config, tape, &v, x, chunk.len())
        })
    }

    pub fn eval_dual(&self, net: &DualNet, frames: &[&[f64]]) -> EncoderOutput {
        self.eval_chunks(frames, |tape, chunk| {
            let v = net.params.bind_frozen(tape);
            let c = &self.config;
            let x = tape.constant(dual_input(chunk, c), &[chunk.len(), c.pairs, c.tau, c.subcarriers]);
            net.forward(c, tape, &v, x)
        })
    }

    fn eval_chunks<F>(&self, frames: &[&[f64]], mut run: F) -> EncoderOutput
    where
        F: FnMut(&mut Tape, &[&[f64]]) -> NetOutput,
    {
        let mut out = EncoderOutput { batch: frames.len(), latent: Vec::new(), logits: Vec::new(), probs: Vec::new() };
        for chunk in frames.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let o = run(&mut tape, chunk);
            out.latent.extend_from_slice(tape.value(o.latent));
            out.logits.extend_from_slice(tape.value(o.logits));
        }
        out.probs = softmax_rows(&out.logits, self.config.classes);
        out
    }

    /// Outputs of the network used for prediction.
    pub fn eval_predictor(&self, frames: &[&[f64]]) -> EncoderOutput {
        match self.predictor {
            Predictor::Primal => self.eval_primal(&self.primal_teacher, frames),
            Predictor::Dual => self.eval_dual(&self.dual_teacher, frames),
        }
    }

    /// Projection of the primal teacher's latent vectors, `(frames, D_psi)`.
    pub fn project_primal(&self, frames: &[&[f64]]) -> Vec<f64> {
        let out = self.eval_primal(&self.primal_teacher, frames);
        self.projection.apply(&out.latent, frames.len())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            predictor: self.predictor,
            center: self.center.clone(),
            tensors: self
                .param_sets()
                .iter()
                .flat_map(|p| p.names.iter().zip(&p.shapes))
                .map(|(name, shape)| TensorEntry { name: name.clone(), shape: shape.clone() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| BtsError::Checkpoint { path: path.into(), reason: e.to_string() })?;
        let file = File::create(path).map_err(|e| BtsError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| BtsError::io(path, e);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for set in self.param_sets() {
            for t in &set.values {
                for v in t {
                    w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| BtsError::Checkpoint { path: path.into(), reason };
        let file = File::open(path).map_err(|e| BtsError::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e| BtsError::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(bad(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut bundle = ModelBundle::new(header.config)?;
        bundle.predictor = header.predictor;
        bundle.center = header.center;
        let mut entries = header.tensors.iter();
        for set in bundle.param_sets_mut() {
            for ((name, shape), values) in set.names.iter().zip(&set.shapes).zip(set.values.iter_mut()) {
                let e = entries.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
                if &e.name != name || &e.shape != shape {
                    return Err(bad(format!("tensor {} {:?} does not match expected {name} {shape:?}", e.name, e.shape)));
                }
                let mut buf = vec![0u8; values.len() * 4];
                r.read_exact(&mut buf).map_err(|_| bad(format!("truncated data for {name}")))?;
                for (v, b) in values.iter_mut().zip(buf.chunks_exact(4)) {
                    *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
                }
            }
        }
        if entries.next().is_some() {
            return Err(bad("extra tensors in header".into()));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(bundle)
    }

    /// Round every parameter through `f32`, matching what a checkpoint stores.
    pub fn quantize(&mut self) {
        for set in self.param_sets_mut() {
            for v in set.values.iter_mut().flatten() {
                *v = *v as f32 as f64;
            }
        }
    }
}
