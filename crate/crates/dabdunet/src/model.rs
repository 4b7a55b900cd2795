//! Full network assembly: encoder/decoder ladder, skip gating and fusion,
//! ablation variants, parameter store, and weight-file round trips.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dtf;
use crate::error::{Error, Result};
use crate::lstm::{
    fuse_skip, CellOutput, FusionParams, GateParams, LstmParams, SkipFusionParams,
};
use crate::nn::{
    attention_gate, dense_block, transition_down, transition_up, AttentionGateParams, ConvParams,
    DenseBlockConfig, DenseBlockParams,
};
use crate::tensor::{Tape, Tensor};

/// Architecture hyperparameters plus the ablation flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder depth; input extents must be divisible by `2^levels`.
    pub levels: usize,
    /// Channels produced by the stem convolution.
    pub stem_channels: usize,
    /// Channels each dense-block layer appends.
    pub growth_rate: usize,
    /// Composite layers per dense block.
    pub block_layers: usize,
    /// Channel compression factor of transition-down, in (0, 1].
    pub compression: f64,
    pub input_h: usize,
    pub input_w: usize,
    /// Gate encoder skips with the coarser decoder feature.
    pub use_attention_gate: bool,
    /// Weight the two fused LSTM states by the per-channel attention.
    pub use_lstm_attention: bool,
    /// Fuse skips with the bidirectional LSTM; `false` falls back to plain
    /// channel concatenation.
    pub use_bdlstm: bool,
    /// Cell-output squashing of the fusion LSTM.
    pub lstm_output: CellOutput,
    /// Width of the channel-attention score space (`D_a`).
    pub attention_dim: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            stem_channels: 16,
            growth_rate: 8,
            block_layers: 2,
            compression: 0.5,
            input_h: 32,
            input_w: 32,
            use_attention_gate: true,
            use_lstm_attention: true,
            use_bdlstm: true,
            lstm_output: CellOutput::Identity,
            attention_dim: 8,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1usize << self.levels;
        if self.levels == 0 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.input_h % div != 0 || self.input_w % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by 2^levels = {div}",
                self.input_h, self.input_w
            )));
        }
        if self.stem_channels == 0 || self.growth_rate == 0 || self.block_layers == 0 {
            return Err(Error::Config("stem_channels, growth_rate, block_layers must be >= 1".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!("compression {} outside (0, 1]", self.compression)));
        }
        if self.attention_dim == 0 {
            return Err(Error::Config("attention_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// The named ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Plain channel-concatenation skips; no LSTM, no attention.
    #[serde(rename = "UNet-skip-concat")]
    SkipConcat,
    /// LSTM skip fusion, both attentions off.
    #[serde(rename = "BDLSTM-DenseUNet")]
    BdlstmDenseUnet,
    /// Attention gate removed, LSTM attention on.
    #[serde(rename = "BDense-UNet-1")]
    BDenseUnet1,
    /// LSTM attention removed, attention gate on.
    #[serde(rename = "BDense-UNet-2")]
    BDenseUnet2,
    /// Everything on.
    #[serde(rename = "DA-BDense-UNet")]
    DaBDenseUnet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SkipConcat,
        Variant::BdlstmDenseUnet,
        Variant::BDenseUnet1,
        Variant::BDenseUnet2,
        Variant::DaBDenseUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SkipConcat => "UNet-skip-concat",
            Variant::BdlstmDenseUnet => "BDLSTM-DenseUNet",
            Variant::BDenseUnet1 => "BDense-UNet-1",
            Variant::BDenseUnet2 => "BDense-UNet-2",
            Variant::DaBDenseUnet => "DA-BDense-UNet",
        }
    }

    pub fn from_name(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {name:?}; known: {known:?}"))
            })
    }

    /// `(use_attention_gate, use_lstm_attention, use_bdlstm)`
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::SkipConcat => (false, false, false),
            Variant::BdlstmDenseUnet => (false, false, true),
            Variant::BDenseUnet1 => (false, true, true),
            Variant::BDenseUnet2 => (true, false, true),
            Variant::DaBDenseUnet => (true, true, true),
        }
    }

    /// Applies this variant's flags on top of a base configuration.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (ag, lstm_attn, bdlstm) = self.flags();
        ModelConfig {
            use_attention_gate: ag,
            use_lstm_attention: lstm_attn,
            use_bdlstm: bdlstm,
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initialization recipe of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform(+-sqrt(6 / fan_in)); convolution kernels.
    HeUniform { fan_in: usize },
    /// Uniform(+-1 / sqrt(fan_in)); LSTM and fusion maps.
    ScaledUniform { fan_in: usize },
    Zeros,
    /// Constant one; the forget-gate bias.
    Ones,
}

impl Init {
    fn sample(self, numel: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::uniform(&[numel], -bound, bound, rng).data().to_vec()
            }
            Init::ScaledUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::uniform(&[numel], -bound, bound, rng).data().to_vec()
            }
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
        }
    }
}

struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    init: Init,
}

/// Named, ordered collection of trainable tensors. Iteration order is the
/// creation order, which fixes the weight-file layout and makes builds with
/// equal seeds byte-identical.
#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, rng: &mut ChaCha8Rng) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let numel: usize = shape.iter().product();
        let values = init.sample(numel, rng);
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, shape, values, init });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.entries[i].shape
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.entries[i].values
    }

    pub fn init(&self, i: usize) -> Init {
        self.entries[i].init
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn values_by_name(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.values(i))
    }

    pub fn set_values(&mut self, i: usize, values: Vec<f64>) {
        assert_eq!(values.len(), self.entries[i].values.len(), "size mismatch for {}", self.entries[i].name);
        self.entries[i].values = values;
    }

    pub fn set_values_by_name(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name:?}")))?;
        self.set_values(i, values);
        Ok(())
    }

    /// Total trainable scalar count.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Maps a flat scalar index over the whole store to `(entry, offset)`.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, e) in self.entries.iter().enumerate() {
            if flat < e.values.len() {
                return (i, flat);
            }
            flat -= e.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn value(&self, i: usize, offset: usize) -> f64 {
        self.entries[i].values[offset]
    }

    pub fn set_value(&mut self, i: usize, offset: usize, v: f64) {
        self.entries[i].values[offset] = v;
    }

    /// In-place update of one entry's values.
    pub fn update(&mut self, i: usize, f: impl FnOnce(&mut [f64])) {
        f(&mut self.entries[i].values);
    }

    fn tensor(&self, i: usize) -> Tensor {
        Tensor::from_vec(self.entries[i].values.clone(), &self.entries[i].shape)
            .expect("entry values match shape")
    }

    fn to_entries(&self) -> Vec<(String, Tensor)> {
        (0..self.len()).map(|i| (self.entries[i].name.clone(), self.tensor(i))).collect()
    }
}

// ── Structure references into the store ────────────────────────────────

#[derive(Clone, Copy)]
struct ConvRef {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy)]
struct AgRef {
    wx: usize,
    wg: usize,
    bg: usize,
    psi: usize,
    bpsi: usize,
}

#[derive(Clone, Copy)]
struct LstmRef {
    // [input, forget, output, candidate] x [w, u, b]
    gates: [[usize; 3]; 4],
}

#[derive(Clone, Copy)]
struct FusionRef {
    wyf: usize,
    wyb: usize,
    by: usize,
    attn: Option<(usize, usize)>, // (va, wa)
}

#[derive(Clone)]
enum SkipRef {
    Fused { fwd: LstmRef, bwd: LstmRef, fusion: FusionRef },
    Concat,
}

#[derive(Clone)]
struct BlockRef {
    cfg: DenseBlockConfig,
    layers: Vec<ConvRef>,
}

struct EncLevel {
    block: BlockRef,
    down: ConvRef,
}

struct DecLevel {
    level: usize,
    up: ConvRef,
    ag: Option<AgRef>,
    skip: SkipRef,
    block: BlockRef,
}

/// Options for [`Model::run`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Constant gain applied to each skip in place of a (disabled) attention
    /// gate. Used by the structural-reduction tests: a gated model whose
    /// coefficients are forced to a constant `c` must equal the ungated
    /// model run with `skip_gain = c`. Ignored when the gate is enabled.
    pub skip_gain: Option<f64>,
}

/// Everything one forward pass exposes: per-pixel probabilities, the
/// attention-gate coefficient maps (finest level last), the channel
/// attention weights per skip level, and the parameter leaves registered on
/// the tape (store order), for optimizers and gradient checks.
pub struct ForwardTrace {
    pub prob: Tensor,
    pub alphas: Vec<Tensor>,
    pub betas: Vec<Tensor>,
    pub param_leaves: Vec<Tensor>,
}

/// A built network: configuration, parameters, and the wiring between them.
pub struct Model {
    cfg: ModelConfig,
    store: ParameterStore,
    stem: ConvRef,
    enc: Vec<EncLevel>,
    bottleneck: BlockRef,
    dec: Vec<DecLevel>,
    head: ConvRef,
}

impl Model {
    /// Builds the network for a configuration, initializing parameters from
    /// `cfg.seed`. Two builds with equal configurations are byte-identical.
    pub fn build(cfg: &ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParameterStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let add_conv = |store: &mut ParameterStore,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        out_ch: usize,
                        in_ch: usize,
                        k: usize|
         -> ConvRef {
            let fan_in = in_ch * k * k;
            let w = store.add(format!("{name}.w"), vec![out_ch, in_ch, k, k], Init::HeUniform { fan_in }, rng);
            let b = store.add(format!("{name}.b"), vec![out_ch], Init::Zeros, rng);
            ConvRef { w, b }
        };
        let add_block = |store: &mut ParameterStore,
                         rng: &mut ChaCha8Rng,
                         prefix: &str,
                         in_channels: usize|
         -> Result<BlockRef> {
            let cfg_b = DenseBlockConfig::new(cfg.block_layers, cfg.growth_rate, in_channels)?;
            let layers = (0..cfg.block_layers)
                .map(|j| {
                    add_conv(
                        store,
                        rng,
                        &format!("{prefix}.layer{}", j + 1),
                        cfg.growth_rate,
                        cfg_b.layer_in_channels(j),
                        3,
                    )
                })
                .collect();
            Ok(BlockRef { cfg: cfg_b, layers })
        };

        let stem = add_conv(&mut store, &mut rng, "stem", cfg.stem_channels, 1, 3);

        let mut channels = cfg.stem_channels;
        let mut skip_channels = Vec::with_capacity(cfg.levels);
        let mut enc = Vec::with_capacity(cfg.levels);
        for level in 1..=cfg.levels {
            let block = add_block(&mut store, &mut rng, &format!("enc{level}.block"), channels)?;
            let out = block.cfg.out_channels();
            skip_channels.push(out);
            let compressed = ((out as f64) * cfg.compression).floor().max(1.0) as usize;
            let down = add_conv(&mut store, &mut rng, &format!("enc{level}.down"), compressed, out, 1);
            enc.push(EncLevel { block, down });
            channels = compressed;
        }

        let bottleneck = add_block(&mut store, &mut rng, "bottleneck", channels)?;
        let mut below = bottleneck.cfg.out_channels();

        let add_lstm = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, c: usize| -> LstmRef {
            let mut gates = [[0usize; 3]; 4];
            for (gi, gate) in ["i", "f", "o", "c"].iter().enumerate() {
                let w = store.add(format!("{prefix}.W{gate}"), vec![c, c], Init::ScaledUniform { fan_in: c }, rng);
                let u = store.add(format!("{prefix}.U{gate}"), vec![c, c], Init::ScaledUniform { fan_in: c }, rng);
                let init_b = if *gate == "f" { Init::Ones } else { Init::Zeros };
                let b = store.add(format!("{prefix}.b{gate}"), vec![c], init_b, rng);
                gates[gi] = [w, u, b];
            }
            LstmRef { gates }
        };

        let mut dec = Vec::with_capacity(cfg.levels);
        for level in (1..=cfg.levels).rev() {
            let skip_c = skip_channels[level - 1];
            let up = add_conv(&mut store, &mut rng, &format!("dec{level}.up"), skip_c, below, 3);
            let ag = cfg.use_attention_gate.then(|| {
                let f_l = skip_c;
                let f_g = below;
                let f_a = f_l.div_ceil(2);
                AgRef {
                    wx: store.add(format!("ag{level}.wx"), vec![f_a, f_l, 1, 1], Init::HeUniform { fan_in: f_l }, &mut rng),
                    wg: store.add(format!("ag{level}.wg"), vec![f_a, f_g, 1, 1], Init::HeUniform { fan_in: f_g }, &mut rng),
                    bg: store.add(format!("ag{level}.bg"), vec![f_a], Init::Zeros, &mut rng),
                    psi: store.add(format!("ag{level}.psi"), vec![1, f_a, 1, 1], Init::HeUniform { fan_in: f_a }, &mut rng),
                    bpsi: store.add(format!("ag{level}.bpsi"), vec![1], Init::Zeros, &mut rng),
                }
            });
            let (skip, fused_channels) = if cfg.use_bdlstm {
                let fwd = add_lstm(&mut store, &mut rng, &format!("skip{level}.lstm.fwd"), skip_c);
                let bwd = add_lstm(&mut store, &mut rng, &format!("skip{level}.lstm.bwd"), skip_c);
                let wyf = store.add(format!("skip{level}.fuse.Wyf"), vec![skip_c, skip_c], Init::ScaledUniform { fan_in: skip_c }, &mut rng);
                let wyb = store.add(format!("skip{level}.fuse.Wyb"), vec![skip_c, skip_c], Init::ScaledUniform { fan_in: skip_c }, &mut rng);
                let by = store.add(format!("skip{level}.fuse.by"), vec![skip_c], Init::Zeros, &mut rng);
                let attn = cfg.use_lstm_attention.then(|| {
                    let va = store.add(format!("skip{level}.fuse.va"), vec![cfg.attention_dim], Init::ScaledUniform { fan_in: cfg.attention_dim }, &mut rng);
                    let wa = store.add(format!("skip{level}.fuse.Wa"), vec![2, cfg.attention_dim], Init::ScaledUniform { fan_in: 2 }, &mut rng);
                    (va, wa)
                });
                (SkipRef::Fused { fwd, bwd, fusion: FusionRef { wyf, wyb, by, attn } }, skip_c)
            } else {
                (SkipRef::Concat, 2 * skip_c)
            };
            let block = add_block(&mut store, &mut rng, &format!("dec{level}.block"), fused_channels)?;
            below = block.cfg.out_channels();
            dec.push(DecLevel { level, up, ag, skip, block });
        }

        let head = add_conv(&mut store, &mut rng, "head", 1, below, 1);

        Ok(Model { cfg: cfg.clone(), store, stem, enc, bottleneck, dec, head })
    }

    /// Builds a named ablation variant on top of a base configuration.
    pub fn build_variant(variant: Variant, base: &ModelConfig) -> Result<Model> {
        Model::build(&variant.apply(base))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.total_scalars()
    }

    /// Schema manifest: every parameter name and shape, in store order.
    pub fn schema(&self) -> Vec<dtf::EntryHeader> {
        (0..self.store.len())
            .map(|i| dtf::EntryHeader {
                name: self.store.name(i).to_string(),
                shape: self.store.shape(i).to_vec(),
            })
            .collect()
    }

    pub fn schema_json(&self) -> String {
        serde_json::to_string_pretty(&self.schema()).expect("schema serializes")
    }

    /// Runs the forward pass on a caller-owned tape, registering every
    /// parameter as a leaf. Output probabilities are per-pixel foreground
    /// scores in (0, 1) with the input's spatial extents.
    pub fn run(&self, tape: &Tape, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardTrace> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.cfg.input_h || shape[3] != self.cfg.input_w {
            return Err(Error::shape(
                "forward",
                format!(
                    "input {:?} does not match configured [N,1,{},{}]",
                    shape, self.cfg.input_h, self.cfg.input_w
                ),
            ));
        }
        let leaves: Vec<Tensor> =
            (0..self.store.len()).map(|i| tape.leaf(&self.store.tensor(i))).collect();

        let conv = |r: &ConvRef| ConvParams { weight: leaves[r.w].clone(), bias: leaves[r.b].clone() };
        let block_params = |b: &BlockRef| DenseBlockParams {
            layers: b.layers.iter().map(conv).collect(),
        };
        let gate = |g: &[usize; 3]| GateParams {
            w: leaves[g[0]].clone(),
            u: leaves[g[1]].clone(),
            b: leaves[g[2]].clone(),
        };
        let lstm = |l: &LstmRef| LstmParams {
            input: gate(&l.gates[0]),
            forget: gate(&l.gates[1]),
            output: gate(&l.gates[2]),
            candidate: gate(&l.gates[3]),
            sigma_h: self.cfg.lstm_output,
        };

        let mut cur = tape.conv2d(x, &leaves[self.stem.w], Some(&leaves[self.stem.b]), 1, 1)?;
        let mut skips = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            let b = dense_block(tape, &cur, &level.block.cfg, &block_params(&level.block))?;
            cur = transition_down(tape, &b, &conv(&level.down))?;
            skips.push(b);
        }
        cur = dense_block(tape, &cur, &self.bottleneck.cfg, &block_params(&self.bottleneck))?;

        let mut alphas = Vec::new();
        let mut betas = Vec::new();
        for dl in &self.dec {
            let gating_signal = cur.clone();
            let up = transition_up(tape, &cur, &conv(&dl.up))?;
            let skip = &skips[dl.level - 1];
            let gated = match &dl.ag {
                Some(ag) => {
                    let params = AttentionGateParams {
                        wx: leaves[ag.wx].clone(),
                        wg: leaves[ag.wg].clone(),
                        bg: leaves[ag.bg].clone(),
                        psi: leaves[ag.psi].clone(),
                        bpsi: leaves[ag.bpsi].clone(),
                    };
                    let (x_hat, alpha) = attention_gate(tape, skip, &gating_signal, &params)?;
                    alphas.push(alpha);
                    x_hat
                }
                None => match opts.skip_gain {
                    Some(gain) => tape.scale(skip, gain)?,
                    None => skip.clone(),
                },
            };
            let fused = match &dl.skip {
                SkipRef::Fused { fwd, bwd, fusion } => {
                    let params = SkipFusionParams {
                        fwd: lstm(fwd),
                        bwd: lstm(bwd),
                        fusion: FusionParams {
                            wyf: leaves[fusion.wyf].clone(),
                            wyb: leaves[fusion.wyb].clone(),
                            by: leaves[fusion.by].clone(),
                            va: fusion
                                .attn
                                .map(|(va, _)| leaves[va].clone())
                                .unwrap_or_else(|| Tensor::zeros(&[self.cfg.attention_dim])),
                            wa: fusion
                                .attn
                                .map(|(_, wa)| leaves[wa].clone())
                                .unwrap_or_else(|| Tensor::zeros(&[2, self.cfg.attention_dim])),
                        },
                        use_channel_attention: fusion.attn.is_some(),
                    };
                    let out = fuse_skip(tape, &gated, &up, &params)?;
                    if let Some(beta) = out.beta {
                        betas.push(beta);
                    }
                    out.fused
                }
                SkipRef::Concat => tape.concat(&[&gated, &up], 1)?,
            };
            cur = dense_block(tape, &fused, &dl.block.cfg, &block_params(&dl.block))?;
        }

        let logits = tape.conv2d(&cur, &leaves[self.head.w], Some(&leaves[self.head.b]), 1, 0)?;
        let prob = tape.sigmoid(&logits)?;
        Ok(ForwardTrace { prob, alphas, betas, param_leaves: leaves })
    }

    /// Forward pass on a private tape; returns only the probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.run(&tape, x, &ForwardOptions::default())?.prob.detached())
    }

    /// Writes all parameters as a DTF container, one entry per name.
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        dtf::write_container(path, &self.store.to_entries())
    }

    /// Builds the model for `cfg` and loads parameter values from a weight
    /// file. The file must carry exactly the parameter names and shapes the
    /// configuration implies; mismatches list the offending names.
    pub fn load_weights(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Model> {
        let mut model = Model::build(cfg)?;
        let entries = dtf::read_container(path)?;
        let mut by_name: HashMap<String, Tensor> = HashMap::new();
        for (name, t) in entries {
            by_name.insert(name, t);
        }
        let mut missing = Vec::new();
        for i in 0..model.store.len() {
            let name = model.store.name(i).to_string();
            match by_name.remove(&name) {
                Some(t) if t.shape() == model.store.shape(i) => {
                    model.store.set_values(i, t.data().to_vec());
                }
                Some(t) => {
                    return Err(Error::Format {
                        offset: 0,
                        msg: format!(
                            "parameter {name:?} has shape {:?} in file, model expects {:?}",
                            t.shape(),
                            model.store.shape(i)
                        ),
                    });
                }
                None => missing.push(name),
            }
        }
        let mut extra: Vec<String> = by_name.into_keys().collect();
        extra.sort();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::SchemaMismatch { missing, extra });
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            levels: 2,
            stem_channels: 4,
            growth_rate: 2,
            block_layers: 2,
            input_h: 8,
            input_w: 8,
            attention_dim: 3,
            seed: 13,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_round_trips_shape() {
        let model = Model::build(&small_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let prob = model.predict(&x).unwrap();
        assert_eq!(prob.shape(), &[1, 1, 8, 8]);
        assert!(prob.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let a = Model::build(&small_cfg()).unwrap();
        let b = Model::build(&small_cfg()).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for i in 0..a.store.len() {
            assert_eq!(a.store.name(i), b.store.name(i));
            let av = a.store.values(i);
            let bv = b.store.values(i);
            assert!(av.iter().zip(bv).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn untrained_output_hovers_near_half() {
        // Head bias initializes to zero, so logits center on zero. One
        // weight draw can still skew a single model, so average across
        // seeds.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let mut means = Vec::new();
        for seed in 0..6 {
            let model = Model::build(&ModelConfig { seed, ..small_cfg() }).unwrap();
            let prob = model.predict(&x).unwrap();
            means.push(prob.data().iter().sum::<f64>() / prob.numel() as f64);
        }
        let mean = means.iter().sum::<f64>() / means.len() as f64;
        assert!((mean - 0.5).abs() < 0.12, "mean untrained output {mean}");

        // With the head map zeroed as well, the logits are exactly zero.
        let mut model = Model::build(&small_cfg()).unwrap();
        let head_w = model.store().index_of("head.w").unwrap();
        let zeros = vec![0.0; model.store().values(head_w).len()];
        model.store_mut().set_values(head_w, zeros);
        let prob = model.predict(&x).unwrap();
        assert!(prob.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn input_size_must_match_config() {
        let model = Model::build(&small_cfg()).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(model.predict(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let cfg = ModelConfig { input_h: 18, input_w: 18, ..small_cfg() };
        assert!(matches!(Model::build(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn alpha_maps_follow_the_gate_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let with = Model::build(&small_cfg()).unwrap();
        let tape = Tape::new();
        let trace = with.run(&tape, &x, &ForwardOptions::default()).unwrap();
        assert_eq!(trace.alphas.len(), 2);
        assert_eq!(trace.betas.len(), 2);

        let without = Model::build(&ModelConfig { use_attention_gate: false, ..small_cfg() }).unwrap();
        let tape = Tape::new();
        let trace = without.run(&tape, &x, &ForwardOptions::default()).unwrap();
        assert!(trace.alphas.is_empty());
    }

    #[test]
    fn variant_flags_map_to_names() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
        assert!(Variant::from_name("nope").is_err());
        assert_eq!(Variant::DaBDenseUnet.flags(), (true, true, true));
        assert_eq!(Variant::BDenseUnet1.flags(), (false, true, true));
        assert_eq!(Variant::BDenseUnet2.flags(), (true, false, true));
        assert_eq!(Variant::BdlstmDenseUnet.flags(), (false, false, true));
        assert_eq!(Variant::SkipConcat.flags(), (false, false, false));
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dtf");
        let model = Model::build(&small_cfg()).unwrap();
        model.save_weights(&path).unwrap();
        let loaded = Model::load_weights(&small_cfg(), &path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
        let a = model.predict(&x).unwrap();
        let b = loaded.predict(&x).unwrap();
        assert!(crate::tensor::bit_identical(&a, &b));
    }

    #[test]
    fn loading_gateless_weights_into_gated_config_names_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dtf");
        let gateless = Model::build_variant(Variant::BDenseUnet1, &small_cfg()).unwrap();
        gateless.save_weights(&path).unwrap();
        match Model::load_weights(&small_cfg(), &path) {
            Err(Error::SchemaMismatch { missing, extra }) => {
                assert!(extra.is_empty());
                assert!(!missing.is_empty());
                assert!(missing.iter().all(|n| n.starts_with("ag")), "missing = {missing:?}");
            }
            other => panic!("expected SchemaMismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn truncated_weight_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.dtf");
        let model = Model::build(&small_cfg()).unwrap();
        model.save_weights(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Model::load_weights(&small_cfg(), &path), Err(Error::Format { .. })));
    }

    #[test]
    fn schema_lists_every_parameter() {
        let model = Model::build(&small_cfg()).unwrap();
        let schema = model.schema();
        assert_eq!(schema.len(), model.store().len());
        let json = model.schema_json();
        assert!(json.contains("stem.w"));
        assert!(json.contains("skip1.lstm.fwd.Wi"));
        assert!(json.contains("ag1.psi"));
    }
}
