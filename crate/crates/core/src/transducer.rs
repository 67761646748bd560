//! Autoregressive encoder-decoder transducers with a bottleneck head.
//!
//! A transducer maps a source sequence (token ids, or raw embedding vectors
//! such as another model's quantized outputs) to one output vector per
//! target step and passes each through its discrete bottleneck.
//!
//! Sources are always laid out at the model's fixed source length; positions
//! past a sequence's end enter the encoder as zero vectors, exactly like the
//! masked tail of a generated hidden sequence. No padding mask is used, so a
//! row's result never depends on what else is in the batch.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::batch::SequenceBatch;
use crate::bottleneck::{gumbel_db, softmax_db, vq_db, BottleneckOutput, DbVariant, Dictionary, Projection};
use crate::error::{Error, Result};
use crate::grad::Var;
use crate::params::{Binder, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::{Side, Specials, BOS, EOS, PAD};

/// Architecture and bottleneck settings shared by both transducers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Encoder layers, and separately decoder layers.
    pub layers: usize,
    pub ff_dim: usize,
    /// Longest X sequence including its EOS.
    pub max_x_len: usize,
    /// Longest Z sequence including its EOS.
    pub max_z_len: usize,
    pub db: DbVariant,
    /// Gumbel temperature.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_dim: 256,
            max_x_len: 16,
            max_z_len: 16,
            db: DbVariant::Softmax,
            temperature: 1.0,
        }
    }
}

impl ModelConfig {
    /// Six encoder and six decoder layers at the usual base-transformer width.
    pub fn six_layer() -> Self {
        ModelConfig { d_model: 512, heads: 8, layers: 6, ff_dim: 2048, ..Self::default() }
    }

    pub fn max_len(&self, side: Side) -> usize {
        match side {
            Side::X => self.max_x_len,
            Side::Z => self.max_z_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads)));
        }
        if self.max_x_len < 1 || self.max_z_len < 1 {
            return Err(Error::Config("maximum lengths must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

struct Init<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::full([d], 1.0)),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros([d])),
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.store.add_linear_weight(format!("{name}.weight"), fan_in, fan_out, self.rng),
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros([fan_out])),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            query: self.linear(&format!("{name}.query"), d, d),
            key: self.linear(&format!("{name}.key"), d, d),
            value: self.linear(&format!("{name}.value"), d, d),
            out: self.linear(&format!("{name}.out"), d, d),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, ff: usize) -> FeedForward {
        FeedForward { up: self.linear(&format!("{name}.up"), d, ff), down: self.linear(&format!("{name}.down"), ff, d) }
    }
}

/// Input to the encoder.
#[derive(Clone, Copy)]
pub enum Source<'a, 'g> {
    Tokens(&'a SequenceBatch),
    /// `[B, T, d]` vectors with `T` at most the model's source length; the
    /// remainder is filled with zero vectors.
    Embeddings(Var<'g>),
}

/// Per-layer key/value history for step-wise decoding.
#[derive(Default)]
struct LayerCache<'g> {
    keys: Vec<Var<'g>>,
    values: Vec<Var<'g>>,
}

/// Result of autoregressive generation through the bottleneck.
pub struct Generation<'g> {
    /// One bottleneck output per step, `B` rows each.
    pub steps: Vec<BottleneckOutput<'g>>,
    /// `s^t[EOS]` per step, shape `[B]`.
    pub eos_probs: Vec<Var<'g>>,
    rows: usize,
}

impl<'g> Generation<'g> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of generated steps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Selected indices of row `r`, one per step (before any masking).
    pub fn indices(&self, r: usize) -> Vec<usize> {
        self.steps.iter().map(|s| s.indices[r]).collect()
    }

    /// Quantized vectors stacked as `[B, T, d]`.
    pub fn quantized(&self) -> Var<'g> {
        let parts: Vec<_> = self.steps.iter().map(|s| s.quantized).collect();
        parts[0].graph().stack(&parts)
    }

    /// EOS probabilities stacked as `[B, T]`.
    pub fn eos_probabilities(&self) -> Var<'g> {
        let parts: Vec<_> = self.eos_probs.iter().map(|p| p.reshape([self.rows, 1])).collect();
        parts[0].graph().stack(&parts).reshape([self.rows, parts.len()])
    }
}

/// Greedy token output of one row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Tokens before the first EOS.
    pub tokens: Vec<usize>,
    /// Whether an EOS was produced within the length budget.
    pub terminated: bool,
}

impl Decoded {
    /// Tokens with the EOS appended when one was produced.
    pub fn scored(&self) -> Vec<usize> {
        let mut t = self.tokens.clone();
        if self.terminated {
            t.push(EOS);
        }
        t
    }
}

/// One direction of the pair (`X -> Z` or `Z -> X`).
#[derive(Debug, Clone)]
pub struct Transducer {
    pub source: Side,
    pub target: Side,
    pub variant: DbVariant,
    pub temperature: f64,
    pub d_model: usize,
    pub heads: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    src_table: ParamId,
    tgt_table: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    projection: Option<Linear>,
    positions: Tensor,
}

/// Sinusoidal position table `[len, d]`.
fn check_ids(ids: &[usize], table: Var<'_>) -> Result<()> {
    let size = table.shape()[0];
    match ids.iter().find(|&&id| id >= size) {
        Some(&id) => Err(Error::TokenId { id, size }),
        None => Ok(()),
    }
}

pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new([len, d], data)
}

impl Transducer {
    /// Registers a fresh transducer under `prefix`. `src_table` and
    /// `tgt_table` are existing `[|V|, d]` embedding tables; the target
    /// table doubles as the bottleneck dictionary.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        source: Side,
        target: Side,
        src_table: ParamId,
        tgt_table: ParamId,
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.d_model;
        let vocab = store.get(tgt_table).shape()[0];
        let mut init = Init { store, rng };
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer {
                attn_norm: init.norm(&format!("{prefix}.enc.{l}.attn_norm"), d),
                attn: init.attention(&format!("{prefix}.enc.{l}.attn"), d),
                ff_norm: init.norm(&format!("{prefix}.enc.{l}.ff_norm"), d),
                ff: init.feed_forward(&format!("{prefix}.enc.{l}.ff"), d, config.ff_dim),
            })
            .collect();
        let enc_norm = init.norm(&format!("{prefix}.enc.norm"), d);
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer {
                self_norm: init.norm(&format!("{prefix}.dec.{l}.self_norm"), d),
                self_attn: init.attention(&format!("{prefix}.dec.{l}.self_attn"), d),
                cross_norm: init.norm(&format!("{prefix}.dec.{l}.cross_norm"), d),
                cross_attn: init.attention(&format!("{prefix}.dec.{l}.cross_attn"), d),
                ff_norm: init.norm(&format!("{prefix}.dec.{l}.ff_norm"), d),
                ff: init.feed_forward(&format!("{prefix}.dec.{l}.ff"), d, config.ff_dim),
            })
            .collect();
        let dec_norm = init.norm(&format!("{prefix}.dec.norm"), d);
        let projection = config.db.uses_projection().then(|| init.linear(&format!("{prefix}.db.projection"), d, vocab));
        let (max_src_len, max_tgt_len) = (config.max_len(source), config.max_len(target));
        Transducer {
            source,
            target,
            variant: config.db,
            temperature: config.temperature,
            d_model: d,
            heads: config.heads,
            max_src_len,
            max_tgt_len,
            src_table,
            tgt_table,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            projection,
            positions: sinusoidal_positions(max_src_len.max(max_tgt_len), d),
        }
    }

    /// Rebuilds the parameter handles of a transducer registered under
    /// `prefix` in a loaded store.
    pub fn bind_existing(store: &ParamStore, prefix: &str, source: Side, target: Side, config: &ModelConfig) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let table_rows = |side: Side| {
            store
                .id(&format!("emb.{side}"))
                .map(|id| store.get(id).shape()[0])
                .ok_or_else(|| Error::Format(format!("missing emb.{side}")))
        };
        let src = scratch.add("src", Tensor::zeros([table_rows(source)?, config.d_model]));
        let tgt = scratch.add("tgt", Tensor::zeros([table_rows(target)?, config.d_model]));
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let template = Transducer::new(&mut scratch, prefix, source, target, src, tgt, config, &mut rng);
        let remap = |id: ParamId| -> Result<ParamId> {
            let name = scratch.name(id);
            let name = match name {
                "src" => format!("emb.{source}"),
                "tgt" => format!("emb.{target}"),
                other => other.to_string(),
            };
            let found = store.id(&name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if store.get(found).shape() != scratch.get(id).shape() {
                return Err(Error::Format(format!("parameter {name} has shape {:?}", store.get(found).shape())));
            }
            Ok(found)
        };
        template.remap(&remap)
    }

    fn remap(&self, f: &dyn Fn(ParamId) -> Result<ParamId>) -> Result<Self> {
        let norm = |n: &Norm| -> Result<Norm> { Ok(Norm { gamma: f(n.gamma)?, beta: f(n.beta)? }) };
        let lin = |l: &Linear| -> Result<Linear> { Ok(Linear { weight: f(l.weight)?, bias: f(l.bias)? }) };
        let attn = |a: &Attention| -> Result<Attention> {
            Ok(Attention { query: lin(&a.query)?, key: lin(&a.key)?, value: lin(&a.value)?, out: lin(&a.out)? })
        };
        let ff = |x: &FeedForward| -> Result<FeedForward> { Ok(FeedForward { up: lin(&x.up)?, down: lin(&x.down)? }) };
        Ok(Transducer {
            src_table: f(self.src_table)?,
            tgt_table: f(self.tgt_table)?,
            encoder: self
                .encoder
                .iter()
                .map(|l| {
                    Ok(EncoderLayer {
                        attn_norm: norm(&l.attn_norm)?,
                        attn: attn(&l.attn)?,
                        ff_norm: norm(&l.ff_norm)?,
                        ff: ff(&l.ff)?,
                    })
                })
                .collect::<Result<_>>()?,
            enc_norm: norm(&self.enc_norm)?,
            decoder: self
                .decoder
                .iter()
                .map(|l| {
                    Ok(DecoderLayer {
                        self_norm: norm(&l.self_norm)?,
                        self_attn: attn(&l.self_attn)?,
                        cross_norm: norm(&l.cross_norm)?,
                        cross_attn: attn(&l.cross_attn)?,
                        ff_norm: norm(&l.ff_norm)?,
                        ff: ff(&l.ff)?,
                    })
                })
                .collect::<Result<_>>()?,
            dec_norm: norm(&self.dec_norm)?,
            projection: self.projection.as_ref().map(lin).transpose()?,
            ..self.clone()
        })
    }

    pub fn target_table(&self) -> ParamId {
        self.tgt_table
    }

    pub fn source_table(&self) -> ParamId {
        self.src_table
    }

    /// The bottleneck dictionary: the target embedding table.
    pub fn dictionary<'g>(&self, b: &Binder<'g, '_>) -> Result<Dictionary<'g>> {
        Dictionary::new(b.param(self.tgt_table), Specials::default())
    }

    fn linear<'g>(&self, b: &Binder<'g, '_>, l: &Linear, x: Var<'g>) -> Var<'g> {
        x.matmul(b.param(l.weight)).add_broadcast(b.param(l.bias))
    }

    fn norm<'g>(&self, b: &Binder<'g, '_>, n: &Norm, x: Var<'g>) -> Var<'g> {
        x.layer_norm(b.param(n.gamma), b.param(n.beta))
    }

    fn feed_forward<'g>(&self, b: &Binder<'g, '_>, f: &FeedForward, x: Var<'g>) -> Var<'g> {
        let h = self.linear(b, &f.up, x).relu();
        self.linear(b, &f.down, h)
    }

    fn positions<'g>(&self, b: &Binder<'g, '_>, len: usize) -> Var<'g> {
        let d = self.d_model;
        b.graph().constant(Tensor::new([len, d], self.positions.data()[..len * d].to_vec()))
    }

    /// Token source as `[B, max_src_len, d]` with zero vectors past each EOS.
    pub fn embed_source<'g>(&self, b: &Binder<'g, '_>, batch: &SequenceBatch) -> Result<Var<'g>> {
        let (ids, valid) = batch.source_layout(self.max_src_len)?;
        let rows = batch.rows();
        let table = b.param(self.src_table);
        check_ids(&ids, table)?;
        let emb = table.gather_rows(&ids).reshape([rows, self.max_src_len, self.d_model]);
        let mask = b.graph().constant(Tensor::new([rows, self.max_src_len], valid));
        Ok(emb.scale_rows(mask))
    }

    /// Source-table rows of `seqs` taken as they are (no EOS appended),
    /// `[B, max_src_len, d]` with zero vectors after each sequence.
    pub fn embed_raw<'g>(&self, b: &Binder<'g, '_>, seqs: &[Vec<usize>]) -> Result<Var<'g>> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let s = self.max_src_len;
        let mut ids = vec![PAD; seqs.len() * s];
        let mut valid = vec![0.0; seqs.len() * s];
        for (r, seq) in seqs.iter().enumerate() {
            if seq.len() > s {
                return Err(Error::TooLong { length: seq.len(), max: s });
            }
            ids[r * s..r * s + seq.len()].copy_from_slice(seq);
            valid[r * s..r * s + seq.len()].fill(1.0);
        }
        let table = b.param(self.src_table);
        check_ids(&ids, table)?;
        let emb = table.gather_rows(&ids).reshape([seqs.len(), s, self.d_model]);
        Ok(emb.scale_rows(b.graph().constant(Tensor::new([seqs.len(), s], valid))))
    }

    /// Pads `[B, T, d]` vectors with zero steps to the source length.
    pub fn pad_source<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::LengthMismatch(format!("source embeddings of shape {shape:?}")));
        }
        let (rows, len) = (shape[0], shape[1]);
        if len > self.max_src_len {
            return Err(Error::TooLong { length: len, max: self.max_src_len });
        }
        if len == self.max_src_len {
            return Ok(x);
        }
        let g = x.graph();
        let zero = g.constant(Tensor::zeros([rows, self.d_model]));
        let mut parts: Vec<_> = (0..len).map(|t| x.select_step(t)).collect();
        parts.resize(self.max_src_len, zero);
        Ok(g.stack(&parts))
    }

    fn source_vectors<'g>(&self, b: &Binder<'g, '_>, source: Source<'_, 'g>) -> Result<Var<'g>> {
        match source {
            Source::Tokens(batch) => {
                if batch.is_empty() {
                    return Err(Error::EmptyBatch);
                }
                self.embed_source(b, batch)
            }
            Source::Embeddings(x) => self.pad_source(x),
        }
    }

    /// Encoder memory `[B, S, d]`.
    pub fn encode<'g>(&self, b: &Binder<'g, '_>, source: Source<'_, 'g>) -> Result<Var<'g>> {
        let x = self.source_vectors(b, source)?;
        let mut h = x.add_broadcast(self.positions(b, self.max_src_len));
        for layer in &self.encoder {
            let a = self.norm(b, &layer.attn_norm, h);
            let q = self.linear(b, &layer.attn.query, a);
            let k = self.linear(b, &layer.attn.key, a);
            let v = self.linear(b, &layer.attn.value, a);
            let att = q.attention(k, v, self.heads, false);
            h = h.add(self.linear(b, &layer.attn.out, att));
            let f = self.feed_forward(b, &layer.ff, self.norm(b, &layer.ff_norm, h));
            h = h.add(f);
        }
        Ok(self.norm(b, &self.enc_norm, h))
    }

    fn cross_memory<'g>(&self, b: &Binder<'g, '_>, memory: Var<'g>) -> Vec<(Var<'g>, Var<'g>)> {
        self.decoder
            .iter()
            .map(|l| (self.linear(b, &l.cross_attn.key, memory), self.linear(b, &l.cross_attn.value, memory)))
            .collect()
    }

    /// One decoder stack pass over `x: [B, Tq, d]`. Without caches the
    /// self-attention is causal over `x` itself; with caches the new keys and
    /// values are appended and attended together with the history.
    fn decoder_stack<'g>(
        &self,
        b: &Binder<'g, '_>,
        mut h: Var<'g>,
        cross: &[(Var<'g>, Var<'g>)],
        mut caches: Option<&mut [LayerCache<'g>]>,
    ) -> Var<'g> {
        let g = b.graph();
        for (l, layer) in self.decoder.iter().enumerate() {
            let a = self.norm(b, &layer.self_norm, h);
            let q = self.linear(b, &layer.self_attn.query, a);
            let mut k = self.linear(b, &layer.self_attn.key, a);
            let mut v = self.linear(b, &layer.self_attn.value, a);
            if let Some(caches) = caches.as_deref_mut() {
                let rows = h.value().shape()[0];
                let cache = &mut caches[l];
                cache.keys.push(k.reshape([rows, self.d_model]));
                cache.values.push(v.reshape([rows, self.d_model]));
                k = g.stack(&cache.keys);
                v = g.stack(&cache.values);
            }
            let att = q.attention(k, v, self.heads, true);
            h = h.add(self.linear(b, &layer.self_attn.out, att));

            let a = self.norm(b, &layer.cross_norm, h);
            let q = self.linear(b, &layer.cross_attn.query, a);
            let (mk, mv) = cross[l];
            let att = q.attention(mk, mv, self.heads, false);
            h = h.add(self.linear(b, &layer.cross_attn.out, att));

            let f = self.feed_forward(b, &layer.ff, self.norm(b, &layer.ff_norm, h));
            h = h.add(f);
        }
        self.norm(b, &self.dec_norm, h)
    }

    /// Applies the bottleneck to output vectors `[N, d]`. Gumbel noise is
    /// drawn only when `noise` is given; otherwise decoding is greedy.
    pub fn bottleneck<'g>(
        &self,
        b: &Binder<'g, '_>,
        v: Var<'g>,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<BottleneckOutput<'g>> {
        let dict = self.dictionary(b)?;
        let projection = || {
            let l = self.projection.as_ref().expect("probability bottleneck has a projection");
            Projection { weight: b.param(l.weight), bias: b.param(l.bias) }
        };
        match (self.variant, noise) {
            (DbVariant::Vq, _) => vq_db(v, &dict),
            (DbVariant::Gumbel, Some(mut rng)) => gumbel_db(v, &dict, &projection(), &mut rng, self.temperature),
            (DbVariant::Softmax, _) | (DbVariant::Gumbel, None) => softmax_db(v, &dict, &projection()),
        }
    }

    /// Output vectors for decoder inputs `[B, T, d]` (first step is BOS).
    pub fn decode_embedded<'g>(&self, b: &Binder<'g, '_>, memory: Var<'g>, inputs: Var<'g>) -> Result<Var<'g>> {
        let steps = inputs.shape()[1];
        if steps > self.max_tgt_len {
            return Err(Error::TooLong { length: steps, max: self.max_tgt_len });
        }
        let h = inputs.add_broadcast(self.positions(b, steps));
        let cross = self.cross_memory(b, memory);
        Ok(self.decoder_stack(b, h, &cross, None))
    }

    /// Teacher-forced pass: one bottleneck row per target position
    /// (`B * (width + 1)` rows, row-major by batch then step).
    pub fn forward_teacher_forced<'g>(
        &self,
        b: &Binder<'g, '_>,
        source: Source<'_, 'g>,
        target: &SequenceBatch,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<BottleneckOutput<'g>> {
        if target.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let steps = target.target_steps();
        if steps > self.max_tgt_len {
            return Err(Error::TooLong { length: steps, max: self.max_tgt_len });
        }
        let rows = target.rows();
        let table = b.param(self.tgt_table);
        let ids = target.decoder_inputs();
        check_ids(&ids, table)?;
        let inputs = table.gather_rows(&ids).reshape([rows, steps, self.d_model]);
        self.forward_embedded_inputs(b, source, inputs, noise)
    }

    /// Teacher-forced pass with decoder inputs given as vectors `[B, T, d]`.
    pub fn forward_embedded_inputs<'g>(
        &self,
        b: &Binder<'g, '_>,
        source: Source<'_, 'g>,
        inputs: Var<'g>,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<BottleneckOutput<'g>> {
        let memory = self.encode(b, source)?;
        let out = self.decode_embedded(b, memory, inputs)?;
        let shape = out.shape();
        self.bottleneck(b, out.reshape([shape[0] * shape[1], shape[2]]), noise)
    }

    /// BOS embedding rows `[B, d]` from the target table.
    pub fn bos<'g>(&self, b: &Binder<'g, '_>, rows: usize) -> Var<'g> {
        b.param(self.tgt_table).gather_rows(&vec![BOS; rows])
    }

    /// Autoregressive generation feeding each step's quantized vector back as
    /// the next input. Stops after `max_tgt_len` steps or once every row has
    /// produced EOS; rows that finished early keep generating, and their
    /// later steps are meant to be masked by the caller.
    pub fn generate_quantized<'g>(
        &self,
        b: &Binder<'g, '_>,
        source: Source<'_, 'g>,
        mut noise: Option<&mut dyn RngCore>,
    ) -> Result<Generation<'g>> {
        let memory = self.encode(b, source)?;
        let rows = memory.shape()[0];
        let cross = self.cross_memory(b, memory);
        let mut caches: Vec<LayerCache<'g>> = (0..self.decoder.len()).map(|_| LayerCache::default()).collect();
        let mut input = self.bos(b, rows);
        let mut finished = vec![false; rows];
        let mut steps = Vec::new();
        let mut eos_probs = Vec::new();
        for t in 0..self.max_tgt_len {
            let pos = b.graph().constant(Tensor::new([self.d_model], self.positions.row(t).to_vec()));
            let h = input.add_broadcast(pos).reshape([rows, 1, self.d_model]);
            let out = self.decoder_stack(b, h, &cross, Some(&mut caches)).reshape([rows, self.d_model]);
            let step = self.bottleneck(b, out, noise.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
            for (f, &i) in finished.iter_mut().zip(&step.indices) {
                *f |= i == EOS;
            }
            eos_probs.push(step.token_probability(EOS));
            input = step.quantized;
            steps.push(step);
            if finished.iter().all(|&f| f) {
                break;
            }
        }
        Ok(Generation { steps, eos_probs, rows })
    }

    /// Greedy token decoding (no Gumbel noise), truncated at the first EOS.
    pub fn generate_tokens<'g>(&self, b: &Binder<'g, '_>, source: Source<'_, 'g>) -> Result<Vec<Decoded>> {
        let generation = self.generate_quantized(b, source, None)?;
        Ok((0..generation.rows())
            .map(|r| {
                let ids = generation.indices(r);
                match ids.iter().position(|&i| i == EOS) {
                    Some(p) => Decoded { tokens: ids[..p].to_vec(), terminated: true },
                    None => Decoded { tokens: ids, terminated: false },
                }
            })
            .collect())
    }
}
