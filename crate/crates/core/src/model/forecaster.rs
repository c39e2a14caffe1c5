//! Patch encoder/decoder forecaster with direct multi-quantile output.
//!
//! Pipeline per context window: instance normalization, non-overlapping
//! patches, residual-block patch embedding plus learned positions, a
//! pre-norm encoder, a pre-norm decoder over learned start tokens (masked
//! self-attention and cross-attention), a final layer norm, and a residual
//! output block regressing `horizon × quantiles` values. The five probe taps
//! sit after each of the four decoder blocks and after the final norm.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::config::{ModelConfig, TapPooling};
use super::patchify;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::signal::{self, Normalized};
use crate::spectral::SequenceGenerator;
use crate::store::{self, ActivationSet, ErasureRecord, TapId};

const WEIGHTS_TAG: &str = "freqprobe-weights";

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResidualBlock {
    hidden: Linear,
    out: Linear,
    residual: Linear,
    norm: Option<Norm>,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attention,
    cross_norm: Norm,
    cross_attn: Attention,
    ff_norm: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ResidualBlock,
    positions: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    start_tokens: usize,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    head: ResidualBlock,
}

struct ParamBuilder {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    rng: Rng,
}

impl ParamBuilder {
    fn push(&mut self, name: String, value: Array2<f64>) -> usize {
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.push(name, value)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.normal(format!("{name}.w"), fan_in, fan_out, (1.0 / fan_in as f64).sqrt()),
            b: self.push(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.push(format!("{name}.gamma"), Array2::ones((1, d))),
            beta: self.push(format!("{name}.beta"), Array2::zeros((1, d))),
        }
    }

    fn residual_block(&mut self, name: &str, d_in: usize, d_hidden: usize, d_out: usize, norm: bool) -> ResidualBlock {
        ResidualBlock {
            hidden: self.linear(&format!("{name}.hidden"), d_in, d_hidden),
            out: self.linear(&format!("{name}.out"), d_hidden, d_out),
            residual: self.linear(&format!("{name}.residual"), d_in, d_out),
            norm: norm.then(|| self.norm(&format!("{name}.norm"), d_out)),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        let std = (1.0 / d as f64).sqrt();
        Attention {
            q: self.normal(format!("{name}.q"), d, d, std),
            k: self.normal(format!("{name}.k"), d, d, std),
            v: self.normal(format!("{name}.v"), d, d, std),
            o: self.normal(format!("{name}.o"), d, d, std),
        }
    }

    fn feed_forward(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            up: self.linear(&format!("{name}.up"), d, d_ff),
            down: self.linear(&format!("{name}.down"), d_ff, d),
        }
    }
}

/// Hidden state reported at one tap for one input window.
#[derive(Debug, Clone, PartialEq)]
pub struct TapState {
    pub tap: TapId,
    pub hidden: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `horizon × quantiles`, de-normalized, sorted along each row.
    pub quantiles: Array2<f64>,
    /// The five taps in forward order, after any erasure.
    pub taps: Vec<TapState>,
}

impl ForwardOutput {
    pub fn tap(&self, tap: TapId) -> &TapState {
        &self.taps[tap.index()]
    }
}

/// Erasers resolved per tap, in row form (`h Pᵀ + b`).
struct Interventions {
    by_tap: [Option<(Array2<f64>, Array2<f64>)>; 5],
}

impl Interventions {
    fn new(erasers: &[ErasureRecord], d_model: usize) -> Result<Self> {
        let mut by_tap: [Option<(Array2<f64>, Array2<f64>)>; 5] = Default::default();
        for rec in erasers {
            rec.validate()?;
            rec.check_dim(d_model)
                .map_err(|e| e.context(format!("eraser at tap {}", rec.layer_tap)))?;
            let slot = &mut by_tap[rec.layer_tap.index()];
            if slot.is_some() {
                return Err(Error::domain(format!(
                    "more than one eraser for tap {}",
                    rec.layer_tap
                )));
            }
            let b = Array1::from(rec.b.clone()).insert_axis(Axis(0));
            *slot = Some((rec.p.t().to_owned(), b));
        }
        Ok(Self { by_tap })
    }
}

/// Variables of one forward graph.
struct Graph {
    pred: Var,
    taps: [Var; 5],
}

/// Structurally faithful, desk-scale patch forecaster.
#[derive(Debug, Clone)]
pub struct Forecaster {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
    layout: Layout,
}

impl Forecaster {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut pb = ParamBuilder {
            names: Vec::new(),
            values: Vec::new(),
            rng: rng::rng(seed),
        };
        let embed = pb.residual_block("embed", config.patch_len, config.d_ff, d, true);
        let positions = pb.normal("positions".into(), config.n_patches(), d, 1.0);
        let encoder = (0..config.n_enc)
            .map(|i| EncoderLayer {
                attn_norm: pb.norm(&format!("enc{i}.attn_norm"), d),
                attn: pb.attention(&format!("enc{i}.attn"), d),
                ff_norm: pb.norm(&format!("enc{i}.ff_norm"), d),
                ff: pb.feed_forward(&format!("enc{i}.ff"), d, config.d_ff),
            })
            .collect();
        let encoder_norm = pb.norm("enc.norm", d);
        let start_tokens = pb.normal("dec.start".into(), config.decoder_tokens, d, 1.0);
        let decoder = (0..config.n_dec)
            .map(|i| DecoderLayer {
                self_norm: pb.norm(&format!("dec{i}.self_norm"), d),
                self_attn: pb.attention(&format!("dec{i}.self_attn"), d),
                cross_norm: pb.norm(&format!("dec{i}.cross_norm"), d),
                cross_attn: pb.attention(&format!("dec{i}.cross_attn"), d),
                ff_norm: pb.norm(&format!("dec{i}.ff_norm"), d),
                ff: pb.feed_forward(&format!("dec{i}.ff"), d, config.d_ff),
            })
            .collect();
        let decoder_norm = pb.norm("dec.norm", d);
        let head = pb.residual_block(
            "head",
            d,
            config.d_ff,
            config.horizon * config.quantiles.len(),
            false,
        );
        Ok(Self {
            config,
            names: pb.names,
            params: pb.values,
            layout: Layout {
                embed,
                positions,
                encoder,
                encoder_norm,
                start_tokens,
                decoder,
                decoder_norm,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Weights file: named matrices tagged with the model config as JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_string(&self.config)?;
        let mats: Vec<(String, Array2<f64>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        store::write_matrices(path, WEIGHTS_TAG, &meta, &mats)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (tag, meta, mats) = store::read_matrices(path)?;
        if tag != WEIGHTS_TAG {
            return Err(Error::InvalidRecord(format!("`{tag}` is not a weights file")));
        }
        let config: ModelConfig = serde_json::from_str(&meta)?;
        let mut model = Self::new(config, 0)?;
        if mats.len() != model.params.len() {
            return Err(Error::InvalidRecord(format!(
                "weights file holds {} matrices, model needs {}",
                mats.len(),
                model.params.len()
            )));
        }
        for (name, value) in mats {
            let idx = model
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::InvalidRecord(format!("unknown weight `{name}`")))?;
            if model.params[idx].dim() != value.dim() {
                return Err(Error::InvalidRecord(format!(
                    "weight `{name}` has shape {:?}, expected {:?}",
                    value.dim(),
                    model.params[idx].dim()
                )));
            }
            model.params[idx] = value;
        }
        Ok(model)
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.config.context_len {
            return Err(Error::Shape(format!(
                "context has {} samples, model expects {}",
                context.len(),
                self.config.context_len
            )));
        }
        Ok(())
    }

    fn dropout(&self, tape: &mut Tape<'_>, x: Var, rng: &mut Option<&mut Rng>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let shape = tape.value(x).raw_dim();
                let mask = Array2::from_shape_simple_fn((shape[0], shape[1]), || {
                    if r.random::<f64>() < p { 0.0 } else { keep }
                });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }

    fn linear(&self, tape: &mut Tape<'_>, p: Linear, x: Var) -> Var {
        let w = tape.param(p.w);
        let b = tape.param(p.b);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }

    fn norm(&self, tape: &mut Tape<'_>, p: Norm, x: Var) -> Var {
        let g = tape.param(p.gamma);
        let b = tape.param(p.beta);
        tape.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    fn residual_block(
        &self,
        tape: &mut Tape<'_>,
        p: ResidualBlock,
        x: Var,
        rng: &mut Option<&mut Rng>,
    ) -> Var {
        let m = self.linear(tape, p.hidden, x);
        let m = tape.sigmoid(m);
        let o = self.linear(tape, p.out, m);
        let o = self.dropout(tape, o, rng);
        let r = self.linear(tape, p.residual, x);
        let sum = tape.add(o, r);
        match p.norm {
            Some(n) => self.norm(tape, n, sum),
            None => sum,
        }
    }

    fn attention(
        &self,
        tape: &mut Tape<'_>,
        p: Attention,
        queries: Var,
        keys: Var,
        causal: bool,
    ) -> Var {
        let wq = tape.param(p.q);
        let wk = tape.param(p.k);
        let wv = tape.param(p.v);
        let wo = tape.param(p.o);
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(keys, wk);
        let v = tape.matmul(keys, wv);
        let dh = self.config.head_dim();
        let (nq, nk) = (tape.value(q).nrows(), tape.value(k).nrows());
        let mask = causal.then(|| {
            Array2::from_shape_fn((nq, nk), |(i, j)| if j > i { -1e30 } else { 0.0 })
        });
        let heads: Vec<Var> = (0..self.config.n_heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
                let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
                let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
                let scores = tape.matmul_bt(qh, kh);
                let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
                if let Some(m) = &mask {
                    let m = tape.constant(m.clone());
                    scores = tape.add(scores, m);
                }
                let weights = tape.softmax_rows(scores);
                tape.matmul(weights, vh)
            })
            .collect();
        let ctx = tape.concat_cols(&heads);
        tape.matmul(ctx, wo)
    }

    fn feed_forward(
        &self,
        tape: &mut Tape<'_>,
        p: FeedForward,
        x: Var,
        rng: &mut Option<&mut Rng>,
    ) -> Var {
        let h = self.linear(tape, p.up, x);
        let h = tape.relu(h);
        let h = self.dropout(tape, h, rng);
        self.linear(tape, p.down, h)
    }

    fn erase(&self, tape: &mut Tape<'_>, iv: &Interventions, tap: TapId, h: Var) -> Var {
        match &iv.by_tap[tap.index()] {
            Some((pt, b)) => {
                let pt = tape.constant(pt.clone());
                let b = tape.constant(b.clone());
                let projected = tape.matmul(h, pt);
                tape.add_row(projected, b)
            }
            None => h,
        }
    }

    fn build_graph(
        &self,
        tape: &mut Tape<'_>,
        normalized: &[f64],
        iv: &Interventions,
        decoder_inputs: Option<&Array2<f64>>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Graph> {
        let cfg = &self.config;
        let patches = patchify(normalized, cfg.patch_len, cfg.stride)?;
        let flat: Vec<f64> = patches.into_iter().flatten().collect();
        let x = Array2::from_shape_vec((cfg.n_patches(), cfg.patch_len), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let x = tape.constant(x);
        let rng = &mut rng;

        let emb = self.residual_block(tape, self.layout.embed, x, rng);
        let pos = tape.param(self.layout.positions);
        let mut enc = tape.add(emb, pos);
        for layer in &self.layout.encoder {
            let n = self.norm(tape, layer.attn_norm, enc);
            let a = self.attention(tape, layer.attn, n, n, false);
            let a = self.dropout(tape, a, rng);
            enc = tape.add(enc, a);
            let n = self.norm(tape, layer.ff_norm, enc);
            let f = self.feed_forward(tape, layer.ff, n, rng);
            let f = self.dropout(tape, f, rng);
            enc = tape.add(enc, f);
        }
        let memory = self.norm(tape, self.layout.encoder_norm, enc);

        let mut dec = match decoder_inputs {
            Some(inputs) => {
                if inputs.ncols() != cfg.d_model || inputs.nrows() == 0 {
                    return Err(Error::Shape(format!(
                        "decoder inputs {:?} need {} columns",
                        inputs.dim(),
                        cfg.d_model
                    )));
                }
                tape.constant(inputs.clone())
            }
            None => tape.param(self.layout.start_tokens),
        };
        let mut taps = [dec; 5];
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            let n = self.norm(tape, layer.self_norm, dec);
            let a = self.attention(tape, layer.self_attn, n, n, true);
            let a = self.dropout(tape, a, rng);
            dec = tape.add(dec, a);
            let n = self.norm(tape, layer.cross_norm, dec);
            let c = self.attention(tape, layer.cross_attn, n, memory, false);
            let c = self.dropout(tape, c, rng);
            dec = tape.add(dec, c);
            let n = self.norm(tape, layer.ff_norm, dec);
            let f = self.feed_forward(tape, layer.ff, n, rng);
            let f = self.dropout(tape, f, rng);
            dec = tape.add(dec, f);
            let tap = TapId::from_index(i).expect("four decoder blocks");
            dec = self.erase(tape, iv, tap, dec);
            taps[i] = dec;
        }
        let out = self.norm(tape, self.layout.decoder_norm, dec);
        let out = self.erase(tape, iv, TapId::Out, out);
        taps[4] = out;
        let last = tape.value(out).nrows() - 1;
        let last = tape.select_row(out, last);
        let pred = self.residual_block(tape, self.layout.head, last, rng);
        Ok(Graph { pred, taps })
    }

    fn pool(&self, states: &Array2<f64>) -> Array1<f64> {
        match self.config.tap_pooling {
            TapPooling::Final => states.row(states.nrows() - 1).to_owned(),
            TapPooling::Mean => states.mean_axis(Axis(0)).expect("at least one position"),
        }
    }

    /// Frozen inference over one context window, with optional erasers
    /// replacing tap states `h` by `P h + b`.
    pub fn forward(&self, context: &[f64], erasers: &[ErasureRecord]) -> Result<ForwardOutput> {
        self.check_context(context)?;
        let iv = Interventions::new(erasers, self.config.d_model)?;
        let norm = signal::instance_normalize(context, self.config.epsilon)?;
        let mut tape = Tape::new(&self.params);
        let graph = self.build_graph(&mut tape, &norm.values, &iv, None, None)?;
        let raw = tape.value(graph.pred);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite forecast".into()));
        }
        let nq = self.config.quantiles.len();
        let mut quantiles = Array2::from_shape_fn((self.config.horizon, nq), |(t, q)| {
            norm.denormalize(raw[[0, t * nq + q]])
        });
        for mut row in quantiles.rows_mut() {
            let mut v = row.to_vec();
            v.sort_by(f64::total_cmp);
            row.assign(&Array1::from(v));
        }
        let taps = TapId::ALL
            .iter()
            .map(|&tap| TapState {
                tap,
                hidden: self.pool(tape.value(graph.taps[tap.index()])),
            })
            .collect();
        Ok(ForwardOutput { quantiles, taps })
    }

    /// Median forecast of the next `horizon` samples.
    pub fn forecast_median(&self, context: &[f64], erasers: &[ErasureRecord]) -> Result<Vec<f64>> {
        let out = self.forward(context, erasers)?;
        Ok(out.quantiles.column(self.config.median_index()).to_vec())
    }

    /// Per-position tap states (`decoder positions × d_model` per tap) for
    /// explicit decoder inputs instead of the learned start tokens.
    pub fn decoder_tap_states(
        &self,
        context: &[f64],
        decoder_inputs: &Array2<f64>,
        erasers: &[ErasureRecord],
    ) -> Result<Vec<Array2<f64>>> {
        self.check_context(context)?;
        let iv = Interventions::new(erasers, self.config.d_model)?;
        let norm = signal::instance_normalize(context, self.config.epsilon)?;
        let mut tape = Tape::new(&self.params);
        let graph = self.build_graph(&mut tape, &norm.values, &iv, Some(decoder_inputs), None)?;
        Ok(graph.taps.iter().map(|v| tape.value(*v).clone()).collect())
    }

    /// Closed-loop generation: forecast `horizon` samples, append the median,
    /// keep the most recent `context_len` samples, repeat.
    pub fn generate(&self, context: &[f64], total: usize, erasers: &[ErasureRecord]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let h = self.config.horizon;
        if !total.is_multiple_of(h) {
            return Err(Error::domain(format!(
                "generation length {total} is not a multiple of the horizon {h}"
            )));
        }
        let mut window = context.to_vec();
        let mut generated = Vec::with_capacity(total);
        for _ in 0..total / h {
            let step = self.forecast_median(&window, erasers)?;
            generated.extend_from_slice(&step);
            window.extend_from_slice(&step);
            window.drain(..h);
        }
        Ok(generated)
    }

    /// Pinball loss of one `(context, target)` pair and its parameter
    /// gradients. Targets are normalized with the context statistics.
    pub fn loss_and_gradients(
        &self,
        context: &[f64],
        target: &[f64],
        rng: Option<&mut Rng>,
    ) -> Result<(f64, Vec<Option<Array2<f64>>>)> {
        self.check_context(context)?;
        if target.len() != self.config.horizon {
            return Err(Error::Shape(format!(
                "target has {} samples, horizon is {}",
                target.len(),
                self.config.horizon
            )));
        }
        let norm: Normalized = signal::instance_normalize(context, self.config.epsilon)?;
        let target: Vec<f64> = target.iter().map(|v| norm.normalize(*v)).collect();
        let iv = Interventions::new(&[], self.config.d_model)?;
        let mut tape = Tape::new(&self.params);
        let graph = self.build_graph(&mut tape, &norm.values, &iv, None, rng)?;
        let loss = tape.pinball(graph.pred, &target, &self.config.quantiles);
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss is {value}")));
        }
        Ok((value, tape.backward(loss)))
    }

    /// Tap states for many windows, in input order.
    pub fn collect_taps(
        &self,
        windows: &[&[f64]],
        erasers: &[ErasureRecord],
    ) -> Result<Vec<Vec<TapState>>> {
        windows
            .par_iter()
            .map(|w| self.forward(w, erasers).map(|o| o.taps))
            .collect()
    }

    /// One [`ActivationSet`] per tap for the given windows.
    pub fn activation_sets(
        &self,
        windows: &[&[f64]],
        labels: &[i32],
        frequencies: &[i32],
        erasers: &[ErasureRecord],
    ) -> Result<Vec<ActivationSet>> {
        let states = self.collect_taps(windows, erasers)?;
        let d = self.config.d_model;
        TapId::ALL
            .iter()
            .map(|&tap| {
                let features = Array2::from_shape_fn((states.len(), d), |(i, j)| {
                    states[i][tap.index()].hidden[j] as f32
                });
                ActivationSet::new(tap, features, labels.to_vec(), frequencies.to_vec())
            })
            .collect()
    }
}

/// A forecaster with a fixed set of erasers installed.
pub struct ErasedForecaster<'a> {
    pub model: &'a Forecaster,
    pub erasers: &'a [ErasureRecord],
}

impl SequenceGenerator for ErasedForecaster<'_> {
    fn generate(&self, context: &[f64], total: usize) -> Result<Vec<f64>> {
        self.model.generate(context, total, self.erasers)
    }
}

impl SequenceGenerator for Forecaster {
    fn generate(&self, context: &[f64], total: usize) -> Result<Vec<f64>> {
        Forecaster::generate(self, context, total, &[])
    }
}
