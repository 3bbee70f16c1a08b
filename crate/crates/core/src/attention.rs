//! Multi-head attention, the perceiving/latent transformer block, and exact
//! multiply-accumulate accounting for both.
//!
//! A block lets a small latent array (`L` rows) cross-attend to one chunk of
//! `C` input frames, then self-attend among the latents. Every quantity that
//! grows with `C` is linear in `C`; the only quadratic term is `L²`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MacCategory {
    /// Query and output projections, plus key/value projections of
    /// self-attention.
    Projection,
    /// Key and value projections of the attended input in cross-attention.
    KvProjection,
    CrossScore,
    CrossMix,
    SelfScore,
    SelfMix,
    Ffn,
}

impl MacCategory {
    pub const ALL: [MacCategory; 7] = [
        MacCategory::Projection,
        MacCategory::KvProjection,
        MacCategory::CrossScore,
        MacCategory::CrossMix,
        MacCategory::SelfScore,
        MacCategory::SelfMix,
        MacCategory::Ffn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MacCategory::Projection => "projection",
            MacCategory::KvProjection => "kv_projection",
            MacCategory::CrossScore => "cross_score",
            MacCategory::CrossMix => "cross_mix",
            MacCategory::SelfScore => "self_score",
            MacCategory::SelfMix => "self_mix",
            MacCategory::Ffn => "ffn",
        }
    }
}

impl fmt::Display for MacCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Multiply-accumulate tallies derived from operand shapes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    tallies: BTreeMap<MacCategory, u64>,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, category: MacCategory, macs: u64) {
        *self.tallies.entry(category).or_default() += macs;
    }

    pub fn get(&self, category: MacCategory) -> u64 {
        self.tallies.get(&category).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.tallies.values().sum()
    }

    pub fn merge(&mut self, other: &MacCounter) {
        for (&c, &v) in &other.tallies {
            self.add(c, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (MacCategory, u64)> + '_ {
        self.tallies.iter().map(|(&c, &v)| (c, v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Queries come from a different sequence than keys and values.
    Cross,
    SelfAttention,
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub features: usize,
}

impl MhaParams {
    pub fn init<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, features: usize, heads: usize) -> Result<Self> {
        check_heads(features, heads)?;
        Ok(Self {
            q: Linear::init(b, &format!("{name}.q"), features, features),
            k: Linear::init(b, &format!("{name}.k"), features, features),
            v: Linear::init(b, &format!("{name}.v"), features, features),
            o: Linear::init(b, &format!("{name}.o"), features, features),
            heads,
            features,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.features / self.heads
    }
}

fn check_heads(features: usize, heads: usize) -> Result<()> {
    if heads == 0 || features == 0 || !features.is_multiple_of(heads) {
        return Err(Error::HeadsDoNotDivideF { heads, features });
    }
    Ok(())
}

/// Position-wise feed-forward sublayer `LN → F→d_ff → ReLU → d_ff→F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
    pub width: usize,
}

impl FeedForward {
    fn init<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, features: usize, width: usize) -> Option<Self> {
        (width > 0).then(|| Self {
            norm: LayerNorm::init(b, &format!("{name}.norm"), features),
            up: Linear::init(b, &format!("{name}.up"), features, width),
            down: Linear::init(b, &format!("{name}.down"), width, features),
            width,
        })
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, counter: &mut MacCounter) -> Result<Var> {
        let shape = tape.shape(x);
        let features = *shape.last().expect("rank ≥ 1");
        let rows = (shape.iter().product::<usize>() / features) as u64;
        counter.add(MacCategory::Ffn, 2 * rows * (features * self.width) as u64);
        let h = self.norm.forward(tape, p, x)?;
        let h = self.up.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = self.down.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Latents cross-attend to the chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerceivingLayer {
    pub norm_latent: LayerNorm,
    pub norm_input: LayerNorm,
    pub attn: MhaParams,
    pub ffn: Option<FeedForward>,
}

/// Latents self-attend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentLayer {
    pub norm: LayerNorm,
    pub attn: MhaParams,
    pub ffn: Option<FeedForward>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub features: usize,
    pub heads: usize,
    pub perceiving: usize,
    pub latent: usize,
    pub ffn_width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerceparatorBlockParams {
    pub perceiving: Vec<PerceivingLayer>,
    pub latent: Vec<LatentLayer>,
}

impl PerceparatorBlockParams {
    pub fn init<T: Scalar>(b: &mut ParamBuilder<T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        if cfg.perceiving == 0 || cfg.latent == 0 {
            return Err(Error::InvalidConfig(
                "a block needs at least one perceiving and one latent transformer".into(),
            ));
        }
        let f = cfg.features;
        let perceiving = (0..cfg.perceiving)
            .map(|i| {
                let n = format!("{name}.perceiving.{i}");
                Ok(PerceivingLayer {
                    norm_latent: LayerNorm::init(b, &format!("{n}.norm_latent"), f),
                    norm_input: LayerNorm::init(b, &format!("{n}.norm_input"), f),
                    attn: MhaParams::init(b, &format!("{n}.attn"), f, cfg.heads)?,
                    ffn: FeedForward::init(b, &format!("{n}.ffn"), f, cfg.ffn_width),
                })
            })
            .collect::<Result<_>>()?;
        let latent = (0..cfg.latent)
            .map(|i| {
                let n = format!("{name}.latent.{i}");
                Ok(LatentLayer {
                    norm: LayerNorm::init(b, &format!("{n}.norm"), f),
                    attn: MhaParams::init(b, &format!("{n}.attn"), f, cfg.heads)?,
                    ffn: FeedForward::init(b, &format!("{n}.ffn"), f, cfg.ffn_width),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { perceiving, latent })
    }

    /// Every output projection, for residual-identity checks.
    pub fn output_projections(&self) -> Vec<Linear> {
        self.perceiving
            .iter()
            .map(|l| l.attn.o)
            .chain(self.latent.iter().map(|l| l.attn.o))
            .collect()
    }
}

fn batch_count(shape: &[usize]) -> u64 {
    shape[..shape.len() - 2].iter().product::<usize>() as u64
}

/// Scaled dot-product attention with `p.heads` heads.
///
/// `q_in: [..., N_q, F]`, `kv_in: [..., M, F]`; leading axes broadcast.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    q_in: Var,
    kv_in: Var,
    p: &MhaParams,
    kind: AttentionKind,
    counter: &mut MacCounter,
) -> Result<Var> {
    check_heads(p.features, p.heads)?;
    let (qs, ks) = (tape.shape(q_in).to_vec(), tape.shape(kv_in).to_vec());
    if qs.len() < 2 || ks.len() < 2 || qs.last() != Some(&p.features) || ks.last() != Some(&p.features) {
        return Err(Error::shape("multi_head_attention", &qs, &ks));
    }
    let f = p.features;
    let (h, dh) = (p.heads, p.head_dim());
    let (nq, m) = (qs[qs.len() - 2], ks[ks.len() - 2]);

    let split_heads = |tape: &mut Tape<T>, x: Var, shape: &[usize], key_major: bool| -> Result<Var> {
        let nb = shape.len() - 2;
        let mut s = shape[..shape.len() - 1].to_vec();
        s.extend([h, dh]);
        let x = tape.reshape(x, &s)?;
        // [..., N, H, dh] → [..., H, N, dh] (or [..., H, dh, N] for keys).
        let mut axes: Vec<usize> = (0..nb).collect();
        if key_major {
            axes.extend([nb + 1, nb + 2, nb]);
        } else {
            axes.extend([nb + 1, nb, nb + 2]);
        }
        tape.permute(x, &axes)
    };

    let q = p.q.forward(tape, params, q_in)?;
    let k = p.k.forward(tape, params, kv_in)?;
    let v = p.v.forward(tape, params, kv_in)?;
    let q = split_heads(tape, q, &qs, false)?;
    let k = split_heads(tape, k, &ks, true)?;
    let v = split_heads(tape, v, &ks, false)?;

    let scores = tape.matmul(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let rank = tape.shape(scores).len();
    let weights = tape.softmax(scores, rank - 1)?;
    let ctx = tape.matmul(weights, v)?;
    let batch = batch_count(tape.shape(ctx)) / h as u64;

    // [..., H, N_q, dh] → [..., N_q, H, dh] → [..., N_q, F]
    let cs = tape.shape(ctx).to_vec();
    let nb = cs.len() - 3;
    let mut axes: Vec<usize> = (0..nb).collect();
    axes.extend([nb + 1, nb, nb + 2]);
    let ctx = tape.permute(ctx, &axes)?;
    let mut merged = cs[..nb].to_vec();
    merged.extend([nq, f]);
    let ctx = tape.reshape(ctx, &merged)?;
    let out = p.o.forward(tape, params, ctx)?;

    let (ff, nq64, m64) = ((f * f) as u64, nq as u64, m as u64);
    let q_rows = batch_count(&qs) * nq64;
    let kv_rows = batch_count(&ks) * m64;
    let attn_macs = batch * nq64 * m64 * f as u64;
    let (kv, score, mix) = match kind {
        AttentionKind::Cross => (MacCategory::KvProjection, MacCategory::CrossScore, MacCategory::CrossMix),
        AttentionKind::SelfAttention => (MacCategory::Projection, MacCategory::SelfScore, MacCategory::SelfMix),
    };
    counter.add(MacCategory::Projection, q_rows * ff + batch * nq64 * ff);
    counter.add(kv, 2 * kv_rows * ff);
    counter.add(score, attn_macs);
    counter.add(mix, attn_macs);
    Ok(out)
}

/// One perceiving + latent block with pre-norm residual sublayers.
///
/// `h_chunk: [..., C, F]`, `latent: [..., L, F]`; returns the updated latent.
pub fn perceparator_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &Bound,
    h_chunk: Var,
    latent: Var,
    p: &PerceparatorBlockParams,
    counter: &mut MacCounter,
) -> Result<Var> {
    let mut z = latent;
    for layer in &p.perceiving {
        let q = layer.norm_latent.forward(tape, params, z)?;
        let kv = layer.norm_input.forward(tape, params, h_chunk)?;
        let a = multi_head_attention(tape, params, q, kv, &layer.attn, AttentionKind::Cross, counter)?;
        z = tape.add(z, a)?;
        if let Some(ffn) = &layer.ffn {
            z = ffn.forward(tape, params, z, counter)?;
        }
    }
    for layer in &p.latent {
        let x = layer.norm.forward(tape, params, z)?;
        let a = multi_head_attention(tape, params, x, x, &layer.attn, AttentionKind::SelfAttention, counter)?;
        z = tape.add(z, a)?;
        if let Some(ffn) = &layer.ffn {
            z = ffn.forward(tape, params, z, counter)?;
        }
    }
    Ok(z)
}

/// One point of a complexity sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeConfig {
    pub chunk: usize,
    pub latent: usize,
    pub features: usize,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeModel {
    /// Latent-bottleneck block (one perceiving, one latent transformer).
    Perceparator,
    /// Full self-attention over the `C` chunk frames.
    Reference,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbeRow {
    pub config: ProbeConfig,
    pub model: ProbeModel,
    pub category: MacCategory,
    pub macs: u64,
}

impl ProbeRow {
    fn label(&self) -> String {
        match self.model {
            ProbeModel::Perceparator => self.category.to_string(),
            ProbeModel::Reference => format!("reference_{}", self.category),
        }
    }
}

pub const EXPONENT_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    /// Fitted exponent in `C` of the block's chunk-dependent cost
    /// (key/value projections, cross scores, cross mixing).
    pub chunk_exponent: f64,
    /// Fitted exponent in `C` of the reference's score + mixing cost.
    pub reference_exponent: f64,
}

impl ProbeReport {
    pub fn within_tolerance(&self) -> bool {
        (self.chunk_exponent - 1.0).abs() <= EXPONENT_TOLERANCE
            && (self.reference_exponent - 2.0).abs() <= EXPONENT_TOLERANCE
    }

    pub fn macs(&self, chunk: usize, model: ProbeModel, category: MacCategory) -> u64 {
        self.rows
            .iter()
            .find(|r| r.config.chunk == chunk && r.model == model && r.category == category)
            .map_or(0, |r| r.macs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("C,L,F,H,category,macs\n");
        for r in &self.rows {
            let c = r.config;
            let _ = writeln!(s, "{},{},{},{},{},{}", c.chunk, c.latent, c.features, c.heads, r.label(), r.macs);
        }
        s
    }

    pub fn render_table(&self) -> String {
        let mut s = format!("{:>6} {:>4} {:>5} {:>3}  {:<26} {:>16}\n", "C", "L", "F", "H", "category", "MACs");
        for r in &self.rows {
            let c = r.config;
            let _ = writeln!(
                s,
                "{:>6} {:>4} {:>5} {:>3}  {:<26} {:>16}",
                c.chunk,
                c.latent,
                c.features,
                c.heads,
                r.label(),
                r.macs
            );
        }
        let _ = writeln!(
            s,
            "chunk-dependent exponent: {:.4} (target 1.00 ± {EXPONENT_TOLERANCE})",
            self.chunk_exponent
        );
        let _ = writeln!(
            s,
            "reference exponent:       {:.4} (target 2.00 ± {EXPONENT_TOLERANCE})",
            self.reference_exponent
        );
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Runs one block and one full self-attention per chunk length with an
/// instrumented counter and fits scaling exponents in `C`.
pub fn complexity_probe(configs: &[ProbeConfig]) -> Result<ProbeReport> {
    let mut chunks: Vec<usize> = configs.iter().map(|c| c.chunk).collect();
    chunks.sort_unstable();
    chunks.dedup();
    if chunks.len() < 3 || chunks.len() != configs.len() {
        return Err(Error::InvalidConfig(format!(
            "complexity probe needs at least 3 distinct chunk lengths, got {:?}",
            configs.iter().map(|c| c.chunk).collect::<Vec<_>>()
        )));
    }
    let first = configs[0];
    if configs
        .iter()
        .any(|c| (c.latent, c.features, c.heads) != (first.latent, first.features, first.heads))
    {
        return Err(Error::InvalidConfig("probe points must share L, F and H".into()));
    }
    if first.chunk == 0 || first.latent == 0 {
        return Err(Error::InvalidConfig("chunk and latent lengths must be positive".into()));
    }
    let cfg = BlockConfig {
        features: first.features,
        heads: first.heads,
        perceiving: 1,
        latent: 1,
        ffn_width: 0,
    };
    let mut builder = ParamBuilder::<f32>::new(0x5eed);
    let block = PerceparatorBlockParams::init(&mut builder, "block", &cfg)?;
    let reference = MhaParams::init(&mut builder, "reference", cfg.features, cfg.heads)?;
    let store: ParamStore<f32> = builder.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut rows = Vec::new();
    let (mut xs, mut block_cost, mut ref_cost) = (Vec::new(), Vec::new(), Vec::new());
    for &pc in configs {
        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let h = tape.constant(random_input(&mut rng, &[pc.chunk, pc.features]));
        let lat = tape.constant(random_input(&mut rng, &[pc.latent, pc.features]));

        let mut counter = MacCounter::new();
        perceparator_block(&mut tape, &params, h, lat, &block, &mut counter)?;
        let mut ref_counter = MacCounter::new();
        multi_head_attention(&mut tape, &params, h, h, &reference, AttentionKind::SelfAttention, &mut ref_counter)?;

        for (model, c) in [(ProbeModel::Perceparator, &counter), (ProbeModel::Reference, &ref_counter)] {
            for (category, macs) in c.iter() {
                rows.push(ProbeRow { config: pc, model, category, macs });
            }
        }
        xs.push(pc.chunk as f64);
        block_cost.push(
            (counter.get(MacCategory::KvProjection)
                + counter.get(MacCategory::CrossScore)
                + counter.get(MacCategory::CrossMix)) as f64,
        );
        ref_cost.push((ref_counter.get(MacCategory::SelfScore) + ref_counter.get(MacCategory::SelfMix)) as f64);
    }
    Ok(ProbeReport {
        rows,
        chunk_exponent: fit_exponent(&xs, &block_cost),
        reference_exponent: fit_exponent(&xs, &ref_cost),
    })
}
