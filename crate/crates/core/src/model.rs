//! Encoder, masking network and decoder.
//!
//! Shapes follow the time-major convention inside the masking network:
//! `e: [F, T′]` is transposed to `[T′, F]`, chunked into `[N_C, C, F]`,
//! squeezed through the latent stack, then restored and merged back.

use crate::attention::{perceparator_block, BlockConfig, MacCounter, PerceparatorBlockParams};
use crate::autodiff::{Tape, Var};
use crate::chunking::{ChunkLayout, Overlap};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Encoder channels `F`.
    pub features: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Chunk size `C`.
    pub chunk: usize,
    pub overlap: Overlap,
    /// Latent length `L`.
    pub latent: usize,
    /// Block repeats `N`.
    pub blocks: usize,
    pub heads: usize,
    pub latent_layers: usize,
    pub perceiving_layers: usize,
    /// Number of speakers `N_S`.
    pub speakers: usize,
    /// Feed-forward width inside blocks (0 disables the sublayer).
    pub ffn_width: usize,
    pub mask_ffw_width: usize,
    /// Reuse one block's parameters for all `N` repeats.
    pub share_blocks: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: 256,
            kernel: 3,
            stride: 1,
            padding: 0,
            chunk: 250,
            overlap: Overlap::None,
            latent: 32,
            blocks: 15,
            heads: 16,
            latent_layers: 1,
            perceiving_layers: 1,
            speakers: 2,
            ffn_width: 0,
            mask_ffw_width: 256,
            share_blocks: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.features == 0 || self.heads == 0 || !self.features.is_multiple_of(self.heads) {
            return Err(Error::HeadsDoNotDivideF { heads: self.heads, features: self.features });
        }
        for (name, v) in [
            ("kernel", self.kernel),
            ("stride", self.stride),
            ("chunk", self.chunk),
            ("latent", self.latent),
            ("blocks", self.blocks),
            ("latent_layers", self.latent_layers),
            ("perceiving_layers", self.perceiving_layers),
            ("mask_ffw_width", self.mask_ffw_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.speakers < 2 {
            return bad(format!("speakers must be at least 2, got {}", self.speakers));
        }
        if self.overlap == Overlap::Half && !self.chunk.is_multiple_of(2) {
            return bad(format!("50% overlap needs an even chunk size, got {}", self.chunk));
        }
        Ok(())
    }

    /// Encoder output length for an input of `len` samples.
    pub fn encoded_len(&self, len: usize) -> Result<usize> {
        if len + 2 * self.padding < self.kernel {
            return Err(Error::InputTooShort { len, kernel: self.kernel });
        }
        Ok((len + 2 * self.padding - self.kernel) / self.stride + 1)
    }

    fn block_config(&self) -> BlockConfig {
        BlockConfig {
            features: self.features,
            heads: self.heads,
            perceiving: self.perceiving_layers,
            latent: self.latent_layers,
            ffn_width: self.ffn_width,
        }
    }
}

/// Where every learnable array lives in the parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    pub config: ModelConfig,
    pub encoder_weight: ParamId,
    pub encoder_bias: ParamId,
    pub pre_norm: LayerNorm,
    pub pre_linear: Linear,
    pub latent: ParamId,
    /// One entry per repeat (all equal when blocks are shared).
    pub blocks: Vec<PerceparatorBlockParams>,
    /// Maps the latent axis `L → C`.
    pub restore_seq: Linear,
    pub restore_feat: Linear,
    pub prelu_slope: ParamId,
    pub expand: Linear,
    pub mask_w1: ParamId,
    pub mask_b1: ParamId,
    pub mask_w2: ParamId,
    pub mask_b2: ParamId,
    pub decoder_weight: ParamId,
    pub decoder_bias: ParamId,
}

impl ModelLayout {
    fn build<T: Scalar>(config: &ModelConfig, b: &mut ParamBuilder<T>) -> Result<Self> {
        config.validate()?;
        let (f, k, s, w) = (config.features, config.kernel, config.speakers, config.mask_ffw_width);
        let encoder_weight = b.fan_in_uniform("encoder.weight", &[f, 1, k], k);
        let encoder_bias = b.zeros("encoder.bias", &[f]);
        let pre_norm = LayerNorm::init(b, "pre.norm", f);
        let pre_linear = Linear::init(b, "pre.linear", f, f);
        let latent = b.truncated_normal("latent", &[config.latent, f], 0.02, 2.0);
        let block_cfg = config.block_config();
        let blocks = if config.share_blocks {
            let block = PerceparatorBlockParams::init(b, "block.shared", &block_cfg)?;
            vec![block; config.blocks]
        } else {
            (0..config.blocks)
                .map(|i| PerceparatorBlockParams::init(b, &format!("block.{i}"), &block_cfg))
                .collect::<Result<_>>()?
        };
        let restore_seq = Linear::init(b, "restore.seq", config.latent, config.chunk);
        let restore_feat = Linear::init(b, "restore.feat", f, f);
        let prelu_slope = b.constant("prelu.slope", &[f], 0.25);
        let expand = Linear::init(b, "expand", f, f * s);
        let mask_w1 = b.fan_in_uniform("mask.w1", &[s, f, w], f);
        let mask_b1 = b.zeros("mask.b1", &[s, 1, w]);
        let mask_w2 = b.fan_in_uniform("mask.w2", &[s, w, f], w);
        let mask_b2 = b.zeros("mask.b2", &[s, 1, f]);
        let decoder_weight = b.fan_in_uniform("decoder.weight", &[f, 1, k], f * k);
        let decoder_bias = b.zeros("decoder.bias", &[1]);
        Ok(Self {
            config: config.clone(),
            encoder_weight,
            encoder_bias,
            pre_norm,
            pre_linear,
            latent,
            blocks,
            restore_seq,
            restore_feat,
            prelu_slope,
            expand,
            mask_w1,
            mask_b1,
            mask_w2,
            mask_b2,
            decoder_weight,
            decoder_bias,
        })
    }
}

/// Layout plus values of every learnable array.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub layout: ModelLayout,
    pub store: ParamStore<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialisation: fan-in uniform weights, zero biases, unit
    /// LayerNorm gains, PReLU slopes 0.25 and a truncated-normal latent.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut b = ParamBuilder::new(seed);
        let layout = ModelLayout::build(config, &mut b)?;
        Ok(Self { layout, store: b.finish() })
    }

    /// Attaches stored arrays to `config`, checking names and shapes.
    pub fn from_store(config: &ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut b = ParamBuilder::<T>::new(0);
        let layout = ModelLayout::build(config, &mut b)?;
        let expected = b.finish();
        if expected.len() != store.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                store.len()
            )));
        }
        for ((en, et), (n, t)) in expected.iter().zip(store.iter()) {
            if en != n || et.shape() != t.shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "expected `{en}` {:?}, found `{n}` {:?}",
                    et.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { layout, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { layout: self.layout.clone(), store: self.store.cast() }
    }

    /// Scalar learnables in the repeat-`index` block.
    pub fn block_param_count(&self, index: usize) -> usize {
        let prefix = if self.layout.config.share_blocks {
            "block.shared.".to_string()
        } else {
            format!("block.{index}.")
        };
        self.store.iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(_, t)| t.numel()).sum()
    }
}

/// Exact number of scalar learnables.
pub fn count_params<T: Scalar>(params: &ModelParams<T>) -> usize {
    params.store.numel()
}

/// `x: [1, T]` → `e: [F, T′] = ReLU(conv1d(x))`.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, p: &Bound, layout: &ModelLayout, x: Var) -> Result<Var> {
    let cfg = &layout.config;
    match *tape.shape(x) {
        [1, t] => {
            cfg.encoded_len(t)?;
        }
        ref other => return Err(Error::shape("encode", other, &[1, 0])),
    }
    let e = tape.conv1d(
        x,
        p.var(layout.encoder_weight),
        p.var(layout.encoder_bias),
        cfg.stride,
        cfg.padding,
    )?;
    tape.relu(e)
}

/// Fixed sinusoidal table `[C, F]`: even features `sin`, odd `cos`.
pub fn positional_table<T: Scalar>(chunk: usize, features: usize) -> Tensor<T> {
    Tensor::from_fn(&[chunk, features], |i| {
        let (t, j) = ((i / features) as f64, i % features);
        let angle = t / 10000f64.powf((j - j % 2) as f64 / features as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Adds the positional table to every chunk of `h: [N_C, C, F]`.
pub fn add_positional<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    let [_, c, f] = shape[..] else {
        return Err(Error::shape("add_positional", &shape, &[0, 0, 0]));
    };
    let pe = tape.constant(positional_table(c, f));
    tape.add(h, pe)
}

/// Runs the block stack on every chunk of `h: [N_C, C, F]` with the shared
/// latent; returns `[N_C, L, F]`.
pub fn latent_stack<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    layout: &ModelLayout,
    h: Var,
    counter: &mut MacCounter,
) -> Result<Var> {
    let mut z = p.var(layout.latent);
    for block in &layout.blocks {
        z = perceparator_block(tape, p, h, z, block, counter)?;
    }
    Ok(z)
}

/// `e: [F, T′]` → masks `[N_S, F, T′]`, every element non-negative.
pub fn masking_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    layout: &ModelLayout,
    e: Var,
    counter: &mut MacCounter,
) -> Result<Var> {
    let cfg = &layout.config;
    let (f, s) = (cfg.features, cfg.speakers);
    let t_enc = match *tape.shape(e) {
        [ff, t] if ff == f => t,
        ref other => return Err(Error::shape("masking_forward", other, &[f, 0])),
    };
    let chunks = ChunkLayout::new(t_enc, cfg.chunk, cfg.overlap)?;

    let h = tape.transpose(e)?;
    let h = layout.pre_norm.forward(tape, p, h)?;
    let h = layout.pre_linear.forward(tape, p, h)?;
    let h = tape.chunk(h, chunks)?;
    let h = add_positional(tape, h)?;

    let z = latent_stack(tape, p, layout, h, counter)?;
    // latent axis L → C, then features
    let z = tape.permute(z, &[0, 2, 1])?;
    let z = layout.restore_seq.forward(tape, p, z)?;
    let z = tape.permute(z, &[0, 2, 1])?;
    let z = layout.restore_feat.forward(tape, p, z)?;
    let z = tape.prelu(z, p.var(layout.prelu_slope))?;
    let z = layout.expand.forward(tape, p, z)?;

    let merged = tape.overlap_add(z, chunks)?;
    let merged = tape.reshape(merged, &[t_enc, s, f])?;
    let per_speaker = tape.permute(merged, &[1, 0, 2])?;

    let m = tape.matmul(per_speaker, p.var(layout.mask_w1))?;
    let m = tape.add(m, p.var(layout.mask_b1))?;
    let m = tape.relu(m)?;
    let m = tape.matmul(m, p.var(layout.mask_w2))?;
    let m = tape.add(m, p.var(layout.mask_b2))?;
    let m = tape.relu(m)?;
    tape.permute(m, &[0, 2, 1])
}

/// Masks `[N_S, F, T′]` applied to `e: [F, T′]`, then the transposed
/// convolution; returns `[N_S, 1, len]`.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    layout: &ModelLayout,
    masks: Var,
    e: Var,
    len: usize,
) -> Result<Var> {
    let cfg = &layout.config;
    let (ms, es) = (tape.shape(masks), tape.shape(e));
    if ms.len() != 3 || ms[1..] != *es {
        return Err(Error::shape("decode", ms, es));
    }
    let masked = tape.mul(masks, e)?;
    let y = tape.conv1d_transpose(masked, p.var(layout.decoder_weight), p.var(layout.decoder_bias), cfg.stride)?;
    tape.window(y, cfg.padding, len)
}

/// `x: [1, T]` → `[N_S, 1, T]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    layout: &ModelLayout,
    x: Var,
    counter: &mut MacCounter,
) -> Result<Var> {
    let len = tape.shape(x).last().copied().unwrap_or(0);
    let e = encode(tape, p, layout, x)?;
    let masks = masking_forward(tape, p, layout, e, counter)?;
    decode(tape, p, layout, masks, e, len)
}

/// Inference convenience: one waveform in, `N_S` waveforms out.
pub fn separate<T: Scalar>(params: &ModelParams<T>, mixture: &[T]) -> Result<Vec<Vec<T>>> {
    let mut tape = Tape::new();
    let p = params.store.bind_frozen(&mut tape);
    let x = tape.constant(Tensor::new(vec![1, mixture.len()], mixture.to_vec())?);
    let y = forward(&mut tape, &p, &params.layout, x, &mut MacCounter::new())?;
    let len = mixture.len();
    Ok(tape.value(y).data().chunks(len).map(<[T]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            features: 8,
            chunk: 10,
            latent: 4,
            blocks: 1,
            heads: 2,
            mask_ffw_width: 8,
            ..ModelConfig::default()
        }
    }

    fn signal(seed: u64, len: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, len], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn encoder_length_at_default_geometry() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.encoded_len(16000).unwrap(), 15998);
        assert!(matches!(cfg.encoded_len(2), Err(Error::InputTooShort { .. })));
    }

    #[test]
    fn encoder_output_is_relu_of_bias_for_silence() {
        let mut params = ModelParams::<f64>::init(&tiny(), 1).unwrap();
        let bias: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        params.store.get_mut(params.layout.encoder_bias).data_mut().copy_from_slice(&bias);
        let mut tape = Tape::new();
        let p = params.store.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::zeros(&[1, 12]));
        let e = encode(&mut tape, &p, &params.layout, x).unwrap();
        assert_eq!(tape.shape(e), &[8, 10]);
        for (i, v) in tape.value(e).data().iter().enumerate() {
            assert_eq!(*v, bias[i / 10].max(0.0));
        }
    }

    #[test]
    fn positional_table_starts_with_sin_cos_of_zero() {
        let pe = positional_table::<f64>(5, 6);
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_encoding_is_per_chunk_and_not_idempotent() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Tensor::zeros(&[2, 5, 6]));
        let once = add_positional(&mut tape, h).unwrap();
        let twice = add_positional(&mut tape, once).unwrap();
        let v = tape.value(once).data();
        assert_eq!(v[..30], v[30..]);
        assert_ne!(tape.value(once), tape.value(twice));
    }

    #[test]
    fn masks_are_non_negative_with_expected_shape() {
        let params = ModelParams::<f64>::init(&tiny(), 2).unwrap();
        for len in [3, 23, 57] {
            let mut tape = Tape::new();
            let p = params.store.bind_frozen(&mut tape);
            let x = tape.constant(signal(len as u64, len));
            let e = encode(&mut tape, &p, &params.layout, x).unwrap();
            let m = masking_forward(&mut tape, &p, &params.layout, e, &mut MacCounter::new()).unwrap();
            assert_eq!(tape.shape(m), &[2, 8, len - 2]);
            assert!(tape.value(m).data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn unit_masks_reduce_decoding_to_the_transposed_convolution() {
        let params = ModelParams::<f64>::init(&tiny(), 3).unwrap();
        let mut tape = Tape::new();
        let p = params.store.bind_frozen(&mut tape);
        let x = tape.constant(signal(4, 20));
        let e = encode(&mut tape, &p, &params.layout, x).unwrap();
        let ones = tape.constant(Tensor::ones(&[2, 8, 18]));
        let zeros = tape.constant(Tensor::zeros(&[2, 8, 18]));
        let y1 = decode(&mut tape, &p, &params.layout, ones, e, 20).unwrap();
        let y0 = decode(&mut tape, &p, &params.layout, zeros, e, 20).unwrap();
        let direct = crate::tensor::conv1d_transpose(
            tape.value(e),
            params.store.get(params.layout.decoder_weight),
            params.store.get(params.layout.decoder_bias),
            1,
        )
        .unwrap();
        assert_eq!(tape.shape(y1), &[2, 1, 20]);
        assert_eq!(&tape.value(y1).data()[..20], direct.data());
        assert_eq!(&tape.value(y1).data()[20..], direct.data());
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_preserves_length_and_is_deterministic() {
        let params = ModelParams::<f32>::init(&tiny(), 5).unwrap();
        let x: Vec<f32> = signal(6, 257).data().iter().map(|&v| v as f32).collect();
        let a = separate(&params, &x).unwrap();
        let b = separate(&params, &x).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|s| s.len() == 257));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_and_zero_biases_give_silence() {
        let params = ModelParams::<f32>::init(&tiny(), 7).unwrap();
        let out = separate(&params, &[0.0; 40]).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn padding_and_stride_still_restore_the_input_length() {
        let cfg = ModelConfig { kernel: 4, stride: 2, padding: 1, ..tiny() };
        let params = ModelParams::<f32>::init(&cfg, 8).unwrap();
        for len in [4, 31, 64] {
            let out = separate(&params, &vec![0.1; len]).unwrap();
            assert!(out.iter().all(|s| s.len() == len));
        }
    }

    #[test]
    fn init_is_seeded_and_latent_is_bounded() {
        let a = ModelParams::<f32>::init(&tiny(), 11).unwrap();
        assert_eq!(a, ModelParams::<f32>::init(&tiny(), 11).unwrap());
        assert_ne!(a, ModelParams::<f32>::init(&tiny(), 12).unwrap());
        let lat = a.store.get(a.layout.latent);
        assert!(lat.data().iter().all(|v| v.abs() <= 2.0));
        assert!(a.store.get(a.layout.prelu_slope).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn shared_blocks_store_one_block() {
        let cfg = ModelConfig { blocks: 3, ..tiny() };
        let shared = ModelConfig { share_blocks: true, ..cfg.clone() };
        let a = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let b = ModelParams::<f32>::init(&shared, 1).unwrap();
        assert_eq!(count_params(&a) - count_params(&b), 2 * a.block_param_count(0));
        assert_eq!(b.layout.blocks[0], b.layout.blocks[2]);
    }

    #[test]
    fn from_store_rejects_mismatched_arrays() {
        let a = ModelParams::<f32>::init(&tiny(), 1).unwrap();
        let other = ModelConfig { latent: 5, ..tiny() };
        assert!(matches!(
            ModelParams::from_store(&other, a.store.clone()),
            Err(Error::MalformedCheckpoint(_))
        ));
        assert_eq!(ModelParams::from_store(&tiny(), a.store.clone()).unwrap(), a);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases = [
            ModelConfig { heads: 3, ..tiny() },
            ModelConfig { speakers: 1, ..tiny() },
            ModelConfig { latent: 0, ..tiny() },
            ModelConfig { chunk: 9, overlap: Overlap::Half, ..tiny() },
        ];
        for c in cases {
            assert!(ModelParams::<f32>::init(&c, 0).is_err(), "{c:?}");
        }
    }
}
