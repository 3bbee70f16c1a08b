//! AdamP, the step-halving learning-rate schedule, the training loop and
//! checkpoint persistence.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::MacCounter;
use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::objectives::{si_snr_improvement, upit_loss_var};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamPConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Projection threshold; 0 turns AdamP into Adam with decoupled decay.
    pub delta: f64,
}

impl Default for AdamPConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            delta: 0.1,
        }
    }
}

impl AdamPConfig {
    pub fn from_run(run: &RunConfig) -> Self {
        Self {
            beta1: run.beta1,
            beta2: run.beta2,
            eps: run.adam_eps,
            weight_decay: run.weight_decay,
            delta: run.delta,
        }
    }
}

/// Optimizer state: one first and second moment per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamP<T> {
    pub config: AdamPConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

/// What one optimizer step did.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    /// Indices of arrays whose update was projected.
    pub projected: Vec<usize>,
}

fn dot64<T: Scalar>(a: &[T], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y).sum()
}

impl<T: Scalar> AdamP<T> {
    pub fn new(config: AdamPConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update with learning rate `lr`: Adam moments with bias
    /// correction, tangent-space projection for arrays whose weight and
    /// gradient are nearly orthogonal, and decoupled weight decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<StepReport> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adamp_step", &[params.len()], &[grads.len()]));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::shape("adamp_step", params.get(id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(id).to_string()));
            }
        }
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut report = StepReport::default();
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let mut p = Vec::with_capacity(g.len());
            for j in 0..g.len() {
                let gj = g[j].as_f64();
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = T::lit(mj);
                v[j] = T::lit(vj);
                p.push((m[j].as_f64() / bc1) / ((v[j].as_f64() / bc2).sqrt() + c.eps));
            }
            let w = params.get(id).data();
            if c.delta > 0.0 {
                let g64: Vec<f64> = g.iter().map(|x| x.as_f64()).collect();
                let ww = dot64(w, &w.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
                let gg: f64 = g64.iter().map(|x| x * x).sum();
                let cos = dot64(w, &g64).abs() / (ww.sqrt() * gg.sqrt() + c.eps);
                if cos < c.delta / (w.len() as f64).sqrt() && ww > 0.0 {
                    let coef = dot64(w, &p) / ww;
                    for (pj, wj) in p.iter_mut().zip(w) {
                        *pj -= coef * wj.as_f64();
                    }
                    report.projected.push(i);
                }
            }
            let w = params.get_mut(id).data_mut();
            for (wj, pj) in w.iter_mut().zip(&p) {
                let w0 = wj.as_f64();
                *wj = T::lit(w0 - lr * c.weight_decay * w0 - lr * pj);
            }
        }
        Ok(report)
    }
}

/// `rate(epoch) = base · 2^(−⌊epoch / interval⌋)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub halving_interval: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 1e-4, halving_interval: 64 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = epoch / self.halving_interval.max(1);
        self.base * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
    }
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::lit(v.as_f64() * s));
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub si_snri: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub si_snri: f64,
    pub step_losses: Vec<f64>,
}

/// Owns the model and optimizer, and tracks the position in training.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub run: RunConfig,
    pub params: ModelParams<f32>,
    pub optimizer: AdamP<f32>,
    pub schedule: LrSchedule,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let params = ModelParams::init(&run.model, run.seed)?;
        let optimizer = AdamP::new(AdamPConfig::from_run(&run), &params.store);
        let schedule = LrSchedule { base: run.lr, halving_interval: run.halving_interval };
        Ok(Self { run, params, optimizer, schedule, epoch: 0, step: 0 })
    }

    fn utterance(&self, ex: &Example) -> Result<(f64, f64, Vec<Tensor<f32>>)> {
        let mut tape = Tape::new();
        let p = self.params.store.bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![1, ex.mixture.len()], ex.mixture.clone())?);
        let y = model::forward(&mut tape, &p, &self.params.layout, x, &mut MacCounter::new())?;
        let (loss, assignment) = upit_loss_var(&mut tape, y, &ex.references)?;
        let len = ex.mixture.len();
        let est = tape.value(y).data();
        let mut si_snri = 0.0;
        for (i, &j) in assignment.permutation.iter().enumerate() {
            si_snri += si_snr_improvement(&est[i * len..(i + 1) * len], &ex.references[j], &ex.mixture)?;
        }
        si_snri /= assignment.permutation.len() as f64;
        let mut grads = tape.backward(loss)?;
        let g = p
            .vars()
            .iter()
            .zip(self.params.store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((tape.value(loss).data()[0] as f64, si_snri, g))
    }

    /// Runs every utterance in `batch` through the model and uPIT loss, then
    /// applies one AdamP update with the averaged (optionally clipped) gradient.
    pub fn train_step(&mut self, batch: &[&Example], lr: f64) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        let (mut loss, mut si_snri) = (0.0, 0.0);
        for ex in batch {
            let (l, s, g) = self.utterance(ex)?;
            loss += l;
            si_snri += s;
            sum = Some(match sum {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += *y);
                    }
                    acc
                }
            });
        }
        let n = batch.len() as f32;
        let mut grads = sum.expect("batch is non-empty");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        let grad_norm = clip_global_norm(&mut grads, self.run.clip_norm);
        self.optimizer.step(&mut self.params.store, &grads, lr)?;
        self.step += 1;
        Ok(StepMetrics { loss: loss / batch.len() as f64, si_snri: si_snri / batch.len() as f64, grad_norm })
    }

    /// Visiting order for epoch `epoch`, derived from `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// One shuffled pass over `data`. A non-finite batch aborts the epoch
    /// and reports its index.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("training set is empty".into()));
        }
        let lr = self.schedule.lr_at(self.epoch);
        let order = self.epoch_order(self.epoch, data.len());
        let (mut loss, mut si_snri) = (0.0, 0.0);
        let mut step_losses = Vec::new();
        for (b, idx) in order.chunks(self.run.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let m = self.train_step(&batch, lr).map_err(|e| {
                if e.is_numeric() {
                    Error::NonFiniteBatch { batch: b, source: Box::new(e) }
                } else {
                    e
                }
            })?;
            loss += m.loss * batch.len() as f64;
            si_snri += m.si_snri * batch.len() as f64;
            step_losses.push(m.loss);
        }
        self.epoch += 1;
        let n = data.len() as f64;
        Ok(EpochMetrics { epoch: self.epoch, lr, loss: loss / n, si_snri: si_snri / n, step_losses })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            run: self.run.clone(),
            params: self.params.store.clone(),
            m: self.optimizer.m.clone(),
            v: self.optimizer.v.clone(),
            epoch: self.epoch as u64,
            step: self.step,
            rng_seed: self.run.seed,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut run = ckpt.run;
        run.seed = ckpt.rng_seed;
        let params = ModelParams::from_store(&run.model, ckpt.params)?;
        let optimizer = AdamP { config: AdamPConfig::from_run(&run), m: ckpt.m, v: ckpt.v, t: ckpt.step };
        let schedule = LrSchedule { base: run.lr, halving_interval: run.halving_interval };
        Ok(Self { run, params, optimizer, schedule, epoch: ckpt.epoch as usize, step: ckpt.step })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCPR";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

/// Parameters with optimizer moments, plus the training position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub params: ParamStore<f32>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub epoch: u64,
    pub step: u64,
    /// Seed from which per-epoch shuffles are derived.
    pub rng_seed: u64,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::UnexpectedEof(what));
        }
        let (h, t) = self.bytes.split_at(n);
        self.bytes = t;
        Ok(h)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::MalformedCheckpoint(format!("{what} is not UTF-8")))
    }
}

fn state_value(line: &str, key: &str) -> Option<Result<u64>> {
    let rest = line.strip_prefix(key)?.trim_start().strip_prefix('=')?;
    Some(
        rest.trim()
            .parse()
            .map_err(|_| Error::MalformedCheckpoint(format!("bad `{key}` value `{}`", rest.trim()))),
    )
}

impl Checkpoint {
    /// Canonical config text followed by the `state.*` lines.
    pub fn config_text(&self) -> String {
        format!(
            "{}state.epoch = {}\nstate.step = {}\nstate.rng_seed = {}\n",
            self.run.render(),
            self.epoch,
            self.step,
            self.rng_seed
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text());
        let arrays: Vec<(String, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("param/{n}"), t))
            .chain(self.params.iter().zip(&self.m).map(|((n, _), t)| (format!("adamp.m/{n}"), t)))
            .chain(self.params.iter().zip(&self.v).map(|((n, _), t)| (format!("adamp.v/{n}"), t)))
            .collect();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::UnexpectedEof("magic"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::UnsupportedFormat { field: "magic", detail: "not a checkpoint file".into() });
        }
        if bytes.len() < 12 {
            return Err(Error::UnexpectedEof("checkpoint header"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::CorruptChecksum { stored, computed });
        }
        let mut r = Reader { bytes: &body[4..] };
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let text = r.string("config text")?;
        let (mut epoch, mut step, mut seed) = (None, None, None);
        let mut config_lines = String::new();
        for line in text.lines() {
            if let Some(v) = state_value(line, "state.epoch") {
                epoch = Some(v?);
            } else if let Some(v) = state_value(line, "state.step") {
                step = Some(v?);
            } else if let Some(v) = state_value(line, "state.rng_seed") {
                seed = Some(v?);
            } else {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
        let missing = |k: &str| Error::MalformedCheckpoint(format!("missing `{k}`"));
        let run = RunConfig::parse(&config_lines)?;
        let count = r.u32("array count")? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name = r.string("array name")?.to_string();
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(Error::MalformedCheckpoint(format!("array `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = r.u64("extent")?;
                if e == 0 || e > u32::MAX as u64 {
                    return Err(Error::MalformedCheckpoint(format!("array `{name}` has extent {e}")));
                }
                shape.push(e as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|&n| n <= r.bytes.len() / 4)
                .ok_or(Error::UnexpectedEof("array payload"))?;
            let payload = r.take(numel * 4, "array payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?;
            if !t.is_finite() {
                return Err(Error::MalformedCheckpoint(format!("array `{name}` holds non-finite values")));
            }
            arrays.push((name, t));
        }
        if !r.bytes.is_empty() {
            return Err(Error::MalformedCheckpoint(format!("{} trailing bytes", r.bytes.len())));
        }
        if !count.is_multiple_of(3) {
            return Err(Error::MalformedCheckpoint(format!("{count} arrays cannot split into params and two moments")));
        }
        let n = count / 3;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut it = arrays.into_iter();
        let (first, rest): (Vec<_>, Vec<_>) = (it.by_ref().take(n).collect(), it.collect());
        for (name, t) in first {
            let Some(p) = name.strip_prefix("param/") else {
                return Err(Error::MalformedCheckpoint(format!("expected a `param/` array, found `{name}`")));
            };
            params.push(p, t);
        }
        for (k, (name, t)) in rest.into_iter().enumerate() {
            let (prefix, dest) = if k < n { ("adamp.m/", &mut m) } else { ("adamp.v/", &mut v) };
            let id = params.ids().nth(k % n).expect("k % n < n");
            if name.strip_prefix(prefix) != Some(params.name(id)) || t.shape() != params.get(id).shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "expected `{prefix}{}` {:?}, found `{name}` {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    t.shape()
                )));
            }
            dest.push(t);
        }
        Ok(Self {
            run,
            params,
            m,
            v,
            epoch: epoch.ok_or_else(|| missing("state.epoch"))?,
            step: step.ok_or_else(|| missing("state.step"))?,
            rng_seed: seed.ok_or_else(|| missing("state.rng_seed"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::model::ModelConfig;

    fn toy_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                features: 8,
                chunk: 10,
                latent: 4,
                blocks: 1,
                heads: 2,
                mask_ffw_width: 8,
                ..ModelConfig::default()
            },
            lr: 1e-3,
            batch_size: 2,
            seed: 3,
            ..RunConfig::default()
        }
    }

    fn toy_data() -> Vec<Example> {
        synth_dataset(6, 1, 0.01, 8000).unwrap()
    }

    #[test]
    fn schedule_halves_per_interval() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(63), 1e-4);
        assert_eq!(s.lr_at(64), 5e-5);
        assert_eq!(s.lr_at(200), 1e-4 / 8.0);
        assert!((1..1000).all(|e| s.lr_at(e) <= s.lr_at(e - 1)));
    }

    #[test]
    fn first_step_on_a_scalar_is_a_plain_adam_step() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_vec(vec![1.0]));
        let cfg = AdamPConfig { weight_decay: 0.0, ..AdamPConfig::default() };
        let mut opt = AdamP::new(cfg, &store);
        let lr = 1e-3;
        let r = opt.step(&mut store, &[Tensor::from_vec(vec![1.0])], lr).unwrap();
        assert!(r.projected.is_empty());
        let want = 1.0 - lr * 1.0 / (1.0 + 1e-8);
        assert!((store.tensors()[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_leaves_weights() {
        let mut store = ParamStore::<f32>::new();
        store.push("w", Tensor::from_vec(vec![0.5, -2.0, 3.0]));
        let cfg = AdamPConfig { weight_decay: 0.0, ..AdamPConfig::default() };
        let mut opt = AdamP::new(cfg, &store);
        let before = store.clone();
        for _ in 0..3 {
            opt.step(&mut store, &[Tensor::zeros(&[3])], 1e-2).unwrap();
        }
        assert_eq!(store, before);
    }

    fn oracle_adam(w: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64, c: AdamPConfig) {
        for i in 0..w.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m[i] / (1.0 - c.beta1.powi(t));
            let vhat = v[i] / (1.0 - c.beta2.powi(t));
            w[i] = w[i] - lr * c.weight_decay * w[i] - lr * (mhat / (vhat.sqrt() + c.eps));
        }
    }

    #[test]
    fn zero_delta_is_adam_with_decoupled_decay() {
        let cfg = AdamPConfig { delta: 0.0, ..AdamPConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init: Vec<f64> = (0..17).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_vec(init.clone()));
        let mut opt = AdamP::new(cfg, &store);
        let (mut w, mut m, mut v) = (init, vec![0.0; 17], vec![0.0; 17]);
        for t in 1..=20 {
            let g: Vec<f64> = (0..17).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let r = opt.step(&mut store, &[Tensor::from_vec(g.clone())], 1e-2).unwrap();
            assert!(r.projected.is_empty());
            oracle_adam(&mut w, &mut m, &mut v, &g, t, 1e-2, cfg);
        }
        assert_eq!(store.tensors()[0].data(), &w[..]);
    }

    #[test]
    fn projected_update_is_orthogonal_to_the_weights() {
        let cfg = AdamPConfig { weight_decay: 0.0, ..AdamPConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let w: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let ww: f64 = w.iter().map(|x| x * x).sum();
        let mut g: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let wg: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
        g.iter_mut().zip(&w).for_each(|(gi, wi)| *gi -= wg / ww * wi);

        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_vec(w.clone()));
        let mut opt = AdamP::new(cfg, &store);
        let r = opt.step(&mut store, &[Tensor::from_vec(g)], 1e-2).unwrap();
        assert_eq!(r.projected, vec![0]);
        let dw: Vec<f64> = store.tensors()[0].data().iter().zip(&w).map(|(a, b)| a - b).collect();
        let dot: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        let norm = dw.iter().map(|x| x * x).sum::<f64>().sqrt() * ww.sqrt();
        assert!(norm > 0.0);
        assert!((dot / norm).abs() < 1e-6, "cos = {}", dot / norm);
    }

    #[test]
    fn aligned_gradient_is_not_projected() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let mut opt = AdamP::new(AdamPConfig::default(), &store);
        let r = opt.step(&mut store, &[Tensor::from_vec(vec![1.0, 2.0, 3.0])], 1e-2).unwrap();
        assert!(r.projected.is_empty());
    }

    #[test]
    fn toy_training_reduces_the_loss() {
        let data = synth_dataset(4, 9, 0.02, 8000).unwrap();
        let mut t = Trainer::new(RunConfig { lr: 3e-3, batch_size: 4, ..toy_run() }).unwrap();
        let first = t.train_epoch(&data).unwrap().loss;
        let mut last = first;
        for _ in 0..15 {
            last = t.train_epoch(&data).unwrap().loss;
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn non_finite_gradients_are_rejected_with_the_name() {
        let mut store = ParamStore::<f32>::new();
        store.push("layer.w", Tensor::from_vec(vec![1.0]));
        let mut opt = AdamP::new(AdamPConfig::default(), &store);
        match opt.step(&mut store, &[Tensor::from_vec(vec![f32::NAN])], 1e-3) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, "layer.w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::from_vec(vec![3.0f64]), Tensor::from_vec(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut g = vec![Tensor::from_vec(vec![3.0f64])];
        clip_global_norm(&mut g, 0.0);
        assert_eq!(g[0].data()[0], 3.0);
    }

    #[test]
    fn zero_learning_rate_epoch_is_a_no_op() {
        let mut t = Trainer::new(RunConfig { lr: 0.0, ..toy_run() }).unwrap();
        let before = t.params.clone();
        t.train_epoch(&toy_data()).unwrap();
        assert_eq!(t.params, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data();
        let run = |_| {
            let mut t = Trainer::new(toy_run()).unwrap();
            (0..2).map(|_| t.train_epoch(&data).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut t = Trainer::new(toy_run()).unwrap();
        t.train_epoch(&toy_data()).unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"PCPR");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let bytes = Trainer::new(toy_run()).unwrap().checkpoint().to_bytes();
        for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(Error::CorruptChecksum { .. } | Error::UnexpectedEof(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CorruptChecksum { .. })));
        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(Error::FormatVersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn resume_matches_the_uninterrupted_run() {
        let data = toy_data();
        let mut straight = Trainer::new(toy_run()).unwrap();
        let first = straight.train_epoch(&data).unwrap();
        let ck = straight.checkpoint().to_bytes();
        let second = straight.train_epoch(&data).unwrap();

        let mut resumed = Trainer::from_checkpoint(Checkpoint::from_bytes(&ck).unwrap()).unwrap();
        assert_eq!(resumed.epoch, first.epoch);
        let again = resumed.train_epoch(&data).unwrap();
        assert_eq!(again, second);
        assert!(again.step_losses.len() >= 3);
        assert_eq!(resumed.params, straight.params);
    }
}
