//! AdamW training with a cosine learning-rate schedule, validation,
//! checkpointing and bit-exact resumption.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datapipe::{BatchSampler, Corpus, ValidationSet};
use crate::degradation::DegradationConfig;
use crate::error::{Error, Result};
use crate::evalkit::psnr;
use crate::jnet::{super_resolve, Network, NetworkParams, NetworkSpec};
use crate::netops::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JNETCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.log";

const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch: usize,
    /// HR patch side.
    pub patch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Decoupled: `p ← p − lr·wd·p` alongside the Adam step.
    pub weight_decay: f64,
    /// Set by the caller rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
    pub augment: bool,
    /// Log every this many iterations; the last iteration is always logged.
    pub log_interval: u64,
    /// 0 validates only at the end.
    pub val_interval: u64,
    /// 0 checkpoints only at the end.
    pub checkpoint_interval: u64,
    /// Center-crop validation images to at most this side.
    pub val_crop: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 200_000,
            batch: 32,
            patch_size: 96,
            lr_init: 1e-3,
            lr_final: 1e-6,
            betas: [0.9, 0.99],
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            log_interval: 100,
            val_interval: 5_000,
            checkpoint_interval: 5_000,
            val_crop: None,
        }
    }
}

impl TrainConfig {
    /// Single-CPU scale: 5K iterations at batch 8.
    pub fn desk() -> Self {
        Self {
            total_iters: 5_000,
            batch: 8,
            patch_size: 32,
            val_interval: 1_000,
            checkpoint_interval: 1_000,
            val_crop: Some(128),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::invalid("total_iters must be >= 1"));
        }
        if self.batch == 0 || self.patch_size == 0 {
            return Err(Error::invalid("batch and patch_size must be >= 1"));
        }
        if !(self.lr_final >= 0.0 && self.lr_final < self.lr_init && self.lr_init.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 <= lr_final < lr_init, got lr_init={} lr_final={}",
                self.lr_init, self.lr_final
            )));
        }
        for b in self.betas {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("betas must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("eps must be > 0 and weight_decay >= 0"));
        }
        if self.log_interval == 0 {
            return Err(Error::invalid("log_interval must be >= 1"));
        }
        Ok(())
    }
}

/// `lr_final + ½(lr_init − lr_final)(1 + cos(π·t/T))`.
pub fn cosine_lr(iter: u64, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::invalid(format!("iteration {iter} outside [0, {}]", cfg.total_iters)));
    }
    let phase = std::f64::consts::PI * iter as f64 / cfg.total_iters as f64;
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + phase.cos()))
}

/// Mean squared error over every element.
pub fn mse_loss<T: Scalar>(sr: &FeatureMap<T>, hr: &FeatureMap<T>) -> Result<f64> {
    if !sr.same_shape(hr) {
        return Err(Error::invalid(format!("loss inputs differ: {:?} vs {:?}", sr.shape(), hr.shape())));
    }
    let sum: f64 = sr.data().iter().zip(hr.data()).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(sum / sr.len() as f64)
}

/// Loss and its gradient with respect to `sr`.
pub fn mse_loss_grad<T: Scalar>(sr: &FeatureMap<T>, hr: &FeatureMap<T>) -> Result<(f64, FeatureMap<T>)> {
    let loss = mse_loss(sr, hr)?;
    let scale = T::lit(2.0 / sr.len() as f64);
    let (n, c, h, w) = sr.shape();
    let grad = sr.data().iter().zip(hr.data()).map(|(&a, &b)| (a - b) * scale).collect();
    Ok((loss, FeatureMap::from_nhwc(n, c, h, w, grad)?))
}

/// One AdamW update; `step` counts from 1.
pub fn adamw_update(
    params: &mut ParamStore<f32>,
    m: &mut Grads<f32>,
    v: &mut Grads<f32>,
    grads: &Grads<f32>,
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let [b1, b2] = cfg.betas;
    let bc1 = 1.0 - b1.powf(step as f64);
    let bc2 = 1.0 - b2.powf(step as f64);
    let (b1, b2) = (b1 as f32, b2 as f32);
    let step_size = (lr / bc1) as f32;
    let inv_bc2 = (1.0 / bc2) as f32;
    let eps = cfg.eps as f32;
    let decay = (1.0 - lr * cfg.weight_decay) as f32;
    for (i, param) in params.params_mut().iter_mut().enumerate() {
        let (mi, vi, gi) = (&mut m[i], &mut v[i], &grads[i]);
        for (j, p) in param.data.iter_mut().enumerate() {
            let g = gi[j];
            mi[j] = b1 * mi[j] + (1.0 - b1) * g;
            vi[j] = b2 * vi[j] + (1.0 - b2) * g * g;
            *p = *p * decay - step_size * mi[j] / ((vi[j] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub spec: NetworkSpec,
    pub params: NetworkParams<f32>,
    pub m: Grads<f32>,
    pub v: Grads<f32>,
    pub iter: u64,
    /// Root of every training stream; batch `t` draws from `derive(seed, [t, ...])`.
    pub seed: u64,
}

impl TrainState {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let net = Network::layout(spec)?;
        let params: NetworkParams<f32> = net.init_params(&mut SeededRng::derive(seed, &[INIT_STREAM]));
        Ok(Self::from_params(spec.clone(), params, seed))
    }

    pub fn from_params(spec: NetworkSpec, params: NetworkParams<f32>, seed: u64) -> Self {
        let m = params.zero_grads();
        let v = params.zero_grads();
        Self { spec, params, m, v, iter: 0, seed }
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
}

/// Forward, backward and AdamW update on one batch at the current cosine rate.
pub fn train_step(state: &mut TrainState, net: &Network, lr_batch: &FeatureMap<f32>, hr_batch: &FeatureMap<f32>, cfg: &TrainConfig) -> Result<StepReport> {
    if state.iter >= cfg.total_iters {
        return Err(Error::invalid(format!("state is already at iteration {} of {}", state.iter, cfg.total_iters)));
    }
    let lr = cosine_lr(state.iter, cfg)?;
    let (sr, cache) = net.forward_train(&state.params, lr_batch)?;
    let (loss, dout) = mse_loss_grad(&sr, hr_batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iter: state.iter, lr, loss });
    }
    let mut grads = state.params.zero_grads();
    net.backward(&state.params, &mut grads, &cache, &dout);
    adamw_update(&mut state.params, &mut state.m, &mut state.v, &grads, state.iter + 1, lr, cfg);
    state.iter += 1;
    Ok(StepReport { loss, lr })
}

/// Mean PSNR (peak 1) of the network over a validation set.
pub fn validate(net: &Network, params: &NetworkParams<f32>, val: &ValidationSet) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut total = 0.0;
    for pair in &val.pairs {
        total += psnr(&super_resolve(net, params, &pair.lr)?, &pair.hr, 1.0)?;
    }
    Ok(total / val.len() as f64)
}

// ---------------------------------------------------------------- metric log

/// One metric-log line. `lr` is the rate used by the step that completed
/// iteration `iter`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
}

const LOG_HEADER: &str = "# iter\tlr\tloss\tval_psnr";

impl LogRecord {
    pub fn to_line(&self) -> String {
        let val = self.val_psnr.map_or_else(|| "-".to_string(), |v| v.to_string());
        format!("{}\t{:e}\t{:e}\t{}", self.iter, self.lr, self.loss, val)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed metric line `{line}`"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            iter: f[0].parse().map_err(|_| bad())?,
            lr: f[1].parse().map_err(|_| bad())?,
            loss: f[2].parse().map_err(|_| bad())?,
            val_psnr: match f[3] {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad())?),
            },
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')).map(LogRecord::parse).collect()
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut text = format!("{LOG_HEADER}\n");
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- checkpoints

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_str(out, name);
    put_str(out, f32::DTYPE);
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for &v in data {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptCheckpoint("invalid utf-8 string".into()))
    }

    fn array(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = self.str()?;
        let dtype = self.str()?;
        if dtype != f32::DTYPE {
            return Err(Error::CorruptCheckpoint(format!("array `{name}` has unsupported dtype {dtype}")));
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let bytes = self.take(len.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("array too large".into()))?)?;
        Ok((name, shape, bytes.chunks_exact(4).map(f32::read_le).collect()))
    }
}

/// Serializes a state: header, spec, counters, parameters, both moment sets
/// and a trailing SHA-256 of everything before it.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let spec = toml::to_string(&state.spec).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(state.params.count() * 12 + 1024);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &spec);
    put_u64(&mut out, state.iter);
    put_u64(&mut out, state.seed);
    put_u32(&mut out, state.params.len() as u32);
    for (prefix, moments) in [("", None), ("adam.m/", Some(&state.m)), ("adam.v/", Some(&state.v))] {
        for (i, p) in state.params.iter().enumerate() {
            let data = moments.map_or(&p.data, |m| &m[i]);
            put_array(&mut out, &format!("{prefix}{}", p.name), &p.shape, data);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("missing checkpoint header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::CorruptCheckpoint("truncated file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or damaged file)".into()));
    }
    let mut cur = Cursor { buf: body, pos: 12 };
    let spec: NetworkSpec = toml::from_str(&cur.str()?).map_err(|e| Error::CorruptCheckpoint(format!("bad network spec: {e}")))?;
    let iter = cur.u64()?;
    let seed = cur.u64()?;
    let count = cur.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let (name, shape, data) = cur.array()?;
        params.push(name, &shape, data);
    }
    let mut moments = |prefix: &str| -> Result<Grads<f32>> {
        params
            .iter()
            .map(|p| {
                let (name, shape, data) = cur.array()?;
                if name != format!("{prefix}{}", p.name) || shape != p.shape {
                    return Err(Error::CorruptCheckpoint(format!("optimizer array `{name}` does not match `{}`", p.name)));
                }
                Ok(data)
            })
            .collect()
    };
    let m = moments("adam.m/")?;
    let v = moments("adam.v/")?;
    if cur.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes after optimizer state".into()));
    }
    Ok(TrainState { spec, params, m, v, iter, seed })
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let state = decode_checkpoint(&bytes)?;
    let layout: NetworkParams<f32> = Network::layout(&state.spec)?.zero_params();
    layout.check_compatible(&state.params).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(state)
}

/// Loads a checkpoint and checks its parameters against `spec`.
pub fn load_checkpoint_for(path: &Path, spec: &NetworkSpec) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    let expected: NetworkParams<f32> = Network::layout(spec)?.zero_params();
    expected.check_compatible(&state.params)?;
    Ok(state)
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<LogRecord>,
    /// Iteration training resumed from, if any.
    pub resumed_from: Option<u64>,
}

/// Training loop over a corpus. Batches are a pure function of
/// `(corpus, cfg, iteration)`, so an interrupted run resumed from a
/// checkpoint ends bit-identical to an uninterrupted one.
pub struct Trainer<'a> {
    spec: NetworkSpec,
    cfg: TrainConfig,
    degradation: DegradationConfig,
    corpus: &'a Corpus,
    val: Option<&'a ValidationSet>,
    out_dir: Option<PathBuf>,
    observer: Option<Box<dyn FnMut(&LogRecord) + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a Corpus, spec: &NetworkSpec, cfg: &TrainConfig, degradation: &DegradationConfig) -> Result<Self> {
        spec.validate()?;
        cfg.validate()?;
        degradation.validate()?;
        if spec.in_channels != spec.out_channels {
            return Err(Error::invalid("training needs in_channels == out_channels"));
        }
        if spec.scale != degradation.scale {
            return Err(Error::invalid(format!("network scale {} differs from degradation scale {}", spec.scale, degradation.scale)));
        }
        let multiple = spec.scale * spec.divisor();
        if cfg.patch_size % multiple != 0 {
            return Err(Error::invalid(format!("patch_size {} must be a multiple of {multiple}", cfg.patch_size)));
        }
        Ok(Self {
            spec: spec.clone(),
            cfg: cfg.clone(),
            degradation: degradation.clone(),
            corpus,
            val: None,
            out_dir: None,
            observer: None,
        })
    }

    pub fn with_validation(mut self, val: &'a ValidationSet) -> Self {
        self.val = Some(val);
        self
    }

    /// Write `checkpoint.bin` and `metrics.log` into `dir`.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Called with every record as it is logged.
    pub fn on_record(mut self, f: impl FnMut(&LogRecord) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE))
    }

    pub fn log_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join(METRICS_FILE))
    }

    fn sampler(&self) -> BatchSampler {
        BatchSampler {
            degradation: self.degradation.clone(),
            batch: self.cfg.batch,
            patch: self.cfg.patch_size,
            channels: self.spec.in_channels,
            augment: self.cfg.augment,
            seed: self.cfg.seed,
        }
    }

    fn due(iter: u64, interval: u64, total: u64) -> bool {
        iter == total || (interval > 0 && iter % interval == 0)
    }

    /// Trains to `total_iters`, or until `stop_after` iterations have been
    /// reached. With `resume`, continues from the checkpoint in the output
    /// directory when one exists and drops log lines written after it.
    pub fn run(&mut self, resume: bool, stop_after: Option<u64>) -> Result<FitOutcome> {
        let net = Network::layout(&self.spec)?;
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let ckpt_path = self.checkpoint_path();
        let log_path = self.log_path();

        let mut log = Vec::new();
        let mut resumed_from = None;
        let existing = ckpt_path.as_deref().filter(|p| resume && p.exists());
        let mut state = match existing {
            Some(path) => {
                let state = load_checkpoint_for(path, &self.spec)?;
                if state.seed != self.cfg.seed {
                    return Err(Error::invalid(format!("checkpoint seed {} differs from configured seed {}", state.seed, self.cfg.seed)));
                }
                if state.iter > self.cfg.total_iters {
                    return Err(Error::invalid(format!("checkpoint is at iteration {} beyond total_iters {}", state.iter, self.cfg.total_iters)));
                }
                if let Some(lp) = log_path.as_deref().filter(|p| p.exists()) {
                    log = read_log(lp)?.into_iter().filter(|r| r.iter <= state.iter).collect();
                }
                resumed_from = Some(state.iter);
                state
            }
            None => TrainState::new(&self.spec, self.cfg.seed)?,
        };
        if let Some(lp) = &log_path {
            write_log(lp, &log)?;
        }
        let mut log_file = match &log_path {
            Some(lp) => Some(OpenOptions::new().append(true).open(lp).map_err(|e| Error::io(lp, e))?),
            None => None,
        };

        let sampler = self.sampler();
        let total = self.cfg.total_iters;
        let limit = stop_after.map_or(total, |s| s.min(total));
        while state.iter < limit {
            let batch = sampler.sample(self.corpus, state.iter)?;
            let report = train_step(&mut state, &net, &batch.lr, &batch.hr, &self.cfg)?;
            let it = state.iter;
            let val_psnr = match self.val {
                Some(val) if Self::due(it, self.cfg.val_interval, total) => Some(validate(&net, &state.params, val)?),
                _ => None,
            };
            if val_psnr.is_some() || Self::due(it, self.cfg.log_interval, total) {
                let record = LogRecord { iter: it, lr: report.lr, loss: report.loss, val_psnr };
                if let (Some(f), Some(lp)) = (log_file.as_mut(), log_path.as_deref()) {
                    writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(lp, e))?;
                }
                if let Some(obs) = self.observer.as_mut() {
                    obs(&record);
                }
                log.push(record);
            }
            if let Some(cp) = ckpt_path.as_deref() {
                if Self::due(it, self.cfg.checkpoint_interval, total) {
                    save_checkpoint(&state, cp)?;
                }
            }
        }
        Ok(FitOutcome { state, log, resumed_from })
    }
}

/// Trains in memory without validation or files.
pub fn fit(corpus: &Corpus, spec: &NetworkSpec, cfg: &TrainConfig, degradation: &DegradationConfig) -> Result<FitOutcome> {
    Trainer::new(corpus, spec, cfg, degradation)?.run(false, None)
}
