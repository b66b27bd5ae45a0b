//! The CSI feedback autoencoder.
//!
//! Encoder (UE side): one 3x3 conv producing two feature maps, batch norm,
//! leaky ReLU, then a fully connected layer down to the M-dimensional
//! codeword. Decoder (BS side): a fully connected layer back to the CSI
//! extent, two residual refinement units in series (convs 2->8->16->2, each
//! with batch norm, identity skip over the whole unit), and a final 3x3 conv
//! with a sigmoid onto (0, 1).
//!
//! Training minimizes end-to-end MSE with mini-batch Adam; optionally a fresh
//! Gaussian noise draw is added to every codeword each forward pass to harden
//! the link against additive noise at a chosen SNR.

use crate::autograd::{
    BatchNormParams, GradError, NodeId, ParamId, ParamSet, Tape,
};
use crate::channel::Dataset;
use crate::codec::{BinReader, BinWriter, CodecError};
use crate::optim::Adam;
use crate::tensor::{shape_string, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use thiserror::Error;

pub const MODEL_MAGIC: &[u8; 4] = b"CSIM";
pub const MODEL_VERSION: u16 = 1;
/// Negative-side slope of the hidden activations.
pub const LEAKY_ALPHA: f32 = 0.3;
/// Channel progression inside a refinement unit.
const REFINE_WIDTHS: [usize; 3] = [8, 16, 2];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("dataset does not match model: expected {expected}, got {got}")]
    DatasetMismatch { expected: String, got: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need {need} samples, dataset has {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error("zero-power codeword: cannot scale noise against silence")]
    ZeroPowerCodeword,
    #[error("stored parameter {index} has shape {got}, expected {expected}")]
    StoredShapeMismatch {
        index: usize,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Input extent and codeword length; the compression rate is
/// `codeword_len / (2 * delay_rows * antennas)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub delay_rows: usize,
    pub antennas: usize,
    pub codeword_len: usize,
}

impl ModelConfig {
    pub fn new(delay_rows: usize, antennas: usize, codeword_len: usize) -> Result<Self, ModelError> {
        let cfg = ModelConfig {
            delay_rows,
            antennas,
            codeword_len,
        };
        if delay_rows == 0 || antennas == 0 {
            return Err(ModelError::Config("extents must be positive".into()));
        }
        if codeword_len == 0 {
            return Err(ModelError::Config("codeword_len must be positive".into()));
        }
        if codeword_len >= cfg.input_len() {
            return Err(ModelError::Config(format!(
                "codeword_len {} does not compress input of {} values",
                codeword_len,
                cfg.input_len()
            )));
        }
        Ok(cfg)
    }

    /// Config for compression rate `num/den`.
    pub fn from_gamma(
        delay_rows: usize,
        antennas: usize,
        num: usize,
        den: usize,
    ) -> Result<Self, ModelError> {
        if num == 0 || den == 0 {
            return Err(ModelError::Config("gamma must be positive".into()));
        }
        let n = 2 * delay_rows * antennas;
        if (n * num) % den != 0 {
            return Err(ModelError::Config(format!(
                "gamma {}/{} does not divide the input length {} evenly",
                num, den, n
            )));
        }
        Self::new(delay_rows, antennas, n * num / den)
    }

    pub fn input_len(&self) -> usize {
        2 * self.delay_rows * self.antennas
    }

    pub fn gamma(&self) -> f64 {
        self.codeword_len as f64 / self.input_len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseLayer {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct RefineUnit {
    convs: [ConvLayer; 3],
    norms: [BatchNormParams; 3],
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    enc_conv: ConvLayer,
    enc_norm: BatchNormParams,
    enc_fc: DenseLayer,
    dec_fc: DenseLayer,
    refine: [RefineUnit; 2],
    out_conv: ConvLayer,
}

/// A built network: parameter set plus the layer wiring.
#[derive(Debug, Clone)]
pub struct CsiNetParams {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Parameter access mode for a forward pass. Training mode uses batch
/// statistics in the norm layers (and updates the running ones); inference
/// mode reads the frozen running statistics only.
pub(crate) enum Access<'a> {
    Train(&'a mut ParamSet),
    Infer(&'a ParamSet),
}

impl<'a> Access<'a> {
    fn params(&self) -> &ParamSet {
        match self {
            Access::Train(p) => p,
            Access::Infer(p) => p,
        }
    }

    fn batch_norm(
        &mut self,
        tape: &mut Tape,
        x: NodeId,
        bn: &BatchNormParams,
    ) -> Result<NodeId, GradError> {
        match self {
            Access::Train(p) => tape.batch_norm_train(p, x, bn),
            Access::Infer(p) => tape.batch_norm_infer(p, x, bn),
        }
    }
}

fn conv_block(
    tape: &mut Tape,
    access: &mut Access,
    conv: &ConvLayer,
    norm: &BatchNormParams,
    activate: bool,
    x: NodeId,
) -> Result<NodeId, GradError> {
    let h = tape.conv2d(access.params(), x, conv.w, conv.b)?;
    let h = access.batch_norm(tape, h, norm)?;
    Ok(if activate {
        tape.leaky_relu(h, LEAKY_ALPHA)
    } else {
        h
    })
}

/// conv/norm/activation stack with an identity skip over the whole unit; the
/// last stage carries no activation so a zeroed unit is exactly the identity
/// under neutral normalization.
fn refine_forward(
    tape: &mut Tape,
    access: &mut Access,
    unit: &RefineUnit,
    x: NodeId,
) -> Result<NodeId, GradError> {
    let mut h = x;
    for i in 0..3 {
        h = conv_block(tape, access, &unit.convs[i], &unit.norms[i], i < 2, h)?;
    }
    tape.residual(x, h)
}

pub(crate) fn forward_encoder(
    tape: &mut Tape,
    access: &mut Access,
    layout: &Layout,
    cfg: &ModelConfig,
    x: NodeId,
) -> Result<NodeId, GradError> {
    let batch = tape.value(x).shape()[0];
    let h = conv_block(tape, access, &layout.enc_conv, &layout.enc_norm, true, x)?;
    let flat = tape.reshape(h, &[batch, cfg.input_len()])?;
    tape.dense(access.params(), flat, layout.enc_fc.w, layout.enc_fc.b)
}

pub(crate) fn forward_decoder(
    tape: &mut Tape,
    access: &mut Access,
    layout: &Layout,
    cfg: &ModelConfig,
    s: NodeId,
) -> Result<NodeId, GradError> {
    let batch = tape.value(s).shape()[0];
    let h = tape.dense(access.params(), s, layout.dec_fc.w, layout.dec_fc.b)?;
    let mut h = tape.reshape(h, &[batch, 2, cfg.delay_rows, cfg.antennas])?;
    for unit in &layout.refine {
        h = refine_forward(tape, access, unit, h)?;
    }
    let h = tape.conv2d(access.params(), h, layout.out_conv.w, layout.out_conv.b)?;
    Ok(tape.sigmoid(h))
}

struct Builder<'r> {
    set: ParamSet,
    rng: &'r mut ChaCha12Rng,
}

impl<'r> Builder<'r> {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| ((self.rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn conv(&mut self, c_in: usize, f_cnt: usize) -> ConvLayer {
        let w = self.uniform(&[f_cnt, c_in, 3, 3], c_in * 9);
        ConvLayer {
            w: self.set.add(w, true),
            b: self.set.add(Tensor::zeros(&[f_cnt]), true),
        }
    }

    fn dense(&mut self, n_in: usize, n_out: usize) -> DenseLayer {
        let w = self.uniform(&[n_out, n_in], n_in);
        DenseLayer {
            w: self.set.add(w, true),
            b: self.set.add(Tensor::zeros(&[n_out]), true),
        }
    }

    fn norm(&mut self, channels: usize) -> BatchNormParams {
        BatchNormParams::new(&mut self.set, channels)
    }
}

/// Builds a freshly initialized network: fan-in-scaled uniform weights, zero
/// biases, neutral norm layers. Deterministic per seed.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<CsiNetParams, ModelError> {
    // Re-run the constructor checks in case the config was hand-assembled.
    let cfg = ModelConfig::new(cfg.delay_rows, cfg.antennas, cfg.codeword_len)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut b = Builder {
        set: ParamSet::new(),
        rng: &mut rng,
    };
    let n = cfg.input_len();
    let m = cfg.codeword_len;

    let enc_conv = b.conv(2, 2);
    let enc_norm = b.norm(2);
    let enc_fc = b.dense(n, m);
    let dec_fc = b.dense(m, n);
    let refine = [0, 1].map(|_| {
        let mut c_in = 2;
        let convs = REFINE_WIDTHS.map(|width| {
            let conv = b.conv(c_in, width);
            c_in = width;
            conv
        });
        let norms = REFINE_WIDTHS.map(|width| b.norm(width));
        RefineUnit { convs, norms }
    });
    let out_conv = b.conv(2, 2);

    Ok(CsiNetParams {
        config: cfg,
        params: b.set,
        layout: Layout {
            enc_conv,
            enc_norm,
            enc_fc,
            dec_fc,
            refine,
            out_conv,
        },
    })
}

impl CsiNetParams {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn is_frozen(&self) -> bool {
        self.params.all_frozen()
    }

    pub fn freeze(&mut self) {
        self.params.freeze_all();
    }

    fn expect_batch_input(&self, x: &Tensor) -> Result<bool, ModelError> {
        let want = [2, self.config.delay_rows, self.config.antennas];
        match x.shape() {
            [c, h, w] if [*c, *h, *w] == want => Ok(false),
            [b, c, h, w] if [*c, *h, *w] == want && *b > 0 => Ok(true),
            other => Err(ModelError::DatasetMismatch {
                expected: format!("[batch,]{}", shape_string(&want)),
                got: shape_string(other),
            }),
        }
    }

    /// Compresses CSI samples into codewords; `[B,2,Nc,Nt] -> [B,M]` (or a
    /// single sample to a single codeword). Pure function of the parameters.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let batched = self.expect_batch_input(x)?;
        let mut tape = Tape::new();
        let leaf = tape.leaf(if batched {
            x.clone()
        } else {
            x.reshaped(&[1, 2, self.config.delay_rows, self.config.antennas])
        });
        let mut access = Access::Infer(&self.params);
        let s = forward_encoder(&mut tape, &mut access, &self.layout, &self.config, leaf)?;
        let out = tape.value(s).clone();
        Ok(if batched {
            out
        } else {
            out.reshaped(&[self.config.codeword_len])
        })
    }

    /// Reconstructs CSI from codewords; `[B,M] -> [B,2,Nc,Nt]`. Pure.
    pub fn decode_batch(&self, s: &Tensor) -> Result<Tensor, ModelError> {
        let m = self.config.codeword_len;
        let (batched, s_in) = match s.shape() {
            [len] if *len == m => (false, s.reshaped(&[1, m])),
            [_, len] if *len == m => (true, s.clone()),
            other => {
                return Err(ModelError::DatasetMismatch {
                    expected: format!("[batch,]{}", m),
                    got: shape_string(other),
                })
            }
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(s_in);
        let mut access = Access::Infer(&self.params);
        let out = forward_decoder(&mut tape, &mut access, &self.layout, &self.config, leaf)?;
        let t = tape.value(out).clone();
        Ok(if batched {
            t
        } else {
            t.reshaped(&[2, self.config.delay_rows, self.config.antennas])
        })
    }
}

/// Adds zero-mean Gaussian noise to a codeword with total noise power
/// `||s||^2 / 10^(snr_db/10)` spread across the entries. Fresh draw per call.
pub fn add_awgn<R: Rng>(s: &Tensor, snr_db: f32, rng: &mut R) -> Result<Tensor, ModelError> {
    let power = s.norm_sq();
    if power <= 0.0 {
        return Err(ModelError::ZeroPowerCodeword);
    }
    let noise_power = power / 10f64.powf(snr_db as f64 / 10.0);
    let sigma = (noise_power / s.len() as f64).sqrt();
    let data = s
        .data()
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + (n * sigma) as f32
        })
        .collect();
    Ok(Tensor::from_vec(s.shape(), data))
}

/// Per-row noise offsets for a `[B, M]` codeword batch at the given SNR.
fn awgn_offsets<R: Rng>(s: &Tensor, snr_db: f32, rng: &mut R) -> Result<Tensor, ModelError> {
    let shape = s.shape();
    let (batch, m) = (shape[0], shape[1]);
    let inv_snr = 10f64.powf(-(snr_db as f64) / 10.0);
    let mut data = vec![0.0f32; batch * m];
    for b in 0..batch {
        let row = &s.data()[b * m..(b + 1) * m];
        let power: f64 = row.iter().map(|&v| v as f64 * v as f64).sum();
        if power <= 0.0 {
            return Err(ModelError::ZeroPowerCodeword);
        }
        let sigma = (power * inv_snr / m as f64).sqrt();
        for v in &mut data[b * m..(b + 1) * m] {
            let n: f64 = rng.sample(StandardNormal);
            *v = (n * sigma) as f32;
        }
    }
    Ok(Tensor::from_vec(&[batch, m], data))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub train_samples: usize,
    /// Capped to the validation set length; 0 disables monitoring.
    pub val_samples: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Train across an AWGN link at this SNR; absent = noiseless training.
    pub codeword_snr_db: Option<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean training MSE per epoch (batch-size weighted).
    pub train_mse: Vec<f64>,
    /// Validation MSE per epoch when a validation set was supplied.
    pub val_mse: Vec<f64>,
}

fn check_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<(), ModelError> {
    if ds.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if ds.delay_rows != cfg.delay_rows || ds.antennas != cfg.antennas {
        return Err(ModelError::DatasetMismatch {
            expected: format!("2x{}x{}", cfg.delay_rows, cfg.antennas),
            got: format!("2x{}x{}", ds.delay_rows, ds.antennas),
        });
    }
    Ok(())
}

/// Mean reconstruction MSE of a frozen forward pass over `count` samples.
pub fn dataset_mse(
    model: &CsiNetParams,
    ds: &Dataset,
    count: usize,
    batch_size: usize,
) -> Result<f64, ModelError> {
    check_dataset(ds, &model.config)?;
    let count = count.min(ds.len());
    let mut total = 0.0f64;
    let mut seen = 0usize;
    let mut start = 0usize;
    while start < count {
        let end = (start + batch_size).min(count);
        let idx: Vec<usize> = (start..end).collect();
        let batch = ds.gather(&idx);
        let s = model.encode_batch(&batch)?;
        let out = model.decode_batch(&s)?;
        let mut tape = Tape::new();
        let a = tape.leaf(out);
        let b = tape.leaf(batch);
        let loss = tape.mse(a, b)?;
        total += tape.scalar_f64(loss) * idx.len() as f64;
        seen += idx.len();
        start = end;
    }
    Ok(total / seen as f64)
}

/// Step-1 training: mini-batch Adam on the end-to-end reconstruction loss.
pub fn train(
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<(CsiNetParams, TrainReport), ModelError> {
    check_dataset(train_ds, mcfg)?;
    if tcfg.epochs == 0 || tcfg.batch_size == 0 {
        return Err(ModelError::Config(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    if tcfg.train_samples == 0 {
        return Err(ModelError::EmptyDataset);
    }
    if tcfg.train_samples > train_ds.len() {
        return Err(ModelError::InsufficientSamples {
            need: tcfg.train_samples,
            have: train_ds.len(),
        });
    }
    if let Some(v) = val_ds {
        check_dataset(v, mcfg)?;
    }

    let mut model = build_model(mcfg, tcfg.seed)?;
    let mut adam = Adam::new(tcfg.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(0x7261696e); // training stream, disjoint from build draws

    let mut order: Vec<usize> = (0..tcfg.train_samples).collect();
    let mut report = TrainReport::default();

    for _epoch in 0..tcfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch = train_ds.gather(chunk);
            let mut tape = Tape::new();
            let input = tape.leaf(batch.clone());
            let target = tape.leaf(batch);
            let mut access = Access::Train(&mut model.params);
            let s = forward_encoder(&mut tape, &mut access, &model.layout, &model.config, input)?;
            let s = match tcfg.codeword_snr_db {
                Some(snr) => {
                    let noise = awgn_offsets(tape.value(s), snr, &mut rng)?;
                    tape.add_offset(s, &noise)?
                }
                None => s,
            };
            let out = forward_decoder(&mut tape, &mut access, &model.layout, &model.config, s)?;
            drop(access);
            let loss = tape.mse(out, target)?;
            model.params.zero_grad();
            tape.backward(&mut model.params, loss)?;
            adam.step(&mut model.params);
            epoch_loss += tape.scalar_f64(loss) * chunk.len() as f64;
        }
        report.train_mse.push(epoch_loss / tcfg.train_samples as f64);
        if let Some(v) = val_ds {
            if tcfg.val_samples > 0 {
                report
                    .val_mse
                    .push(dataset_mse(&model, v, tcfg.val_samples, tcfg.batch_size)?);
            }
        }
    }
    Ok((model, report))
}

/// One full train-mode forward/backward pass on a batch, without an
/// optimizer update. Returns the batch loss; gradients are left populated.
pub fn forward_backward_step(model: &mut CsiNetParams, batch: &Tensor) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let input = tape.leaf(batch.clone());
    let target = tape.leaf(batch.clone());
    let mut access = Access::Train(&mut model.params);
    let s = forward_encoder(&mut tape, &mut access, &model.layout, &model.config, input)?;
    let out = forward_decoder(&mut tape, &mut access, &model.layout, &model.config, s)?;
    drop(access);
    let loss = tape.mse(out, target)?;
    model.params.zero_grad();
    tape.backward(&mut model.params, loss)?;
    Ok(tape.scalar_f64(loss))
}

pub fn save_model(model: &CsiNetParams, path: &Path) -> Result<(), CodecError> {
    let mut w = BinWriter::create(path)?;
    w.magic(MODEL_MAGIC)?;
    w.u16(MODEL_VERSION)?;
    w.u32(model.config.delay_rows as u32)?;
    w.u32(model.config.antennas as u32)?;
    w.u32(model.config.codeword_len as u32)?;
    w.u16(model.params.len() as u16)?;
    for (_, node) in model.params.iter() {
        let shape = node.value.shape();
        w.u8(shape.len() as u8)?;
        for &d in shape {
            w.u32(d as u32)?;
        }
        w.f32_slice(node.value.data())?;
    }
    w.finish()
}

/// Loads a model file. The result is frozen: loaded models are finished
/// artifacts, ready for encoding, attack crafting, and evaluation.
pub fn load_model(path: &Path, expect: Option<&ModelConfig>) -> Result<CsiNetParams, ModelError> {
    let mut r = BinReader::open(path)?;
    r.expect_magic(MODEL_MAGIC)?;
    r.expect_version(MODEL_VERSION)?;
    let delay_rows = r.u32("delay rows")? as usize;
    let antennas = r.u32("antennas")? as usize;
    let codeword_len = r.u32("codeword length")? as usize;
    let cfg = ModelConfig::new(delay_rows, antennas, codeword_len)?;
    if let Some(want) = expect {
        if *want != cfg {
            return Err(ModelError::DatasetMismatch {
                expected: format!(
                    "model {}x{} M={}",
                    want.delay_rows, want.antennas, want.codeword_len
                ),
                got: format!("model {}x{} M={}", delay_rows, antennas, codeword_len),
            });
        }
    }
    let count = r.u16("layer count")? as usize;
    let mut model = build_model(&cfg, 0)?;
    if count != model.params.len() {
        return Err(ModelError::Config(format!(
            "model file holds {} parameter records, expected {}",
            count,
            model.params.len()
        )));
    }
    for (index, (_, node)) in model.params.iter_mut().enumerate() {
        let rank = r.u8("shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        if shape != node.value.shape() {
            return Err(ModelError::StoredShapeMismatch {
                index,
                expected: shape_string(node.value.shape()),
                got: shape_string(&shape),
            });
        }
        let data = r.f32_vec(node.value.len(), "parameter payload")?;
        node.value = Tensor::from_vec(&shape, data);
    }
    r.expect_eof()?;
    model.freeze();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, Scenario, ScenarioConfig};

    fn toy_model_config() -> ModelConfig {
        ModelConfig::from_gamma(8, 8, 1, 4).unwrap()
    }

    fn toy_dataset(count: usize, seed: u64, first: u64) -> Dataset {
        let mut cfg = ScenarioConfig::new(Scenario::Indoor, seed);
        cfg.subcarriers = 64;
        cfg.antennas = 8;
        cfg.delay_rows = 8;
        generate_dataset(&cfg, count, first).unwrap()
    }

    fn toy_train(count: usize, epochs: usize) -> (CsiNetParams, TrainReport, Dataset) {
        let ds = toy_dataset(count, 21, 0);
        let mcfg = toy_model_config();
        let tcfg = TrainConfig {
            epochs,
            train_samples: count,
            val_samples: 0,
            learning_rate: 0.001,
            batch_size: 50,
            seed: 5,
            codeword_snr_db: None,
        };
        let (model, report) = train(&ds, None, &mcfg, &tcfg).unwrap();
        (model, report, ds)
    }

    #[test]
    fn gamma_yields_expected_codeword_lengths() {
        assert_eq!(ModelConfig::from_gamma(32, 32, 1, 4).unwrap().codeword_len, 512);
        assert_eq!(ModelConfig::from_gamma(32, 32, 1, 16).unwrap().codeword_len, 128);
        assert_eq!(ModelConfig::from_gamma(32, 32, 1, 32).unwrap().codeword_len, 64);
        assert!(ModelConfig::new(32, 32, 2048).is_err());
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let cfg = toy_model_config();
        let a = build_model(&cfg, 9).unwrap();
        let b = build_model(&cfg, 9).unwrap();
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.value.data(), y.value.data());
        }
        let c = build_model(&cfg, 10).unwrap();
        let first = |m: &CsiNetParams| m.params.value(m.layout.enc_conv.w).data().to_vec();
        assert_ne!(first(&a), first(&c));
    }

    #[test]
    fn codeword_has_configured_length_and_is_finite() {
        let (model, _, ds) = toy_train(30, 1);
        let s = model.encode_batch(&ds.samples[0]).unwrap();
        assert_eq!(s.shape(), &[model.config().codeword_len]);
        assert!(s.all_finite());
        let batch = ds.gather(&[0, 1, 2]);
        let sb = model.encode_batch(&batch).unwrap();
        assert_eq!(sb.shape(), &[3, model.config().codeword_len]);
    }

    #[test]
    fn zeroed_encoder_emits_zero_codeword() {
        let cfg = toy_model_config();
        let mut model = build_model(&cfg, 3).unwrap();
        for id in [model.layout.enc_conv.w, model.layout.enc_conv.b, model.layout.enc_fc.b] {
            model.params.node_mut(id).value.fill(0.0);
        }
        let ds = toy_dataset(4, 8, 0);
        let batch = ds.gather(&[0, 1]);
        // Train-mode pass initializes the norm statistics and must itself be zero.
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone());
        let mut access = Access::Train(&mut model.params);
        let s = forward_encoder(&mut tape, &mut access, &model.layout, &model.config, x).unwrap();
        assert!(tape.value(s).data().iter().all(|v| *v == 0.0));
        drop(access);
        // And the inference path agrees once statistics exist.
        let s = model.encode_batch(&batch).unwrap();
        assert!(s.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_shape_and_range() {
        let (model, _, ds) = toy_train(30, 1);
        let s = model.encode_batch(&ds.gather(&[0, 1])).unwrap();
        let out = model.decode_batch(&s).unwrap();
        assert_eq!(out.shape(), &[2, 2, 8, 8]);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn zeroed_refine_unit_is_identity() {
        let cfg = toy_model_config();
        let mut model = build_model(&cfg, 4).unwrap();
        for conv in &model.layout.refine[0].convs.clone() {
            model.params.node_mut(conv.w).value.fill(0.0);
            model.params.node_mut(conv.b).value.fill(0.0);
        }
        let x_data = Tensor::from_vec(
            &[1, 2, 8, 8],
            (0..128).map(|i| ((i as f32) * 0.11).sin()).collect(),
        );
        let mut tape = Tape::new();
        let x = tape.leaf(x_data.clone());
        let unit = model.layout.refine[0].clone();
        let mut access = Access::Train(&mut model.params);
        let y = refine_forward(&mut tape, &mut access, &unit, x).unwrap();
        assert_eq!(tape.value(y).data(), x_data.data());
    }

    #[test]
    fn encode_decode_are_pure() {
        let (model, _, ds) = toy_train(30, 1);
        let batch = ds.gather(&[0, 1, 2]);
        let s1 = model.encode_batch(&batch).unwrap();
        let s2 = model.encode_batch(&batch).unwrap();
        assert_eq!(s1.data(), s2.data());
        let d1 = model.decode_batch(&s1).unwrap();
        let d2 = model.decode_batch(&s1).unwrap();
        assert_eq!(d1.data(), d2.data());
    }

    #[test]
    fn awgn_at_huge_snr_is_nearly_exact() {
        let s = Tensor::from_vec(&[8], (1..=8).map(|v| v as f32 * 0.3).collect());
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let noisy = add_awgn(&s, 200.0, &mut rng).unwrap();
        for (a, b) in s.data().iter().zip(noisy.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn awgn_at_zero_db_matches_signal_power() {
        let s = Tensor::from_vec(&[16], (0..16).map(|v| ((v + 1) as f32 * 0.21).cos()).collect());
        let signal = s.norm_sq();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let draws = 10_000;
        let mut total = 0.0f64;
        for _ in 0..draws {
            let noisy = add_awgn(&s, 0.0, &mut rng).unwrap();
            total += noisy
                .data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| {
                    let d = (a - b) as f64;
                    d * d
                })
                .sum::<f64>();
        }
        let mean_noise = total / draws as f64;
        let ratio = mean_noise / signal;
        assert!((ratio - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn awgn_is_reproducible_per_seed_and_rejects_silence() {
        let s = Tensor::from_vec(&[4], vec![0.1, -0.4, 0.2, 0.9]);
        let mut r1 = ChaCha12Rng::seed_from_u64(33);
        let mut r2 = ChaCha12Rng::seed_from_u64(33);
        assert_eq!(
            add_awgn(&s, 10.0, &mut r1).unwrap().data(),
            add_awgn(&s, 10.0, &mut r2).unwrap().data()
        );
        let zero = Tensor::zeros(&[4]);
        assert!(matches!(
            add_awgn(&zero, 10.0, &mut r1),
            Err(ModelError::ZeroPowerCodeword)
        ));
    }

    #[test]
    fn one_epoch_smoke_run() {
        let (_, report, _) = toy_train(10, 1);
        assert_eq!(report.train_mse.len(), 1);
        assert!(report.train_mse[0].is_finite());
    }

    #[test]
    fn training_halves_the_loss_and_beats_constant_predictor() {
        let (model, report, _) = toy_train(200, 40);
        let first = report.train_mse[0];
        let last = *report.train_mse.last().unwrap();
        assert!(
            last < 0.5 * first,
            "loss went {first} -> {last}, expected at least a halving"
        );

        // Held-out data: the model must beat predicting 0.5 everywhere.
        let held = toy_dataset(64, 77, 10_000);
        let model_mse = dataset_mse(&model, &held, held.len(), 32).unwrap();
        let mut const_mse = 0.0f64;
        for s in &held.samples {
            const_mse += s
                .data()
                .iter()
                .map(|v| {
                    let d = (*v - 0.5) as f64;
                    d * d
                })
                .sum::<f64>()
                / s.len() as f64;
        }
        const_mse /= held.len() as f64;
        assert!(
            model_mse < const_mse,
            "model {model_mse} vs constant {const_mse}"
        );
    }

    #[test]
    fn training_is_reproducible() {
        let (_, r1, _) = toy_train(40, 3);
        let (_, r2, _) = toy_train(40, 3);
        assert_eq!(r1.train_mse, r2.train_mse);
    }

    #[test]
    fn trained_codeword_beats_shuffled_codeword() {
        let (model, _, ds) = toy_train(200, 40);
        let held = toy_dataset(32, 78, 20_000);
        let batch = held.gather(&(0..held.len()).collect::<Vec<_>>());
        let s = model.encode_batch(&batch).unwrap();
        // Shuffle codeword coordinates consistently across the batch.
        let m = model.config().codeword_len;
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        perm.shuffle(&mut rng);
        let mut shuffled = s.clone();
        for b in 0..held.len() {
            for (j, &pj) in perm.iter().enumerate() {
                shuffled.data_mut()[b * m + j] = s.data()[b * m + pj];
            }
        }
        let good = model.decode_batch(&s).unwrap();
        let bad = model.decode_batch(&shuffled).unwrap();
        let mse = |out: &Tensor| {
            out.data()
                .iter()
                .zip(batch.data())
                .map(|(a, b)| {
                    let d = (a - b) as f64;
                    d * d
                })
                .sum::<f64>()
                / out.len() as f64
        };
        assert!(
            mse(&good) < mse(&bad),
            "decode of intact codewords should beat shuffled ones"
        );
        let _ = ds;
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cfg = toy_model_config();
        let mut model = build_model(&cfg, 6).unwrap();
        let ds = toy_dataset(2, 14, 0);
        let sample = ds.gather(&[0]);
        let target = ds.gather(&[1]);
        let layout = model.layout.clone();
        let mcfg = model.config;
        let mut inputs = vec![sample];
        let max_rel = crate::autograd::grad_check(
            &mut model.params,
            &mut inputs,
            1e-3,
            move |tape, params, ids| {
                let mut access = Access::Train(params);
                let s = forward_encoder(tape, &mut access, &layout, &mcfg, ids[0])?;
                let out = forward_decoder(tape, &mut access, &layout, &mcfg, s)?;
                drop(access);
                let t = tape.leaf(target.clone());
                tape.mse(out, t)
            },
        )
        .unwrap();
        assert!(max_rel < 1e-3, "max rel err {max_rel}");
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let (model, _, _) = toy_train(30, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csim");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path, Some(model.config())).unwrap();
        assert!(loaded.is_frozen());
        for ((_, a), (_, b)) in model.params.iter().zip(loaded.params.iter()) {
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // Save the loaded copy: identical bytes.
        let path2 = dir.path().join("model2.csim");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn model_file_rejects_wrong_config_and_version() {
        let (model, _, _) = toy_train(10, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csim");
        save_model(&model, &path).unwrap();

        let other = ModelConfig::from_gamma(8, 8, 1, 16).unwrap();
        match load_model(&path, Some(&other)) {
            Err(ModelError::DatasetMismatch { .. }) => {}
            other => panic!("{other:?}"),
        }

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 7;
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path, None) {
            Err(ModelError::Codec(CodecError::UnsupportedVersion { .. })) => {}
            other => panic!("{other:?}"),
        }
    }
}
