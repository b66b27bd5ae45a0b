//! Universal adversarial perturbation on the feedback codeword.
//!
//! The attacker is modeled as a bias layer between encoder and decoder: the
//! only trainable quantity is an additive vector `p` of codeword length.
//! Crafting is the second training step: with the victim network frozen,
//! gradient ascent (Adam on the negated reconstruction loss) pushes `p`
//! toward maximal damage, and after every optimizer step `p` is projected
//! back onto the sphere `||p||^2 = isr * P_s`, where `P_s` is the mean
//! codeword power of the crafting set.
//!
//! Jamming noise for comparison is drawn Gaussian and rescaled per draw to
//! the exact same power as the perturbation it is compared against.

use crate::autograd::Tape;
use crate::channel::Dataset;
use crate::codec::{BinReader, BinWriter, CodecError};
use crate::csinet::{forward_decoder, Access, CsiNetParams, ModelError};
use crate::optim::Adam;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::path::Path;
use thiserror::Error;

pub const PERTURBATION_MAGIC: &[u8; 4] = b"CSIP";
pub const PERTURBATION_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("model must be frozen before crafting a perturbation")]
    ModelNotFrozen,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("need {need} crafting samples, dataset has {have}")]
    InsufficientSamples { need: usize, have: usize },
    #[error("reference codeword power must be positive, got {0}")]
    NonPositivePower(f64),
    #[error("perturbation length {got} does not match codeword length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Crafting schedule for one ISR point.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// Perturbation power budget relative to codeword power, in dB.
    pub isr_db: f32,
    pub epochs: usize,
    pub learning_rate: f32,
    pub train_samples: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// A crafted universal perturbation and the codeword power it was budgeted
/// against: `||values||^2 = 10^(isr_db/10) * reference_power`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub values: Vec<f32>,
    pub isr_db: f32,
    pub reference_power: f32,
}

impl Perturbation {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `||p||^2`, accumulated in f64.
    pub fn power(&self) -> f64 {
        self.values.iter().map(|&v| v as f64 * v as f64).sum()
    }

    pub fn isr_linear(&self) -> f64 {
        10f64.powf(self.isr_db as f64 / 10.0)
    }
}

/// Per-epoch mean of the maximized reconstruction loss.
#[derive(Debug, Clone, Default)]
pub struct AttackReport {
    pub epoch_loss: Vec<f64>,
}

/// Rescales `p` onto the sphere `||p||^2 = isr_linear * reference_power`,
/// preserving direction. A zero vector passes through unchanged.
pub fn project_isr(
    p: &mut [f32],
    reference_power: f64,
    isr_linear: f64,
) -> Result<(), AttackError> {
    if reference_power <= 0.0 {
        return Err(AttackError::NonPositivePower(reference_power));
    }
    let norm_sq: f64 = p.iter().map(|&v| v as f64 * v as f64).sum();
    if norm_sq == 0.0 {
        return Ok(());
    }
    let scale = (isr_linear * reference_power / norm_sq).sqrt();
    for v in p {
        *v = (*v as f64 * scale) as f32;
    }
    Ok(())
}

/// `s + p`, broadcast over rows when `s` is a `[B, M]` batch.
pub fn apply_perturbation(s: &Tensor, p: &Perturbation) -> Result<Tensor, AttackError> {
    let m = p.len();
    let row_len = *s.shape().last().unwrap_or(&0);
    if row_len != m || s.shape().len() > 2 {
        return Err(AttackError::LengthMismatch {
            expected: m,
            got: row_len,
        });
    }
    let mut out = s.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (v, q) in row.iter_mut().zip(&p.values) {
            *v += q;
        }
    }
    Ok(out)
}

/// Zero-mean Gaussian vector rescaled so that `||n||^2` equals `power`
/// exactly for this draw.
pub fn jamming_noise<R: Rng>(m: usize, power: f64, rng: &mut R) -> Vec<f32> {
    debug_assert!(power > 0.0);
    loop {
        let raw: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let norm_sq: f64 = raw.iter().map(|v| v * v).sum();
        if norm_sq > 0.0 {
            let scale = (power / norm_sq).sqrt();
            return raw.iter().map(|v| (v * scale) as f32).collect();
        }
    }
}

/// Crafts the universal perturbation for one ISR point against a frozen
/// model. Returns the perturbation and the per-epoch loss trend (ascending,
/// since the bias layer maximizes the reconstruction error).
pub fn craft_perturbation(
    model: &CsiNetParams,
    ds: &Dataset,
    cfg: &AttackConfig,
) -> Result<(Perturbation, AttackReport), AttackError> {
    if !model.is_frozen() {
        return Err(AttackError::ModelNotFrozen);
    }
    if ds.is_empty() {
        return Err(AttackError::EmptyDataset);
    }
    if cfg.train_samples == 0 || cfg.train_samples > ds.len() {
        return Err(AttackError::InsufficientSamples {
            need: cfg.train_samples.max(1),
            have: ds.len(),
        });
    }
    let m = model.config().codeword_len;
    let n = cfg.train_samples;

    // Collect codewords once; the encoder is untouched by the attack.
    let mut codewords = Vec::with_capacity(n * m);
    let mut start = 0usize;
    while start < n {
        let end = (start + cfg.batch_size.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let s = model.encode_batch(&ds.gather(&idx))?;
        codewords.extend_from_slice(s.data());
        start = end;
    }
    let mut reference_power = 0.0f64;
    for row in codewords.chunks_exact(m) {
        reference_power += row.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
    }
    reference_power /= n as f64;
    if reference_power <= 0.0 {
        return Err(AttackError::NonPositivePower(reference_power));
    }
    // Project against the f32-rounded value that gets stored with the file,
    // so the persisted pair satisfies the ISR identity on its own.
    let stored_power = reference_power as f32;
    let reference_power = stored_power as f64;
    let isr_linear = 10f64.powf(cfg.isr_db as f64 / 10.0);

    let mut joint = model.params().clone();
    let p_id = joint.add(Tensor::zeros(&[m]), true);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = AttackReport::default();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut s_data = Vec::with_capacity(chunk.len() * m);
            for &i in chunk {
                s_data.extend_from_slice(&codewords[i * m..(i + 1) * m]);
            }
            let s_batch = Tensor::from_vec(&[chunk.len(), m], s_data);
            let target = ds.gather(chunk);

            let mut tape = Tape::new();
            let s_leaf = tape.leaf(s_batch);
            let tampered = tape.bias_add(&joint, s_leaf, p_id).map_err(ModelError::Grad)?;
            let mut access = Access::Infer(&joint);
            let out = forward_decoder(
                &mut tape,
                &mut access,
                model.layout(),
                model.config(),
                tampered,
            )
            .map_err(ModelError::Grad)?;
            drop(access);
            let t_leaf = tape.leaf(target);
            let loss = tape.mse(out, t_leaf).map_err(ModelError::Grad)?;
            epoch_loss += tape.scalar_f64(loss) * chunk.len() as f64;

            joint.zero_grad();
            tape.backward(&mut joint, loss).map_err(ModelError::Grad)?;
            // Ascent: feed Adam the negated gradient of the loss.
            for g in joint.node_mut(p_id).grad.data_mut() {
                *g = -*g;
            }
            adam.step(&mut joint);
            project_isr(
                joint.node_mut(p_id).value.data_mut(),
                reference_power,
                isr_linear,
            )?;
        }
        report.epoch_loss.push(epoch_loss / n as f64);
    }

    let perturbation = Perturbation {
        values: joint.value(p_id).data().to_vec(),
        isr_db: cfg.isr_db,
        reference_power: stored_power,
    };
    Ok((perturbation, report))
}

pub fn save_perturbation(p: &Perturbation, path: &Path) -> Result<(), CodecError> {
    let mut w = BinWriter::create(path)?;
    w.magic(PERTURBATION_MAGIC)?;
    w.u16(PERTURBATION_VERSION)?;
    w.u32(p.values.len() as u32)?;
    w.f32(p.isr_db)?;
    w.f32(p.reference_power)?;
    w.f32_slice(&p.values)?;
    w.finish()
}

pub fn load_perturbation(path: &Path) -> Result<Perturbation, CodecError> {
    let mut r = BinReader::open(path)?;
    r.expect_magic(PERTURBATION_MAGIC)?;
    r.expect_version(PERTURBATION_VERSION)?;
    let m = r.u32("length")? as usize;
    let isr_db = r.f32("isr dB")?;
    let reference_power = r.f32("reference power")?;
    let values = r.f32_vec(m, "payload")?;
    r.expect_eof()?;
    Ok(Perturbation {
        values,
        isr_db,
        reference_power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, Scenario, ScenarioConfig};
    use crate::csinet::{train, ModelConfig, TrainConfig};

    fn toy_setup() -> (CsiNetParams, Dataset) {
        let mut cfg = ScenarioConfig::new(Scenario::Indoor, 21);
        cfg.subcarriers = 64;
        cfg.antennas = 8;
        cfg.delay_rows = 8;
        let ds = generate_dataset(&cfg, 220, 0).unwrap();
        let mcfg = ModelConfig::from_gamma(8, 8, 1, 4).unwrap();
        let tcfg = TrainConfig {
            epochs: 30,
            train_samples: 200,
            val_samples: 0,
            learning_rate: 0.001,
            batch_size: 50,
            seed: 5,
            codeword_snr_db: None,
        };
        let (mut model, _) = train(&ds, None, &mcfg, &tcfg).unwrap();
        model.freeze();
        (model, ds)
    }

    fn attack_config(isr_db: f32, epochs: usize) -> AttackConfig {
        AttackConfig {
            isr_db,
            epochs,
            learning_rate: 0.001,
            train_samples: 200,
            batch_size: 50,
            seed: 77,
        }
    }

    #[test]
    fn projection_hits_the_target_sphere() {
        let mut p = vec![2.0f32, 0.0, 0.0];
        project_isr(&mut p, 100.0, 0.01).unwrap();
        // ||p||^2 = 4, target power 1.0 -> scale 0.5.
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn projection_is_idempotent_and_direction_preserving() {
        let mut p: Vec<f32> = (0..16).map(|i| ((i as f32) * 0.73).sin()).collect();
        project_isr(&mut p, 50.0, 0.1).unwrap();
        let before = p.clone();
        project_isr(&mut p, 50.0, 0.1).unwrap();
        for (a, b) in before.iter().zip(&p) {
            assert!((a - b).abs() <= 1e-7 * a.abs().max(1e-6));
        }
        // Direction preserved against the unprojected original.
        let mut q: Vec<f32> = (0..16).map(|i| ((i as f32) * 0.73).sin()).collect();
        let qn = (q.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt();
        let pn = (p.iter().map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt();
        for (a, b) in q.iter_mut().zip(&p) {
            let ua = *a as f64 / qn;
            let ub = *b as f64 / pn;
            assert!((ua - ub).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_passes_zero_through_and_rejects_bad_power() {
        let mut z = vec![0.0f32; 4];
        project_isr(&mut z, 10.0, 0.5).unwrap();
        assert_eq!(z, vec![0.0; 4]);
        assert!(matches!(
            project_isr(&mut z, 0.0, 0.5),
            Err(AttackError::NonPositivePower(_))
        ));
    }

    #[test]
    fn apply_perturbation_is_plain_addition() {
        let s = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let zero = Perturbation {
            values: vec![0.0; 4],
            isr_db: -10.0,
            reference_power: 1.0,
        };
        assert_eq!(apply_perturbation(&s, &zero).unwrap().data(), s.data());

        let p = Perturbation {
            values: vec![0.5, -1.0, 0.25, 2.0],
            isr_db: -10.0,
            reference_power: 1.0,
        };
        let once = apply_perturbation(&s, &p).unwrap();
        let twice = apply_perturbation(&once, &p).unwrap();
        for i in 0..4 {
            assert_eq!(once.data()[i] - s.data()[i], p.values[i]);
            assert_eq!(twice.data()[i] - s.data()[i], 2.0 * p.values[i]);
        }

        let wrong = Tensor::zeros(&[5]);
        assert!(matches!(
            apply_perturbation(&wrong, &p),
            Err(AttackError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn jamming_noise_is_exactly_power_matched() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for &power in &[1.0f64, 0.037, 250.0] {
            let n = jamming_noise(64, power, &mut rng);
            let got: f64 = n.iter().map(|&v| v as f64 * v as f64).sum();
            assert!(
                (got - power).abs() <= 1e-6 * power,
                "power {got} vs {power}"
            );
        }
    }

    #[test]
    fn jamming_seeds_change_direction_not_norm() {
        let mut r1 = ChaCha12Rng::seed_from_u64(1);
        let mut r2 = ChaCha12Rng::seed_from_u64(2);
        let a = jamming_noise(32, 4.0, &mut r1);
        let b = jamming_noise(32, 4.0, &mut r2);
        assert_ne!(a, b);
        let pa: f64 = a.iter().map(|&v| v as f64 * v as f64).sum();
        let pb: f64 = b.iter().map(|&v| v as f64 * v as f64).sum();
        assert!((pa - pb).abs() < 1e-6 * 4.0);
    }

    #[test]
    fn jamming_noise_is_zero_mean() {
        let m = 8;
        let draws = 10_000;
        let power = 2.0f64;
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        let mut sums = vec![0.0f64; m];
        for _ in 0..draws {
            for (s, v) in sums.iter_mut().zip(jamming_noise(m, power, &mut rng)) {
                *s += v as f64;
            }
        }
        let sigma = (power / m as f64).sqrt();
        let se = sigma / (draws as f64).sqrt();
        for s in &sums {
            let mean = s / draws as f64;
            assert!(mean.abs() < 3.0 * se, "mean {mean} vs se {se}");
        }
    }

    #[test]
    fn zero_epochs_returns_zero_perturbation() {
        let (model, ds) = toy_setup();
        let (p, report) = craft_perturbation(&model, &ds, &attack_config(-10.0, 0)).unwrap();
        assert!(p.values.iter().all(|v| *v == 0.0));
        assert!(report.epoch_loss.is_empty());
    }

    #[test]
    fn crafting_requires_a_frozen_model() {
        let (model, ds) = toy_setup();
        let unfrozen = crate::csinet::build_model(model.config(), 1).unwrap();
        match craft_perturbation(&unfrozen, &ds, &attack_config(-10.0, 1)) {
            Err(AttackError::ModelNotFrozen) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn crafting_meets_isr_exactly_and_leaves_model_untouched() {
        let (model, ds) = toy_setup();
        let before: Vec<Vec<u32>> = model
            .params()
            .iter()
            .map(|(_, n)| n.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let cfg = attack_config(-10.0, 3);
        let (p, report) = craft_perturbation(&model, &ds, &cfg).unwrap();
        let after: Vec<Vec<u32>> = model
            .params()
            .iter()
            .map(|(_, n)| n.value.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after, "frozen model bytes changed");

        let target = p.isr_linear() * p.reference_power as f64;
        let got = p.power();
        assert!(
            (got - target).abs() <= 1e-6 * target,
            "||p||^2 {got} vs target {target}"
        );
        assert_eq!(report.epoch_loss.len(), 3);
    }

    #[test]
    fn attack_loss_trends_upward() {
        let (model, ds) = toy_setup();
        let (_, report) = craft_perturbation(&model, &ds, &attack_config(-5.0, 6)).unwrap();
        let first = report.epoch_loss[0];
        let last = *report.epoch_loss.last().unwrap();
        assert!(
            last >= first,
            "ascent expected: first {first}, last {last}"
        );
    }

    #[test]
    fn adversarial_beats_power_matched_jamming_on_mean_mse() {
        let (model, ds) = toy_setup();
        let (p, _) = craft_perturbation(&model, &ds, &attack_config(-10.0, 8)).unwrap();

        let mut cfg = ScenarioConfig::new(Scenario::Indoor, 99);
        cfg.subcarriers = 64;
        cfg.antennas = 8;
        cfg.delay_rows = 8;
        let test = generate_dataset(&cfg, 200, 50_000).unwrap();
        let batch = test.gather(&(0..test.len()).collect::<Vec<_>>());
        let s = model.encode_batch(&batch).unwrap();

        let mse_of = |decoded: &Tensor| {
            decoded
                .data()
                .iter()
                .zip(batch.data())
                .map(|(a, b)| {
                    let d = (a - b) as f64;
                    d * d
                })
                .sum::<f64>()
                / decoded.len() as f64
        };

        let adv = model
            .decode_batch(&apply_perturbation(&s, &p).unwrap())
            .unwrap();

        let m = model.config().codeword_len;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut jammed = s.clone();
        for row in jammed.data_mut().chunks_exact_mut(m) {
            for (v, nv) in row.iter_mut().zip(jamming_noise(m, p.power(), &mut rng)) {
                *v += nv;
            }
        }
        let jam = model.decode_batch(&jammed).unwrap();

        assert!(
            mse_of(&adv) > mse_of(&jam),
            "adversarial {} should exceed jamming {}",
            mse_of(&adv),
            mse_of(&jam)
        );
    }

    #[test]
    fn perturbation_file_round_trips() {
        let p = Perturbation {
            values: (0..32).map(|i| ((i as f32) * 0.31).sin()).collect(),
            isr_db: -20.0,
            reference_power: 12.5,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csip");
        save_perturbation(&p, &path).unwrap();
        let back = load_perturbation(&path).unwrap();
        assert_eq!(p, back);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_perturbation(&path),
            Err(CodecError::BadMagic { .. })
        ));
    }
}
