//! NMSE evaluation and ISR sweeps.
//!
//! NMSE is `10 log10( mean_i ||H_i - Hhat_i||^2 / ||H_i||^2 )`. By default
//! both tensors are centered by subtracting 0.5 from the normalized
//! representation first, so the constant-0.5 predictor scores exactly 0 dB
//! instead of benefiting from the DC offset; the raw domain is available as
//! an option. The swept quantity on the x axis of every report is the ISR:
//! the perturbation-to-codeword power ratio.

use crate::attack::{jamming_noise, AttackError, Perturbation};
use crate::channel::{Dataset, Scenario};
use crate::csinet::{CsiNetParams, ModelError};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction set shape {got} does not match reference {expected}")]
    ShapeMismatch { expected: String, got: String },
    #[error("no usable samples: every reference had zero norm")]
    NoUsableSamples,
    #[error("no perturbation supplied for ISR {0} dB")]
    MissingPerturbation(f32),
    #[error("ISR grid must be strictly increasing")]
    GridNotIncreasing,
    #[error("empty report")]
    EmptyReport,
    #[error("report parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Domain in which the NMSE ratio is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmseDomain {
    /// Subtract 0.5 from the normalized values first.
    #[default]
    Centered,
    /// Use the normalized values as-is.
    Raw,
}

impl NmseDomain {
    fn center(self) -> f64 {
        match self {
            NmseDomain::Centered => 0.5,
            NmseDomain::Raw => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    None,
    Adversarial,
    Jamming,
}

impl AttackKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AttackKind::None),
            "adversarial" => Some(AttackKind::Adversarial),
            "jamming" => Some(AttackKind::Jamming),
            _ => None,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::None => "none",
            AttackKind::Adversarial => "adversarial",
            AttackKind::Jamming => "jamming",
        })
    }
}

/// Which trained network a point belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDescriptor {
    pub gamma: f64,
    pub scenario: Scenario,
    /// SNR the model was trained at; `None` for noiseless training.
    pub train_snr_db: Option<f32>,
}

impl ModelDescriptor {
    /// Human label like `indoor g=1/4 snr10`.
    pub fn label(&self) -> String {
        let snr = match self.train_snr_db {
            Some(v) => format!(" snr{}", trim_float(v as f64)),
            None => String::new(),
        };
        format!("{} g={}{}", self.scenario, gamma_label(self.gamma), snr)
    }
}

/// Renders gamma as a small fraction when one matches (`1/4`, `1/16`, ...).
pub fn gamma_label(gamma: f64) -> String {
    for den in 1..=64u32 {
        let num = (gamma * den as f64).round();
        if num >= 1.0 && (num / den as f64 - gamma).abs() < 1e-9 {
            return format!("{}/{}", num as u32, den);
        }
    }
    format!("{gamma:.4}")
}

fn trim_float(v: f64) -> String {
    if v == v.trunc() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// One measured condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub model: ModelDescriptor,
    /// `None` marks the no-attack baseline row.
    pub isr_db: Option<f32>,
    pub kind: AttackKind,
    pub nmse_db: f64,
    pub n_samples: usize,
    /// Injected noise power for jamming points; audited against the
    /// adversarial perturbation power at the same ISR. Not serialized.
    pub injected_power: Option<f64>,
}

/// Sweep results for one (model, test set) pair: exactly one baseline plus
/// the attacked points, ISR strictly increasing within each attack kind.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub baseline: EvalPoint,
    pub points: Vec<EvalPoint>,
    /// Count of reference samples excluded for zero norm.
    pub skipped_samples: usize,
}

/// NMSE over a sample set, in dB.
#[derive(Debug, Clone, Copy)]
pub struct NmseResult {
    pub db: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Per-sample error ratios; sample index is the leading dimension.
fn sample_ratios(
    reference: &Tensor,
    prediction: &Tensor,
    domain: NmseDomain,
) -> Result<Vec<Option<f64>>, EvalError> {
    if reference.shape() != prediction.shape() || reference.shape().is_empty() {
        return Err(EvalError::ShapeMismatch {
            expected: crate::tensor::shape_string(reference.shape()),
            got: crate::tensor::shape_string(prediction.shape()),
        });
    }
    let count = reference.shape()[0];
    let stride = reference.len() / count.max(1);
    let c = domain.center();
    Ok((0..count)
        .map(|i| {
            let h = &reference.data()[i * stride..(i + 1) * stride];
            let hh = &prediction.data()[i * stride..(i + 1) * stride];
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for (a, b) in h.iter().zip(hh) {
                let d = *a as f64 - *b as f64;
                num += d * d;
                let e = *a as f64 - c;
                den += e * e;
            }
            (den > 0.0).then_some(num / den)
        })
        .collect())
}

fn ratios_to_nmse(ratios: &[Option<f64>]) -> Result<NmseResult, EvalError> {
    let mut total = 0.0f64;
    let mut used = 0usize;
    for r in ratios.iter().flatten() {
        total += r;
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::NoUsableSamples);
    }
    let mean = total / used as f64;
    Ok(NmseResult {
        db: 10.0 * mean.log10(),
        used,
        skipped: ratios.len() - used,
    })
}

/// `10 log10(mean ||H - Hhat||^2 / ||H||^2)` over the sample dimension.
/// Zero-norm references are excluded and counted in `skipped`.
pub fn nmse(
    reference: &Tensor,
    prediction: &Tensor,
    domain: NmseDomain,
) -> Result<NmseResult, EvalError> {
    ratios_to_nmse(&sample_ratios(reference, prediction, domain)?)
}

/// Decodes codewords in batches and accumulates per-sample ratios against the
/// reference samples.
fn decode_ratios(
    model: &CsiNetParams,
    codewords: &[f32],
    test: &Dataset,
    domain: NmseDomain,
    batch: usize,
) -> Result<Vec<Option<f64>>, EvalError> {
    let m = model.config().codeword_len;
    let n = codewords.len() / m;
    let mut ratios = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let end = (start + batch).min(n);
        let s = Tensor::from_vec(&[end - start, m], codewords[start * m..end * m].to_vec());
        let out = model.decode_batch(&s)?;
        let idx: Vec<usize> = (start..end).collect();
        let reference = test.gather(&idx);
        ratios.extend(sample_ratios(&reference, &out, domain)?);
        start = end;
    }
    Ok(ratios)
}

const EVAL_BATCH: usize = 200;

/// Runs the `(ISR, attack kind)` grid against one frozen model.
///
/// The baseline is computed once from clean codewords. For each grid point,
/// the matching perturbation is superposed (adversarial) or a fresh Gaussian
/// draw of exactly the same power is superposed per sample (jamming).
/// Deterministic given `seed`: jamming draws use one RNG stream per
/// `(ISR index, sample index)`.
pub fn run_sweep(
    model: &CsiNetParams,
    perturbations: &[Perturbation],
    test: &Dataset,
    isr_grid_db: &[f32],
    kinds: &[AttackKind],
    descriptor: &ModelDescriptor,
    seed: u64,
    domain: NmseDomain,
) -> Result<SweepReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::Model(ModelError::EmptyDataset));
    }
    if isr_grid_db.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::GridNotIncreasing);
    }
    let m = model.config().codeword_len;
    let n = test.len();

    let mut codewords = Vec::with_capacity(n * m);
    let mut start = 0usize;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let s = model.encode_batch(&test.gather(&idx))?;
        codewords.extend_from_slice(s.data());
        start = end;
    }

    let base_ratios = decode_ratios(model, &codewords, test, domain, EVAL_BATCH)?;
    let base = ratios_to_nmse(&base_ratios)?;
    let baseline = EvalPoint {
        model: descriptor.clone(),
        isr_db: None,
        kind: AttackKind::None,
        nmse_db: base.db,
        n_samples: base.used,
        injected_power: None,
    };

    let mut points = Vec::new();
    for (isr_idx, &isr_db) in isr_grid_db.iter().enumerate() {
        let perturbation = perturbations
            .iter()
            .find(|p| p.isr_db == isr_db)
            .ok_or(EvalError::MissingPerturbation(isr_db))?;
        if perturbation.len() != m {
            return Err(EvalError::Attack(AttackError::LengthMismatch {
                expected: m,
                got: perturbation.len(),
            }));
        }
        let power = perturbation.power();
        for &kind in kinds {
            let point = match kind {
                AttackKind::None => EvalPoint {
                    isr_db: Some(isr_db),
                    ..baseline.clone()
                },
                AttackKind::Adversarial => {
                    let mut tampered = codewords.clone();
                    for row in tampered.chunks_exact_mut(m) {
                        for (v, q) in row.iter_mut().zip(&perturbation.values) {
                            *v += q;
                        }
                    }
                    let res =
                        ratios_to_nmse(&decode_ratios(model, &tampered, test, domain, EVAL_BATCH)?)?;
                    EvalPoint {
                        model: descriptor.clone(),
                        isr_db: Some(isr_db),
                        kind,
                        nmse_db: res.db,
                        n_samples: res.used,
                        injected_power: Some(power),
                    }
                }
                AttackKind::Jamming => {
                    let mut jammed = codewords.clone();
                    for (i, row) in jammed.chunks_exact_mut(m).enumerate() {
                        let mut rng = ChaCha12Rng::seed_from_u64(seed);
                        rng.set_stream(((isr_idx as u64 + 1) << 32) | i as u64);
                        for (v, nv) in row.iter_mut().zip(jamming_noise(m, power, &mut rng)) {
                            *v += nv;
                        }
                    }
                    let res =
                        ratios_to_nmse(&decode_ratios(model, &jammed, test, domain, EVAL_BATCH)?)?;
                    EvalPoint {
                        model: descriptor.clone(),
                        isr_db: Some(isr_db),
                        kind,
                        nmse_db: res.db,
                        n_samples: res.used,
                        injected_power: Some(power),
                    }
                }
            };
            points.push(point);
        }
    }

    Ok(SweepReport {
        baseline,
        points,
        skipped_samples: base.skipped,
    })
}

pub const CSV_HEADER: &str = "gamma,scenario,train_snr_db,isr_db,attack,nmse_db,n_samples";

fn csv_row(p: &EvalPoint) -> String {
    let snr = p
        .train_snr_db_string();
    let isr = match p.isr_db {
        Some(v) => format!("{v}"),
        None => String::new(),
    };
    format!(
        "{},{},{},{},{},{},{}",
        p.model.gamma, p.model.scenario, snr, isr, p.kind, p.nmse_db, p.n_samples
    )
}

impl EvalPoint {
    fn train_snr_db_string(&self) -> String {
        match self.model.train_snr_db {
            Some(v) => format!("{v}"),
            None => String::new(),
        }
    }
}

/// Writes reports as CSV: header, then per report the baseline row (empty
/// `isr_db`, attack `none`) followed by the attacked points. `-inf` appears
/// literally for perfect reconstruction. Byte output is deterministic.
pub fn write_csv(reports: &[SweepReport], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for report in reports {
        out.push_str(&csv_row(&report.baseline));
        out.push('\n');
        for p in &report.points {
            out.push_str(&csv_row(p));
            out.push('\n');
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    field: &str,
    line: usize,
    what: &str,
) -> Result<T, EvalError> {
    field.parse().map_err(|_| EvalError::Parse {
        line,
        reason: format!("bad {what}: {field:?}"),
    })
}

/// Parses a CSV written by [`write_csv`] back into reports. Report boundaries
/// are the baseline rows.
pub fn read_csv(path: &Path) -> Result<Vec<SweepReport>, EvalError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        other => {
            return Err(EvalError::Parse {
                line: 1,
                reason: format!("missing header, found {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut reports: Vec<SweepReport> = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 7 {
            return Err(EvalError::Parse {
                line,
                reason: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let gamma: f64 = parse_field(fields[0], line, "gamma")?;
        let scenario = Scenario::parse(fields[1]).ok_or_else(|| EvalError::Parse {
            line,
            reason: format!("bad scenario: {:?}", fields[1]),
        })?;
        let train_snr_db = if fields[2].is_empty() {
            None
        } else {
            Some(parse_field(fields[2], line, "train_snr_db")?)
        };
        let isr_db = if fields[3].is_empty() {
            None
        } else {
            Some(parse_field(fields[3], line, "isr_db")?)
        };
        let kind = AttackKind::parse(fields[4]).ok_or_else(|| EvalError::Parse {
            line,
            reason: format!("bad attack kind: {:?}", fields[4]),
        })?;
        let nmse_db: f64 = parse_field(fields[5], line, "nmse_db")?;
        let n_samples: usize = parse_field(fields[6], line, "n_samples")?;
        let point = EvalPoint {
            model: ModelDescriptor {
                gamma,
                scenario,
                train_snr_db,
            },
            isr_db,
            kind,
            nmse_db,
            n_samples,
            injected_power: None,
        };
        if point.isr_db.is_none() && point.kind == AttackKind::None {
            reports.push(SweepReport {
                baseline: point,
                points: Vec::new(),
                skipped_samples: 0,
            });
        } else {
            let report = reports.last_mut().ok_or_else(|| EvalError::Parse {
                line,
                reason: "point row before any baseline row".into(),
            })?;
            report.points.push(point);
        }
    }
    Ok(reports)
}
