//! Joint optimization of mask logits and reconstructor weights, and
//! evaluation of trained (or fixed) mask/reconstructor pairs.
//!
//! One training step draws a minibatch and, per image, one mask realization
//! and one set of `N × S` individual measurements. The per-image graph is
//! `logits → sigmoid → normalize → straight-through sample → masked average
//! → Hz/N → reconstructor → MSE`; gradients are summed over the batch in a
//! fixed order so runs are bit-reproducible.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{make_measurement_source, Item, SourceMode};
use crate::diff::{adam_step, AdamConfig, AdamState, Denominator, Graph, GumbelMode, NamedTensor, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::{self, ProbabilisticMask, UnconstrainedMask};
use crate::metrics;
use crate::noise::{NoiseModel, NoiseParams, SeededRng};
use crate::raster::Image;
use crate::recon::{tvw_reconstruct, TvwConfig, UNet, UNetConfig};
use crate::sensing::{self, MeasurementSource};
use crate::wht::HadamardSpec;

const STREAM_NET_INIT: u64 = 10;
const STREAM_MASK_INIT: u64 = 11;
const STREAM_SHUFFLE: u64 = 12;
const STREAM_STEP: u64 = 13;
const STREAM_EVAL: u64 = 20;

/// Budget tolerance asserted at every step.
pub const BUDGET_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReconKind {
    /// `x̂ = Hz/N`; no trainable weights.
    Identity,
    UNet(UNetConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub s_total: usize,
    pub tau: f64,
    /// Optimizer for the reconstructor weights.
    pub adam: AdamConfig,
    /// Learning rate for the mask logits (other Adam settings shared).
    pub mask_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub source: SourceMode,
    pub denominator: Denominator,
    pub recon: ReconKind,
    /// Intensity divisor applied to the network input and target. Defaults
    /// to the largest training ground-truth value.
    pub intensity_scale: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.25,
            s_total: 10,
            tau: 0.8,
            adam: AdamConfig::default(),
            mask_lr: 1e-2,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            source: SourceMode::Simulated(NoiseModel::PoissonGaussian(NoiseParams::default())),
            denominator: Denominator::UnitFloor,
            recon: ReconKind::UNet(UNetConfig::default()),
            intensity_scale: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        mask::check_alpha(self.alpha)?;
        mask::check_tau(self.tau)?;
        if self.s_total < 1 {
            return Err(Error::invalid("S must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        for (name, lr) in [("lr", self.adam.lr), ("mask_lr", self.mask_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative")));
            }
        }
        if let Some(s) = self.intensity_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid("intensity scale must be positive"));
            }
        }
        Ok(())
    }
}

/// A trained (or trivial) map from the image-space field to `x̂`.
#[derive(Debug, Clone, PartialEq)]
pub enum Reconstructor {
    Identity,
    UNet { net: UNet, scale: f64 },
}

impl Reconstructor {
    pub fn label(&self) -> &'static str {
        match self {
            Reconstructor::Identity => "identity",
            Reconstructor::UNet { .. } => "unet",
        }
    }

    pub fn apply(&self, field: &Image) -> Result<Image> {
        match self {
            Reconstructor::Identity => Ok(field.clone()),
            Reconstructor::UNet { net, scale } => {
                let input = Image::new(field.side(), field.data().iter().map(|v| v / scale).collect())?;
                let out = net.infer(&input)?;
                Image::new(out.side(), out.data().iter().map(|v| v * scale).collect())
            }
        }
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        match self {
            Reconstructor::Identity => vec![NamedTensor {
                name: "recon.kind".into(),
                tensor: Tensor::scalar(0.0),
            }],
            Reconstructor::UNet { net, scale } => {
                let mut out = vec![
                    NamedTensor {
                        name: "recon.kind".into(),
                        tensor: Tensor::scalar(1.0),
                    },
                    NamedTensor {
                        name: "recon.scale".into(),
                        tensor: Tensor::scalar(*scale),
                    },
                ];
                out.extend(net.to_tensors());
                out
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::diff::write_checkpoint(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut tensors = crate::diff::read_checkpoint(path)?.into_iter();
        let kind = tensors
            .next()
            .filter(|t| t.name == "recon.kind")
            .ok_or_else(|| Error::Format(format!("{}: not a reconstructor checkpoint", path.display())))?;
        match kind.tensor.data()[0] as i64 {
            0 => Ok(Reconstructor::Identity),
            1 => {
                let scale = tensors
                    .next()
                    .filter(|t| t.name == "recon.scale")
                    .map(|t| t.tensor.data()[0])
                    .ok_or_else(|| Error::Format(format!("{}: missing recon.scale", path.display())))?;
                let net = UNet::from_tensors(tensors.collect())?;
                Ok(Reconstructor::UNet { net, scale })
            }
            other => Err(Error::Format(format!("{}: unknown reconstructor kind {other}", path.display()))),
        }
    }
}

/// What the mask does during training.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskChoice {
    /// Logits optimized jointly with the reconstructor.
    Learned,
    /// Held fixed; only the reconstructor is trained.
    Fixed(ProbabilisticMask),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch-mean MSE in scaled intensity units.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Final `P`; for learned masks `normalize(sigmoid(logits))`.
    pub mask: ProbabilisticMask,
    pub logits: Option<Vec<f64>>,
    pub recon: Reconstructor,
    pub losses: Vec<LossRecord>,
}

pub fn train_joint(train: &[&Item], cfg: &TrainConfig) -> Result<TrainResult> {
    train_with(train, MaskChoice::Learned, cfg)
}

pub fn train_recon_only(train: &[&Item], mask: &ProbabilisticMask, cfg: &TrainConfig) -> Result<TrainResult> {
    train_with(train, MaskChoice::Fixed(mask.clone()), cfg)
}

fn learned_probs(logits: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let p: Vec<f64> = logits.iter().map(|&l| mask::sigmoid(l)).collect();
    mask::normalize_probs(&p, alpha)
}

/// The model state a step differentiates through.
struct Step<'a> {
    cfg: &'a TrainConfig,
    side: usize,
    net: Option<&'a UNet>,
    scale: f64,
    logits: Option<&'a [f64]>,
    fixed: Option<&'a [f64]>,
}

struct StepGrads {
    loss: f64,
    logits: Option<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl Step<'_> {
    fn image(&self, source: &MeasurementSource, truth: &Image, rng: &mut rand_chacha::ChaCha8Rng, weight: f64) -> Result<StepGrads> {
        let (n, s) = (self.side * self.side, self.cfg.s_total);
        let noise = mask::logistic_noise(n * s, rng);
        let y = source.measurement_matrix(s, rng)?;

        let mut g = Graph::new();
        let mut logit_var = None;
        let m = match (self.logits, self.fixed) {
            (Some(l), _) => {
                let lv = g.param(Tensor::vector(l.to_vec()));
                logit_var = Some(lv);
                let pt = g.sigmoid(lv);
                let p = g.normalize_mask(pt, self.cfg.alpha)?;
                g.gumbel_st(p, s, &noise, self.cfg.tau, GumbelMode::StraightThrough)?
            }
            (None, Some(p)) => {
                let hard = mask::hard_from_noise(p, s, &noise);
                g.constant(Tensor::new(vec![n, s], hard.into_iter().map(f64::from).collect())?)
            }
            (None, None) => unreachable!("a step has either logits or a fixed mask"),
        };
        let z = g.masked_average(m, &y, self.cfg.denominator)?;
        let z = g.reshape(z, vec![1, self.side, self.side])?;
        let field = g.wht2d(z, self.side, 1.0 / n as f64)?;
        let target = g.constant(Tensor::new(
            vec![1, self.side, self.side],
            truth.data().iter().map(|v| v / self.scale).collect(),
        )?);
        let mut weight_vars: Vec<Var> = Vec::new();
        let out = match self.net {
            None => g.scale(field, 1.0 / self.scale),
            Some(net) => {
                weight_vars = net.bind(&mut g, true);
                let input = g.scale(field, 1.0 / self.scale);
                net.forward(&mut g, &weight_vars, input)?
            }
        };
        let loss = g.mse(out, target)?;
        let value = g.value(loss).data()[0];
        let scaled = g.scale(loss, weight);
        g.backward(scaled)?;
        let grad_of = |v: Var, len: usize| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        Ok(StepGrads {
            loss: value,
            logits: logit_var.map(|v| grad_of(v, n)),
            weights: weight_vars
                .iter()
                .map(|&v| grad_of(v, g.value(v).numel()))
                .collect(),
        })
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn numerical_failure(step: usize, epoch: usize, loss: f64, logits: Option<&[f64]>, alpha: f64) -> Error {
    let mut msg = format!("non-finite loss {loss} at step {step} (epoch {epoch})");
    if let Some(l) = logits {
        let bad = l.iter().filter(|v| !v.is_finite()).count();
        let _ = write!(msg, "; {bad} non-finite logits");
        if let Ok(p) = learned_probs(l, alpha) {
            let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let mean = p.iter().sum::<f64>() / p.len() as f64;
            let _ = write!(msg, "; mask min {lo} max {hi} mean {mean}");
        }
    }
    log::error!("{msg}");
    Error::Numerical(msg)
}

pub fn train_with(train: &[&Item], choice: MaskChoice, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let side = train[0].truth.side();
    HadamardSpec::image(side)?;
    if train.iter().any(|it| it.truth.side() != side) {
        return Err(Error::Shape("training images differ in size".into()));
    }
    let n = side * side;
    let sources = train
        .iter()
        .map(|it| make_measurement_source(it, cfg.source))
        .collect::<Result<Vec<_>>>()?;

    let root = SeededRng::new(cfg.seed, 0);
    let mut net = match cfg.recon {
        ReconKind::Identity => None,
        ReconKind::UNet(ucfg) => Some(UNet::new(ucfg, &mut root.child(STREAM_NET_INIT).rng())?),
    };
    if let Some(net) = &net {
        net.check_input(side, side)?;
    }
    let scale = match (cfg.intensity_scale, cfg.recon) {
        (Some(s), _) => s,
        (None, ReconKind::Identity) => 1.0,
        (None, ReconKind::UNet(_)) => {
            let m = train.iter().map(|it| it.truth.max()).fold(0.0, f64::max);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        }
    };

    let (mut logits, fixed) = match &choice {
        MaskChoice::Learned => (Some(UnconstrainedMask::init(n, &mut root.child(STREAM_MASK_INIT).rng()).logits), None),
        MaskChoice::Fixed(p) => {
            if p.len() != n {
                return Err(Error::Shape(format!("mask has {} entries, images have {n} pixels", p.len())));
            }
            (None, Some(p.probs().to_vec()))
        }
    };
    let mut net_states: Vec<AdamState> = net
        .as_ref()
        .map(|nt| nt.params().iter().map(|p| AdamState::new(p.tensor.numel())).collect())
        .unwrap_or_default();
    let mut logit_state = AdamState::new(n);
    let mask_adam = AdamConfig {
        lr: cfg.mask_lr,
        ..cfg.adam
    };

    let mut losses = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut root.child(STREAM_SHUFFLE).child(epoch as u64).rng());
        for batch in order.chunks(cfg.batch_size) {
            if let Some(l) = &logits {
                let p = learned_probs(l, cfg.alpha)?;
                let mean = p.iter().sum::<f64>() / n as f64;
                if (mean - cfg.alpha).abs() > BUDGET_TOL || p.iter().any(|v| !(0.0..=1.0 + 1e-12).contains(v)) {
                    return Err(Error::Numerical(format!(
                        "budget violated at step {step}: mean(P) = {mean}, alpha = {}",
                        cfg.alpha
                    )));
                }
            }
            let stepper = Step {
                cfg,
                side,
                net: net.as_ref(),
                scale,
                logits: logits.as_deref(),
                fixed: fixed.as_deref(),
            };
            let weight = 1.0 / batch.len() as f64;
            let step_rng = root.child(STREAM_STEP).child(step as u64);
            let mut total_loss = 0.0;
            let mut g_logits = vec![0.0; n];
            let mut g_weights: Vec<Vec<f64>> = net_states.iter().map(|s| vec![0.0; s.m.len()]).collect();
            for &idx in batch {
                let mut rng = step_rng.child(idx as u64).rng();
                let grads = stepper.image(&sources[idx], &train[idx].truth, &mut rng, weight)?;
                total_loss += grads.loss;
                if let Some(gl) = &grads.logits {
                    add_into(&mut g_logits, gl);
                }
                for (acc, gw) in g_weights.iter_mut().zip(&grads.weights) {
                    add_into(acc, gw);
                }
            }
            let loss = total_loss * weight;
            if !loss.is_finite() {
                return Err(numerical_failure(step, epoch, loss, logits.as_deref(), cfg.alpha));
            }
            if let Some(l) = logits.as_mut() {
                adam_step(l, &g_logits, &mut logit_state, &mask_adam);
            }
            if let Some(nt) = net.as_mut() {
                for ((p, g), s) in nt.params_mut().iter_mut().zip(&g_weights).zip(&mut net_states) {
                    adam_step(p.tensor.data_mut(), g, s, &cfg.adam);
                }
            }
            losses.push(LossRecord { step, epoch, loss });
            step += 1;
        }
        if let Some(last) = losses.last() {
            log::info!("epoch {epoch}: loss {:.6}", last.loss);
        }
    }

    let mask = match (&logits, choice) {
        (Some(l), _) => {
            let p = learned_probs(l, cfg.alpha)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            ProbabilisticMask::with_tolerance(p, cfg.alpha, BUDGET_TOL)?
        }
        (None, MaskChoice::Fixed(p)) => p,
        (None, MaskChoice::Learned) => unreachable!(),
    };
    let recon = match net {
        None => Reconstructor::Identity,
        Some(net) => Reconstructor::UNet { net, scale },
    };
    Ok(TrainResult {
        mask,
        logits,
        recon,
        losses,
    })
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,epoch,loss\n");
    for r in losses {
        let _ = writeln!(out, "{},{},{}", r.step, r.epoch, r.loss);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reconstructor used at evaluation time.
#[derive(Debug, Clone, Copy)]
pub enum EvalRecon<'a> {
    Net(&'a Reconstructor),
    /// The mask is binarized to its top-α coefficients first.
    Tvw(&'a TvwConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub s_total: usize,
    pub source: SourceMode,
    pub seed: u64,
    /// PSNR peak; per-image ground-truth maximum when `None`.
    pub peak: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

/// Per-image metrics for one (mask, reconstructor) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mask: String,
    pub recon: String,
    pub rows: Vec<EvalRow>,
}

/// Mean and sample (n−1) standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn summary(&self) -> Summary {
        let psnr: Vec<f64> = self.rows.iter().map(|r| r.psnr_db).collect();
        let ssim: Vec<f64> = self.rows.iter().map(|r| r.ssim).collect();
        let (psnr_mean, psnr_std) = mean_std(&psnr);
        let (ssim_mean, ssim_std) = mean_std(&ssim);
        Summary {
            n: self.rows.len(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
        }
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("image_id,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.image_id, r.psnr_db, r.ssim);
        }
        out
    }

    pub fn write_rows_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.rows_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("mask,recon,n,psnr_mean,psnr_std,ssim_mean,ssim_std\n");
    for r in reports {
        let s = r.summary();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.mask, r.recon, s.n, s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std
        );
    }
    out
}

pub fn write_summary_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    fs::write(path, summary_csv(reports)).map_err(|e| Error::io(path, e))
}

/// Reconstruct every test item from a fresh, seeded mask realization and
/// score it against its ground truth.
pub fn evaluate(
    test: &[&Item],
    mask: &ProbabilisticMask,
    mask_label: &str,
    recon: EvalRecon<'_>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.s_total < 1 {
        return Err(Error::invalid("S must be at least 1"));
    }
    let mut rows = Vec::with_capacity(test.len());
    let binary = match recon {
        EvalRecon::Tvw(_) => {
            let side = test.first().map(|it| it.truth.side()).unwrap_or(0);
            if !mask.is_binary() {
                log::info!("binarizing mask `{mask_label}` to its top {} fraction for TV-W", mask.alpha());
            }
            Some(mask::binarize_top_percentile(mask, mask.alpha(), side)?)
        }
        EvalRecon::Net(_) => None,
    };
    let root = SeededRng::new(cfg.seed, STREAM_EVAL);
    for (k, it) in test.iter().enumerate() {
        let side = it.truth.side();
        if mask.len() != side * side {
            return Err(Error::Shape(format!(
                "mask has {} entries, image `{}` has {} pixels",
                mask.len(),
                it.id,
                side * side
            )));
        }
        let spec = HadamardSpec::image(side)?;
        let source = make_measurement_source(it, cfg.source)?;
        let mut rng = root.child(k as u64).rng();
        let x_hat = match (recon, &binary) {
            (EvalRecon::Tvw(tcfg), Some(b)) => {
                let z = sensing::sense_with(&source, &b.realization(cfg.s_total), &mut rng)?;
                tvw_reconstruct(&z, b, tcfg, &spec)?.image
            }
            (EvalRecon::Net(r), _) => {
                let m = mask::sample_hard(mask, cfg.s_total, &mut rng);
                let z = sensing::sense_with(&source, &m, &mut rng)?;
                r.apply(&sensing::to_image(&z, &spec)?)?
            }
            (EvalRecon::Tvw(_), None) => unreachable!(),
        };
        let res = metrics::evaluate_pair(&x_hat, &it.truth, cfg.peak)?;
        rows.push(EvalRow {
            image_id: it.id.clone(),
            psnr_db: res.psnr,
            ssim: res.ssim,
        });
    }
    let recon_label = match recon {
        EvalRecon::Net(r) => r.label(),
        EvalRecon::Tvw(_) => "tvw",
    };
    Ok(EvalReport {
        mask: mask_label.to_string(),
        recon: recon_label.to_string(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split, SynthKind};
    use crate::mask::MaskRealization;
    use crate::wht;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            s_total: 2,
            epochs: 2,
            batch_size: 4,
            recon: ReconKind::UNet(UNetConfig {
                levels: 1,
                base_channels: 4,
                ..UNetConfig::default()
            }),
            ..TrainConfig::default()
        }
    }

    fn items(count: usize, side: usize) -> Vec<Item> {
        synth_dataset(SynthKind::GaussianBlobs, count, side, 50.0, 3).unwrap().items
    }

    #[test]
    fn learned_training_is_reproducible_and_on_budget() {
        let data = items(6, 8);
        let refs: Vec<&Item> = data.iter().collect();
        let cfg = small_cfg();
        let a = train_joint(&refs, &cfg).unwrap();
        let b = train_joint(&refs, &cfg).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.mask, b.mask);
        assert!((a.mask.mean() - 0.25).abs() <= BUDGET_TOL);
        assert_eq!(a.losses.len(), 4);
        let c = train_joint(
            &refs,
            &TrainConfig {
                seed: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a.losses, c.losses);
    }

    #[test]
    fn full_budget_learned_equals_frozen() {
        let data = items(4, 8);
        let refs: Vec<&Item> = data.iter().collect();
        let cfg = TrainConfig {
            alpha: 1.0,
            ..small_cfg()
        };
        let learned = train_joint(&refs, &cfg).unwrap();
        assert!(learned.mask.probs().iter().all(|&p| p == 1.0));
        let ones = ProbabilisticMask::constant(64, 1.0).unwrap();
        let frozen = train_recon_only(&refs, &ones, &cfg).unwrap();
        assert_eq!(learned.losses, frozen.losses);
        assert_eq!(learned.recon, frozen.recon);
    }

    #[test]
    fn frozen_mask_training_reduces_loss() {
        let data = items(8, 8);
        let refs: Vec<&Item> = data.iter().collect();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 8,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..small_cfg()
        };
        let mask = ProbabilisticMask::constant(64, 0.25).unwrap();
        let res = train_recon_only(&refs, &mask, &cfg).unwrap();
        let first: f64 = res.losses[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        let last: f64 = res.losses[180..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn single_sample_loss_is_unbiased() {
        // N = 2 coefficients, S = 2: exhaustive expectation over 2^4 masks
        let p = [0.3, 0.8];
        let y = [1.5, 2.5, -1.0, 0.5];
        let target = [2.0, -0.2];
        let loss = |m: &[u8]| -> f64 {
            (0..2)
                .map(|i| {
                    let row = &m[2 * i..2 * i + 2];
                    let c: f64 = row.iter().map(|&v| v as f64).sum();
                    let z = if c > 0.0 {
                        row.iter().zip(&y[2 * i..2 * i + 2]).map(|(&a, b)| a as f64 * b).sum::<f64>() / c
                    } else {
                        0.0
                    };
                    (z - target[i]).powi(2)
                })
                .sum()
        };
        let mut exact = 0.0;
        for bits in 0..16u32 {
            let m: Vec<u8> = (0..4).map(|k| ((bits >> k) & 1) as u8).collect();
            let w: f64 = (0..4).map(|k| if m[k] == 1 { p[k / 2] } else { 1.0 - p[k / 2] }).product();
            exact += w * loss(&m);
        }
        let pm = ProbabilisticMask::with_tolerance(p.to_vec(), 0.55, 1e-12).unwrap();
        let mut rng = SeededRng::new(1, 0).rng();
        let trials = 10_000;
        let mut acc = 0.0;
        let mut sq = 0.0;
        for _ in 0..trials {
            let noise = mask::logistic_noise(4, &mut rng);
            let l = loss(&mask::hard_from_noise(pm.probs(), 2, &noise));
            acc += l;
            sq += l * l;
        }
        let mean = acc / trials as f64;
        let se = ((sq / trials as f64 - mean * mean) / trials as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} ± {se}");
    }

    fn toy_items() -> (Vec<Item>, [usize; 4]) {
        let side = 4;
        let spec = HadamardSpec::image(side).unwrap();
        let support = [0usize, 1, 4, 5];
        let mut rng = SeededRng::new(9, 0).rng();
        let items = (0..16)
            .map(|k| {
                let mut c = vec![0.0; 16];
                c[0] = 16.0 * 4.0;
                for &i in &support[1..] {
                    c[i] = 16.0 * rand::Rng::random_range(&mut rng, -1.0..1.0);
                }
                let x = Image::new(side, wht::wht_inverse(&c, &spec).unwrap()).unwrap();
                Item::from_image(format!("t{k}"), format!("t{k}"), Split::Train, x)
            })
            .collect();
        (items, support)
    }

    #[test]
    fn toy_mask_finds_the_support() {
        let (data, support) = toy_items();
        let refs: Vec<&Item> = data.iter().collect();
        let cfg = TrainConfig {
            s_total: 1,
            epochs: 250,
            batch_size: 8,
            mask_lr: 0.05,
            source: SourceMode::Simulated(NoiseModel::Noiseless),
            recon: ReconKind::Identity,
            ..TrainConfig::default()
        };
        let res = train_joint(&refs, &cfg).unwrap();
        assert_eq!(res.losses.len(), 500);
        let total: f64 = res.mask.probs().iter().sum();
        let on: f64 = support.iter().map(|&i| res.mask.probs()[i]).sum();
        assert!(on / total > 0.8, "support mass {}", on / total);
    }

    #[test]
    fn evaluation_perfect_reconstruction() {
        let data = items(3, 16);
        let refs: Vec<&Item> = data.iter().collect();
        let full = ProbabilisticMask::constant(256, 1.0).unwrap();
        let cfg = EvalConfig {
            s_total: 2,
            source: SourceMode::Simulated(NoiseModel::Noiseless),
            seed: 0,
            peak: None,
        };
        let rep = evaluate(&refs, &full, "full", EvalRecon::Net(&Reconstructor::Identity), &cfg).unwrap();
        for r in &rep.rows {
            assert!(r.psnr_db > 250.0 || r.psnr_db.is_infinite(), "{}", r.psnr_db);
            assert!((r.ssim - 1.0).abs() < 1e-9);
        }
        let rep_tvw = evaluate(
            &refs,
            &full,
            "full",
            EvalRecon::Tvw(&TvwConfig {
                lambda_tv: 0.0,
                lambda_w: 0.0,
                ..TvwConfig::default()
            }),
            &cfg,
        )
        .unwrap();
        assert_eq!(rep_tvw.recon, "tvw");
        assert!(rep_tvw.rows.iter().all(|r| r.psnr_db > 200.0));
    }

    #[test]
    fn identical_images_give_inf_and_one() {
        let x = Image::new(16, (0..256).map(|v| v as f64).collect()).unwrap();
        let r = metrics::evaluate_pair(&x, &x, None).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert_eq!(r.ssim, 1.0);
    }

    #[test]
    fn report_aggregates_recompute_from_rows() {
        let rep = EvalReport {
            mask: "U".into(),
            recon: "unet".into(),
            rows: vec![
                EvalRow {
                    image_id: "a".into(),
                    psnr_db: 20.123456789,
                    ssim: 0.5,
                },
                EvalRow {
                    image_id: "b".into(),
                    psnr_db: 25.0,
                    ssim: 0.75,
                },
                EvalRow {
                    image_id: "c".into(),
                    psnr_db: 22.2,
                    ssim: 0.6,
                },
            ],
        };
        let csv = rep.rows_csv();
        let parsed: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        let (m, s) = mean_std(&parsed);
        let sum = rep.summary();
        assert_eq!(m, sum.psnr_mean);
        assert_eq!(s, sum.psnr_std);
        assert!(summary_csv(&[rep]).starts_with("mask,recon,n,"));
    }

    #[test]
    fn reconstructor_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let net = UNet::new(UNetConfig::default(), &mut SeededRng::new(0, 0).rng()).unwrap();
        let r = Reconstructor::UNet { net, scale: 42.0 };
        let p = dir.path().join("r.ckpt");
        r.save(&p).unwrap();
        assert_eq!(Reconstructor::load(&p).unwrap(), r);
        Reconstructor::Identity.save(&p).unwrap();
        assert_eq!(Reconstructor::load(&p).unwrap(), Reconstructor::Identity);
    }

    #[test]
    fn config_validation() {
        let data = items(2, 8);
        let refs: Vec<&Item> = data.iter().collect();
        for bad in [
            TrainConfig {
                alpha: 0.0,
                ..small_cfg()
            },
            TrainConfig {
                tau: 0.0,
                ..small_cfg()
            },
            TrainConfig {
                s_total: 0,
                ..small_cfg()
            },
        ] {
            assert!(train_joint(&refs, &bad).is_err());
        }
        assert!(train_joint(&[], &small_cfg()).is_err());
        let wrong = ProbabilisticMask::constant(16, 0.25).unwrap();
        assert!(train_recon_only(&refs, &wrong, &small_cfg()).is_err());
    }

    #[test]
    fn fixed_realization_helper_matches_binary_mask() {
        let b = crate::mask::BinaryMask::from_bits(vec![true, false, true]);
        let r: MaskRealization = b.realization(2);
        assert_eq!(r.indicators(), &[1, 1, 0, 0, 1, 1]);
    }
}
