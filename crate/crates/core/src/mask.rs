//! Probabilistic sensing masks.
//!
//! A mask assigns each Hadamard coefficient an inclusion probability `Pᵢ`.
//! During acquisition each of the `S` candidate measurements of coefficient
//! `i` is kept with probability `Pᵢ`, so the expected number of measurements
//! is `α·N·S` when `mean(P) = α`. All masks index coefficients in natural
//! order; 2D-sequency order is only used for baseline construction,
//! tie-breaking and display.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::Open01;

use crate::error::{check_len, Error, Result};
use crate::raster::{self, Cursor};
use crate::wht::{self, HadamardSpec, Ordering};

/// Clamp applied to probabilities before taking logits.
pub const PROB_EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Mask before the budget constraint, `p̃ᵢ = sigmoid(logitᵢ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedMask {
    pub logits: Vec<f64>,
}

impl UnconstrainedMask {
    /// Logits i.i.d. uniform in `[-0.5, 0.5]`.
    pub fn init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        UnconstrainedMask {
            logits: (0..n).map(|_| rng.random_range(-0.5..=0.5)).collect(),
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

/// Inclusion probabilities with `mean(probs) = alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticMask {
    probs: Vec<f64>,
    alpha: f64,
}

impl ProbabilisticMask {
    /// Validates entries in `[0, 1]` and the budget mean to `tol`.
    pub fn with_tolerance(probs: Vec<f64>, alpha: f64, tol: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty mask"));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("mask probability {p} outside [0, 1]")));
        }
        let mean = probs.iter().sum::<f64>() / probs.len() as f64;
        if (mean - alpha).abs() > tol {
            return Err(Error::invalid(format!("mask mean {mean} does not match alpha {alpha}")));
        }
        Ok(ProbabilisticMask { probs, alpha })
    }

    pub fn new(probs: Vec<f64>, alpha: f64) -> Result<Self> {
        Self::with_tolerance(probs, alpha, 1e-9)
    }

    pub fn constant(n: usize, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Self::new(vec![alpha; n], alpha)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().sum::<f64>() / self.probs.len() as f64
    }
}

/// A deterministic include/skip decision per coefficient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        BinaryMask { bits }
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    /// Every measurement of a selected coefficient is taken.
    pub fn realization(&self, s_total: usize) -> MaskRealization {
        let indicators = self
            .bits
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b as u8, s_total))
            .collect();
        MaskRealization {
            n: self.bits.len(),
            s: s_total,
            indicators,
            soft: None,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_probabilistic(&self) -> ProbabilisticMask {
        let probs: Vec<f64> = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let alpha = self.count() as f64 / self.len() as f64;
        ProbabilisticMask { probs, alpha }
    }
}

/// Binary inclusion indicators `Mᵢ⁽ˢ⁾`, row-major `N × S`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRealization {
    n: usize,
    s: usize,
    indicators: Vec<u8>,
    soft: Option<Vec<f64>>,
}

impl MaskRealization {
    pub fn from_indicators(n: usize, s: usize, indicators: Vec<u8>) -> Result<Self> {
        check_len(n * s, indicators.len())?;
        if indicators.iter().any(|&m| m > 1) {
            return Err(Error::invalid("indicators must be 0 or 1"));
        }
        Ok(MaskRealization {
            n,
            s,
            indicators,
            soft: None,
        })
    }

    /// Every measurement of every coefficient included.
    pub fn full(n: usize, s: usize) -> Self {
        MaskRealization {
            n,
            s,
            indicators: vec![1; n * s],
            soft: None,
        }
    }

    pub fn empty(n: usize, s: usize) -> Self {
        MaskRealization {
            n,
            s,
            indicators: vec![0; n * s],
            soft: None,
        }
    }

    pub fn coefficients(&self) -> usize {
        self.n
    }

    pub fn measurements(&self) -> usize {
        self.s
    }

    pub fn indicators(&self) -> &[u8] {
        &self.indicators
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.indicators[i * self.s..(i + 1) * self.s]
    }

    pub fn soft(&self) -> Option<&[f64]> {
        self.soft.as_deref()
    }

    pub fn count(&self, i: usize) -> u32 {
        self.row(i).iter().map(|&m| m as u32).sum()
    }

    pub fn total(&self) -> usize {
        self.indicators.iter().map(|&m| m as usize).sum()
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must be in (0, 1], got {alpha}")))
    }
}

/// Closed-form budget projection of `p̃ ∈ [0,1]^N` onto `mean = α`.
///
/// With `p̄ = mean(p̃)`: if `p̄ ≥ α` scale down, `P = (α/p̄)·p̃`; otherwise
/// scale the complement, `P = 1 − ((1−α)/(1−p̄))·(1−p̃)`.
pub fn normalize_probs(p: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if p.is_empty() {
        return Err(Error::invalid("empty mask"));
    }
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    Ok(if mean >= alpha {
        let s = alpha / mean;
        p.iter().map(|&v| s * v).collect()
    } else {
        let s = (1.0 - alpha) / (1.0 - mean);
        p.iter().map(|&v| 1.0 - s * (1.0 - v)).collect()
    })
}

/// Vector-Jacobian product of [`normalize_probs`]: maps `∂L/∂P` to `∂L/∂p̃`.
/// At `p̄ = α` exactly the scaling branch is used.
pub fn normalize_probs_backward(p: &[f64], alpha: f64, grad_out: &[f64]) -> Vec<f64> {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    if mean >= alpha {
        let s = alpha / mean;
        let coupling = alpha * grad_out.iter().zip(p).map(|(g, v)| g * v).sum::<f64>() / (n * mean * mean);
        grad_out.iter().map(|g| s * g - coupling).collect()
    } else {
        let s = (1.0 - alpha) / (1.0 - mean);
        let coupling =
            (1.0 - alpha) * grad_out.iter().zip(p).map(|(g, v)| g * (1.0 - v)).sum::<f64>()
                / (n * (1.0 - mean) * (1.0 - mean));
        grad_out.iter().map(|g| s * g - coupling).collect()
    }
}

pub fn normalize_mask(p: &UnconstrainedMask, alpha: f64) -> Result<ProbabilisticMask> {
    let probs = normalize_probs(&p.probs(), alpha)?;
    // Round-off only; the projection is exact in real arithmetic.
    let probs = probs.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    ProbabilisticMask::new(probs, alpha)
}

/// Independent Bernoulli(`Pᵢ`) draws for every coefficient and measurement.
pub fn sample_hard<R: Rng + ?Sized>(mask: &ProbabilisticMask, s_total: usize, rng: &mut R) -> MaskRealization {
    let n = mask.len();
    let mut indicators = Vec::with_capacity(n * s_total);
    for &p in mask.probs() {
        for _ in 0..s_total {
            let u: f64 = rng.random();
            indicators.push(u8::from(u < p));
        }
    }
    MaskRealization {
        n,
        s: s_total,
        indicators,
        soft: None,
    }
}

/// Logistic noise `logit(u)`, `u ~ Uniform(0, 1)`, one per mask entry.
pub fn logistic_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            logit(u)
        })
        .collect()
}

/// Relaxed samples `sigmoid((logit(Pᵢ) + noise)/τ)` for an `N × S` noise
/// matrix, with `Pᵢ` clamped to `[ε, 1−ε]`.
pub fn relaxed_sample(probs: &[f64], s_total: usize, noise: &[f64], tau: f64) -> Vec<f64> {
    let mut soft = Vec::with_capacity(noise.len());
    for (i, &p) in probs.iter().enumerate() {
        let l = logit(p.clamp(PROB_EPS, 1.0 - PROB_EPS));
        for &g in &noise[i * s_total..(i + 1) * s_total] {
            soft.push(sigmoid((l + g) / tau));
        }
    }
    soft
}

/// Hard indicators for the same noise: `1[logit(Pᵢ) + noise > 0]`, i.e. a
/// Bernoulli(`Pᵢ`) draw. Probabilities of exactly 0 or 1 are honoured
/// rather than clamped. Equals `1[soft > 0.5]` for any temperature.
pub fn hard_from_noise(probs: &[f64], s_total: usize, noise: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(noise.len());
    for (i, &p) in probs.iter().enumerate() {
        let row = &noise[i * s_total..(i + 1) * s_total];
        if p >= 1.0 || p <= 0.0 {
            out.extend(std::iter::repeat_n(u8::from(p >= 1.0), s_total));
            continue;
        }
        let l = logit(p.clamp(PROB_EPS, 1.0 - PROB_EPS));
        out.extend(row.iter().map(|&g| u8::from(l + g > 0.0)));
    }
    out
}

/// Straight-through Gumbel-Softmax realization: indicators `1[soft > 0.5]`
/// with the relaxed sample retained for gradient propagation.
pub fn sample_gumbel_st<R: Rng + ?Sized>(
    mask: &ProbabilisticMask,
    s_total: usize,
    tau: f64,
    rng: &mut R,
) -> Result<MaskRealization> {
    check_tau(tau)?;
    let noise = logistic_noise(mask.len() * s_total, rng);
    Ok(gumbel_from_noise(mask.probs(), s_total, &noise, tau))
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be > 0, got {tau}")))
    }
}

pub(crate) fn gumbel_from_noise(probs: &[f64], s_total: usize, noise: &[f64], tau: f64) -> MaskRealization {
    let soft = relaxed_sample(probs, s_total, noise, tau);
    let indicators = hard_from_noise(probs, s_total, noise);
    MaskRealization {
        n: probs.len(),
        s: s_total,
        indicators,
        soft: Some(soft),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Random,
    LowSequency,
    HalfHalf,
    Uniform,
}

impl BaselineKind {
    pub fn code(self) -> &'static str {
        match self {
            BaselineKind::Random => "R",
            BaselineKind::LowSequency => "LS",
            BaselineKind::HalfHalf => "HH",
            BaselineKind::Uniform => "U",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" | "random" => Ok(BaselineKind::Random),
            "LS" | "low_sequency" => Ok(BaselineKind::LowSequency),
            "HH" | "half_half" => Ok(BaselineKind::HalfHalf),
            "U" | "uniform" => Ok(BaselineKind::Uniform),
            other => Err(Error::invalid(format!("unknown baseline mask `{other}`"))),
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Number of coefficients a binary mask with budget `alpha` selects.
fn budget_count(alpha: f64, n: usize) -> Result<usize> {
    let exact = alpha * n as f64;
    let k = exact.round();
    if (exact - k).abs() > 1e-9 {
        return Err(Error::invalid(format!("alpha·N = {exact} is not an integer")));
    }
    if k < 1.0 {
        return Err(Error::invalid(format!("alpha·N = {exact} selects no coefficients")));
    }
    Ok(k as usize)
}

/// Baseline masks for an `n × n` image.
///
/// * `Random`: `αN` coefficients chosen uniformly.
/// * `LowSequency`: the `αN` lowest in 2D-sequency order.
/// * `HalfHalf`: the `⌈αN/2⌉` lowest-sequency coefficients plus `⌊αN/2⌋`
///   drawn uniformly from the rest.
/// * `Uniform`: every entry `α`.
pub fn baseline_mask<R: Rng + ?Sized>(
    kind: BaselineKind,
    alpha: f64,
    side: usize,
    rng: &mut R,
) -> Result<ProbabilisticMask> {
    check_alpha(alpha)?;
    let spec = HadamardSpec::image(side)?;
    let n = spec.len();
    if kind == BaselineKind::Uniform {
        if alpha * (n as f64) < 1.0 {
            return Err(Error::invalid("alpha·N < 1"));
        }
        return ProbabilisticMask::constant(n, alpha);
    }
    let k = budget_count(alpha, n)?;
    let order = wht::sequency_order_2d(side);
    let mut probs = vec![0.0; n];
    match kind {
        BaselineKind::Random => {
            for i in index::sample(rng, n, k) {
                probs[i] = 1.0;
            }
        }
        BaselineKind::LowSequency => {
            for &i in &order[..k] {
                probs[i] = 1.0;
            }
        }
        BaselineKind::HalfHalf => {
            let low = k.div_ceil(2);
            for &i in &order[..low] {
                probs[i] = 1.0;
            }
            let rest = &order[low..];
            for j in index::sample(rng, rest.len(), k - low) {
                probs[rest[j]] = 1.0;
            }
        }
        BaselineKind::Uniform => unreachable!(),
    }
    ProbabilisticMask::new(probs, alpha)
}

/// Keep the `⌈αN⌉` most probable coefficients; ties go to the lower
/// 2D-sequency rank.
pub fn binarize_top_percentile(mask: &ProbabilisticMask, alpha: f64, side: usize) -> Result<BinaryMask> {
    check_len(side * side, mask.len())?;
    let n = mask.len();
    let k = ((alpha * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let rank = wht::sequency_rank_2d(side);
    let mut idx: Vec<usize> = (0..n).collect();
    let p = mask.probs();
    idx.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(rank[i].cmp(&rank[j])));
    let mut bits = vec![false; n];
    for &i in &idx[..k.min(n)] {
        bits[i] = true;
    }
    Ok(BinaryMask { bits })
}

/// Fraction of the mask's total probability mass that falls in the lowest
/// `fraction` of coefficients by 2D-sequency rank.
pub fn low_sequency_mass_fraction(mask: &ProbabilisticMask, side: usize, fraction: f64) -> f64 {
    let order = wht::sequency_order_2d(side);
    let band = ((order.len() as f64) * fraction).round() as usize;
    let total: f64 = mask.probs().iter().sum();
    let low: f64 = order[..band].iter().map(|&i| mask.probs()[i]).sum();
    low / total
}

/// Header of the mask raster container.
pub const MASK_MAGIC: &[u8; 8] = b"CSFMMSK1";

/// Textual sidecar describing a mask raster.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskManifest {
    pub coefficients: usize,
    pub side: usize,
    pub alpha: f64,
    pub ordering: Ordering,
    pub kind: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Write `mask` as magic + `N` f32 LE probabilities in natural order, with a
/// `key=value` sidecar at `<path>.manifest`.
pub fn write_mask(path: &Path, mask: &ProbabilisticMask, side: usize, kind: &str) -> Result<()> {
    check_len(side * side, mask.len())?;
    let mut bytes = Vec::with_capacity(8 + 4 * mask.len());
    bytes.extend_from_slice(MASK_MAGIC);
    for &p in mask.probs() {
        bytes.extend_from_slice(&(p as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let manifest = format!(
        "coefficients={}\nside={}\nalpha={}\nordering=natural\nkind={}\n",
        mask.len(),
        side,
        mask.alpha(),
        kind
    );
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

pub fn read_mask(path: &Path) -> Result<(ProbabilisticMask, MaskManifest)> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: malformed line `{line}`", mpath.display())))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Format(format!("{}: missing `{key}`", mpath.display())))
    };
    let parse_err = |key: &str| Error::Format(format!("{}: bad value for `{key}`", mpath.display()));
    let manifest = MaskManifest {
        coefficients: get("coefficients")?.parse().map_err(|_| parse_err("coefficients"))?,
        side: get("side")?.parse().map_err(|_| parse_err("side"))?,
        alpha: get("alpha")?.parse().map_err(|_| parse_err("alpha"))?,
        ordering: get("ordering")?.parse()?,
        kind: get("kind")?,
    };
    if manifest.side * manifest.side != manifest.coefficients {
        return Err(Error::Format(format!("{}: side² != coefficients", mpath.display())));
    }

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);
    cur.magic(MASK_MAGIC)?;
    let values = cur.f32s(manifest.coefficients)?;
    cur.finish()?;
    let mut probs: Vec<f64> = values.into_iter().map(f64::from).collect();
    if manifest.ordering == Ordering::Sequency {
        let order = wht::sequency_order_2d(manifest.side);
        let mut natural = vec![0.0; probs.len()];
        for (k, &i) in order.iter().enumerate() {
            natural[i] = probs[k];
        }
        probs = natural;
    }
    // f32 storage keeps the budget to roughly single precision.
    let mask = ProbabilisticMask::with_tolerance(probs, manifest.alpha, 1e-6)?;
    Ok((mask, manifest))
}

/// 8-bit display raster of `mask` in 2D-sequency layout: pixel `(r, c)` shows
/// the coefficient whose row and column sequencies are `r` and `c`, so low
/// sequency sits top-left.
pub fn render_sequency_image(mask: &ProbabilisticMask, side: usize) -> Result<Vec<u8>> {
    check_len(side * side, mask.len())?;
    let perm = wht::sequency_permutation(side);
    let mut out = Vec::with_capacity(mask.len());
    for &r in &perm {
        for &c in &perm {
            let p = mask.probs()[r * side + c];
            out.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn write_mask_pgm(path: &Path, mask: &ProbabilisticMask, side: usize) -> Result<()> {
    let pixels = render_sequency_image(mask, side)?;
    raster::write_pgm8(path, side, side, &pixels)
}
