//! Flat `key = value` run configuration.
//!
//! Values are resolved in three layers: built-in defaults, then an optional
//! config file, then command-line flags. The resolved set is written to
//! `config.txt` in every output directory and can be fed back via `--config`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use csfm_core::data::SourceMode;
use csfm_core::diff::{AdamConfig, Denominator};
use csfm_core::noise::{NoiseModel, NoiseParams};
use csfm_core::recon::{TvwConfig, UNetConfig};
use csfm_core::train::{EvalConfig, ReconKind, TrainConfig};
use csfm_core::{Error, Result};

/// Every recognised key with its default. An empty default means "unset".
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    // dataset synthesis and preparation
    ("kind", "gaussian_blobs"),
    ("count", "64"),
    ("side", "32"),
    ("peak", "100"),
    ("train", "48"),
    ("val", "0"),
    ("test", "16"),
    ("grid", "256"),
    // sensing and noise
    ("alpha", "0.25"),
    ("s", "10"),
    ("mode", "simulated"),
    ("noise_a", "1"),
    ("noise_b", "0.01"),
    ("noiseless", "false"),
    ("denominator", "unit"),
    // training
    ("mask", "learned"),
    ("recon", "unet"),
    ("tau", "0.8"),
    ("lr", "0.002"),
    ("beta1", "0.9"),
    ("beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("mask_lr", "0.2"),
    ("epochs", "100"),
    ("batch", "4"),
    ("levels", "2"),
    ("base_channels", "16"),
    ("growth", "2"),
    ("skip", "true"),
    ("residual", "true"),
    ("intensity_scale", ""),
    // evaluation
    ("split", "test"),
    ("eval_seed", "1000"),
    ("psnr_peak", ""),
    ("lambda_tv", "0.01"),
    ("lambda_w", "0.001"),
    ("tvw_iters", "200"),
    ("tvw_inner", "30"),
    ("tvw_tol", "1e-7"),
    // rendering
    ("ordering", "2d-sequency"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn key_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    /// Parse config-file text: one `key = value` per line, `#` comments.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::invalid(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        if !key_known(&key) {
            return Err(Error::invalid(format!("unknown config key `{key}`")));
        }
        self.values.insert(key, value.to_string());
        Ok(())
    }

    /// Apply `key=value` strings from `--set`.
    pub fn apply_assignments(&mut self, items: &[String]) -> Result<()> {
        for item in items {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--set expects key=value, got `{item}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e| Error::invalid(format!("config `{key} = {v}`: {e}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// The resolved values of `keys`, one `key = value` line each.
    pub fn render(&self, keys: &[&str], extra: &[(&str, String)]) -> String {
        let mut out = String::new();
        for (k, v) in extra {
            let _ = writeln!(out, "# {k} = {v}");
        }
        for k in keys {
            let _ = writeln!(out, "{k} = {}", self.raw(k));
        }
        out
    }

    pub fn write(&self, dir: &Path, keys: &[&str], extra: &[(&str, String)]) -> Result<()> {
        let path = dir.join("config.txt");
        fs::write(&path, self.render(keys, extra)).map_err(|e| Error::io(&path, e))
    }

    pub fn source(&self) -> Result<SourceMode> {
        match self.raw("mode") {
            "raw" => Ok(SourceMode::Raw),
            "simulated" => {
                if self.get::<bool>("noiseless")? {
                    Ok(SourceMode::Simulated(NoiseModel::Noiseless))
                } else {
                    let params = NoiseParams::new(self.get("noise_a")?, self.get("noise_b")?)?;
                    Ok(SourceMode::Simulated(NoiseModel::PoissonGaussian(params)))
                }
            }
            other => Err(Error::invalid(format!("mode must be simulated or raw, got `{other}`"))),
        }
    }

    pub fn unet(&self) -> Result<UNetConfig> {
        Ok(UNetConfig {
            levels: self.get("levels")?,
            base_channels: self.get("base_channels")?,
            growth: self.get("growth")?,
            skip: self.get("skip")?,
            residual: self.get("residual")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let recon = match self.raw("recon") {
            "unet" => ReconKind::UNet(self.unet()?),
            "identity" => ReconKind::Identity,
            other => return Err(Error::invalid(format!("recon must be unet or identity for training, got `{other}`"))),
        };
        let denominator = match self.raw("denominator") {
            "unit" => Denominator::UnitFloor,
            "eps" => Denominator::Epsilon(1e-8),
            other => return Err(Error::invalid(format!("denominator must be unit or eps, got `{other}`"))),
        };
        let cfg = TrainConfig {
            alpha: self.get("alpha")?,
            s_total: self.get("s")?,
            tau: self.get("tau")?,
            adam: AdamConfig {
                lr: self.get("lr")?,
                beta1: self.get("beta1")?,
                beta2: self.get("beta2")?,
                eps: self.get("adam_eps")?,
            },
            mask_lr: self.get("mask_lr")?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch")?,
            seed: self.get("seed")?,
            source: self.source()?,
            denominator,
            recon,
            intensity_scale: self.get_opt("intensity_scale")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            s_total: self.get("s")?,
            source: self.source()?,
            seed: self.get("eval_seed")?,
            peak: self.get_opt("psnr_peak")?,
        })
    }

    pub fn tvw(&self) -> Result<TvwConfig> {
        Ok(TvwConfig {
            lambda_tv: self.get("lambda_tv")?,
            lambda_w: self.get("lambda_w")?,
            iters: self.get("tvw_iters")?,
            inner_iters: self.get("tvw_inner")?,
            tol: self.get("tvw_tol")?,
            ..TvwConfig::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_roundtrip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nalpha = 0.125\n\nepochs=3 # trailing\n", "test").unwrap();
        c.set("mask-lr", "0.5").unwrap();
        assert_eq!(c.get::<f64>("alpha").unwrap(), 0.125);
        assert_eq!(c.get::<usize>("epochs").unwrap(), 3);
        assert_eq!(c.get::<f64>("mask_lr").unwrap(), 0.5);
        let keys: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        let text = c.render(&keys, &[("data", "x".into())]);
        let mut d = RunConfig::default();
        d.apply_text(&text, "rendered").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("bogus = 1", "t").is_err());
        assert!(c.apply_text("alpha 0.3", "t").is_err());
        c.set("alpha", "abc").unwrap();
        assert!(c.train().is_err());
        c.set("alpha", "1.5").unwrap();
        assert!(c.train().is_err());
    }

    #[test]
    fn defaults_build_configs() {
        let c = RunConfig::default();
        let t = c.train().unwrap();
        assert_eq!(t.tau, 0.8);
        assert_eq!(t.intensity_scale, None);
        assert!(c.eval().unwrap().peak.is_none());
        assert_eq!(c.tvw().unwrap().iters, 200);
    }
}
