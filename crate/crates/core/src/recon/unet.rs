//! Convolutional encoder-decoder reconstructor.

use std::path::Path;

use rand::Rng;

use crate::diff::{read_checkpoint, write_checkpoint, Graph, NamedTensor, Tensor, Var};
use crate::error::{Error, Result};
use crate::raster::Image;

const CONFIG_TENSOR: &str = "unet.config";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    /// Number of 2× downsamplings. `0` is a single 1×1 convolution.
    pub levels: usize,
    pub base_channels: usize,
    /// Channel multiplier per level.
    pub growth: usize,
    pub skip: bool,
    /// Add the input field to the network output.
    pub residual: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 2,
            base_channels: 16,
            growth: 2,
            skip: true,
            residual: true,
        }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<()> {
        if self.levels > 0 && (self.base_channels == 0 || self.growth == 0) {
            return Err(Error::invalid("unet channels and growth must be positive"));
        }
        if self.levels > 8 {
            return Err(Error::invalid(format!("unet depth {} is unreasonably large", self.levels)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.growth.pow(level as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    params: Vec<NamedTensor>,
}

fn conv_init<R: Rng + ?Sized>(name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut R) -> [NamedTensor; 2] {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    let w = (0..c_out * c_in * k * k).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..c_out).map(|_| rng.random_range(-bound..bound)).collect();
    [
        NamedTensor {
            name: format!("{name}.weight"),
            tensor: Tensor::new(vec![c_out, c_in, k, k], w).unwrap(),
        },
        NamedTensor {
            name: format!("{name}.bias"),
            tensor: Tensor::new(vec![c_out], b).unwrap(),
        },
    ]
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        if config.levels == 0 {
            params.push(NamedTensor {
                name: "out.weight".into(),
                tensor: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            });
            params.push(NamedTensor {
                name: "out.bias".into(),
                tensor: Tensor::zeros(vec![1]),
            });
            return Ok(UNet { config, params });
        }
        let mut c_prev = 1;
        for l in 0..config.levels {
            let c = config.channels(l);
            params.extend(conv_init(&format!("enc{l}.conv1"), c, c_prev, 3, rng));
            params.extend(conv_init(&format!("enc{l}.conv2"), c, c, 3, rng));
            c_prev = c;
        }
        let cb = config.channels(config.levels);
        params.extend(conv_init("mid.conv1", cb, c_prev, 3, rng));
        params.extend(conv_init("mid.conv2", cb, cb, 3, rng));
        for l in (0..config.levels).rev() {
            let c = config.channels(l);
            params.extend(conv_init(&format!("dec{l}.up"), c, config.channels(l + 1), 3, rng));
            let c_cat = if config.skip { 2 * c } else { c };
            params.extend(conv_init(&format!("dec{l}.conv1"), c, c_cat, 3, rng));
            params.extend(conv_init(&format!("dec{l}.conv2"), c, c, 3, rng));
        }
        params.extend(conv_init("out", 1, config.channels(0), 1, rng));
        Ok(UNet { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.config.levels;
        if h != w || h % div != 0 || h == 0 {
            return Err(Error::Shape(format!(
                "unet input {h}x{w} must be square with side divisible by {div}"
            )));
        }
        Ok(())
    }

    /// Bind the weights as graph leaves (trainable or constant) in parameter
    /// order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.tensor.clone(), trainable)).collect()
    }

    /// Forward pass of a `[1, h, w]` input using weights bound by [`UNet::bind`].
    pub fn forward(&self, g: &mut Graph, weights: &[Var], input: Var) -> Result<Var> {
        let s = g.shape(input).to_vec();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Shape(format!("unet input must be [1, h, w], got {s:?}")));
        }
        self.check_input(s[1], s[2])?;
        if weights.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} weights bound, network has {}",
                weights.len(),
                self.params.len()
            )));
        }
        let mut next = weights.iter().copied();
        let mut conv = |g: &mut Graph, x: Var, relu: bool| -> Result<Var> {
            let w = next.next().expect("weight count checked");
            let b = next.next().expect("weight count checked");
            let y = g.conv2d(x, w, Some(b))?;
            Ok(if relu { g.relu(y) } else { y })
        };

        if self.config.levels == 0 {
            let out = conv(g, input, false)?;
            return if self.config.residual { g.add(out, input) } else { Ok(out) };
        }
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut x = input;
        for _ in 0..self.config.levels {
            x = conv(g, x, true)?;
            x = conv(g, x, true)?;
            skips.push(x);
            x = g.max_pool2(x)?;
        }
        x = conv(g, x, true)?;
        x = conv(g, x, true)?;
        for skip in skips.into_iter().rev() {
            let up = g.upsample2(x)?;
            x = conv(g, up, true)?;
            if self.config.skip {
                x = g.concat(skip, x)?;
            }
            x = conv(g, x, true)?;
            x = conv(g, x, true)?;
        }
        let out = conv(g, x, false)?;
        if self.config.residual {
            g.add(out, input)
        } else {
            Ok(out)
        }
    }

    pub fn infer(&self, input: &Image) -> Result<Image> {
        let mut g = Graph::new();
        let w = self.bind(&mut g, false);
        let side = input.side();
        let x = g.constant(Tensor::new(vec![1, side, side], input.data().to_vec())?);
        let y = self.forward(&mut g, &w, x)?;
        Image::new(side, g.value(y).data().to_vec())
    }

    fn config_tensor(&self) -> NamedTensor {
        let c = &self.config;
        NamedTensor {
            name: CONFIG_TENSOR.into(),
            tensor: Tensor::vector(vec![
                c.levels as f64,
                c.base_channels as f64,
                c.growth as f64,
                c.skip as u8 as f64,
                c.residual as u8 as f64,
            ]),
        }
    }

    /// All weights plus the architecture as a leading `unet.config` tensor.
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = vec![self.config_tensor()];
        out.extend(self.params.iter().cloned());
        out
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let cfg = it
            .next()
            .filter(|t| t.name == CONFIG_TENSOR && t.tensor.numel() == 5)
            .ok_or_else(|| Error::Format("checkpoint lacks a unet.config tensor".into()))?;
        let v = cfg.tensor.data();
        let config = UNetConfig {
            levels: v[0] as usize,
            base_channels: v[1] as usize,
            growth: v[2] as usize,
            skip: v[3] != 0.0,
            residual: v[4] != 0.0,
        };
        // shapes come from a reference build
        let reference = UNet::new(config, &mut crate::noise::SeededRng::new(0, 0).rng())?;
        let params: Vec<NamedTensor> = it.collect();
        if params.len() != reference.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} weight tensors, architecture needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (p, r) in params.iter().zip(&reference.params) {
            if p.name != r.name || p.tensor.shape() != r.tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor `{}` {:?} does not match `{}` {:?}",
                    p.name,
                    p.tensor.shape(),
                    r.name,
                    r.tensor.shape()
                )));
            }
        }
        Ok(UNet { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(read_checkpoint(path)?)
    }
}
