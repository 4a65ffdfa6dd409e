//! Mini GCResNet (deblurring) and GCEDSR (super-resolution).

mod arch;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::gcfeat::GcStackConfig;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::wsgraph::{derived_seed, ws_generate, Aggregator, Graph};

pub use arch::Arch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Deblur,
    Sr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    pub image_channels: usize,
    /// Feature width everywhere; also the node count of the graph.
    pub channels: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Total SR body blocks, split evenly around the GC stack.
    pub sr_blocks: usize,
    /// `None` replaces the GC stack with the identity.
    pub gc: Option<GcStackConfig>,
    pub scale: usize,
    /// Adds the input to the output; deblurring only.
    pub global_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::mini_deblur()
    }
}

impl ModelConfig {
    pub fn mini_deblur() -> Self {
        Self {
            task: Task::Deblur,
            image_channels: 3,
            channels: 32,
            enc_blocks: 3,
            dec_blocks: 3,
            sr_blocks: 8,
            gc: Some(GcStackConfig::default()),
            scale: 1,
            global_skip: true,
        }
    }

    pub fn mini_sr(scale: usize) -> Self {
        Self {
            task: Task::Sr,
            scale,
            gc: Some(GcStackConfig {
                degree: 2,
                ..GcStackConfig::default()
            }),
            global_skip: false,
            ..Self::mini_deblur()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config(format!(
                "image_channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if let Some(gc) = &self.gc {
            gc.validate()?;
            if gc.degree >= self.channels {
                return Err(Error::TooDense {
                    n: self.channels,
                    k: gc.degree,
                });
            }
            if gc.degree < 2 {
                return Err(Error::Config("graph degree must be at least 2".into()));
            }
        }
        if self.task == Task::Sr && !matches!(self.scale, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "SR scale must be 1, 2, 4 or 8, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Output size over input size.
    pub fn magnification(&self) -> usize {
        match self.task {
            Task::Deblur => 1,
            Task::Sr => self.scale,
        }
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.task {
            Task::Deblur => 4,
            Task::Sr => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One row of [`describe`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    /// Spatial size relative to the input, e.g. `1/4` or `x2`.
    pub resolution: String,
    pub params: usize,
}

/// Exact trainable scalar count.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    let (_, specs, _) = arch::build(cfg)?;
    Ok(specs.iter().map(ParamSpec::numel).sum())
}

/// Human-readable layer table ending in a `total` row.
pub fn describe(cfg: &ModelConfig) -> Result<String> {
    let (_, specs, rows) = arch::build(cfg)?;
    let total: usize = specs.iter().map(ParamSpec::numel).sum();
    let title = match cfg.task {
        Task::Deblur => "GCResNet".to_string(),
        Task::Sr => format!("GCEDSR x{}", cfg.scale),
    };
    let mut s = format!(
        "{title}\n{:<10} {:<44} {:>6} {:>10}\n",
        "layer", "kind", "res", "params"
    );
    for r in &rows {
        writeln!(
            s,
            "{:<10} {:<44} {:>6} {:>10}",
            r.name, r.kind, r.resolution, r.params
        )
        .unwrap();
    }
    writeln!(s, "{:<10} {:<44} {:>6} {:>10}", "total", "", "", total).unwrap();
    Ok(s)
}

/// Uniform on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> Tensor<f32> {
    use rand::distributions::{Distribution, Uniform};
    let b = (6.0 / (fan_in.max(1) + fan_out.max(1)) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-b, b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
        .expect("shape matches count")
}

/// FNV-1a hash of a parameter name.
fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// A restoration network: architecture, its graph and its weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    graph: Option<Graph>,
    aggregator: Option<Aggregator>,
    arch: Arch,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<f32>>,
}

impl Model {
    /// Xavier weights and zero biases; the graph is generated from `config.gc`.
    /// Each tensor's stream is keyed by its name, so layers shared between
    /// two configurations start identical under the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let graph = match &config.gc {
            Some(gc) => Some(ws_generate(
                config.channels,
                gc.degree,
                gc.rho,
                gc.graph_seed,
            )?),
            None => None,
        };
        let (_, specs, _) = arch::build(&config)?;
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Xavier { fan_in, fan_out } => xavier_init(
                    &s.shape,
                    fan_in,
                    fan_out,
                    derived_seed(seed, name_key(&s.name)),
                ),
                Init::Zero => Tensor::zeros(&s.shape),
            })
            .collect();
        Self::from_parts(config, graph, params)
    }

    pub fn from_parts(
        config: ModelConfig,
        graph: Option<Graph>,
        params: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        let (arch, specs, _) = arch::build(&config)?;
        match (&config.gc, &graph) {
            (Some(gc), Some(g)) => {
                if g.n() != config.channels {
                    return Err(Error::Config(format!(
                        "graph has {} nodes but the model has {} channels",
                        g.n(),
                        config.channels
                    )));
                }
                if g.params().k != gc.degree {
                    return Err(Error::Config(format!(
                        "graph degree {} differs from configured {}",
                        g.params().k,
                        gc.degree
                    )));
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::Config(
                    "GC stack configured but no graph given".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::Config(
                    "graph given for a model without GC stack".into(),
                ))
            }
        }
        if params.len() != specs.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(Error::shape(
                    "model",
                    format!("{}: expected {:?}, got {:?}", s.name, s.shape, p.shape()),
                ));
            }
        }
        let aggregator = graph.as_ref().map(Aggregator::new);
        Ok(Self {
            config,
            graph,
            aggregator,
            arch,
            specs,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.graph.as_ref()
    }

    pub fn aggregator(&self) -> Option<&Aggregator> {
        self.aggregator.as_ref()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Parameters recorded on `tape` at precision `T`.
    pub fn bind<'t, T: Scalar>(&self, tape: &'t Tape<T>, trainable: bool) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| {
                let t = p.cast::<T>();
                if trainable {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect()
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        params: &[Var<'t, T>],
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let &[_, c, h, w] = shape.as_slice() else {
            return Err(Error::shape(
                "model",
                format!("expected [B, C, H, W] input, got {shape:?}"),
            ));
        };
        if c != self.config.image_channels {
            return Err(Error::shape(
                "model",
                format!(
                    "input has {c} channels, model expects {}",
                    self.config.image_channels
                ),
            ));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by {m}"
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Config(
                "parameter list does not match the model".into(),
            ));
        }
        let agg = self
            .aggregator
            .as_ref()
            .map(|a| tape.constant(a.to_tensor::<T>()));
        self.arch.forward(params, agg, x)
    }

    /// Full-image inference in `f32`. Deblur inputs whose sides are not
    /// multiples of 4 are mirror-padded and the output cropped back; the
    /// returned flag reports whether that happened.
    pub fn infer(&self, input: &Image) -> Result<(Image, bool)> {
        let m = self.config.size_multiple();
        let (w, h) = (input.width(), input.height());
        let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
        let padded = (pw, ph) != (w, h);
        let x = if padded {
            input.pad_to(pw, ph)
        } else {
            input.clone()
        };
        let tape = Tape::<f32>::new();
        let params = self.bind(&tape, false);
        let xv = tape.constant(x.to_tensor());
        let y = self.forward(&tape, &params, xv)?.value();
        let mut out = Image::from_tensor(&y, 0)?.clamp01();
        if padded {
            let s = self.config.magnification();
            out = out.crop(0, 0, w * s, h * s)?;
        }
        Ok((out, padded))
    }
}
