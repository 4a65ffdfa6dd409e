//! Finite-difference gradient audit of every differentiable op and of the
//! two tiny model configurations, in `f64`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gcfeat::{
    fmap_to_nodes, gc_stack_forward, graph_conv, nodes_to_fmap, resgcn_block, GcStackConfig,
};
use crate::models::{Model, ModelConfig};
use crate::tensor::gradcheck::grad_check_inputs;
use crate::tensor::{Tensor, Var};
use crate::wsgraph::{derived_seed, ws_generate, Aggregator};

/// Pass threshold on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;

/// Which coordinates of each input are perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    Full,
    /// Only model checks are sampled, this many coordinates per tensor.
    ModelProbes(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Gate: worst per-tensor normwise relative error.
    pub max_rel_err: f64,
    /// Worst single-coordinate relative error, for information; it is
    /// dominated by roundoff on coordinates whose gradient is near zero.
    pub max_elementwise: f64,
    /// `(analytic, numeric)` behind `max_elementwise`.
    pub worst: (f64, f64),
    pub seeds: usize,
    /// `all` or the number of probed coordinates per tensor.
    pub coverage: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

/// Uniform in `[-1, 1]` with magnitudes at least 0.05, so ReLU and |x|
/// kinks sit far from every finite-difference stencil.
fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches count")
}

type OutFn = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

/// Linear probe `<out - out0, r>` with fixed random `r` shaped like the
/// output and `out0` the output at the unperturbed inputs. Output gradients
/// are O(1), and centering keeps the summed terms O(eps) so central
/// differences do not cancel against a large loss value.
struct Probe {
    r: Tensor<f64>,
    g: OutFn,
}

type CenteredFn<'a> = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a>;

impl Probe {
    fn centered(&self, inputs: &[Tensor<f64>]) -> Result<CenteredFn<'_>> {
        let tape = crate::tensor::Tape::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let neg_out0 = (self.g)(&vars)?.value().map(|v| -v);
        Ok(Box::new(move |v| self.loss(&neg_out0, v)))
    }

    fn loss<'t>(&self, neg_out0: &Tensor<f64>, v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        let out = (self.g)(v)?;
        let n = out.value().numel();
        let tape = out.tape();
        let probe = tape.constant(self.r.clone().reshape(&[n, 1])?);
        let delta = out.add(tape.constant(neg_out0.clone()))?;
        Ok(delta.reshape(&[1, n])?.matmul(probe)?.sum())
    }
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    probe: Probe,
    is_model: bool,
}

fn against(
    r: Tensor<f64>,
    g: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
) -> Probe {
    Probe { r, g: Box::new(g) }
}

fn tiny_gc() -> GcStackConfig {
    GcStackConfig {
        f: 4,
        blocks: 1,
        ..GcStackConfig::default()
    }
}

/// Tiny GCResNet: 8 channels, 1/1 ResBlocks, F=4, one ResGCN block.
pub fn tiny_deblur_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        enc_blocks: 1,
        dec_blocks: 1,
        gc: Some(tiny_gc()),
        ..ModelConfig::mini_deblur()
    }
}

/// Tiny GCEDSR x2: 8 channels, 1+1 ResBlocks, F=4, one ResGCN block.
pub fn tiny_sr_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        sr_blocks: 2,
        gc: Some(GcStackConfig {
            degree: 2,
            ..tiny_gc()
        }),
        ..ModelConfig::mini_sr(2)
    }
}

fn model_case(
    name: &'static str,
    cfg: ModelConfig,
    hw: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let model = Model::new(cfg, seed)?;
    // Jitter every parameter, biases included, so no path starts dead.
    let mut inputs: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| {
            let noise = rand_tensor(p.shape(), rng);
            let data = p
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&w, &n)| w as f64 + 0.1 * n)
                .collect();
            Tensor::new(p.shape(), data).expect("same shape")
        })
        .collect();
    let c = model.config().image_channels;
    let s = model.config().magnification();
    inputs.push(rand_tensor(&[1, c, hw, hw], rng).map(|v| 0.5 + 0.4 * v));
    let target = rand_tensor(&[1, c, s * hw, s * hw], rng).map(|v| 0.5 + 0.4 * v);
    let f = against(target, move |v: &[Var<'_, f64>]| {
        let (params, x) = v.split_at(v.len() - 1);
        let tape = x[0].tape();
        model.forward(tape, params, x[0])
    });
    Ok(Case {
        name,
        inputs,
        probe: f,
        is_model: true,
    })
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut op = |name: &'static str, inputs: Vec<Tensor<f64>>, probe: Probe| {
        out.push(Case {
            name,
            inputs,
            probe,
            is_model: false,
        })
    };

    op(
        "add",
        vec![rand_tensor(&[2, 3], r), rand_tensor(&[2, 3], r)],
        against(rand_tensor(&[2, 3], r), |v| v[0].add(v[1])),
    );
    op(
        "scale",
        vec![rand_tensor(&[5], r)],
        against(rand_tensor(&[5], r), |v| Ok(v[0].scale(-1.7))),
    );
    op(
        "sum",
        vec![rand_tensor(&[3, 4], r)],
        against(Tensor::full(&[1], 1.0), |v| Ok(v[0].sum().scale(0.5))),
    );
    op(
        "relu",
        vec![rand_tensor(&[4, 5], r)],
        against(rand_tensor(&[4, 5], r), |v| Ok(v[0].relu())),
    );
    for (name, k, stride, bias) in [
        ("conv2d 3x3", 3, 1, true),
        ("conv2d 3x3 stride 2", 3, 2, true),
        ("conv2d 1x1 no bias", 1, 1, false),
    ] {
        let x = rand_tensor(&[2, 3, 6, 5], r);
        let w = rand_tensor(&[4, 3, k, k], r);
        let mut inputs = vec![x, w];
        if bias {
            inputs.push(rand_tensor(&[4], r));
        }
        let ho = (6 + 2 * (k / 2) - k) / stride + 1;
        let wo = (5 + 2 * (k / 2) - k) / stride + 1;
        let target = rand_tensor(&[2, 4, ho, wo], r);
        op(
            name,
            inputs,
            against(target, move |v| {
                v[0].conv2d(v[1], v.get(2).copied(), stride, k / 2)
            }),
        );
    }
    for (name, a, b, o) in [
        ("matmul 2x2", vec![3, 4], vec![4, 2], vec![3, 2]),
        ("matmul 3x2", vec![2, 3, 4], vec![4, 2], vec![2, 3, 2]),
        ("matmul 2x3", vec![3, 4], vec![2, 4, 2], vec![2, 3, 2]),
        ("matmul 3x3", vec![2, 3, 4], vec![2, 4, 2], vec![2, 3, 2]),
    ] {
        op(
            name,
            vec![rand_tensor(&a, r), rand_tensor(&b, r)],
            against(rand_tensor(&o, r), |v| v[0].matmul(v[1])),
        );
    }
    op(
        "reshape",
        vec![rand_tensor(&[2, 6], r)],
        against(rand_tensor(&[3, 4], r), |v| v[0].reshape(&[3, 4])),
    );
    op(
        "permute",
        vec![rand_tensor(&[2, 3, 4], r)],
        against(rand_tensor(&[4, 2, 3], r), |v| v[0].permute(&[2, 0, 1])),
    );
    op(
        "pixel_shuffle",
        vec![rand_tensor(&[1, 8, 2, 3], r)],
        against(rand_tensor(&[1, 2, 4, 6], r), |v| v[0].pixel_shuffle(2)),
    );
    op(
        "mse",
        vec![rand_tensor(&[3, 3], r), rand_tensor(&[3, 3], r)],
        against(Tensor::full(&[1], 1.0), |v| v[0].mse(v[1])),
    );
    op(
        "l1",
        vec![rand_tensor(&[3, 3], r), rand_tensor(&[3, 3], r)],
        against(Tensor::full(&[1], 1.0), |v| v[0].l1(v[1])),
    );

    let g = ws_generate(6, 2, 0.5, derived_seed(seed, 1))?;
    let agg = Aggregator::new(&g).to_tensor::<f64>();
    let fmap = [2, 6, 2, 3];
    {
        let agg = agg.clone();
        op(
            "fmap/node round trip",
            vec![rand_tensor(&fmap, r)],
            against(rand_tensor(&fmap, r), move |v| {
                let _ = &agg;
                nodes_to_fmap(fmap_to_nodes(v[0])?)
            }),
        );
    }
    for (name, fi, fo) in [("graph_conv lift", 1, 3), ("graph_conv project", 3, 1)] {
        let agg = agg.clone();
        let x = rand_tensor(&[12, 6, fi], r);
        op(
            name,
            vec![x, rand_tensor(&[fi, fo], r)],
            against(rand_tensor(&[12, 6, fo], r), move |v| {
                let a = v[0].tape().constant(agg.clone());
                let nt = crate::gcfeat::NodeTensor {
                    data: v[0],
                    origin_shape: [2, 6, 2, 3],
                };
                Ok(graph_conv(nt, a, v[1])?.data)
            }),
        );
    }
    {
        let agg = agg.clone();
        op(
            "resgcn_block",
            vec![
                rand_tensor(&[12, 6, 3], r),
                rand_tensor(&[3, 3], r),
                rand_tensor(&[3, 3], r),
            ],
            against(rand_tensor(&[12, 6, 3], r), move |v| {
                let a = v[0].tape().constant(agg.clone());
                let nt = crate::gcfeat::NodeTensor {
                    data: v[0],
                    origin_shape: [2, 6, 2, 3],
                };
                Ok(resgcn_block(nt, a, v[1], v[2])?.data)
            }),
        );
    }
    {
        let cfg = GcStackConfig {
            f: 3,
            blocks: 2,
            degree: 2,
            ..GcStackConfig::default()
        };
        let mut inputs = vec![rand_tensor(&fmap, r)];
        inputs.extend(cfg.weight_shapes().iter().map(|s| rand_tensor(s, r)));
        op(
            "gc_stack_forward",
            inputs,
            against(rand_tensor(&fmap, r), move |v| {
                let a = v[0].tape().constant(agg.clone());
                gc_stack_forward(v[0], &cfg, a, &v[1..])
            }),
        );
    }

    out.push(model_case(
        "GCResNet tiny",
        tiny_deblur_config(),
        8,
        seed,
        r,
    )?);
    out.push(model_case("GCEDSR x2 tiny", tiny_sr_config(), 4, seed, r)?);
    Ok(out)
}

/// Worst errors per check across `seeds`.
pub fn gradcheck_suite(seeds: &[u64], coverage: Coverage) -> Result<Vec<CheckResult>> {
    let mut results: Vec<CheckResult> = Vec::new();
    for &seed in seeds {
        for (i, case) in cases(seed)?.into_iter().enumerate() {
            let probe = match coverage {
                Coverage::ModelProbes(n) if case.is_model => {
                    Some((n, derived_seed(seed, i as u64)))
                }
                _ => None,
            };
            let rep =
                grad_check_inputs(case.probe.centered(&case.inputs)?, &case.inputs, EPS, probe)?;
            match results.iter_mut().find(|r| r.name == case.name) {
                Some(r) => {
                    r.max_rel_err = r.max_rel_err.max(rep.normwise);
                    if rep.elementwise > r.max_elementwise {
                        r.max_elementwise = rep.elementwise;
                        r.worst = rep.worst;
                    }
                    r.seeds += 1;
                }
                None => results.push(CheckResult {
                    name: case.name.to_string(),
                    max_rel_err: rep.normwise,
                    max_elementwise: rep.elementwise,
                    worst: rep.worst,
                    seeds: 1,
                    coverage: probe
                        .map_or_else(|| "all".to_string(), |(n, _)| format!("{n}/tensor")),
                }),
            }
        }
    }
    Ok(results)
}

/// Fixed-width table with a PASS/FAIL column. `rel err` is the gate.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!(
        "{:<24} {:>12} {:>12} {:>6} {:>9}  status\n",
        "check", "rel err", "max elem", "seeds", "coverage"
    );
    for r in results {
        writeln!(
            s,
            "{:<24} {:>12.3e} {:>12.3e} {:>6} {:>9}  {}",
            r.name,
            r.max_rel_err,
            r.max_elementwise,
            r.seeds,
            r.coverage,
            if r.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    s
}
