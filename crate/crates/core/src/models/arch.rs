//! Layer layouts and forward passes.

use crate::error::{Error, Result};
use crate::gcfeat::{gc_stack_forward, GcStackConfig};
use crate::tensor::{Scalar, Tensor, Var};

/// Subtracted from SR inputs and added back to outputs.
const MEAN_SHIFT: f64 = 0.5;

use super::{Init, LayerRow, ModelConfig, ParamSpec, Task};

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv,
    c2: Conv,
}

#[derive(Debug, Clone)]
struct GcLayer {
    cfg: GcStackConfig,
    weights: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GcResNet {
    head: Conv,
    enc: [Vec<ResBlock>; 3],
    down: [Conv; 2],
    gc: Option<GcLayer>,
    dec: [Vec<ResBlock>; 3],
    up: [Conv; 2],
    tail: Conv,
    global_skip: bool,
}

#[derive(Debug, Clone)]
pub struct GcEdsr {
    head: Conv,
    body1: Vec<ResBlock>,
    gc: Option<GcLayer>,
    body2: Vec<ResBlock>,
    body_tail: Conv,
    up: Vec<Conv>,
    out: Conv,
}

#[derive(Debug, Clone)]
pub enum Arch {
    GcResNet(GcResNet),
    GcEdsr(GcEdsr),
}

#[cfg(test)]
pub(super) fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

struct Builder {
    specs: Vec<ParamSpec>,
    rows: Vec<LayerRow>,
    c: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let w = self.push(
            format!("{name}.w"),
            vec![cout, cin, k, k],
            Init::Xavier {
                fan_in: cin * k * k,
                fan_out: cout * k * k,
            },
        );
        let b = self.push(format!("{name}.b"), vec![cout], Init::Zero);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn row(&mut self, name: &str, kind: String, resolution: &str, first_spec: usize) {
        let params = self.specs[first_spec..].iter().map(ParamSpec::numel).sum();
        self.rows.push(LayerRow {
            name: name.to_string(),
            kind,
            resolution: resolution.to_string(),
            params,
        });
    }

    fn conv_row(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        res: &str,
        extra: &str,
    ) -> Conv {
        let first = self.specs.len();
        let conv = self.conv(name, cin, cout, 3, stride);
        let s = if stride > 1 {
            format!("/{stride}")
        } else {
            String::new()
        };
        self.row(name, format!("conv3x3{s} {cin}->{cout}{extra}"), res, first);
        conv
    }

    fn resblocks(&mut self, name: &str, count: usize, res: &str) -> Vec<ResBlock> {
        let first = self.specs.len();
        let c = self.c;
        let blocks = (0..count)
            .map(|i| ResBlock {
                c1: self.conv(&format!("{name}.{i}.c1"), c, c, 3, 1),
                c2: self.conv(&format!("{name}.{i}.c2"), c, c, 3, 1),
            })
            .collect();
        self.row(name, format!("{count} x ResBlock({c})"), res, first);
        blocks
    }

    fn gc(&mut self, cfg: &Option<GcStackConfig>, res: &str) -> Option<GcLayer> {
        let first = self.specs.len();
        let Some(cfg) = cfg else {
            self.row("gc", "identity (no GC stack)".into(), res, first);
            return None;
        };
        let weights = cfg
            .weight_shapes()
            .iter()
            .enumerate()
            .map(|(i, &[a, b])| {
                self.push(
                    format!("gc.{i}"),
                    vec![a, b],
                    Init::Xavier {
                        fan_in: a,
                        fan_out: b,
                    },
                )
            })
            .collect();
        let lift = if cfg.lift_project { "" } else { ", no lift" };
        self.row(
            "gc",
            format!(
                "GC F={} {} ResGCN WS(k={},rho={}){lift}",
                cfg.f, cfg.blocks, cfg.degree, cfg.rho
            ),
            res,
            first,
        );
        Some(GcLayer { cfg: *cfg, weights })
    }
}

/// Split `total` blocks over `levels`, earlier levels taking the remainder.
fn split(total: usize, levels: usize) -> Vec<usize> {
    (0..levels)
        .map(|i| total / levels + usize::from(i < total % levels))
        .collect()
}

pub(super) fn build(cfg: &ModelConfig) -> Result<(Arch, Vec<ParamSpec>, Vec<LayerRow>)> {
    cfg.validate()?;
    let c = cfg.channels;
    let ci = cfg.image_channels;
    let mut b = Builder {
        specs: Vec::new(),
        rows: Vec::new(),
        c,
    };
    let arch = match cfg.task {
        Task::Deblur => {
            let res = ["1", "1/2", "1/4"];
            let enc_n = split(cfg.enc_blocks, 3);
            let dec_n = split(cfg.dec_blocks, 3);
            let head = b.conv_row("head", ci, c, 1, res[0], "");
            let e0 = b.resblocks("enc0", enc_n[0], res[0]);
            let d1 = b.conv_row("down1", c, c, 2, res[1], " + relu");
            let e1 = b.resblocks("enc1", enc_n[1], res[1]);
            let d2 = b.conv_row("down2", c, c, 2, res[2], " + relu");
            let e2 = b.resblocks("enc2", enc_n[2], res[2]);
            let gc = b.gc(&cfg.gc, res[2]);
            let r2 = b.resblocks("dec2", dec_n[2], res[2]);
            let u1 = b.conv_row("up1", c, 4 * c, 1, res[1], " + subpixel x2 + skip");
            let r1 = b.resblocks("dec1", dec_n[1], res[1]);
            let u0 = b.conv_row("up0", c, 4 * c, 1, res[0], " + subpixel x2 + skip");
            let r0 = b.resblocks("dec0", dec_n[0], res[0]);
            let skip = if cfg.global_skip { " + input" } else { "" };
            let tail = b.conv_row("tail", c, ci, 1, res[0], skip);
            Arch::GcResNet(GcResNet {
                head,
                enc: [e0, e1, e2],
                down: [d1, d2],
                gc,
                dec: [r0, r1, r2],
                up: [u0, u1],
                tail,
                global_skip: cfg.global_skip,
            })
        }
        Task::Sr => {
            let stages = cfg.scale.trailing_zeros() as usize;
            let head = b.conv_row("head", ci, c, 1, "1", "");
            let half = split(cfg.sr_blocks, 2);
            let body1 = b.resblocks("body1", half[0], "1");
            let gc = b.gc(&cfg.gc, "1");
            let body2 = b.resblocks("body2", half[1], "1");
            let body_tail = b.conv_row("body", c, c, 1, "1", " + head skip");
            let up = (0..stages)
                .map(|i| {
                    b.conv_row(
                        &format!("up{i}"),
                        c,
                        4 * c,
                        1,
                        &format!("x{}", 2 << i),
                        " + subpixel x2",
                    )
                })
                .collect();
            let out = b.conv_row("out", c, ci, 1, &format!("x{}", cfg.scale), "");
            Arch::GcEdsr(GcEdsr {
                head,
                body1,
                gc,
                body2,
                body_tail,
                up,
                out,
            })
        }
    };
    Ok((arch, b.specs, b.rows))
}

fn conv<'t, T: Scalar>(p: &[Var<'t, T>], c: &Conv, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.conv2d(p[c.w], Some(p[c.b]), c.stride, c.pad)
}

fn resblocks<'t, T: Scalar>(
    p: &[Var<'t, T>],
    blocks: &[ResBlock],
    mut x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    for rb in blocks {
        let h = conv(p, &rb.c1, x)?.relu();
        x = conv(p, &rb.c2, h)?.add(x)?;
    }
    Ok(x)
}

fn gc<'t, T: Scalar>(
    p: &[Var<'t, T>],
    layer: &Option<GcLayer>,
    agg: Option<Var<'t, T>>,
    x: Var<'t, T>,
) -> Result<Var<'t, T>> {
    match (layer, agg) {
        (None, _) => Ok(x),
        (Some(l), Some(agg)) => {
            let w: Vec<_> = l.weights.iter().map(|&i| p[i]).collect();
            gc_stack_forward(x, &l.cfg, agg, &w)
        }
        (Some(_), None) => Err(Error::Config("GC stack needs an aggregator".into())),
    }
}

impl Arch {
    pub(super) fn forward<'t, T: Scalar>(
        &self,
        p: &[Var<'t, T>],
        agg: Option<Var<'t, T>>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        match self {
            Arch::GcResNet(a) => {
                let h = conv(p, &a.head, x)?;
                let s0 = resblocks(p, &a.enc[0], h)?;
                let h = conv(p, &a.down[0], s0)?.relu();
                let s1 = resblocks(p, &a.enc[1], h)?;
                let h = conv(p, &a.down[1], s1)?.relu();
                let h = resblocks(p, &a.enc[2], h)?;
                let h = gc(p, &a.gc, agg, h)?;
                let h = resblocks(p, &a.dec[2], h)?;
                let h = conv(p, &a.up[1], h)?.pixel_shuffle(2)?.add(s1)?;
                let h = resblocks(p, &a.dec[1], h)?;
                let h = conv(p, &a.up[0], h)?.pixel_shuffle(2)?.add(s0)?;
                let h = resblocks(p, &a.dec[0], h)?;
                let y = conv(p, &a.tail, h)?;
                if a.global_skip {
                    y.add(x)
                } else {
                    Ok(y)
                }
            }
            Arch::GcEdsr(a) => {
                // Fixed mean shift around mid-grey, as in EDSR.
                let tape = x.tape();
                let shift = |v: Var<'t, T>, by: f64| {
                    v.add(tape.constant(Tensor::full(&v.shape(), T::from_f64(by))))
                };
                let head = conv(p, &a.head, shift(x, -MEAN_SHIFT)?)?;
                let h = resblocks(p, &a.body1, head)?;
                let h = gc(p, &a.gc, agg, h)?;
                let h = resblocks(p, &a.body2, h)?;
                let mut h = conv(p, &a.body_tail, h)?.add(head)?;
                for u in &a.up {
                    h = conv(p, u, h)?.pixel_shuffle(2)?;
                }
                shift(conv(p, &a.out, h)?, MEAN_SHIFT)
            }
        }
    }
}
