//! Acceptance criteria 1-11, one PASS/FAIL line each.
//!
//! Lines go straight to the process stderr so they show up without
//! `--nocapture`. Criteria 7-9 train full desk-scale models and take
//! several minutes on one core.

// `eprintln!` output is captured by the test harness; the verdict lines
// should always be visible.
#![allow(clippy::explicit_write)]

use std::io::Write;
use std::time::Instant;

use gcfs::dataio::{synth, BlurKernel, DegradedPair, Image};
use gcfs::diagnostics::{format_table, gradcheck_suite, Coverage};
use gcfs::gcfeat::{fmap_to_nodes, graph_conv, nodes_to_fmap, resgcn_block, GcStackConfig};
use gcfs::metrics::{psnr, ssim};
use gcfs::models::{Model, ModelConfig};
use gcfs::tensor::{Tape, Tensor};
use gcfs::trainer::{evaluate, Checkpoint, TrainConfig, Trainer};
use gcfs::wsgraph::{degree_stats, derived_seed, ws_generate, Aggregator};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn report(id: u32, title: &str, pass: bool, detail: String) -> Outcome {
    let line = format!(
        "criterion {id:>2} {} {title}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    writeln!(std::io::stderr(), "{line}").unwrap();
    Outcome { id, pass, detail }
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let results = gradcheck_suite(&[1, 2, 3, 4, 5], Coverage::Full).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    write!(std::io::stderr(), "{}", format_table(&results)).unwrap();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let elem = results
        .iter()
        .map(|r| r.max_elementwise)
        .fold(0.0, f64::max);
    let failed = results.iter().filter(|r| !r.passed()).count();
    report(
        1,
        "gradient fidelity",
        failed == 0 && secs < 120.0,
        format!("{} checks x 5 seeds, {failed} failed, worst per-tensor rel err {worst:.2e} \
             (per-coordinate max {elem:.2e}, dominated by roundoff on near-zero gradients), {secs:.1} s",
            results.len()
        ),
    )
}

fn spectral_radius(agg: &Aggregator) -> f64 {
    let n = agg.n();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut lambda = 0.0;
    for _ in 0..50_000 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let w = agg.apply(&v);
        let next = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let done = (next - lambda).abs() < 1e-15;
        lambda = next;
        v = w;
        if done {
            break;
        }
    }
    lambda
}

fn aggregator_spectrum() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut asym, mut eig_err, mut radius_err) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..20 {
        let n = rng.gen_range(8..=128);
        let k = 2 * rng.gen_range(1..=3.min((n - 1) / 2));
        let rho = [0.0, 0.1, 0.5, 0.9, 1.0][i % 5];
        let g = ws_generate(n, k, rho, rng.gen()).unwrap();
        let agg = Aggregator::new(&g);
        for a in 0..n {
            for b in 0..n {
                if agg.get(a, b) != agg.get(b, a) {
                    asym = asym.max((agg.get(a, b) - agg.get(b, a)).abs());
                }
            }
        }
        let sd: Vec<f64> = g
            .degrees()
            .iter()
            .map(|&d| ((d + 1) as f64).sqrt())
            .collect();
        let tsd = agg.apply(&sd);
        eig_err = eig_err.max(
            tsd.iter()
                .zip(&sd)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        radius_err = radius_err.max((spectral_radius(&agg) - 1.0).abs());
    }
    report(
        2,
        "aggregator spectrum",
        asym == 0.0 && eig_err <= 1e-10 && radius_err <= 1e-8,
        format!("20 graphs, asymmetry {asym:.1e}, |T sqrt(d) - sqrt(d)| {eig_err:.1e}, |radius - 1| {radius_err:.1e}"),
    )
}

fn ws_structure() -> Outcome {
    let t0 = Instant::now();
    let mut all_exact = true;
    let mut pooled = |rho: f64| {
        let mut degrees = Vec::new();
        for i in 0..100 {
            let g = ws_generate(96, 4, rho, derived_seed(3, i)).unwrap();
            let st = degree_stats(&g);
            all_exact &= g.edges().len() == 192 && st.mean == 4.0;
            degrees.extend(st.degrees);
        }
        let m = degrees.iter().sum::<usize>() as f64 / degrees.len() as f64;
        degrees.iter().map(|&d| (d as f64 - m).powi(2)).sum::<f64>() / degrees.len() as f64
    };
    let (v0, v9) = (pooled(0.0), pooled(0.9));
    let secs = t0.elapsed().as_secs_f64();
    report(
        3,
        "WS structure",
        all_exact && v0 == 0.0 && v9 > v0 && secs < 10.0,
        format!("200 graphs with 192 edges and mean 4: {all_exact}; pooled variance rho=0 {v0}, rho=0.9 {v9:.4}; {secs:.2} s"),
    )
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    for _ in 0..50 {
        let shape = [
            rng.gen_range(1..4),
            rng.gen_range(1..17),
            rng.gen_range(1..9),
            rng.gen_range(1..9),
        ];
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
        let x = Tensor::new(&shape, data).unwrap();
        let tape = Tape::<f32>::new();
        let back = nodes_to_fmap(fmap_to_nodes(tape.leaf(x.clone())).unwrap()).unwrap();
        exact += usize::from(*back.value() == x);
    }
    report(
        4,
        "fmap/node round trip",
        exact == 50,
        format!("{exact}/50 shapes bit-exact"),
    )
}

fn permutation_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut perm_dev, mut brute_dev) = (0.0f64, 0.0f64);
    for n in [4usize, 6, 8] {
        let g = ws_generate(n, 2, 0.5, 50 + n as u64).unwrap();
        let (positions, fin, fout) = (3, 2, 3);
        let x: Vec<f32> = (0..positions * n * fin)
            .map(|_| rng.gen::<f32>() - 0.5)
            .collect();
        let theta: Vec<f32> = (0..fin * fout).map(|_| rng.gen::<f32>() - 0.5).collect();
        let conv = |g: &gcfs::wsgraph::Graph, x: &[f32]| -> Vec<f32> {
            let tape = Tape::<f32>::new();
            let nt = gcfs::gcfeat::NodeTensor {
                data: tape.leaf(Tensor::new(&[positions, n, fin], x.to_vec()).unwrap()),
                origin_shape: [positions, n, 1, 1],
            };
            let agg = tape.constant(Aggregator::new(g).to_tensor());
            let th = tape.leaf(Tensor::new(&[fin, fout], theta.clone()).unwrap());
            graph_conv(nt, agg, th)
                .unwrap()
                .data
                .value()
                .data()
                .to_vec()
        };
        let base = conv(&g, &x);

        // Explicit sum over neighbours and features.
        let t = Aggregator::new(&g);
        for p in 0..positions {
            for i in 0..n {
                for o in 0..fout {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        for f in 0..fin {
                            acc += t.get(i, j)
                                * x[(p * n + j) * fin + f] as f64
                                * theta[f * fout + o] as f64;
                        }
                    }
                    brute_dev = brute_dev.max((acc - base[(p * n + i) * fout + o] as f64).abs());
                }
            }
        }

        for _ in 0..3 {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let gp = g.relabel(&perm).unwrap();
            let mut xp = vec![0.0f32; x.len()];
            for p in 0..positions {
                for i in 0..n {
                    for f in 0..fin {
                        xp[(p * n + perm[i]) * fin + f] = x[(p * n + i) * fin + f];
                    }
                }
            }
            let out = conv(&gp, &xp);
            for p in 0..positions {
                for i in 0..n {
                    for o in 0..fout {
                        let d = (out[(p * n + perm[i]) * fout + o] - base[(p * n + i) * fout + o])
                            .abs();
                        perm_dev = perm_dev.max(d as f64);
                    }
                }
            }
        }
    }
    report(
        5,
        "permutation equivariance",
        perm_dev < 1e-6 && brute_dev < 1e-6,
        format!("n in {{4,6,8}} x 3 permutations, max deviation {perm_dev:.1e}, vs explicit sums {brute_dev:.1e}"),
    )
}

fn identity_degeneracies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::<f32>::new();
    let g = ws_generate(8, 4, 0.9, 1).unwrap();
    let agg = tape.constant(Aggregator::new(&g).to_tensor());
    let x = Tensor::new(
        &[5, 8, 3],
        (0..120).map(|_| rng.gen::<f32>() - 0.5).collect(),
    )
    .unwrap();
    let nt = gcfs::gcfeat::NodeTensor {
        data: tape.leaf(x.clone()),
        origin_shape: [5, 8, 1, 1],
    };
    let zero = |a, b| tape.leaf(Tensor::zeros(&[a, b]));
    let block = resgcn_block(nt, agg, zero(3, 4), zero(4, 3)).unwrap();
    let resgcn_ok = *block.data.value() == x;

    let mut model = Model::new(ModelConfig::mini_deblur(), 9).unwrap();
    for name in ["tail.w", "tail.b"] {
        let i = model.param_index(name).expect("tail conv");
        model.params_mut()[i].data_mut().fill(0.0);
    }
    let img = synth::sharp_image(16, 16, 3, 6).unwrap();
    let tape = Tape::<f64>::new();
    let params = model.bind(&tape, false);
    let y = model
        .forward(&tape, &params, tape.leaf(img.to_tensor::<f64>()))
        .unwrap();
    let exact_f64 = *y.value() == img.to_tensor::<f64>();
    // Inference runs in f32, so the reference is the image rounded to f32.
    let rounded = Image::from_tensor(&img.to_tensor::<f32>(), 0).unwrap();
    let (out, _) = model.infer(&img).unwrap();
    let model_ok = exact_f64 && out == rounded;
    report(
        6,
        "identity degeneracies",
        resgcn_ok && model_ok,
        format!("zero-weight ResGCN exact: {resgcn_ok}; zero-tail GCResNet exact: {model_ok}"),
    )
}

fn named(pairs: &[DegradedPair]) -> Vec<(String, DegradedPair)> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("{i:04}"), p.clone()))
        .collect()
}

/// Desk-scale learning rates, chosen on seeds other than the reported one.
const DEBLUR_LR: f64 = 1e-3;
const SR_LR: f64 = 2e-3;

struct DeskRun {
    psnr: f64,
    baseline: f64,
    secs: f64,
}

fn desk_train(
    cfg: ModelConfig,
    lr0: f64,
    seed: u64,
    train: &[DegradedPair],
    val: &[DegradedPair],
) -> DeskRun {
    let t0 = Instant::now();
    let tc = TrainConfig {
        lr0,
        total_steps: 1500,
        batch: 4,
        seed,
        ..TrainConfig::default()
    };
    let model = Model::new(cfg, seed).unwrap();
    let mut trainer = Trainer::new(model, tc, train.to_vec(), Vec::new()).unwrap();
    trainer.run_to_end().unwrap();
    let report = evaluate(trainer.model(), &named(val)).unwrap();
    DeskRun {
        psnr: report.mean_psnr(),
        baseline: report.mean_input_psnr().unwrap(),
        secs: t0.elapsed().as_secs_f64(),
    }
}

fn deblur_data() -> (Vec<DegradedPair>, Vec<DegradedPair>) {
    let k = BlurKernel::Gaussian { sigma: 1.5 };
    (
        synth::deblur_pairs(64, 32, k, 0.0, 100).unwrap(),
        synth::deblur_pairs(16, 32, k, 0.0, 200).unwrap(),
    )
}

fn deblur_criteria() -> Vec<Outcome> {
    let (train, val) = deblur_data();
    let cfg = ModelConfig::mini_deblur();
    let mut no_gc = cfg.clone();
    no_gc.gc = None;
    let seeds = [7u64, 8, 9];
    let gc: Vec<DeskRun> = seeds
        .iter()
        .map(|&s| desk_train(cfg.clone(), DEBLUR_LR, s, &train, &val))
        .collect();
    let first = &gc[0];
    let gain = first.psnr - first.baseline;
    let c7 = report(
        7,
        "desk deblur",
        gain >= 1.0 && first.secs < 1800.0,
        format!(
            "seed 7 PSNR {:.3} dB vs blurred input {:.3} dB, gain {gain:+.3} dB, {:.0} s",
            first.psnr, first.baseline, first.secs
        ),
    );
    let plain: Vec<DeskRun> = seeds
        .iter()
        .map(|&s| desk_train(no_gc.clone(), DEBLUR_LR, s, &train, &val))
        .collect();
    let mean = |r: &[DeskRun]| r.iter().map(|d| d.psnr).sum::<f64>() / r.len() as f64;
    let (m_gc, m_plain) = (mean(&gc), mean(&plain));
    let gap = m_gc - m_plain;
    let each: Vec<String> = gc
        .iter()
        .zip(&plain)
        .zip(seeds)
        .map(|((a, b), s)| format!("seed {s} {:.3}/{:.3}", a.psnr, b.psnr))
        .collect();
    let c8 = report(
        8,
        "GC contribution",
        gap >= -0.05,
        format!(
            "mean GC {m_gc:.3} dB vs identity {m_plain:.3} dB, signed gap {gap:+.3} dB ({})",
            each.join(", ")
        ),
    );
    vec![c7, c8]
}

fn desk_sr() -> Outcome {
    let train = synth::sr_pairs(64, 48, 2, 100).unwrap();
    let val = synth::sr_pairs(16, 48, 2, 200).unwrap();
    let run = desk_train(ModelConfig::mini_sr(2), SR_LR, 7, &train, &val);
    let gain = run.psnr - run.baseline;
    report(
        9,
        "desk SR x2",
        gain >= 0.3 && run.secs < 1800.0,
        format!(
            "PSNR {:.3} dB vs bicubic {:.3} dB, gain {gain:+.3} dB, {:.0} s",
            run.psnr, run.baseline, run.secs
        ),
    )
}

fn metrics_sanity() -> Outcome {
    let a = Image::filled(16, 16, 3, 0.5).unwrap();
    let b = Image::filled(16, 16, 3, 0.5 + 1.0 / 255.0).unwrap();
    let p = psnr(&a, &b, 1.0).unwrap();
    let x = synth::sharp_image(32, 24, 3, 10).unwrap();
    let y = synth::sharp_image(32, 24, 3, 11).unwrap();
    let self_ssim = ssim(&x, &x).unwrap().value;
    let sym = psnr(&x, &y, 1.0).unwrap() == psnr(&y, &x, 1.0).unwrap()
        && ssim(&x, &y).unwrap() == ssim(&y, &x).unwrap();
    report(
        10,
        "metrics sanity",
        (p - 48.1308).abs() < 1e-3 && (self_ssim - 1.0).abs() < 1e-9 && sym,
        format!(
            "uniform 1/255 error {p:.4} dB, SSIM(x,x) - 1 = {:.1e}, symmetric {sym}",
            self_ssim - 1.0
        ),
    )
}

fn reproducibility() -> Outcome {
    let train = synth::deblur_pairs(8, 16, BlurKernel::Gaussian { sigma: 1.5 }, 0.01, 30).unwrap();
    let val = synth::deblur_pairs(2, 16, BlurKernel::Gaussian { sigma: 1.5 }, 0.0, 31).unwrap();
    let cfg = ModelConfig {
        channels: 8,
        enc_blocks: 1,
        dec_blocks: 1,
        gc: Some(GcStackConfig {
            f: 4,
            blocks: 1,
            ..GcStackConfig::default()
        }),
        ..ModelConfig::mini_deblur()
    };
    let tc = TrainConfig {
        lr0: 1e-3,
        total_steps: 12,
        batch: 2,
        patch: Some(16),
        eval_every: 4,
        ..TrainConfig::default()
    };
    let full = || {
        let mut t = Trainer::new(
            Model::new(cfg.clone(), 3).unwrap(),
            tc.clone(),
            train.clone(),
            val.clone(),
        )
        .unwrap();
        t.run_to_end().unwrap();
        (t.log_csv(), t.checkpoint().to_bytes().unwrap())
    };
    let (csv_a, ck_a) = full();
    let (csv_b, ck_b) = full();
    let rerun = csv_a == csv_b && ck_a == ck_b;

    let mut t = Trainer::new(
        Model::new(cfg.clone(), 3).unwrap(),
        tc.clone(),
        train.clone(),
        val.clone(),
    )
    .unwrap();
    t.run(5).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let save_load = loaded.to_bytes().unwrap() == bytes;
    let mut resumed = Trainer::from_checkpoint(loaded, train, val).unwrap();
    resumed.run_to_end().unwrap();
    let resume = resumed.checkpoint().to_bytes().unwrap() == ck_a;
    report(
        11,
        "reproducibility",
        rerun && save_load && resume,
        format!("rerun byte-identical {rerun}; save/load {save_load}; resume at step 5 matches {resume}"),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = vec![
        gradient_fidelity(),
        aggregator_spectrum(),
        ws_structure(),
        round_trip(),
        permutation_equivariance(),
        identity_degeneracies(),
    ];
    outcomes.extend(deblur_criteria());
    outcomes.push(desk_sr());
    outcomes.push(metrics_sanity());
    outcomes.push(reproducibility());
    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{}: {}", o.id, o.detail))
        .collect();
    let passed = outcomes.len() - failed.len();
    writeln!(
        std::io::stderr(),
        "acceptance: {passed}/{} criteria passed",
        outcomes.len()
    )
    .unwrap();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
