use std::ffi::{CStr, CString};
use std::ptr;

use gcfs::dataio::{synth, BlurKernel};
use gcfs::gcfeat::GcStackConfig;
use gcfs::models::{Model, ModelConfig};
use gcfs::trainer::{TrainConfig, Trainer};
use gcfs_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gcfs_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn graph_lifecycle() {
    let mut g = ptr::null_mut();
    assert_eq!(gcfs_graph_generate(96, 4, 0.9, 7, &mut g), GcfsStatus::Ok);
    assert_eq!(gcfs_graph_node_count(g), 96);
    assert_eq!(gcfs_graph_edge_count(g), 192);

    let mut needed = 0;
    assert_eq!(
        gcfs_graph_edges(g, ptr::null_mut(), 0, &mut needed),
        GcfsStatus::BufferTooSmall
    );
    assert_eq!(needed, 384);
    let mut edges = vec![0usize; needed];
    assert_eq!(
        gcfs_graph_edges(g, edges.as_mut_ptr(), edges.len(), &mut needed),
        GcfsStatus::Ok
    );
    assert!(edges.chunks(2).all(|e| e[0] < e[1] && e[1] < 96));

    let mut agg = vec![0.0f64; 96 * 96];
    let mut written = 0;
    assert_eq!(
        gcfs_graph_aggregator(g, agg.as_mut_ptr(), agg.len(), &mut written),
        GcfsStatus::Ok
    );
    assert_eq!(written, 96 * 96);
    for i in 0..96 {
        for j in 0..96 {
            assert_eq!(agg[i * 96 + j], agg[j * 96 + i]);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("g.edges"));
    assert_eq!(gcfs_graph_save(g, path.as_ptr()), GcfsStatus::Ok);
    let mut h = ptr::null_mut();
    assert_eq!(gcfs_graph_load(path.as_ptr(), &mut h), GcfsStatus::Ok);
    let mut edges2 = vec![0usize; 384];
    assert_eq!(
        gcfs_graph_edges(h, edges2.as_mut_ptr(), 384, ptr::null_mut()),
        GcfsStatus::Ok
    );
    assert_eq!(edges, edges2);
    gcfs_graph_free(g);
    gcfs_graph_free(h);
    gcfs_graph_free(ptr::null_mut());
}

#[test]
fn errors_map_to_codes_and_messages() {
    let mut g = ptr::null_mut();
    assert_eq!(
        gcfs_graph_generate(10, 3, 0.5, 1, &mut g),
        GcfsStatus::InvalidArgument
    );
    assert!(g.is_null());
    assert!(last_error().contains("even"), "{}", last_error());

    assert_eq!(
        gcfs_graph_generate(10, 2, 0.5, 1, ptr::null_mut()),
        GcfsStatus::NullPointer
    );
    assert_eq!(
        gcfs_graph_save(ptr::null(), c"x".as_ptr()),
        GcfsStatus::NullPointer
    );

    let missing = CString::new("/nonexistent/dir/g.edges").unwrap();
    assert_eq!(gcfs_graph_load(missing.as_ptr(), &mut g), GcfsStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/g.edges"));
    assert_eq!(gcfs_graph_node_count(ptr::null()), 0);

    let mut m = ptr::null_mut();
    assert_eq!(gcfs_model_load(missing.as_ptr(), &mut m), GcfsStatus::Io);
    assert!(!unsafe { CStr::from_ptr(gcfs_version()) }
        .to_bytes()
        .is_empty());
}

#[test]
fn metrics_on_buffers() {
    let a = vec![0.5f64; 3 * 16 * 16];
    let b = vec![0.5 + 1.0 / 255.0; 3 * 16 * 16];
    let mut p = 0.0;
    assert_eq!(
        gcfs_psnr(a.as_ptr(), b.as_ptr(), 16, 16, 3, 1.0, &mut p),
        GcfsStatus::Ok
    );
    assert!((p - 48.1308).abs() < 1e-3);
    let (mut s, mut fallback) = (0.0, -1);
    assert_eq!(
        gcfs_ssim(a.as_ptr(), a.as_ptr(), 16, 16, 3, &mut s, &mut fallback),
        GcfsStatus::Ok
    );
    assert!((s - 1.0).abs() < 1e-12);
    assert_eq!(fallback, 0);
    assert_eq!(
        gcfs_ssim(a.as_ptr(), a.as_ptr(), 8, 8, 3, &mut s, &mut fallback),
        GcfsStatus::Ok
    );
    assert_eq!(fallback, 1);
    assert_eq!(
        gcfs_psnr(ptr::null(), b.as_ptr(), 16, 16, 3, 1.0, &mut p),
        GcfsStatus::NullPointer
    );
}

#[test]
fn model_inference_matches_library() {
    let cfg = ModelConfig {
        channels: 8,
        sr_blocks: 2,
        gc: Some(GcStackConfig {
            f: 4,
            blocks: 1,
            degree: 2,
            ..GcStackConfig::default()
        }),
        ..ModelConfig::mini_sr(2)
    };
    let train = synth::sr_pairs(4, 16, 2, 1).unwrap();
    let tc = TrainConfig {
        total_steps: 2,
        batch: 2,
        patch: Some(8),
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(Model::new(cfg, 1).unwrap(), tc, train, Vec::new()).unwrap();
    t.run_to_end().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gcfs");
    t.checkpoint().save(&path).unwrap();

    let mut m = ptr::null_mut();
    assert_eq!(
        gcfs_model_load(cpath(&path).as_ptr(), &mut m),
        GcfsStatus::Ok
    );
    assert_eq!(gcfs_model_magnification(m), 2);
    let input = synth::deblur_pairs(1, 10, BlurKernel::Delta, 0.0, 3).unwrap()[0]
        .input
        .clone();
    let mut out = vec![0.0f64; 3 * 20 * 20];
    let mut written = 0;
    let st = gcfs_model_infer(
        m,
        input.data().as_ptr(),
        10,
        10,
        3,
        out.as_mut_ptr(),
        out.len(),
        &mut written,
    );
    assert_eq!(st, GcfsStatus::Ok, "{}", last_error());
    assert_eq!(written, out.len());
    let (want, _) = t.model().infer(&input).unwrap();
    assert_eq!(out, want.data());

    let mut small = vec![0.0f64; 10];
    let st = gcfs_model_infer(
        m,
        input.data().as_ptr(),
        10,
        10,
        3,
        small.as_mut_ptr(),
        small.len(),
        &mut written,
    );
    assert_eq!(st, GcfsStatus::BufferTooSmall);
    assert_eq!(written, 1200);
    let st = gcfs_model_infer(
        m,
        input.data().as_ptr(),
        10,
        10,
        1,
        out.as_mut_ptr(),
        out.len(),
        &mut written,
    );
    assert_eq!(st, GcfsStatus::InvalidArgument);
    gcfs_model_free(m);
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/gcfs.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .split("pub extern \"C\" fn ")
        .skip(1)
        .map(|s| s.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15);
    for f in &exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    let cc = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-"])
        .stdin(std::process::Stdio::piped())
        .spawn();
    if let Ok(mut child) = cc {
        use std::io::Write;
        let prog = format!("{header}\nint main(void) {{ GcfsGraph *g = 0; return gcfs_graph_generate(8, 2, 0.5, 1, &g); }}\n");
        child
            .stdin
            .take()
            .unwrap()
            .write_all(prog.as_bytes())
            .unwrap();
        assert!(
            child.wait().unwrap().success(),
            "header does not compile as C"
        );
    }
}
