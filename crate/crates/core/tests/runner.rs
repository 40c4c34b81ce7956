//! End-to-end runner behavior on a small model: artifact layout, report
//! schemas, checkpoint files and rerun determinism.

use std::path::Path;

use proptest::prelude::*;
use unforge::runner::checkpoint::{decode_checkpoint, encode_checkpoint};
use unforge::runner::report::columns;
use unforge::runner::{
    load_checkpoint, quantize, run_scenario, save_checkpoint, CheckpointMeta, ExperimentConfig, Provenance, ReportRow,
    Scenario,
};
use unforge::tensor::{ParamStore, Tensor};
use unforge::Error;

fn small(scenario: Scenario, dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.join("out"),
        cache_dir: dir.join("cache"),
        n_entities: 20,
        forget_ratio: 0.25,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        ft_epochs: 3,
        epochs: 2,
        ..ExperimentConfig::for_scenario(scenario)
    }
}

fn files(dir: &Path, ext: &str) -> Vec<String> {
    let mut out: Vec<String> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(ext))
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

#[test]
fn finetune_writes_two_checkpoints_and_traces() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Scenario::Finetune, tmp.path());
    let manifest = run_scenario(&cfg).unwrap();
    let out = &cfg.output_dir;
    assert_eq!(files(&out.join("checkpoints"), ".ckpt"), ["oracle-s0.ckpt", "ref-s0.ckpt"]);
    assert_eq!(files(&out.join("traces"), ".csv"), ["oracle-s0.csv", "ref-s0.csv"]);
    assert_eq!(manifest.rows.len(), 2);
    assert!(manifest.failures.is_empty());
    for f in &manifest.files {
        assert!(out.join(f).exists(), "{f} listed but missing");
    }
    let (_, meta) = load_checkpoint(&out.join("checkpoints/ref-s0.ckpt")).unwrap();
    assert_eq!(meta.provenance, Provenance::Ref);
}

#[test]
fn alpha_sweep_rows_reference_loadable_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Scenario::MoxAlphaSweep, tmp.path());
    run_scenario(&cfg).unwrap();
    let out = &cfg.output_dir;
    assert_eq!(files(&out.join("checkpoints"), ".ckpt").len(), 5);

    let mut reader = csv::Reader::from_path(out.join("mox_alpha_sweep.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, columns());
    let ckpt_col = header.iter().position(|h| h == "checkpoint").unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    for rec in &rows {
        let path = out.join(&rec[ckpt_col]);
        let (theta, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta.provenance, Provenance::For);
        assert_eq!(theta.total_len(), meta.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>());
    }
    for name in files(&out.join("reports"), ".json") {
        let text = std::fs::read_to_string(out.join("reports").join(&name)).unwrap();
        let row: ReportRow = serde_json::from_str(&text).unwrap();
        assert_eq!(row.method, "MOX");
        assert!(row.metrics.is_some());
    }
    assert!(std::fs::read_to_string(out.join("summary.txt")).unwrap().lines().count() == 6);
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut a = small(Scenario::EtaSweep, &tmp.path().join("a"));
    let mut b = small(Scenario::EtaSweep, &tmp.path().join("b"));
    a.eta_grid = vec![0.5, 0.9];
    b.eta_grid = a.eta_grid.clone();
    run_scenario(&a).unwrap();
    run_scenario(&b).unwrap();
    for rel in ["eta_sweep.csv", "checkpoints/mox_momentum-s0-a4-eta0.5.ckpt", "checkpoints/mox_momentum-s0-a4-eta0.9.ckpt"] {
        let x = std::fs::read(a.output_dir.join(rel)).unwrap();
        let y = std::fs::read(b.output_dir.join(rel)).unwrap();
        assert!(x == y, "{rel} differs between reruns");
    }
}

#[test]
fn invalid_config_fails_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(Scenario::Finetune, tmp.path());
    cfg.seeds.clear();
    assert!(matches!(run_scenario(&cfg), Err(Error::Config(_))));
    assert!(!cfg.output_dir.exists());
}

#[test]
fn checkpoint_files_are_stable_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(Scenario::Finetune, tmp.path()).model_config(0);
    let theta = unforge::model::Transformer::new(cfg.clone()).unwrap().init_params();
    let meta = CheckpointMeta::new(cfg, &theta, Provenance::Mem).with("note", "x");
    let (p1, p2) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    save_checkpoint(&theta, &meta, &p1).unwrap();
    save_checkpoint(&theta, &meta, &p2).unwrap();
    let bytes = std::fs::read(&p1).unwrap();
    assert_eq!(bytes, std::fs::read(&p2).unwrap());
    assert_eq!(&bytes[..8], b"MOXCKPT1");
    let (loaded, meta2) = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded, quantize(&theta));
    assert_eq!(meta2, meta);

    std::fs::write(&p2, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&p2), Err(Error::Format { .. })));
    assert!(matches!(load_checkpoint(&tmp.path().join("missing.ckpt")), Err(Error::Io { .. })));
}

fn store_strategy() -> impl Strategy<Value = ParamStore> {
    prop::collection::vec((1usize..4, 1usize..5), 1..4).prop_flat_map(|shapes| {
        let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
        prop::collection::vec(-1e6..1e6f64, n).prop_map(move |values| {
            let mut at = 0;
            let entries = shapes
                .iter()
                .enumerate()
                .map(|(i, &(r, c))| {
                    let t = Tensor::new(vec![r, c], values[at..at + r * c].to_vec()).unwrap();
                    at += r * c;
                    (format!("t{i}"), t)
                })
                .collect();
            ParamStore::new(entries).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn round_trip_is_idempotent_after_quantization(theta in store_strategy()) {
        let model = ExperimentConfig::default().model_config(0);
        let meta = CheckpointMeta::new(model, &theta, Provenance::Baseline);
        let bytes = encode_checkpoint(&theta, &meta).unwrap();
        let (once, _) = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&once, &quantize(&theta));
        let again = encode_checkpoint(&once, &meta).unwrap();
        prop_assert_eq!(&again, &bytes);
        prop_assert_eq!(decode_checkpoint(&again).unwrap().0, once);
    }
}
