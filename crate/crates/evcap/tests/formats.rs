use std::path::Path;

use evcap::dataset::{read_dataset, read_manifest, write_dataset, write_manifest};
use evcap::simdump::{batch_labels, load_dump, save_dump};
use evcap::CliError;
use evcap_core::data::{make_splits, vehicle_ids, CHANNEL_NAMES};
use evcap_core::model::{ModelConfig, ModelParams};
use evcap_core::pretrain::{forward_batch, make_batch, PretrainConfig};
use evcap_core::rng;
use evcap_core::synthgen::{generate_fleet, FleetConfig};
use proptest::prelude::*;

fn small(seed: u64) -> FleetConfig {
    FleetConfig { n_vehicles: 10, snippets_per_vehicle: 2, seed, ..FleetConfig::default() }
}

fn dataset_text(cfg: &FleetConfig) -> String {
    let mut buf = Vec::new();
    write_dataset(&generate_fleet(cfg).unwrap(), &mut buf, None, Path::new("d.csv")).unwrap();
    String::from_utf8(buf).unwrap()
}

fn parse_error_line(text: &str) -> (u64, String) {
    match read_dataset(text.as_bytes(), Path::new("d.csv")).unwrap_err() {
        CliError::Parse { line, msg, .. } => (line, msg),
        other => panic!("expected a parse error, got {other}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn dataset_round_trips(seed in 0u64..1000) {
        let fleet = generate_fleet(&small(seed)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&fleet, &mut buf, None, Path::new("d.csv")).unwrap();
        let back = read_dataset(buf.as_slice(), Path::new("d.csv")).unwrap();
        prop_assert_eq!(back, fleet);
    }

    #[test]
    fn manifest_round_trips(seed in any::<u64>()) {
        let fleet = generate_fleet(&small(3)).unwrap();
        let splits = make_splits(&vehicle_ids(&fleet), seed).unwrap();
        let mut buf = Vec::new();
        write_manifest(&splits, &mut buf, None, Path::new("m.csv")).unwrap();
        prop_assert_eq!(read_manifest(buf.as_slice(), Path::new("m.csv")).unwrap(), splits);
    }
}

#[test]
fn empty_capacity_reads_as_unlabeled() {
    let fleet = generate_fleet(&small(4)).unwrap();
    assert!(fleet.iter().any(|s| !s.is_labeled()), "fixture needs an unlabeled snippet");
    let back = read_dataset(dataset_text(&small(4)).as_bytes(), Path::new("d.csv")).unwrap();
    for (a, b) in fleet.iter().zip(&back) {
        assert_eq!(a.capacity_label_ah.is_none(), b.capacity_label_ah.is_none());
    }
}

#[test]
fn short_snippet_is_named_with_its_line() {
    let text = dataset_text(&small(1));
    let mut lines: Vec<&str> = text.lines().collect();
    let first_id = lines[1].split(',').next().unwrap().to_string();
    lines.remove(40);
    let (line, msg) = parse_error_line(&(lines.join("\n") + "\n"));
    assert!(line > 0);
    assert!(msg.contains(&first_id) || msg.contains("t_index"), "{msg}");
}

#[test]
fn wrong_column_count_reports_line() {
    let text = dataset_text(&small(1));
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[5].push_str(",1.0");
    let (line, msg) = parse_error_line(&(lines.join("\n") + "\n"));
    assert_eq!(line, 6);
    assert!(msg.contains("columns"), "{msg}");
}

#[test]
fn bad_header_and_bad_value() {
    let text = dataset_text(&small(1));
    let renamed = text.replacen("current_a", "current", 1);
    let (line, msg) = parse_error_line(&renamed);
    assert_eq!(line, 1);
    assert!(msg.contains("header"), "{msg}");

    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[3].split(',').map(String::from).collect();
    cells[7] = "volts".into();
    lines[3] = cells.join(",");
    let (line, msg) = parse_error_line(&(lines.join("\n") + "\n"));
    assert_eq!(line, 4);
    assert!(msg.contains("voltage_max_v"), "{msg}");
}

#[test]
fn manifest_rejects_duplicates() {
    let text = "vehicle_id,split,finetune_flag\nv1,pretrain,1\nv1,test,0\n";
    let err = read_manifest(text.as_bytes(), Path::new("m.csv")).unwrap_err();
    assert!(matches!(err, CliError::Parse { line: 3, .. }), "{err}");
}

#[test]
fn similarity_dump_rows_are_distributions_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let fleet = generate_fleet(&small(2)).unwrap();
    let cfg = ModelConfig { d_f: 4, d_h: 8, ..ModelConfig::default() };
    let pcfg = PretrainConfig::default();
    let params = ModelParams::init(cfg, 3).unwrap();
    let chosen: Vec<_> = fleet.iter().take(3).collect();
    let series: Vec<_> = chosen.iter().map(|s| &s.series).collect();
    let batch = make_batch(&series, &cfg, &pcfg, &mut rng::stream(1, rng::ids::VALIDATION_MASK)).unwrap();
    let out = forward_batch(&params, &batch, &pcfg).unwrap();
    let labels = batch_labels(&chosen, &CHANNEL_NAMES);
    let path = dir.path().join("sim.csv");
    save_dump(&out.record, &labels, &path, None).unwrap();

    let dump = load_dump(&path).unwrap();
    assert_eq!(dump.labels, labels);
    assert_eq!(dump.similarity, out.record.matrix);
    assert_eq!(dump.weights, out.record.weights);
    for i in 0..dump.weights.rows() {
        let total: f64 = dump.weights.row(i).iter().map(|&w| w as f64).sum();
        assert!((total - 1.0).abs() < 1e-6, "row {i} sums to {total}");
    }
}
