use std::path::Path;

use epienkf::assimilation::Streams;
use epienkf::config::ExperimentConfig;
use epienkf::io::{field_to_pgm, read_field, write_field, write_pgm, RunManifest};
use epienkf::{FieldBlock, Grid};

fn known_field() -> FieldBlock {
    FieldBlock::from_fn(4, 4, |(i, j)| 0.25 * i as f64 - 0.5 * (j * j) as f64 + 1.0)
}

#[test]
fn pgm_matches_golden_file() {
    let golden = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/field4x4.pgm")).unwrap();
    assert_eq!(field_to_pgm(&known_field()), golden);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.pgm");
    write_pgm(&known_field(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), golden);
}

#[test]
fn csv_file_round_trip() {
    let grid = Grid::new(4, 4, 2.5, 7.0).unwrap();
    let f = known_field().map(|v| v / 3.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/f.csv");
    write_field(&f, &grid, &path).unwrap();
    let (back, g) = read_field(&path).unwrap();
    assert_eq!(back, f);
    assert_eq!(g, grid);
}

#[test]
fn manifest_rederives_every_stream() {
    let mut config = ExperimentConfig::default();
    config.ensemble.seed = u64::MAX - 3;
    config.ensemble.n_ensemble = 3;
    let text = RunManifest::new("assimilate", &config).to_toml();
    let table: toml::Table = text.parse().unwrap();
    let master: u64 = table["master_seed"].as_str().unwrap().parse().unwrap();
    let streams = Streams::new(master, 3);
    let listed: Vec<(String, u64)> = table["streams"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            (
                s[0].as_str().unwrap().to_string(),
                s[1].as_str().unwrap().parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(listed, streams.seeds(config.ensemble.n_cycles));
    let echoed = epienkf::config::parse_config(table["config"].as_str().unwrap()).unwrap();
    assert_eq!(echoed, config);
}
