use std::path::PathBuf;

use interpdn_core::config::preset;
use interpdn_core::dataio::{apply_scaler, fit_scaler, load_csv, split, SplitSpec};
use interpdn_core::training::prepare_data;

fn path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ETTh1.csv")
}

#[test]
fn etth1_loads_and_splits() {
    let series = load_csv(path()).unwrap();
    assert_eq!(series.channels(), 7);
    assert!(series.len() >= 8545 + 2881 + 2881);
    assert_eq!(series.channel_names.last().map(String::as_str), Some("OT"));
    let parts = split(&series, SplitSpec::new(8545, 2881, 2881)).unwrap();
    assert_eq!((parts.train.len(), parts.val.len(), parts.test.len()), (8545, 2881, 2881));
    assert_eq!(parts.val.timestamps[0], series.timestamps[8545]);

    let scaler = fit_scaler(&parts.train).unwrap();
    let z = apply_scaler(&parts.train, &scaler).unwrap();
    for col in z.values.columns() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn etth1_96_window_counts() {
    let cfg = preset("etth1_96").unwrap();
    let data = prepare_data(&load_csv(path()).unwrap(), &cfg).unwrap();
    assert_eq!(data.train.windows(), 8545 - 512 - 96 + 1);
    assert_eq!(data.val.windows(), 2881 - 96 + 1);
    assert_eq!(data.test.windows(), 2881 - 96 + 1);
    assert_eq!(data.test.first_row, 8545 + 2881 - 512);
}
