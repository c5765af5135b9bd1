//! Shared fixtures for the benchmark targets.

use flatmatch_core::data::{make_dataset, split_ssl, Batch, DatasetKind, SslDataset};
use flatmatch_core::model::MlpSpec;
use flatmatch_core::rng;

pub struct Fixture {
    pub model: MlpSpec,
    pub ds: SslDataset,
    pub x_l: Batch,
    pub y_l: Vec<usize>,
    pub x_u: Batch,
}

/// Deterministic two-moons fixture with pre-drawn batches.
pub fn fixture(hidden: usize, labeled_batch: usize, mu: usize) -> Fixture {
    let full = make_dataset(DatasetKind::TwoMoons, 500, 0.1, 2, rng::derived_seed(0, "dataset")).unwrap();
    let ds = split_ssl(&full, 4, 0.2, rng::derived_seed(0, "split")).unwrap();
    let model = MlpSpec::new(2, vec![hidden, hidden], 2).unwrap();
    let (lxs, lys) = ds.labeled();
    let rows: Vec<Vec<f64>> = (0..labeled_batch).map(|i| lxs[i % lxs.len()].clone()).collect();
    let y_l: Vec<usize> = (0..labeled_batch).map(|i| lys[i % lys.len()]).collect();
    let x_l = Batch::from_rows(&rows);
    let urows: Vec<Vec<f64>> =
        (0..labeled_batch * mu).map(|i| ds.unlabeled()[i % ds.n_unlabeled()].clone()).collect();
    let x_u = Batch::from_rows(&urows);
    Fixture { model, ds, x_l, y_l, x_u }
}
