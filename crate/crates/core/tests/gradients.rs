mod common;

use std::sync::Arc;

use ugcl::downstream::{init_gcn, record_gcn};
use ugcl::pipeline::{init_recon_params, recon_loss, record_recon, ReconInputs};
use ugcl::rng::{stream, Stream};
use ugcl::tensor::{finite_diff_grad, DenseMatrix, GradCheck, ParamStore, SparseOperator, Tape};
use ugcl::FusionParams;

fn analytic(store: &ParamStore, loss: impl FnOnce(&mut Tape, &ParamStore) -> ugcl::tensor::Var) -> ParamStore {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let mut grads = store.clone();
    grads.zero_grads();
    tape.backward(l, &mut grads).unwrap();
    grads
}

#[test]
fn reconstruction_loss_gradients_match_finite_differences() {
    let ds = common::six_node();
    let config = common::small_ugcl(0);
    let inputs = ReconInputs::new(&ds, &config.ppr).unwrap();
    let store = init_recon_params(6, 4, &config, 3).unwrap();

    let grads = analytic(&store, |tape, s| record_recon(tape, s, &inputs, &config, None).unwrap().loss);
    let numeric = finite_diff_grad(|p| Ok(recon_loss(p, &inputs, &config)?.total), &store, 1e-6).unwrap();
    let check = GradCheck::compare(&grads, &numeric, 1e-6).unwrap();
    assert!(check.max_relative < 1e-4, "{check:?}");
    assert!(check.max_absolute_small < 1e-8, "{check:?}");
    for name in ["imputer.w1", "imputer.b2", "pe.weight", "pe.bias", "ppnp.w0", "ppnp.w1"] {
        assert!(grads.grad(name).unwrap().max_abs() > 0.0, "no gradient reached {name}");
    }
}

#[test]
fn observed_entries_send_no_gradient_to_the_imputer() {
    let mut ds = common::six_node();
    ds = ugcl::graph::GraphDataset::fully_observed(
        ds.features().clone(),
        ds.edges().to_vec(),
        ds.labels().to_vec(),
        ds.num_classes(),
    )
    .unwrap();
    let config = common::small_ugcl(0);
    let inputs = ReconInputs::new(&ds, &config.ppr).unwrap();
    let store = init_recon_params(6, 4, &config, 1).unwrap();
    let grads = analytic(&store, |tape, s| record_recon(tape, s, &inputs, &config, None).unwrap().loss);
    for name in ["imputer.w1", "imputer.b1", "imputer.w2", "imputer.b2"] {
        assert_eq!(grads.grad(name).unwrap().max_abs(), 0.0, "{name}");
    }
}

#[test]
fn classifier_and_fusion_gradients_match_finite_differences() {
    let x_fr = DenseMatrix::from_fn(5, 3, |i, j| ((i * 3 + j * 2) % 5) as f64 * 0.3 - 0.6);
    let z_sr = DenseMatrix::from_fn(5, 3, |i, j| ((i + 4 * j) % 7) as f64 * 0.2 - 0.5);
    let prop = DenseMatrix::from_fn(5, 5, |i, j| if i == j { 0.5 } else if i.abs_diff(j) == 1 { 0.25 } else { 0.0 });
    let op = Arc::new(SparseOperator::from_dense(&prop));
    let targets = Arc::new(vec![(0, 1), (2, 0), (3, 2), (4, 1)]);
    let fusion = FusionParams::default();
    let mut store = ParamStore::new();
    fusion.init(&mut store, 3, 4, &mut stream(2, Stream::FusionInit)).unwrap();
    init_gcn(&mut store, 3, 6, 3, &mut stream(2, Stream::ClassifierInit)).unwrap();
    // Nonzero biases so that every parameter is exercised away from its initial point.
    store
        .set_value("fusion.proj_f.bias", DenseMatrix::from_fn(1, 4, |_, j| 0.1 * j as f64 - 0.15))
        .unwrap();
    store
        .set_value("fusion.proj_s.bias", DenseMatrix::from_fn(1, 4, |_, j| 0.05 - 0.07 * j as f64))
        .unwrap();

    let record = |tape: &mut Tape, s: &ParamStore| {
        let f = tape.constant(x_fr.clone());
        let z = tape.constant(z_sr.clone());
        let (x_hat, _) = fusion.record(tape, s, f, z).unwrap();
        let logits = record_gcn(tape, s, &op, x_hat, None).unwrap();
        let lp = tape.row_log_softmax(logits);
        tape.nll_mean(lp, &targets)
    };
    let grads = analytic(&store, record);
    let numeric = finite_diff_grad(
        |p| {
            let mut tape = Tape::new();
            let l = record(&mut tape, p);
            Ok(tape.scalar(l))
        },
        &store,
        1e-6,
    )
    .unwrap();
    let check = GradCheck::compare(&grads, &numeric, 1e-6).unwrap();
    assert!(check.max_relative < 1e-4, "{check:?}");
    assert!(check.max_absolute_small < 1e-8, "{check:?}");
    for name in [
        "fusion.proj_f.weight",
        "fusion.proj_s.weight",
        "fusion.score_f",
        "fusion.score_s",
    ] {
        assert!(grads.grad(name).unwrap().max_abs() > 0.0, "no gradient reached {name}");
    }
}
