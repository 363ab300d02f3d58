//! Acceptance suite. Prints one verdict line per criterion and exits nonzero
//! if any criterion fails. Set `UGCL_CORA_DIR` to a Cora export to enable the
//! dataset check; it is skipped otherwise.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;
use ugcl::experiment::{ExperimentReport, MethodKind, SummaryRow};
use ugcl::feature_path::{impute_features, init_imputer};
use ugcl::graph::{apply_mask, load_dataset, make_splits, GraphDataset, MaskSpec, SplitRatios};
use ugcl::pipeline::{init_recon_params, recon_loss, record_recon, ReconInputs};
use ugcl::rng::{stream, Rng, Stream};
use ugcl::structure_path::{knn_sparsify, normalize_adjacency, ppr_closed_form, ppr_power_iteration};
use ugcl::tensor::{finite_diff_grad, DenseMatrix, GradCheck, ParamStore, Tape};
use ugcl::{
    attention_fuse, feature_contrastive_loss, ppnp_forward, run_experiment_on, run_ugcl, structure_contrastive_loss,
    train_downstream, DownstreamConfig, ExperimentConfig, FusionParams, UgclConfig,
};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(1);
const PPR_GRAPHS: usize = 50;
const PPR_ALPHAS: [f64; 3] = [0.1, 0.5, 0.9];
const PPR_POWER_TOL: f64 = 1e-10;
const PPR_MATCH_TOL: f64 = 1e-8;
const PPR_BUDGET: Duration = Duration::from_secs(10);
const RECOVERY_BUDGET: Duration = Duration::from_secs(120);
const SWEEP_RATES: [f64; 5] = [0.15, 0.35, 0.55, 0.75, 0.95];
const SWEEP_SLACK: f64 = 0.01;
const SWEEP_BUDGET: Duration = Duration::from_secs(600);
const CORA_BUDGET: Duration = Duration::from_secs(900);
const CORA_RANGE: (f64, f64) = (0.82, 0.88);
const CORA_MARGIN: f64 = 0.01;

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Line {
    id: usize,
    name: &'static str,
    verdict: Verdict,
    detail: String,
}

fn verdict(ok: bool) -> Verdict {
    if ok {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

fn gradient_soundness() -> Line {
    let start = Instant::now();
    let ds = common::six_node();
    let config = common::small_ugcl(0);
    let inputs = ReconInputs::new(&ds, &config.ppr).unwrap();
    let store = init_recon_params(6, 4, &config, 3).unwrap();
    let mut tape = Tape::new();
    let loss = record_recon(&mut tape, &store, &inputs, &config, None).unwrap().loss;
    let mut grads = store.clone();
    grads.zero_grads();
    tape.backward(loss, &mut grads).unwrap();
    let numeric = finite_diff_grad(|p| Ok(recon_loss(p, &inputs, &config)?.total), &store, 1e-6).unwrap();
    let check = GradCheck::compare(&grads, &numeric, 1e-6).unwrap();
    let elapsed = start.elapsed();
    let covered = numeric.len() == store.names().count();
    Line {
        id: 1,
        name: "gradient soundness",
        verdict: verdict(check.max_relative < GRAD_TOL && covered && elapsed < GRAD_BUDGET),
        detail: format!(
            "max relative error {:.2e} over {} parameters (limit {GRAD_TOL:e}), {:.3}s (limit {}s)",
            check.max_relative,
            numeric.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    }
}

fn random_edges(rng: &mut Rng, n: usize) -> Vec<(usize, usize)> {
    let p = rng.random_range(0.02..0.3);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    edges
}

fn ppr_equivalence() -> Line {
    let start = Instant::now();
    let mut rng = stream(2024, Stream::Generator);
    let mut worst = 0.0f64;
    let mut all_converged = true;
    for _ in 0..PPR_GRAPHS {
        let n = rng.random_range(2..=100);
        let adj = normalize_adjacency(&random_edges(&mut rng, n), n);
        for alpha in PPR_ALPHAS {
            let exact = ppr_closed_form(&adj, alpha).unwrap();
            let iterated = ppr_power_iteration(&adj, alpha, PPR_POWER_TOL, 100_000).unwrap();
            all_converged &= iterated.converged;
            worst = worst.max(exact.max_abs_diff(&iterated.matrix));
        }
    }
    let two = ppr_closed_form(&normalize_adjacency(&[(0, 1)], 2), 0.5).unwrap();
    let expected = DenseMatrix::new(2, 2, vec![0.75, 0.25, 0.25, 0.75]).unwrap();
    let two_err = two.max_abs_diff(&expected);
    let elapsed = start.elapsed();
    Line {
        id: 2,
        name: "ppr oracle equivalence",
        verdict: verdict(worst < PPR_MATCH_TOL && all_converged && two_err < 1e-12 && elapsed < PPR_BUDGET),
        detail: format!(
            "{PPR_GRAPHS} graphs x {} alphas, max |power - closed| {worst:.2e} (limit {PPR_MATCH_TOL:e}), two-node error {two_err:.1e}, {:.2}s (limit {}s)",
            PPR_ALPHAS.len(),
            elapsed.as_secs_f64(),
            PPR_BUDGET.as_secs()
        ),
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
}

fn permute_rows(x: &DenseMatrix, p: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| x.get(p[i], j))
}

fn invariants() -> Line {
    let mut rng = stream(7, Stream::Generator);
    let mut failed: Vec<&str> = Vec::new();
    let mut check = |name, ok: bool| {
        if !ok && !failed.contains(&name) {
            failed.push(name);
        }
    };
    for trial in 0..32u64 {
        let x = random_matrix(&mut rng, 6, 4);
        let mask: Vec<bool> = (0..24).map(|_| rng.random::<bool>()).collect();
        let mut store = ParamStore::new();
        init_imputer(&mut store, 4, 6, &mut stream(trial, Stream::ReconInit)).unwrap();
        let imputed = impute_features(&x, &mask, &store).unwrap();
        check(
            "observed entries",
            mask.iter()
                .enumerate()
                .all(|(i, &m)| !m || imputed.data()[i].to_bits() == x.data()[i].to_bits()),
        );

        let a = DenseMatrix::from_fn(8, 8, |_, _| rng.random::<f64>());
        let k = rng.random_range(1..8);
        let s = knn_sparsify(&a, k);
        check(
            "knn sparsity",
            (0..8).all(|i| s.row(i).iter().filter(|&&v| v != 0.0).count() <= k),
        );
        check("knn idempotence", knn_sparsify(&s, k) == s);

        let z = random_matrix(&mut rng, 6, 4);
        let mut fstore = ParamStore::new();
        FusionParams::default()
            .init(&mut fstore, 4, 5, &mut stream(trial, Stream::FusionInit))
            .unwrap();
        let fused = attention_fuse(&x, &z, &FusionParams::default(), &fstore).unwrap();
        check(
            "fusion weights",
            (0..6).all(|i| (fused.weights.get(i, 0) + fused.weights.get(i, 1) - 1.0).abs() < 1e-12),
        );
        check(
            "fusion convexity",
            (0..6).all(|i| {
                (0..4).all(|j| {
                    let (lo, hi) = (x.get(i, j).min(z.get(i, j)), x.get(i, j).max(z.get(i, j)));
                    (lo - 1e-12..=hi + 1e-12).contains(&fused.x_hat.get(i, j))
                })
            }),
        );

        let scaled = DenseMatrix::from_fn(6, 4, |i, j| x.get(i, j) * (1.0 + i as f64));
        let (l0, l1) = (
            feature_contrastive_loss(&x, &z, 0.5).unwrap(),
            feature_contrastive_loss(&scaled, &z, 0.5).unwrap(),
        );
        let sq = DenseMatrix::from_fn(6, 6, |_, _| rng.random::<f64>());
        let sq2 = DenseMatrix::from_fn(6, 6, |_, _| rng.random::<f64>());
        let sq_scaled = DenseMatrix::from_fn(6, 6, |i, j| sq.get(i, j) * (0.5 + i as f64));
        let (s0, s1) = (
            structure_contrastive_loss(&sq, &sq2, 0.5).unwrap(),
            structure_contrastive_loss(&sq_scaled, &sq2, 0.5).unwrap(),
        );
        check("loss rescaling", (l0 - l1).abs() < 1e-9 && (s0 - s1).abs() < 1e-9);

        let n = 10;
        let adj = normalize_adjacency(&random_edges(&mut rng, n), n);
        let a_sr = knn_sparsify(&ppr_closed_form(&adj, 0.2).unwrap(), 3);
        let (xp, w0, w1) = (random_matrix(&mut rng, n, 4), random_matrix(&mut rng, 4, 3), random_matrix(&mut rng, 3, 2));
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        let pa = DenseMatrix::from_fn(n, n, |i, j| a_sr.get(p[i], p[j]));
        let out = ppnp_forward(&a_sr, &xp, &w0, &w1).unwrap();
        let pout = ppnp_forward(&pa, &permute_rows(&xp, &p), &w0, &w1).unwrap();
        check("ppnp equivariance", pout.max_abs_diff(&permute_rows(&out, &p)) < 1e-12);
    }

    let ds = common::sbm_fixture();
    for seed in 0..10 {
        let splits = make_splits(&ds, SplitRatios::default(), seed).unwrap();
        let mut all: Vec<usize> = splits.train.iter().chain(&splits.val).chain(&splits.test).copied().collect();
        all.sort_unstable();
        check("split disjointness", all == (0..ds.n()).collect::<Vec<_>>());
    }

    let run = || {
        let masked = apply_mask(&ds, &MaskSpec::new(0.3, 0.3, 5)).unwrap();
        let splits = make_splits(&masked, SplitRatios::default(), 5).unwrap();
        let config = UgclConfig { epochs: 20, ..UgclConfig::default() };
        let state = run_ugcl(&masked, &config, 5).unwrap();
        let dcfg = DownstreamConfig { max_epochs: 60, ..DownstreamConfig::default() };
        let out = train_downstream(&masked, &state, &splits, &dcfg, 5).unwrap();
        (state.x_fr, state.z_sr, out.metrics, out.fusion.unwrap().x_hat)
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    check(
        "bit determinism",
        a.0 == b.0 && a.1 == b.1 && a.3 == b.3 && bits(&a.2.loss_curve) == bits(&b.2.loss_curve) && a.2 == b.2,
    );

    Line {
        id: 3,
        name: "invariant suite",
        verdict: verdict(failed.is_empty()),
        detail: if failed.is_empty() {
            "observed entries, knn sparsity and idempotence, fusion convexity and weights, loss rescaling, ppnp equivariance, split disjointness, bit determinism all hold".into()
        } else {
            format!("violated: {}", failed.join(", "))
        },
    }
}

fn sweep(rates: &[f64], seeds: &str) -> (ExperimentReport, Duration) {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::default();
    let list = rates.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
    config.set("feature_missing", &list).unwrap();
    config.set("edge_missing", &list).unwrap();
    config.set("seeds", seeds).unwrap();
    config.out = dir.path().to_path_buf();
    let start = Instant::now();
    let report = run_experiment_on(&config, &common::sbm_fixture()).unwrap();
    (report, start.elapsed())
}

fn row(report: &ExperimentReport, rate_index: usize, method: MethodKind) -> &SummaryRow {
    report
        .summary
        .rows
        .iter()
        .filter(|r| r.method == method)
        .nth(rate_index)
        .unwrap()
}

fn synthetic_recovery() -> Line {
    let (report, elapsed) = sweep(&[0.3], "0..10");
    let (u, g) = (row(&report, 0, MethodKind::Ugcl), row(&report, 0, MethodKind::Gcn));
    Line {
        id: 4,
        name: "synthetic recovery",
        verdict: verdict(u.mean_test_accuracy > g.mean_test_accuracy && elapsed < RECOVERY_BUDGET),
        detail: format!(
            "30%/30% masking, {} seeds: ugcl {:.4} (sd {:.4}) vs zero-fill gcn {:.4} (sd {:.4}), strict exceedance required, {:.1}s (limit {}s)",
            u.runs,
            u.mean_test_accuracy,
            u.sd_test_accuracy,
            g.mean_test_accuracy,
            g.sd_test_accuracy,
            elapsed.as_secs_f64(),
            RECOVERY_BUDGET.as_secs()
        ),
    }
}

fn rate_monotonicity() -> Line {
    let (report, elapsed) = sweep(&SWEEP_RATES, "0..10");
    let ugcl: Vec<f64> = (0..SWEEP_RATES.len())
        .map(|i| row(&report, i, MethodKind::Ugcl).mean_test_accuracy)
        .collect();
    let gcn: Vec<f64> = (0..SWEEP_RATES.len())
        .map(|i| row(&report, i, MethodKind::Gcn).mean_test_accuracy)
        .collect();
    let rises: Vec<f64> = ugcl.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    // Accuracies are multiples of 1/20 averaged over seeds, so compare with a
    // little room for rounding in the sums.
    let ok = rises.is_empty() || (rises.len() == 1 && rises[0] <= SWEEP_SLACK + 1e-12);
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ");
    Line {
        id: 5,
        name: "missing-rate monotonicity",
        verdict: verdict(ok && elapsed < SWEEP_BUDGET),
        detail: format!(
            "rates {:?}: ugcl {} (gcn {}), {} rise(s), {:.1}s (limit {}s)",
            SWEEP_RATES,
            fmt(&ugcl),
            fmt(&gcn),
            rises.len(),
            elapsed.as_secs_f64(),
            SWEEP_BUDGET.as_secs()
        ),
    }
}

fn cora(dir: PathBuf) -> Line {
    let ds: GraphDataset = load_dataset(&dir).unwrap();
    let out = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        out: out.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let report = run_experiment_on(&config, &ds).unwrap();
    let elapsed = start.elapsed();
    let (u, g) = (row(&report, 0, MethodKind::Ugcl), row(&report, 0, MethodKind::Gcn));
    let m = u.mean_test_accuracy;
    let ok = (CORA_RANGE.0..=CORA_RANGE.1).contains(&m) && m >= g.mean_test_accuracy + CORA_MARGIN && elapsed < CORA_BUDGET;
    Line {
        id: 6,
        name: "dataset check",
        verdict: verdict(ok),
        detail: format!(
            "{}: ugcl {m:.4} (range {:?}), gcn {:.4}, margin {:.4} (needs {CORA_MARGIN}), {:.1}s (limit {}s)",
            dir.display(),
            CORA_RANGE,
            g.mean_test_accuracy,
            m - g.mean_test_accuracy,
            elapsed.as_secs_f64(),
            CORA_BUDGET.as_secs()
        ),
    }
}

fn dataset_check() -> Line {
    match std::env::var_os("UGCL_CORA_DIR") {
        Some(dir) => cora(dir.into()),
        None => Line {
            id: 6,
            name: "dataset check",
            verdict: Verdict::Skip,
            detail: "UGCL_CORA_DIR not set".into(),
        },
    }
}

fn main() -> ExitCode {
    let criteria: [fn() -> Line; 6] = [
        gradient_soundness,
        ppr_equivalence,
        invariants,
        synthetic_recovery,
        rate_monotonicity,
        dataset_check,
    ];
    let mut failures = 0;
    for criterion in criteria {
        let line = criterion();
        let tag = match line.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failures += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} [{}] {}: {}", line.id, line.name, line.detail);
    }
    if failures > 0 {
        println!("acceptance: {failures} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all criteria passed or skipped");
        ExitCode::SUCCESS
    }
}
