//! Acceptance suite: every release gate in one sequential run.
//!
//! Each criterion prints one `ACCEPTANCE <k> ... PASS|FAIL|SOFT` line
//! (visible with `cargo test --test acceptance -- --nocapture`). Hard
//! gates fail the test; soft gates (the parallel speedup number, which
//! depends on the host's core count) are logged with their measured
//! values. The criteria run inside a single test function so wall-clock
//! measurements are not polluted by concurrently running tests.

use std::time::Instant;

use h2slice_core::arithmetic::{add_lowrank_global, add_lowrank_local, UpdateCtx};
use h2slice_core::dense::{self, DenseMatrix};
use h2slice_core::h2::TruncationControl;
use h2slice_core::mesh::{reference_eigenvalues_unit_square, Geometry};
use h2slice_core::problem::{build_problem, Problem, ProblemConfig};
use h2slice_core::slicing::{compute_eigenvalues, nu, shifted_residual, slice, SliceOptions, SliceRun};
use h2slice_core::testing::Lcg;

const EPS_EV: f64 = 1e-5;
const EPS_COMP: f64 = 1e-8;
/// Worker count used by the scheduled runs (matches the reference box).
const WORKERS: usize = 2;

struct Gate {
    label: String,
    passed: bool,
    soft: bool,
    detail: String,
}

struct Report {
    gates: Vec<Gate>,
}

impl Report {
    fn new() -> Report {
        Report { gates: Vec::new() }
    }

    fn record(&mut self, label: &str, passed: bool, detail: String) {
        println!("ACCEPTANCE {label}: {} — {detail}", if passed { "PASS" } else { "FAIL" });
        self.gates.push(Gate { label: label.into(), passed, soft: false, detail });
    }

    fn record_soft(&mut self, label: &str, passed: bool, detail: String) {
        let status = if passed { "PASS" } else { "SOFT-FAIL (logged, not gating)" };
        println!("ACCEPTANCE {label}: {status} — {detail}");
        self.gates.push(Gate { label: label.into(), passed: true, soft: true, detail });
    }

    fn finish(self) {
        let failed: Vec<String> = self
            .gates
            .iter()
            .filter(|g| !g.passed && !g.soft)
            .map(|g| format!("{}: {}", g.label, g.detail))
            .collect();
        assert!(failed.is_empty(), "failed acceptance criteria: {failed:?}");
    }
}

fn square_problem(r: usize) -> Problem {
    build_problem(&ProblemConfig::new(Geometry::UnitSquare, r)).expect("problem assembles")
}

fn run_eight(p: &h2slice_core::slicing::Pencil, workers: usize, eps: f64) -> SliceRun {
    let opts = SliceOptions {
        eps_ev: EPS_EV,
        control: TruncationControl::weighted(eps),
        workers,
        task_granularity: Some(1),
    };
    compute_eigenvalues(p, 1, 8, &opts).expect("slicing run completes")
}

fn estimates(run: &SliceRun) -> Vec<f64> {
    run.outcomes
        .iter()
        .map(|o| o.result.as_ref().expect("no task failures").estimate)
        .collect()
}

fn max_abs_error(run: &SliceRun, oracle: &[f64]) -> f64 {
    run.outcomes
        .iter()
        .map(|o| {
            let r = o.result.as_ref().expect("no task failures");
            (r.estimate - oracle[o.index - 1]).abs()
        })
        .fold(0.0, f64::max)
}

fn containment_violations(run: &SliceRun, oracle: &[f64]) -> usize {
    run.outcomes
        .iter()
        .filter(|o| {
            let r = o.result.as_ref().expect("no task failures");
            let exact = oracle[o.index - 1];
            !(r.lower <= exact && exact <= r.upper)
        })
        .count()
}

#[test]
fn acceptance_criteria() {
    let mut report = Report::new();
    let t_suite = Instant::now();

    // shared problems and oracles
    let prob225 = square_problem(0);
    let prob961 = square_problem(1);
    let oracle225 = dense::sym_eig(&prob225.matrix.to_dense().unwrap());
    let oracle961 = dense::sym_eig(&prob961.matrix.to_dense().unwrap());

    // ── 1: eigenvalue accuracy, standard problem ────────────────────
    let run225 = run_eight(&prob225.pencil(false).unwrap(), WORKERS, EPS_COMP);
    let t961 = Instant::now();
    let run961 = run_eight(&prob961.pencil(false).unwrap(), WORKERS, EPS_COMP);
    let run961_wall = t961.elapsed().as_secs_f64();
    let err225 = max_abs_error(&run225, &oracle225);
    let err961 = max_abs_error(&run961, &oracle961);
    report.record(
        "1 standard accuracy",
        err225 <= 1e-5 && err961 <= 1e-5,
        format!("max|err| n=225: {err225:.3e}, n=961: {err961:.3e} (gate 1e-5; reference 3.15e-6 / 2.84e-6)"),
    );

    // ── 2: eigenvalue accuracy, generalized problem ─────────────────
    // the absolute eps_ev at pencil eigenvalues near 130 asks for ~1e-7
    // relative counting accuracy, so the factorization runs one decade
    // tighter than the standard problem
    let gen_oracle961 = dense::gen_eig(&prob961.stiffness.to_dense(), &prob961.mass.to_dense())
        .expect("mass matrix is SPD");
    let gen_run961 = run_eight(&prob961.pencil(true).unwrap(), WORKERS, 1e-9);
    let gen_err = max_abs_error(&gen_run961, &gen_oracle961);
    report.record(
        "2 generalized accuracy",
        gen_err <= 1e-5,
        format!("max|err| n=961 generalized: {gen_err:.3e} (gate 1e-5)"),
    );

    // ── 3: interval containment ─────────────────────────────────────
    let violations = containment_violations(&run225, &oracle225)
        + containment_violations(&run961, &oracle961)
        + containment_violations(&gen_run961, &gen_oracle961);
    report.record(
        "3 interval containment",
        violations == 0,
        format!("{violations} violations over 24 intervals (gate: zero)"),
    );

    // ── 4: FEM convergence of the smallest generalized eigenvalue ───
    {
        let exact = reference_eigenvalues_unit_square(1)[0];
        let control = TruncationControl::weighted(1e-6);
        let mut errors = Vec::new();
        for r in 0..=3 {
            let prob = square_problem(r);
            let p = prob.pencil(true).unwrap();
            let res = slice(&p, 1, 19.5, 20.5, EPS_EV, &control).expect("smallest eigenvalue");
            errors.push((res.estimate - exact).abs());
        }
        let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
        let ok = ratios.iter().all(|&r| (3.2..=4.8).contains(&r));
        report.record(
            "4 FEM convergence",
            ok,
            format!(
                "errors vs 2*pi^2: {:?}, consecutive ratios {:?} (gate [3.2, 4.8])",
                errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
                ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
            ),
        );
    }

    // ── 5: inertia correctness on 20 random shifts ──────────────────
    {
        let p = prob961.pencil(false).unwrap();
        let control = TruncationControl::weighted(EPS_COMP);
        let lo = oracle961[0];
        let hi = oracle961[oracle961.len() - 1];
        let mut rng = Lcg::new(20260810);
        let mut tested = 0;
        let mut correct = 0;
        while tested < 20 {
            let sigma = lo + (rng.next_f64() * 0.5 + 0.5) * (hi - lo);
            if oracle961.iter().any(|&v| (v - sigma).abs() < 1e-6) {
                continue;
            }
            tested += 1;
            let count = nu(&p, sigma, &control).expect("count evaluates").count;
            let expected = oracle961.iter().filter(|&&v| v < sigma).count();
            if count == expected {
                correct += 1;
            }
        }
        report.record(
            "5 inertia correctness",
            correct == 20,
            format!("{correct}/20 shifts matched the dense oracle exactly"),
        );
    }

    // ── 6: blockwise recompression bound ────────────────────────────
    {
        let mut rng = Lcg::new(8128);
        let mut trials = 0;
        let mut worst_rel = 0.0f64;
        let mut ok = true;
        'outer: for &eps in &[1e-4f64, 1e-6, 1e-8] {
            for trial in 0..34 {
                let side = [8usize, 12, 16][trial % 3];
                let mut c = h2slice_core::testing::stencil_h2(side, 8);
                c.symmetric = false;
                let before = c.to_dense().unwrap();
                let n = c.dim();
                let k = 1 + trial % 3;
                let x = rng.matrix(n, k);
                let y = rng.matrix(n, k);
                add_lowrank_global(&mut c, &x, &y, &TruncationControl::weighted(eps)).unwrap();
                let after = c.to_dense().unwrap();
                let mut exact = before.clone();
                exact.axpy(1.0, &x.matmul_tr(&y));
                let tree = c.tree().clone();
                let btree = c.block_tree().clone();
                for id in btree.leaves() {
                    let blk = btree.block(id);
                    if !blk.admissible {
                        continue;
                    }
                    let rc = tree.cluster(blk.row);
                    let cc = tree.cluster(blk.col);
                    let mut err = 0.0;
                    let mut norm = 0.0;
                    for i in rc.start..rc.end {
                        for j in cc.start..cc.end {
                            let d = after[(i, j)] - exact[(i, j)];
                            err += d * d;
                            norm += exact[(i, j)] * exact[(i, j)];
                        }
                    }
                    let rel = err.sqrt() / norm.sqrt().max(1e-300);
                    worst_rel = worst_rel.max(rel / eps);
                    if rel > eps {
                        ok = false;
                        break 'outer;
                    }
                }
                trials += 1;
            }
        }
        report.record(
            "6 blockwise recompression bound",
            ok && trials >= 100,
            format!("{trials} trials, worst block error / eps = {worst_rel:.3}"),
        );
    }

    // ── 7: factorization residual ───────────────────────────────────
    {
        let p = prob961.pencil(false).unwrap();
        let control = TruncationControl::weighted(EPS_COMP);
        let span = oracle961[oracle961.len() - 1] - oracle961[0];
        let mut worst = 0.0f64;
        for i in 0..5 {
            let sigma = oracle961[0] + span * (0.13 + 0.19 * i as f64);
            let res = shifted_residual(&p, sigma, &control).expect("residual evaluates");
            worst = worst.max(res);
        }
        report.record(
            "7 factorization residual",
            worst <= 1e-6,
            format!("worst relative Frobenius residual over 5 shifts: {worst:.3e} (gate 1e-6)"),
        );
    }

    // ── 8: local/global update equivalence ──────────────────────────
    {
        let base = h2slice_core::testing::stencil_h2(8, 16); // 3-level tree
        let control = TruncationControl::weighted(EPS_COMP);
        let n = base.dim();
        let btree = base.block_tree().clone();
        let tree = base.tree().clone();
        let n_blocks = btree.len();
        let mut rng = Lcg::new(517);
        let mut worst = 0.0f64;
        let mut trials = 0;
        let mut ok = true;
        while trials < 50 {
            let b0 = trials % n_blocks; // every block gets exercised
            let blk = btree.block(b0);
            let rt = tree.cluster(blk.row);
            let cs = tree.cluster(blk.col);
            let x = rng.matrix(rt.len(), 2);
            let y = rng.matrix(cs.len(), 2);
            let mut local = base.clone();
            local.symmetric = false;
            let mut ctx = UpdateCtx::build(&local, &control);
            add_lowrank_local(&mut local, &mut ctx, b0, &x, &y).unwrap();
            let mut xg = DenseMatrix::zeros(n, 2);
            let mut yg = DenseMatrix::zeros(n, 2);
            for i in 0..rt.len() {
                for j in 0..2 {
                    xg[(rt.start + i, j)] = x[(i, j)];
                }
            }
            for i in 0..cs.len() {
                for j in 0..2 {
                    yg[(cs.start + i, j)] = y[(i, j)];
                }
            }
            let mut global = base.clone();
            global.symmetric = false;
            add_lowrank_global(&mut global, &xg, &yg, &control).unwrap();
            let diff = local.to_dense().unwrap().sub(&global.to_dense().unwrap()).frobenius_norm();
            let bound = 2.0 * control.eps * x.matmul_tr(&y).frobenius_norm().max(1.0);
            worst = worst.max(diff / bound);
            if diff > bound {
                ok = false;
                break;
            }
            trials += 1;
        }
        report.record(
            "8 local/global equivalence",
            ok,
            format!(
                "{trials} updates over {n_blocks} blocks, worst diff / (2 eps ||update||) = {worst:.3}"
            ),
        );
    }

    // ── 9: scaling trend ────────────────────────────────────────────
    // per-slice time = mean count-evaluation time inside the 8-smallest
    // workload, the same construction as the reference runtime table
    let prob3969 = square_problem(2);
    let t3969 = Instant::now();
    let run3969_w2 = run_eight(&prob3969.pencil(false).unwrap(), WORKERS, EPS_COMP);
    let run3969_wall = t3969.elapsed().as_secs_f64();
    {
        let mean961 = run961.nu_eval_times.iter().sum::<f64>() / run961.nu_eval_times.len() as f64;
        let mean3969 =
            run3969_w2.nu_eval_times.iter().sum::<f64>() / run3969_w2.nu_eval_times.len() as f64;
        let ratio = mean3969 / mean961;
        let fifteen_slices = 15.0 * mean3969;
        report.record(
            "9 scaling trend",
            ratio <= 14.0 && fifteen_slices < 300.0,
            format!(
                "t_slice(3969)/t_slice(961) = {ratio:.1} (gate 14), 15 slices at n=3969 = {fifteen_slices:.0}s (gate 300s); full 8-ev runs: {run961_wall:.0}s / {run3969_wall:.0}s"
            ),
        );
    }

    // ── 10: parallel determinism (hard) and speedup (soft) ──────────
    {
        let p = prob3969.pencil(false).unwrap();
        let t1 = Instant::now();
        let run_w1 = run_eight(&p, 1, EPS_COMP);
        let wall_w1 = t1.elapsed().as_secs_f64();
        let t4 = Instant::now();
        let run_w4 = run_eight(&p, 4, EPS_COMP);
        let wall_w4 = t4.elapsed().as_secs_f64();
        let e1 = estimates(&run_w1);
        let e2 = estimates(&run3969_w2);
        let e4 = estimates(&run_w4);
        let identical = e1 == e2 && e1 == e4;
        report.record(
            "10a parallel determinism",
            identical,
            format!("workers 1/2/4 estimates bit-identical: {identical}"),
        );
        let speedup = wall_w1 / wall_w4;
        let cores = std::thread::available_parallelism().map(|c| c.get()).unwrap_or(1);
        report.record_soft(
            "10b parallel speedup",
            speedup >= 2.0,
            format!(
                "speedup at 4 workers = {speedup:.2} ({wall_w1:.0}s -> {wall_w4:.0}s on a {cores}-core host; gate 2.0 assumes >= 4 cores)"
            ),
        );
    }

    println!("acceptance suite wall time: {:.0}s", t_suite.elapsed().as_secs_f64());
    report.finish();
}
