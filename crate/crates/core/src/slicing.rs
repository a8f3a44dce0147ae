//! The eigenvalue driver: counting eigenvalues below a shift through the
//! inertia of a shifted factorization, bisection until the enclosing
//! interval is narrower than the tolerance, and a master/worker scheduler
//! that hands disjoint intervals to a pool of workers.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::arithmetic::{self, ArithError, TreeMaps};
use crate::h2::{H2Error, H2Matrix, TruncationControl};
use crate::mesh::SparseMatrix;

/// Stopping width for bisection.
pub const DEFAULT_EPS_EV: f64 = 1e-5;

/// Retries with perturbed shifts before a factorization counts as failed.
const MAX_SHIFT_RETRIES: usize = 5;

#[derive(Debug, Clone, Error)]
pub enum SliceError {
    #[error("factorization failed at shift {sigma} after {attempts} perturbed retries")]
    FactorizationFailed { sigma: f64, attempts: usize },
    #[error("spectrum bound search did not terminate")]
    BoundsSearchFailed,
    #[error("invalid eigenvalue index range {lo}..={hi} for dimension {n}")]
    InvalidRange { lo: usize, hi: usize, n: usize },
    #[error(transparent)]
    Structure(#[from] H2Error),
}

/// Symmetric-definite pencil `(A, B)`; `B = None` means the standard
/// problem `A - sigma I`.
#[derive(Debug, Clone)]
pub struct Pencil {
    a: H2Matrix,
    b: Option<SparseMatrix>,
}

impl Pencil {
    /// Wrap a symmetric matrix and an optional mass matrix. Every nonzero
    /// of `B` must fall inside an inadmissible leaf of `A`'s block tree.
    pub fn new(a: H2Matrix, b: Option<SparseMatrix>) -> Result<Pencil, SliceError> {
        assert!(a.symmetric, "pencil needs a symmetric stiffness matrix");
        if let Some(mass) = &b {
            assert_eq!(mass.dim(), a.dim(), "mass matrix dimension mismatch");
            check_overlay(&a, mass)?;
        }
        Ok(Pencil { a, b })
    }

    pub fn standard(a: H2Matrix) -> Result<Pencil, SliceError> {
        Pencil::new(a, None)
    }

    pub fn matrix(&self) -> &H2Matrix {
        &self.a
    }

    pub fn mass(&self) -> Option<&SparseMatrix> {
        self.b.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn is_generalized(&self) -> bool {
        self.b.is_some()
    }
}

fn check_overlay(a: &H2Matrix, mass: &SparseMatrix) -> Result<(), SliceError> {
    let tree = a.tree();
    let btree = a.block_tree();
    let inv = tree.inverse_permutation();
    for (i, j, v) in mass.iter() {
        if v == 0.0 {
            continue;
        }
        let leaf = btree.leaf_at(tree, tree, inv[i], inv[j]);
        if btree.block(leaf).admissible {
            return Err(SliceError::Structure(H2Error::StructureMismatch {
                block: leaf,
                row: i,
                col: j,
            }));
        }
    }
    Ok(())
}

/// Deep copy of `A` with `sigma * B` (or `sigma * I`) subtracted inside
/// the nearfield blocks; admissible blocks are untouched. The sparsity
/// structure of `B` is re-checked against the block tree.
pub fn shift(p: &Pencil, sigma: f64) -> Result<H2Matrix, SliceError> {
    let mut m = p.a.clone();
    let tree = m.tree().clone();
    let btree = m.block_tree().clone();
    match &p.b {
        None => {
            for id in btree.leaves() {
                let blk = btree.block(id);
                if blk.admissible || blk.row != blk.col {
                    continue;
                }
                let nf = m.nearfield_mut(id);
                for i in 0..nf.rows() {
                    nf[(i, i)] -= sigma;
                }
            }
        }
        Some(mass) => {
            let inv = tree.inverse_permutation();
            for (i, j, v) in mass.iter() {
                if v == 0.0 {
                    continue;
                }
                let pi = inv[i];
                let pj = inv[j];
                let leaf = btree.leaf_at(&tree, &tree, pi, pj);
                let blk = btree.block(leaf);
                if blk.admissible {
                    return Err(SliceError::Structure(H2Error::StructureMismatch {
                        block: leaf,
                        row: i,
                        col: j,
                    }));
                }
                let r0 = tree.cluster(blk.row).start;
                let c0 = tree.cluster(blk.col).start;
                let nf = m.nearfield_mut(leaf);
                nf[(pi - r0, pj - c0)] -= sigma * v;
            }
        }
    }
    Ok(m)
}

/// Outcome of one eigenvalue-count evaluation.
#[derive(Debug, Clone, Copy)]
pub struct NuEval {
    /// Number of pencil eigenvalues strictly below the shift.
    pub count: usize,
    /// Largest cluster rank seen in the factorization.
    pub max_rank: usize,
}

/// nu(sigma): eigenvalues below `sigma`, via the inertia of the shifted
/// factorization. A pivot breakdown perturbs the shift by
/// `(1+j) * 1e-9 * scale` (scale = ||A||_F / n) and retries a few times.
pub fn nu(p: &Pencil, sigma: f64, control: &TruncationControl) -> Result<NuEval, SliceError> {
    let scale = p.a.approx_frobenius_norm() / p.a.dim() as f64;
    let mut attempt = 0usize;
    loop {
        let sigma_eff = if attempt == 0 { sigma } else { sigma + attempt as f64 * 1e-9 * scale };
        let shifted = shift(p, sigma_eff)?;
        match arithmetic::ldlt(&shifted, control) {
            Ok(mut factors) => {
                factors.shift = sigma_eff;
                let (neg, _) = arithmetic::inertia(&factors);
                return Ok(NuEval { count: neg, max_rank: factors.max_rank_seen });
            }
            Err(ArithError::PivotBreakdown { .. }) if attempt < MAX_SHIFT_RETRIES => {
                attempt += 1;
            }
            Err(ArithError::PivotBreakdown { .. }) => {
                return Err(SliceError::FactorizationFailed { sigma, attempts: attempt })
            }
            Err(ArithError::InvalidBlock(b)) => {
                unreachable!("factorization touched a foreign block {b}")
            }
        }
    }
}

/// Expose the factorization needed by `nu` for diagnostics: the shifted
/// matrix and its factors at one shift, without retries.
pub fn shifted_ldlt(
    p: &Pencil,
    sigma: f64,
    control: &TruncationControl,
) -> Result<arithmetic::LdltFactors, SliceError> {
    let shifted = shift(p, sigma)?;
    match arithmetic::ldlt(&shifted, control) {
        Ok(mut f) => {
            f.shift = sigma;
            Ok(f)
        }
        Err(ArithError::PivotBreakdown { .. }) => {
            Err(SliceError::FactorizationFailed { sigma, attempts: 0 })
        }
        Err(ArithError::InvalidBlock(b)) => unreachable!("foreign block {b}"),
    }
}

/// An interval `[a, b]` with `nu(a) = 0` and `nu(b) = n`, found by outward
/// doubling from a norm-based initial guess.
pub fn spectrum_bounds(p: &Pencil, control: &TruncationControl) -> Result<(f64, f64), SliceError> {
    let n = p.dim();
    let norm = p.a.approx_frobenius_norm();
    let scale = match &p.b {
        None => norm,
        Some(mass) => {
            let min_diag = (0..mass.dim())
                .map(|i| mass.get(i, i))
                .fold(f64::INFINITY, f64::min)
                .max(f64::MIN_POSITIVE);
            norm / min_diag
        }
    };
    let s = scale * 1.01 + f64::MIN_POSITIVE;
    let mut a = -s;
    let mut b = s;
    for iter in 0.. {
        if iter > 60 {
            return Err(SliceError::BoundsSearchFailed);
        }
        if nu(p, a, control)?.count == 0 {
            break;
        }
        a *= 2.0;
    }
    for iter in 0.. {
        if iter > 60 {
            return Err(SliceError::BoundsSearchFailed);
        }
        if nu(p, b, control)?.count == n {
            break;
        }
        b *= 2.0;
    }
    Ok((a, b))
}

/// Result of enclosing one eigenvalue.
#[derive(Debug, Clone)]
pub struct EigenResult {
    /// 1-based eigenvalue index (ascending order).
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    /// Midpoint of the final interval.
    pub estimate: f64,
    /// Count evaluations on the bisection path that produced this result.
    pub nu_evaluations: usize,
    /// Factorization time accumulated along that path.
    pub wall_time: Duration,
    pub max_rank_seen: usize,
}

/// Work unit of the scheduler: an interval with known counts at both ends
/// and the eigenvalue indices to extract from it.
#[derive(Debug, Clone)]
pub struct SlicingTask {
    pub lower: f64,
    pub upper: f64,
    pub nu_lower: usize,
    pub nu_upper: usize,
    pub index_lo: usize,
    pub index_hi: usize,
}

/// Bisect `[a, b]` until it is narrower than `eps_ev` around the `m`-th
/// smallest eigenvalue. Requires (and verifies) `nu(a) < m <= nu(b)`.
pub fn slice(
    p: &Pencil,
    m: usize,
    a: f64,
    b: f64,
    eps_ev: f64,
    control: &TruncationControl,
) -> Result<EigenResult, SliceError> {
    let start = Instant::now();
    let na = nu(p, a, control)?;
    let nb = nu(p, b, control)?;
    assert!(
        na.count < m && m <= nb.count,
        "slice precondition: nu({a}) = {} < {m} <= nu({b}) = {}",
        na.count,
        nb.count
    );
    let task = SlicingTask {
        lower: a,
        upper: b,
        nu_lower: na.count,
        nu_upper: nb.count,
        index_lo: m,
        index_hi: m,
    };
    let mut outcomes = Vec::new();
    let mut eval_times = Vec::new();
    let seed_rank = na.max_rank.max(nb.max_rank);
    let seed = PathState { evals: 2, time: start.elapsed(), max_rank: seed_rank };
    run_task(p, &task, eps_ev, control, seed, &mut outcomes, &mut eval_times);
    match outcomes.pop().expect("one index requested").result {
        Ok(r) => Ok(r),
        Err(e) => Err(e),
    }
}

/// Per-index outcome of a scheduled run; failed factorizations abort only
/// the task that hit them.
#[derive(Debug, Clone)]
pub struct EigenOutcome {
    pub index: usize,
    pub result: Result<EigenResult, SliceError>,
}

#[derive(Debug, Clone, Copy)]
struct PathState {
    evals: usize,
    time: Duration,
    max_rank: usize,
}

/// Depth-first bisection of one task, sharing count evaluations between
/// the indices it contains.
fn run_task(
    p: &Pencil,
    task: &SlicingTask,
    eps_ev: f64,
    control: &TruncationControl,
    state: PathState,
    out: &mut Vec<EigenOutcome>,
    eval_times: &mut Vec<f64>,
) {
    let width = task.upper - task.lower;
    let mid = 0.5 * (task.lower + task.upper);
    if width < eps_ev || mid <= task.lower || mid >= task.upper {
        for m in task.index_lo..=task.index_hi {
            out.push(EigenOutcome {
                index: m,
                result: Ok(EigenResult {
                    index: m,
                    lower: task.lower,
                    upper: task.upper,
                    estimate: mid,
                    nu_evaluations: state.evals,
                    wall_time: state.time,
                    max_rank_seen: state.max_rank,
                }),
            });
        }
        return;
    }
    let t0 = Instant::now();
    let nm = match nu(p, mid, control) {
        Ok(v) => v,
        Err(e) => {
            for m in task.index_lo..=task.index_hi {
                out.push(EigenOutcome { index: m, result: Err(e.clone()) });
            }
            return;
        }
    };
    let dt = t0.elapsed();
    eval_times.push(dt.as_secs_f64());
    let next = PathState {
        evals: state.evals + 1,
        time: state.time + dt,
        max_rank: state.max_rank.max(nm.max_rank),
    };
    // indices m with nu_lower < m <= nm live in the left half
    let left_hi = task.index_hi.min(nm.count);
    if task.index_lo <= left_hi {
        run_task(
            p,
            &SlicingTask {
                lower: task.lower,
                upper: mid,
                nu_lower: task.nu_lower,
                nu_upper: nm.count,
                index_lo: task.index_lo,
                index_hi: left_hi,
            },
            eps_ev,
            control,
            next,
            out,
            eval_times,
        );
    }
    let right_lo = task.index_lo.max(nm.count + 1);
    if right_lo <= task.index_hi {
        run_task(
            p,
            &SlicingTask {
                lower: mid,
                upper: task.upper,
                nu_lower: nm.count,
                nu_upper: task.nu_upper,
                index_lo: right_lo,
                index_hi: task.index_hi,
            },
            eps_ev,
            control,
            next,
            out,
            eval_times,
        );
    }
}

/// Options for [`compute_eigenvalues`].
#[derive(Debug, Clone, Copy)]
pub struct SliceOptions {
    pub eps_ev: f64,
    pub control: TruncationControl,
    pub workers: usize,
    /// Target eigenvalues per task; `None` means
    /// `ceil(count / (4 * workers))`. Fix it explicitly when comparing
    /// runs across worker counts: the task layout (hence every bisection
    /// path) is a pure function of the pencil and this value.
    pub task_granularity: Option<usize>,
}

impl Default for SliceOptions {
    fn default() -> Self {
        SliceOptions {
            eps_ev: DEFAULT_EPS_EV,
            control: TruncationControl::default(),
            workers: 1,
            task_granularity: None,
        }
    }
}

/// Aggregate outcome of a scheduled run.
#[derive(Debug, Clone)]
pub struct SliceRun {
    /// One outcome per requested index, sorted by index.
    pub outcomes: Vec<EigenOutcome>,
    /// Spectrum bounds the scheduler worked from.
    pub bounds: (f64, f64),
    /// Wall time of every count evaluation (seconds); ordering follows
    /// completion and is not deterministic.
    pub nu_eval_times: Vec<f64>,
}

enum Job {
    Nu { id: usize, sigma: f64 },
    Task(SlicingTask),
}

enum JobOut {
    Nu { id: usize, result: Result<NuEval, SliceError>, seconds: f64 },
    Task { outcomes: Vec<EigenOutcome>, eval_times: Vec<f64> },
}

/// Compute eigenvalues `index_lo..=index_hi` of the pencil with a
/// master/worker pool.
///
/// The master finds spectrum bounds, splits the interval by count
/// evaluations into tasks holding at most `task_granularity` target
/// eigenvalues, and dispatches them to `workers` threads, each owning a
/// private deep copy of the pencil. Results are merged by index; for a
/// fixed granularity the estimates are bit-identical for any worker
/// count.
pub fn compute_eigenvalues(
    p: &Pencil,
    index_lo: usize,
    index_hi: usize,
    opts: &SliceOptions,
) -> Result<SliceRun, SliceError> {
    let n = p.dim();
    if index_lo < 1 || index_lo > index_hi || index_hi > n {
        return Err(SliceError::InvalidRange { lo: index_lo, hi: index_hi, n });
    }
    let workers = opts.workers.max(1);
    let count = index_hi - index_lo + 1;
    let granularity = opts
        .task_granularity
        .unwrap_or_else(|| count.div_ceil(4 * workers))
        .max(1);
    let bounds = spectrum_bounds(p, &opts.control)?;
    let mut eval_times = Vec::new();

    let outcomes = std::thread::scope(|scope| -> Result<Vec<EigenOutcome>, SliceError> {
        let (job_tx, job_rx) = crossbeam_channel::unbounded::<Job>();
        let (out_tx, out_rx) = crossbeam_channel::unbounded::<JobOut>();
        for _ in 0..workers {
            let rx = job_rx.clone();
            let tx = out_tx.clone();
            let pencil = p.clone();
            let control = opts.control;
            let eps_ev = opts.eps_ev;
            scope.spawn(move || {
                while let Ok(job) = rx.recv() {
                    match job {
                        Job::Nu { id, sigma } => {
                            let t0 = Instant::now();
                            let result = nu(&pencil, sigma, &control);
                            let seconds = t0.elapsed().as_secs_f64();
                            if tx.send(JobOut::Nu { id, result, seconds }).is_err() {
                                return;
                            }
                        }
                        Job::Task(task) => {
                            let mut outcomes = Vec::new();
                            let mut times = Vec::new();
                            let seed = PathState {
                                evals: 0,
                                time: Duration::ZERO,
                                max_rank: 0,
                            };
                            run_task(&pencil, &task, eps_ev, &control, seed, &mut outcomes, &mut times);
                            if tx.send(JobOut::Task { outcomes, eval_times: times }).is_err() {
                                return;
                            }
                        }
                    }
                }
            });
        }
        drop(out_tx);

        // phase 1: split the spectrum into tasks by parallel count
        // evaluations, breadth-first
        let mut intervals = vec![SlicingTask {
            lower: bounds.0,
            upper: bounds.1,
            nu_lower: 0,
            nu_upper: n,
            index_lo,
            index_hi,
        }];
        loop {
            let mut next: Vec<SlicingTask> = Vec::new();
            let mut pending: Vec<(usize, SlicingTask)> = Vec::new();
            for task in intervals.drain(..) {
                let targets = task.index_hi - task.index_lo + 1;
                let width = task.upper - task.lower;
                let mid = 0.5 * (task.lower + task.upper);
                if targets <= granularity || width < opts.eps_ev || mid <= task.lower || mid >= task.upper {
                    next.push(task);
                } else {
                    let id = pending.len();
                    job_tx.send(Job::Nu { id, sigma: mid }).expect("workers alive");
                    pending.push((id, task));
                }
            }
            if pending.is_empty() {
                intervals = next;
                break;
            }
            let mut mids: Vec<Option<NuEval>> = vec![None; pending.len()];
            for _ in 0..pending.len() {
                match out_rx.recv().expect("workers alive") {
                    JobOut::Nu { id, result, seconds } => {
                        eval_times.push(seconds);
                        mids[id] = Some(result?);
                    }
                    JobOut::Task { .. } => unreachable!("no tasks dispatched yet"),
                }
            }
            for (id, task) in pending {
                let nm = mids[id].expect("answered");
                let mid = 0.5 * (task.lower + task.upper);
                let left_hi = task.index_hi.min(nm.count);
                if task.index_lo <= left_hi {
                    next.push(SlicingTask {
                        lower: task.lower,
                        upper: mid,
                        nu_lower: task.nu_lower,
                        nu_upper: nm.count,
                        index_lo: task.index_lo,
                        index_hi: left_hi,
                    });
                }
                let right_lo = task.index_lo.max(nm.count + 1);
                if right_lo <= task.index_hi {
                    next.push(SlicingTask {
                        lower: mid,
                        upper: task.upper,
                        nu_lower: nm.count,
                        nu_upper: task.nu_upper,
                        index_lo: right_lo,
                        index_hi: task.index_hi,
                    });
                }
            }
            intervals = next;
        }

        // phase 2: dispatch the slicing tasks
        let n_tasks = intervals.len();
        for task in intervals.drain(..) {
            job_tx.send(Job::Task(task)).expect("workers alive");
        }
        drop(job_tx);
        let mut outcomes = Vec::new();
        for _ in 0..n_tasks {
            match out_rx.recv().expect("workers alive") {
                JobOut::Task { outcomes: mut task_out, eval_times: times } => {
                    eval_times.extend(times);
                    outcomes.append(&mut task_out);
                }
                JobOut::Nu { .. } => unreachable!("splitting already finished"),
            }
        }
        Ok(outcomes)
    })?;

    let mut outcomes = outcomes;
    outcomes.sort_by_key(|o| o.index);
    Ok(SliceRun { outcomes, bounds, nu_eval_times: eval_times })
}

/// Helper for diagnostics and tests: dense residual of a shifted
/// factorization against the dense shifted matrix.
pub fn shifted_residual(p: &Pencil, sigma: f64, control: &TruncationControl) -> Result<f64, SliceError> {
    let shifted = shift(p, sigma)?;
    let reference = shifted.to_dense().map_err(SliceError::Structure)?;
    let mut f = shifted_ldlt(p, sigma, control)?;
    Ok(arithmetic::factorization_residual(&mut f, &reference))
}

/// Diagonal-block ids of the tree, used by callers that need to touch
/// shifted diagonals directly.
pub fn tree_maps(m: &H2Matrix) -> TreeMaps {
    TreeMaps::build(m.tree(), m.block_tree())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_block_tree, build_cluster_tree};
    use crate::dense;
    use crate::h2::from_sparse;
    use crate::mesh::SparseMatrix;
    use crate::testing::{grid_trees, stencil_h2, stencil_sparse, Lcg};
    use std::sync::Arc;

    fn diagonal_pencil(values: &[f64]) -> Pencil {
        let n = values.len();
        let pts: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, 0.0]).collect();
        let tree = Arc::new(build_cluster_tree(&pts, 4));
        let btree = Arc::new(build_block_tree(&tree, &tree, 1.0));
        let triplets: Vec<(usize, usize, f64)> =
            values.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        let a = from_sparse(&SparseMatrix::from_triplets(n, &triplets), &tree, &btree).unwrap();
        Pencil::standard(a).unwrap()
    }

    fn stencil_pencil(side: usize) -> Pencil {
        Pencil::standard(stencil_h2(side, 8)).unwrap()
    }

    #[test]
    fn shift_zero_is_a_copy() {
        let p = stencil_pencil(6);
        let shifted = shift(&p, 0.0).unwrap();
        let a = p.matrix().to_dense().unwrap();
        let s = shifted.to_dense().unwrap();
        assert!(a.sub(&s).max_abs() == 0.0);
    }

    #[test]
    fn shift_standard_touches_only_diagonal() {
        let p = stencil_pencil(6);
        let shifted = shift(&p, 1.0).unwrap();
        let mut expected = p.matrix().to_dense().unwrap();
        for i in 0..expected.rows() {
            expected[(i, i)] -= 1.0;
        }
        let s = shifted.to_dense().unwrap();
        assert!(s.sub(&expected).max_abs() == 0.0);
    }

    #[test]
    fn shift_generalized_matches_dense() {
        // mass matrix shares the stencil sparsity pattern
        let side = 6;
        let a_sparse = stencil_sparse(side);
        let (tree, btree) = grid_trees(side, 8, 1.0);
        let a = from_sparse(&a_sparse, &tree, &btree).unwrap();
        // synthetic SPD mass: diagonally dominant on the same pattern
        let n = side * side;
        let mut triplets = Vec::new();
        for (i, j, v) in a_sparse.iter() {
            triplets.push((i, j, if i == j { 2.0 } else { 0.1 * v }));
        }
        let b = SparseMatrix::from_triplets(n, &triplets);
        let p = Pencil::new(a, Some(b.clone())).unwrap();
        let sigma = 0.37;
        let shifted = shift(&p, sigma).unwrap();
        let s = shifted.to_dense().unwrap();
        let mut expected = p.matrix().to_dense().unwrap();
        let inv = p.matrix().tree().inverse_permutation();
        for (i, j, v) in b.iter() {
            expected[(inv[i], inv[j])] -= sigma * v;
        }
        assert!(s.sub(&expected).max_abs() < 1e-15);
    }

    #[test]
    fn nu_on_diagonal_matrix() {
        let p = diagonal_pencil(&[1.0, 2.0, 3.0]);
        let control = TruncationControl::default();
        assert_eq!(nu(&p, 2.5, &control).unwrap().count, 2);
        assert_eq!(nu(&p, 0.0, &control).unwrap().count, 0);
        assert_eq!(nu(&p, 10.0, &control).unwrap().count, 3);
    }

    #[test]
    fn nu_below_gershgorin_bound_is_zero() {
        let p = stencil_pencil(8);
        // all Gershgorin discs sit inside [0, 8]
        let control = TruncationControl::default();
        assert_eq!(nu(&p, -0.5, &control).unwrap().count, 0);
    }

    #[test]
    fn nu_matches_dense_counts_mid_spectrum() {
        let p = stencil_pencil(8);
        let oracle = dense::sym_eig(&p.matrix().to_dense().unwrap());
        let control = TruncationControl::default();
        // counting is only reliable a healthy distance from the spectrum:
        // probe the middles of all reasonably wide gaps
        let n = oracle.len();
        let mut verified = 0;
        for idx in 1..n {
            if oracle[idx] - oracle[idx - 1] < 1e-3 {
                continue;
            }
            let sigma = 0.5 * (oracle[idx - 1] + oracle[idx]);
            assert_eq!(nu(&p, sigma, &control).unwrap().count, idx, "sigma {sigma}");
            verified += 1;
        }
        assert!(verified >= 10, "only {verified} gaps wide enough");
    }

    #[test]
    fn spectrum_bounds_bracket_everything() {
        let p = diagonal_pencil(&[1.0, 2.0, 3.0]);
        let control = TruncationControl::default();
        let (a, b) = spectrum_bounds(&p, &control).unwrap();
        assert!(a < 1.0 && b > 3.0);

        let p = stencil_pencil(6);
        let (a, _b) = spectrum_bounds(&p, &control).unwrap();
        // SPD matrix: lower bound may be negative, count must be zero
        assert_eq!(nu(&p, a, &control).unwrap().count, 0);
    }

    #[test]
    fn slice_two_by_two() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0]];
        let tree = Arc::new(build_cluster_tree(&pts, 2));
        let btree = Arc::new(build_block_tree(&tree, &tree, 1.0));
        let s = SparseMatrix::from_triplets(2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)]);
        let a = from_sparse(&s, &tree, &btree).unwrap();
        let p = Pencil::standard(a).unwrap();
        let control = TruncationControl::default();
        let r = slice(&p, 1, 0.0, 4.0, 1e-5, &control).unwrap();
        assert!((r.estimate - 1.0).abs() < 1e-5, "estimate {}", r.estimate);
        assert!(r.upper - r.lower < 1e-5);
        let r = slice(&p, 2, 0.0, 4.0, 1e-5, &control).unwrap();
        assert!((r.estimate - 3.0).abs() < 1e-5);
    }

    #[test]
    fn slice_diagonal_top_eigenvalue() {
        let p = diagonal_pencil(&[1.0, 2.0, 3.0]);
        let control = TruncationControl::default();
        let r = slice(&p, 3, 0.0, 8.0, 1e-5, &control).unwrap();
        assert!((r.estimate - 3.0).abs() < 1e-5);
        assert!(r.nu_evaluations > 2);
    }

    #[test]
    fn full_spectrum_of_small_diagonal() {
        let values: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let p = diagonal_pencil(&values);
        let opts = SliceOptions { workers: 2, ..Default::default() };
        let run = compute_eigenvalues(&p, 1, 10, &opts).unwrap();
        assert_eq!(run.outcomes.len(), 10);
        for (i, o) in run.outcomes.iter().enumerate() {
            assert_eq!(o.index, i + 1);
            let r = o.result.as_ref().unwrap();
            assert!((r.estimate - (i + 1) as f64).abs() < 1e-5, "index {}", o.index);
            assert!(r.upper - r.lower < 1e-5);
        }
    }

    #[test]
    fn worker_counts_agree_bitwise() {
        let p = stencil_pencil(8);
        let mut estimates: Vec<Vec<f64>> = Vec::new();
        for workers in [1usize, 2, 4] {
            let opts = SliceOptions {
                workers,
                task_granularity: Some(1),
                ..Default::default()
            };
            let run = compute_eigenvalues(&p, 1, 6, &opts).unwrap();
            estimates.push(
                run.outcomes
                    .iter()
                    .map(|o| o.result.as_ref().unwrap().estimate)
                    .collect(),
            );
        }
        assert_eq!(estimates[0], estimates[1]);
        assert_eq!(estimates[0], estimates[2]);
    }

    #[test]
    fn intervals_contain_oracle_eigenvalues() {
        let p = stencil_pencil(8);
        let oracle = dense::sym_eig(&p.matrix().to_dense().unwrap());
        let opts = SliceOptions { workers: 2, ..Default::default() };
        let run = compute_eigenvalues(&p, 1, 8, &opts).unwrap();
        for o in &run.outcomes {
            let r = o.result.as_ref().unwrap();
            let exact = oracle[o.index - 1];
            assert!(
                r.lower <= exact && exact <= r.upper,
                "index {}: {exact} outside [{}, {}]",
                o.index,
                r.lower,
                r.upper
            );
        }
    }

    #[test]
    fn nu_is_monotone_over_a_shift_grid() {
        let p = stencil_pencil(6);
        let control = TruncationControl::default();
        let mut last = 0usize;
        for i in 0..12 {
            let sigma = 0.3 + i as f64 * 0.6;
            let c = nu(&p, sigma, &control).unwrap().count;
            assert!(c >= last, "nu dropped at {sigma}");
            last = c;
        }
    }

    #[test]
    fn accuracy_condition_implies_exact_counts() {
        // whenever the factorization residual is below the distance to
        // the spectrum, the count matches the oracle
        let p = stencil_pencil(6);
        let ad = p.matrix().to_dense().unwrap();
        let oracle = dense::sym_eig(&ad);
        let control = TruncationControl::default();
        let mut rng = Lcg::new(41);
        let span = oracle[oracle.len() - 1] - oracle[0];
        let mut verified = 0;
        for _ in 0..10 {
            let sigma = oracle[0] + (rng.next_f64() * 0.5 + 0.5) * span;
            let min_dist = oracle.iter().map(|v| (v - sigma).abs()).fold(f64::INFINITY, f64::min);
            if min_dist < 1e-9 {
                continue;
            }
            let Ok(res) = shifted_residual(&p, sigma, &control) else { continue };
            let shifted_norm = {
                let mut m = ad.clone();
                for i in 0..m.rows() {
                    m[(i, i)] -= sigma;
                }
                m.frobenius_norm()
            };
            if res * shifted_norm < min_dist {
                let count = nu(&p, sigma, &control).unwrap().count;
                let expected = oracle.iter().filter(|&&v| v < sigma).count();
                assert_eq!(count, expected, "sigma {sigma}");
                verified += 1;
            }
        }
        assert!(verified >= 5, "only {verified} shifts verified");
    }

    #[test]
    fn invalid_index_range_is_rejected() {
        let p = diagonal_pencil(&[1.0, 2.0]);
        let opts = SliceOptions::default();
        assert!(matches!(
            compute_eigenvalues(&p, 0, 1, &opts),
            Err(SliceError::InvalidRange { .. })
        ));
        assert!(matches!(
            compute_eigenvalues(&p, 1, 3, &opts),
            Err(SliceError::InvalidRange { .. })
        ));
    }

    #[test]
    fn pencil_rejects_farfield_mass_entries() {
        let side = 8;
        let (tree, btree) = grid_trees(side, 8, 1.0);
        assert!(btree.stats().n_admissible_leaves > 0);
        let n = side * side;
        let a = from_sparse(&stencil_sparse(side), &tree, &btree).unwrap();
        // a mass matrix coupling the two farthest DOFs cannot be stored
        let bad = SparseMatrix::from_triplets(n, &[(0, n - 1, 1.0), (n - 1, 0, 1.0)]);
        assert!(matches!(
            Pencil::new(a, Some(bad)),
            Err(SliceError::Structure(H2Error::StructureMismatch { .. }))
        ));
    }

    #[test]
    fn clustered_eigenvalues_share_intervals() {
        let p = diagonal_pencil(&[1.0, 1.0, 1.0, 5.0]);
        let opts = SliceOptions { workers: 1, ..Default::default() };
        let run = compute_eigenvalues(&p, 1, 3, &opts).unwrap();
        let r1 = run.outcomes[0].result.as_ref().unwrap();
        let r3 = run.outcomes[2].result.as_ref().unwrap();
        assert_eq!(r1.lower, r3.lower);
        assert_eq!(r1.upper, r3.upper);
        assert!((r1.estimate - 1.0).abs() < 1e-5);
    }
}
