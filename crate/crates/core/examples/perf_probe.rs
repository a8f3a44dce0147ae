use h2slice_core::problem::{build_problem, ProblemConfig};
use h2slice_core::mesh::Geometry;
use h2slice_core::dense;

fn main() {
    let prob = build_problem(&ProblemConfig::new(Geometry::LShape, 0)).unwrap();
    let a = prob.stiffness.to_dense();
    let b = prob.mass.to_dense();
    let oracle = dense::gen_eig(&a, &b).unwrap();
    for d in [-3e-5f64, -1e-5, 1e-5] {
        let sigma = oracle[2] + d;
        let mut m = a.clone();
        m.axpy(-sigma, &b);
        match dense::ldlt(&m, dense::DEFAULT_PIVOT_TOL) {
            Ok((l, diag)) => {
                let n = m.rows();
                let mut ld = l.clone();
                for i in 0..n {
                    for j in 0..n {
                        ld[(i, j)] *= diag[j];
                    }
                }
                let rec = ld.matmul_tr(&l);
                let res = rec.sub(&m).frobenius_norm() / m.frobenius_norm();
                let max_l = l.max_abs();
                let min_d = diag.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
                println!("sigma=lam3{d:+.0e}: dense unpivoted residual {res:.3e}, max|L| {max_l:.2e}, min|d| {min_d:.2e}");
            }
            Err(e) => println!("sigma=lam3{d:+.0e}: {e}"),
        }
    }
}
