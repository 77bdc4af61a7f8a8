//! Eigen-decomposition and LDA against nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use spkdistill::backend::lda;
use spkdistill::numerics::{eigh_symmetric, gaussian_draw};
use spkdistill::{Matrix, Rng};

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn sorted_desc(v: &DVector<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = v.iter().copied().collect();
    out.sort_by(|a, b| b.total_cmp(a));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigenpairs_match_nalgebra(n in 1usize..9, seed in any::<u64>()) {
        let a = gaussian_draw(&mut Rng::new(seed), 0.0, 1.0, n, n).unwrap();
        let s = Matrix::from_vec(n, n, (0..n * n).map(|k| {
            let (i, j) = (k / n, k % n);
            a[(i, j)] + a[(j, i)]
        }).collect()).unwrap();
        let (vals, vecs) = eigh_symmetric(&s).unwrap();
        let oracle = sorted_desc(&SymmetricEigen::new(to_na(&s)).eigenvalues);
        let scale = oracle.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (v, o) in vals.iter().zip(&oracle) {
            prop_assert!((v - o).abs() <= 1e-10 * scale, "{v} vs {o}");
        }
        // S·V = V·Λ and VᵀV = I
        let sv = to_na(&s) * to_na(&vecs);
        let vl = to_na(&vecs) * DMatrix::from_diagonal(&DVector::from_vec(vals.clone()));
        prop_assert!((sv - vl).amax() <= 1e-10 * scale);
        let vtv = to_na(&vecs).transpose() * to_na(&vecs);
        prop_assert!((vtv - DMatrix::identity(n, n)).amax() <= 1e-10);
    }
}

/// Within- and between-class scatter normalized by the row count, built
/// with nalgebra only.
fn scatter_oracle(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = x.shape();
    let global = x.row_mean().transpose();
    let mut sw = DMatrix::zeros(d, d);
    let mut sb = DMatrix::zeros(d, d);
    for c in 0..classes {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mean = rows.iter().fold(DVector::zeros(d), |acc, &i| acc + x.row(i).transpose()) / rows.len() as f64;
        for &i in &rows {
            let r = x.row(i).transpose() - &mean;
            sw += &r * r.transpose();
        }
        let m = &mean - &global;
        sb += (&m * m.transpose()) * rows.len() as f64;
    }
    (sw / n as f64, sb / n as f64)
}

#[test]
fn lda_solves_the_generalized_problem() {
    let mut rng = Rng::new(31);
    let (d, classes, per) = (6, 9, 12);
    let centers = gaussian_draw(&mut rng, 0.0, 2.0, classes, d).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per {
            // correlated within-class noise so S_w is far from identity
            let z: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            rows.push((0..d).map(|j| centers[(c, j)] + z[j] + 0.8 * z[(j + 1) % d]).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    let x = Matrix::from_rows(&rows).unwrap();
    let dim = 4;
    let (proj, vals) = lda(&x, &labels, dim).unwrap();

    let (sw, sb) = scatter_oracle(&to_na(&x), &labels, classes);
    let l = sw.clone().cholesky().expect("within scatter is positive definite").l();
    let l_inv = l.clone().try_inverse().unwrap();
    let c = &l_inv * &sb * l_inv.transpose();
    let eig = SymmetricEigen::new(c.clone());
    let oracle = sorted_desc(&eig.eigenvalues);
    for (v, o) in vals.iter().zip(&oracle) {
        assert!((v - o).abs() <= 1e-9 * oracle[0], "{v} vs {o}");
    }

    let p = to_na(&proj);
    // S_b v = λ S_w v and vᵀ S_w v = 1 per column
    for j in 0..dim {
        let v = p.column(j);
        let residual = &sb * v - (&sw * v) * vals[j];
        assert!(residual.amax() <= 1e-9 * oracle[0], "column {j}: {}", residual.amax());
        assert!(((v.transpose() * &sw * v)[(0, 0)] - 1.0).abs() <= 1e-10);
    }
    // oracle eigenvectors mapped back, compared up to sign
    for j in 0..dim {
        let idx = {
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            order[j]
        };
        let w = l_inv.transpose() * eig.eigenvectors.column(idx);
        let v = p.column(j);
        let cos = (v.dot(&w) / (v.norm() * w.norm())).abs();
        assert!((cos - 1.0).abs() <= 1e-8, "column {j}: |cos| = {cos}");
    }
}
