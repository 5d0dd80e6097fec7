use commsim::compress::{lazy_step, lowrank_compress, lowrank_decompress, LazyErrorBuffer, LowRankState};
use commsim::matrix::{orthonormality_defect, Matrix};
use proptest::prelude::*;

/// Frobenius error of the best rank-`r` approximation, from a full SVD.
fn truncation_error(m: &Matrix, r: usize) -> f64 {
    let dm = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let sv = dm.svd(false, false).singular_values;
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s[r..].iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn recon_error(m: &Matrix, st: &mut LowRankState) -> f64 {
    let p = lowrank_compress(m, st).unwrap();
    m.sub(&lowrank_decompress(&p).unwrap()).unwrap().frobenius_norm()
}

#[test]
fn q_reuse_approaches_svd_truncation() {
    let m = Matrix::seeded_normal(64, 64, 2024);
    let best = truncation_error(&m, 8);
    let mut st = LowRankState::new(8, 1);
    let errors: Vec<f64> = (0..10).map(|_| recon_error(&m, &mut st)).collect();
    for w in errors.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "error increased: {errors:?}");
    }
    let last = *errors.last().unwrap();
    assert!(last <= 2.0 * best, "last {last} vs best {best}");
    assert!(last >= best - 1e-9, "cannot beat the SVD");
}

#[test]
fn rank_one_exact_through_lazy_path() {
    let u = Matrix::seeded_normal(30, 1, 5);
    let v = Matrix::seeded_normal(20, 1, 6);
    let m = u.matmul_t(&v).unwrap();
    let mut buf = LazyErrorBuffer::new(30, 20);
    let mut st = LowRankState::new(1, 0);
    let rec = lowrank_decompress(&lazy_step(&m, &mut buf, &mut st).unwrap()).unwrap();
    assert!(rec.relative_error(&m).unwrap() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn step_is_definitionally_exact(n in 2usize..24, m in 2usize..24, r in 1usize..6, steps in 1usize..6, seed in any::<u64>()) {
        let mut buf = LazyErrorBuffer::new(n, m);
        let mut st = LowRankState::new(r, seed);
        for i in 0..steps {
            let g = Matrix::seeded_normal(n, m, seed.wrapping_add(i as u64));
            let input = g.add(buf.residual()).unwrap();
            let p = lazy_step(&g, &mut buf, &mut st).unwrap();
            prop_assert!(orthonormality_defect(&p.p_hat) < 1e-8);
            let rec = lowrank_decompress(&p).unwrap();
            let back = rec.add(buf.residual()).unwrap();
            prop_assert!(back.max_abs_diff(&input).unwrap() < 1e-12);
        }
    }

    #[test]
    fn repeated_compression_never_worsens(n in 4usize..32, m in 4usize..32, r in 1usize..4, seed in any::<u64>()) {
        let a = Matrix::seeded_normal(n, m, seed);
        let mut st = LowRankState::new(r, seed ^ 1);
        let mut prev = f64::INFINITY;
        for _ in 0..8 {
            let e = recon_error(&a, &mut st);
            prop_assert!(e <= prev + 1e-12);
            prev = e;
        }
    }
}
