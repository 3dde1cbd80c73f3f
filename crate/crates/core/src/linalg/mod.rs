//! Dense linear algebra and deterministic random streams.

mod matrix;
mod rng;

pub use matrix::{matmul, matmul_nt, matmul_tn, DenseMatrix};
pub use rng::{gaussian_matrix, EntityKind, RngStream, StreamId};

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matmul_is_associative(
            n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6, seed in 0u64..1000
        ) {
            let mut rng = RngStream::new(seed, EntityKind::Test, 0, 0);
            let a: DenseMatrix<f64> = gaussian_matrix(n, m, 1.0, &mut rng);
            let b = gaussian_matrix(m, p, 1.0, &mut rng);
            let c = gaussian_matrix(p, q, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            prop_assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-10);
        }
    }
}
