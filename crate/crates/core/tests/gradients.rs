use pathbench_core::nn::{grad_check, AttentionMil, LinearProbe, Matrix};
use pathbench_core::Rng;
use proptest::prelude::*;

fn random_matrix(n: usize, d: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.standard_normal()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn linear_probe_gradients(seed: u64, dim in 1usize..=16, classes in 2usize..=5, batch in 1usize..=8) {
        let mut rng = Rng::new(seed);
        let mut m = LinearProbe::init(classes, dim, &mut rng);
        let x = random_matrix(batch, dim, &mut rng);
        let y: Vec<usize> = (0..batch).map(|_| rng.below(classes as u64) as usize).collect();
        let r = grad_check(&mut m, &x, &y, 1e-4).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }

    #[test]
    fn attention_mil_gradients(seed: u64, dim in 1usize..=16, hidden in 1usize..=8, classes in 2usize..=3, n in 1usize..=8) {
        let mut rng = Rng::new(seed);
        let mut m = AttentionMil::init(dim, hidden, classes, &mut rng).unwrap();
        let bag = random_matrix(n, dim, &mut rng);
        let y = rng.below(classes as u64) as usize;
        let r = grad_check(&mut m, &bag, &[y], 1e-4).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }
}
