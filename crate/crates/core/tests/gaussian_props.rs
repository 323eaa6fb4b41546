//! Gaussian and PPCA density checks against explicit-inverse formulas.

use mpt_core::gaussian::{GaussianJoint, LN_2PI};
use mpt_core::masking::{sample_mask, sample_mask_size, MaskPair};
use mpt_core::ppca::{lml, sample_dataset, PpcaParams};
use mpt_core::rng::RngKey;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_joint(dim: usize, seed: u64) -> (GaussianJoint, DVector<f64>) {
    let mut rng = RngKey::new(seed).rng();
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cov = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.5;
    let mean = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = DVector::from_fn(dim, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    (GaussianJoint::new(mean, cov).unwrap(), x)
}

fn pick(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn pick_v(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Log density via an explicit inverse and an LU determinant.
fn naive_log_density(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let r = x - mean;
    let inv = cov.clone().try_inverse().unwrap();
    let det = cov.clone().lu().determinant();
    -0.5 * (x.len() as f64 * LN_2PI + det.ln() + (r.transpose() * inv * &r)[(0, 0)])
}

#[test]
fn log_density_matches_explicit_inverse() {
    for seed in 0..30 {
        let dim = 1 + (seed as usize % 8);
        let (joint, x) = random_joint(dim, seed);
        let expected = naive_log_density(joint.mean(), joint.cov(), &x);
        assert!((joint.log_density(&x).unwrap() - expected).abs() < 1e-9 * (1.0 + expected.abs()));
    }
}

#[test]
fn conditional_matches_explicit_inverse() {
    for seed in 0..40 {
        let dim = 2 + (seed as usize % 7);
        let (joint, x) = random_joint(dim, 100 + seed);
        let mut rng = RngKey::new(seed).rng();
        let size = rng.random_range(1..dim);
        let mask = sample_mask(dim, size, &mut rng).unwrap();
        let (m, r) = (mask.masked(), mask.rest());
        let s_rr_inv = pick(joint.cov(), r, r).try_inverse().unwrap();
        let s_mr = pick(joint.cov(), m, r);
        let mean = pick_v(joint.mean(), m) + &s_mr * &s_rr_inv * (pick_v(&x, r) - pick_v(joint.mean(), r));
        let cov = pick(joint.cov(), m, m) - &s_mr * &s_rr_inv * s_mr.transpose();
        let cond = joint.conditional(&mask, &pick_v(&x, r)).unwrap();
        assert!((&cond.mean - &mean).amax() < 1e-9);
        assert!((&cond.cov - &cov).amax() < 1e-9);
        let xm = pick_v(&x, m);
        let expected = naive_log_density(&mean, &cov, &xm);
        assert!((cond.log_density(&xm).unwrap() - expected).abs() < 1e-8 * (1.0 + expected.abs()));
        let tokens = cond.token_log_densities(&xm).unwrap();
        for (j, t) in tokens.iter().enumerate() {
            let e = naive_log_density(&DVector::from_element(1, mean[j]), &DMatrix::from_element(1, 1, cov[(j, j)]), &DVector::from_element(1, xm[j]));
            assert!((t - e).abs() < 1e-9 * (1.0 + e.abs()));
        }
    }
}

#[test]
fn ppca_lml_is_rotation_invariant() {
    let p = PpcaParams::random(6, 3, 1.0, 0.5, -0.3, RngKey::new(3)).unwrap();
    let data = sample_dataset(&p, 40, 9).unwrap();
    let mut rng = RngKey::new(4).rng();
    let q = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
    let rotated = PpcaParams::new(&p.w * q, p.mu.clone(), p.log_sigma2).unwrap();
    let (a, b) = (lml(&p, &data).unwrap(), lml(&rotated, &data).unwrap());
    assert!((a - b).abs() < 1e-9 * a.abs());
}

#[test]
fn ppca_lml_is_permutation_invariant() {
    let p = PpcaParams::random(5, 2, 1.0, 0.5, 0.2, RngKey::new(8)).unwrap();
    let data = sample_dataset(&p, 30, 1).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let permuted_rows = DMatrix::from_fn(30, 5, |i, j| data.rows[(i, perm[j])]);
    let permuted = mpt_core::ppca::Dataset::new(permuted_rows, Default::default()).unwrap();
    let a = lml(&p, &data).unwrap();
    let b = lml(&p.permuted(&perm), &permuted).unwrap();
    assert!((a - b).abs() < 1e-9 * a.abs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn chain_rule_holds(seed in any::<u64>(), dim in 2usize..9) {
        let (joint, x) = random_joint(dim, seed);
        let mut rng = RngKey::new(seed).child(1).rng();
        let size = sample_mask_size(dim, &mut rng);
        let mask = sample_mask(dim, size, &mut rng).unwrap();
        let cond = joint.conditional(&mask, &pick_v(&x, mask.rest())).unwrap();
        let lhs = cond.log_density(&pick_v(&x, mask.masked())).unwrap()
            + joint.marginal_log_density(mask.rest(), &x).unwrap();
        prop_assert!((lhs - joint.log_density(&x).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn full_mask_is_the_joint(seed in any::<u64>(), dim in 1usize..7) {
        let (joint, x) = random_joint(dim, seed);
        let cond = joint.conditional(&MaskPair::full(dim), &DVector::zeros(0)).unwrap();
        prop_assert!((cond.log_density(&x).unwrap() - joint.log_density(&x).unwrap()).abs() < 1e-10);
    }
}
