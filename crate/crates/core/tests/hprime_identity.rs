//! The kernel part of the commutation expansion must reproduce the exact
//! N-particle Hamiltonian at finite N: `H_N K^N g = K^N sum_j N^{1-j/2} Hk'_j g`.
//! This pins every contraction weight and number-product coefficient.

use germmft::corrections::{hprime_apply_kernel_part, hprime_build};
use germmft::fock::{canonical_embed, project_fphi, FockVector};
use germmft::lattice::{HamiltonianSpec, LatticeSpec, OneParticleState, PBodyKernel};
use germmft::linalg::{c, CMat};
use num_complex::Complex64 as C64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn identity_residual(spec: &HamiltonianSpec, phi: &OneParticleState, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = FockVector::zero(spec.lattice, phi.clone());
    g.ensure_rank(2).unwrap();
    for t in g.comps.iter_mut() {
        for v in t.vals.iter_mut() {
            *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
    }
    let g = project_fphi(&g);
    let set = hprime_build(spec, phi, 8).unwrap();
    let mut image = FockVector::zero(spec.lattice, phi.clone());
    for j in 0..=8usize {
        let weight = (n as f64).powf(1.0 - j as f64 / 2.0);
        let part = hprime_apply_kernel_part(&set, j, &g).unwrap();
        image.axpy(c(weight), &part);
    }
    let op = germmft::oracle::assemble_hamiltonian(spec, n).unwrap();
    let embedded = canonical_embed(&g, phi, n).unwrap();
    let lhs = op.apply(&embedded.amp);
    let rhs = canonical_embed(&image.truncated(n).0, phi, n).unwrap();
    (&lhs - &rhs.amp).norm() / lhs.norm()
}

#[test]
fn commutation_identity_all_kernel_classes() {
    let lattice = LatticeSpec::unit(2);
    let mut rng = ChaCha8Rng::seed_from_u64(98);
    let phi = germmft::lattice::random_unit_state(&lattice, &mut rng);

    let a_raw = CMat::from_fn(2, 2, |_, _| {
        C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    });
    let a = (&a_raw + a_raw.adjoint()) * c(0.5);
    let one_body = HamiltonianSpec::from_kernels(lattice, vec![vec![PBodyKernel::OneBody(a)]]);
    assert!(identity_residual(&one_body, &phi, 8, 1) < 1e-12);

    let mut v = nalgebra::DMatrix::<f64>::from_fn(2, 2, |_, _| rng.gen_range(0.3..1.0));
    v = (&v + v.transpose()) * 0.5;
    let two_body =
        HamiltonianSpec::from_kernels(lattice, vec![vec![PBodyKernel::TwoBodyMult(v)]]);
    assert!(identity_residual(&two_body, &phi, 8, 2) < 1e-12);

    let dense = germmft::lattice::random_dense_spec(lattice, 1, 2, 1.0, &mut rng);
    assert!(identity_residual(&dense, &phi, 8, 3) < 1e-12);

    let leveled = HamiltonianSpec::from_kernels(
        lattice,
        vec![
            vec![PBodyKernel::TwoBodyMult(nalgebra::DMatrix::<f64>::identity(2, 2))],
            vec![PBodyKernel::OneBody(CMat::identity(2, 2) * c(0.7))],
        ],
    );
    assert!(identity_residual(&leveled, &phi, 6, 4) < 1e-12);

    // weights genuinely depend on N: two particle numbers both exact
    let mixed = germmft::lattice::random_dense_spec(
        LatticeSpec::new(3, 0.8, germmft::lattice::Topology::Abstract).unwrap(),
        2,
        2,
        0.9,
        &mut rng,
    );
    let phi3 = germmft::lattice::random_unit_state(&mixed.lattice, &mut rng);
    assert!(identity_residual(&mixed, &phi3, 5, 5) < 1e-12);
    assert!(identity_residual(&mixed, &phi3, 9, 6) < 1e-12);
}
