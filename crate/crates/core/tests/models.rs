use ionspec::linalg::{self, C64};
use ionspec::models::{
    chain_couplings, equilibrium_positions, exciton_table, force_residual, ising_hamiltonian, phonon_hamiltonian,
    recoil_energy, single_exciton_block, IsingChainParams, PhononChainParams, CALCIUM_40_ION_MASS,
};
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn equilibrium_is_sorted_symmetric_and_force_free(n in 2usize..16) {
        let u = equilibrium_positions(n).unwrap();
        prop_assert!(u.windows(2).all(|w| w[0] < w[1]));
        for i in 0..n {
            prop_assert!((u[i] + u[n - 1 - i]).abs() < 1e-10);
        }
        prop_assert!(force_residual(&u) < 1e-10);
    }

    #[test]
    fn couplings_obey_row_sum_identity(n in 1usize..10, beta0 in 0.01f64..0.3) {
        let (omega, t) = chain_couplings(n, beta0).unwrap();
        for i in 0..n {
            prop_assert!((omega[i] + t.row(i).sum() - 1.0).abs() < 1e-13);
            for j in 0..n {
                prop_assert!((t[[i, j]] - t[[j, i]]).abs() < 1e-15);
            }
        }
        // the uniform mode is exact with frequency 1
        let block = single_exciton_block(&PhononChainParams::new(n, beta0, 0.0)).unwrap();
        let v = block.dot(&ndarray::Array1::from_elem(n, 1.0));
        prop_assert!(v.iter().all(|x| (x - 1.0).abs() < 1e-13));
    }

    #[test]
    fn harmonic_two_exciton_energies_are_pair_sums(n in 2usize..5, beta0 in 0.02f64..0.2) {
        let table = exciton_table(&PhononChainParams::new(n, beta0, 0.0).with_cutoff(3, Some(2))).unwrap();
        let e = &table.single_energies;
        let mut sums: Vec<f64> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| e[i] + e[j]).collect();
        sums.sort_by(f64::total_cmp);
        prop_assert_eq!(sums.len(), table.double_energies.len());
        for (a, b) in sums.iter().zip(&table.double_energies) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn anharmonicity_only_lowers_two_exciton_energies(u in -0.05f64..0.0) {
        let h = exciton_table(&PhononChainParams::new(3, 0.1, 0.0)).unwrap();
        let a = exciton_table(&PhononChainParams::new(3, 0.1, u)).unwrap();
        for (x, y) in h.single_energies.iter().zip(&a.single_energies) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in h.double_energies.iter().zip(&a.double_energies) {
            prop_assert!(y <= &(x + 1e-12));
        }
    }

    #[test]
    fn ising_hamiltonian_is_hermitian_and_traceless(n in 1usize..5, b in -2.0f64..2.0, p in 0.0f64..3.0) {
        let h = ising_hamiltonian(&IsingChainParams { n_spins: n, j0: 1.0, exponent: p, field: b }).unwrap();
        prop_assert!(h.is_hermitian());
        let (e, _) = h.eigh().unwrap();
        let tr: f64 = e.iter().sum();
        prop_assert!(tr.abs() < 1e-10);
    }
}

#[test]
fn three_ion_excitons() {
    let t = exciton_table(&PhononChainParams::new(3, 0.1, 0.0)).unwrap();
    for (a, b) in t.single_energies.iter().zip([0.88, 0.95, 1.0]) {
        assert!((a - b).abs() < 1e-9);
    }
    let c = &t.single_coeffs;
    // zigzag, tilt (no center amplitude), center of mass
    assert!(c[[1, 1]].abs() < 1e-12);
    let s = 1.0 / 3f64.sqrt();
    assert!(c.row(2).iter().all(|x| (x - s).abs() < 1e-12));
    assert!(c[[0, 0]] * c[[0, 1]] < 0.0 && c[[0, 0]] * c[[0, 2]] > 0.0);
    let gram = c.dot(&c.t());
    assert!((&gram - &Array2::<f64>::eye(3)).iter().all(|x| x.abs() < 1e-12));
    for (a, b) in t.double_energies.iter().zip([1.76, 1.83, 1.88, 1.90, 1.95, 2.00]) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn two_ion_positions_and_recoil() {
    let u = equilibrium_positions(2).unwrap();
    let x = 0.25f64.cbrt();
    assert!((u[0] + x).abs() < 1e-12 && (u[1] - x).abs() < 1e-12);
    assert!((x - 0.62996).abs() < 1e-5);
    let r = recoil_energy(854e-9, 397e-9, CALCIUM_40_ION_MASS).unwrap();
    assert!((r - 2.42e5).abs() < 1e3, "{r}");
    assert!(recoil_energy(-1.0, 397e-9, CALCIUM_40_ION_MASS).is_err());
}

#[test]
fn single_ion_ising_eigenvalues_are_plus_minus_b() {
    let h = ising_hamiltonian(&IsingChainParams {
        n_spins: 1,
        j0: 1.0,
        exponent: 1.0,
        field: 0.4,
    })
    .unwrap();
    let (e, _) = h.eigh().unwrap();
    assert!((e[0] + 0.4).abs() < 1e-14 && (e[1] - 0.4).abs() < 1e-14);
}

#[test]
fn two_spin_ising_matches_hand_built_matrix() {
    let (j0, b) = (0.8, 0.3);
    let h = ising_hamiltonian(&IsingChainParams {
        n_spins: 2,
        j0,
        exponent: 1.5,
        field: b,
    })
    .unwrap();
    let sx = ndarray::array![[0.0, 1.0], [1.0, 0.0]].mapv(|x| C64::new(x, 0.0));
    // basis order |↓⟩, |↑⟩
    let sy = ndarray::array![[C64::new(0.0, 0.0), C64::new(0.0, 1.0)], [C64::new(0.0, -1.0), C64::new(0.0, 0.0)]];
    let id = linalg::identity(2);
    let expected = linalg::kron(&sx, &sx).mapv(|z| -z * j0)
        - (linalg::kron(&sy, &id) + linalg::kron(&id, &sy)).mapv(|z| z * b);
    let diff = (h.matrix() - &expected).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(diff < 1e-14);
}

#[test]
fn phonon_hamiltonian_conserves_excitations() {
    let p = PhononChainParams::new(3, 0.1, -0.02).with_cutoff(4, Some(3));
    let h = phonon_hamiltonian(&p).unwrap();
    let l = h.layout();
    for i in 0..l.dim() {
        for j in 0..l.dim() {
            if l.excitation(i) != l.excitation(j) {
                assert_eq!(h.matrix()[[i, j]].norm(), 0.0);
            }
        }
    }
    // anharmonic shift 2U on a doubly occupied site
    let k = l.index_of(&[0, 2, 0]).unwrap();
    let (omega, _) = chain_couplings(3, 0.1).unwrap();
    assert!((h.matrix()[[k, k]].re - (2.0 * omega[1] + 2.0 * -0.02)).abs() < 1e-14);
}

#[test]
fn invalid_parameters_are_rejected() {
    assert!(equilibrium_positions(1).is_err() || equilibrium_positions(1).unwrap() == vec![0.0]);
    assert!(exciton_table(&PhononChainParams::new(3, 0.1, 0.0).with_cutoff(2, None)).is_err());
    assert!(phonon_hamiltonian(&PhononChainParams::new(0, 0.1, 0.0)).is_err());
    assert!(ising_hamiltonian(&IsingChainParams {
        n_spins: 0,
        j0: 1.0,
        exponent: 1.0,
        field: 0.0
    })
    .is_err());
}
