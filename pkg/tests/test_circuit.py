import numpy as np
import pytest
from numpy.testing import assert_allclose

from qdnet import qmath
from qdnet.circuit import (
    CircuitFeatureMap,
    bloch_observable,
    measure_zz,
    observable_direction,
    renormalize_kernel,
    rotation_for,
    sampled_measure_zz,
    write_renormalized_csv,
)
from qdnet.features import (
    DegenerateKernelError,
    HermitianKernel,
    path_outputs,
    path_set,
)
from qdnet.states import sample_random_state, to_pauli


def random_unit_vector(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def random_kernels(rng, count=4):
    return [HermitianKernel(rng.uniform(-1, 1, 4)) for _ in range(count)]


class TestRenormalizeKernel:
    def test_pure_z_kernel(self):
        assert_allclose(renormalize_kernel(HermitianKernel([0, 0, 0, 5.0])), [0, 0, 1])

    def test_y_sign_flip(self):
        assert_allclose(renormalize_kernel(HermitianKernel([0, 0, 1.0, 0])), [0, -1, 0])

    def test_identity_weight_dropped(self, rng):
        k = rng.uniform(-1, 1, 4)
        shifted = k.copy()
        shifted[0] += 3.0
        assert_allclose(
            renormalize_kernel(HermitianKernel(k)),
            renormalize_kernel(HermitianKernel(shifted)),
            atol=1e-14,
        )

    def test_positive_scale_invariance(self, rng):
        for _ in range(50):
            k = rng.uniform(-1, 1, 4)
            alpha = rng.uniform(0.01, 100)
            assert_allclose(
                renormalize_kernel(HermitianKernel(k)),
                renormalize_kernel(HermitianKernel(alpha * k)),
                atol=1e-12,
            )

    def test_unit_norm(self, rng):
        for _ in range(50):
            r = renormalize_kernel(HermitianKernel(rng.uniform(-1, 1, 4)))
            assert abs(np.linalg.norm(r) - 1) < 1e-12

    def test_degenerate_kernel_raises(self):
        with pytest.raises(DegenerateKernelError):
            renormalize_kernel(HermitianKernel([2.0, 0, 0, 0]))
        with pytest.raises(DegenerateKernelError):
            observable_direction(HermitianKernel([2.0, 0, 0, 0]))

    def test_observable_direction_carries_coefficients(self, rng):
        # The measured operator is the transpose, so no sign flip here;
        # renormalize_kernel differs from it exactly in the y sign.
        for _ in range(20):
            k = HermitianKernel(rng.uniform(-1, 1, 4))
            d = observable_direction(k)
            assert_allclose(d * np.linalg.norm(k.k[1:]), k.k[1:], atol=1e-12)
            r = renormalize_kernel(k)
            assert_allclose(r * [1, -1, 1], d, atol=1e-14)

    def test_circuit_matches_kernel_observable(self, rng):
        # measure_zz along the observable direction reproduces the
        # traceless part of the kernel's expectation value.
        from qdnet.features import extract_features, path_set

        k1 = [HermitianKernel([0.0, *rng.uniform(-1, 1, 3)]) for _ in range(4)]
        k2 = [HermitianKernel([0.0, *rng.uniform(-1, 1, 3)]) for _ in range(4)]
        fmap = CircuitFeatureMap.from_kernels(k1, k2, path_set(16))
        for _ in range(20):
            rho = sample_random_state(rng)
            feats = extract_features(rho, k1, k2, path_set(16))
            norms = np.array(
                [
                    np.linalg.norm(k1[m - 1].k[1:]) * np.linalg.norm(k2[n - 1].k[1:])
                    for m, n in path_set(16)
                ]
            )
            assert np.max(np.abs(fmap.exact_features(rho) * norms - feats)) < 1e-10


class TestRotationFor:
    def test_z_axis_gives_identity(self):
        assert_allclose(rotation_for(np.array([0.0, 0, 1])), np.eye(2), atol=1e-14)

    def test_x_axis_gives_hadamard(self):
        h = np.array([[1, 1], [1, -1]]) / np.sqrt(2)
        assert_allclose(rotation_for(np.array([1.0, 0, 0])), h, atol=1e-12)

    def test_diagonalization_property(self, rng):
        for _ in range(100):
            r = random_unit_vector(rng)
            u = rotation_for(r)
            assert np.max(np.abs(u @ u.conj().T - np.eye(2))) < 1e-12
            assert np.max(np.abs(u @ bloch_observable(r) @ u.conj().T - qmath.SIGMA_Z)) < 1e-10

    def test_phase_convention_reproducible(self, rng):
        r = random_unit_vector(rng)
        assert np.array_equal(rotation_for(r), rotation_for(r.copy()))
        # first nonzero entry of each eigenvector (row conjugate) is real positive
        u = rotation_for(r)
        for row in u.conj():
            anchor = row[0] if abs(row[0]) > 1e-12 else row[1]
            assert anchor.real > 0 and abs(anchor.imag) < 1e-14


class TestMeasureZZ:
    def test_maximally_mixed_is_zero(self, rng):
        u = rotation_for(random_unit_vector(rng))
        v = rotation_for(random_unit_vector(rng))
        assert abs(measure_zz(np.eye(4) / 4, u, v)) < 1e-14

    def test_computational_basis_state(self):
        rho = np.zeros((4, 4), dtype=complex)
        rho[0, 0] = 1.0
        assert measure_zz(rho, np.eye(2), np.eye(2)) == pytest.approx(1.0)

    def test_matches_direct_expectation(self, rng):
        for _ in range(200):
            rho = sample_random_state(rng)
            ra, rb = random_unit_vector(rng), random_unit_vector(rng)
            got = measure_zz(rho, rotation_for(ra), rotation_for(rb))
            obs = qmath.tensor(bloch_observable(ra), bloch_observable(rb))
            assert abs(got - np.trace(rho @ obs).real) < 1e-10
            assert -1 - 1e-10 <= got <= 1 + 1e-10


class TestSampledMeasureZZ:
    def test_deterministic_outcome(self):
        rho = np.zeros((4, 4), dtype=complex)
        rho[0, 0] = 1.0
        est, err = sampled_measure_zz(rho, np.eye(2), np.eye(2), 10**6, seed=4)
        assert est == 1.0 and err == 0.0

    def test_unbiased_on_maximally_mixed(self):
        est, err = sampled_measure_zz(np.eye(4) / 4, np.eye(2), np.eye(2), 10**6, seed=4)
        assert abs(est) < 5 * err

    def test_seed_reproducibility(self, rng):
        rho = sample_random_state(rng)
        u = rotation_for(random_unit_vector(rng))
        a = sampled_measure_zz(rho, u, u, 5000, seed=9)
        b = sampled_measure_zz(rho, u, u, 5000, seed=9)
        assert a == b

    def test_converges_to_exact(self, rng):
        rho = sample_random_state(rng)
        u = rotation_for(random_unit_vector(rng))
        v = rotation_for(random_unit_vector(rng))
        exact = measure_zz(rho, u, v)
        est, err = sampled_measure_zz(rho, u, v, 4 * 10**6, seed=2)
        assert abs(est - exact) < 5 * max(err, 1e-4)

    def test_shot_validation(self):
        with pytest.raises(ValueError):
            sampled_measure_zz(np.eye(4) / 4, np.eye(2), np.eye(2), 0)


class TestCircuitFeatureMap:
    def test_end_to_end_equivalence(self, rng):
        l1, l2 = random_kernels(rng), random_kernels(rng)
        paths = path_set(5)
        fmap = CircuitFeatureMap.from_kernels(l1, l2, paths)
        k1, k2 = fmap.kernel_coefficients()
        for _ in range(200):
            rho = sample_random_state(rng)
            conv = path_outputs(to_pauli(rho)[None], k1, k2, paths)[0]
            circ = fmap.exact_features(rho)
            expd = fmap.expectation_features(rho)
            assert np.max(np.abs(conv - circ)) < 1e-10
            assert np.max(np.abs(expd - circ)) < 1e-10

    def test_five_path_map_builds_five_pairs(self, rng):
        fmap = CircuitFeatureMap.from_kernels(
            random_kernels(rng), random_kernels(rng), path_set(5)
        )
        assert fmap.paths == [(1, 1), (1, 2), (1, 3), (1, 4), (2, 1)]
        # only u_1, u_2 and v_1..v_4 are materialized
        assert fmap.u[0] is not None and fmap.u[1] is not None
        assert fmap.u[2] is None and fmap.u[3] is None
        assert all(v is not None for v in fmap.v)

    def test_sampled_features_track_exact(self, rng):
        fmap = CircuitFeatureMap.from_kernels(
            random_kernels(rng), random_kernels(rng), path_set(3)
        )
        rho = sample_random_state(rng)
        exact = fmap.exact_features(rho)
        est, err = fmap.sampled_features(rho, 10**6, seed=8)
        assert np.all(np.abs(est - exact) < 5 * np.maximum(err, 1e-4))


class TestRenormalizedCsv:
    def test_layout_and_values(self, rng, tmp_path):
        l1, l2 = random_kernels(rng), random_kernels(rng)
        path = tmp_path / "renorm.csv"
        write_renormalized_csv(l1, l2, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer,index,x,y,z"
        assert len(lines) == 9
        first = lines[1].split(",")
        assert first[:2] == ["1", "1"]
        assert_allclose(
            [float(x) for x in first[2:]], renormalize_kernel(l1[0]), atol=0
        )
