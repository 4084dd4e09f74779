"""Measurement reduction: renormalized kernels, rotations, z-basis readout.

A trained kernel, stripped of its identity component and renormalized,
defines a unit Bloch vector r. The observable sigma.r is diagonalized by a
single-qubit rotation u, after which its expectation value is read out by
measuring sigma_z on both qubits of the rotated state. One rotation pair
(u_m, v_n) per convolutional path replaces the convolution entirely.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .features import DegenerateKernelError, HermitianKernel
from .qmath import SIGMA_X, SIGMA_Y, SIGMA_Z, eig_hermitian, tensor

#: Traceless parts smaller than this cannot be renormalized.
DEGENERATE_KERNEL_TOL = 1e-12

SIGMA_ZZ = tensor(SIGMA_Z, SIGMA_Z)


def renormalize_kernel(kernel):
    """Unit Bloch vector of a kernel matrix, identity weight dropped.

    This is the conversion applied to trained kernels before they are
    fixed for retraining: the sigma_y coefficient flips sign going from
    the conjugated-Pauli parameterization to the plain Pauli expansion of
    the kernel matrix (sigma_y^* = -sigma_y).
    """
    k = kernel.k if isinstance(kernel, HermitianKernel) else np.asarray(kernel, float)
    return _normalized(np.array([k[1], -k[2], k[3]]))


def observable_direction(kernel):
    """Unit Bloch vector of the observable a kernel measures.

    The measured operator is the transposed kernel, sum_n k_n sigma_n, so
    its direction carries the coefficients unchanged. A circuit that must
    reproduce a given model's features rotates to this direction.
    """
    k = kernel.k if isinstance(kernel, HermitianKernel) else np.asarray(kernel, float)
    return _normalized(np.array([k[1], k[2], k[3]]))


def _normalized(vec):
    norm = np.linalg.norm(vec)
    if norm < DEGENERATE_KERNEL_TOL:
        raise DegenerateKernelError("kernel has no traceless part to renormalize")
    return vec / norm


def bloch_observable(r):
    """The traceless observable sigma . r for a 3-vector r."""
    r = np.asarray(r, dtype=float)
    return r[0] * SIGMA_X + r[1] * SIGMA_Y + r[2] * SIGMA_Z


def rotation_for(r):
    """Unitary u with u (sigma.r) u^dag = sigma_z.

    Rows of u are the bra eigenvectors of sigma.r for eigenvalues +1 and
    -1. Each eigenvector's global phase is fixed by making its first
    nonzero entry real positive, so the rotation is reproducible.
    """
    _, vecs = eig_hermitian(bloch_observable(r))
    cols = []
    for j in range(2):
        v = vecs[:, j]
        anchor = v[0] if abs(v[0]) > 1e-12 else v[1]
        cols.append(v * (abs(anchor) / anchor))
    return np.stack([c.conj() for c in cols])


def measure_zz(rho, u, v):
    """Exact expectation of sigma_z (x) sigma_z after local rotations u, v."""
    big_u = tensor(u, v)
    rotated = big_u @ np.asarray(rho, dtype=complex) @ big_u.conj().T
    return float(np.einsum("ij,ji->", rotated, SIGMA_ZZ).real)


def sampled_measure_zz(rho, u, v, shots, seed=0):
    """Finite-shot estimate of measure_zz; returns (estimate, stderr).

    Outcomes are drawn from the diagonal of the rotated state and mapped
    to the +-1 eigenvalues of sigma_z (x) sigma_z.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    big_u = tensor(u, v)
    rotated = big_u @ np.asarray(rho, dtype=complex) @ big_u.conj().T
    probs = np.clip(np.diag(rotated).real, 0.0, None)
    probs = probs / probs.sum()
    values = np.array([1.0, -1.0, -1.0, 1.0])
    counts = np.random.default_rng(seed).multinomial(shots, probs)
    estimate = float(counts @ values / shots)
    if shots > 1:
        var = counts @ (values - estimate) ** 2 / (shots - 1)
        stderr = float(np.sqrt(var / shots))
    else:
        stderr = 0.0
    return estimate, stderr


@dataclass
class CircuitFeatureMap:
    """Rotation pairs and Bloch vectors realizing a path set."""

    paths: list
    r1: np.ndarray
    r2: np.ndarray
    u: list
    v: list

    @classmethod
    def from_kernels(cls, kernels1, kernels2, paths):
        """Build the measurement plan for the kernels used by ``paths``.

        Directions are the kernels' observable Bloch vectors, so on a
        model with unit traceless kernels the circuit reproduces its
        features exactly. Only rotations actually needed by a path are
        constructed, so an l-path map uses exactly l distinct (u_m, v_n)
        pairs.
        """
        r1 = np.zeros((4, 3))
        r2 = np.zeros((4, 3))
        u = [None] * 4
        v = [None] * 4
        for m in sorted({m for m, _ in paths}):
            r1[m - 1] = observable_direction(kernels1[m - 1])
            u[m - 1] = rotation_for(r1[m - 1])
        for n in sorted({n for _, n in paths}):
            r2[n - 1] = observable_direction(kernels2[n - 1])
            v[n - 1] = rotation_for(r2[n - 1])
        return cls(paths=list(paths), r1=r1, r2=r2, u=u, v=v)

    def kernel_coefficients(self):
        """Renormalized kernels as coefficient arrays for the conv route.

        A kernel with coefficients (0, r_x, r_y, r_z) measures exactly
        sigma . r, so these feed the convolutional front end to produce
        the same features the circuit measures.
        """
        k1 = np.concatenate([np.zeros((4, 1)), self.r1], axis=1)
        k2 = np.concatenate([np.zeros((4, 1)), self.r2], axis=1)
        return k1, k2

    def exact_features(self, rho):
        return np.array(
            [measure_zz(rho, self.u[m - 1], self.v[n - 1]) for m, n in self.paths]
        )

    def expectation_features(self, rho):
        """Direct Tr[rho (sigma.r1 (x) sigma.r2)] per path, no rotations."""
        rho = np.asarray(rho, dtype=complex)
        out = []
        for m, n in self.paths:
            obs = tensor(bloch_observable(self.r1[m - 1]), bloch_observable(self.r2[n - 1]))
            out.append(float(np.einsum("ij,ji->", rho, obs).real))
        return np.array(out)

    def sampled_features(self, rho, shots, seed=0):
        estimates = np.empty(len(self.paths))
        stderrs = np.empty(len(self.paths))
        for p, (m, n) in enumerate(self.paths):
            estimates[p], stderrs[p] = sampled_measure_zz(
                rho, self.u[m - 1], self.v[n - 1], shots, seed=[seed, p]
            )
        return estimates, stderrs


def write_renormalized_csv(kernels1, kernels2, path):
    """Rows ``layer,index,x,y,z`` of the renormalized unit vectors."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "index", "x", "y", "z"])
        for layer_no, kernels in ((1, kernels1), (2, kernels2)):
            for idx, kernel in enumerate(kernels, start=1):
                r = renormalize_kernel(kernel)
                writer.writerow([layer_no, idx] + [repr(float(x)) for x in r])
