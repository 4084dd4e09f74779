"""Fixed-size complex linear algebra for two-qubit work.

Everything here operates on plain numpy arrays: 2x2 and 4x4 complex
matrices in row-major order. Subsystem A is the outer (block) index of a
4x4 matrix, subsystem B the inner one, i.e. ``rho[2a+p, 2b+q]`` carries
A-indices ``(a, b)`` and B-indices ``(p, q)``.
"""

import numpy as np

# ---------------------------------------------------------------------------
# Numerical tolerances, collected in one place so tests can reference them.
# ---------------------------------------------------------------------------

#: Hermiticity / unit-trace slack accepted for a density matrix.
DENSITY_ATOL = 1e-10
#: Most negative eigenvalue accepted for a density matrix.
DENSITY_EIG_MIN = -1e-9
#: Hermiticity slack accepted by the eigensolver before symmetrizing.
EIG_HERMITIAN_ATOL = 1e-9
#: Max reconstruction / orthonormality residual of the eigensolver.
EIG_RECONSTRUCTION_TOL = 1e-9
#: Eigenvalues below this are treated as exact zeros in entropies.
ENTROPY_EIG_CLAMP = 1e-9
#: Eigenvalues below this raise a positivity error in entropies.
ENTROPY_EIG_ERROR = -1e-6
#: Frobenius tolerance of the zero-discord commutator criterion.
COMMUTATOR_TOL = 1e-8
#: Pauli-coefficient round-trip tolerance.
PAULI_ROUNDTRIP_ATOL = 1e-12
#: Largest imaginary residue tolerated silently in a real feature.
FEATURE_IMAG_ATOL = 1e-10
#: Imaginary residue at which feature extraction errors out.
FEATURE_IMAG_ERROR = 1e-8
#: Measurement outcomes with smaller probability contribute zero entropy.
OUTCOME_PROB_FLOOR = 1e-12

# ---------------------------------------------------------------------------
# Pauli basis
# ---------------------------------------------------------------------------

SIGMA_0 = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)

#: The four basis matrices stacked as PAULI[i], i in 0..3.
PAULI = np.stack([SIGMA_0, SIGMA_X, SIGMA_Y, SIGMA_Z])
#: Elementwise conjugates; only sigma_y changes sign.
PAULI_CONJ = PAULI.conj()


class EigenSolverError(RuntimeError):
    """Jacobi sweep cap reached without converging."""


class PositivityError(ValueError):
    """Matrix has an eigenvalue too negative to be a state."""


def hermitize(m):
    """Symmetrize ``m`` so the result is Hermitian exactly."""
    m = np.asarray(m, dtype=complex)
    return (m + m.conj().T) / 2


def is_hermitian(m, atol=DENSITY_ATOL):
    return np.max(np.abs(m - np.asarray(m).conj().T)) <= atol


def mats_equal(a, b, atol):
    """Elementwise equality with an explicit absolute tolerance."""
    return np.max(np.abs(np.asarray(a) - np.asarray(b))) <= atol


def tensor(a, b):
    """Kronecker product; block (i, j) of the result is a[i, j] * b."""
    return np.kron(np.asarray(a, dtype=complex), np.asarray(b, dtype=complex))


def partial_trace_A(rho):
    """Trace out the first qubit of a 4x4 matrix, leaving B's 2x2."""
    return np.einsum("apaq->pq", np.asarray(rho, dtype=complex).reshape(2, 2, 2, 2))


def partial_trace_B(rho):
    """Trace out the second qubit of a 4x4 matrix, leaving A's 2x2."""
    return np.einsum("apbp->ab", np.asarray(rho, dtype=complex).reshape(2, 2, 2, 2))


def eig_hermitian(m, max_sweeps=100):
    """Eigendecompose a Hermitian matrix by cyclic complex Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues real and sorted
    descending, eigenvectors the matching orthonormal columns. Input that is
    Hermitian only within EIG_HERMITIAN_ATOL is symmetrized first.

    Raises EigenSolverError if the off-diagonal norm has not dropped below
    the convergence floor after ``max_sweeps`` sweeps.
    """
    h = hermitize(m)
    n = h.shape[0]
    v = np.eye(n, dtype=complex)
    scale = max(np.max(np.abs(h)), 1.0)
    floor = 1e-14 * scale

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.abs(h - np.diag(np.diag(h))) ** 2))
        if off <= floor:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                g = abs(h[p, q])
                if g <= floor / n:
                    continue
                phase = h[p, q] / g
                alpha = h[p, p].real
                beta = h[q, q].real
                tau = (beta - alpha) / (2 * g)
                sgn = 1.0 if tau >= 0 else -1.0
                t = sgn / (abs(tau) + np.sqrt(1 + tau * tau))
                c = 1 / np.sqrt(1 + t * t)
                s = t * c
                rot = np.eye(n, dtype=complex)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s * phase
                rot[q, p] = -s * np.conj(phase)
                h = rot.conj().T @ h @ rot
                v = v @ rot
    else:
        off = np.sqrt(np.sum(np.abs(h - np.diag(np.diag(h))) ** 2))
        if off > floor:
            raise EigenSolverError(
                f"Jacobi eigensolver did not converge in {max_sweeps} sweeps; "
                f"off-diagonal residual {off:.3e}"
            )

    vals = np.diag(h).real
    order = np.argsort(vals)[::-1]
    return vals[order], v[:, order]


def von_neumann_entropy(rho):
    """Base-2 von Neumann entropy of a Hermitian positive matrix.

    Eigenvalues below ENTROPY_EIG_CLAMP count as exact zeros; anything
    below ENTROPY_EIG_ERROR raises PositivityError.
    """
    vals, _ = eig_hermitian(rho)
    if vals[-1] < ENTROPY_EIG_ERROR:
        raise PositivityError(
            f"eigenvalue {vals[-1]:.3e} below positivity floor {ENTROPY_EIG_ERROR:.0e}"
        )
    vals = np.where(vals < ENTROPY_EIG_CLAMP, 0.0, vals)
    nz = vals[vals > 0]
    return float(-np.sum(nz * np.log2(nz)))
