"""Convolutional feature extraction with observable-operator kernels.

A kernel is four real coefficients k_0..k_3 on the conjugated Pauli basis,
K = sum_n k_n sigma_n^*; the observable it measures is the transpose
K^T = sum_n k_n sigma_n. The first layer scans the 4x4 state with stride 2
across the first-subsystem block structure and contracts it to a 2x2
matrix; the second layer contracts that to a scalar. The scalar output of
path (m, n) equals the expectation value Tr[rho (K1_m^T (x) K2_n^T)].
"""

import csv
from dataclasses import dataclass

import numpy as np

from .qmath import FEATURE_IMAG_ERROR, PAULI, PAULI_CONJ
from .states import to_pauli


class FeatureRealityError(RuntimeError):
    """A nominally real feature came out with a large imaginary part."""


class DegenerateKernelError(ValueError):
    """Kernel whose traceless part vanishes cannot define a direction."""


@dataclass
class HermitianKernel:
    """A 2x2 kernel stored as its conjugated-Pauli coefficients."""

    k: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        if self.k.shape != (4,):
            raise ValueError("kernel needs exactly 4 real coefficients")

    def matrix(self):
        """Materialize K = sum_n k_n sigma_n^*; Hermitian by construction."""
        return np.einsum("n,nab->ab", self.k, PAULI_CONJ)

    def observable(self):
        """The measured operator K^T = sum_n k_n sigma_n."""
        return np.einsum("n,nab->ab", self.k, PAULI)


def pauli_kernel(n):
    """Kernel equal to sigma_n^*, i.e. unit coefficient on index n."""
    k = np.zeros(4)
    k[n] = 1.0
    return HermitianKernel(k)


def path_set(l):
    """First ``l`` paths (m, n) in the fixed row-major pattern.

    m is held while n runs 1..4, then m advances: (1,1), (1,2), (1,3),
    (1,4), (2,1), ...
    """
    if not 1 <= l <= 16:
        raise ValueError("path count must be in 1..16")
    return [(m, n) for m in range(1, 5) for n in range(1, 5)][:l]


def conv_layer1(rho, kernel):
    """Contract the state with a first-layer kernel, leaving a 2x2 matrix.

    The kernel scans the first-subsystem block structure with stride 2
    (its elements sit two rows/columns apart), so entry (a, b) of the
    output is sum_pq rho[2p+a, 2q+b] * K[p, q]. On the Pauli side this is
    (1/2) sum_ij k_i C_ij sigma_j.
    """
    r = np.asarray(rho, dtype=complex).reshape(2, 2, 2, 2)
    return np.einsum("paqb,pq->ab", r, kernel.matrix())


def conv_layer2(m2, kernel):
    """Contract a 2x2 matrix with a second-layer kernel to one real number.

    A stride-2 scan of a 2x2 input has a single placement, so this is the
    plain elementwise product-sum. The imaginary residue must be noise.
    """
    value = np.einsum("pq,pq->", np.asarray(m2, dtype=complex), kernel.matrix())
    if abs(value.imag) >= FEATURE_IMAG_ERROR:
        raise FeatureRealityError(
            f"imaginary residue {value.imag:.3e} exceeds {FEATURE_IMAG_ERROR:.0e}"
        )
    return float(value.real)


def extract_features(rho, layer1, layer2, paths):
    """Path outputs O_mn for every (m, n) in ``paths``.

    ``layer1`` and ``layer2`` are the four kernels of each layer; path
    (m, n) composes kernel m of layer 1 with kernel n of layer 2. The
    result equals Tr[rho (K1_m^T (x) K2_n^T)] per path.
    """
    firsts = {m: conv_layer1(rho, layer1[m - 1]) for m in {m for m, _ in paths}}
    return np.array([conv_layer2(firsts[m], layer2[n - 1]) for m, n in paths])


def feature_jacobian(rho, layer1, layer2, paths):
    """Gradient of each path output w.r.t. all 32 kernel coefficients.

    Returns an array of shape (len(paths), 2, 4, 4): axes are
    (path, layer, kernel index, coefficient). Every path output is
    bilinear, O_mn = k1_m . C . k2_n, so the only nonzero slices are
    d O / d k1_m = C k2_n and d O / d k2_n = C^T k1_m.
    """
    c = to_pauli(rho)
    grads = np.zeros((len(paths), 2, 4, 4))
    for p, (m, n) in enumerate(paths):
        grads[p, 0, m - 1] = c @ layer2[n - 1].k
        grads[p, 1, n - 1] = c.T @ layer1[m - 1].k
    return grads


def path_outputs(coeffs, k1, k2, paths):
    """Batched path outputs straight from Pauli coefficients.

    ``coeffs`` is (batch, 4, 4), ``k1``/``k2`` are (4, 4) coefficient
    arrays (kernel index, coefficient). Equal to extract_features per
    sample up to roundoff; used in training where the matrix route would
    be needless overhead.
    """
    k1p = np.stack([k1[m - 1] for m, _ in paths])
    k2p = np.stack([k2[n - 1] for _, n in paths])
    return np.einsum("bij,pi,pj->bp", coeffs, k1p, k2p)


# ---------------------------------------------------------------------------
# Kernel CSV export / import
# ---------------------------------------------------------------------------

def write_kernels_csv(layer1, layer2, path):
    """Rows ``layer,index,k0,k1,k2,k3``; lossless at f64 precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "index", "k0", "k1", "k2", "k3"])
        for layer_no, kernels in ((1, layer1), (2, layer2)):
            for idx, kernel in enumerate(kernels, start=1):
                writer.writerow([layer_no, idx] + [repr(float(x)) for x in kernel.k])


def read_kernels_csv(path):
    layer1 = [None] * 4
    layer2 = [None] * 4
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            layer_no, idx = int(row[0]), int(row[1])
            kernel = HermitianKernel(np.array([float(x) for x in row[2:6]]))
            (layer1 if layer_no == 1 else layer2)[idx - 1] = kernel
    if any(k is None for k in layer1 + layer2):
        raise ValueError(f"{path}: kernel table incomplete")
    return layer1, layer2
