"""Two-qubit state generation, discord labeling, and dataset persistence.

States live on qubits A (first tensor factor) and B (second). Discord is
always the asymmetric quantity with the projective measurement applied to
subsystem B. Zero-discord states are the classical-quantum mixtures

    rho = p * rho_plus (x) |n+><n+|  +  (1 - p) * rho_minus (x) |n-><n-|

and are detected exactly by the block-commutator criterion.
"""

import csv
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import qmath
from .qmath import (
    COMMUTATOR_TOL,
    OUTCOME_PROB_FLOOR,
    PAULI,
    partial_trace_A,
    partial_trace_B,
    tensor,
    von_neumann_entropy,
)

DATASET_MAGIC = b"QDNETDS\x00"
DATASET_VERSION = 1
_RECORD_DTYPE = np.dtype([("c", "<f8", (16,)), ("label", "u1"), ("discord", "<f8")])

#: Default brute-force minimization resolution of the discord oracle.
ORACLE_GRID_N = 64
ORACLE_REFINE_ITERS = 5
#: Retries before generation gives up on drawing a discordant state.
RESAMPLE_CAP = 100


class GenerationError(RuntimeError):
    """Resampling cap exceeded while building a dataset."""


class DatasetFormatError(ValueError):
    """Dataset file is not in the expected binary format."""


@dataclass
class NonDiscordantParams:
    """Ingredients of a classical-quantum state on the B side."""

    p_plus: float
    rho_plus: np.ndarray
    rho_minus: np.ndarray
    n_plus: np.ndarray
    n_minus: np.ndarray


@dataclass
class DiscordResult:
    qd: float
    argmin_theta: float
    argmin_phi: float
    mutual_info: float
    classical_corr: float


@dataclass
class LabeledSample:
    """Pauli image of a state plus its discord label.

    ``discord_value`` is NaN when the oracle was not run.
    """

    coeffs: np.ndarray
    label: int
    discord_value: float = float("nan")


# ---------------------------------------------------------------------------
# Pauli coefficients
# ---------------------------------------------------------------------------

def to_pauli(rho):
    """C_ij = Tr[rho (sigma_i (x) sigma_j)], a real 4x4 array."""
    r = np.asarray(rho, dtype=complex).reshape(2, 2, 2, 2)
    # Tr[rho (s_i (x) s_j)] contracts A indices with s_i and B with s_j.
    return np.einsum("apbq,iba,jqp->ij", r, PAULI, PAULI).real


def from_pauli(c):
    """Rebuild the density matrix from its Pauli coefficients."""
    c = np.asarray(c, dtype=float)
    return np.einsum("ij,iab,jpq->apbq", c, PAULI, PAULI).reshape(4, 4) / 4


def validate_density_matrix(rho, atol=qmath.DENSITY_ATOL):
    """Raise ValueError unless rho is Hermitian, unit-trace and positive."""
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {rho.shape}")
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > atol:
        raise ValueError(f"not Hermitian: max |rho - rho^dag| = {herm:.3e}")
    tr = rho.trace()
    if abs(tr - 1) > atol:
        raise ValueError(f"trace {tr:.12f} != 1")
    vals, _ = qmath.eig_hermitian(rho)
    if vals[-1] < qmath.DENSITY_EIG_MIN:
        raise ValueError(f"negative eigenvalue {vals[-1]:.3e}")


# ---------------------------------------------------------------------------
# Random state sampling
# ---------------------------------------------------------------------------

def _ginibre(rng, dim):
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    m = g @ g.conj().T
    return m / m.trace().real


def _haar_unitary_2(rng):
    g = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    q, r = np.linalg.qr(g)
    return q * (np.diag(r) / np.abs(np.diag(r)))


def sample_random_state(rng):
    """Draw a full-rank two-qubit state from the Ginibre ensemble."""
    return _ginibre(rng, 4)


def sample_non_discordant(rng):
    """Draw a zero-discord state together with its construction params."""
    p_plus = rng.uniform()
    rho_plus = _ginibre(rng, 2)
    rho_minus = _ginibre(rng, 2)
    u = _haar_unitary_2(rng)
    n_plus, n_minus = u[:, 0], u[:, 1]
    rho = assemble_non_discordant(
        NonDiscordantParams(p_plus, rho_plus, rho_minus, n_plus, n_minus)
    )
    return rho, NonDiscordantParams(p_plus, rho_plus, rho_minus, n_plus, n_minus)


def assemble_non_discordant(params):
    proj_plus = np.outer(params.n_plus, params.n_plus.conj())
    proj_minus = np.outer(params.n_minus, params.n_minus.conj())
    return params.p_plus * tensor(params.rho_plus, proj_plus) + (
        1 - params.p_plus
    ) * tensor(params.rho_minus, proj_minus)


# ---------------------------------------------------------------------------
# Zero-discord criterion
# ---------------------------------------------------------------------------

def is_zero_discord(rho, tol=COMMUTATOR_TOL):
    """Exact zero-discord test via the block-commutator criterion.

    Partitions rho into the four 2x2 blocks B_ij indexed by subsystem A and
    returns ``(verdict, max_norm)`` where max_norm is the largest Frobenius
    norm over all pairwise commutators [B_ij, B_kl] and all normality
    commutators [B_ij, B_ij^dag]. The state has zero discord (under
    measurement of B) iff every such commutator vanishes.
    """
    rho = np.asarray(rho, dtype=complex)
    blocks = [rho[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] for i in range(2) for j in range(2)]
    max_norm = 0.0
    for b in blocks:
        max_norm = max(max_norm, np.linalg.norm(b @ b.conj().T - b.conj().T @ b))
    for idx, b1 in enumerate(blocks):
        for b2 in blocks[idx + 1 :]:
            max_norm = max(max_norm, np.linalg.norm(b1 @ b2 - b2 @ b1))
    return bool(max_norm < tol), float(max_norm)


# ---------------------------------------------------------------------------
# Conditional entropy and the discord oracle
# ---------------------------------------------------------------------------

def measurement_vectors(theta, phi):
    """The orthonormal pair |n+>, |n-> of a projective measurement on B."""
    n_plus = np.array([np.cos(theta), np.exp(1j * phi) * np.sin(theta)])
    n_minus = np.array([np.sin(theta), -np.exp(1j * phi) * np.cos(theta)])
    return n_plus, n_minus


def conditional_entropy_after_measurement(rho, theta, phi):
    """Average entropy of A after projectively measuring B along (theta, phi).

    Builds the projectors explicitly and reduces through partial traces;
    outcomes with probability below OUTCOME_PROB_FLOOR contribute zero.
    """
    rho = np.asarray(rho, dtype=complex)
    total = 0.0
    for vec in measurement_vectors(theta, phi):
        proj = tensor(qmath.SIGMA_0, np.outer(vec, vec.conj()))
        sandwiched = proj @ rho @ proj
        p = sandwiched.trace().real
        if p < OUTCOME_PROB_FLOOR:
            continue
        rho_a = partial_trace_B(sandwiched) / p
        total += p * von_neumann_entropy(rho_a)
    return total


def _binary_entropy(p):
    p = np.clip(p, 0.0, 1.0)
    out = np.zeros_like(p)
    inner = (p > 0) & (p < 1)
    pi = p[inner]
    out[inner] = -pi * np.log2(pi) - (1 - pi) * np.log2(1 - pi)
    return out


def _conditional_entropy_grid(c, thetas, phis):
    """Vectorized conditional entropy over a grid of measurement angles.

    Works on the Pauli coefficients: for measurement direction n the
    outcome probabilities are (1 +- b.n)/2 with b_j = C_0j, and the
    conditional A states have Bloch vectors (a0 +- T n)/(1 +- b.n) with
    a0_i = C_i0 and T = C[1:, 1:]. Agrees with
    conditional_entropy_after_measurement to roundoff at every grid point.
    """
    # |n+> = cos(theta)|0> + e^{i phi} sin(theta)|1> has Bloch polar
    # angle 2*theta, so the direction below uses the doubled angle.
    tt, pp = np.meshgrid(thetas, phis, indexing="ij")
    n = np.stack(
        [np.sin(2 * tt) * np.cos(pp), np.sin(2 * tt) * np.sin(pp), np.cos(2 * tt)],
        axis=-1,
    )
    b = c[0, 1:]
    a0 = c[1:, 0]
    t_mat = c[1:, 1:]
    bn = n @ b
    tn = n @ t_mat.T
    entropy = np.zeros_like(bn)
    for sign in (+1.0, -1.0):
        p = (1 + sign * bn) / 2
        live = p > OUTCOME_PROB_FLOOR
        bloch = a0 + sign * tn
        r = np.zeros_like(p)
        r[live] = np.minimum(
            np.linalg.norm(bloch[live], axis=-1) / (2 * p[live]), 1.0
        )
        entropy += np.where(live, p * _binary_entropy((1 + r) / 2), 0.0)
    return entropy


def discord_oracle(rho, grid_n=ORACLE_GRID_N, refine_iters=ORACLE_REFINE_ITERS):
    """Brute-force quantum discord of rho, measured on subsystem B.

    Minimizes the post-measurement conditional entropy over a grid_n x
    grid_n grid on (theta, phi) in [0, pi] x [0, 2 pi), then refines by
    repeatedly halving the search cell around the best point. Tiny negative
    results are clamped to zero.
    """
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    rho = np.asarray(rho, dtype=complex)
    c = to_pauli(rho)
    s_ab = von_neumann_entropy(rho)
    s_a = von_neumann_entropy(partial_trace_B(rho))
    s_b = von_neumann_entropy(partial_trace_A(rho))

    thetas = np.linspace(0.0, np.pi, grid_n)
    phis = np.linspace(0.0, 2 * np.pi, grid_n, endpoint=False)
    grid = _conditional_entropy_grid(c, thetas, phis)
    it, ip = np.unravel_index(np.argmin(grid), grid.shape)
    best_theta, best_phi, best = thetas[it], phis[ip], grid[it, ip]

    w_theta = np.pi / max(grid_n - 1, 1)
    w_phi = 2 * np.pi / grid_n
    for _ in range(refine_iters):
        thetas = np.linspace(best_theta - w_theta, best_theta + w_theta, 9)
        phis = np.linspace(best_phi - w_phi, best_phi + w_phi, 9)
        grid = _conditional_entropy_grid(c, thetas, phis)
        it, ip = np.unravel_index(np.argmin(grid), grid.shape)
        if grid[it, ip] < best:
            best_theta, best_phi, best = thetas[it], phis[ip], grid[it, ip]
        w_theta /= 2
        w_phi /= 2

    mutual_info = s_a + s_b - s_ab
    qd = s_b - s_ab + best
    if qd < 0:
        qd = 0.0
    classical_corr = mutual_info - qd
    return DiscordResult(
        qd=float(qd),
        argmin_theta=float(best_theta % np.pi),
        argmin_phi=float(best_phi % (2 * np.pi)),
        mutual_info=float(mutual_info),
        classical_corr=float(classical_corr),
    )


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def _sample_rng(seed, index):
    return np.random.default_rng([seed, index])


def _build_sample(seed, index, label, compute_discord, tol):
    rng = _sample_rng(seed, index)
    if label == 0:
        rho, _ = sample_non_discordant(rng)
    else:
        for attempt in range(RESAMPLE_CAP + 1):
            rho = sample_random_state(rng)
            passes, _ = is_zero_discord(rho, tol)
            if not passes:
                break
        else:
            raise GenerationError(
                f"sample {index}: {RESAMPLE_CAP} resampling attempts all "
                "landed on the zero-discord set"
            )
    qd = discord_oracle(rho).qd if compute_discord else float("nan")
    return to_pauli(rho), qd


def _build_chunk(args):
    seed, indices, labels, compute_discord, tol = args
    coeffs = np.empty((len(indices), 4, 4))
    discords = np.empty(len(indices))
    for k, (i, lab) in enumerate(zip(indices, labels)):
        coeffs[k], discords[k] = _build_sample(seed, i, lab, compute_discord, tol)
    return coeffs, discords


def generate_dataset(
    n,
    fraction_non_discordant=0.5,
    seed=0,
    compute_discord=False,
    tol=COMMUTATOR_TOL,
    workers=1,
):
    """Build ``n`` labeled samples, deterministically under ``seed``.

    Each sample owns an independent generator derived from (seed, index),
    so the output is identical for any worker count. Discordant samples are
    Ginibre draws re-drawn (up to RESAMPLE_CAP times) if they happen to pass
    the commutator criterion; non-discordant samples are constructed
    classical-quantum mixtures. Labels are shuffled deterministically.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= fraction_non_discordant <= 1.0:
        raise ValueError("fraction_non_discordant must be in [0, 1]")
    n_nd = int(round(n * fraction_non_discordant))
    labels = np.array([0] * n_nd + [1] * (n - n_nd), dtype=np.uint8)
    shuffle_rng = np.random.default_rng([seed, 0xFFFFFFFF])
    shuffle_rng.shuffle(labels)

    indices = np.arange(n)
    if workers > 1 and n >= workers * 4:
        chunks = np.array_split(indices, workers * 4)
        jobs = [
            (seed, idx, labels[idx], compute_discord, tol)
            for idx in chunks
            if len(idx)
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_build_chunk, jobs))
        coeffs = np.concatenate([p[0] for p in parts])
        discords = np.concatenate([p[1] for p in parts])
    else:
        coeffs, discords = _build_chunk((seed, indices, labels, compute_discord, tol))

    return [
        LabeledSample(coeffs[i], int(labels[i]), float(discords[i])) for i in range(n)
    ]


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------

def samples_to_arrays(samples):
    coeffs = np.stack([s.coeffs for s in samples]).astype(np.float64)
    labels = np.array([s.label for s in samples], dtype=np.uint8)
    discords = np.array([s.discord_value for s in samples], dtype=np.float64)
    return coeffs, labels, discords


def write_dataset(samples, path):
    """Write samples in the binary dataset format (little-endian)."""
    coeffs, labels, discords = samples_to_arrays(samples)
    records = np.empty(len(samples), dtype=_RECORD_DTYPE)
    records["c"] = coeffs.reshape(-1, 16)
    records["label"] = labels
    records["discord"] = discords
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, 0))
        fh.write(struct.pack("<Q", len(samples)))
        fh.write(records.tobytes())


def read_dataset(path):
    """Read a binary dataset; returns (coeffs (n,4,4), labels, discords)."""
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:8] != DATASET_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic")
        version, _ = struct.unpack("<II", header[8:])
        if version != DATASET_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read(count * _RECORD_DTYPE.itemsize)
    if len(payload) != count * _RECORD_DTYPE.itemsize:
        raise DatasetFormatError(f"{path}: truncated payload")
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    coeffs = records["c"].reshape(-1, 4, 4).astype(np.float64)
    return coeffs, records["label"].copy(), records["discord"].copy()


def write_dataset_csv(samples, path):
    """Mirrored CSV export for inspection."""
    coeffs, labels, discords = samples_to_arrays(samples)
    header = [f"c{i}{j}" for i in range(4) for j in range(4)] + ["label", "discord"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for c, lab, qd in zip(coeffs.reshape(-1, 16), labels, discords):
            writer.writerow([repr(float(x)) for x in c] + [int(lab), repr(float(qd))])


def read_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = list(reader)
    coeffs = np.array([[float(x) for x in row[:16]] for row in rows]).reshape(-1, 4, 4)
    labels = np.array([int(row[16]) for row in rows], dtype=np.uint8)
    discords = np.array([float(row[17]) for row in rows])
    return coeffs, labels, discords
