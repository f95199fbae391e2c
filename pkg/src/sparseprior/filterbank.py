"""Mean-zero filter banks and their image-level operators.

A bank holds ``n`` square kernels of odd side ``p``.  Applying kernel ``i``
to an image is a *correlation* (no kernel flip) over the image padded
symmetrically by ``(p - 1) // 2`` pixels, reflecting about the edge pixel
without repeating it (``d c b | a b c d | c b a``), so the output has the
input's size and there is one patch per pixel.  :func:`apply_adjoint` is
the exact transpose of that map, padding fold-back included.

Kernels are parametrised as ``scale * theta @ B`` where the rows of ``B``
are the 2-D DCT-II atoms without the constant one.  ``scale`` is 1 for
analysis operators and ``1/m`` for banks derived from a synthesis
dictionary.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .imagecore import ImageError, as_image, atomic_write

DENSE_LIMIT = 4096


@dataclass(frozen=True)
class Basis:
    patch_side: int
    filters: np.ndarray  # (N_B, p, p)

    @property
    def m(self):
        return self.patch_side * self.patch_side

    @property
    def size(self):
        return self.filters.shape[0]

    @property
    def matrix(self):
        """Atoms as rows of an ``(N_B, m)`` matrix."""
        return self.filters.reshape(self.size, self.m)


def dct_matrix(n):
    """Orthonormal 1-D DCT-II matrix; row ``k`` is the ``k``-th cosine atom."""
    k = np.arange(n)[:, None]
    t = np.arange(n)[None, :]
    c = np.cos(math.pi * (2 * t + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    c[0] /= math.sqrt(2.0)
    return c


def dct_mean_zero_basis(patch_side):
    """All ``p*p - 1`` separable 2-D DCT-II atoms except the constant one."""
    if patch_side < 3 or patch_side % 2 == 0:
        raise ValueError(f"patch side must be odd and >= 3, got {patch_side}")
    c = dct_matrix(patch_side)
    atoms = [np.outer(c[k], c[l]) for k in range(patch_side) for l in range(patch_side)
             if (k, l) != (0, 0)]
    atoms = np.array(atoms)
    atoms /= np.sqrt(np.sum(atoms**2, axis=(1, 2)))[:, None, None]
    return Basis(patch_side=patch_side, filters=atoms)


@dataclass(frozen=True)
class FilterBank:
    kernels: np.ndarray  # (n, p, p)
    basis: Basis = None
    theta: np.ndarray = None  # (n, N_B) or None for raw kernels
    scale: float = 1.0
    _flat: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = np.asarray(self.kernels, dtype=np.float64)
        if k.ndim != 3 or k.shape[1] != k.shape[2] or k.shape[1] % 2 == 0:
            raise ValueError(f"kernels must be (n, p, p) with odd p, got {k.shape}")
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "_flat", k.reshape(k.shape[0], -1))

    @property
    def n(self):
        return self.kernels.shape[0]

    @property
    def patch_side(self):
        return self.kernels.shape[1]

    @property
    def half(self):
        return self.patch_side // 2

    @property
    def flat(self):
        """Kernels as rows of an ``(n, m)`` matrix."""
        return self._flat

    def scaled(self, s):
        """Same bank with every kernel multiplied by ``s``."""
        return FilterBank(self.kernels * s, self.basis, self.theta, self.scale * s)

    @classmethod
    def from_kernels(cls, kernels):
        return cls(np.asarray(kernels, dtype=np.float64))


def assemble(basis, theta, scale=1.0):
    """Kernels ``scale * sum_j theta[i, j] * B_j``."""
    theta = np.array(theta, dtype=np.float64, ndmin=2)
    if theta.shape[1] != basis.size:
        raise ValueError(f"theta has {theta.shape[1]} columns, basis has {basis.size} atoms")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta contains non-finite values")
    kernels = (scale * (theta @ basis.matrix)).reshape(-1, basis.patch_side, basis.patch_side)
    return FilterBank(kernels, basis=basis, theta=theta.copy(), scale=scale)


def project(basis, kernels):
    """Coefficients of ``kernels`` in ``basis``; raises if not in its span."""
    flat = np.asarray(kernels, dtype=np.float64).reshape(-1, basis.m)
    theta = flat @ basis.matrix.T
    resid = flat - theta @ basis.matrix
    if np.max(np.abs(resid), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(flat), initial=0.0)):
        raise ValueError("kernels are not in the span of the basis (not mean-zero?)")
    return theta


def bank_from_dictionary(D, m, basis=None):
    """Analysis bank ``A_D = D^T / m`` of a synthesis dictionary.

    ``D`` has shape ``(m, n)``; column ``i`` is atom ``i`` read as a
    ``sqrt(m) x sqrt(m)`` patch in row-major order.  Atoms must lie in the
    span of the mean-zero basis.
    """
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != m:
        raise ValueError(f"dictionary atoms must have length {m}, got shape {D.shape}")
    side = math.isqrt(m)
    if side * side != m:
        raise ValueError(f"m = {m} is not a square patch size")
    basis = basis or dct_mean_zero_basis(side)
    theta = project(basis, D.T)
    return assemble(basis, theta, scale=1.0 / m)


def dictionary_bank(basis, theta):
    """Bank of the dictionary whose atoms are ``theta @ B`` (kernels scaled by 1/m)."""
    return assemble(basis, theta, scale=1.0 / basis.m)


def dictionary_matrix(bank):
    """Recover ``D`` (m x n) from a bank built by :func:`dictionary_bank`."""
    return (bank.flat / bank.scale).T.copy()


# ---------------------------------------------------------------------------
# operators


def _check_size(bank, u):
    if u.shape[0] < bank.patch_side or u.shape[1] < bank.patch_side:
        raise ImageError(f"image {u.shape} smaller than patch side {bank.patch_side}")


def patch_stack(u, patch_side):
    """Shifted copies of the reflect-padded image, shape ``(m, H * W)``.

    Column ``q`` is the patch centred at pixel ``q`` (row-major pixel
    order); row ``a * p + b`` holds kernel tap ``(a, b)`` for all pixels.
    """
    H, W = u.shape
    h = patch_side // 2
    padded = np.pad(u, h, mode="reflect")
    out = np.empty((patch_side * patch_side, H, W))
    for a in range(patch_side):
        for b in range(patch_side):
            out[a * patch_side + b] = padded[a:a + H, b:b + W]
    return out.reshape(patch_side * patch_side, H * W)


def patch_matrix(u, patch_side):
    """Row ``q`` holds the reflect-padded patch centred at pixel ``q``; ``(N_p, m)``."""
    return patch_stack(as_image(u), patch_side).T


def responses(bank, u):
    """All filter responses ``A_i u`` stacked as ``(n, H, W)``."""
    u = as_image(u)
    _check_size(bank, u)
    return (bank.flat @ patch_stack(u, bank.patch_side)).reshape(bank.n, *u.shape)


def apply(bank, i, u):
    u = as_image(u)
    _check_size(bank, u)
    return (bank.flat[i] @ patch_stack(u, bank.patch_side)).reshape(u.shape)


def scatter_stack(G, shape, patch_side):
    """Transpose of :func:`patch_stack`: fold ``(m, H * W)`` tap values back to an image."""
    H, W = shape
    h = patch_side // 2
    P = np.zeros((H + 2 * h, W + 2 * h))
    G = G.reshape(patch_side, patch_side, H, W)
    for a in range(patch_side):
        for b in range(patch_side):
            P[a:a + H, b:b + W] += G[a, b]
    # reflect padding maps padded row h - t to row h + t (top) and
    # h + H - 1 + t to h + H - 1 - t (bottom); same for columns
    for t in range(1, h + 1):
        P[h + t, :] += P[h - t, :]
        P[h + H - 1 - t, :] += P[h + H - 1 + t, :]
    P = P[h:h + H]
    for t in range(1, h + 1):
        P[:, h + t] += P[:, h - t]
        P[:, h + W - 1 - t] += P[:, h + W - 1 + t]
    return P[:, h:h + W].copy()


def adjoint_sum(bank, C):
    """``sum_i A_i^T C[i]`` for coefficient images ``C`` of shape ``(n, H, W)``."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 3 or C.shape[0] != bank.n:
        raise ImageError(f"expected ({bank.n}, H, W) coefficients, got {C.shape}")
    shape = C.shape[1:]
    if shape[0] < bank.patch_side or shape[1] < bank.patch_side:
        raise ImageError(f"image {shape} smaller than patch side {bank.patch_side}")
    G = bank.flat.T @ C.reshape(bank.n, -1)
    return scatter_stack(G, shape, bank.patch_side)


def apply_adjoint(bank, i, c):
    c = as_image(c)
    _check_size(bank, c)
    G = np.outer(bank.flat[i], c.ravel())
    return scatter_stack(G, c.shape, bank.patch_side)


def reflect_index(q, n):
    """Source index of padded position ``q`` (may be negative or >= n)."""
    if q < 0:
        return -q
    if q >= n:
        return 2 * (n - 1) - q
    return q


def as_dense(bank, i, width, height):
    """Dense ``(N_p, N_p)`` matrix of ``apply(bank, i, .)``, built from index arithmetic.

    Pixel ``(r, c)`` maps to flat index ``r * width + c``.  Only for small
    test images (``width * height <= 4096``).
    """
    npix = width * height
    if npix > DENSE_LIMIT:
        raise ValueError(f"dense operator limited to {DENSE_LIMIT} pixels, got {npix}")
    p = bank.patch_side
    h = p // 2
    if width < p or height < p:
        raise ImageError(f"image {width}x{height} smaller than patch side {p}")
    k = bank.kernels[i]
    M = np.zeros((npix, npix))
    for r in range(height):
        for c in range(width):
            row = r * width + c
            for a in range(p):
                sr = reflect_index(r + a - h, height)
                for b in range(p):
                    sc = reflect_index(c + b - h, width)
                    M[row, sr * width + sc] += k[a, b]
    return M


# ---------------------------------------------------------------------------
# serialisation


def bank_to_dict(bank, **meta):
    if bank.theta is None or bank.basis is None:
        raise ValueError("only basis-parametrised banks can be serialised")
    doc = {
        "patch_side": bank.patch_side,
        "n": bank.n,
        "basis": "dct_mean_zero",
        "theta": [float(v) for v in bank.theta.ravel()],
    }
    doc.update(meta)
    return doc


def bank_from_dict(doc):
    """Rebuild (bank, metadata) from a model document; kernels are re-derived."""
    if doc.get("basis") != "dct_mean_zero":
        raise ValueError(f"unknown basis {doc.get('basis')!r}")
    side = int(doc["patch_side"])
    n = int(doc["n"])
    basis = dct_mean_zero_basis(side)
    theta = np.asarray(doc["theta"], dtype=np.float64)
    if theta.size != n * basis.size:
        raise ValueError(f"theta has {theta.size} entries, expected {n} x {basis.size}")
    theta = theta.reshape(n, basis.size)
    mode = doc.get("mode", "analysis")
    scale = 1.0 / basis.m if mode == "synthesis" else 1.0
    meta = {k: v for k, v in doc.items() if k not in ("patch_side", "n", "basis", "theta")}
    return assemble(basis, theta, scale=scale), meta


def save_model(path, bank, **meta):
    atomic_write(path, json.dumps(bank_to_dict(bank, **meta), indent=1) + "\n")


def load_model(path):
    with open(path) as fh:
        return bank_from_dict(json.load(fh))


def format_kernels(bank):
    """Plain-text dump: a ``# filter i`` line, then ``p`` rows of values per kernel."""
    lines = []
    for i, k in enumerate(bank.kernels):
        lines.append(f"# filter {i}")
        lines.extend(" ".join(f"{v:.6e}" for v in row) for row in k)
        lines.append("")
    return "\n".join(lines)


def parse_kernels(text):
    blocks, cur = [], None
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("#"):
            cur = []
            blocks.append(cur)
        elif line:
            cur.append([float(v) for v in line.split()])
    return np.array(blocks)
