"""Non-learned spectral segmentation.

Pipeline: build a pixel-affinity graph on the semantic feature grid from
(a) thresholded feature similarities and (b) KNN affinities in an
HSV+position embedding, take the smallest eigenvectors of the symmetric
normalized Laplacian, and harden each non-constant eigenvector with
Multi-Otsu x adaptive thresholding after upsampling to image resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

from .tensor import bilinear_resize_array


class EigensolverError(RuntimeError):
    """Lanczos iteration failed to converge within its cap."""


@dataclass
class SpectralParams:
    alpha: float = 5.0          # weight of the KNN affinity vs the semantic one
    n_eigenvectors: int = 5
    knn_k: int = 10
    otsu_classes: int = 2
    adaptive_window: int = 11   # in semantic-grid pixels
    adaptive_offset: float = 0.0


@dataclass
class Eigensegment:
    index: int                  # eigenvector index, 1..N-1 (0 is the constant one)
    eigenvalue: float
    soft: np.ndarray            # (H,W) float32, the upsampled eigenvector
    hard: np.ndarray            # (H,W) bool


# ---------------------------------------------------------------------------
# pixel embedding


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB->HSV, all components in [0,1], channels-last."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    dsafe = np.where(delta > 0, delta, 1.0)
    h = np.select(
        [delta == 0, maxc == r, maxc == g],
        [0.0,
         ((g - b) / dsafe) % 6.0,
         (b - r) / dsafe + 2.0],
        default=(r - g) / dsafe + 4.0) / 6.0
    return np.stack([h % 1.0, s, v], axis=-1)


def hsv_embed(image: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Per-grid-pixel embedding (cos h, sin h, s, v, x, y).

    The image is bilinearly downsampled to the semantic grid; spatial
    coordinates are pixel centers normalized to (0,1)."""
    hf, wf = grid
    img = image.astype(np.float64)
    if img.max() > 1.5:
        img = img / 255.0
    small = bilinear_resize_array(img.transpose(2, 0, 1), hf, wf).transpose(1, 2, 0)
    hsv = rgb_to_hsv_array(small)
    ang = 2 * np.pi * hsv[..., 0]
    ys, xs = np.meshgrid((np.arange(hf) + 0.5) / hf, (np.arange(wf) + 0.5) / wf,
                         indexing="ij")
    emb = np.stack([np.cos(ang), np.sin(ang), hsv[..., 1], hsv[..., 2], xs, ys],
                   axis=-1)
    return emb.reshape(hf * wf, 6)


# ---------------------------------------------------------------------------
# affinities


def affinity_semantic(f: np.ndarray, drop_below: float = 1e-6) -> sp.csr_matrix:
    """Thresholded gram matrix of L2-normalized semantic feature rows."""
    c = f.shape[0]
    rows = f.reshape(c, -1).T.astype(np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 0)
    gram = rows @ rows.T
    np.clip(gram, 0.0, None, out=gram)
    gram[gram < drop_below] = 0.0
    return sp.csr_matrix(gram)


def affinity_knn(emb: np.ndarray, k: int) -> sp.csr_matrix:
    """Sparse affinity 1 - ||X(i)-X(j)|| over each node's k nearest
    neighbors (self included), symmetrized by max and clamped at 0."""
    n = emb.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the node count {n}")
    sq = (emb * emb).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    np.clip(d2, 0.0, None, out=d2)
    dist = np.sqrt(d2)
    nn = np.argsort(dist, axis=0, kind="stable")[:k]  # k nearest rows per column j
    cols = np.repeat(np.arange(n), k)
    rows = nn.T.reshape(-1)
    vals = 1.0 - dist[rows, cols]
    np.clip(vals, 0.0, None, out=vals)
    z = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return z.maximum(z.T).tocsr()


def affinity_combine(z_sem: sp.spmatrix, z_knn: sp.spmatrix,
                     alpha: float) -> sp.csr_matrix:
    if z_sem.shape != z_knn.shape:
        raise ValueError(f"affinity shapes differ: {z_sem.shape} vs {z_knn.shape}")
    return (z_sem + alpha * z_knn).tocsr()


# ---------------------------------------------------------------------------
# eigensolver: Lanczos with full reorthogonalization and breakdown restarts


def _laplacian_matvec(z, d: np.ndarray):
    isolated = d <= 0
    dinv2 = 1.0 / np.sqrt(np.where(isolated, 1.0, d))

    def matvec(x):
        y = x - dinv2 * (z @ (dinv2 * x))
        if isolated.any():
            # zero-degree nodes carry a unit self-loop: their L row is zero
            y[isolated] = 0.0
        return y

    return matvec


def eigensolve(z, n_eig: int, tol: float = 1e-8,
               seed: int = 12345) -> list[tuple[float, np.ndarray]]:
    """Smallest `n_eig` eigenpairs of L = I - D^{-1/2} Z D^{-1/2}.

    Z must be symmetric and nonnegative (sparse or dense). Eigenvalues come
    back ascending; eigenvectors are unit-norm with the largest-magnitude
    entry made positive, so results are reproducible across runs."""
    if sp.issparse(z):
        zs = z.tocsr()
        asym = abs(zs - zs.T)
        max_asym = asym.max() if asym.nnz else 0.0
        min_entry = zs.data.min() if zs.nnz else 0.0
    else:
        zs = np.asarray(z, dtype=np.float64)
        max_asym = np.abs(zs - zs.T).max() if zs.size else 0.0
        min_entry = zs.min() if zs.size else 0.0
    if max_asym > 1e-6:
        raise ValueError(f"affinity matrix not symmetric (max asymmetry {max_asym:.2e})")
    if min_entry < -1e-9:
        raise ValueError("affinity matrix has negative entries")
    n = zs.shape[0]
    if not 1 <= n_eig <= n:
        raise ValueError(f"need 1 <= n_eig <= {n}, got {n_eig}")
    zsym = (zs + zs.T) * 0.5
    d = np.asarray(zsym.sum(axis=1)).ravel()
    matvec = _laplacian_matvec(zsym, d)

    cap = min(n, max(int(10 * n_eig * np.sqrt(n)), 2 * n_eig + 2))
    v_mat = np.zeros((n, cap))
    alphas: list[float] = []
    betas: list[float] = []
    rng = np.random.default_rng(seed)
    v = np.full(n, 1.0 / np.sqrt(n))
    v_prev = np.zeros(n)
    beta_prev = 0.0
    check_every = max(10, 2 * n_eig)
    j = 0
    while j < cap:
        v_mat[:, j] = v
        w = matvec(v)
        alpha = float(v @ w)
        alphas.append(alpha)
        w -= alpha * v + beta_prev * v_prev
        for _ in range(2):  # full reorthogonalization, twice is enough
            w -= v_mat[:, :j + 1] @ (v_mat[:, :j + 1].T @ w)
        j += 1
        if j == cap:
            break
        beta = float(np.linalg.norm(w))
        if beta <= 1e-12:
            # invariant subspace found: restart with a fresh direction so
            # degenerate eigenvalues (disconnected components) are not missed
            restart = None
            for _ in range(3):
                cand = rng.standard_normal(n)
                for _ in range(2):
                    cand -= v_mat[:, :j] @ (v_mat[:, :j].T @ cand)
                nrm = np.linalg.norm(cand)
                if nrm > 1e-8:
                    restart = cand / nrm
                    break
            if restart is None:
                break  # space exhausted
            betas.append(0.0)
            v, v_prev, beta_prev = restart, np.zeros(n), 0.0
        else:
            betas.append(beta)
            v_prev, beta_prev = v_mat[:, j - 1], beta
            v = w / beta
        # Early exit certifies converged Ritz pairs but cannot rule out
        # degenerate copies still hidden from the current Krylov space
        # (restarts reveal them only at breakdown). Small problems run to
        # completion so zero-eigenvalue multiplicities are exact; a step
        # that just restarted has a zero beta and must keep iterating.
        if n > 2048 and betas and betas[-1] > 0 \
                and j >= max(2 * n_eig + 2, check_every) \
                and j % check_every == 0:
            theta, s = eigh_tridiagonal(np.array(alphas), np.array(betas[:j - 1]))
            res = np.abs(betas[-1] * s[-1, :n_eig])
            if np.all(res <= tol * np.maximum(1.0, np.abs(theta[:n_eig]))):
                break

    m = len(alphas)
    if m == 1:
        theta = np.array(alphas)
        s = np.ones((1, 1))
    else:
        theta, s = eigh_tridiagonal(np.array(alphas), np.array(betas[:m - 1]))
    vals = theta[:n_eig].copy()
    vecs = v_mat[:, :m] @ s[:, :n_eig]

    # A disconnected graph has a multi-dimensional null space and the raw
    # basis inside it is arbitrary. Canonicalize so the zero-th vector is the
    # D^{1/2}*constant direction and the contrasts fill the later slots.
    zero_count = int(np.sum(vals <= 1e-8))
    if zero_count >= 2:
        basis = vecs[:, :zero_count]
        const = np.sqrt(np.where(d > 0, d, 1.0))
        proj = basis @ (basis.T @ const)
        nrm = np.linalg.norm(proj)
        if nrm > 1e-8:
            e0 = proj / nrm
            rest = basis - np.outer(e0, e0 @ basis)
            u = np.linalg.svd(rest, full_matrices=False)[0]
            vecs[:, 0] = e0
            vecs[:, 1:zero_count] = u[:, :zero_count - 1]

    out = []
    for i in range(n_eig):
        vec = vecs[:, i]
        nrm = np.linalg.norm(vec)
        if nrm > 0:
            vec = vec / nrm
        resid = float(np.linalg.norm(matvec(vec) - vals[i] * vec))
        if resid > 1e3 * tol and m >= cap and m < n:
            raise EigensolverError(
                f"eigenpair {i} residual {resid:.2e} after {m} iterations (cap {cap})")
        peak = int(np.argmax(np.abs(vec)))
        if vec[peak] < 0:
            vec = -vec
        out.append((float(vals[i]), vec))
    return out


# ---------------------------------------------------------------------------
# thresholding


def otsu_thresholds(emap: np.ndarray, classes: int = 3) -> tuple[int, ...] | None:
    """Bin-index thresholds maximizing between-class variance over a 256-bin
    histogram (exhaustive search, first maximum in lexicographic order).
    Returns None for a constant map.

    Bin indices serve as class values (affine-equivalent to bin centers for
    the argmax) so the objective Sum m_s^2/w_s is exact integer arithmetic:
    near-tie results do not depend on summation order."""
    if classes not in (2, 3):
        raise ValueError("classes must be 2 or 3")
    lo, hi = float(emap.min()), float(emap.max())
    if not hi > lo:
        return None
    counts, _ = np.histogram(emap, bins=256, range=(lo, hi))
    cw = [0]
    cm = [0]
    for k, c in enumerate(counts.tolist()):
        cw.append(cw[-1] + c)
        cm.append(cm[-1] + c * k)
    w_tot, m_tot = cw[-1], cm[-1]

    def term(m, w):  # (numerator, denominator) of m^2/w with 0/0 -> 0
        return (m * m, w) if w else (0, 1)

    best_num, best_den, best_t = -1, 1, None
    if classes == 2:
        for t in range(255):
            n0, d0 = term(cm[t + 1], cw[t + 1])
            n1, d1 = term(m_tot - cm[t + 1], w_tot - cw[t + 1])
            num, den = n0 * d1 + n1 * d0, d0 * d1
            if num * best_den > best_num * den:
                best_num, best_den, best_t = num, den, (t,)
        return best_t
    for t1 in range(254):
        n0, d0 = term(cm[t1 + 1], cw[t1 + 1])
        for t2 in range(t1 + 1, 255):
            n1, d1 = term(cm[t2 + 1] - cm[t1 + 1], cw[t2 + 1] - cw[t1 + 1])
            n2, d2 = term(m_tot - cm[t2 + 1], w_tot - cw[t2 + 1])
            num = n0 * d1 * d2 + n1 * d0 * d2 + n2 * d0 * d1
            den = d0 * d1 * d2
            if num * best_den > best_num * den:
                best_num, best_den, best_t = num, den, (t1, t2)
    return best_t


def multi_otsu(emap: np.ndarray, classes: int = 3) -> np.ndarray:
    """Mask of the highest-valued class under exhaustive Otsu thresholding
    of a 256-bin histogram. A constant map has no variance to split and
    yields the empty mask. The top value class always contains the
    histogram's top bin, so it is never empty and always has the highest
    mean."""
    thresholds = otsu_thresholds(emap, classes)
    if thresholds is None:
        return np.zeros(emap.shape, dtype=bool)
    lo, hi = float(emap.min()), float(emap.max())
    idx = np.clip(((emap - lo) / (hi - lo) * 256).astype(np.int64), 0, 255)
    return idx > thresholds[-1]


def adaptive_threshold(emap: np.ndarray, window: int = 11,
                       offset: float = 0.0) -> np.ndarray:
    """Pixel on iff its value strictly exceeds the mean of the surrounding
    window minus `offset`. Windows are clamped (shrunk) at the borders;
    means come from an integral image. The map is shifted by its minimum
    before integrating so constant regions sum exactly and a constant map
    stays all-off under the strict comparison."""
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and positive")
    h, w = emap.shape
    r = window // 2
    shifted = emap.astype(np.float64) - float(emap.min())
    ii = np.zeros((h + 1, w + 1), dtype=np.float64)
    ii[1:, 1:] = np.cumsum(np.cumsum(shifted, axis=0), axis=1)
    y0 = np.maximum(np.arange(h) - r, 0)
    y1 = np.minimum(np.arange(h) + r, h - 1) + 1
    x0 = np.maximum(np.arange(w) - r, 0)
    x1 = np.minimum(np.arange(w) + r, w - 1) + 1
    sums = (ii[np.ix_(y1, x1)] - ii[np.ix_(y0, x1)]
            - ii[np.ix_(y1, x0)] + ii[np.ix_(y0, x0)])
    counts = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    means = sums / counts
    return shifted > means - offset


# ---------------------------------------------------------------------------
# full pipeline


def build_affinity(image: np.ndarray, semantic: np.ndarray,
                   params: SpectralParams) -> sp.csr_matrix:
    hf, wf = semantic.shape[1:]
    z_sem = affinity_semantic(semantic)
    z_knn = affinity_knn(hsv_embed(image, (hf, wf)), params.knn_k)
    return affinity_combine(z_sem, z_knn, params.alpha)


def eigensegments(image: np.ndarray, semantic: np.ndarray,
                  params: SpectralParams | None = None) -> list[Eigensegment]:
    """Hard eigensegments 1..N-1 of the query image at image resolution."""
    params = params or SpectralParams()
    hf, wf = semantic.shape[1:]
    h, w = image.shape[:2]
    z = build_affinity(image, semantic, params)
    pairs = eigensolve(z, params.n_eigenvectors)
    scale = max(1, round(h / hf))
    window = params.adaptive_window * scale
    if window % 2 == 0:
        window += 1
    segs = []
    for i in range(1, len(pairs)):
        val, vec = pairs[i]
        soft = bilinear_resize_array(
            vec.reshape(hf, wf).astype(np.float32)[None], h, w)[0]
        hard = multi_otsu(soft, params.otsu_classes) \
            & adaptive_threshold(soft, window, params.adaptive_offset)
        segs.append(Eigensegment(index=i, eigenvalue=val, soft=soft, hard=hard))
    return segs
