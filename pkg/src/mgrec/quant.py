"""Residual quantization of item embeddings into semantic IDs.

``ResidualQuantizer`` follows the scikit-learn transformer protocol:
``fit`` learns ``n_levels`` codebooks, ``transform`` maps vectors to
integer code tuples and ``inverse_transform`` reconstructs vectors from
codes. Two backends are available:

``"rq-kmeans"``
    Level ``l`` codebook is k-means over the residuals left by levels
    ``< l``. Deterministic given ``random_state``.
``"rq-vae"``
    MLP encoder, residual codebooks over the latent space and MLP decoder,
    trained jointly with a straight-through estimator.
"""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .formats import EmbeddingTable, SemanticIdMap

__all__ = ["kmeans", "lloyd", "ResidualQuantizer", "nearest_codeword", "vae_loss", "init_vae_params"]

log = logging.getLogger(__name__)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # expanded form; only used inside Lloyd iterations where exact ties do not matter
    d = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    return np.maximum(d, 0.0)


def nearest_codeword(residuals: np.ndarray, codebook: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Exact argmin of squared distance; ties go to the smallest index."""
    out = np.empty(len(residuals), dtype=np.int64)
    for start in range(0, len(residuals), chunk):
        block = residuals[start:start + chunk]
        diff = block[:, None, :] - codebook[None, :, :]
        out[start:start + chunk] = np.argmin(np.sum(diff * diff, axis=-1), axis=1)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centers[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = rng.integers(n)  # all points already covered by a center
        else:
            idx = rng.choice(n, p=closest / total)
        centers[j] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centers[j:j + 1])[:, 0])
    return centers


def lloyd(
    points,
    k: int,
    iters: int = 50,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """k-means++ seeding followed by Lloyd iterations.

    Returns ``(centroids, labels, distortions)`` where ``distortions[t]`` is
    the mean squared distance of the assignment made at iteration ``t``.
    Clusters that go empty are moved onto the point currently farthest from
    its centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("points must be a non-empty 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_distinct = len(np.unique(points, axis=0))
    if n_distinct < k:
        warnings.warn(
            f"k={k} exceeds the {n_distinct} distinct points; some centroids will coincide",
            RuntimeWarning,
            stacklevel=2,
        )
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    history: list[float] = []
    labels = None
    for _ in range(max(iters, 1)):
        d = _sq_dists(points, centroids)
        new_labels = np.argmin(d, axis=1)
        dist = d[np.arange(len(points)), new_labels]
        history.append(float(dist.mean()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            dist = np.sum((points - centroids[labels]) ** 2, axis=1)
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(dist))
                centroids[j] = points[far]
                dist[far] = 0.0
    # final assignment against the returned centroids
    d = _sq_dists(points, centroids)
    labels = np.argmin(d, axis=1)
    final = float(d[np.arange(len(points)), labels].mean())
    if final < history[-1]:
        history.append(final)
    return centroids, labels, history


def kmeans(points, k: int, iters: int = 50, seed: int = 0) -> np.ndarray:
    """Centroids only; see :func:`lloyd`."""
    return lloyd(points, k, iters, seed)[0]


# -- rq-vae ------------------------------------------------------------------

def init_vae_params(
    input_dim: int,
    latent_dim: int,
    hidden_dims,
    n_levels: int,
    codebook_size: int,
    generator: torch.Generator,
    dtype=torch.float32,
) -> dict[str, torch.Tensor]:
    params = {}

    def linear(name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"{name}.w"] = (torch.rand(fan_in, fan_out, generator=generator, dtype=dtype) * 2 - 1) * bound
        params[f"{name}.b"] = (torch.rand(fan_out, generator=generator, dtype=dtype) * 2 - 1) * bound

    enc = [input_dim, *hidden_dims, latent_dim]
    for i, (a, b) in enumerate(zip(enc[:-1], enc[1:])):
        linear(f"enc{i}", a, b)
    dec = enc[::-1]
    for i, (a, b) in enumerate(zip(dec[:-1], dec[1:])):
        linear(f"dec{i}", a, b)
    for level in range(n_levels):
        params[f"codebook{level}"] = torch.randn(codebook_size, latent_dim, generator=generator, dtype=dtype)
    return params


def _mlp(params, prefix: str, x: torch.Tensor) -> torch.Tensor:
    i = 0
    while f"{prefix}{i + 1}.w" in params:
        x = torch.relu(x @ params[f"{prefix}{i}.w"] + params[f"{prefix}{i}.b"])
        i += 1
    return x @ params[f"{prefix}{i}.w"] + params[f"{prefix}{i}.b"]


def _n_levels(params) -> int:
    return sum(1 for k in params if k.startswith("codebook"))


def _assign(params, z: torch.Tensor) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Greedy residual codes for latent ``z``; returns (codes, residuals-before-level)."""
    codes, residuals = [], []
    r = z
    for level in range(_n_levels(params)):
        book = params[f"codebook{level}"]
        residuals.append(r)
        c = torch.argmin(((r[:, None, :] - book[None]) ** 2).sum(-1), dim=1)
        codes.append(c)
        r = r - book[c]
    return codes, residuals


def vae_loss(params: dict, x: torch.Tensor, beta: float = 0.25, frozen: dict | None = None):
    """Total rq-vae loss and its parts.

    Every stop-gradient operand is evaluated with ``frozen`` (default: a
    detached copy of ``params``). Passing explicitly frozen parameters lets
    finite differences reproduce the straight-through gradient exactly.
    """
    if frozen is None:
        frozen = {k: v.detach() for k, v in params.items()}
    z = _mlp(params, "enc", x)
    with torch.no_grad():
        z_sg = _mlp(frozen, "enc", x)
        codes, res_sg = _assign(frozen, z_sg)
    r = z
    codebook_loss = x.new_zeros(())
    commit_loss = x.new_zeros(())
    q_sg = torch.zeros_like(z_sg)
    for level, c in enumerate(codes):
        e = params[f"codebook{level}"][c]
        e_sg = frozen[f"codebook{level}"][c]
        codebook_loss = codebook_loss + torch.mean((res_sg[level] - e) ** 2)
        commit_loss = commit_loss + torch.mean((r - e_sg) ** 2)
        r = r - e_sg
        q_sg = q_sg + e_sg
    z_q = z + (q_sg - z_sg)  # straight-through: value of the quantized latent, gradient of z
    recon = _mlp(params, "dec", z_q)
    recon_loss = torch.mean((recon - x) ** 2)
    total = recon_loss + codebook_loss + beta * commit_loss
    return total, {"recon": recon_loss, "codebook": codebook_loss, "commit": commit_loss, "codes": codes}


class ResidualQuantizer(TransformerMixin, BaseEstimator):
    """Greedy residual quantizer producing ``n_levels`` codes per vector.

    Parameters
    ----------
    n_levels : int
        Number of codeword levels (semantic ID length).
    codebook_size : int
        Codewords per level.
    backend : {"rq-kmeans", "rq-vae"}
    kmeans_iters : int
        Lloyd iterations per level (and for rq-vae codebook init).
    latent_dim, hidden_dims, beta, learning_rate, n_steps, batch_size
        rq-vae settings; ignored by rq-kmeans.
    dead_code_every : int
        rq-vae: every this many steps, codewords unused since the last check
        are moved onto random residuals from the current batch.
    random_state : int
    """

    def __init__(
        self,
        n_levels: int = 3,
        codebook_size: int = 256,
        backend: str = "rq-kmeans",
        kmeans_iters: int = 50,
        latent_dim: int = 32,
        hidden_dims=(128, 64),
        beta: float = 0.25,
        learning_rate: float = 1e-3,
        n_steps: int = 2000,
        batch_size: int = 512,
        dead_code_every: int = 100,
        random_state: int = 0,
    ):
        self.n_levels = n_levels
        self.codebook_size = codebook_size
        self.backend = backend
        self.kmeans_iters = kmeans_iters
        self.latent_dim = latent_dim
        self.hidden_dims = hidden_dims
        self.beta = beta
        self.learning_rate = learning_rate
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.dead_code_every = dead_code_every
        self.random_state = random_state

    def _validate_params(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.backend not in ("rq-kmeans", "rq-vae"):
            raise ValueError(f"unknown backend {self.backend!r}")

    @staticmethod
    def _as_array(X) -> np.ndarray:
        if isinstance(X, EmbeddingTable):
            X = X.vectors
        return check_array(X, dtype=np.float64)

    def fit(self, X, y=None):
        self._validate_params()
        self.modality_ = X.modality if isinstance(X, EmbeddingTable) else None
        X = self._as_array(X)
        self.n_features_in_ = X.shape[1]
        if self.codebook_size > len(X):
            warnings.warn(
                f"codebook_size={self.codebook_size} exceeds the {len(X)} training vectors",
                RuntimeWarning,
                stacklevel=2,
            )
        if self.backend == "rq-kmeans":
            self._fit_kmeans(X)
        else:
            self._fit_vae(X)
        return self

    def _fit_kmeans(self, X):
        books, mse, history = [], [float(np.mean(np.sum(X * X, axis=1)))], []
        r = X.copy()
        for level in range(self.n_levels):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                book, _, hist = lloyd(r, self.codebook_size, self.kmeans_iters, self.random_state + level)
            codes = nearest_codeword(r, book)
            r = r - book[codes]
            books.append(book)
            history.append(hist)
            mse.append(float(np.mean(np.sum(r * r, axis=1))))
        self.codebooks_ = books
        self.residual_mse_ = np.array(mse)
        self.distortion_log_ = history

    def _fit_vae(self, X):
        gen = torch.Generator().manual_seed(self.random_state)
        rng = np.random.default_rng(self.random_state)
        params = init_vae_params(
            X.shape[1], self.latent_dim, tuple(self.hidden_dims), self.n_levels, self.codebook_size, gen
        )
        Xt = torch.tensor(X, dtype=torch.float32)
        batch = min(self.batch_size, len(X))

        def batches():
            while True:
                for chunk in np.array_split(rng.permutation(len(X)), max(len(X) // batch, 1)):
                    yield Xt[torch.as_tensor(chunk)]

        stream = batches()
        first = next(stream)
        with torch.no_grad():
            r = _mlp(params, "enc", first).double().numpy()
            for level in range(self.n_levels):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    book = kmeans(r, self.codebook_size, self.kmeans_iters, self.random_state + level)
                params[f"codebook{level}"] = torch.as_tensor(book, dtype=torch.float32)
                r = r - book[nearest_codeword(r, book)]
        for p in params.values():
            p.requires_grad_(True)
        opt = torch.optim.Adam(params.values(), lr=self.learning_rate)
        usage = [torch.zeros(self.codebook_size, dtype=torch.long) for _ in range(self.n_levels)]
        losses = []
        xb = first
        for step in range(self.n_steps):
            loss, parts = vae_loss(params, xb, self.beta)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"rq-vae loss became non-finite at step {step} "
                    f"(recon={parts['recon'].item():.4g}, codebook={parts['codebook'].item():.4g}); "
                    "lower learning_rate"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            for level, c in enumerate(parts["codes"]):
                usage[level] += torch.bincount(c, minlength=self.codebook_size)
            if self.dead_code_every and (step + 1) % self.dead_code_every == 0:
                self._reinit_dead(params, xb, usage, gen)
                usage = [torch.zeros_like(u) for u in usage]
            xb = next(stream)
        self.vae_params_ = {k: v.detach().clone() for k, v in params.items()}
        self.codebooks_ = [self.vae_params_[f"codebook{l}"].double().numpy() for l in range(self.n_levels)]
        self.loss_curve_ = np.array(losses)
        z = self._latent(X)
        mse = [float(np.mean(np.sum(z * z, axis=1)))]
        for book in self.codebooks_:
            z = z - book[nearest_codeword(z, book)]
            mse.append(float(np.mean(np.sum(z * z, axis=1))))
        self.residual_mse_ = np.array(mse)
        self.distortion_log_ = [losses]

    @torch.no_grad()
    def _reinit_dead(self, params, xb, usage, gen):
        _, residuals = _assign(params, _mlp(params, "enc", xb))
        for level, used in enumerate(usage):
            dead = torch.nonzero(used == 0).flatten()
            if len(dead):
                pick = torch.randint(len(xb), (len(dead),), generator=gen)
                params[f"codebook{level}"][dead] = residuals[level][pick]

    @torch.no_grad()
    def _latent(self, X: np.ndarray) -> np.ndarray:
        if self.backend == "rq-kmeans":
            return X
        return _mlp(self.vae_params_, "enc", torch.tensor(X, dtype=torch.float32)).double().numpy()

    def transform(self, X) -> np.ndarray:
        """Codes of shape ``(n_samples, n_levels)``."""
        check_is_fitted(self, "codebooks_")
        X = self._as_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected dim {self.n_features_in_}, got {X.shape[1]}")
        r = self._latent(X)
        codes = np.empty((len(X), len(self.codebooks_)), dtype=np.int64)
        for level, book in enumerate(self.codebooks_):
            codes[:, level] = nearest_codeword(r, book)
            r = r - book[codes[:, level]]
        return codes

    def inverse_transform(self, codes) -> np.ndarray:
        check_is_fitted(self, "codebooks_")
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes[None, :]
        width = self.codebooks_[0].shape[1]
        z = np.zeros((len(codes), width))
        for level in range(codes.shape[1]):
            z = z + self.codebooks_[level][codes[:, level]]
        if self.backend == "rq-kmeans":
            return z
        if codes.shape[1] == 0:
            return np.zeros((len(codes), self.n_features_in_))
        with torch.no_grad():
            return _mlp(self.vae_params_, "dec", torch.as_tensor(z, dtype=torch.float32)).double().numpy()

    def encode(self, vector) -> list[int]:
        return [int(c) for c in self.transform(np.asarray(vector, dtype=np.float64)[None, :])[0]]

    def decode(self, codes) -> np.ndarray:
        codes = list(codes)
        if not codes:
            return np.zeros(self.n_features_in_)
        return self.inverse_transform(np.asarray(codes)[None, :])[0]

    def assign_ids(self, table: EmbeddingTable) -> SemanticIdMap:
        """Encode every item; colliding code tuples get suffixes in item-id order."""
        codes = self.transform(table)
        groups = defaultdict(list)
        for item, row in zip(table.item_ids, codes):
            groups[tuple(int(c) for c in row)].append(item)
        entries = {}
        for key, items in groups.items():
            for suffix, item in enumerate(sorted(items)):
                entries[item] = (key, suffix)
        return SemanticIdMap(table.modality, self.n_levels, self.codebook_size, entries)
