"""Text-feature fusion kernels.

Pixel features are projected into the text embedding space, compared to
every category embedding by cosine similarity, concatenated with the
original features and classified by a per-pixel linear layer. Analytic
gradients of the pixel cross-entropy are provided for the two trainable
matrices so the chain can be checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError
from .stats import log_softmax

PROMPT_TEMPLATE = "A satellite image of {}"

CATEGORY_GROUPS: list[tuple[str, list[str]]] = [
    ("Buildings", ["roof", "building", "built-up", "construction", "architecture",
                   "facility", "house", "skyscraper", "rural residential", "urban residential"]),
    ("Transportation", ["stadium", "railway station", "airport"]),
    ("Roads", ["street", "road", "highway", "path", "route", "lane", "avenue", "way"]),
    ("Water Bodies", ["liquid", "water", "river", "lake", "pond", "ocean"]),
    ("Barren", ["barren land", "wasteland", "unlabeled"]),
    ("Forest", ["woodland", "jungle", "bush", "forest", "woods", "grove"]),
    ("Agriculture", ["farming", "farmland", "agrarian", "ranching", "agricultural land",
                     "irrigated field"]),
    ("Greenhouses", ["greenhouse", "hothouse", "glasshouse"]),
    ("Meadows", ["shrubs", "meadow", "herbs", "grass", "grassland", "pasture", "prairie",
                 "natural meadow", "artificial meadow"]),
]


def build_prompts() -> list[str]:
    return [PROMPT_TEMPLATE.format(t) for _, terms in CATEGORY_GROUPS for t in terms]


@dataclass
class TextBank:
    terms: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.terms):
            raise ValueError(
                f"bank has {len(self.terms)} terms but vectors of shape {self.vectors.shape}"
            )
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(self.vectors)):
            bad = [self.terms[i] for i in np.flatnonzero(~(norms > 0))]
            raise ValueError(f"text vectors must be finite and nonzero: {bad}")

    @property
    def K(self) -> int:
        return len(self.terms)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def pseudo_bank(terms: Sequence[str], d: int, seed: int = 0) -> TextBank:
    """Seeded Gaussian stand-in for real text-encoder embeddings."""
    rng = np.random.default_rng(seed)
    return TextBank(list(terms), rng.standard_normal((len(terms), d)))


def write_bank(path, bank: TextBank) -> None:
    lines = [f"{bank.K}\t{bank.d}"]
    for term, vec in zip(bank.terms, bank.vectors):
        if "\t" in term or "\n" in term:
            raise ValueError(f"term {term!r} contains a tab or newline")
        lines.append("\t".join([term, *(repr(float(v)) for v in vec)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_bank(path) -> TextBank:
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError("empty bank file", 1, path)
    try:
        k, d = (int(v) for v in lines[0].split("\t"))
    except ValueError:
        raise FormatError("first line must be 'K<TAB>d'", 1, path) from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != k:
        raise FormatError(f"expected {k} term lines, found {len(body)}", 1, path)
    terms, vectors = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != d + 1:
            raise FormatError(f"expected term and {d} values, got {len(parts) - 1}", lineno, path)
        try:
            vectors.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise FormatError(str(exc), lineno, path) from None
        terms.append(parts[0])
    try:
        return TextBank(terms, np.array(vectors, dtype=np.float64).reshape(k, d))
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from None


@dataclass
class FusionWeights:
    align: np.ndarray  # (c, d)
    logit: np.ndarray  # (K + c, N)

    @classmethod
    def random(cls, c: int, d: int, k: int, n: int, rng: np.random.Generator) -> FusionWeights:
        return cls(rng.standard_normal((c, d)) / np.sqrt(c), rng.standard_normal((k + c, n)))


def align(fmap: np.ndarray, weight: np.ndarray) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if fmap.ndim != 3 or weight.ndim != 2 or fmap.shape[2] != weight.shape[0]:
        raise ValueError(f"cannot align features {fmap.shape} with weight {weight.shape}")
    return fmap @ weight


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return np.where(norm > 0, x / safe, 0.0), norm


def cosine_fuse(aligned: np.ndarray, bank: TextBank) -> np.ndarray:
    """(h, w, K) cosine similarity of every pixel vector with every text vector.

    A pixel whose aligned vector is exactly zero gets 0 for every category.
    """
    aligned = np.asarray(aligned, dtype=np.float64)
    if aligned.ndim != 3 or aligned.shape[2] != bank.d:
        raise ValueError(f"aligned map {aligned.shape} does not match bank dim {bank.d}")
    u, _ = _unit_rows(aligned)
    t, _ = _unit_rows(bank.vectors)
    return np.clip(u @ t.T, -1.0, 1.0)


def zero_pixels(aligned: np.ndarray) -> np.ndarray:
    """Boolean (h, w) map of pixels where the cosine is undefined."""
    return ~np.any(np.asarray(aligned) != 0, axis=-1)


def concat_fuse(fused: np.ndarray, fmap: np.ndarray) -> np.ndarray:
    """Fused similarities first, visual channels second."""
    if fused.shape[:2] != fmap.shape[:2]:
        raise ValueError(f"spatial sizes differ: {fused.shape[:2]} vs {fmap.shape[:2]}")
    return np.concatenate([fused, fmap], axis=-1)


def classify(features: np.ndarray, logit_weight: np.ndarray, onehot: np.ndarray | None = None,
             reduction: str = "sum") -> tuple[np.ndarray, float | None]:
    """Per-pixel linear logits, softmax probabilities and cross-entropy.

    ``reduction="sum"`` is the plain triple sum over pixels and classes;
    ``"mean"`` divides by the number of labelled pixels. Pixels whose
    one-hot row is all zero are ignored.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != logit_weight.shape[0]:
        raise ValueError(f"features {features.shape} incompatible with weight {logit_weight.shape}")
    logp = log_softmax(features @ logit_weight)
    probs = np.exp(logp)
    if onehot is None:
        return probs, None
    return probs, _ce(logp, onehot, reduction)


def _ce(logp: np.ndarray, onehot: np.ndarray, reduction: str) -> float:
    y = np.asarray(onehot, dtype=np.float64)
    if y.shape != logp.shape:
        raise ValueError(f"onehot {y.shape} does not match logits {logp.shape}")
    total = -float((y * logp).sum())
    if reduction == "sum":
        return total
    if reduction == "mean":
        n = float(y.sum())
        return total / n if n else 0.0
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class FusionPass:
    loss: float
    probs: np.ndarray
    grad_align: np.ndarray
    grad_logit: np.ndarray
    grad_features: np.ndarray


def fusion_loss(fmap, bank: TextBank, weights: FusionWeights, onehot, reduction: str = "sum") -> float:
    aligned = align(fmap, weights.align)
    ff = concat_fuse(cosine_fuse(aligned, bank), np.asarray(fmap, dtype=np.float64))
    return classify(ff, weights.logit, onehot, reduction)[1]


def fusion_forward_backward(
    fmap, bank: TextBank, weights: FusionWeights, onehot, reduction: str = "sum"
) -> FusionPass:
    """Loss and analytic gradients w.r.t. both weight matrices and the input features."""
    r = np.asarray(fmap, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    k = bank.K
    a = align(r, weights.align)
    u, norm = _unit_rows(a)
    t, _ = _unit_rows(bank.vectors)
    fused = u @ t.T
    ff = concat_fuse(fused, r)
    logp = log_softmax(ff @ weights.logit)
    probs = np.exp(logp)
    loss = _ce(logp, y, reduction)

    labeled = y.sum(axis=-1, keepdims=True)
    dz = probs * labeled - y
    if reduction == "mean":
        n = float(y.sum())
        dz = dz / n if n else dz * 0.0

    grad_logit = np.einsum("hwf,hwn->fn", ff, dz)
    dff = dz @ weights.logit.T
    du = dff[..., :k] @ t
    # d(a/|a|) = (du - u <u, du>) / |a|; zero pixels carry no gradient.
    safe = np.where(norm > 0, norm, 1.0)
    da = np.where(norm > 0, (du - u * np.sum(u * du, axis=-1, keepdims=True)) / safe, 0.0)
    grad_align = np.einsum("hwc,hwd->cd", r, da)
    grad_features = da @ weights.align.T + dff[..., k:]
    return FusionPass(loss, probs, grad_align, grad_logit, grad_features)


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (which is perturbed in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        up = f()
        x[idx] = orig - eps
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def random_problem(rng: np.random.Generator, max_hw=4, max_cd=6, max_k=5, max_n=4):
    h, w = rng.integers(1, max_hw + 1, size=2)
    c, d = rng.integers(1, max_cd + 1, size=2)
    k = int(rng.integers(1, max_k + 1))
    n = int(rng.integers(1, max_n + 1))
    fmap = rng.standard_normal((h, w, c))
    bank = pseudo_bank([f"t{i}" for i in range(k)], int(d), int(rng.integers(2**31)))
    weights = FusionWeights.random(int(c), int(d), k, n, rng)
    cls = rng.integers(0, n, size=(h, w))
    onehot = np.eye(n)[cls]
    # Leave some pixels unlabelled.
    onehot[rng.random((h, w)) < 0.2] = 0.0
    return fmap, bank, weights, onehot


def gradient_check(fmap, bank, weights: FusionWeights, onehot, reduction="sum", eps=1e-6) -> dict:
    """Relative errors between analytic and central-difference gradients."""
    res = fusion_forward_backward(fmap, bank, weights, onehot, reduction)
    fmap = np.array(fmap, dtype=np.float64)

    def loss():
        return fusion_loss(fmap, bank, weights, onehot, reduction)

    return {
        "align": relative_error(res.grad_align, central_difference(loss, weights.align, eps)),
        "logit": relative_error(res.grad_logit, central_difference(loss, weights.logit, eps)),
        "features": relative_error(res.grad_features, central_difference(loss, fmap, eps)),
    }


def selfcheck(seed: int = 0, trials: int = 50, tol: float = 1e-5) -> list[tuple[str, bool, str]]:
    """Shape, bound and gradient checks; one (name, ok, detail) entry per check."""
    rng = np.random.default_rng(seed)
    results = []
    prompts = build_prompts()
    results.append(("prompt_count", len(prompts) == 54, f"{len(prompts)} prompts"))

    worst = 0.0
    bounds_ok = rows_ok = True
    for _ in range(trials):
        fmap, bank, weights, onehot = random_problem(rng)
        worst = max(worst, *gradient_check(fmap, bank, weights, onehot).values())
        fused = cosine_fuse(align(fmap, weights.align), bank)
        bounds_ok &= bool(np.all(np.abs(fused) <= 1.0))
        probs, _ = classify(concat_fuse(fused, fmap), weights.logit)
        rows_ok &= bool(np.all(np.abs(probs.sum(axis=-1) - 1.0) <= 1e-12))
    results.append(("gradient_fd", worst <= tol, f"max rel err {worst:.3e} over {trials} trials"))
    results.append(("cosine_bounds", bounds_ok, "all similarities in [-1, 1]"))
    results.append(("prob_rows", rows_ok, "probability rows sum to 1"))
    return results
