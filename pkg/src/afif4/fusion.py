"""Score fusion: signed CNN scores, AdaBoost over score combinations, LDA final stage.

Each sample contributes five signed scores ``S = c * s``: the foggy face and
four local patches.  Every non-empty subset of the local labels gives one
combination vector ``<S_face, S_subset...>``; one AdaBoost ensemble of decision
stumps is trained per combination and their +/-1 votes feed a shrunk Fisher
discriminant.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .imagecore import FEMALE, MALE

FACE = "face"
LOCAL_LABELS = ("eye-left", "eye-right", "nose", "mouth")
ALL_LABELS = (FACE,) + LOCAL_LABELS
EPS_CLAMP = 1e-10
TIE_TOL = 1e-12
MAGIC = b"AFFU"
FORMAT_VERSION = 1


class FusionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureScore:
    label: str
    c: int
    s: float

    def __post_init__(self):
        if self.label not in ALL_LABELS:
            raise ValueError(f"unknown feature label {self.label!r}")
        signed_score(self.c, self.s)

    @property
    def S(self) -> float:
        return signed_score(self.c, self.s)


def signed_score(c: int, s: float) -> float:
    if c not in (MALE, FEMALE):
        raise ValueError(f"class must be +1 or -1, got {c!r}")
    if not 0.5 <= s <= 1.0:
        raise ValueError(f"softmax score must lie in [0.5, 1], got {s!r}")
    return c * s


@dataclass(frozen=True)
class ScoreCombination:
    index: int
    subset: tuple[str, ...]

    @property
    def layout(self) -> tuple[str, ...]:
        return (FACE,) + self.subset

    def vector(self, scores: Mapping[str, float]) -> np.ndarray:
        return np.array([scores[label] for label in self.layout], dtype=np.float64)


def enumerate_combinations(local_labels: Sequence[str] = LOCAL_LABELS) -> list[ScoreCombination]:
    """All ``2^n - 1`` non-empty subsets; index ``i`` has bit ``b`` set iff label ``b`` is in it."""
    labels = tuple(local_labels)
    n = len(labels)
    if n == 0:
        raise ValueError("need at least one local label")
    if n > 16:
        raise ValueError(f"at most 16 local labels supported, got {n}")
    if len(set(labels)) != n:
        raise ValueError("local labels must be distinct")
    return [ScoreCombination(i, tuple(labels[b] for b in range(n) if i >> b & 1))
            for i in range(1, 2 ** n)]


ScoreInput = Union[Mapping[str, Union[FeatureScore, float]], Iterable[FeatureScore]]


def score_map(scores: ScoreInput, labels: Sequence[str] = ALL_LABELS) -> dict[str, float]:
    """Signed scores keyed by label, whatever order or container they came in."""
    if isinstance(scores, Mapping):
        items = scores.items()
    else:
        items = [(fs.label, fs) for fs in scores]
    out = {}
    for label, val in items:
        out[label] = val.S if isinstance(val, FeatureScore) else float(val)
    missing = [label for label in labels if label not in out]
    if missing:
        raise KeyError(f"missing score for label(s) {missing}")
    return out


# --------------------------------------------------------------------------
# AdaBoost


@dataclass(frozen=True, eq=False)
class BoostEnsemble:
    dim: int
    components: np.ndarray
    thresholds: np.ndarray
    polarities: np.ndarray
    alphas: np.ndarray
    epsilons: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alphas)

    def stump_votes(self, X: np.ndarray) -> np.ndarray:
        """``(N, T)`` matrix of +/-1 stump outputs."""
        vals = X[:, self.components]
        return np.where(vals > self.thresholds, self.polarities, -self.polarities).astype(np.float64)

    def decision(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dim:
            raise ValueError(f"vector length {X.shape[1]} does not match ensemble length {self.dim}")
        return self.stump_votes(X) @ self.alphas

    def equals(self, other: "BoostEnsemble") -> bool:
        return self.dim == other.dim and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("components", "thresholds", "polarities", "alphas", "epsilons"))


def alpha_from_error(eps: float) -> float:
    eps = min(max(eps, EPS_CLAMP), 1 - EPS_CLAMP)
    return 0.5 * math.log((1 - eps) / eps)


def _best_stump(X: np.ndarray, y: np.ndarray, w: np.ndarray):
    best = None  # (error, component, threshold, polarity)
    candidates = []
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        # weight of positives at or below each cut minus negatives, accumulated
        wp = np.cumsum(np.where(y[order] > 0, w[order], 0.0))
        wn = np.cumsum(np.where(y[order] < 0, w[order], 0.0))
        cut = np.nonzero(xs[1:] > xs[:-1])[0]
        if len(cut) == 0:
            continue
        thr = 0.5 * (xs[cut] + xs[cut + 1])
        # polarity +1 predicts +1 above the threshold
        err_pos = wp[cut] + (wn[-1] - wn[cut])
        err_neg = wn[cut] + (wp[-1] - wp[cut])
        candidates.append((j, thr, err_pos, err_neg))
    if not candidates:
        return None
    lowest = min(min(ep.min(), en.min()) for _, _, ep, en in candidates)
    for j, thr, err_pos, err_neg in candidates:
        e = np.minimum(err_pos, err_neg)
        hits = np.nonzero(e <= lowest + TIE_TOL)[0]
        if len(hits):
            k = hits[0]
            polarity = 1 if err_pos[k] <= lowest + TIE_TOL else -1
            best = (j, float(thr[k]), polarity)
            break
    return best


def train_adaboost(vectors, labels, T: int = 50) -> BoostEnsemble:
    """Discrete AdaBoost with decision stumps at midpoints between sample values."""
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if X.size == 0 or len(X) != len(y):
        raise ValueError("need a non-empty set of vectors with one label each")
    if not np.all(np.isin(y, (MALE, FEMALE))):
        raise ValueError("labels must be +1 or -1")
    if len(np.unique(y)) < 2:
        raise ValueError("AdaBoost needs both classes in the training data")
    if T < 1:
        raise ValueError("T must be >= 1")
    n = len(y)
    w = np.full(n, 1.0 / n)
    comps, thrs, pols, alphas, epss = [], [], [], [], []
    for _ in range(T):
        stump = _best_stump(X, y, w)
        if stump is None:
            # no component varies: a constant vote for the weighted majority
            maj = 1 if w[y > 0].sum() >= w[y < 0].sum() else -1
            stump = (0, float(X[:, 0].min()) - 1.0, maj)
        j, thr, pol = stump
        pred = np.where(X[:, j] > thr, pol, -pol)
        eps = float(w[pred != y].sum())
        eps = min(max(eps, EPS_CLAMP), 1 - EPS_CLAMP)
        alpha = alpha_from_error(eps)
        w = w * np.exp(-alpha * y * pred)
        w /= w.sum()
        comps.append(j)
        thrs.append(thr)
        pols.append(pol)
        alphas.append(alpha)
        epss.append(eps)
    return BoostEnsemble(X.shape[1], np.array(comps, dtype=np.intp), np.array(thrs),
                         np.array(pols, dtype=np.int64), np.array(alphas), np.array(epss))


def predict_adaboost(ens: BoostEnsemble, v) -> int:
    """Sign of the alpha-weighted stump vote; an exact zero counts as MALE."""
    total = float(ens.decision(np.asarray(v, dtype=np.float64).reshape(1, -1))[0])
    return MALE if total >= 0 else FEMALE


def predict_adaboost_batch(ens: BoostEnsemble, X) -> np.ndarray:
    return np.where(ens.decision(X) >= 0, MALE, FEMALE)


def training_error_bound(ens: BoostEnsemble) -> float:
    e = ens.epsilons
    return float(np.prod(2 * np.sqrt(e * (1 - e))))


# --------------------------------------------------------------------------
# linear discriminant


@dataclass(frozen=True, eq=False)
class LinearDiscriminant:
    weights: np.ndarray
    bias: float
    shrinkage: float

    def decision(self, Y) -> np.ndarray:
        return np.atleast_2d(np.asarray(Y, dtype=np.float64)) @ self.weights + self.bias

    def predict(self, Y) -> np.ndarray:
        return np.where(self.decision(Y) >= 0, MALE, FEMALE)

    def equals(self, other: "LinearDiscriminant") -> bool:
        return (np.array_equal(self.weights, other.weights) and self.bias == other.bias
                and self.shrinkage == other.shrinkage)


def train_lda(Y, labels, shrinkage: float = 0.1) -> LinearDiscriminant:
    """Two-class Fisher discriminant, pooled covariance shrunk toward the identity.

    ``w = ((1 - lam) * Sigma + lam * I)^-1 (mu_male - mu_female)`` and the
    threshold sits halfway between the projected class means.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    y = np.asarray(labels)
    if not 0 <= shrinkage <= 1:
        raise ValueError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    if len(Y) != len(y) or len(Y) == 0:
        raise ValueError("need a non-empty set of vectors with one label each")
    if not (np.any(y == MALE) and np.any(y == FEMALE)):
        raise ValueError("discriminant needs both classes in the training data")
    pos, neg = Y[y == MALE], Y[y == FEMALE]
    mu_p, mu_n = pos.mean(axis=0), neg.mean(axis=0)
    centered = np.vstack([pos - mu_p, neg - mu_n])
    cov = centered.T @ centered / len(Y)
    reg = (1 - shrinkage) * cov + shrinkage * np.eye(Y.shape[1])
    diff = mu_p - mu_n
    try:
        w = np.linalg.solve(reg, diff)
    except np.linalg.LinAlgError:
        w = np.linalg.pinv(reg) @ diff
    bias = -0.5 * float(w @ (mu_p + mu_n))
    return LinearDiscriminant(w, bias, float(shrinkage))


# --------------------------------------------------------------------------
# full fusion model


@dataclass(frozen=True, eq=False)
class FusionModel:
    ensembles: tuple[BoostEnsemble, ...]
    discriminant: LinearDiscriminant
    local_labels: tuple[str, ...] = LOCAL_LABELS

    def __post_init__(self):
        object.__setattr__(self, "ensembles", tuple(self.ensembles))
        expected = 2 ** len(self.local_labels) - 1
        if len(self.ensembles) != expected:
            raise ValueError(f"expected {expected} ensembles, got {len(self.ensembles)}")

    @property
    def combinations(self) -> list[ScoreCombination]:
        return enumerate_combinations(self.local_labels)

    def votes(self, score_maps: Sequence[Mapping[str, float]]) -> np.ndarray:
        """``(N, 2^n - 1)`` matrix of ensemble decisions."""
        cols = []
        for comb, ens in zip(self.combinations, self.ensembles):
            X = np.array([comb.vector(m) for m in score_maps])
            cols.append(predict_adaboost_batch(ens, X))
        return np.stack(cols, axis=1).astype(np.float64)

    def equals(self, other: "FusionModel") -> bool:
        return (self.local_labels == other.local_labels
                and all(a.equals(b) for a, b in zip(self.ensembles, other.ensembles))
                and self.discriminant.equals(other.discriminant))


def train_fusion(scores: Sequence[ScoreInput], labels: Sequence[int], T: int = 50,
                 shrinkage: float = 0.1, disc_scores: Sequence[ScoreInput] | None = None,
                 disc_labels: Sequence[int] | None = None,
                 local_labels: Sequence[str] = LOCAL_LABELS) -> FusionModel:
    """Train the ensembles on ``scores`` and the discriminant on ``disc_scores``.

    Without a separate discriminant set both stages use the same samples.
    """
    local_labels = tuple(local_labels)
    needed = (FACE,) + local_labels
    maps = [score_map(s, needed) for s in scores]
    y = np.asarray(labels)
    combos = enumerate_combinations(local_labels)
    ensembles = []
    for comb in combos:
        X = np.array([comb.vector(m) for m in maps])
        ensembles.append(train_adaboost(X, y, T))
    if disc_scores is None:
        disc_maps, disc_y = maps, y
    else:
        disc_maps = [score_map(s, needed) for s in disc_scores]
        disc_y = np.asarray(disc_labels)
    partial = FusionModel(tuple(ensembles), LinearDiscriminant(np.zeros(len(combos)), 0.0, shrinkage),
                          local_labels)
    disc = train_lda(partial.votes(disc_maps), disc_y, shrinkage)
    return FusionModel(tuple(ensembles), disc, local_labels)


def predict_fusion(model: FusionModel, scores: ScoreInput) -> int:
    m = score_map(scores, (FACE,) + model.local_labels)
    return int(model.discriminant.predict(model.votes([m]))[0])


def predict_fusion_batch(model: FusionModel, scores: Sequence[ScoreInput]) -> np.ndarray:
    maps = [score_map(s, (FACE,) + model.local_labels) for s in scores]
    return model.discriminant.predict(model.votes(maps))


# --------------------------------------------------------------------------
# serialization


def _write_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def fusion_to_bytes(model: FusionModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(model.local_labels)))
    for label in model.local_labels:
        _write_str(buf, label)
    for ens in model.ensembles:
        buf.write(struct.pack("<II", ens.dim, ens.T))
        for j, thr, pol, a, e in zip(ens.components, ens.thresholds, ens.polarities,
                                     ens.alphas, ens.epsilons):
            buf.write(struct.pack("<Iiddd", int(j), int(pol), float(thr), float(a), float(e)))
    d = model.discriminant
    buf.write(struct.pack("<I", len(d.weights)))
    buf.write(np.ascontiguousarray(d.weights, dtype="<f8").tobytes())
    buf.write(struct.pack("<dd", d.bias, d.shrinkage))
    return buf.getvalue()


def fusion_from_bytes(data: bytes) -> FusionModel:
    if data[:4] != MAGIC:
        raise FusionFormatError("not a fusion model file (bad magic bytes)")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise FusionFormatError(f"unsupported fusion format version {version}")
        off = 12
        labels = []
        for _ in range(n):
            (length,) = struct.unpack_from("<I", data, off)
            off += 4
            labels.append(data[off:off + length].decode("utf-8"))
            off += length
        ensembles = []
        for _ in range(2 ** n - 1):
            dim, T = struct.unpack_from("<II", data, off)
            off += 8
            rows = [struct.unpack_from("<Iiddd", data, off + k * 32) for k in range(T)]
            off += 32 * T
            comps, pols, thrs, alphas, epss = (np.array(col) for col in zip(*rows))
            ensembles.append(BoostEnsemble(dim, comps.astype(np.intp), thrs.astype(np.float64),
                                           pols.astype(np.int64), alphas.astype(np.float64),
                                           epss.astype(np.float64)))
        (m,) = struct.unpack_from("<I", data, off)
        off += 4
        weights = np.frombuffer(data, dtype="<f8", count=m, offset=off).astype(np.float64)
        off += 8 * m
        bias, shrink = struct.unpack_from("<dd", data, off)
        off += 16
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, FusionFormatError):
            raise
        raise FusionFormatError(f"corrupt fusion model: {exc}") from exc
    if off != len(data):
        raise FusionFormatError(f"{len(data) - off} trailing bytes after fusion model")
    return FusionModel(tuple(ensembles), LinearDiscriminant(weights, bias, shrink), tuple(labels))


def save_fusion(model: FusionModel, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(fusion_to_bytes(model))


def load_fusion(path) -> FusionModel:
    return fusion_from_bytes(Path(path).read_bytes())
