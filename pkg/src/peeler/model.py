"""Embedding networks, prototype/precision estimators and distance heads."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PRECISION_EPS = 1e-6

HEAD_KINDS = ("euclidean", "mahalanobis")
PROTOTYPE_SOURCES = ("estimated", "learned")
PRECISION_SOURCES = ("identity", "estimated", "learned")


class EmbeddingNet:
    """Multilayer perceptron: affine/relu pairs with a bare final affine."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, prefix: str = "f"):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"layer sizes must list at least input and output widths, got {sizes}")
        self.sizes = sizes
        self.prefix = prefix
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if rng is None:
                w = np.zeros((d_in, d_out))
            else:
                w = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
            self.layers.append(
                (
                    Tensor(w, requires_grad=True, name=f"{prefix}.{i}.weight"),
                    Tensor(np.zeros(d_out), requires_grad=True, name=f"{prefix}.{i}.bias"),
                )
            )

    @property
    def d_in(self) -> int:
        return self.sizes[0]

    @property
    def d_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for w, b in self.layers:
            out[w.name] = w
            out[b.name] = b
        return out

    def __call__(self, x) -> Tensor:
        return embed(self, x)


class PrecisionNet(EmbeddingNet):
    """Same structure as :class:`EmbeddingNet`; outputs raw (pre-softplus) precisions."""

    positivity = "softplus"

    def __init__(self, sizes, rng=None, prefix: str = "g"):
        super().__init__(sizes, rng, prefix)


def embed(net: EmbeddingNet, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2 or x.shape[1] != net.d_in:
        raise ShapeError(f"embed: expected input of width {net.d_in}, got shape {x.shape}")
    h = x
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        h = T.affine(h, w, b)
        if i < last:
            h = T.relu(h)
    return h


def _class_average_matrix(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes] if labels.size else np.zeros(n_classes, int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"support labels must lie in [0, {n_classes})")
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0])} has no support samples")
    avg = np.zeros((n_classes, labels.size))
    avg[labels, np.arange(labels.size)] = 1.0
    return avg / counts[:, None]


def compute_prototypes(features: Tensor, labels, n_classes: int | None = None) -> Tensor:
    """Per-class mean of support features."""
    labels = np.asarray(labels, dtype=np.int64)
    n = int(labels.max()) + 1 if n_classes is None else n_classes
    return T.matmul(_class_average_matrix(labels, n), features)


def compute_precisions(g_outputs: Tensor, labels, n_classes: int | None = None) -> Tensor:
    """softplus(per-class mean of g outputs) + eps, one diagonal per class."""
    return positive(compute_prototypes(g_outputs, labels, n_classes))


def positive(raw: Tensor) -> Tensor:
    return T.softplus(raw) + PRECISION_EPS


def _pairwise_sq_diff(f: Tensor, protos: Tensor) -> Tensor:
    if f.ndim != 2 or protos.ndim != 2 or f.shape[1] != protos.shape[1]:
        raise ShapeError(f"distance: embedding widths differ, {f.shape} vs {protos.shape}")
    q, d = f.shape
    n = protos.shape[0]
    diff = T.reshape(f, (q, 1, d)) - T.reshape(protos, (1, n, d))
    return T.square(diff)


def distance_euclidean(f: Tensor, protos: Tensor) -> Tensor:
    """Squared Euclidean distance, shape [queries, classes]."""
    return T.sum(_pairwise_sq_diff(f, protos), axis=2)


def distance_mahalanobis(f: Tensor, protos: Tensor, precisions: Tensor) -> Tensor:
    """Squared Mahalanobis distance with a diagonal precision per class."""
    if precisions.shape != protos.shape:
        raise ShapeError(f"precisions shape {precisions.shape} != prototypes shape {protos.shape}")
    if not np.all(precisions.data > 0):
        raise ValueError("precision entries must be strictly positive")
    sq = _pairwise_sq_diff(f, protos)
    n, d = protos.shape
    return T.sum(sq * T.reshape(precisions, (1, n, d)), axis=2)


@dataclass(eq=False)
class Posterior:
    log_probs: Tensor

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    @property
    def scores(self) -> np.ndarray:
        """Max seen-class probability per query (the rejection score)."""
        if self.log_probs.shape[0] == 0:
            return np.zeros(0)
        return np.exp(self.log_scores)

    @property
    def log_scores(self) -> np.ndarray:
        """Max seen-class log-probability; same ranking as ``scores`` without saturating at 1."""
        if self.log_probs.shape[0] == 0:
            return np.zeros(0)
        return self.log_probs.data.max(axis=1)


def posteriors(distances: Tensor) -> Posterior:
    return Posterior(T.log_softmax(-distances))


@dataclass(eq=False)
class DistanceHead:
    """Distance-based classifier configuration.

    Learned tables (``prototypes``, ``raw_precisions``) have one row per
    entry of ``class_ids``; ``rows`` selects the active subset after
    :func:`restrict_to_seen`.
    """

    kind: str = "euclidean"
    prototype_source: str = "estimated"
    precision_source: str = "identity"
    prototypes: Tensor | None = None
    raw_precisions: Tensor | None = None
    class_ids: tuple[int, ...] = ()
    rows: tuple[int, ...] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.prototype_source not in PROTOTYPE_SOURCES:
            raise ValueError(f"unknown prototype source {self.prototype_source!r}")
        if self.precision_source not in PRECISION_SOURCES:
            raise ValueError(f"unknown precision source {self.precision_source!r}")
        if (self.kind == "euclidean") != (self.precision_source == "identity"):
            raise ValueError("euclidean heads use identity precisions and mahalanobis heads never do")
        if self.prototype_source == "learned" and self.prototypes is None:
            raise ValueError("learned prototypes require a prototype table")
        if self.precision_source == "learned" and self.raw_precisions is None:
            raise ValueError("learned precisions require a raw precision table")

    @classmethod
    def learned(cls, kind: str, class_ids, dim: int, rng: np.random.Generator) -> "DistanceHead":
        class_ids = tuple(int(c) for c in class_ids)
        protos = Tensor(0.01 * rng.standard_normal((len(class_ids), dim)), requires_grad=True, name="head.prototypes")
        raw = None
        if kind == "mahalanobis":
            raw = Tensor(np.zeros((len(class_ids), dim)), requires_grad=True, name="head.raw_precisions")
        return cls(
            kind=kind,
            prototype_source="learned",
            precision_source="learned" if kind == "mahalanobis" else "identity",
            prototypes=protos,
            raw_precisions=raw,
            class_ids=class_ids,
        )

    @property
    def active_classes(self) -> tuple[int, ...]:
        if self.rows is None:
            return self.class_ids
        return tuple(self.class_ids[r] for r in self.rows)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.prototype_source == "learned":
            out["head.prototypes"] = self.prototypes
        if self.precision_source == "learned":
            out["head.raw_precisions"] = self.raw_precisions
        return out

    def learned_tables(self) -> tuple[Tensor, Tensor | None]:
        """Active learned prototypes and effective precisions (recorded on the tape)."""
        protos = self.prototypes
        raw = self.raw_precisions
        if self.rows is not None:
            protos = T.index_rows(protos, self.rows)
            raw = T.index_rows(raw, self.rows) if raw is not None else None
        prec = positive(raw) if raw is not None and self.precision_source == "learned" else None
        return protos, prec

    def distances(self, f: Tensor, protos: Tensor, precisions: Tensor | None) -> Tensor:
        if self.kind == "euclidean":
            return distance_euclidean(f, protos)
        return distance_mahalanobis(f, protos, precisions)


def restrict_to_seen(head: DistanceHead, seen_classes) -> DistanceHead:
    """View of a learned head scoring only ``seen_classes`` (in the given order)."""
    seen = [int(c) for c in seen_classes]
    if not seen:
        raise ValueError("seen_classes must be nonempty")
    if head.prototype_source != "learned":
        raise ValueError("only heads with learned prototypes can be restricted")
    position = {c: i for i, c in enumerate(head.class_ids)}
    unknown = [c for c in seen if c not in position]
    if unknown:
        raise KeyError(f"class {unknown[0]} is not in the learned prototype table")
    return replace(head, rows=tuple(position[c] for c in seen))


class PeelerModel:
    """f (embedding), optional g (precision embedding) and a distance head."""

    def __init__(self, f: EmbeddingNet, head: DistanceHead, g: PrecisionNet | None = None):
        if head.precision_source == "estimated":
            if g is None:
                raise ValueError("estimated precisions need a precision network")
            if g.d_out != f.d_out or g.d_in != f.d_in:
                raise ValueError("precision network must map the same input to the embedding width")
        self.f = f
        self.g = g if head.precision_source == "estimated" else None
        self.head = head

    @classmethod
    def build(
        cls,
        sizes,
        kind: str,
        mode: str,
        rng: np.random.Generator,
        class_ids=(),
    ) -> "PeelerModel":
        f = EmbeddingNet(sizes, rng, "f")
        if mode == "fewshot":
            if kind == "mahalanobis":
                return cls(f, DistanceHead("mahalanobis", "estimated", "estimated"), PrecisionNet(sizes, rng))
            return cls(f, DistanceHead("euclidean", "estimated", "identity"))
        if mode == "largescale":
            return cls(f, DistanceHead.learned(kind, class_ids, f.d_out, rng))
        raise ValueError(f"unknown mode {mode!r}")

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.f.parameters())
        if self.g is not None:
            out.update(self.g.parameters())
        out.update(self.head.parameters())
        return out

    def fewshot_posteriors(self, support_x, support_y, way: int, *queries) -> list[Posterior]:
        """Estimate prototypes (and precisions) from the support set, score each query batch."""
        support_x = np.asarray(support_x)
        protos = compute_prototypes(embed(self.f, support_x), support_y, way)
        prec = None
        if self.head.precision_source == "estimated":
            prec = compute_precisions(embed(self.g, support_x), support_y, way)
        out = []
        for q in queries:
            q = np.asarray(q).reshape(-1, self.f.d_in)
            out.append(posteriors(self.head.distances(embed(self.f, q), protos, prec)))
        return out

    def learned_posteriors(self, head: DistanceHead, *queries) -> list[Posterior]:
        protos, prec = head.learned_tables()
        out = []
        for q in queries:
            q = np.asarray(q).reshape(-1, self.f.d_in)
            out.append(posteriors(head.distances(embed(self.f, q), protos, prec)))
        return out


class LinearHead:
    """Linear softmax classifier over embeddings; kept only as a reference baseline."""

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        self.weight = Tensor(0.01 * rng.standard_normal((dim, n_classes)), requires_grad=True, name="linear.weight")
        self.bias = Tensor(np.zeros(n_classes), requires_grad=True, name="linear.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"linear.weight": self.weight, "linear.bias": self.bias}

    def __call__(self, f: Tensor) -> Posterior:
        return Posterior(T.log_softmax(T.affine(f, self.weight, self.bias)))
