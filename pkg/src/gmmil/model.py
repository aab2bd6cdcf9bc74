"""Parameter and dataset containers.

A :class:`BagDataset` stores instances in flat arrays (one row per instance)
together with the bag index of every row; :class:`Bag` and :class:`Instance`
are lightweight views for code that prefers to walk bag by bag.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyDataset
from .linalg import SpdFactor, spd_factorize, unvech, vech

UNOBSERVED = -1


def n_params(p: int) -> int:
    """Length of the flattened parameter vector (pi, mu1, mu0, vech(Omega))."""
    return (p * p + 5 * p + 2) // 2


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Mixture parameters: instance prevalence ``pi``, class means, shared covariance.

    ``alpha`` (bag prevalence) is carried along but is not part of the
    flattened vector.
    """

    pi: float
    mu1: np.ndarray
    mu0: np.ndarray
    sigma: np.ndarray
    alpha: float = float("nan")

    def __post_init__(self):
        mu1 = np.array(self.mu1, dtype=float).reshape(-1)
        mu0 = np.array(self.mu0, dtype=float).reshape(-1)
        sigma = np.array(self.sigma, dtype=float)
        if sigma.ndim == 0:
            sigma = sigma.reshape(1, 1)
        p = mu1.shape[0]
        if mu0.shape != (p,) or sigma.shape != (p, p):
            raise DimensionMismatch(f"mu1 {mu1.shape}, mu0 {mu0.shape}, sigma {sigma.shape}")
        if not 0.0 < self.pi < 1.0:
            raise ValueError(f"pi must lie in (0, 1), got {self.pi}")
        for arr in (mu1, mu0, sigma):
            arr.flags.writeable = False
        object.__setattr__(self, "mu1", mu1)
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "pi", float(self.pi))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def p(self) -> int:
        return self.mu1.shape[0]

    @cached_property
    def factor(self) -> SpdFactor:
        return spd_factorize(self.sigma)

    @cached_property
    def omega(self) -> np.ndarray:
        return self.factor.inverse()

    @property
    def beta(self) -> np.ndarray:
        """Slope of the instance log-odds, ``Omega (mu1 - mu0)``."""
        return self.factor.solve(self.mu1 - self.mu0)

    @property
    def intercept(self) -> float:
        """Intercept of the instance log-odds."""
        om_mu1 = self.factor.solve(self.mu1)
        om_mu0 = self.factor.solve(self.mu0)
        return 0.5 * (self.mu0 @ om_mu0 - self.mu1 @ om_mu1) + np.log(self.pi / (1.0 - self.pi))

    def replace(self, **changes) -> "ModelParams":
        kw = dict(pi=self.pi, mu1=self.mu1, mu0=self.mu0, sigma=self.sigma, alpha=self.alpha)
        kw.update(changes)
        return ModelParams(**kw)

    def allclose(self, other: "ModelParams", atol=1e-12) -> bool:
        return bool(np.max(np.abs(flatten(self) - flatten(other))) <= atol)


def flatten(params: ModelParams) -> np.ndarray:
    """Stack ``(pi, mu1, mu0, vech(Omega))`` into one vector of length q."""
    return np.concatenate([[params.pi], params.mu1, params.mu0, vech(params.omega)])


def unflatten(theta, p: int, alpha: float = float("nan")) -> ModelParams:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (n_params(p),):
        raise DimensionMismatch(f"p={p} needs {n_params(p)} parameters, got {theta.shape}")
    omega = unvech(theta[1 + 2 * p:], p)
    sigma = spd_factorize(omega).inverse()
    return ModelParams(theta[0], theta[1:1 + p], theta[1 + p:1 + 2 * p], sigma, alpha)


@dataclass(frozen=True)
class Instance:
    instance_id: object
    x: np.ndarray
    a: int = UNOBSERVED
    s: int = 0
    loc: np.ndarray | None = None


@dataclass(frozen=True)
class Bag:
    bag_id: object
    y: int
    instances: tuple[Instance, ...]

    def __len__(self):
        return len(self.instances)


@dataclass(frozen=True, eq=False)
class BagDataset:
    """Bags of instances in flat-array form.

    Attributes
    ----------
    x : (n, p) features.
    bag : (n,) index into ``y`` / ``bag_ids`` for every instance, non-decreasing.
    y : (N,) bag labels.
    a : (n,) instance labels, ``-1`` for unobserved.
    s : (n,) subsample indicators, or ``None`` when the data carry no
        subsampling information at all.
    loc : (n, 2) spatial locations or ``None``.
    meta : free-form generator metadata (not serialized).
    """

    x: np.ndarray
    bag: np.ndarray
    y: np.ndarray
    a: np.ndarray
    s: np.ndarray | None = None
    loc: np.ndarray | None = None
    bag_ids: np.ndarray | None = None
    instance_ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DimensionMismatch(f"x must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        bag = np.asarray(self.bag, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int8)
        a = np.asarray(self.a, dtype=np.int8)
        if bag.shape != (n,) or a.shape != (n,):
            raise DimensionMismatch("bag and a must have one entry per instance")
        if n and (np.any(np.diff(bag) < 0) or bag[0] < 0 or bag[-1] >= y.shape[0]):
            raise ValueError("bag indices must be sorted and index into y")
        s = None if self.s is None else np.asarray(self.s, dtype=np.int8)
        if s is not None and s.shape != (n,):
            raise DimensionMismatch("s must have one entry per instance")
        loc = None if self.loc is None else np.asarray(self.loc, dtype=float)
        if loc is not None and loc.shape != (n, 2):
            raise DimensionMismatch("loc must have shape (n, 2)")
        bag_ids = np.arange(y.shape[0]) if self.bag_ids is None else np.asarray(self.bag_ids)
        if bag_ids.shape != y.shape:
            raise DimensionMismatch("one bag id per bag required")
        if self.instance_ids is None:
            instance_ids = np.arange(n) - self._starts_for(bag, y.shape[0])[bag]
        else:
            instance_ids = np.asarray(self.instance_ids)
        for name, arr in (("x", x), ("bag", bag), ("y", y), ("a", a), ("s", s), ("loc", loc),
                          ("bag_ids", bag_ids), ("instance_ids", instance_ids)):
            if arr is not None:
                arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @staticmethod
    def _starts_for(bag, n_bags):
        counts = np.bincount(bag, minlength=n_bags)
        return np.concatenate([[0], np.cumsum(counts)[:-1]])

    @classmethod
    def from_bags(cls, bags: Sequence[Bag], p: int | None = None) -> "BagDataset":
        rows, bag_idx, a, s, loc, inst_ids = [], [], [], [], [], []
        any_loc = any(inst.loc is not None for b in bags for inst in b.instances)
        for i, b in enumerate(bags):
            for inst in b.instances:
                rows.append(np.asarray(inst.x, dtype=float).reshape(-1))
                bag_idx.append(i)
                a.append(inst.a)
                s.append(inst.s)
                inst_ids.append(inst.instance_id)
                if any_loc:
                    loc.append(inst.loc if inst.loc is not None else (np.nan, np.nan))
        if rows:
            dims = {r.shape[0] for r in rows}
            if len(dims) != 1:
                raise DimensionMismatch(f"instances have differing dimensions {sorted(dims)}")
            x = np.vstack(rows)
        else:
            x = np.zeros((0, p or 0))
        return cls(x=x, bag=np.array(bag_idx, dtype=np.int64), y=[b.y for b in bags],
                   a=np.array(a, dtype=np.int8), s=np.array(s, dtype=np.int8),
                   loc=np.array(loc) if any_loc else None,
                   bag_ids=np.array([b.bag_id for b in bags]), instance_ids=np.array(inst_ids))

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_bags(self) -> int:
        return self.y.shape[0]

    @property
    def n_instances(self) -> int:
        return self.x.shape[0]

    @cached_property
    def bag_sizes(self) -> np.ndarray:
        return np.bincount(self.bag, minlength=self.n_bags)

    @cached_property
    def bag_starts(self) -> np.ndarray:
        return self._starts_for(self.bag, self.n_bags)

    @cached_property
    def instance_y(self) -> np.ndarray:
        """Bag label broadcast to every instance."""
        return self.y[self.bag]

    @property
    def common_bag_size(self) -> int | None:
        sizes = np.unique(self.bag_sizes)
        return int(sizes[0]) if sizes.size == 1 else None

    def bag_slice(self, i: int) -> slice:
        start = int(self.bag_starts[i])
        return slice(start, start + int(self.bag_sizes[i]))

    @property
    def bags(self) -> Iterator[Bag]:
        for i in range(self.n_bags):
            sl = self.bag_slice(i)
            insts = tuple(
                Instance(self.instance_ids[k], self.x[k], int(self.a[k]),
                         0 if self.s is None else int(self.s[k]),
                         None if self.loc is None else self.loc[k])
                for k in range(sl.start, sl.stop)
            )
            yield Bag(self.bag_ids[i], int(self.y[i]), insts)

    def replace(self, **changes) -> "BagDataset":
        kw = {name: getattr(self, name) for name in
              ("x", "bag", "y", "a", "s", "loc", "bag_ids", "instance_ids", "meta")}
        kw.update(changes)
        return BagDataset(**kw)

    def subset_bags(self, indices) -> "BagDataset":
        """Dataset restricted to the given bags (kept in ascending order)."""
        indices = np.sort(np.asarray(indices, dtype=np.int64))
        keep = np.isin(self.bag, indices)
        remap = np.full(self.n_bags, -1, dtype=np.int64)
        remap[indices] = np.arange(indices.size)
        return BagDataset(
            x=self.x[keep], bag=remap[self.bag[keep]], y=self.y[indices], a=self.a[keep],
            s=None if self.s is None else self.s[keep],
            loc=None if self.loc is None else self.loc[keep],
            bag_ids=self.bag_ids[indices], instance_ids=self.instance_ids[keep], meta=dict(self.meta),
        )

    def without_instance_labels(self) -> "BagDataset":
        return self.replace(a=np.full(self.n_instances, UNOBSERVED, dtype=np.int8), s=None)

    def equals(self, other: "BagDataset") -> bool:
        def same(u, v):
            if u is None or v is None:
                return u is None and v is None
            return u.shape == v.shape and bool(np.array_equal(u, v, equal_nan=u.dtype.kind == "f"))

        return all(same(getattr(self, k), getattr(other, k)) for k in ("x", "bag", "y", "a", "s", "loc")) and \
            np.array_equal(self.bag_ids.astype(str), other.bag_ids.astype(str)) and \
            np.array_equal(self.instance_ids.astype(str), other.instance_ids.astype(str))


@dataclass(frozen=True)
class Violation:
    kind: str
    bag_id: object
    instance_id: object = None
    message: str = ""

    def __str__(self):
        where = f"bag {self.bag_id}" + ("" if self.instance_id is None else f", instance {self.instance_id}")
        return f"{self.kind} ({where}): {self.message}"


def validate(dataset: BagDataset) -> list[Violation]:
    """List model violations; an empty list means the dataset is valid."""
    out = []
    for i in np.flatnonzero((dataset.y != 0) & (dataset.y != 1)):
        out.append(Violation("bad_bag_label", dataset.bag_ids[i], None, f"y={dataset.y[i]}"))
    for k in np.flatnonzero(~np.isin(dataset.a, (UNOBSERVED, 0, 1))):
        out.append(Violation("bad_instance_label", dataset.bag_ids[dataset.bag[k]],
                             dataset.instance_ids[k], f"a={dataset.a[k]}"))
    for k in np.flatnonzero((dataset.instance_y == 0) & (dataset.a == 1)):
        out.append(Violation("positive_in_negative_bag", dataset.bag_ids[dataset.bag[k]],
                             dataset.instance_ids[k], "a=1 inside a bag with y=0"))
    if dataset.s is not None:
        for k in np.flatnonzero(~np.isin(dataset.s, (0, 1))):
            out.append(Violation("bad_subsample_flag", dataset.bag_ids[dataset.bag[k]],
                                 dataset.instance_ids[k], f"s={dataset.s[k]}"))
        for k in np.flatnonzero((dataset.s == 1) & (dataset.a == UNOBSERVED)):
            out.append(Violation("subsampled_unlabeled", dataset.bag_ids[dataset.bag[k]],
                                 dataset.instance_ids[k], "s=1 but a is unobserved"))
    if not np.all(np.isfinite(dataset.x)):
        rows = np.flatnonzero(~np.all(np.isfinite(dataset.x), axis=1))
        for k in rows:
            out.append(Violation("non_finite_feature", dataset.bag_ids[dataset.bag[k]],
                                 dataset.instance_ids[k], "feature vector contains nan/inf"))
    for i in np.flatnonzero(dataset.bag_sizes == 0):
        out.append(Violation("empty_bag", dataset.bag_ids[i], None, "bag has no instances"))
    return out


def estimate_alpha(dataset: BagDataset) -> float:
    """Bag prevalence estimate: the mean of the bag labels."""
    if dataset.n_bags == 0:
        raise EmptyDataset("no bags")
    return float(np.mean(dataset.y))


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    estimator_kind: str
    loglik_trace: tuple = ()
    iterations: int = 0
    converged: bool = True
    ridge_events: int = 0
