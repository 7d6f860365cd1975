"""Hierarchical clustering of node positions.

k-means (k-means++ seeding) initialises a Gaussian mixture that is fitted
by expectation-maximisation; applying the pair recursively produces a
k-ary tree whose nodes are labelled by base-k digit prefixes.  Membership
at every level follows the mixture: a point descends into the child with
the largest weighted density.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DegenerateK, NoActionNeeded

COV_FLOOR = 1e-6
DIGITS = "0123456789abcdefghijklmnopqrstuvwxyz"

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Gaussian:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(2)
        self.covariance = floor_covariance(np.asarray(self.covariance, dtype=float).reshape(2, 2))

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return _logpdf(np.atleast_2d(x), self.mean, self.covariance)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))


@dataclass
class Gmm:
    components: list[tuple[float, Gaussian]]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.components])

    @property
    def k(self) -> int:
        return len(self.components)

    def log_component_densities(self, x: np.ndarray) -> np.ndarray:
        """``log(phi_i) + log N(x; mu_i, Sigma_i)`` for every row of x, shape (n, k)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([math.log(w) + g.logpdf(x) for w, g in self.components], axis=1)

    def log_likelihood(self, x: np.ndarray) -> float:
        """Mean per-point log-likelihood."""
        return float(np.mean(_logsumexp(self.log_component_densities(x))))


def floor_covariance(cov: np.ndarray, eps: float = COV_FLOOR) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= eps:
        return cov
    vals = np.maximum(vals, eps)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    a, b, d = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * d - b * b
    dx = x[:, 0] - mean[0]
    dy = x[:, 1] - mean[1]
    maha = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    return -0.5 * (maha + math.log(det)) - _LOG_2PI


def _logsumexp(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1)
    return top + np.log(np.exp(a - top[:, None]).sum(axis=1))


def gmm_pdf(gmm: Gmm, x) -> float | np.ndarray:
    """Mixture density at one point (returns float) or at each row of x."""
    arr = np.asarray(x, dtype=float)
    dens = np.exp(gmm.log_component_densities(arr)).sum(axis=1)
    return float(dens[0]) if arr.ndim == 1 else dens


# --- k-means ------------------------------------------------------------------


def kmeans(
    points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(centroids, assignments)``.  Raises DegenerateK when there are
    fewer distinct points than clusters.
    """
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    if k < 1 or len(X) == 0:
        raise ValueError("kmeans needs k >= 1 and at least one point")
    if k > len(np.unique(X, axis=0)):
        raise DegenerateK(f"k={k} exceeds the number of distinct points")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, 2))
    centroids[0] = X[rng.integers(len(X))]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(len(X), p=d2 / total)) if total > 0 else int(np.argmax(d2))
        centroids[j] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centroids[j]) ** 2, axis=1))

    assign = np.zeros(len(X), dtype=int)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        new = centroids.copy()
        for j in range(k):
            members = X[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its centroid.
                far = int(np.argmax(dist[np.arange(len(X)), assign]))
                new[j] = X[far]
                assign[far] = j
        shift = float(np.max(np.hypot(*(new - centroids).T)))
        centroids = new
        if shift < tol:
            break
    dist = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return centroids, np.argmin(dist, axis=1)


# --- EM -----------------------------------------------------------------------


def _init_from_kmeans(X: np.ndarray, k: int, centroids: np.ndarray, assign: np.ndarray):
    n = len(X)
    global_cov = np.cov(X.T, bias=True) if n > 1 else np.zeros((2, 2))
    weights = np.empty(k)
    covs = np.empty((k, 2, 2))
    for j in range(k):
        members = X[assign == j]
        weights[j] = max(len(members), 1) / n
        covs[j] = np.cov(members.T, bias=True) if len(members) > 1 else global_cov
        covs[j] = floor_covariance(covs[j])
    return weights / weights.sum(), np.array(centroids, dtype=float), covs


def em_fit(
    points,
    k: int,
    init: tuple[np.ndarray, np.ndarray] | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
    seed: int = 0,
    trace: list | None = None,
) -> Gmm:
    """Fit a k-component mixture by EM, starting from a k-means result.

    ``tol`` applies to the gain in mean per-point log-likelihood.  When a
    list is passed as ``trace`` the log-likelihood of every E-step is
    appended to it.
    """
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    if k < 1 or len(X) < k:
        raise ValueError("em_fit needs k >= 1 and at least k points")
    if init is None:
        k_eff = min(k, len(np.unique(X, axis=0)))
        init = kmeans(X, k_eff, seed=seed)
        if k_eff < k:
            pad = k - k_eff
            init = (np.vstack([init[0], np.repeat(init[0][:1], pad, axis=0)]), init[1])
    weights, means, covs = _init_from_kmeans(X, k, *init)
    n = len(X)
    prev = -math.inf
    for _ in range(max_iter):
        logp = np.stack([np.log(weights[j]) + _logpdf(X, means[j], covs[j]) for j in range(k)], axis=1)
        lse = _logsumexp(logp)
        ll = float(np.mean(lse))
        if trace is not None:
            trace.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        for j in range(k):
            if nk[j] < 1e-10:
                continue
            means[j] = resp[:, j] @ X / nk[j]
            diff = X - means[j]
            covs[j] = floor_covariance((resp[:, j, None] * diff).T @ diff / nk[j])
        weights = np.maximum(nk / n, 1e-12)
        weights /= weights.sum()
    return Gmm([(float(weights[j]), Gaussian(means[j], covs[j])) for j in range(k)])


def mle_gaussian(points) -> Gaussian:
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    cov = np.cov(X.T, bias=True) if len(X) > 1 else np.zeros((2, 2))
    return Gaussian(X.mean(axis=0), cov)


# --- hierarchy ----------------------------------------------------------------


@dataclass
class ClusterNode:
    prefix: str
    centroid: np.ndarray
    gaussian: Gaussian
    weight: float
    population: int
    members: np.ndarray = field(repr=False)
    children: list["ClusterNode"] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.prefix)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def walk(self) -> Iterator["ClusterNode"]:
        yield self
        for child in self.children:
            yield from child.walk()

    def to_dict(self) -> dict:
        return {
            "prefix": self.prefix,
            "weight": self.weight,
            "mean": [float(v) for v in self.gaussian.mean],
            "covariance": [float(v) for v in self.gaussian.covariance.reshape(-1)],
            "population": self.population,
            "children": [c.to_dict() for c in self.children],
        }


@dataclass
class ClusterTree:
    root: ClusterNode
    k: int
    h: int
    points: np.ndarray = field(repr=False)
    seed: int = 0

    def nodes(self) -> Iterator[ClusterNode]:
        return self.root.walk()

    def leaves(self) -> list[ClusterNode]:
        return [n for n in self.nodes() if n.is_leaf]

    def find(self, prefix: str) -> ClusterNode:
        node = self.root
        for digit in prefix:
            if node.is_leaf:
                raise KeyError(prefix)
            node = node.children[DIGITS.index(digit)]
        return node

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes())

    def to_dict(self) -> dict:
        return {"k": self.k, "h": self.h, "root": self.root.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "ClusterTree":
        def load(d):
            g = Gaussian(np.array(d["mean"]), np.array(d["covariance"]).reshape(2, 2))
            node = ClusterNode(d["prefix"], g.mean.copy(), g, d["weight"], d["population"], np.empty(0, dtype=int))
            node.children = [load(c) for c in d["children"]]
            return node

        return cls(load(doc["root"]), doc["k"], doc["h"], np.empty((0, 2)))


def _child_seed(seed: int, prefix: str) -> list[int]:
    return [seed, len(prefix)] + [DIGITS.index(c) for c in prefix]


def _make_node(prefix: str, X: np.ndarray, idx: np.ndarray, weight: float, gaussian: Gaussian | None = None) -> ClusterNode:
    pts = X[idx]
    if gaussian is None:
        gaussian = mle_gaussian(pts) if len(pts) else Gaussian(np.zeros(2), np.eye(2))
    centroid = pts.mean(axis=0) if len(pts) else gaussian.mean.copy()
    return ClusterNode(prefix, centroid, gaussian, weight, int(len(idx)), idx)


def _split(node: ClusterNode, X: np.ndarray, k: int, seed: int) -> bool:
    pts = X[node.members]
    if len(pts) < k or len(np.unique(pts, axis=0)) < k:
        return False
    s = _child_seed(seed, node.prefix)
    init = kmeans(pts, k, seed=s)
    gmm = em_fit(pts, k, init=init)
    owner = np.argmax(gmm.log_component_densities(pts), axis=1)
    node.children = [
        _make_node(node.prefix + DIGITS[j], X, node.members[owner == j], w, g)
        for j, (w, g) in enumerate(gmm.components)
    ]
    return True


def build_hierarchy(points, k: int, h: int, seed: int = 0, n_min: int = 4) -> ClusterTree:
    """Recursive k-way clustering, at most ``h`` levels deep.

    A cluster is split only while its population is at least ``n_min * k``.
    """
    if k < 2 and h > 0:
        raise ValueError("branching factor must be at least 2")
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(X) == 0:
        raise ValueError("no points to cluster")
    root = _make_node("", X, np.arange(len(X)), 1.0)
    stack = [root]
    while stack:
        node = stack.pop()
        if node.depth < h and node.population >= n_min * k and _split(node, X, k, seed):
            stack.extend(node.children)
    return ClusterTree(root, k, h, X, seed)


def cluster_path(tree: ClusterTree, p) -> str:
    """Prefix of the leaf reached by descending along maximum responsibility."""
    x = np.array([[p.x, p.y]]) if hasattr(p, "x") else np.asarray(p, dtype=float).reshape(1, 2)
    node = tree.root
    while node.children:
        scores = [math.log(c.weight) + c.gaussian.logpdf(x)[0] for c in node.children]
        node = node.children[int(np.argmax(scores))]
    return node.prefix


def assign_paths(tree: ClusterTree, points) -> list[str]:
    """Vectorised :func:`cluster_path` over many points."""
    X = np.asarray(points, dtype=float).reshape(-1, 2)
    out = [""] * len(X)

    def descend(node: ClusterNode, idx: np.ndarray):
        if not node.children or len(idx) == 0:
            for i in idx:
                out[i] = node.prefix
            return
        scores = np.stack([math.log(c.weight) + c.gaussian.logpdf(X[idx]) for c in node.children], axis=1)
        owner = np.argmax(scores, axis=1)
        for j, child in enumerate(node.children):
            descend(child, idx[owner == j])

    descend(tree.root, np.arange(len(X)))
    return out


def split_cluster(tree: ClusterTree, prefix: str, n_max: int = 64) -> ClusterTree:
    """Return a copy of the tree with the leaf at ``prefix`` split k ways."""
    node = tree.find(prefix)
    if not node.is_leaf or node.population < n_max:
        raise NoActionNeeded(f"cluster {prefix!r} is not a leaf with population >= {n_max}")
    out = copy.deepcopy(tree)
    if not _split(out.find(prefix), out.points, out.k, out.seed):
        raise NoActionNeeded(f"cluster {prefix!r} has too few distinct members")
    return out


def merge_children(tree: ClusterTree, prefix: str, n_min: int = 8) -> ClusterTree:
    """Return a copy of the tree with the children of ``prefix`` collapsed."""
    node = tree.find(prefix)
    total = sum(c.population for c in node.children)
    if node.is_leaf or total > n_min:
        raise NoActionNeeded(f"cluster {prefix!r} is not an internal node holding <= {n_min} members")
    out = copy.deepcopy(tree)
    target = out.find(prefix)
    members = _collect(target)
    target.children = []
    target.members = np.sort(members)
    target.population = int(len(members))
    if len(members):
        target.gaussian = mle_gaussian(out.points[target.members])
        target.centroid = out.points[target.members].mean(axis=0)
    return out


def _collect(node: ClusterNode) -> np.ndarray:
    if node.is_leaf:
        return node.members
    parts = [_collect(c) for c in node.children]
    return np.concatenate(parts) if parts else np.empty(0, dtype=int)


def tree_mixture(tree: ClusterTree, level: int) -> Gmm:
    """Flatten the tree at ``level`` into one mixture (weights = path products)."""
    comps: list[tuple[float, Gaussian]] = []

    def visit(node: ClusterNode, w: float):
        if node.depth == level or node.is_leaf:
            comps.append((w, node.gaussian))
            return
        for c in node.children:
            visit(c, w * c.weight)

    visit(tree.root, 1.0)
    total = sum(w for w, _ in comps)
    return Gmm([(w / total, g) for w, g in comps])
