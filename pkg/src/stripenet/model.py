"""The toy dual-path multi-branch stripe model.

Topology (input 3x48x16):

  stem:    conv3x3/2 -> relu -> conv3x3/2 -> BN -> relu          (16, 12, 4)
  branch:  conv3x3/2 -> BN -> relu -> conv3x3/1 -> BN -> relu    (32,  6, 2)

Every branch ``b`` has a stripe count ``K_b`` (default branches use 2 and 3)
and runs the *same* body twice: once on the full stem output (original path)
and once on the stem output split into ``K_b`` horizontal stripes stacked
along the batch axis (receptive-partition path). Both paths share the body's
parameter tensors by construction.

Each path contributes ``1 + K_b`` heads (one global, one per stripe); a head
is global-max-pool -> linear reduction -> BN, and carries its own classifier.
With stripe counts (2, 3) that is 2*(1+2) + 2*(1+3) = 14 heads. The final
descriptor ``f`` concatenates all head features branch-major, original path
before the partitioned path, global vector before the stripes, top stripe
first.

At inference the original path's stripe heads can optionally re-cut the
final map per sample so each stripe holds an equal share of the channel
maxima, and average-pool those stripes instead (activation-balanced
pooling); the partitioned path's stripes are structural and stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np

from . import ops
from .layers import BatchNorm1d, BatchNorm2d, Conv2d, Linear, Module, ReLU, Sequential
from .losses import batch_hard_triplet_loss, cross_entropy_loss
from .partition import (
    abp_boundaries,
    max_activation_histogram,
    receptive_partition,
    stripe_average_pool,
    uniform_stripes,
)
from .receptive import ArchSpec, bundled_archspec_path, load_archspec, restricted_region
from .tensor import ShapeError, Tensor, add, concat, scale, split, split_batch

__all__ = [
    "ModelConfig",
    "FeatureBundle",
    "RMGLModel",
    "build_model",
    "forward_features",
    "path_stripe_maps",
    "total_loss",
    "HeadKey",
]

# fixed toy geometry (mirrors archspecs/toy_backbone.arch)
INPUT_SHAPE = (3, 48, 16)
STEM_CHANNELS = (8, 16)
BRANCH_CHANNELS = (24, 32)
SPLIT_MAP_INDEX = 2  # the stem output, map 2 of the backbone archspec


@dataclass(frozen=True)
class ModelConfig:
    """Build-time configuration of the multi-branch model."""

    stripe_counts: tuple[int, ...] = (2, 3)
    num_classes: int = 16
    reduced_dim: int = 16
    margin: float = 0.6
    with_original: bool = True        # include the unpartitioned path
    with_rp: bool = True              # include the receptive-partition path
    abp_at_inference: bool = False    # balance-cut original-path stripes at eval
    cls_weight: float = 1.0
    triplet_weight: float = 1.0
    loss_reduction: str = "mean"

    def __post_init__(self):
        if not self.stripe_counts:
            raise ValueError("at least one branch is required")
        if any(k < 1 for k in self.stripe_counts):
            raise ValueError(f"stripe counts must be >= 1, got {self.stripe_counts}")
        if self.reduced_dim < 1 or self.num_classes < 1:
            raise ValueError("reduced_dim and num_classes must be >= 1")
        if not (self.with_original or self.with_rp):
            raise ValueError("model needs at least one path (original or partitioned)")

    @property
    def paths(self) -> tuple[str, ...]:
        out = []
        if self.with_original:
            out.append("orig")
        if self.with_rp:
            out.append("rp")
        return tuple(out)

    @property
    def head_count(self) -> int:
        return sum(len(self.paths) * (1 + k) for k in self.stripe_counts)

    @property
    def feature_dim(self) -> int:
        return self.head_count * self.reduced_dim


@dataclass(frozen=True, order=True)
class HeadKey:
    """Identifies one head: branch index, path, stripe (0 = global)."""

    branch: int
    path: str  # "orig" | "rp"
    stripe: int

    def __str__(self) -> str:
        return f"b{self.branch}.{self.path}.s{self.stripe}"


class Head(Module):
    """global-max-pool -> linear reduction -> BN feature, plus a classifier."""

    def __init__(self, in_channels: int, reduced_dim: int, num_classes: int,
                 rng: np.random.Generator):
        super().__init__()
        self.reduce = self.add_module("reduce", Linear(in_channels, reduced_dim, bias=False, rng=rng))
        self.bn = self.add_module("bn", BatchNorm1d(reduced_dim))
        self.classifier = self.add_module("classifier", Linear(reduced_dim, num_classes, rng=rng))

    def feature_from_map(self, fmap: Tensor) -> Tensor:
        pooled = ops.flatten_spatial(ops.global_max_pool(fmap))
        return self.feature_from_vector(pooled)

    def feature_from_vector(self, pooled: Tensor) -> Tensor:
        return self.bn(self.reduce(pooled))


class Branch(Module):
    def __init__(self, n_s: int, in_channels: int, reduced_dim: int,
                 num_classes: int, paths: tuple[str, ...], rng: np.random.Generator):
        super().__init__()
        self.n_s = n_s
        self.paths = paths
        c1, c2 = BRANCH_CHANNELS
        self.body = self.add_module(
            "body",
            Sequential(
                Conv2d(in_channels, c1, 3, stride=2, padding=1, rng=rng),
                BatchNorm2d(c1),
                ReLU(),
                Conv2d(c1, c2, 3, stride=1, padding=1, rng=rng),
                BatchNorm2d(c2),
                ReLU(),
            ),
        )
        self.out_channels = c2
        self.head_keys: list[HeadKey] = []
        for path in paths:
            for s in range(n_s + 1):
                self.head_keys.append(HeadKey(-1, path, s))  # branch set later
        for key in self.head_keys:
            self.add_module(
                f"head_{key.path}_s{key.stripe}",
                Head(c2, reduced_dim, num_classes, rng),
            )

    def head(self, key: HeadKey) -> Head:
        return self._children[f"head_{key.path}_s{key.stripe}"]


class RMGLModel(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        c_in, _, _ = INPUT_SHAPE
        s1, s2 = STEM_CHANNELS
        self.stem = self.add_module(
            "stem",
            Sequential(
                Conv2d(c_in, s1, 3, stride=2, padding=1, rng=rng),
                ReLU(),
                Conv2d(s1, s2, 3, stride=2, padding=1, rng=rng),
                BatchNorm2d(s2),
                ReLU(),
            ),
        )
        self.branches: list[Branch] = []
        for b, k in enumerate(config.stripe_counts):
            branch = Branch(k, s2, config.reduced_dim, config.num_classes,
                            config.paths, rng)
            branch.head_keys = [replace(key, branch=b) for key in branch.head_keys]
            self.branches.append(self.add_module(f"branch{b}", branch))

    @property
    def head_keys(self) -> list[HeadKey]:
        return [key for branch in self.branches for key in branch.head_keys]

    def head(self, key: HeadKey) -> Head:
        return self.branches[key.branch].head(key)

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def head_parameters(self):
        """Parameters of the reduction/BN/classifier heads (trained faster)."""
        for branch in self.branches:
            for key in branch.head_keys:
                yield from branch.head(key).parameters()

    def backbone_parameters(self):
        yield from self.stem.parameters()
        for branch in self.branches:
            yield from branch.body.parameters()

    def forward_features(self, batch: Tensor) -> "FeatureBundle":
        return forward_features(self, batch)


@dataclass
class FeatureBundle:
    """Per-head reduced features, per-head class scores, and the final descriptor."""

    head_keys: tuple[HeadKey, ...]
    features: dict[HeadKey, Tensor]
    scores: dict[HeadKey, Tensor]
    branch_features: tuple[Tensor, ...]  # concatenated per branch, head order
    f: Tensor = field(init=False)

    def __post_init__(self):
        self.f = concat([self.features[k] for k in self.head_keys], axis=1)


def path_stripe_maps(branch: Branch, stem_out: Tensor) -> dict[str, list[Tensor]]:
    """Each path's final maps: index 0 is the full map, 1..n_s its stripes.

    The partitioned path's "full map" is its per-stripe outputs restacked
    top-to-bottom, so both paths expose the same list structure.
    """
    k = branch.n_s
    maps: dict[str, list[Tensor]] = {}
    if "orig" in branch.paths:
        orig_map = branch.body(stem_out)
        maps["orig"] = [orig_map] + uniform_stripes(orig_map, k)
    if "rp" in branch.paths:
        rp_stripes = split_batch(branch.body(receptive_partition(stem_out, k)), k)
        maps["rp"] = [concat(rp_stripes, axis=2)] + rp_stripes
    return maps


def _abp_local_vectors(orig_map: Tensor, n_s: int) -> list[Tensor]:
    """Per-sample balanced-cut average pooling of the original-path map.

    Returns one (n, C) tensor per stripe; boundaries are computed per sample
    from its own max-activation histogram.
    """
    n = orig_map.shape[0]
    samples = split(orig_map, n, axis=0) if n > 1 else [orig_map]
    per_stripe: list[list[Tensor]] = [[] for _ in range(n_s)]
    for sample in samples:
        bounds = abp_boundaries(max_activation_histogram(sample.data), n_s)
        pooled = stripe_average_pool(sample, bounds)
        for s in range(n_s):
            per_stripe[s].append(pooled[s])
    return [v[0] if n == 1 else concat(v, axis=0) for v in per_stripe]


def forward_features(model: RMGLModel, batch: Tensor, mode: str | None = None) -> FeatureBundle:
    """Run the dual-path forward and assemble every head's feature and scores.

    ``mode`` optionally forces "train" or "eval"; otherwise the model's
    current mode is used. Balanced-cut pooling applies only in eval mode and
    only when the model was configured with ``abp_at_inference``.
    """
    if mode is not None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        model.train(mode == "train")
    expected = INPUT_SHAPE
    if len(batch.shape) != 4 or batch.shape[1:] != expected:
        raise ShapeError(
            f"batch shape {batch.shape} does not match configured input "
            f"(n, {expected[0]}, {expected[1]}, {expected[2]})"
        )
    config = model.config
    use_abp = config.abp_at_inference and not model.training
    stem_out = model.stem(batch)
    features: dict[HeadKey, Tensor] = {}
    scores: dict[HeadKey, Tensor] = {}
    branch_feats: list[Tensor] = []
    for branch in model.branches:
        k = branch.n_s
        path_maps = path_stripe_maps(branch, stem_out)
        abp_vectors = (
            _abp_local_vectors(path_maps["orig"][0], k)
            if use_abp and "orig" in path_maps
            else None
        )
        for key in branch.head_keys:
            head = branch.head(key)
            if key.path == "orig" and key.stripe > 0 and abp_vectors is not None:
                feat = head.feature_from_vector(abp_vectors[key.stripe - 1])
            else:
                feat = head.feature_from_map(path_maps[key.path][key.stripe])
            features[key] = feat
            scores[key] = head.classifier(feat)
        branch_feats.append(concat([features[key] for key in branch.head_keys], axis=1))
    return FeatureBundle(
        head_keys=tuple(model.head_keys),
        features=features,
        scores=scores,
        branch_features=tuple(branch_feats),
    )


def build_model(config: ModelConfig, rng: np.random.Generator,
                arch: ArchSpec | None = None) -> RMGLModel:
    """Construct the model, checking every branch's partition plan is effective."""
    if arch is None:
        arch = load_archspec(bundled_archspec_path("toy_backbone"))
    if config.with_rp:
        for b, k in enumerate(config.stripe_counts):
            plan = restricted_region(arch, SPLIT_MAP_INDEX, k)
            if not plan.effective:
                raise ValueError(
                    f"branch {b}: partition into {k} stripes at map {SPLIT_MAP_INDEX} "
                    f"is not effective: downstream receptive field {plan.tail_rf} "
                    f"< stripe height {plan.stripe_height}"
                )
    return RMGLModel(config, rng)


def total_loss(bundle: FeatureBundle, labels: np.ndarray, config: ModelConfig):
    """Unit-weight sum of per-head classification losses and per-branch triplet losses.

    Returns (total, breakdown) where breakdown maps term names to floats and
    sums to the total.
    """
    terms: list[Tensor] = []
    breakdown: dict[str, float] = {}
    for b, bfeat in enumerate(bundle.branch_features):
        tri = batch_hard_triplet_loss(
            bfeat, labels, margin=config.margin, reduction=config.loss_reduction
        )
        if config.triplet_weight != 1.0:
            tri = scale(tri, config.triplet_weight)
        terms.append(tri)
        breakdown[f"triplet.b{b}"] = tri.item()
    for key in bundle.head_keys:
        ce = cross_entropy_loss(bundle.scores[key], labels, reduction=config.loss_reduction)
        if config.cls_weight != 1.0:
            ce = scale(ce, config.cls_weight)
        terms.append(ce)
        breakdown[f"cls.{key}"] = ce.item()
    total = reduce(add, terms)
    return total, breakdown
