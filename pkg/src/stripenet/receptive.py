"""Static receptive-field analysis of a linear chain of conv/pool layers.

An :class:`ArchSpec` lists layers as (kernel, stride, padding) triples per
axis. From it we compute, per feature map and per axis: the receptive field
(input pixels one neuron can see), the cumulative stride, and the feature-map
size. On top of those sits the restricted-region calculus for stripe
partitions: splitting map ``j`` into ``n_s`` horizontal stripes and running
the remaining layers on each stripe limits every downstream neuron to

    R_j = r_{0,j} + (h_j / n_s - 1) * cumstride_{0,j}

input rows, and the restriction is *effective* (every downstream neuron's
view is the whole stripe) precisely when the remaining network's receptive
field at map ``j`` is at least the stripe height.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

__all__ = [
    "LayerSpec",
    "ArchSpec",
    "ArchSpecError",
    "PartitionError",
    "PartitionPlan",
    "ReceptiveReport",
    "parse_archspec",
    "load_archspec",
    "bundled_archspec_path",
    "feature_size",
    "cumulative_stride",
    "receptive_field",
    "restricted_region",
    "analyze",
]

_KINDS = ("conv", "maxpool", "avgpool")


class ArchSpecError(ValueError):
    """Raised for malformed architecture descriptions; carries a line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class PartitionError(ValueError):
    """Raised when a stripe partition is infeasible; suggests a valid count."""

    def __init__(self, message: str, suggested_n_s: int | None = None):
        self.suggested_n_s = suggested_n_s
        super().__init__(message)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]


@dataclass(frozen=True)
class ArchSpec:
    """A linear chain of layers over a fixed input size.

    Feature maps are numbered 0 (the input plane) through ``len(layers)``;
    layer ``t`` (1-based) connects map ``t - 1`` to map ``t``.
    """

    layers: tuple[LayerSpec, ...]
    input_size: tuple[int, int]

    def __post_init__(self):
        if not self.layers:
            raise ArchSpecError("architecture must contain at least one layer")
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ArchSpecError(f"input size must be positive, got {self.input_size}")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dupe = next(n for n in names if names.count(n) > 1)
            raise ArchSpecError(f"duplicate layer name {dupe!r}")
        for l in self.layers:
            if l.kind not in _KINDS:
                raise ArchSpecError(f"layer {l.name!r}: unknown kind {l.kind!r}")
            if min(l.kernel) < 1 or min(l.stride) < 1:
                raise ArchSpecError(f"layer {l.name!r}: kernel and stride must be >= 1")
            if min(l.padding) < 0:
                raise ArchSpecError(f"layer {l.name!r}: padding must be >= 0")
        # walking the sizes also validates that every map stays non-empty
        for j in range(1, self.n_maps):
            feature_size(self, j)

    @property
    def n_maps(self) -> int:
        return len(self.layers) + 1


def _parse_layer_line(tokens: list[str], line_no: int) -> LayerSpec:
    if len(tokens) != 8:
        raise ArchSpecError(
            f"expected 8 fields `name kind kh kw sh sw ph pw`, got {len(tokens)}",
            line_no,
        )
    name, kind = tokens[0], tokens[1]
    try:
        kh, kw, sh, sw, ph, pw = (int(t) for t in tokens[2:])
    except ValueError:
        raise ArchSpecError(f"non-integer geometry in {tokens[2:]}", line_no) from None
    return LayerSpec(name, kind, (kh, kw), (sh, sw), (ph, pw))


def parse_archspec(text: str) -> ArchSpec:
    """Parse the one-layer-per-line format.

    Lines: ``input H W`` once, then ``name kind kh kw sh sw ph pw`` per
    layer. ``#`` starts a comment; blank lines are skipped.
    """
    input_size: tuple[int, int] | None = None
    layers: list[LayerSpec] = []
    for line_no, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] == "input":
            if input_size is not None:
                raise ArchSpecError("duplicate input line", line_no)
            if len(tokens) != 3:
                raise ArchSpecError("input line must be `input H W`", line_no)
            try:
                input_size = (int(tokens[1]), int(tokens[2]))
            except ValueError:
                raise ArchSpecError("input size must be integer", line_no) from None
        else:
            if input_size is None:
                raise ArchSpecError("`input H W` must precede layer lines", line_no)
            layers.append(_parse_layer_line(tokens, line_no))
    if input_size is None:
        raise ArchSpecError("missing `input H W` line")
    return ArchSpec(tuple(layers), input_size)


def load_archspec(path: str | Path) -> ArchSpec:
    return parse_archspec(Path(path).read_text())


def bundled_archspec_path(name: str) -> Path:
    """Path to a spec shipped with the package (``resnet50_laststride1``, ``toy_backbone``)."""
    p = Path(__file__).parent / "archspecs" / f"{name}.arch"
    if not p.exists():
        available = sorted(q.stem for q in p.parent.glob("*.arch"))
        raise FileNotFoundError(f"no bundled archspec {name!r}; available: {available}")
    return p


def _check_range(arch: ArchSpec, i: int, j: int) -> None:
    if not (0 <= i <= j <= len(arch.layers)):
        raise IndexError(
            f"map indices must satisfy 0 <= i <= j <= {len(arch.layers)}, got ({i}, {j})"
        )


def feature_size(arch: ArchSpec, j: int) -> tuple[int, int]:
    """Spatial size (h, w) of feature map ``j`` (map 0 is the input)."""
    _check_range(arch, 0, j)
    h, w = arch.input_size
    for layer in arch.layers[:j]:
        (kh, kw), (sh, sw), (ph, pw) = layer.kernel, layer.stride, layer.padding
        nh = (h + 2 * ph - kh) // sh + 1
        nw = (w + 2 * pw - kw) // sw + 1
        if nh < 1 or nw < 1:
            raise ArchSpecError(
                f"layer {layer.name!r}: window {layer.kernel} exceeds padded map ({h}x{w})"
            )
        h, w = nh, nw
    return h, w


def cumulative_stride(arch: ArchSpec, i: int, j: int) -> tuple[int, int]:
    """Product of strides of the layers between maps i and j, per axis (1 when i == j)."""
    _check_range(arch, i, j)
    sh = sw = 1
    for layer in arch.layers[i:j]:
        sh *= layer.stride[0]
        sw *= layer.stride[1]
    return sh, sw


def receptive_field(arch: ArchSpec, i: int, j: int) -> tuple[int, int]:
    """Receptive field of one map-``j`` neuron expressed in map-``i`` pixels, per axis.

    Recursion: r_{i,i} = 1 and r grows by (kernel - 1) times the cumulative
    stride of the layers *before* the one being added.
    """
    _check_range(arch, i, j)
    rh = rw = 1
    jh = jw = 1  # cumulative stride up to the previous map
    for layer in arch.layers[i:j]:
        rh += (layer.kernel[0] - 1) * jh
        rw += (layer.kernel[1] - 1) * jw
        jh *= layer.stride[0]
        jw *= layer.stride[1]
    return rh, rw


@dataclass(frozen=True)
class PartitionPlan:
    """Feasibility record for splitting map ``split_index`` into ``n_s`` stripes."""

    split_index: int
    n_s: int
    map_height: int
    stripe_height: int
    restricted_region: int  # input rows one stripe can see (R_j)
    tail_rf: int            # receptive field of the remaining layers at the split map
    effective: bool         # tail_rf >= stripe_height


def _nearest_divisor(h: int, n_s: int) -> int:
    divisors = [d for d in range(1, h + 1) if h % d == 0]
    return min(divisors, key=lambda d: (abs(d - n_s), d))


def restricted_region(arch: ArchSpec, split_index: int, n_s: int) -> PartitionPlan:
    """Restricted-region size and effectiveness for an n_s-stripe split at a map."""
    _check_range(arch, 0, split_index)
    if n_s < 1:
        raise PartitionError(f"stripe count must be >= 1, got {n_s}")
    h_j, _ = feature_size(arch, split_index)
    if h_j % n_s != 0:
        raise PartitionError(
            f"map height {h_j} at split {split_index} is not divisible by {n_s}",
            suggested_n_s=_nearest_divisor(h_j, n_s),
        )
    stripe_h = h_j // n_s
    r0j, _ = receptive_field(arch, 0, split_index)
    jump, _ = cumulative_stride(arch, 0, split_index)
    region = r0j + (stripe_h - 1) * jump
    tail_rf, _ = receptive_field(arch, split_index, len(arch.layers))
    return PartitionPlan(
        split_index=split_index,
        n_s=n_s,
        map_height=h_j,
        stripe_height=stripe_h,
        restricted_region=region,
        tail_rf=tail_rf,
        effective=tail_rf >= stripe_h,
    )


@dataclass(frozen=True)
class ReportRow:
    name: str
    rf_h: int
    rf_w: int
    stride_h: int
    stride_w: int
    h: int
    w: int


@dataclass(frozen=True)
class ReceptiveReport:
    rows: tuple[ReportRow, ...]

    def to_csv(self) -> str:
        lines = ["layer,rf_h,rf_w,stride_h,stride_w,h,w"]
        for r in self.rows:
            lines.append(
                f"{r.name},{r.rf_h},{r.rf_w},{r.stride_h},{r.stride_w},{r.h},{r.w}"
            )
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        header = f"{'layer':<16}{'rf_h':>6}{'rf_w':>6}{'s_h':>5}{'s_w':>5}{'h':>6}{'w':>6}"
        body = [
            f"{r.name:<16}{r.rf_h:>6}{r.rf_w:>6}{r.stride_h:>5}{r.stride_w:>5}{r.h:>6}{r.w:>6}"
            for r in self.rows
        ]
        return "\n".join([header, *body])


def analyze(arch: ArchSpec) -> ReceptiveReport:
    """Per-map table of receptive field, cumulative stride, and map size."""
    rows = [ReportRow("input", 1, 1, 1, 1, *arch.input_size)]
    for j, layer in enumerate(arch.layers, start=1):
        rh, rw = receptive_field(arch, 0, j)
        sh, sw = cumulative_stride(arch, 0, j)
        h, w = feature_size(arch, j)
        rows.append(ReportRow(layer.name, rh, rw, sh, sw, h, w))
    return ReceptiveReport(tuple(rows))
