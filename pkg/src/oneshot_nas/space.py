"""Layer-wise search space over MobileNetV2-style inverted residual blocks.

A :class:`SearchSpace` fixes the stage plan (depth, output channels, stride
and activation of every stage); only the kernel size and the expansion
ratio of each searchable layer vary. A :class:`Genotype` is one choice per
searchable layer.

Resource counts are multiply-adds (MACs) of convolutions and linear layers
at the configured input resolution. Batch-norm, activations and additions
are not counted as MACs; their learnable parameters are counted in
``params``.
"""

import hashlib
import itertools
import json
import math
import re
from dataclasses import asdict, dataclass, field

from .errors import ConstraintError, GenotypeParseError, ShapeError

DEFAULT_EXPANSIONS = (2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0)
MAX_REJECTION_TRIES = 1000


@dataclass(frozen=True)
class StageSpec:
    num_layers: int
    out_channels: int
    stride: int
    activation: str = "swish"


@dataclass(frozen=True)
class SearchSpace:
    stages: tuple
    input_resolution: int = 32
    in_channels: int = 3
    stem_channels: int = 16
    first_block_channels: int = 8
    head_channels: int = 64
    num_classes: int = 8
    stem_stride: int = 2
    kernel_choices: tuple = (3, 5)
    expansion_choices: tuple = DEFAULT_EXPANSIONS
    width_search: bool = True

    def __post_init__(self):
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "kernel_choices", tuple(int(k) for k in self.kernel_choices))
        object.__setattr__(self, "expansion_choices", tuple(float(e) for e in self.expansion_choices))
        if not stages or any(s.num_layers < 1 for s in stages):
            raise ShapeError("every stage needs at least one layer")
        if any(k % 2 == 0 for k in self.kernel_choices):
            raise ShapeError("kernel choices must be odd")
        if not self.kernel_choices or not self.expansion_choices:
            raise ShapeError("empty choice set")

    @property
    def num_layers(self):
        return sum(s.num_layers for s in self.stages)

    @property
    def max_expansion(self):
        return max(self.expansion_choices)

    @property
    def min_expansion(self):
        return min(self.expansion_choices)

    @property
    def active_expansions(self):
        """Expansion values a genotype may use in this space."""
        return self.expansion_choices if self.width_search else (self.max_expansion,)

    def layer_plan(self):
        """Per searchable layer: ``(c_in, c_out, stride, activation, stage_index)``."""
        plan = []
        c_in = self.first_block_channels
        for si, stage in enumerate(self.stages):
            for li in range(stage.num_layers):
                plan.append((c_in, stage.out_channels, stage.stride if li == 0 else 1,
                             stage.activation, si))
                c_in = stage.out_channels
        return plan

    def with_width_search(self, enabled):
        return SearchSpace(**{**self.to_dict(), "width_search": enabled})

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["kernel_choices"] = list(self.kernel_choices)
        d["expansion_choices"] = list(self.expansion_choices)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "stages": tuple(StageSpec(**s) for s in d["stages"])})

    def hash(self):
        """Hash of the weight layout; ``width_search`` does not change weights."""
        d = self.to_dict()
        d.pop("width_search")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_space(**overrides):
    """Default CPU-sized space: 32x32 input, 4 stages x 2 layers, 8 classes."""
    stages = (
        StageSpec(2, 16, 2, "relu"),
        StageSpec(2, 24, 2, "swish"),
        StageSpec(2, 32, 1, "swish"),
        StageSpec(2, 48, 2, "swish"),
    )
    return SearchSpace(**{"stages": stages, **overrides})


def full_space(**overrides):
    """The full-scale ImageNet-sized plan (224x224, 1000 classes)."""
    stages = (
        StageSpec(4, 24, 2, "relu"),
        StageSpec(4, 40, 2, "swish"),
        StageSpec(4, 80, 2, "swish"),
        StageSpec(4, 112, 1, "swish"),
        StageSpec(4, 192, 2, "swish"),
        StageSpec(1, 320, 1, "swish"),
    )
    kw = dict(stages=stages, input_resolution=224, stem_channels=32, first_block_channels=16,
              head_channels=1280, num_classes=1000)
    kw.update(overrides)
    return SearchSpace(**kw)


def hidden_channels(expansion, c_in):
    """Active hidden width of an inverted residual block (round half up, >= 1)."""
    return max(1, int(math.floor(expansion * c_in + 0.5)))


@dataclass(frozen=True, order=True)
class Genotype:
    """Per-layer ``(kernel, expansion)`` choices."""

    genes: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple((int(k), float(e)) for k, e in self.genes))

    def __len__(self):
        return len(self.genes)

    def __iter__(self):
        return iter(self.genes)

    def __getitem__(self, i):
        return self.genes[i]

    @property
    def kernels(self):
        return tuple(k for k, _ in self.genes)

    @property
    def expansions(self):
        return tuple(e for _, e in self.genes)

    def with_expansions(self, expansions):
        return Genotype(tuple((k, e) for (k, _), e in zip(self.genes, expansions)))

    def __str__(self):
        return encode_genotype(self)


def validate_genotype(space, genotype):
    if len(genotype) != space.num_layers:
        raise ShapeError(f"genotype has {len(genotype)} layers, space has {space.num_layers}")
    for i, (k, e) in enumerate(genotype):
        if k not in space.kernel_choices:
            raise ShapeError(f"layer {i}: kernel {k} not in {space.kernel_choices}")
        if e not in space.expansion_choices:
            raise ShapeError(f"layer {i}: expansion {e} not in {space.expansion_choices}")


def layer_choices(space):
    return [(k, e) for k in space.kernel_choices for e in space.active_expansions]


def space_size(space):
    return (len(space.kernel_choices) * len(space.active_expansions)) ** space.num_layers


def enumerate_genotypes(space):
    """All genotypes of the space, in lexicographic order. Only for small spaces."""
    choices = layer_choices(space)
    for combo in itertools.product(choices, repeat=space.num_layers):
        yield Genotype(combo)


def uniform_genotype(space, rng, expansion=None):
    """Uniform draw; ``expansion`` pins every layer to one width."""
    exps = space.active_expansions if expansion is None else (expansion,)
    ks = rng.integers(len(space.kernel_choices), size=space.num_layers)
    es = rng.integers(len(exps), size=space.num_layers)
    return Genotype(tuple((space.kernel_choices[k], exps[e]) for k, e in zip(ks, es)))


def random_genotype(space, rng, max_flops=None, tries=MAX_REJECTION_TRIES):
    """Uniform genotype, rejection-sampled under an optional FLOPs budget."""
    if max_flops is None:
        return uniform_genotype(space, rng)
    for _ in range(tries):
        g = uniform_genotype(space, rng)
        if count_resources(space, g).flops <= max_flops:
            return g
    raise ConstraintError(f"no genotype with flops <= {max_flops} found in {tries} draws")


def minimal_genotype(space):
    return Genotype(tuple((min(space.kernel_choices), min(space.active_expansions))
                          for _ in range(space.num_layers)))


def maximal_genotype(space):
    return Genotype(tuple((max(space.kernel_choices), max(space.active_expansions))
                          for _ in range(space.num_layers)))


_TOKEN = re.compile(r"^K(\d+)_E(\d+(?:\.\d+)?)$")


def encode_genotype(genotype):
    return "-".join(f"K{k}_E{e:.1f}" for k, e in genotype)


def decode_genotype(text, space):
    tokens = text.strip().split("-")
    if len(tokens) != space.num_layers:
        raise GenotypeParseError(f"expected {space.num_layers} tokens, got {len(tokens)}")
    genes = []
    for i, tok in enumerate(tokens):
        m = _TOKEN.match(tok)
        if not m:
            raise GenotypeParseError(f"malformed token {tok!r}", layer=i)
        k, e = int(m.group(1)), float(m.group(2))
        if k not in space.kernel_choices:
            raise GenotypeParseError(f"kernel {k} not in {space.kernel_choices}", layer=i)
        if e not in space.expansion_choices:
            raise GenotypeParseError(f"expansion {e} not in {space.expansion_choices}", layer=i)
        genes.append((k, e))
    return Genotype(tuple(genes))


@dataclass(frozen=True)
class ResourceReport:
    flops: int
    params: int


def _bn(c):
    return 2 * c


def _se(c):
    # two c x c linear layers: the reduction width equals the active channel count
    return 2 * c * c, 2 * c * c + 2 * c


def _block_cost(c_in, hidden, c_out, k, res_out, res_in, expand):
    flops = params = 0
    if expand:
        flops += c_in * hidden * res_in * res_in
        params += c_in * hidden + _bn(hidden)
    flops += k * k * hidden * res_out * res_out
    params += k * k * hidden + _bn(hidden)
    se_f, se_p = _se(hidden)
    flops += se_f
    params += se_p
    flops += hidden * c_out * res_out * res_out
    params += hidden * c_out + _bn(c_out)
    return flops, params


def count_resources(space, genotype):
    """MACs and parameter count of the backbone plus the classification head."""
    validate_genotype(space, genotype)
    res = space.input_resolution
    res_stem = (res - 1) // space.stem_stride + 1
    c0 = space.stem_channels
    flops = 9 * space.in_channels * c0 * res_stem * res_stem
    params = 9 * space.in_channels * c0 + _bn(c0)
    f, p = _block_cost(c0, c0, space.first_block_channels, 3, res_stem, res_stem, expand=False)
    flops += f
    params += p
    r = res_stem
    for (c_in, c_out, stride, _, _), (k, e) in zip(space.layer_plan(), genotype):
        r_out = (r - 1) // stride + 1
        f, p = _block_cost(c_in, hidden_channels(e, c_in), c_out, k, r_out, r, expand=True)
        flops += f
        params += p
        r = r_out
    c_last = space.stages[-1].out_channels
    flops += c_last * space.head_channels * r * r + space.head_channels * space.num_classes
    params += (c_last * space.head_channels + _bn(space.head_channels)
               + space.head_channels * space.num_classes + space.num_classes)
    return ResourceReport(int(flops), int(params))


def flops_range(space):
    return (count_resources(space, minimal_genotype(space)).flops,
            count_resources(space, maximal_genotype(space)).flops)


def constraint_preset(space, name):
    """``small``/``medium``/``large`` budgets as fractions of the maximal FLOPs."""
    fractions = {"small": 0.5, "medium": 0.8, "large": 1.0}
    if name not in fractions:
        raise ConstraintError(f"unknown constraint preset {name!r}")
    return int(fractions[name] * flops_range(space)[1])


def sample_distinct(space, n, rng, expansion=None, max_flops=None):
    """``n`` pairwise distinct genotypes (uniform without replacement)."""
    total = (len(space.kernel_choices)
             * (len(space.active_expansions) if expansion is None else 1)) ** space.num_layers
    if n > total:
        raise ConstraintError(f"cannot draw {n} distinct genotypes from {total}")
    seen = []
    tries = 0
    while len(seen) < n:
        g = uniform_genotype(space, rng, expansion=expansion)
        tries += 1
        if max_flops is not None and count_resources(space, g).flops > max_flops:
            if tries > MAX_REJECTION_TRIES * max(n, 1):
                raise ConstraintError(f"could not draw {n} genotypes under flops <= {max_flops}")
            continue
        if g not in seen:
            seen.append(g)
    return seen
