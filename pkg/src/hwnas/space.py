"""Search spaces as ordered categorical decisions.

A space binds a layout template to a list of decisions: one layer-kind
decision per layer and one shared channel-multiplier decision per block.
Decision vectors (one chosen index per decision) decode deterministically to
concrete, valid :class:`~hwnas.arch.NetworkSpec` instances.

Three variants of increasing size are supported (``ibn``, ``ibn_fused``,
``ibn_fused_tucker``); the atom lists of a smaller variant are always a
prefix of the larger ones, so decision indices transfer across variants.
Hardware adaptations tweak the space: ``cpu`` turns on squeeze-excite and
hswish everywhere, ``dsp`` drops 5x5 kernels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .arch import (
    BUILTIN_LAYOUTS,
    BlockSpec,
    LayerKind,
    LayerSpec,
    NetworkSpec,
    InvalidArchitectureError,
    ParseError,
    fused,
    ibn,
    round8,
    tucker,
    validate,
)

VARIANTS = ("ibn", "ibn_fused", "ibn_fused_tucker")
ADAPTATIONS = ("neutral", "cpu", "dsp")

DEFAULT_MULTIPLIERS = (0.5, 0.625, 0.75, 1.0, 1.25, 1.5, 2.0)
DEFAULT_KERNELS = (3, 5)
DEFAULT_EXPANSIONS = (4.0, 8.0)
DEFAULT_COMPRESSIONS = (0.25, 0.75)
DEFAULT_ENUM_CAP = 10**6

DecisionVector = tuple[int, ...]


class EnumerationCapError(RuntimeError):
    """Space too large to enumerate under the configured cap."""


@dataclass(frozen=True)
class Decision:
    """One categorical choice: its scope and its ordered atom list."""

    index: int
    name: str
    block: int
    layer: int | None  # None = block-level (multiplier) decision
    choices: tuple

    def __post_init__(self):
        if len(self.choices) < 1:
            raise ValueError(f"decision {self.name}: empty choice list")
        if len(set(self.choices)) != len(self.choices):
            raise ValueError(f"decision {self.name}: duplicate atoms")


@dataclass(frozen=True)
class SpaceSpec:
    """A layout template plus the ordered decision list that searches it."""

    variant: str
    adaptation: str
    layout: NetworkSpec
    decisions: tuple[Decision, ...]
    multiplier_menu: tuple[float, ...]
    kernel_menu: tuple[int, ...]
    expansion_menu: tuple[float, ...]
    compression_menu: tuple[float, ...]

    def kind_atoms(self) -> tuple[LayerKind, ...]:
        """The per-layer atom list (shared by every layer decision)."""
        for d in self.decisions:
            if d.layer is not None:
                return d.choices
        return ()


def kind_atoms_for(
    variant: str,
    adaptation: str,
    kernels: Sequence[int] = DEFAULT_KERNELS,
    expansions: Sequence[float] = DEFAULT_EXPANSIONS,
    compressions: Sequence[float] = DEFAULT_COMPRESSIONS,
) -> tuple[LayerKind, ...]:
    """Canonically ordered layer-kind atoms for a variant/adaptation pair."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if adaptation not in ADAPTATIONS:
        raise ValueError(f"unknown adaptation {adaptation!r}; expected one of {ADAPTATIONS}")
    usable_kernels = tuple(k for k in kernels if not (adaptation == "dsp" and k == 5))
    atoms: list[LayerKind] = []
    for k in sorted(usable_kernels):
        for s in sorted(expansions):
            atoms.append(ibn(k, s))
    if variant in ("ibn_fused", "ibn_fused_tucker"):
        for k in sorted(usable_kernels):
            for s in sorted(expansions):
                atoms.append(fused(k, s))
    if variant == "ibn_fused_tucker":
        for k in sorted(usable_kernels):
            for s in sorted(compressions):
                for e in sorted(compressions):
                    atoms.append(tucker(k, s, e))
    if not atoms:
        raise ValueError("empty choice list after hardware adaptation")
    return tuple(atoms)


def build_space(
    variant: str,
    adaptation: str,
    layout: NetworkSpec,
    multipliers: Sequence[float] = DEFAULT_MULTIPLIERS,
    kernels: Sequence[int] = DEFAULT_KERNELS,
    expansions: Sequence[float] = DEFAULT_EXPANSIONS,
    compressions: Sequence[float] = DEFAULT_COMPRESSIONS,
) -> SpaceSpec:
    """Construct the decision list for a layout.

    Per block, in layout order: one kind decision per layer, then the shared
    multiplier decision. Atom order within a decision is canonical (kinds
    ibn < fused < tucker, then kernel, then ratios ascending; multipliers
    ascending) so indices are stable across runs.
    """
    violations = validate(layout)
    if violations:
        raise InvalidArchitectureError(violations)
    atoms = kind_atoms_for(variant, adaptation, kernels, expansions, compressions)
    mult_menu = tuple(sorted(float(m) for m in multipliers))
    if not mult_menu:
        raise ValueError("empty multiplier menu")
    decisions: list[Decision] = []
    for bi, block in enumerate(layout.blocks):
        for li in range(block.num_layers):
            decisions.append(
                Decision(len(decisions), f"b{bi}.l{li}.kind", bi, li, atoms)
            )
        decisions.append(
            Decision(len(decisions), f"b{bi}.multiplier", bi, None, mult_menu)
        )
    return SpaceSpec(
        variant=variant,
        adaptation=adaptation,
        layout=layout,
        decisions=tuple(decisions),
        multiplier_menu=mult_menu,
        kernel_menu=tuple(sorted(kernels)),
        expansion_menu=tuple(sorted(float(x) for x in expansions)),
        compression_menu=tuple(sorted(float(x) for x in compressions)),
    )


def decode(space: SpaceSpec, dv: DecisionVector) -> NetworkSpec:
    """Map a decision vector to a concrete network.

    Deterministic: block widths are ``round8(multiplier * base)``, input
    channels chain from the stem, residuals switch on automatically for
    stride-1 width-preserving layers, and the ``cpu`` adaptation forces
    squeeze-excite plus hswish on every layer.
    """
    if len(dv) != len(space.decisions):
        raise IndexError(
            f"decision vector has {len(dv)} entries, space has {len(space.decisions)} decisions"
        )
    for d, idx in zip(space.decisions, dv):
        if not 0 <= idx < len(d.choices):
            raise IndexError(
                f"decision {d.index} ({d.name}): index {idx} out of range "
                f"(choices: {len(d.choices)})"
            )
    use_se = space.adaptation == "cpu"
    activation = "hswish" if use_se else "relu6"
    chosen: dict[tuple[int, int | None], object] = {
        (d.block, d.layer): d.choices[idx] for d, idx in zip(space.decisions, dv)
    }
    layout = space.layout
    blocks = []
    c_prev = layout.stem_channels
    for bi, tblock in enumerate(layout.blocks):
        multiplier = chosen[(bi, None)]
        c_out = round8(multiplier * tblock.base_channels)
        layers = []
        for li in range(tblock.num_layers):
            kind = chosen[(bi, li)]
            stride = tblock.first_stride if li == 0 else 1
            layers.append(
                LayerSpec(
                    kind=kind,
                    c_in=c_prev,
                    c_out=c_out,
                    stride=stride,
                    use_se=use_se,
                    activation=activation,
                    residual=(stride == 1 and c_prev == c_out),
                )
            )
            c_prev = c_out
        blocks.append(
            BlockSpec(tblock.base_channels, multiplier, tblock.num_layers,
                      tblock.first_stride, tuple(layers))
        )
    return NetworkSpec(
        input_resolution=layout.input_resolution,
        stem_channels=layout.stem_channels,
        blocks=tuple(blocks),
        endpoint_c4=layout.endpoint_c4,
        endpoint_c5=layout.endpoint_c5,
    )


def space_size(space: SpaceSpec) -> int:
    """Number of decision vectors (an empty decision list yields 1)."""
    return math.prod(len(d.choices) for d in space.decisions)


def enumerate_space(space: SpaceSpec, cap: int = DEFAULT_ENUM_CAP) -> Iterator[DecisionVector]:
    """Yield every decision vector in lexicographic order.

    Raises :class:`EnumerationCapError` up front when the space exceeds
    ``cap`` vectors.
    """
    size = space_size(space)
    if size > cap:
        raise EnumerationCapError(
            f"space has {size} architectures, above the enumeration cap {cap}"
        )
    radices = [len(d.choices) for d in space.decisions]

    def gen() -> Iterator[DecisionVector]:
        dv = [0] * len(radices)
        while True:
            yield tuple(dv)
            for pos in range(len(radices) - 1, -1, -1):
                dv[pos] += 1
                if dv[pos] < radices[pos]:
                    break
                dv[pos] = 0
            else:
                return

    return gen()


def random_sample(space: SpaceSpec, rng: np.random.Generator) -> DecisionVector:
    """Uniform draw over the space; reproducible for a seeded generator."""
    return tuple(int(rng.integers(len(d.choices))) for d in space.decisions)


# ---------------------------------------------------------------------------
# Space definition files
# ---------------------------------------------------------------------------

def save_space_file(
    space: SpaceSpec,
    path: str | Path,
    layout_ref: str,
    enumeration_cap: int = DEFAULT_ENUM_CAP,
    meta: dict | None = None,
) -> None:
    """Write a space definition; the layout is stored by reference.

    ``layout_ref`` is either a built-in layout name or a path, resolved
    relative to the space file on load.
    """
    doc = {
        "variant": space.variant,
        "adaptation": space.adaptation,
        "layout_ref": layout_ref,
        "multiplier_menu": list(space.multiplier_menu),
        "kernel_menu": list(space.kernel_menu),
        "expansion_menu": list(space.expansion_menu),
        "compression_menu": list(space.compression_menu),
        "enumeration_cap": enumeration_cap,
    }
    if meta:
        doc["_meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def resolve_layout(ref: str, relative_to: Path | None = None) -> NetworkSpec:
    """Resolve a layout reference: built-in name first, then file path."""
    if ref in BUILTIN_LAYOUTS:
        return BUILTIN_LAYOUTS[ref]()
    path = Path(ref)
    if relative_to is not None and not path.is_absolute():
        path = relative_to / path
    from .arch import load_file

    return load_file(path)


def load_space_file(path: str | Path) -> tuple[SpaceSpec, int]:
    """Load a space definition. Returns (space, enumeration cap)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    required = (
        "variant", "adaptation", "layout_ref", "multiplier_menu",
        "kernel_menu", "expansion_menu", "compression_menu", "enumeration_cap",
    )
    missing = [k for k in required if k not in doc]
    if missing:
        raise ParseError(f"space file: missing field(s) {', '.join(missing)}")
    layout = resolve_layout(doc["layout_ref"], relative_to=path.parent)
    space = build_space(
        doc["variant"],
        doc["adaptation"],
        layout,
        multipliers=doc["multiplier_menu"],
        kernels=doc["kernel_menu"],
        expansions=doc["expansion_menu"],
        compressions=doc["compression_menu"],
    )
    return space, int(doc["enumeration_cap"])
