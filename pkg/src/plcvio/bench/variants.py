"""The five algorithm configurations compared by the benchmark."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class AlgorithmVariant:
    name: str
    use_lines_independent: bool
    use_common_points: bool
    use_common_lines: bool

    @property
    def uses_lines(self) -> bool:
        return self.use_lines_independent or self.use_common_lines

    @property
    def cooperative(self) -> bool:
        return self.use_common_points or self.use_common_lines

    def common_kinds(self) -> frozenset:
        kinds = set()
        if self.use_common_points:
            kinds.add("point")
        if self.use_common_lines:
            kinds.add("line")
        return frozenset(kinds)


VARIANTS = {
    v.name: v
    for v in (
        AlgorithmVariant("P-VIO", False, False, False),
        AlgorithmVariant("PL-VIO", True, False, False),
        AlgorithmVariant("P-CVIO", False, True, False),
        AlgorithmVariant("IPL-CP-CVIO", True, True, False),
        AlgorithmVariant("PL-CVIO", True, True, True),
    )
}


def get_variant(name: str) -> AlgorithmVariant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None


def resolve_variants(names) -> list[AlgorithmVariant]:
    """Variants by name, all five when ``names`` is empty."""
    if not names:
        return list(VARIANTS.values())
    return [get_variant(n) for n in names]
