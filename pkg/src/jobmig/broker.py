"""Resource broker: provider registry and job-to-provider matchmaking.

Providers register capability templates; the broker keeps them in a
specification table and matches job requirement lists against it, returning
a deterministically ranked candidate list for the controller to pick from.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator

if TYPE_CHECKING:
    from .monitor import ServiceLevelAgreement

MATCH_FORMULA_VERSION = "equal-weight-surplus-v1"


class BrokerError(Exception):
    pass


class MalformedTemplate(BrokerError):
    pass


class NoMatch(BrokerError):
    pass


class UnknownProvider(BrokerError):
    pass


@dataclass(frozen=True)
class ResourceSpecTemplate:
    """One provider's advertised capabilities."""

    provider_id: str
    address: str
    cpu_mhz: int
    memory_mb: int
    arch_tags: frozenset[str] = frozenset()
    speed_factor: Fraction = Fraction(1)
    available: bool = True

    def __post_init__(self):
        if not self.provider_id:
            raise MalformedTemplate("provider_id must be non-empty")
        if self.cpu_mhz <= 0:
            raise MalformedTemplate(f"cpu_mhz must be positive, got {self.cpu_mhz}")
        if self.memory_mb <= 0:
            raise MalformedTemplate(f"memory_mb must be positive, got {self.memory_mb}")
        if self.speed_factor <= 0:
            raise MalformedTemplate(f"speed_factor must be positive, got {self.speed_factor}")
        object.__setattr__(self, "arch_tags", frozenset(self.arch_tags))
        object.__setattr__(self, "speed_factor", _as_fraction(self.speed_factor))


@dataclass(frozen=True)
class JobRequirementList:
    """A job's declared resource requirements."""

    job_id: str
    min_cpu_mhz: int
    min_memory_mb: int
    arch_tags: frozenset[str] = frozenset()
    sla: "ServiceLevelAgreement | None" = None

    def __post_init__(self):
        if not self.job_id:
            raise MalformedTemplate("job_id must be non-empty")
        if self.min_cpu_mhz <= 0 or self.min_memory_mb <= 0:
            raise MalformedTemplate("job requirements must be positive")
        object.__setattr__(self, "arch_tags", frozenset(self.arch_tags))


@dataclass(frozen=True)
class ResourceSpecTable:
    """Snapshot of all registered templates, in insertion order."""

    entries: tuple[ResourceSpecTemplate, ...]

    def __post_init__(self):
        ids = [t.provider_id for t in self.entries]
        if len(ids) != len(set(ids)):
            raise MalformedTemplate("duplicate provider_id in table")

    def __iter__(self) -> Iterator[ResourceSpecTemplate]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, provider_id: str) -> ResourceSpecTemplate | None:
        for t in self.entries:
            if t.provider_id == provider_id:
                return t
        return None


@dataclass(frozen=True)
class MatchResult:
    """Eligible providers ranked by score, best first."""

    ranked: tuple[tuple[str, Fraction], ...]
    formula_version: str = MATCH_FORMULA_VERSION

    @property
    def provider_ids(self) -> tuple[str, ...]:
        return tuple(pid for pid, _ in self.ranked)

    def score_of(self, provider_id: str) -> Fraction | None:
        for pid, score in self.ranked:
            if pid == provider_id:
                return score
        return None


def _as_fraction(x) -> Fraction:
    # str round-trip keeps JSON decimals exact (1.18 -> 59/50, not a binary float)
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(str(x))
    return Fraction(x)


def _eligible(t: ResourceSpecTemplate, jrl: JobRequirementList) -> bool:
    return (t.available
            and t.cpu_mhz >= jrl.min_cpu_mhz
            and t.memory_mb >= jrl.min_memory_mb
            and t.arch_tags >= jrl.arch_tags)


def score(t: ResourceSpecTemplate, jrl: JobRequirementList) -> Fraction:
    return (Fraction(t.cpu_mhz, jrl.min_cpu_mhz) + Fraction(t.memory_mb, jrl.min_memory_mb)) / 2


def match_job(jrl: JobRequirementList, rst: ResourceSpecTable) -> MatchResult:
    """Rank every provider satisfying all constraints; NoMatch if none do."""
    scored = [(t.provider_id, score(t, jrl)) for t in rst if _eligible(t, jrl)]
    if not scored:
        raise NoMatch(f"no registered provider satisfies job {jrl.job_id!r}")
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return MatchResult(ranked=tuple(scored))


def select_provider(result: MatchResult, exclude: Iterable[str] = ()) -> str:
    excluded = set(exclude)
    for pid, _ in result.ranked:
        if pid not in excluded:
            return pid
    raise NoMatch("all ranked providers are excluded")


class ResourceBroker:
    """Provider registry; all mutations are serialized, snapshots immutable."""

    def __init__(self):
        self._templates: dict[str, ResourceSpecTemplate] = {}
        self._lock = threading.RLock()

    def register_provider(self, template: ResourceSpecTemplate) -> None:
        """Add or replace the entry for template.provider_id."""
        if not isinstance(template, ResourceSpecTemplate):
            raise MalformedTemplate(f"not a template: {template!r}")
        with self._lock:
            self._templates[template.provider_id] = template

    def set_available(self, provider_id: str, available: bool) -> None:
        with self._lock:
            current = self._templates.get(provider_id)
            if current is None:
                raise UnknownProvider(f"provider {provider_id!r} is not registered")
            if current.available != available:
                self._templates[provider_id] = ResourceSpecTemplate(
                    provider_id=current.provider_id, address=current.address,
                    cpu_mhz=current.cpu_mhz, memory_mb=current.memory_mb,
                    arch_tags=current.arch_tags, speed_factor=current.speed_factor,
                    available=available)

    def get(self, provider_id: str) -> ResourceSpecTemplate | None:
        with self._lock:
            return self._templates.get(provider_id)

    def build_rst(self) -> ResourceSpecTable:
        with self._lock:
            return ResourceSpecTable(entries=tuple(self._templates.values()))

    def match(self, jrl: JobRequirementList) -> MatchResult:
        return match_job(jrl, self.build_rst())


def template_from_dict(obj: dict) -> ResourceSpecTemplate:
    try:
        return ResourceSpecTemplate(
            provider_id=str(obj["provider_id"]),
            address=str(obj["address"]),
            cpu_mhz=int(obj["cpu_mhz"]),
            memory_mb=int(obj["memory_mb"]),
            arch_tags=frozenset(str(t) for t in obj.get("arch_tags", [])),
            speed_factor=_as_fraction(obj.get("speed_factor", 1)),
            available=bool(obj.get("available", True)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedTemplate(f"bad provider entry: {obj!r}") from exc


def template_to_dict(t: ResourceSpecTemplate) -> dict:
    return {
        "provider_id": t.provider_id,
        "address": t.address,
        "cpu_mhz": t.cpu_mhz,
        "memory_mb": t.memory_mb,
        "arch_tags": sorted(t.arch_tags),
        "speed_factor": float(t.speed_factor),
        "available": t.available,
    }


def load_providers(path: str | Path) -> list[ResourceSpecTemplate]:
    """Read the provider bootstrap file: a JSON array of template objects."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise MalformedTemplate("provider file must hold a JSON array")
    return [template_from_dict(obj) for obj in data]
