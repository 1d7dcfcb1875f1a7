"""Seeded synthetic run-to-failure bearings with known degradation onset."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .datapipe import BearingRecord, make_labels
from .errors import ConfigError


@dataclass(frozen=True)
class Spike:
    """Transient amplitude burst that reverts: starts at ``position`` (fraction of l)."""

    position: float = 0.2
    multiplier: float = 5.0
    duration: int = 5


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    acquisitions: int = 300
    points: int = 256
    amplitude: float = 1.0
    onset_fraction: float = 0.5
    growth_rate: float = 0.02
    onset_jump: float = 1.0
    spike: Spike | None = None
    id: str = "syn"
    sample_period_s: float = 10.0

    def validate(self) -> None:
        if self.acquisitions < 2:
            raise ConfigError("acquisitions must be >= 2")
        if self.points < 1:
            raise ConfigError("points must be >= 1")
        if not self.amplitude > 0:
            raise ConfigError(f"amplitude must be > 0, got {self.amplitude}")
        if not 0.0 < self.onset_fraction < 1.0:
            raise ConfigError(f"onset_fraction must be in (0, 1), got {self.onset_fraction}")
        if self.growth_rate < 0:
            raise ConfigError("growth_rate must be >= 0")
        if self.spike is not None and (self.spike.duration < 1 or not 0.0 <= self.spike.position < 1.0):
            raise ConfigError("spike needs duration >= 1 and position in [0, 1)")

    @property
    def onset(self) -> int:
        return int(round(self.onset_fraction * self.acquisitions))


def amplitude_envelope(spec: SynthSpec) -> np.ndarray:
    """Noise standard deviation per acquisition."""
    i = np.arange(spec.acquisitions)
    onset = spec.onset
    env = np.full(spec.acquisitions, spec.amplitude, dtype=np.float64)
    late = i >= onset
    env[late] = spec.amplitude * spec.onset_jump * np.exp(spec.growth_rate * (i[late] - onset))
    if spec.spike is not None:
        s0 = int(round(spec.spike.position * spec.acquisitions))
        env[s0: s0 + spec.spike.duration] *= spec.spike.multiplier
    return env


def generate(spec: SynthSpec) -> BearingRecord:
    """Gaussian vibration with an exponentially growing envelope after onset.

    Labels are the piecewise HI with FPT at the true onset.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    env = amplitude_envelope(spec)
    x = rng.standard_normal((spec.acquisitions, 2, spec.points)) * env[:, None, None]
    rec = BearingRecord(spec.id, x, sample_period_s=spec.sample_period_s)
    return make_labels(rec, min(spec.onset, spec.acquisitions - 1))


def generate_suite(count: int, base: SynthSpec, seed: int) -> list[BearingRecord]:
    """``count`` bearings with jittered onset, growth rate and amplitude.

    Onset fraction is drawn within +-0.1 of the base value and clipped to
    [0.1, 0.9]; growth and amplitude are scaled by U(0.8, 1.2). Onsets are
    kept distinct.
    """
    return [generate(s) for s in suite_specs(count, base, seed)]


def suite_specs(count: int, base: SynthSpec, seed: int) -> list[SynthSpec]:
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    seeds = rng.choice(2 ** 31, size=count, replace=False)
    specs, onsets = [], set()
    for i in range(count):
        for _ in range(1000):
            f = float(np.clip(base.onset_fraction + rng.uniform(-0.1, 0.1), 0.1, 0.9))
            cand = replace(base, onset_fraction=f)
            if cand.onset not in onsets:
                break
        else:
            raise ConfigError("could not draw distinct onsets; increase acquisitions")
        onsets.add(cand.onset)
        specs.append(replace(
            cand,
            seed=int(seeds[i]),
            growth_rate=base.growth_rate * float(rng.uniform(0.8, 1.2)),
            amplitude=base.amplitude * float(rng.uniform(0.8, 1.2)),
            id=f"{base.id}{i + 1}",
        ))
    return specs
