"""Language-goal semantic reward and hierarchical kinematic reward synthesis.

A state embedding is scored against a positive and a negative text goal:

    r_goal = alpha * sim(e_state, e_pos) - beta * sim(e_state, e_neg)

with sim = cosine clipped to [0, 1], so r_goal always lies in [-beta, alpha].
The normalized goal score sets a target speed; the synthesized reward is the
product of clamped speed, lane-centering, heading, and lateral-stability
factors, each in [0, 1].

Embedding providers are pluggable: the bundled mock hashes word stems into a
fixed 64-dimensional space with integer-seeded uniform directions, so its
vectors are bit-identical across machines. State features activate the same
stem channels as the words that describe them ("collision" and a set
collision flag land on one channel), which is what lets goal text about
crashes move the reward without any trained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

from . import SkyliteError
from .geometry import wrap_angle
from .seeding import DetRng, derive_seed
from .world import LaneGraph, WorldState, leader_of, min_ttc

EMBED_DIM = 64


class DimensionMismatch(SkyliteError):
    pass


@dataclass(frozen=True, slots=True)
class LanguageGoalPair:
    l_pos: str
    l_neg: str

    def __post_init__(self) -> None:
        if not self.l_pos or not self.l_neg:
            raise ValueError("both goal texts must be non-empty")


@dataclass(frozen=True, slots=True)
class StateFeatures:
    """Fixed-order numeric summary of the ego's situation."""

    speed: float
    lateral_offset: float
    heading_error: float
    min_gap: float
    min_ttc: float
    collision: bool

    def __post_init__(self) -> None:
        for name in ("speed", "lateral_offset", "heading_error",
                     "min_gap", "min_ttc"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def as_vector(self) -> tuple[float, ...]:
        return (self.speed, self.lateral_offset, self.heading_error,
                self.min_gap, self.min_ttc, 1.0 if self.collision else 0.0)


_GAP_CAP = 200.0
_TTC_CAP = 60.0


def features_from_world(world: WorldState, graph: LaneGraph,
                        agent_id: int) -> StateFeatures:
    ego = world.agent(agent_id)
    lane_heading = graph.polyline(ego.lane_id).heading_at(ego.s)
    _, gap = leader_of(world, graph, agent_id)
    ttc = min_ttc(world, graph, agent_id)
    hit = any(agent_id in pair for pair in world.collisions_this_tick)
    return StateFeatures(
        speed=ego.v,
        lateral_offset=ego.d,
        heading_error=wrap_angle(ego.heading - lane_heading),
        min_gap=min(gap, _GAP_CAP),
        min_ttc=min(ttc, _TTC_CAP),
        collision=hit,
    )


class EmbeddingProvider(Protocol):
    def embed_state(self, features: StateFeatures) -> tuple[float, ...]: ...
    def embed_text(self, text: str) -> tuple[float, ...]: ...


@dataclass(frozen=True, slots=True)
class RewardConfig:
    pos_weight: float = 1.0       # alpha
    neg_weight: float = 1.0       # beta
    v_max: float = 30.0           # m/s
    d_max: float = 1.75           # lateral tolerance, m (half lane width)
    theta_max: float = 0.35       # heading tolerance, rad
    window: int = 20              # stability window, ticks

    def __post_init__(self) -> None:
        if self.pos_weight < 0 or self.neg_weight < 0:
            raise ValueError("goal weights must be non-negative")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")


@dataclass(frozen=True, slots=True)
class RewardBundle:
    r_goal: float
    r_goal_normalized: float
    r_speed: float
    f_center: float
    f_angle: float
    f_stability: float
    r_synthesis: float


def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise DimensionMismatch(f"{len(a)} vs {len(b)}")
    dot = math.fsum(x * y for x, y in zip(a, b))
    na = math.sqrt(math.fsum(x * x for x in a))
    nb = math.sqrt(math.fsum(y * y for y in b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def _sim(a: Sequence[float], b: Sequence[float]) -> float:
    # clipped cosine keeps the goal reward inside [-neg_weight, pos_weight]
    c = _cosine(a, b)
    return 0.0 if c < 0.0 else (1.0 if c > 1.0 else c)


def goal_contrast_reward(features: StateFeatures, goals: LanguageGoalPair,
               provider: EmbeddingProvider, cfg: RewardConfig) -> float:
    """Contrast of state similarity to the positive vs the negative goal."""
    e_s = provider.embed_state(features)
    e_pos = provider.embed_text(goals.l_pos)
    e_neg = provider.embed_text(goals.l_neg)
    return cfg.pos_weight * _sim(e_s, e_pos) - cfg.neg_weight * _sim(e_s, e_neg)


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def synthesize(features: StateFeatures, r_goal: float, cfg: RewardConfig,
               history: Sequence[float] = ()) -> RewardBundle:
    """Product of speed-target, centering, heading, and stability factors.

    `history` holds the last <= window lateral offsets; its spread feeds the
    stability factor.
    """
    if len(history) > cfg.window:
        raise ValueError(f"history longer than window ({len(history)} > {cfg.window})")
    span = cfg.pos_weight + cfg.neg_weight
    normalized = _clamp01((r_goal + cfg.neg_weight) / span) if span > 0 else 0.5
    v_target = normalized * cfg.v_max
    r_speed = max(0.0, 1.0 - abs(features.speed - v_target) / cfg.v_max)
    f_center = max(0.0, 1.0 - abs(features.lateral_offset) / cfg.d_max)
    f_angle = max(0.0, 1.0 - abs(features.heading_error) / cfg.theta_max)
    if len(history) >= 2:
        mean = math.fsum(history) / len(history)
        var = math.fsum((x - mean) ** 2 for x in history) / len(history)
        spread = math.sqrt(var)
    else:
        spread = 0.0
    f_stability = max(0.0, 1.0 - spread / cfg.d_max)
    return RewardBundle(
        r_goal=r_goal,
        r_goal_normalized=normalized,
        r_speed=r_speed,
        f_center=f_center,
        f_angle=f_angle,
        f_stability=f_stability,
        r_synthesis=r_speed * f_center * f_angle * f_stability,
    )


# --- deterministic mock embedding provider -----------------------------------

_STEM_LEN = 4
_FEATURE_CHANNELS = (
    # (name shared with goal vocabulary, salience given a feature vector)
    ("speed", lambda f: f.speed / 40.0),
    ("lateral", lambda f: abs(f.lateral_offset) / 3.5),
    ("heading", lambda f: abs(f.heading_error) / math.pi),
    ("close", lambda f: 1.0 / (1.0 + f.min_gap)),
    ("danger", lambda f: 1.0 / (1.0 + f.min_ttc)),
    ("collision", lambda f: 3.0 if f.collision else 0.0),
)


def _stem(token: str) -> str:
    return token[:_STEM_LEN]


def _tokens(text: str) -> list[str]:
    out = []
    word = []
    for ch in text.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


def _fnv_text(s: str) -> int:
    h = 0xCBF29CE484222325
    for byte in s.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _normalize(vec: list[float]) -> tuple[float, ...]:
    norm = math.sqrt(math.fsum(x * x for x in vec))
    if norm == 0.0:
        unit = [0.0] * len(vec)
        unit[0] = 1.0
        return tuple(unit)
    return tuple(x / norm for x in vec)


class MockEmbeddingProvider:
    """Hashing embedder: one seeded unit direction per word stem.

    Restricted to integer mixing plus add/mul/div/sqrt so vectors are
    bit-identical on any IEEE-754 machine. Safe for concurrent readers: the
    channel cache is filled with idempotent values.
    """

    def __init__(self, seed: int = 0, dim: int = EMBED_DIM):
        self.seed = seed
        self.dim = dim
        self._channels: dict[str, tuple[float, ...]] = {}

    def _channel(self, stem: str) -> tuple[float, ...]:
        vec = self._channels.get(stem)
        if vec is None:
            rng = DetRng(derive_seed(self.seed, _fnv_text(stem)))
            vec = _normalize([2.0 * rng.uniform() - 1.0 for _ in range(self.dim)])
            self._channels[stem] = vec
        return vec

    def embed_text(self, text: str) -> tuple[float, ...]:
        stems = [_stem(t) for t in _tokens(text)] or ["none"]
        acc = [0.0] * self.dim
        for st in stems:
            ch = self._channel(st)
            for i in range(self.dim):
                acc[i] += ch[i]
        return _normalize(acc)

    def embed_state(self, features: StateFeatures) -> tuple[float, ...]:
        acc = [0.0] * self.dim
        for name, salience in _FEATURE_CHANNELS:
            w = salience(features)
            if w == 0.0:
                continue
            ch = self._channel(_stem(name))
            for i in range(self.dim):
                acc[i] += w * ch[i]
        return _normalize(acc)


def mock_provider(seed: int = 0) -> MockEmbeddingProvider:
    return MockEmbeddingProvider(seed=seed)
