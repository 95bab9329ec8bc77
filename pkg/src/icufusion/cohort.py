"""Episode data model, on-disk cohort format, vitals preprocessing, and
deterministic splits.

An episode is the first 48 hours of one ICU stay: an hourly 48 x d vitals
grid with an observation mask, timed clinical notes, an optional expert
summary, the mortality label, and demographics used only for subgroup
evaluation (they never enter the model).

Cohort files are JSONL, one episode object per line; see the README for
the exact schema.  Loading is strict (reject the file on the first bad
line) or tolerant (skip bad lines with a warning).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import CohortWarning, ConfigError, DataError

N_HOURS = 48

RACE_GROUPS = (
    "white",
    "other",
    "black_african_american",
    "hispanic_latino",
    "asian",
    "declined_to_answer",
)

SEXES = ("male", "female")

_EPISODE_KEYS = frozenset(
    ("episode_id", "vitals", "mask", "notes", "expert_summary", "label",
     "demographics")
)


@dataclass(frozen=True)
class ChannelSpec:
    """One vitals channel with its plausible physiological range."""

    name: str
    plausible_min: float
    plausible_max: float
    unit: str

    def __post_init__(self):
        if not self.plausible_min < self.plausible_max:
            raise ConfigError(
                f"channel {self.name!r}: plausible_min must be < plausible_max"
            )

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.plausible_min + self.plausible_max)


@dataclass(frozen=True)
class VitalsSpec:
    """Ordered channel list; fixes d and the truncation bounds."""

    channels: tuple[ChannelSpec, ...]

    def __post_init__(self):
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ConfigError("channel names must be unique")
        if not self.channels:
            raise ConfigError("at least one channel required")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise DataError(f"unknown channel {name!r}; known: {self.names}")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([c.plausible_min for c in self.channels])
        hi = np.array([c.plausible_max for c in self.channels])
        return lo, hi


def default_vitals_spec() -> VitalsSpec:
    """The standard ten-channel panel used throughout."""
    return VitalsSpec(channels=(
        ChannelSpec("diastolic_bp", 20.0, 140.0, "mmHg"),
        ChannelSpec("systolic_bp", 40.0, 240.0, "mmHg"),
        ChannelSpec("mean_bp", 26.0, 200.0, "mmHg"),
        ChannelSpec("heart_rate", 20.0, 220.0, "bpm"),
        ChannelSpec("temperature", 32.0, 42.0, "degC"),
        ChannelSpec("respiratory_rate", 4.0, 60.0, "breaths/min"),
        ChannelSpec("spo2", 0.0, 100.0, "%"),
        ChannelSpec("fio2", 21.0, 100.0, "%"),
        ChannelSpec("ph", 6.3, 8.0, "pH"),
        ChannelSpec("glucose", 20.0, 1000.0, "mg/dL"),
    ))


@dataclass
class NoteEvent:
    """A single clinical note with its chart time in hours from admission."""

    chart_time: float
    text: str
    category: str = "nursing"

    def __post_init__(self):
        if not math.isfinite(self.chart_time) or self.chart_time < 0:
            raise DataError(f"chart_time must be finite and >= 0, got {self.chart_time}")
        if not self.text:
            raise DataError("note text must be non-empty")


@dataclass
class Demographics:
    age: float
    sex: str
    race: str

    def __post_init__(self):
        if not math.isfinite(self.age) or self.age < 0:
            raise DataError(f"age must be finite and >= 0, got {self.age}")
        if self.sex not in SEXES:
            raise DataError(f"unknown sex {self.sex!r}; expected one of {SEXES}")
        if self.race not in RACE_GROUPS:
            raise DataError(f"unknown race {self.race!r}; expected one of {RACE_GROUPS}")


@dataclass
class Episode:
    """One ICU stay, preprocessed onto the hourly grid."""

    episode_id: str
    vitals: np.ndarray            # (N_HOURS, d) float64
    mask: np.ndarray              # (N_HOURS, d) uint8, 1 = observed
    notes: list[NoteEvent]
    label: int
    demographics: Demographics
    expert_summary: Optional[str] = None

    def __post_init__(self):
        self.vitals = np.asarray(self.vitals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.uint8)

    def validate(self, spec: VitalsSpec, check_ranges: bool = False) -> None:
        if not self.episode_id:
            raise DataError("episode_id must be non-empty")
        d = spec.n_channels
        if self.vitals.shape != (N_HOURS, d):
            raise DataError(
                f"vitals has shape {self.vitals.shape}, expected ({N_HOURS}, {d})"
            )
        if self.mask.shape != (N_HOURS, d):
            raise DataError(
                f"mask has shape {self.mask.shape}, expected ({N_HOURS}, {d})"
            )
        if not np.all(np.isfinite(self.vitals)):
            raise DataError("vitals contain non-finite values")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError("mask entries must be 0 or 1")
        if self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        for note in self.notes:
            if note.chart_time > N_HOURS:
                raise DataError(
                    f"note chart_time {note.chart_time} exceeds the "
                    f"{N_HOURS}-hour window"
                )
        if check_ranges:
            lo, hi = spec.bounds()
            if np.any(self.vitals < lo) or np.any(self.vitals > hi):
                raise DataError("vitals contain values outside plausible ranges")


def episode_to_json_dict(episode: Episode) -> dict:
    return {
        "episode_id": episode.episode_id,
        "vitals": episode.vitals.tolist(),
        "mask": episode.mask.astype(int).tolist(),
        "notes": [
            {"chart_time": n.chart_time, "text": n.text, "category": n.category}
            for n in episode.notes
        ],
        "expert_summary": episode.expert_summary,
        "label": int(episode.label),
        "demographics": {
            "age": episode.demographics.age,
            "sex": episode.demographics.sex,
            "race": episode.demographics.race,
        },
    }


def episode_from_json_dict(obj: dict, spec: VitalsSpec,
                           strict: bool = False) -> Episode:
    if not isinstance(obj, dict):
        raise DataError("episode record must be a JSON object")
    missing = _EPISODE_KEYS - obj.keys()
    if missing:
        raise DataError(f"missing keys: {sorted(missing)}")
    unknown = obj.keys() - _EPISODE_KEYS
    if unknown and strict:
        raise DataError(f"unknown keys: {sorted(unknown)}")
    demo_obj = obj["demographics"]
    if not isinstance(demo_obj, dict) or demo_obj.keys() < {"age", "sex", "race"}:
        raise DataError("demographics must contain age, sex, race")
    episode = Episode(
        episode_id=str(obj["episode_id"]),
        vitals=np.asarray(obj["vitals"], dtype=np.float64),
        mask=np.asarray(obj["mask"]),
        notes=[NoteEvent(chart_time=float(n["chart_time"]), text=str(n["text"]),
                         category=str(n.get("category", "nursing")))
               for n in obj["notes"]],
        expert_summary=obj["expert_summary"],
        label=obj["label"],
        demographics=Demographics(age=float(demo_obj["age"]),
                                  sex=str(demo_obj["sex"]),
                                  race=str(demo_obj["race"])),
    )
    episode.validate(spec, check_ranges=strict)
    return episode


def load_cohort(path, spec: Optional[VitalsSpec] = None,
                strict: bool = False) -> list[Episode]:
    """Read a JSONL cohort file.

    In strict mode the first invalid line raises DataError; otherwise
    invalid lines are skipped with a CohortWarning naming the line.
    """
    spec = spec or default_vitals_spec()
    episodes = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"malformed JSON: {exc}") from exc
                episodes.append(episode_from_json_dict(obj, spec, strict=strict))
            except DataError as exc:
                message = f"{path}:{line_no}: {exc}"
                if strict:
                    raise DataError(message) from exc
                warnings.warn(message, CohortWarning, stacklevel=2)
    return episodes


def save_cohort(episodes: Sequence[Episode], path) -> None:
    """Write JSONL with a canonical key order so output is byte-stable."""
    with open(path, "w", encoding="utf-8") as handle:
        for episode in episodes:
            handle.write(json.dumps(episode_to_json_dict(episode), sort_keys=True))
            handle.write("\n")


def preprocess(raw_vitals: Iterable[tuple[float, str, float]],
               spec: VitalsSpec,
               channel_means: Optional[np.ndarray] = None,
               strict: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Aggregate raw (time, channel, value) readings onto the hourly grid.

    Cell (t, j) is the mean of channel j's readings with time in [t, t+1),
    clamped into the plausible range; mask(t, j) is 1 iff at least one
    reading existed.  In strict mode, out-of-range readings are dropped
    before aggregation instead of clamped after it (so a cell whose only
    readings were implausible stays unobserved).

    Unobserved cells are imputed by forward fill within the episode; cells
    before a channel's first observation fall back to ``channel_means``
    (training-set means; plausible-range midpoints when not given).
    """
    d = spec.n_channels
    lo, hi = spec.bounds()
    if channel_means is None:
        means = np.array([c.midpoint for c in spec.channels])
    else:
        means = np.asarray(channel_means, dtype=np.float64)
        if means.shape != (d,):
            raise DataError(f"channel_means must have shape ({d},)")
    sums = np.zeros((N_HOURS, d))
    counts = np.zeros((N_HOURS, d), dtype=np.int64)
    for time, channel, value in raw_vitals:
        j = spec.index_of(channel)
        if not (math.isfinite(time) and math.isfinite(value)):
            raise DataError(
                f"non-finite reading for channel {channel!r}: ({time}, {value})"
            )
        if not 0.0 <= time < N_HOURS:
            raise DataError(
                f"reading time {time} outside [0, {N_HOURS}) for channel {channel!r}"
            )
        if strict and not (lo[j] <= value <= hi[j]):
            continue
        hour = int(time)
        sums[hour, j] += value
        counts[hour, j] += 1
    mask = (counts > 0).astype(np.uint8)
    vitals = np.zeros((N_HOURS, d))
    observed = counts > 0
    vitals[observed] = sums[observed] / counts[observed]
    vitals = np.clip(vitals, lo, hi, where=observed, out=vitals)
    # Imputation: forward fill, then training mean for the lead-in.
    for j in range(d):
        last = None
        for t in range(N_HOURS):
            if observed[t, j]:
                last = vitals[t, j]
            else:
                vitals[t, j] = last if last is not None else means[j]
    return vitals, mask


def channel_training_means(episodes_readings: Iterable[Iterable[tuple[float, str, float]]],
                           spec: VitalsSpec,
                           strict: bool = False) -> np.ndarray:
    """Mean observed value per channel over a training set of raw readings.

    Values are clamped (or dropped, in strict mode) exactly as in
    ``preprocess``; channels never observed fall back to the plausible-range
    midpoint.
    """
    d = spec.n_channels
    lo, hi = spec.bounds()
    total = np.zeros(d)
    count = np.zeros(d, dtype=np.int64)
    for readings in episodes_readings:
        for time, channel, value in readings:
            j = spec.index_of(channel)
            if not math.isfinite(value):
                raise DataError(f"non-finite reading for channel {channel!r}")
            if strict and not (lo[j] <= value <= hi[j]):
                continue
            total[j] += min(max(value, lo[j]), hi[j])
            count[j] += 1
    means = np.array([c.midpoint for c in spec.channels])
    seen = count > 0
    means[seen] = total[seen] / count[seen]
    return means


@dataclass
class CohortSplit:
    """Disjoint, exhaustive train/val/test episode-id lists."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        groups = (set(self.train), set(self.val), set(self.test))
        total = sum(len(g) for g in groups)
        if total != len(set().union(*groups)):
            raise DataError("split groups overlap")

    def partition(self, episodes: Sequence[Episode]
                  ) -> tuple[list[Episode], list[Episode], list[Episode]]:
        by_id = {e.episode_id: e for e in episodes}
        missing = (set(self.train) | set(self.val) | set(self.test)) - by_id.keys()
        if missing:
            raise DataError(f"split references unknown episodes, e.g. {sorted(missing)[:3]}")
        return ([by_id[i] for i in self.train],
                [by_id[i] for i in self.val],
                [by_id[i] for i in self.test])

    def to_json_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val),
                "test": list(self.test), "fractions": list(self.fractions),
                "seed": self.seed}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "CohortSplit":
        return cls(train=tuple(obj["train"]), val=tuple(obj["val"]),
                   test=tuple(obj["test"]),
                   fractions=tuple(obj["fractions"]), seed=int(obj["seed"]))


def split_sizes(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor-based val/test sizes; the remainder goes to train."""
    n_val = int(math.floor(n * fractions[1]))
    n_test = int(math.floor(n * fractions[2]))
    return n - n_val - n_test, n_val, n_test


def split_cohort(episodes: Sequence[Episode],
                 fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
                 seed: int = 0) -> CohortSplit:
    """Deterministic random partition of a cohort.

    Sizes are floor-based for val and test with the remainder assigned to
    train.
    """
    if len(episodes) < 3:
        raise DataError(f"need at least 3 episodes to split, got {len(episodes)}")
    if any(f <= 0 for f in fractions):
        raise ConfigError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    ids = [e.episode_id for e in episodes]
    if len(set(ids)) != len(ids):
        raise DataError("episode ids must be unique to split a cohort")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_val, n_test = split_sizes(len(ids), fractions)
    shuffled = [ids[i] for i in order]
    return CohortSplit(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
        fractions=tuple(fractions),
        seed=seed,
    )
