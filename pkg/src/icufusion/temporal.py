"""Alignment of discrete note events with the hourly time grid.

Note embeddings arrive at arbitrary chart times; the model consumes one
vector per grid hour.  Each hour t (1-based, so row k of the output holds
hour k+1) averages the embeddings of all notes charted at or before t,
weighted by exp(-decay_rate * (t - chart_time)) so recent notes dominate.
Hours with no notes yet get a zero row and availability 0.

The expert summary has no chart time; it is validated once and held
constant across the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import math

import numpy as np

from .errors import ConfigError, DataError
from .featurize import NoteEmbedding

DEFAULT_DECAY_GRID = (0.0, 0.01, 0.05, 0.1, 0.5, 1.0)


@dataclass(frozen=True)
class DecayConfig:
    """Decay rate per hour, plus the grid searched during validation tuning."""

    decay_rate: float = 0.1
    grid: tuple[float, ...] = DEFAULT_DECAY_GRID

    def __post_init__(self):
        if self.decay_rate < 0:
            raise ConfigError(f"decay_rate must be >= 0, got {self.decay_rate}")
        if not self.grid:
            raise ConfigError("decay grid must not be empty")
        if any(g < 0 for g in self.grid):
            raise ConfigError("decay grid values must be >= 0")


@dataclass
class AlignedText:
    """Per-hour aggregated note embeddings plus the constant summary channel.

    Rows of ``note_matrix`` whose availability flag is 0 are all-zero; the
    flag exists so downstream consumers can tell "no notes yet" apart from
    a genuinely zero aggregate.
    """

    note_matrix: np.ndarray          # (n_hours, dim)
    availability: np.ndarray         # (n_hours,) uint8
    summary: Optional[np.ndarray]    # (dim,) or None


def decay_weight(t: float, chart_time: float, decay_rate: float) -> float:
    """exp(-decay_rate * (t - chart_time)); requires chart_time <= t."""
    if decay_rate < 0:
        raise ConfigError(f"decay_rate must be >= 0, got {decay_rate}")
    if chart_time > t:
        raise ValueError(
            f"causality violation: chart_time {chart_time} is after t {t}"
        )
    return math.exp(-decay_rate * (t - chart_time))


def aggregate_notes(embeddings: Sequence[NoteEmbedding], n_hours: int,
                    decay_rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Decay-weighted mean of available note embeddings at each grid hour.

    For hour t in 1..n_hours, the aggregate is
    mean(vector_i * decay_weight(t, chart_time_i)) over the notes with
    chart_time <= t (inclusive: a note charted exactly on the hour counts).
    Returns (matrix of shape (n_hours, dim), availability flags).

    Summation runs in ascending chart-time order so results are bit-stable.
    """
    if decay_rate < 0:
        raise ConfigError(f"decay_rate must be >= 0, got {decay_rate}")
    if n_hours < 1:
        raise ConfigError(f"n_hours must be >= 1, got {n_hours}")
    ordered = sorted(embeddings, key=lambda e: e.chart_time)
    if ordered and ordered[0].chart_time < 0:
        raise DataError(f"negative chart_time {ordered[0].chart_time}")
    if not ordered:
        return np.zeros((n_hours, 1)), np.zeros(n_hours, dtype=np.uint8)
    dim = ordered[0].vector.shape[0]
    if any(e.vector.shape[0] != dim for e in ordered):
        raise DataError("note embeddings have inconsistent dimensions")
    vectors = np.stack([e.vector for e in ordered])
    times = np.array([e.chart_time for e in ordered])
    out = np.zeros((n_hours, dim), dtype=np.float64)
    availability = np.zeros(n_hours, dtype=np.uint8)
    for row in range(n_hours):
        t = float(row + 1)
        m = int(np.searchsorted(times, t, side="right"))
        if m == 0:
            continue
        weights = np.exp(-decay_rate * (t - times[:m]))
        out[row] = (weights[:, None] * vectors[:m]).sum(axis=0) / m
        availability[row] = 1
    return out, availability


def align_summary(summary_embedding: np.ndarray, dim: int) -> np.ndarray:
    """Validate the summary vector; it is constant over the grid, stored once."""
    vec = np.asarray(summary_embedding, dtype=np.float64)
    if vec.shape != (dim,):
        raise DataError(
            f"summary embedding has shape {vec.shape}, expected ({dim},)"
        )
    if not np.all(np.isfinite(vec)):
        raise DataError("summary embedding has non-finite entries")
    return vec


def align_text(note_embeddings: Sequence[NoteEmbedding],
               summary_embedding: Optional[np.ndarray],
               n_hours: int, dim: int, decay_rate: float) -> AlignedText:
    """Build the full per-episode text alignment."""
    if note_embeddings:
        matrix, availability = aggregate_notes(note_embeddings, n_hours, decay_rate)
        if matrix.shape[1] != dim:
            raise DataError(
                f"note embeddings have dim {matrix.shape[1]}, expected {dim}"
            )
    else:
        matrix = np.zeros((n_hours, dim))
        availability = np.zeros(n_hours, dtype=np.uint8)
    summary = None
    if summary_embedding is not None:
        summary = align_summary(summary_embedding, dim)
    return AlignedText(note_matrix=matrix, availability=availability, summary=summary)
