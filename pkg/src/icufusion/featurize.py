"""Text featurization: hashed n-gram note embeddings and the expert-summary
channel.

The embedder is a signed feature-hashing bag of word n-grams (murmurhash3,
seedable), so it is deterministic across runs and platforms and needs no
model weights.  Sites with a real clinical text encoder can bypass it
entirely through ``load_precomputed_embeddings`` and still use the rest of
the pipeline.

The summarizer is pluggable: a deterministic rule-based stub (keyword
lexicon over sentences), a lookup of precomputed summaries, or an external
command hook for wiring in an actual LLM.
"""

from __future__ import annotations

import csv
import json
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.murmurhash import murmurhash3_32

from .errors import ConfigError, DataError

_TOKEN_RE = re.compile(r"\S+")
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+|\n+")

# Findings the rule-based summarizer extracts.  Matches the abnormal-finding
# vocabulary used by the synthetic note templates, plus common variants.
DEFAULT_LEXICON = (
    "hypotension", "hypotensive", "tachycardia", "tachycardic", "bradycardia",
    "febrile", "fever", "hypothermia", "hypoxia", "hypoxic", "desaturation",
    "tachypnea", "tachypneic", "acidosis", "acidotic", "hyperglycemia",
    "lethargic", "lethargy", "obtunded", "unresponsive", "confusion",
    "oliguria", "anuria", "mottled", "sepsis", "septic", "vasopressor",
    "vasopressors", "intubated", "deteriorating", "decline", "prognosis",
    "goals of care", "comfort measures", "unstable", "critical",
)


@dataclass(frozen=True)
class EmbeddingSpec:
    """Configuration of the hashed n-gram embedder.

    ``dim`` defaults to 256 for desk-scale runs; use
    ``EmbeddingSpec.pretrained_encoder()`` (dim 768) when mixing with
    precomputed vectors from a transformer clinical-text encoder.
    """

    dim: int = 256
    ngram_range: tuple[int, int] = (1, 2)
    hash_seed: int = 0
    normalization: str = "l2"

    def __post_init__(self):
        if self.dim < 8:
            raise ConfigError(f"embedding dim must be >= 8, got {self.dim}")
        lo, hi = self.ngram_range
        if not (1 <= lo <= hi):
            raise ConfigError(f"invalid ngram_range {self.ngram_range!r}")
        if self.normalization not in ("l2", "none"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")

    @classmethod
    def pretrained_encoder(cls, **overrides) -> "EmbeddingSpec":
        """Preset matching the 768-wide output of common clinical encoders."""
        return cls(dim=768, **overrides)

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "ngram_range": list(self.ngram_range),
            "hash_seed": self.hash_seed,
            "normalization": self.normalization,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "EmbeddingSpec":
        return cls(
            dim=int(obj["dim"]),
            ngram_range=tuple(obj["ngram_range"]),
            hash_seed=int(obj["hash_seed"]),
            normalization=obj["normalization"],
        )


@dataclass
class NoteEmbedding:
    """One embedded note with its chart time (hours from admission)."""

    vector: np.ndarray
    chart_time: float

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise DataError("note embedding must be 1-D")
        if not np.all(np.isfinite(self.vector)):
            raise DataError("note embedding has non-finite entries")
        if not np.isfinite(self.chart_time):
            raise DataError("chart_time must be finite")


def embed_text(text: str, spec: EmbeddingSpec) -> np.ndarray:
    """Signed hashed n-gram bag of words.

    Each word n-gram hashes to a bucket in [0, dim) and a sign; counts are
    accumulated and optionally L2-normalized.  Empty text gives the zero
    vector.  Pure function of (text, spec).
    """
    out = np.zeros(spec.dim, dtype=np.float64)
    tokens = text.lower().split()
    if not tokens:
        return out
    seed = spec.hash_seed % (2**31)
    lo, hi = spec.ngram_range
    for n in range(lo, hi + 1):
        for i in range(len(tokens) - n + 1):
            h = murmurhash3_32(" ".join(tokens[i:i + n]), seed=seed, positive=False)
            sign = 1.0 if h >= 0 else -1.0
            out[(h & 0x7FFFFFFF) % spec.dim] += sign
    if spec.normalization == "l2":
        norm = np.linalg.norm(out)
        if norm > 0:
            out /= norm
    return out


class HashingNoteEmbedder(BaseEstimator, TransformerMixin):
    """Stateless sklearn transformer over iterables of note texts."""

    def __init__(self, dim: int = 256, ngram_range: tuple[int, int] = (1, 2),
                 hash_seed: int = 0, normalization: str = "l2"):
        self.dim = dim
        self.ngram_range = ngram_range
        self.hash_seed = hash_seed
        self.normalization = normalization

    def _spec(self) -> EmbeddingSpec:
        return EmbeddingSpec(dim=self.dim, ngram_range=tuple(self.ngram_range),
                             hash_seed=self.hash_seed, normalization=self.normalization)

    def fit(self, X, y=None):
        self._spec()  # validate parameters
        return self

    def transform(self, X) -> np.ndarray:
        spec = self._spec()
        return np.vstack([embed_text(text, spec) for text in X]) if len(X) else \
            np.zeros((0, spec.dim))


def concat_notes(notes: Sequence, max_tokens: int = 4096) -> str:
    """Join notes chronologically into one document, newest tokens kept.

    Notes are sorted ascending by chart time (stable for ties); each note is
    preceded by a separator line carrying its chart time.  If the assembled
    document exceeds ``max_tokens`` whitespace tokens, the oldest tokens are
    dropped so exactly the most recent ``max_tokens`` remain.
    """
    if max_tokens <= 0:
        raise ConfigError(f"max_tokens must be positive, got {max_tokens}")
    ordered = sorted(notes, key=lambda n: n.chart_time)
    parts = [f"[hour {note.chart_time:g}]\n{note.text}" for note in ordered]
    doc = "\n\n".join(parts)
    starts = [m.start() for m in _TOKEN_RE.finditer(doc)]
    if len(starts) > max_tokens:
        doc = doc[starts[len(starts) - max_tokens]:]
    return doc


@dataclass(frozen=True)
class SummarizerConfig:
    """How the expert-summary channel is produced.

    Modes: ``rule_based_stub`` filters the document to sentences containing
    lexicon keywords and prepends a header of detected findings;
    ``precomputed_file`` looks summaries up by episode id from a JSON map;
    ``external_command`` pipes the document to a user command (the hook for
    a real LLM).
    """

    mode: str = "rule_based_stub"
    max_input_tokens: int = 4096
    lexicon: tuple[str, ...] = DEFAULT_LEXICON
    precomputed_path: Optional[str] = None
    command_template: Optional[str] = None
    timeout_s: float = 600.0

    def __post_init__(self):
        if self.mode not in ("rule_based_stub", "precomputed_file", "external_command"):
            raise ConfigError(f"unknown summarizer mode {self.mode!r}")
        if self.max_input_tokens <= 0:
            raise ConfigError("max_input_tokens must be positive")
        if self.mode == "precomputed_file" and not self.precomputed_path:
            raise ConfigError("precomputed_file mode requires precomputed_path")
        if self.mode == "external_command" and not self.command_template:
            raise ConfigError("external_command mode requires command_template")
        if self.mode == "external_command" and "{input_file}" not in self.command_template:
            raise ConfigError("command_template must contain {input_file}")
        if not self.lexicon:
            raise ConfigError("lexicon must not be empty")

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "max_input_tokens": self.max_input_tokens,
            "lexicon": list(self.lexicon),
            "precomputed_path": self.precomputed_path,
            "command_template": self.command_template,
            "timeout_s": self.timeout_s,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SummarizerConfig":
        return cls(
            mode=obj.get("mode", "rule_based_stub"),
            max_input_tokens=int(obj.get("max_input_tokens", 4096)),
            lexicon=tuple(obj.get("lexicon") or DEFAULT_LEXICON),
            precomputed_path=obj.get("precomputed_path"),
            command_template=obj.get("command_template"),
            timeout_s=float(obj.get("timeout_s", 600.0)),
        )


def load_lexicon(path) -> tuple[str, ...]:
    """One keyword per line; blank lines ignored; matching is case-insensitive."""
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.strip().lower()
        if word:
            words.append(word)
    if not words:
        raise DataError(f"lexicon file {path} contains no keywords")
    return tuple(words)


def _keyword_pattern(lexicon: Sequence[str]) -> re.Pattern:
    alternatives = sorted((re.escape(w.lower()) for w in lexicon), key=len, reverse=True)
    return re.compile(r"\b(?:" + "|".join(alternatives) + r")\b", re.IGNORECASE)


def _stub_summary(document: str, lexicon: Sequence[str]) -> str:
    pattern = _keyword_pattern(lexicon)
    kept = []
    found: set[str] = set()
    for sentence in _SENTENCE_SPLIT_RE.split(document):
        sentence = sentence.strip()
        if not sentence:
            continue
        hits = pattern.findall(sentence)
        if hits:
            kept.append(sentence)
            found.update(h.lower() for h in hits)
    if found:
        header = "findings: " + ", ".join(sorted(found))
    else:
        header = "no abnormal findings detected"
    return "\n".join([header] + kept)


def _load_precomputed_summaries(path) -> dict[str, str]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"precomputed summary file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"precomputed summary file {path} must be a JSON object")
    return {str(k): str(v) for k, v in obj.items()}


def summarize(document: str, config: SummarizerConfig,
              episode_id: Optional[str] = None) -> str:
    """Produce the expert summary of a concatenated note document."""
    if document is None:
        raise DataError("summarize requires a document (may be empty)")
    if config.mode == "rule_based_stub":
        return _stub_summary(document, config.lexicon)
    if config.mode == "precomputed_file":
        if episode_id is None:
            raise DataError("precomputed_file summarizer needs an episode_id")
        summaries = _load_precomputed_summaries(config.precomputed_path)
        if episode_id not in summaries:
            raise DataError(
                f"no precomputed summary for episode {episode_id!r} "
                f"in {config.precomputed_path}"
            )
        return summaries[episode_id]
    # external_command
    with tempfile.NamedTemporaryFile("w", suffix=".txt", delete=False,
                                     encoding="utf-8") as handle:
        handle.write(document)
        input_path = handle.name
    try:
        argv = shlex.split(config.command_template.format(input_file=input_path))
        proc = subprocess.run(argv, capture_output=True, text=True,
                              timeout=config.timeout_s)
        if proc.returncode != 0:
            raise DataError(
                f"summarizer command exited {proc.returncode}: "
                f"{proc.stderr.strip()[:500]}"
            )
        return proc.stdout
    finally:
        Path(input_path).unlink(missing_ok=True)


@dataclass
class PrecomputedEmbeddings:
    """Externally supplied vectors for one episode."""

    notes: list[NoteEmbedding] = field(default_factory=list)
    summary: Optional[np.ndarray] = None


_CSV_FIXED_FIELDS = ("episode_id", "kind", "index", "chart_time")


def save_precomputed_embeddings(path, table: dict[str, PrecomputedEmbeddings],
                                dim: int) -> None:
    """Write the CSV interchange format (see load_precomputed_embeddings)."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(_CSV_FIXED_FIELDS) + [f"v{i}" for i in range(dim)])
        for episode_id in sorted(table):
            entry = table[episode_id]
            for idx, note in enumerate(entry.notes):
                writer.writerow([episode_id, "note", idx, repr(note.chart_time)]
                                + [repr(v) for v in note.vector.tolist()])
            if entry.summary is not None:
                writer.writerow([episode_id, "summary", 0, ""]
                                + [repr(v) for v in entry.summary.tolist()])


def load_precomputed_embeddings(path, dim: int) -> dict[str, PrecomputedEmbeddings]:
    """Load external embeddings from CSV.

    Header is ``episode_id,kind,index,chart_time,v0..v{dim-1}`` with kind in
    {note, summary}; summary rows use index 0 and an empty chart_time.  Note
    rows are returned sorted by index.
    """
    table: dict[str, PrecomputedEmbeddings] = {}
    seen: set[tuple[str, str, int]] = set()
    notes_raw: dict[str, list[tuple[int, NoteEmbedding]]] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        expected = list(_CSV_FIXED_FIELDS) + [f"v{i}" for i in range(dim)]
        if header != expected:
            raise DataError(
                f"unexpected header in {path}: want {len(expected)} columns "
                f"starting {expected[:5]}, got {header[:5] if header else header}"
            )
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 4 + dim:
                raise DataError(
                    f"{path}:{row_no}: expected {4 + dim} fields "
                    f"({dim}-dim vectors), got {len(row)}"
                )
            episode_id, kind, index_s, chart_time_s = row[:4]
            if kind not in ("note", "summary"):
                raise DataError(f"{path}:{row_no}: unknown kind {kind!r}")
            index = int(index_s)
            key = (episode_id, kind, index)
            if key in seen:
                raise DataError(f"{path}:{row_no}: duplicate {key}")
            seen.add(key)
            vector = np.array([float(v) for v in row[4:]], dtype=np.float64)
            if not np.all(np.isfinite(vector)):
                raise DataError(f"{path}:{row_no}: non-finite embedding values")
            entry = table.setdefault(episode_id, PrecomputedEmbeddings())
            if kind == "summary":
                entry.summary = vector
            else:
                chart_time = float(chart_time_s)
                if not np.isfinite(chart_time):
                    raise DataError(f"{path}:{row_no}: non-finite chart_time")
                notes_raw.setdefault(episode_id, []).append(
                    (index, NoteEmbedding(vector, chart_time)))
    for episode_id, items in notes_raw.items():
        table[episode_id].notes = [ne for _, ne in sorted(items, key=lambda t: t[0])]
    return table
