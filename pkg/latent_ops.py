#!/usr/bin/env python3
"""
Latent Space Operations

Prior sampling, spherical interpolation between measures, attribute
vectors from mean latent differences, and decoding a single latent code
over a chord progression into one multi-measure MIDI file.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from chord_inference import parse_chord_name, project_to_triads
from event_codec import (DRUM_PROGRAM, NUM_CHORD_CLASSES, STEPS_PER_MEASURE, Measure,
                         decode_measure)
from smf_io import DEFAULT_TEMPO_BPM, write_smf
from vae_core import DEFAULT_TEMPERATURE, MultitrackVAE, encode_measures, sample_decode

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEGENERATE_ANGLE = 1e-6
STRING_PROGRAMS = range(40, 52)


class LatentOpsError(ValueError):
    """Raised for invalid latent-space requests"""


@dataclass
class LatentConfig:
    """Defaults for latent manipulations"""
    temperature: float = DEFAULT_TEMPERATURE
    interp_steps: int = 8
    attribute_scale: float = 1.0
    attribute_threshold: Optional[float] = None
    tempo_bpm: float = DEFAULT_TEMPO_BPM


@dataclass
class AttributeVector:
    """Difference between the mean codes of measures with and without an attribute"""
    v: np.ndarray
    attribute_name: str
    n_with: int
    n_without: int

    def __post_init__(self):
        if self.n_with < 1 or self.n_without < 1:
            raise LatentOpsError("Attribute vectors need at least one example on each side")

    def to_dict(self) -> Dict:
        return {"attribute_name": self.attribute_name, "n_with": self.n_with,
                "n_without": self.n_without, "v": [float(x) for x in self.v]}

    @classmethod
    def from_dict(cls, record: Dict) -> "AttributeVector":
        return cls(v=np.asarray(record["v"], dtype=np.float64),
                   attribute_name=record["attribute_name"],
                   n_with=int(record["n_with"]), n_without=int(record["n_without"]))


@dataclass
class ChordProgression:
    """Two chord classes per measure"""
    chords: Tuple[int, ...]

    def __post_init__(self):
        self.chords = tuple(int(c) for c in self.chords)
        if len(self.chords) < 2 or len(self.chords) % 2:
            raise LatentOpsError(f"Progression needs an even number of chords, got {len(self.chords)}")
        if any(not 0 <= c < NUM_CHORD_CLASSES for c in self.chords):
            raise LatentOpsError(f"Chord class out of range in {self.chords}")

    @property
    def num_measures(self) -> int:
        return len(self.chords) // 2

    def pairs(self) -> List[Tuple[int, int]]:
        return [(self.chords[i], self.chords[i + 1]) for i in range(0, len(self.chords), 2)]

    @classmethod
    def parse(cls, text: str) -> "ChordProgression":
        """Parse a comma-separated list such as 'C,C,F,F,G,G,C,C'"""
        names = [n for n in text.split(",") if n.strip()]
        return cls(tuple(project_to_triads(parse_chord_name(n)) for n in names))


@dataclass
class ProgressionResult:
    measures: List[Measure] = field(default_factory=list)
    midi: bytes = b""

    @property
    def total_steps(self) -> int:
        return STEPS_PER_MEASURE * len(self.measures)


def sample_prior(latent_dim: int, generator: Optional[torch.Generator] = None,
                 num_samples: Optional[int] = None) -> torch.Tensor:
    """Draw z ~ N(0, I); a (num_samples, latent_dim) matrix when num_samples is given"""
    shape = (latent_dim,) if num_samples is None else (num_samples, latent_dim)
    return torch.randn(shape, generator=generator)


def slerp(z0, z1, alpha: float) -> np.ndarray:
    """Spherical interpolation of direction with linear interpolation of norm.

    Falls back to linear interpolation when the angle between the codes is
    within 1e-6 of 0 or pi.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    n0, n1 = np.linalg.norm(z0), np.linalg.norm(z1)
    if n0 == 0 or n1 == 0:
        raise LatentOpsError("slerp is undefined for a zero vector")
    u0, u1 = z0 / n0, z1 / n1
    omega = float(np.arccos(np.clip(np.dot(u0, u1), -1.0, 1.0)))
    if omega < DEGENERATE_ANGLE or abs(np.pi - omega) < DEGENERATE_ANGLE:
        return (1.0 - alpha) * z0 + alpha * z1
    direction = (np.sin((1.0 - alpha) * omega) * u0 + np.sin(alpha * omega) * u1) / np.sin(omega)
    return ((1.0 - alpha) * n0 + alpha * n1) * direction


def encode_mean(model: MultitrackVAE, measures: Sequence[Measure]) -> np.ndarray:
    """Posterior means as a float64 matrix, one row per measure"""
    return encode_measures(model, measures).mu.double().numpy()


def interpolate_measures(model: MultitrackVAE, x0: Measure, x1: Measure, n_steps: int = 8,
                         temperature: float = DEFAULT_TEMPERATURE,
                         generator: Optional[torch.Generator] = None) -> List[Measure]:
    """Decode n_steps codes evenly spaced on the arc between the codes of x0 and x1"""
    if n_steps < 2:
        raise LatentOpsError("Interpolation needs at least 2 steps")
    z0, z1 = encode_mean(model, [x0, x1])
    results = []
    for i in range(n_steps):
        alpha = i / (n_steps - 1)
        chords = x0.chords if alpha < 0.5 else x1.chords
        results.append(sample_decode(model, slerp(z0, z1, alpha), chords,
                                     temperature, generator).measure)
    return results


def pitch_range(measure: Measure) -> float:
    pitches = [n.pitch for t in decode_measure(measure) if not t.is_drum for n in t.notes]
    return float(max(pitches) - min(pitches)) if pitches else 0.0


def track_count(measure: Measure) -> float:
    return float(measure.num_present)


def strings_only(measure: Measure) -> float:
    programs = [p for p in measure.programs if p is not None and p != DRUM_PROGRAM]
    return float(bool(programs) and all(p in STRING_PROGRAMS for p in programs))


def note_density(measure: Measure) -> float:
    return float(sum(len(t.notes) for t in decode_measure(measure)))


ATTRIBUTE_PREDICATES: Dict[str, Callable[[Measure], float]] = {
    "pitch_range": pitch_range,
    "track_count": track_count,
    "strings_only": strings_only,
    "note_density": note_density,
}


def split_by_attribute(measures: Sequence[Measure], name: str,
                       threshold: Optional[float] = None) -> Tuple[List[Measure], List[Measure]]:
    """Measures scoring above threshold (default: the corpus median) versus the rest"""
    if name not in ATTRIBUTE_PREDICATES:
        raise LatentOpsError(f"Unknown attribute '{name}'; choose from {sorted(ATTRIBUTE_PREDICATES)}")
    scores = np.array([ATTRIBUTE_PREDICATES[name](m) for m in measures], dtype=np.float64)
    if threshold is None:
        threshold = float(np.median(scores)) if len(scores) else 0.0
        if name == "strings_only":
            threshold = 0.5
    with_set = [m for m, s in zip(measures, scores) if s > threshold]
    without_set = [m for m, s in zip(measures, scores) if s <= threshold]
    logger.info(f"Attribute {name} (threshold {threshold:g}): "
                f"{len(with_set)} with, {len(without_set)} without")
    return with_set, without_set


def attribute_vector(model: MultitrackVAE, with_set: Sequence[Measure],
                     without_set: Sequence[Measure], name: str = "attribute") -> AttributeVector:
    if not with_set or not without_set:
        raise LatentOpsError(f"Attribute '{name}' needs non-empty sets "
                             f"(got {len(with_set)} with, {len(without_set)} without)")
    mean_with = encode_mean(model, with_set).mean(axis=0)
    mean_without = encode_mean(model, without_set).mean(axis=0)
    return AttributeVector(v=mean_with - mean_without, attribute_name=name,
                           n_with=len(with_set), n_without=len(without_set))


def apply_attribute(model: MultitrackVAE, x: Measure, vector: AttributeVector, scale: float = 1.0,
                    temperature: float = DEFAULT_TEMPERATURE,
                    generator: Optional[torch.Generator] = None) -> Measure:
    """Decode the code of x translated by scale times the attribute vector"""
    z = encode_mean(model, [x])[0] + scale * vector.v
    return sample_decode(model, z, x.chords, temperature, generator).measure


def decode_progression(model: MultitrackVAE, z, progression: ChordProgression,
                       temperature: float = DEFAULT_TEMPERATURE,
                       generator: Optional[torch.Generator] = None, z_end=None,
                       tempo_bpm: float = DEFAULT_TEMPO_BPM) -> ProgressionResult:
    """One measure per chord pair from a single code (or an arc towards z_end)"""
    if not isinstance(progression, ChordProgression):
        progression = ChordProgression(tuple(progression))
    z = np.asarray(z.detach() if isinstance(z, torch.Tensor) else z, dtype=np.float64)
    if z_end is not None:
        z_end = np.asarray(z_end.detach() if isinstance(z_end, torch.Tensor) else z_end,
                           dtype=np.float64)

    pairs = progression.pairs()
    measures = []
    for i, pair in enumerate(pairs):
        code = z
        if z_end is not None and len(pairs) > 1:
            code = slerp(z, z_end, i / (len(pairs) - 1))
        measures.append(sample_decode(model, code, pair, temperature, generator).measure)
    midi = write_smf(measures, tempo_bpm=tempo_bpm)
    logger.info(f"Decoded {len(measures)} measures over progression {progression.chords}")
    return ProgressionResult(measures=measures, midi=midi)


def main():
    """Example usage of latent space operations"""
    logger.info("Latent Space Operations")
    logger.info("Key features:")
    logger.info("- Prior sampling and spherical interpolation")
    logger.info("- Mean-difference attribute vectors with built-in predicates")
    logger.info("- Decoding one latent code over a chord progression")


if __name__ == "__main__":
    main()
