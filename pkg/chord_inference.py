#!/usr/bin/env python3
"""
Heuristic Key/Chord Inference for Measure Conditioning

This module infers the maximum-likelihood (key, chord) sequence at two frames
per measure with the Viterbi algorithm over a small hand-specified HMM:

    p(h, y) = p(h0) p(y0 | h0) prod_t p(h_t | h_{t-1}) p(y_t | h_t)

with chord-change probability gamma, key-change probability rho, out-of-key
chord tone probability psi and observation concentration kappa. The 97 chord
classes (8 qualities x 12 roots + no-chord) are projected to the 49-class
triad vocabulary used for model conditioning.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from event_codec import DecodedTrack, NUM_CHORD_CLASSES, STEPS_PER_MEASURE

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

NUM_KEYS = 12
NO_CHORD = 0
MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)

# Interval sets of the 8 inferred chord qualities; the first 4 are the
# conditioning triads, in the same order as the 49-class vocabulary.
CHORD_QUALITIES: Tuple[Tuple[str, Tuple[int, ...]], ...] = (
    ("", (0, 4, 7)),          # major
    ("m", (0, 3, 7)),         # minor
    ("+", (0, 4, 8)),         # augmented
    ("o", (0, 3, 6)),         # diminished
    ("7", (0, 4, 7, 10)),     # dominant seventh
    ("maj7", (0, 4, 7, 11)),  # major seventh
    ("m7", (0, 3, 7, 10)),    # minor seventh
    ("m7b5", (0, 3, 6, 10)),  # half-diminished
)
NUM_CHORDS = 1 + 12 * len(CHORD_QUALITIES)
NUM_STATES = NUM_KEYS * NUM_CHORDS
# Seventh qualities collapse onto the triad they contain.
TRIAD_PROJECTION = (0, 1, 2, 3, 0, 0, 1, 3)

PITCH_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")
FLAT_NAMES = {"Db": 1, "Eb": 3, "Gb": 6, "Ab": 8, "Bb": 10, "Cb": 11, "Fb": 4, "E#": 5, "B#": 0}
NO_CHORD_NAME = "N.C."


class ChordInferenceError(ValueError):
    """Raised on invalid chord names or inference inputs"""


@dataclass(frozen=True)
class ChordInferenceParams:
    """Parameters of the heuristic harmony model"""
    gamma: float = 0.5
    rho: float = 0.001
    psi: float = 0.01
    kappa: float = 100.0
    max_measures: int = 500
    frames_per_measure: int = 2

    def __post_init__(self):
        for name in ("gamma", "rho", "psi"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ChordInferenceError(f"{name} must lie in (0, 1), got {value}")
        if self.kappa <= 0:
            raise ChordInferenceError(f"kappa must be positive, got {self.kappa}")
        if STEPS_PER_MEASURE % self.frames_per_measure:
            raise ChordInferenceError("frames_per_measure must divide the measure length")


@dataclass(frozen=True)
class HarmonyState:
    """A (key, chord) pair; key is a major-scale tonic, chord one of 97 classes"""
    key: int
    chord: int

    @property
    def index(self) -> int:
        return self.key * NUM_CHORDS + self.chord

    @classmethod
    def from_index(cls, index: int) -> "HarmonyState":
        return cls(key=index // NUM_CHORDS, chord=index % NUM_CHORDS)


@dataclass
class ChordInferenceResult:
    """Per-measure conditioning chords plus key diagnostics"""
    chords: List[Tuple[int, ...]] = field(default_factory=list)
    keys: List[Tuple[int, ...]] = field(default_factory=list)
    states: List[HarmonyState] = field(default_factory=list)
    discarded: bool = False
    reason: Optional[str] = None


def chord_index(quality: int, root: int) -> int:
    """97-class index of a chord quality (0-7) at a root pitch class"""
    return 1 + quality * 12 + root % 12


def chord_tones(chord: int) -> Tuple[int, ...]:
    """Pitch classes of a 97-class chord (empty for no-chord)"""
    if chord == NO_CHORD:
        return ()
    quality, root = divmod(chord - 1, 12)
    return tuple(sorted((root + i) % 12 for i in CHORD_QUALITIES[quality][1]))


def chord_template(chord: int) -> np.ndarray:
    """Unit-normalized, uniformly weighted chord pitch-class vector c(h)"""
    vector = np.zeros(12)
    tones = chord_tones(chord)
    if not tones:
        vector[:] = 1.0 / math.sqrt(12)
        return vector
    vector[list(tones)] = 1.0 / math.sqrt(len(tones))
    return vector


def key_membership_prob(state: HarmonyState, psi: float = 0.01) -> float:
    """Binomial probability f(h) of the chord's out-of-key tone count"""
    tones = chord_tones(state.chord)
    n = len(tones)
    scale = {(state.key + i) % 12 for i in MAJOR_SCALE}
    k = sum(1 for tone in tones if tone not in scale)
    return math.comb(n, k) * psi ** k * (1.0 - psi) ** (n - k)


def project_to_triads(chord: int) -> int:
    """Project a 97-class chord onto the 49-class triad vocabulary"""
    if chord == NO_CHORD:
        return NO_CHORD
    quality, root = divmod(chord - 1, 12)
    return chord_index(TRIAD_PROJECTION[quality], root)


def transpose_chord(chord: int, semitones: int) -> int:
    """Rotate the root of a chord class by semitones (mod 12)"""
    if chord == NO_CHORD:
        return NO_CHORD
    quality, root = divmod(chord - 1, 12)
    return chord_index(quality, root + semitones)


def chord_name(chord: int) -> str:
    """Name a chord class, e.g. 'C', 'Cm', 'C+', 'Co', 'G7', 'N.C.'"""
    if chord == NO_CHORD:
        return NO_CHORD_NAME
    quality, root = divmod(chord - 1, 12)
    return PITCH_NAMES[root] + CHORD_QUALITIES[quality][0]


def parse_chord_name(name: str) -> int:
    """Parse a chord name into its class index (inverse of chord_name)"""
    name = name.strip()
    if name.upper() in (NO_CHORD_NAME, "N.C", "NC", "N"):
        return NO_CHORD
    if len(name) >= 2 and name[:2] in FLAT_NAMES:
        root, suffix = FLAT_NAMES[name[:2]], name[2:]
    elif len(name) >= 2 and name[:2] in PITCH_NAMES:
        root, suffix = PITCH_NAMES.index(name[:2]), name[2:]
    elif name[:1] in PITCH_NAMES:
        root, suffix = PITCH_NAMES.index(name[:1]), name[1:]
    else:
        raise ChordInferenceError(f"Unknown chord root in '{name}'")
    aliases = {"maj": "", "M": "", "min": "m", "aug": "+", "dim": "o", "ø": "m7b5"}
    suffix = aliases.get(suffix, suffix)
    for quality, (label, _) in enumerate(CHORD_QUALITIES):
        if suffix == label:
            return chord_index(quality, root)
    raise ChordInferenceError(f"Unknown chord quality in '{name}'")


def key_name(key: int) -> str:
    return PITCH_NAMES[key % 12]


def pitch_class_frames(tracks: Iterable[DecodedTrack],
                       frames_per_measure: int = 2) -> np.ndarray:
    """Duration-weighted, L2-normalized pitch-class vectors, one per frame.

    Drum tracks are excluded; a silent frame yields the zero vector.
    """
    frame_len = STEPS_PER_MEASURE // frames_per_measure
    frames = np.zeros((frames_per_measure, 12))
    for track in tracks:
        if track.is_drum:
            continue
        for note in track.notes:
            for f in range(frames_per_measure):
                start, end = f * frame_len, (f + 1) * frame_len
                overlap = min(note.offset, end) - max(note.onset, start)
                if overlap > 0:
                    frames[f, note.pitch % 12] += overlap
    norms = np.linalg.norm(frames, axis=1, keepdims=True)
    return np.divide(frames, norms, out=np.zeros_like(frames), where=norms > 0)


@lru_cache(maxsize=8)
def _membership_table(psi: float) -> np.ndarray:
    """f(h) for every state, shape (12, 97)"""
    return np.array([[key_membership_prob(HarmonyState(k, c), psi)
                      for c in range(NUM_CHORDS)] for k in range(NUM_KEYS)])


@lru_cache(maxsize=1)
def _template_matrix() -> np.ndarray:
    """c(h) for every chord, shape (97, 12)"""
    return np.stack([chord_template(c) for c in range(NUM_CHORDS)])


def transition_logprob(prev: HarmonyState, nxt: HarmonyState,
                       params: ChordInferenceParams = ChordInferenceParams()) -> float:
    """Natural-log transition probability between two harmony states.

    The chord-change branch is normalized over the other chords of the same
    key; the key-change branch uses f(h_t) directly.
    """
    f = _membership_table(params.psi)
    if nxt.key != prev.key:
        return math.log(params.rho / (NUM_KEYS - 1) * f[nxt.key, nxt.chord])
    if nxt.chord == prev.chord:
        return math.log((1.0 - params.gamma) * (1.0 - params.rho))
    f_prev = f[prev.key, prev.chord]
    g = f[prev.key] + f_prev / 48.0
    normalizer = g.sum() - g[prev.chord]
    return math.log(params.gamma * (1.0 - params.rho) * g[nxt.chord] / normalizer)


@lru_cache(maxsize=4)
def log_transition_matrix(params: ChordInferenceParams) -> np.ndarray:
    """Full (1164, 1164) log transition matrix, row = previous state"""
    f = _membership_table(params.psi)
    flat_f = f.reshape(-1)
    trans = np.empty((NUM_STATES, NUM_STATES))
    # key change: rho / 11 * f(h_t) for every column outside the previous key
    trans[:] = params.rho / (NUM_KEYS - 1) * flat_f[None, :]
    for key in range(NUM_KEYS):
        rows = slice(key * NUM_CHORDS, (key + 1) * NUM_CHORDS)
        g = f[key][None, :] + f[key][:, None] / 48.0
        np.fill_diagonal(g, 0.0)
        block = params.gamma * (1.0 - params.rho) * g / g.sum(axis=1, keepdims=True)
        np.fill_diagonal(block, (1.0 - params.gamma) * (1.0 - params.rho))
        trans[rows, rows] = block
    log_trans = np.log(trans)
    log_trans.setflags(write=False)
    return log_trans


@lru_cache(maxsize=4)
def log_initial_distribution(params: ChordInferenceParams) -> np.ndarray:
    """Uniform over keys, f-proportional over chords within a key"""
    f = _membership_table(params.psi)
    init = np.log((f / f.sum(axis=1, keepdims=True) / NUM_KEYS).reshape(-1))
    init.setflags(write=False)
    return init


def observation_logscore(frame: np.ndarray, state: HarmonyState,
                         params: ChordInferenceParams = ChordInferenceParams()) -> float:
    """kappa * (y . c(h)), used directly as the log observation score"""
    return float(params.kappa * np.dot(frame, chord_template(state.chord)))


def observation_matrix(frames: np.ndarray, params: ChordInferenceParams) -> np.ndarray:
    """Log observation scores, shape (T, 1164)"""
    per_chord = params.kappa * np.asarray(frames, dtype=float) @ _template_matrix().T
    return np.tile(per_chord, (1, NUM_KEYS))


def viterbi_path(log_init: np.ndarray, log_trans: np.ndarray,
                 log_obs: np.ndarray) -> Tuple[List[int], float]:
    """Generic log-domain Viterbi.

    Ties resolve to the lowest state index, first at the final step and then
    for each predecessor while backtracking.
    """
    num_frames = log_obs.shape[0]
    if num_frames == 0:
        return [], 0.0
    delta = log_init + log_obs[0]
    backpointers = np.zeros((num_frames, len(log_init)), dtype=np.int64)
    for t in range(1, num_frames):
        scores = delta[:, None] + log_trans
        backpointers[t] = np.argmax(scores, axis=0)
        delta = scores[backpointers[t], np.arange(scores.shape[1])] + log_obs[t]
    path = [int(np.argmax(delta))]
    best = float(delta[path[0]])
    for t in range(num_frames - 1, 0, -1):
        path.append(int(backpointers[t, path[-1]]))
    path.reverse()
    return path, best


def viterbi(frames: Sequence[np.ndarray],
            params: ChordInferenceParams = ChordInferenceParams()) -> List[HarmonyState]:
    """Most likely harmony path for a sequence of pitch-class frames"""
    frames = np.asarray(frames, dtype=float).reshape(-1, 12)
    if len(frames) == 0:
        return []
    if len(frames) > params.max_measures * params.frames_per_measure:
        raise ChordInferenceError(f"{len(frames)} frames exceeds the {params.max_measures}-measure limit")
    path, _ = viterbi_path(log_initial_distribution(params),
                           log_transition_matrix(params),
                           observation_matrix(frames, params))
    return [HarmonyState.from_index(i) for i in path]


def infer_chords(measures: Sequence[Sequence[DecodedTrack]],
                 params: ChordInferenceParams = ChordInferenceParams()) -> ChordInferenceResult:
    """Infer conditioning chords (49-class) for every measure of a segment"""
    if len(measures) > params.max_measures:
        logger.info(f"Discarding segment of {len(measures)} measures (limit {params.max_measures})")
        return ChordInferenceResult(discarded=True,
                                    reason=f"segment longer than {params.max_measures} measures")
    if not measures:
        return ChordInferenceResult()

    frames = np.concatenate([pitch_class_frames(m, params.frames_per_measure) for m in measures])
    states = viterbi(frames, params)
    per = params.frames_per_measure
    chords = [tuple(project_to_triads(s.chord) for s in states[i:i + per])
              for i in range(0, len(states), per)]
    keys = [tuple(s.key for s in states[i:i + per]) for i in range(0, len(states), per)]
    assert all(0 <= c < NUM_CHORD_CLASSES for pair in chords for c in pair)
    return ChordInferenceResult(chords=chords, keys=keys, states=states)


def main():
    """Example usage of the chord inference model"""
    logger.info("Heuristic chord inference")
    logger.info(f"State space: {NUM_KEYS} keys x {NUM_CHORDS} chords = {NUM_STATES} states")
    logger.info(f"Chord vocabulary: {[chord_name(c) for c in range(1, 13)]} ...")


if __name__ == "__main__":
    main()
