#!/usr/bin/env python3
"""
Hierarchical Recurrent VAE for Multitrack Measures

A two-level bidirectional LSTM encoder maps the eight token sequences of a
measure to a diagonal Gaussian posterior. A conductor LSTM, run for eight
steps with a null input, turns the latent code into one embedding per track
slot, and a single shared LSTM decoder produces the event tokens of every
track. Both encoder and decoder may be conditioned on the two chords of the
measure. Training minimizes reconstruction cross entropy plus a free-bits
KL term with Adam and an exponentially decaying learning rate.
"""

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence
from tqdm import tqdm

from corpus_pipeline import transpose_augment
from event_codec import (CHORDS_PER_MEASURE, END_TRACK, MAX_TIME_SHIFT, MAX_TRACK_EVENTS,
                         NUM_CHORD_CLASSES, NUM_TRACKS, STEPS_PER_MEASURE, TIME_SHIFT_OFFSET,
                         VOCAB_SIZE, Measure, MeasureValidationError, decode_track,
                         encode_measure, fit_track, shift_steps)

# Configure logging
logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMVAECK\x00"
CHECKPOINT_VERSION = 1
HALF_MEASURE = STEPS_PER_MEASURE // CHORDS_PER_MEASURE
DEFAULT_TEMPERATURE = 0.2


class CheckpointError(ValueError):
    """Raised for truncated, incompatible or malformed checkpoints"""


class NonFiniteLossError(RuntimeError):
    """Raised before an update when the loss is NaN or infinite"""

    def __init__(self, step: int, last_checkpoint: Optional[str] = None):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(f"Non-finite loss at step {step}; "
                         f"last good checkpoint: {last_checkpoint or 'none'}")


@dataclass
class ModelConfig:
    """Model dimensions; defaults are desk scale"""
    vocab_size: int = VOCAB_SIZE
    chord_dim: int = NUM_CHORD_CLASSES
    num_tracks: int = NUM_TRACKS
    max_track_len: int = MAX_TRACK_EVENTS
    latent_dim: int = 16
    enc_hidden: int = 64
    dec_hidden: int = 64
    dec_layers: int = 1
    free_bits: float = 64.0
    conditioned: bool = True
    seed: int = 0

    def __post_init__(self):
        dims = (self.vocab_size, self.chord_dim, self.num_tracks, self.latent_dim,
                self.enc_hidden, self.dec_hidden, self.dec_layers)
        if any(d <= 0 for d in dims):
            raise ValueError(f"Model dimensions must be positive: {dims}")
        if self.max_track_len < 1:
            raise ValueError("max_track_len must be at least 1")
        if self.free_bits < 0:
            raise ValueError("free_bits must be non-negative")

    @property
    def input_chord_dim(self) -> int:
        return self.chord_dim if self.conditioned else 0

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        values = dict(latent_dim=512, enc_hidden=1024, dec_hidden=512, dec_layers=3)
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainConfig:
    """Optimizer and schedule settings"""
    batch_size: int = 8
    lr_start: float = 1e-3
    lr_floor: float = 1e-5
    lr_decay: float = 0.9999
    max_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 10
    checkpoint_every: int = 100
    augment: bool = True
    max_transpose: int = 3
    num_threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_floor <= self.lr_start:
            raise ValueError("Require 0 < lr_floor <= lr_start")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ValueError("batch_size must be positive and max_steps non-negative")


@dataclass
class PosteriorParams:
    """Diagonal Gaussian posterior; sigma is a softplus output"""
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class MeasureBatch:
    """Padded tensors for a batch of measures"""
    tokens: torch.Tensor        # (B, T, L) token indices, padding 0
    lengths: torch.Tensor       # (B, T) true lengths, at least 1
    chords: torch.Tensor        # (B, 2) chord classes
    step_chords: torch.Tensor   # (B, T, L) chord class active before each token

    @property
    def batch_size(self) -> int:
        return self.tokens.shape[0]

    @property
    def mask(self) -> torch.Tensor:
        steps = torch.arange(self.tokens.shape[-1])
        return steps.view(1, 1, -1) < self.lengths.unsqueeze(-1)


@dataclass
class LossTerms:
    """Per-example loss components, in nats"""
    recon: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    @property
    def mean_total(self) -> torch.Tensor:
        return self.total.mean()


@dataclass
class SampledMeasure:
    """A decoded measure plus the raw token streams it was canonicalized from"""
    measure: Measure
    raw_tracks: List[List[int]] = field(default_factory=list)


def step_chord_indices(tokens: torch.Tensor, lengths: torch.Tensor,
                       chords: torch.Tensor) -> torch.Tensor:
    """Chord class in force before each token, from the cumulative time shift of earlier tokens"""
    is_shift = (tokens >= TIME_SHIFT_OFFSET) & (tokens < TIME_SHIFT_OFFSET + MAX_TIME_SHIFT)
    steps = torch.arange(tokens.shape[-1]).view(1, 1, -1)
    shift = torch.where(is_shift & (steps < lengths.unsqueeze(-1)),
                        tokens - TIME_SHIFT_OFFSET + 1, torch.zeros_like(tokens))
    time_before = torch.cumsum(shift, dim=-1) - shift
    half = torch.clamp(time_before // HALF_MEASURE, max=CHORDS_PER_MEASURE - 1)
    per_track = chords.unsqueeze(1).expand(-1, tokens.shape[1], -1)
    return torch.gather(per_track, 2, half)


def collate_measures(measures: Sequence[Measure], config: ModelConfig,
                     rng: Optional[np.random.Generator] = None, augment: bool = False,
                     max_transpose: int = 3) -> MeasureBatch:
    """Pad measures into a MeasureBatch, transposing each one when augment is set"""
    if augment:
        rng = rng if rng is not None else np.random.default_rng()
        measures = [transpose_augment(m, rng=rng, max_transpose=max_transpose) for m in measures]
    for measure in measures:
        if len(measure.tracks) != config.num_tracks:
            raise MeasureValidationError(f"Expected {config.num_tracks} track slots")
        longest = max(len(t) for t in measure.tracks)
        if longest > config.max_track_len:
            raise MeasureValidationError(
                f"Track of {longest} tokens exceeds max_track_len {config.max_track_len}")

    width = max(len(t) for m in measures for t in m.tracks)
    tokens = torch.zeros((len(measures), config.num_tracks, width), dtype=torch.long)
    lengths = torch.zeros((len(measures), config.num_tracks), dtype=torch.long)
    for b, measure in enumerate(measures):
        for k, track in enumerate(measure.tracks):
            tokens[b, k, :len(track)] = torch.tensor(track, dtype=torch.long)
            lengths[b, k] = len(track)
    chords = torch.tensor([list(m.chords) for m in measures], dtype=torch.long)
    return MeasureBatch(tokens=tokens, lengths=lengths, chords=chords,
                        step_chords=step_chord_indices(tokens, lengths, chords))


class MultitrackVAE(nn.Module):
    """Hierarchical LSTM encoder, conductor and shared track decoder"""

    def __init__(self, config: ModelConfig):
        super(MultitrackVAE, self).__init__()
        self.config = config
        in_dim = config.vocab_size + config.input_chord_dim
        H, D, layers = config.enc_hidden, config.dec_hidden, config.dec_layers

        # Encoder: events within a track, then tracks within the measure
        self.track_encoder = nn.LSTM(in_dim, H, batch_first=True, bidirectional=True)
        self.measure_encoder = nn.LSTM(2 * H, H, batch_first=True, bidirectional=True)
        self.mu_head = nn.Linear(2 * H, config.latent_dim)
        self.sigma_head = nn.Linear(2 * H, config.latent_dim)

        # Conductor
        self.conductor_init = nn.Linear(config.latent_dim, 2 * layers * D)
        self.conductor = nn.LSTM(1, D, num_layers=layers, batch_first=True)

        # Track decoder, shared by all slots
        self.decoder_init = nn.Linear(D, 2 * layers * D)
        self.track_decoder = nn.LSTM(config.vocab_size + D + config.input_chord_dim, D,
                                     num_layers=layers, batch_first=True)
        self.output_projection = nn.Linear(D, config.vocab_size)

    @property
    def dtype(self) -> torch.dtype:
        return self.mu_head.weight.dtype

    def _one_hot(self, indices: torch.Tensor, depth: int) -> torch.Tensor:
        return F.one_hot(indices, depth).to(self.dtype)

    def _initial_state(self, projection: nn.Linear,
                       source: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        layers, D = self.config.dec_layers, self.config.dec_hidden
        state = torch.tanh(projection(source)).view(-1, 2, layers, D)
        h = state[:, 0].permute(1, 0, 2).contiguous()
        c = state[:, 1].permute(1, 0, 2).contiguous()
        return h, c

    def encode(self, batch: MeasureBatch) -> PosteriorParams:
        B, T, L = batch.tokens.shape
        inputs = self._one_hot(batch.tokens, self.config.vocab_size)
        if self.config.conditioned:
            inputs = torch.cat([inputs, self._one_hot(batch.step_chords, self.config.chord_dim)], -1)
        packed = pack_padded_sequence(inputs.view(B * T, L, -1), batch.lengths.view(-1).cpu(),
                                      batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.track_encoder(packed)
        track_embeddings = torch.cat([h_n[0], h_n[1]], dim=-1).view(B, T, -1)

        _, (h_m, _) = self.measure_encoder(track_embeddings)
        summary = torch.cat([h_m[0], h_m[1]], dim=-1)
        return PosteriorParams(mu=self.mu_head(summary),
                               sigma=F.softplus(self.sigma_head(summary)))

    def conduct(self, z: torch.Tensor) -> torch.Tensor:
        """Track embeddings (B, T, dec_hidden) from latent codes (B, latent_dim)"""
        h0, c0 = self._initial_state(self.conductor_init, z)
        null_input = torch.zeros((z.shape[0], self.config.num_tracks, 1), dtype=self.dtype)
        embeddings, _ = self.conductor(null_input, (h0, c0))
        return embeddings

    def decoder_inputs(self, embeddings: torch.Tensor, batch: MeasureBatch) -> torch.Tensor:
        """Previous event one-hot, then track embedding, then the active chord"""
        B, T, L = batch.tokens.shape
        events = self._one_hot(batch.tokens, self.config.vocab_size)
        previous = torch.cat([torch.zeros_like(events[:, :, :1]), events[:, :, :-1]], dim=2)
        parts = [previous, embeddings.unsqueeze(2).expand(-1, -1, L, -1)]
        if self.config.conditioned:
            parts.append(self._one_hot(batch.step_chords, self.config.chord_dim))
        return torch.cat(parts, dim=-1)

    def decode_teacher_forced(self, z: torch.Tensor, batch: MeasureBatch) -> torch.Tensor:
        """Logits (B, T, L, vocab) with ground-truth previous events as inputs"""
        B, T, L = batch.tokens.shape
        embeddings = self.conduct(z)
        inputs = self.decoder_inputs(embeddings, batch).view(B * T, L, -1)
        state = self._initial_state(self.decoder_init, embeddings.reshape(B * T, -1))
        outputs, _ = self.track_decoder(inputs, state)
        return self.output_projection(outputs).view(B, T, L, -1)

    def forward(self, batch: MeasureBatch, eps: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None
                ) -> Tuple[torch.Tensor, PosteriorParams]:
        posterior = self.encode(batch)
        z = reparameterize(posterior, generator=generator, eps=eps)
        return self.decode_teacher_forced(z, batch), posterior

    @torch.no_grad()
    def decode_track_tokens(self, embedding: torch.Tensor, chords: Sequence[int],
                            temperature: float = DEFAULT_TEMPERATURE,
                            generator: Optional[torch.Generator] = None) -> List[int]:
        """Sample one track from its embedding until EndTrack or the length cap"""
        cfg = self.config
        state = self._initial_state(self.decoder_init, embedding.view(1, -1))
        previous = torch.zeros((1, 1, cfg.vocab_size), dtype=self.dtype)
        time = 0
        tokens: List[int] = []
        for _ in range(cfg.max_track_len - 1):
            parts = [previous, embedding.view(1, 1, -1)]
            if cfg.conditioned:
                chord = int(chords[min(time // HALF_MEASURE, CHORDS_PER_MEASURE - 1)])
                parts.append(self._one_hot(torch.tensor([[chord]]), cfg.chord_dim))
            output, state = self.track_decoder(torch.cat(parts, dim=-1), state)
            logits = self.output_projection(output).view(-1)
            token = sample_token(logits, temperature, generator)
            tokens.append(token)
            if token == END_TRACK:
                return tokens
            time += shift_steps(token)
            previous = self._one_hot(torch.tensor([[token]]), cfg.vocab_size)
        tokens.append(END_TRACK)
        return tokens


def build_model(config: ModelConfig) -> MultitrackVAE:
    """Construct a model with parameters drawn from config.seed"""
    torch.manual_seed(config.seed)
    return MultitrackVAE(config)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Tensor shapes a model with this config would have, without allocating it"""
    with torch.device("meta"):
        model = MultitrackVAE(config)
    return {name: tuple(t.shape) for name, t in model.state_dict().items()}


def reparameterize(posterior: PosteriorParams, generator: Optional[torch.Generator] = None,
                   eps: Optional[torch.Tensor] = None) -> torch.Tensor:
    """z = mu + sigma * eps with eps drawn from a standard normal"""
    if eps is None:
        eps = torch.randn(posterior.mu.shape, generator=generator, dtype=posterior.mu.dtype)
    return posterior.mu + posterior.sigma * eps


def token_distribution(logits: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax of logits / temperature; temperature 0 puts all mass on the argmax"""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    if temperature == 0:
        return F.one_hot(torch.argmax(logits, dim=-1), logits.shape[-1]).to(logits.dtype)
    return F.softmax(logits / temperature, dim=-1)


def sample_token(logits: torch.Tensor, temperature: float,
                 generator: Optional[torch.Generator] = None) -> int:
    if temperature == 0:
        return int(torch.argmax(logits))
    probs = token_distribution(logits, temperature)
    return int(torch.multinomial(probs, 1, generator=generator))


def kl_divergence(posterior: PosteriorParams) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) per example, summed over latent dims"""
    mu, sigma = posterior.mu, posterior.sigma
    return 0.5 * torch.sum(mu ** 2 + sigma ** 2 - 1.0 - 2.0 * torch.log(sigma), dim=-1)


def loss_terms(logits: torch.Tensor, batch: MeasureBatch, posterior: PosteriorParams,
               free_bits: float) -> LossTerms:
    """Summed cross entropy plus the KL in excess of the free-bits budget"""
    B, T, L, V = logits.shape
    ce = F.cross_entropy(logits.reshape(-1, V), batch.tokens.reshape(-1), reduction="none")
    recon = (ce.view(B, T, L) * batch.mask.to(ce.dtype)).sum(dim=(1, 2))
    kl = kl_divergence(posterior)
    excess = kl - free_bits * math.log(2.0)
    # zero subgradient at the hinge point
    penalty = torch.where(excess > 0, excess, torch.zeros_like(excess))
    return LossTerms(recon=recon, kl=kl, total=recon + penalty)


def compute_loss(model: MultitrackVAE, batch: MeasureBatch, eps: Optional[torch.Tensor] = None,
                 generator: Optional[torch.Generator] = None) -> LossTerms:
    logits, posterior = model(batch, eps=eps, generator=generator)
    return loss_terms(logits, batch, posterior, model.config.free_bits)


def gradients(model: MultitrackVAE, batch: MeasureBatch, eps: Optional[torch.Tensor] = None,
              generator: Optional[torch.Generator] = None, step: int = 0) -> Dict[str, torch.Tensor]:
    """Gradient of the batch-mean total loss for every named parameter"""
    model.zero_grad(set_to_none=True)
    terms = compute_loss(model, batch, eps=eps, generator=generator)
    total = terms.mean_total
    if not torch.isfinite(total):
        raise NonFiniteLossError(step)
    total.backward()
    return {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in model.named_parameters()}


def learning_rate(step: int, config: TrainConfig) -> float:
    return max(config.lr_floor, config.lr_start * config.lr_decay ** step)


def floor_crossing_step(config: TrainConfig) -> int:
    """Smallest step at which the decayed rate reaches lr_floor"""
    step = max(0, math.ceil(math.log(config.lr_floor / config.lr_start) / math.log(config.lr_decay)))
    while step > 0 and config.lr_start * config.lr_decay ** (step - 1) <= config.lr_floor:
        step -= 1
    while config.lr_start * config.lr_decay ** step > config.lr_floor:
        step += 1
    return step


def build_optimizer(model: MultitrackVAE, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr_start,
                            betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_eps)


def train_step(model: MultitrackVAE, optimizer: torch.optim.Optimizer, batch: MeasureBatch,
               step: int, config: TrainConfig, generator: Optional[torch.Generator] = None,
               last_checkpoint: Optional[str] = None) -> Dict[str, float]:
    """One Adam update at the scheduled learning rate for `step`"""
    model.train()
    lr = learning_rate(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr

    optimizer.zero_grad(set_to_none=True)
    terms = compute_loss(model, batch, generator=generator)
    total = terms.mean_total
    if not torch.isfinite(total):
        raise NonFiniteLossError(step, last_checkpoint)
    total.backward()
    optimizer.step()

    kl = float(terms.kl.mean())
    return {"step": step, "recon": float(terms.recon.mean()), "kl": kl,
            "kl_bits": kl / math.log(2.0), "total": float(total), "lr": lr,
            "threads": torch.get_num_threads()}


def encode_measures(model: MultitrackVAE, measures: Sequence[Measure]) -> PosteriorParams:
    """Posterior parameters for each measure, without gradients"""
    model.eval()
    with torch.no_grad():
        return model.encode(collate_measures(measures, model.config))


def _canonical_measure(raw_tracks: Sequence[Sequence[int]], chords: Sequence[int],
                       max_len: int) -> Measure:
    tracks = []
    for raw in raw_tracks:
        notes, program = decode_track(raw)
        if program is None:
            continue
        kept, _ = decode_track(fit_track(notes, program, max_len))
        tracks.append((program, kept))
    return encode_measure(tracks, chords)


def sample_decode(model: MultitrackVAE, z: Any, chords: Sequence[int] = (0, 0),
                  temperature: float = DEFAULT_TEMPERATURE,
                  generator: Optional[torch.Generator] = None) -> SampledMeasure:
    """Decode a latent code into a valid measure, track slot by track slot"""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    model.eval()
    z = z.detach() if isinstance(z, torch.Tensor) else torch.as_tensor(np.asarray(z))
    z = z.to(model.dtype).view(1, -1)
    with torch.no_grad():
        embeddings = model.conduct(z)[0]
    raw = [model.decode_track_tokens(embeddings[k], chords, temperature, generator)
           for k in range(model.config.num_tracks)]
    return SampledMeasure(measure=_canonical_measure(raw, chords, model.config.max_track_len),
                          raw_tracks=raw)


@dataclass
class Checkpoint:
    """Deserialized checkpoint contents"""
    model_config: ModelConfig
    step: int
    tensors: Dict[str, np.ndarray]
    train_config: Optional[TrainConfig] = None
    adam_steps: Dict[str, float] = field(default_factory=dict)

    def model_tensors(self) -> Dict[str, np.ndarray]:
        return {k[len("model/"):]: v for k, v in self.tensors.items() if k.startswith("model/")}


def save_checkpoint(model: MultitrackVAE, optimizer: Optional[torch.optim.Optimizer] = None,
                    step: int = 0, train_config: Optional[TrainConfig] = None) -> bytes:
    """Serialize parameters and Adam moments as a JSON manifest plus float32 blob"""
    named: List[Tuple[str, torch.Tensor]] = [
        (f"model/{k}", v) for k, v in model.state_dict().items()]
    adam_steps: Dict[str, float] = {}
    if optimizer is not None:
        param_names = {id(p): n for n, p in model.named_parameters()}
        for param, state in optimizer.state.items():
            name = param_names[id(param)]
            if "exp_avg" not in state:
                continue
            named.append((f"adam/{name}/exp_avg", state["exp_avg"]))
            named.append((f"adam/{name}/exp_avg_sq", state["exp_avg_sq"]))
            adam_steps[name] = float(state["step"])

    blob = io.BytesIO()
    entries = []
    for name, tensor in named:
        data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(tensor.shape),
                        "offset": blob.tell(), "nbytes": len(data)})
        blob.write(data)

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "train_config": asdict(train_config) if train_config else None,
        "step": int(step),
        "adam_steps": adam_steps,
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(header)) + header + blob.getvalue()


def load_checkpoint(data: bytes, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """Parse checkpoint bytes; nothing is returned unless every tensor is intact"""
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(data) < prefix or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("Not a checkpoint file or header truncated")
    (header_len,) = struct.unpack("<Q", data[len(CHECKPOINT_MAGIC):prefix])
    if len(data) < prefix + header_len:
        raise CheckpointError("Checkpoint manifest truncated")
    try:
        manifest = json.loads(data[prefix:prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Unreadable checkpoint manifest: {e}") from e

    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        model_config = ModelConfig(**manifest["model_config"])
        train_config = TrainConfig(**manifest["train_config"]) if manifest.get("train_config") else None
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Invalid configuration in checkpoint: {e}") from e

    blob = data[prefix + header_len:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        shape = tuple(entry["shape"])
        start, nbytes = entry["offset"], entry["nbytes"]
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)) or start + nbytes > len(blob):
            raise CheckpointError(f"Tensor {entry['name']} truncated or inconsistent")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4,
                                               offset=start).reshape(shape).copy()

    checkpoint = Checkpoint(model_config=model_config, step=int(manifest.get("step", 0)), tensors=tensors,
                            train_config=train_config, adam_steps=manifest.get("adam_steps", {}))
    _check_shapes(checkpoint, expected_config or model_config)
    return checkpoint


def _check_shapes(checkpoint: Checkpoint, config: ModelConfig) -> None:
    expected = parameter_shapes(config)
    found = {k: tuple(v.shape) for k, v in checkpoint.model_tensors().items()}
    if set(found) != set(expected):
        raise CheckpointError("Checkpoint tensors do not match the model layout")
    for name, shape in expected.items():
        if found[name] != shape:
            raise CheckpointError(f"Shape mismatch for {name}: checkpoint {found[name]}, model {shape}")


def restore_model(checkpoint: Checkpoint) -> MultitrackVAE:
    model = MultitrackVAE(checkpoint.model_config)
    state = {k: torch.from_numpy(v) for k, v in checkpoint.model_tensors().items()}
    model.load_state_dict(state)
    return model


def restore_optimizer(checkpoint: Checkpoint, model: MultitrackVAE,
                      config: TrainConfig) -> torch.optim.Adam:
    optimizer = build_optimizer(model, config)
    state = {}
    for index, (name, _) in enumerate(model.named_parameters()):
        if name not in checkpoint.adam_steps:
            continue
        state[index] = {
            "step": torch.tensor(checkpoint.adam_steps[name], dtype=torch.float32),
            "exp_avg": torch.from_numpy(checkpoint.tensors[f"adam/{name}/exp_avg"]),
            "exp_avg_sq": torch.from_numpy(checkpoint.tensors[f"adam/{name}/exp_avg_sq"]),
        }
    optimizer.load_state_dict({"state": state,
                               "param_groups": optimizer.state_dict()["param_groups"]})
    return optimizer


def load_model(path: str, expected_config: Optional[ModelConfig] = None) -> MultitrackVAE:
    """Read a checkpoint file and rebuild its model in eval mode"""
    with open(path, "rb") as f:
        model = restore_model(load_checkpoint(f.read(), expected_config))
    model.eval()
    return model


class Trainer:
    """Runs seeded training with periodic checkpoints and a JSON-lines metrics log"""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig,
                 checkpoint: Optional[Checkpoint] = None):
        self.model_config = model_config
        self.config = train_config
        torch.set_num_threads(train_config.num_threads)
        if checkpoint is not None:
            self.model = restore_model(checkpoint)
            self.optimizer = restore_optimizer(checkpoint, self.model, train_config)
            self.step = checkpoint.step
        else:
            self.model = build_model(model_config)
            self.optimizer = build_optimizer(self.model, train_config)
            self.step = 0
        self.generator = torch.Generator().manual_seed(train_config.seed + self.step)
        self.rng = np.random.default_rng(train_config.seed + self.step)
        self.last_checkpoint: Optional[str] = None

    def _batches(self, num_measures: int):
        while True:
            order = self.rng.permutation(num_measures)
            for start in range(0, num_measures, self.config.batch_size):
                chunk = order[start:start + self.config.batch_size]
                while len(chunk) < self.config.batch_size:
                    chunk = np.concatenate([chunk, order[:self.config.batch_size - len(chunk)]])
                yield chunk

    def save(self, out_dir: str) -> str:
        path = Path(out_dir) / f"checkpoint_{self.step:07d}.ckpt"
        data = save_checkpoint(self.model, self.optimizer, self.step, self.config)
        path.write_bytes(data)
        (Path(out_dir) / "checkpoint_latest.ckpt").write_bytes(data)
        self.last_checkpoint = str(path)
        return self.last_checkpoint

    def fit(self, measures: Sequence[Measure], out_dir: str) -> List[Dict[str, float]]:
        """Train for max_steps updates, appending one metrics record per step"""
        if not measures:
            raise ValueError("Cannot train on an empty dataset")
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        logger.info(f"Training on {len(measures)} measures for {self.config.max_steps} steps "
                    f"({torch.get_num_threads()} threads)")

        history = []
        batches = self._batches(len(measures))
        metrics_path = Path(out_dir) / "metrics.jsonl"
        kept: List[str] = []
        if self.step > 0 and metrics_path.exists():
            # a resumed run keeps only the records before its checkpoint step
            kept = [line for line in metrics_path.read_text(encoding="utf-8").splitlines()
                    if line.strip() and json.loads(line)["step"] < self.step]
        with open(metrics_path, "w", encoding="utf-8") as log:
            log.writelines(line + "\n" for line in kept)
            for _ in tqdm(range(self.config.max_steps), desc="Training"):
                indices = next(batches)
                batch = collate_measures([measures[i] for i in indices], self.model_config,
                                         rng=self.rng, augment=self.config.augment,
                                         max_transpose=self.config.max_transpose)
                metrics = train_step(self.model, self.optimizer, batch, self.step, self.config,
                                     self.generator, self.last_checkpoint)
                log.write(json.dumps(metrics, sort_keys=True) + "\n")
                history.append(metrics)
                self.step += 1

                if self.step % self.config.log_every == 0:
                    logger.info(f"Step {metrics['step']}: total = {metrics['total']:.4f}, "
                                f"recon = {metrics['recon']:.4f}, kl = {metrics['kl_bits']:.2f} bits, "
                                f"lr = {metrics['lr']:.2e}")
                if self.step % self.config.checkpoint_every == 0:
                    self.save(out_dir)

        if self.step % self.config.checkpoint_every != 0 or self.last_checkpoint is None:
            self.save(out_dir)
        logger.info(f"Training finished at step {self.step}; checkpoint {self.last_checkpoint}")
        return history


def main():
    """Example usage of the measure VAE"""
    logger.info("Hierarchical Recurrent VAE for Multitrack Measures")
    logger.info("Key features:")
    logger.info("- Two-level bidirectional LSTM encoder with softplus sigma head")
    logger.info("- Conductor LSTM and one decoder shared by all track slots")
    logger.info("- Chord conditioning on both encoder and decoder inputs")
    logger.info("- Free-bits KL objective with Adam and exponential learning-rate decay")
    logger.info("- Versioned float32 checkpoints with Adam state")


if __name__ == "__main__":
    main()
