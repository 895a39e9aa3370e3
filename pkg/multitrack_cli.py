#!/usr/bin/env python3
"""
Multitrack Measure VAE - Command Line Interface

Single entry point wiring the dataset pipeline, chord inference, training,
sampling, latent manipulation, rendering and dataset statistics.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
from dotenv import load_dotenv
from tabulate import tabulate

from chord_inference import ChordInferenceError, chord_name, infer_chords, key_name
from corpus_pipeline import (DatasetError, build_dataset, format_summary, load_dataset,
                             measures_from_midi, split_measures, summarize_dataset)
from event_codec import CodecError, Measure, MeasureValidationError
from latent_ops import (ATTRIBUTE_PREDICATES, ChordProgression, LatentOpsError,
                        apply_attribute, attribute_vector, decode_progression,
                        interpolate_measures, sample_prior, split_by_attribute)
from render import RenderError, render_measures
from run_config import ConfigError, RunConfig, load_run_config, save_run_config
from smf_io import SMFParseError, SMFWriteError, parse_smf, segment_by_meter, write_smf
from vae_core import CheckpointError, NonFiniteLossError, Trainer, load_model, sample_decode

__version__ = "1.0.0"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

DATA_ERRORS = (SMFParseError, SMFWriteError, CodecError, MeasureValidationError,
               ChordInferenceError, CheckpointError, LatentOpsError, RenderError,
               DatasetError, OSError)
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Raised by the argument parser instead of exiting"""


class CLIArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def configure_logging(level: Optional[str] = None) -> None:
    load_dotenv('.env', override=True)
    level = (level or os.getenv("MMVAE_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, force=True)


def resolve_seed(seed: Optional[int]) -> int:
    """Use the given seed or draw one from OS entropy and report it"""
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2 ** 31))
        print(f"Using seed {seed}", file=sys.stderr)
    return seed


class MultitrackVAESystem:
    """Runs each command against one effective RunConfig"""

    def __init__(self, config: RunConfig):
        self.config = config

    def _generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(self.config.seed or 0)

    def _midi_measures(self, path: str, min_tracks: Optional[int] = None) -> List[Measure]:
        pipeline = self.config.pipeline
        if min_tracks is not None:
            pipeline = replace(pipeline, min_tracks=min_tracks)
        return measures_from_midi(path, pipeline, self.config.chords)

    def _first_measure(self, path: str) -> Measure:
        measures = self._midi_measures(path)
        if not measures:
            raise LatentOpsError(f"No usable measure in {path}")
        return measures[0]

    def ingest(self, input_dir: str, output: str, stats_path: Optional[str]) -> Dict[str, Any]:
        stats = build_dataset(input_dir, output, self.config.pipeline, seed=self.config.seed or 0,
                              stats_path=stats_path, chord_params=self.config.chords)
        save_run_config(self.config, str(Path(output).parent))
        return asdict(stats)

    def chords(self, input_path: str, output: Optional[str]) -> Dict[str, Any]:
        with open(input_path, "rb") as f:
            parsed = parse_smf(f.read())
        rows = []
        for segment_index, segment in enumerate(segment_by_meter(parsed.notes, parsed.timeline)):
            raw = split_measures(segment)
            result = infer_chords([m.decoded_tracks() for m in raw], self.config.chords)
            if result.discarded:
                logger.warning(f"Segment {segment_index}: {result.reason}")
                continue
            per = self.config.chords.frames_per_measure
            for i, conditioning in enumerate(result.chords):
                states = result.states[i * per:(i + 1) * per]
                rows.append({"segment": segment_index, "measure": i,
                             "chords": [chord_name(s.chord) for s in states],
                             "conditioning": [chord_name(c) for c in conditioning],
                             "keys": [key_name(s.key) for s in states]})
        print(tabulate([[r["segment"], r["measure"], " ".join(r["chords"]),
                         " ".join(r["conditioning"]), " ".join(r["keys"])] for r in rows],
                       headers=["segment", "measure", "chords", "conditioning", "key"]))
        if output:
            Path(output).parent.mkdir(parents=True, exist_ok=True)
            with open(output, "w", encoding="utf-8") as f:
                json.dump(rows, f, indent=2)
        return {"measures": len(rows)}

    def train(self, data: str, out_dir: str) -> Dict[str, Any]:
        measures = load_dataset(data)
        save_run_config(self.config, out_dir)
        trainer = Trainer(self.config.model, self.config.train)
        history = trainer.fit(measures, out_dir)
        final = history[-1] if history else {}
        return {"steps": trainer.step, "checkpoint": trainer.last_checkpoint, "final": final}

    def sample(self, checkpoint: str, out_dir: str, num: int, chords: Optional[str]) -> Dict[str, Any]:
        model = load_model(checkpoint)
        pair = ChordProgression.parse(chords).pairs()[0] if chords else (0, 0)
        generator = self._generator()
        save_run_config(self.config, out_dir)
        written = []
        with open(Path(out_dir) / "samples.jsonl", "w", encoding="utf-8") as log:
            for i in range(num):
                z = sample_prior(model.config.latent_dim, generator)
                sampled = sample_decode(model, z, pair, self.config.latent.temperature, generator)
                path = Path(out_dir) / f"sample_{i:03d}.mid"
                path.write_bytes(write_smf([sampled.measure], tempo_bpm=self.config.latent.tempo_bpm))
                log.write(sampled.measure.to_json_line() + "\n")
                written.append(str(path))
        return {"samples": written}

    def interp(self, checkpoint: str, a: str, b: str, steps: int, out: str) -> Dict[str, Any]:
        model = load_model(checkpoint)
        measures = interpolate_measures(model, self._first_measure(a), self._first_measure(b),
                                        steps, self.config.latent.temperature, self._generator())
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(write_smf(measures, tempo_bpm=self.config.latent.tempo_bpm))
        save_run_config(self.config, str(Path(out).parent))
        return {"measures": len(measures), "output": out}

    def attr(self, checkpoint: str, data: str, vector_name: str, scale: float,
             input_path: Optional[str], index: int, out: str) -> Dict[str, Any]:
        model = load_model(checkpoint)
        measures = load_dataset(data)
        with_set, without_set = split_by_attribute(measures, vector_name,
                                                   self.config.latent.attribute_threshold)
        vector = attribute_vector(model, with_set, without_set, vector_name)
        if input_path:
            source = self._first_measure(input_path)
        elif 0 <= index < len(measures):
            source = measures[index]
        else:
            raise LatentOpsError(f"Measure index {index} outside dataset of {len(measures)}")
        result = apply_attribute(model, source, vector, scale, self.config.latent.temperature,
                                 self._generator())

        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(write_smf([source, result], tempo_bpm=self.config.latent.tempo_bpm))
        save_run_config(self.config, str(Path(out).parent))
        with open(Path(out).with_suffix(".vector.json"), "w", encoding="utf-8") as f:
            json.dump(vector.to_dict(), f, indent=2)
        predicate = ATTRIBUTE_PREDICATES[vector_name]
        return {"attribute": vector_name, "n_with": vector.n_with, "n_without": vector.n_without,
                "before": predicate(source), "after": predicate(result), "output": out}

    def progression(self, checkpoint: str, chords: str, z_path: Optional[str],
                    z_end_path: Optional[str], out: str) -> Dict[str, Any]:
        model = load_model(checkpoint)
        generator = self._generator()
        if z_path:
            z = np.asarray(json.loads(Path(z_path).read_text()), dtype=np.float64)
        else:
            z = sample_prior(model.config.latent_dim, generator).double().numpy()
        z_end = np.asarray(json.loads(Path(z_end_path).read_text())) if z_end_path else None
        if z.shape != (model.config.latent_dim,):
            raise LatentOpsError(f"Latent code has shape {z.shape}, expected ({model.config.latent_dim},)")

        result = decode_progression(model, z, ChordProgression.parse(chords),
                                    self.config.latent.temperature, generator, z_end=z_end,
                                    tempo_bpm=self.config.latent.tempo_bpm)
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(result.midi)
        Path(out).with_suffix(".z.json").write_text(json.dumps([float(x) for x in z]))
        save_run_config(self.config, str(Path(out).parent))
        return {"measures": len(result.measures), "steps": result.total_steps, "output": out}

    def render(self, input_path: str, out: str) -> Dict[str, Any]:
        if input_path.endswith(".jsonl"):
            measures = load_dataset(input_path)
        else:
            measures = self._midi_measures(input_path, min_tracks=0)
        data = render_measures(measures, self.config.render)
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_bytes(data)
        return {"measures": len(measures), "output": out, "bytes": len(data)}

    def stats(self, data: str) -> Dict[str, Any]:
        tables = summarize_dataset(load_dataset(data))
        print(format_summary(tables))
        return {row["metric"]: row["value"] for row in tables["summary"].to_dict("records")}


def build_parser() -> CLIArgumentParser:
    parser = CLIArgumentParser(prog="multitrack-vae", description="Multitrack Measure VAE")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="YAML or JSON run configuration")
    parser.add_argument("--log-level", help="Logging level (default from MMVAE_LOG_LEVEL or INFO)")
    # also accepted after the subcommand; SUPPRESS keeps a value given before it
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML or JSON run configuration")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CLIArgumentParser)

    p = sub.add_parser("ingest", help="Build a JSON-lines dataset from a MIDI directory",
                       parents=[common])
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--stats")
    p.add_argument("--workers", type=int)
    p.add_argument("--shuffle", action="store_true", default=None)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("chords", help="Infer chords and keys for a MIDI file", parents=[common])
    p.add_argument("--input", required=True)
    p.add_argument("--output")

    p = sub.add_parser("train", help="Train the VAE", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sample", help="Decode measures sampled from the prior", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, default=4)
    p.add_argument("--chords", help="Two chords, e.g. 'C,G'")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("interp", help="Interpolate between the first measures of two files",
                       parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("attr", help="Apply an attribute vector to a measure", parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vector", required=True, choices=sorted(ATTRIBUTE_PREDICATES))
    p.add_argument("--scale", type=float)
    p.add_argument("--input", help="MIDI file whose first measure is transformed")
    p.add_argument("--index", type=int, default=0, help="Dataset measure used without --input")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("progression", help="Decode one latent code over a chord progression",
                       parents=[common])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chords", required=True)
    p.add_argument("--z", help="JSON list with the latent code; sampled when omitted")
    p.add_argument("--z-end", help="JSON list with a second code to move towards")
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("render", help="Render a MIDI file or dataset as a pianoroll", parents=[common])
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["svg", "text"])
    p.add_argument("--strip-drums", action="store_true", default=None)
    p.add_argument("--strip-octaves", action="store_true", default=None)

    p = sub.add_parser("stats", help="Summarize a dataset file", parents=[common])
    p.add_argument("--data", required=True)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    mapping = {"workers": "pipeline.workers", "shuffle": "pipeline.shuffle",
               "steps": "train.max_steps", "batch_size": "train.batch_size",
               "temperature": "latent.temperature", "scale": "latent.attribute_scale",
               "format": "render.format", "strip_drums": "render.strip_drums",
               "strip_octaves": "render.strip_octaves"}
    return {key: getattr(args, name) for name, key in mapping.items()
            if getattr(args, name, None) is not None}


def run(args: argparse.Namespace) -> Dict[str, Any]:
    config = load_run_config(args.config, _overrides(args))
    if hasattr(args, "seed"):
        config = config.with_seed(resolve_seed(args.seed if args.seed is not None else config.seed))
    system = MultitrackVAESystem(config)

    if args.command == "ingest":
        return system.ingest(args.input, args.output, args.stats)
    if args.command == "chords":
        return system.chords(args.input, args.output)
    if args.command == "train":
        return system.train(args.data, args.out)
    if args.command == "sample":
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return system.sample(args.checkpoint, args.out, args.num, args.chords)
    if args.command == "interp":
        return system.interp(args.checkpoint, args.a, args.b, args.steps, args.out)
    if args.command == "attr":
        return system.attr(args.checkpoint, args.data, args.vector, config.latent.attribute_scale,
                           args.input, args.index, args.out)
    if args.command == "progression":
        return system.progression(args.checkpoint, args.chords, args.z, args.z_end, args.out)
    if args.command == "render":
        return system.render(args.input, args.out)
    return system.stats(args.data)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_level)
    try:
        results = run(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_USAGE
    except NonFiniteLossError as e:
        logger.error(str(e))
        return EXIT_INTERNAL
    except DATA_ERRORS as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        return EXIT_INTERNAL

    print(json.dumps(results, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
