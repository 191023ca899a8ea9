"""Experiment orchestration: phase schedules, the multi-phase loop, metrics,
and results persistence.

An experiment directory is self-describing: it holds the config snapshot,
per-phase results table, summary record, per-phase checkpoints, the
exemplar archive, and the training log. All files are written via
temp-then-rename.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import archive
from .compression import Image
from .config import ExperimentConfig, save_config
from .data import generate_synthetic_dataset, ingest_dataset, to_images
from .errors import InvalidSchedule
from .memory import ExemplarStore, MemoryLedger, MemoryRegime
from .model import ModelSpec, ModelState, build_model, expand_classifier, last_block_only_mode, save_checkpoint
from .training import PhaseResult, evaluate, run_phase, stream_rng

_STREAM_EXPAND = 4
_STREAM_FLIP = 6

RESULTS_NAME = "results.csv"
SUMMARY_NAME = "summary.json"
LOG_NAME = "train_log.txt"


@dataclass(frozen=True)
class PhaseSchedule:
    """Which global class ids arrive at each phase.

    ``class_ids[name]`` maps a directory class name to its global label;
    labels are assigned in arrival order over the seeded class permutation.
    """

    protocol: str
    phases: list[list[int]]
    class_names: list[str]  # index = global id

    @property
    def classes_total(self) -> int:
        return len(self.class_names)

    def seen_after(self, phase_index: int) -> int:
        return sum(len(p) for p in self.phases[:phase_index])


def build_schedule(config: ExperimentConfig, class_names: list[str]) -> PhaseSchedule:
    """Deterministic class order and per-phase splits for both protocols."""
    names = sorted(class_names)
    total = len(names)
    if total != config.classes_total:
        raise InvalidSchedule(
            f"dataset has {total} classes but config.classes_total={config.classes_total}"
        )
    order = np.random.RandomState(config.class_order_seed).permutation(total)
    ordered_names = [names[i] for i in order]

    n = config.phases
    if config.protocol == "lfs":
        if total % n != 0:
            raise InvalidSchedule(f"{total} classes not divisible into {n} equal phases")
        per = total // n
        counts = [per] * n
    else:
        base = total // 2
        if total % 2 != 0:
            raise InvalidSchedule(f"lfh needs an even class count, got {total}")
        incremental = n - 1 if config.lfh_n_includes_base else n
        if incremental < 1 or (total - base) % incremental != 0:
            raise InvalidSchedule(
                f"{total - base} remaining classes not divisible into {incremental} phases"
            )
        per = (total - base) // incremental
        counts = [base] + [per] * incremental

    phases = []
    cursor = 0
    for count in counts:
        phases.append(list(range(cursor, cursor + count)))
        cursor += count
    return PhaseSchedule(protocol=config.protocol, phases=phases, class_names=ordered_names)


@dataclass
class PhaseRow:
    phase: int
    seen_classes: int
    accuracy: float
    exemplars_stored: int
    mean_cost: float
    wall_clock_s: float


@dataclass
class RunResult:
    rows: list[PhaseRow] = field(default_factory=list)
    collapse_warnings: int = 0

    @property
    def average_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.rows])) if self.rows else 0.0

    @property
    def last_accuracy(self) -> float:
        return self.rows[-1].accuracy if self.rows else 0.0

    def summary(self) -> dict:
        return {
            "average_accuracy": self.average_accuracy,
            "last_accuracy": self.last_accuracy,
            "phases": len(self.rows),
            "collapse_warnings": self.collapse_warnings,
            "wall_clock_s": sum(r.wall_clock_s for r in self.rows),
        }


def results_table(rows: list[PhaseRow]) -> str:
    """Deterministic CSV: no timing columns, repr-stable floats."""
    lines = ["phase,seen_classes,accuracy,exemplars_stored,mean_cost"]
    for r in rows:
        lines.append(f"{r.phase},{r.seen_classes},{r.accuracy!r},{r.exemplars_stored},{r.mean_cost!r}")
    return "\n".join(lines) + "\n"


def _atomic_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _flip_images(images: list[Image], rng: np.random.Generator) -> list[Image]:
    out = []
    for img in images:
        if rng.random() < 0.5:
            out.append(Image(pixels=np.ascontiguousarray(img.pixels[:, ::-1]), label=img.label,
                             source_id=img.source_id))
        else:
            out.append(img)
    return out


def _prepare_dataset(config: ExperimentConfig, out_dir: Path):
    if config.data_dir:
        root = Path(config.data_dir)
    else:
        root = out_dir / "synthetic-data"
        if not (root / "train").is_dir():
            generate_synthetic_dataset(
                root,
                classes=config.classes_total,
                train_per_class=config.synthetic_train_per_class,
                test_per_class=config.synthetic_test_per_class,
                size=config.image_size,
                seed=config.synthetic_seed,
            )
    return ingest_dataset(root, config.image_size)


def run_experiment(config: ExperimentConfig, output_dir=None, seed: int | None = None) -> RunResult:
    """Run all phases and persist artifacts; returns the collected metrics.

    On a phase failure the partial rows written so far remain on disk next
    to a summary marked failed, then the error propagates.
    """
    seed = config.seed if seed is None else seed
    out = Path(output_dir) if output_dir is not None else Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.yaml")

    dataset = _prepare_dataset(config, out)
    schedule = build_schedule(config, list(dataset["train"]))

    spec = ModelSpec(
        channels=config.channels,
        block_depth=config.block_depth,
        image_size=config.image_size,
        norm=config.norm,
    )
    train_cfg = config.train_config(seed=seed)
    regime = MemoryRegime.FIXED if config.memory_regime == "fixed" else MemoryRegime.GROWING
    ledger = MemoryLedger(regime=regime, budget=config.memory_budget)
    store = ExemplarStore()

    state: ModelState | None = None
    prev_model: ModelState | None = None
    result = RunResult()
    log_lines: list[str] = []

    try:
        for phase_index, class_ids in enumerate(schedule.phases, start=1):
            t0 = time.perf_counter()
            new_data: list[Image] = []
            for cid in class_ids:
                name = schedule.class_names[cid]
                new_data.extend(to_images(dataset["train"][name], cid, prefix=name))
            if config.flip_augment:
                flip_rng = stream_rng(seed, _STREAM_FLIP, phase_index)
                new_data = _flip_images(new_data, flip_rng)
            test_data: list[Image] = []
            for cid in range(schedule.seen_after(phase_index)):
                name = schedule.class_names[cid]
                test_data.extend(to_images(dataset["test"][name], cid, prefix=f"test-{name}"))

            if state is None:
                state = build_model(spec, classes=len(class_ids), seed=seed)
                if config.last_block_only:
                    last_block_only_mode(state, True)
            else:
                prev_model = state.clone()
                prev_model.net.eval()
                expand_seed = int(stream_rng(seed, _STREAM_EXPAND, phase_index).integers(2**31))
                state = expand_classifier(state, len(class_ids), seed=expand_seed)

            state, phase_result = run_phase(
                phase_index,
                new_data,
                store,
                ledger,
                state,
                train_cfg,
                test_data,
                prev_model=prev_model,
                log_fn=log_lines.append,
            )
            wall = time.perf_counter() - t0
            result.rows.append(
                PhaseRow(
                    phase=phase_index,
                    seen_classes=phase_result.seen_classes,
                    accuracy=phase_result.accuracy,
                    exemplars_stored=phase_result.exemplars_total,
                    mean_cost=phase_result.mean_cost,
                    wall_clock_s=wall,
                )
            )
            result.collapse_warnings += phase_result.collapse_warnings
            save_checkpoint(
                out / f"phase-{phase_index:02d}.ckpt",
                state,
                class_order=schedule.class_names,
                rng_state={"seed": seed, "phase": phase_index},
                meta={"phase": phase_index, "accuracy": phase_result.accuracy},
            )
            _atomic_text(out / RESULTS_NAME, results_table(result.rows))
            _atomic_text(out / LOG_NAME, "\n".join(log_lines) + "\n")
    except Exception:
        summary = result.summary()
        summary["status"] = "failed"
        _atomic_text(out / SUMMARY_NAME, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        raise

    archive.save_store(out / "exemplars", store)
    summary = result.summary()
    summary["status"] = "ok"
    summary["seed"] = seed
    _atomic_text(out / SUMMARY_NAME, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result
