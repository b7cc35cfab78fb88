"""Experiment configuration files.

Flat INI-style text with sections: one ``[student]``, one ``[run]``, one
``[teacher:NAME]`` per roster slot, optional ``[eval]`` and ``[bench]``.
Unknown sections and unknown keys are hard errors that name the file, the
key, and the constraint, so a typo in a loss weight cannot silently fall
back to a default. ``write_config`` emits every field with its resolved
value; feeding that snapshot back in reconstructs the identical experiment.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields

from .losses import LossWeights
from .student import StudentConfig
from .teachers import SyntheticTeacherSpec
from .trainer import RunConfig, TeacherEntry


class ConfigError(ValueError):
    """A configuration file problem, already phrased for the user."""


@dataclass(frozen=True)
class EvalSettings:
    """Shared knobs for the evaluation and diagnostic subcommands."""

    classes: int = 4
    per_class: int = 25
    pixels: int = 64  # labeled image size for knn / probe
    label_noise: float = 0.2
    knn_k: int = 20
    probe_l2: float = 1e-3
    images: int = 64  # sample count for dispersion / bias estimation
    resolution: int = 64  # image size for dispersion / bias / viz

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        if self.pixels < 16 or self.resolution < 16:
            raise ValueError("pixels and resolution must be >= 16")
        if self.label_noise < 0:
            raise ValueError("label_noise must be >= 0")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.probe_l2 < 0:
            raise ValueError("probe_l2 must be >= 0")
        if self.images < 2:
            raise ValueError("images must be >= 2")


@dataclass(frozen=True)
class BenchSettings:
    """Latency sweep shape: what to time and how carefully."""

    resolutions: tuple[int, ...] = (256, 512, 1024)
    warmup: int = 2
    trials: int = 5
    threads: int = 1
    # (label, schedule text) pairs; empty text means the [student] schedule
    variants: tuple[tuple[str, str], ...] = (("reference", ""),)

    def __post_init__(self):
        if not self.resolutions or any(r < 16 for r in self.resolutions):
            raise ValueError("resolutions must be a nonempty list of sizes >= 16")
        if self.warmup < 2:
            raise ValueError("warmup must be >= 2")
        if self.trials < 5:
            raise ValueError("trials must be >= 5")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        labels = [v[0] for v in self.variants]
        if not labels or len(set(labels)) != len(labels):
            raise ValueError(f"variant labels must be nonempty and unique: {labels}")


@dataclass(frozen=True)
class Experiment:
    student: StudentConfig
    run: RunConfig
    evals: EvalSettings
    bench: BenchSettings


def _convert(raw: str, kind: str, path: str, section: str, key: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "ints":
            return tuple(int(t) for t in raw.split(",") if t.strip())
        if kind == "str":
            return raw.strip()
        if kind == "opt_int":
            return None if raw.strip().lower() in ("", "none") else int(raw)
        raise AssertionError(kind)
    except ValueError:
        raise ConfigError(
            f"{path}: key '{key}' in [{section}] expects {kind}, got {raw!r}"
        ) from None


class _Section:
    """One section's raw keys, consumed one by one so leftovers are typos."""

    def __init__(self, path: str, name: str, items: dict[str, str]):
        self.path = path
        self.name = name
        self.items = dict(items)

    def take(self, key: str, kind: str):
        if key not in self.items:
            return None
        return _convert(self.items.pop(key), kind, self.path, self.name, key)

    def kwargs(self, schema: dict[str, str]) -> dict:
        out = {}
        for key, kind in schema.items():
            if key in self.items:
                out[key] = _convert(self.items.pop(key), kind, self.path, self.name, key)
        return out

    def finish(self):
        if self.items:
            key = sorted(self.items)[0]
            raise ConfigError(
                f"{self.path}: unknown key '{key}' in [{self.name}]"
            )

    def build(self, ctor, kwargs: dict):
        try:
            return ctor(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"{self.path}: [{self.name}]: {exc}") from None


_STUDENT_SCHEMA = {
    "dim": "int",
    "depth": "int",
    "heads": "int",
    "patch": "int",
    "mlp_ratio": "float",
    "pos_base": "int",
}

_RUN_SCHEMA = {
    "steps": "int",
    "batch": "int",
    "mix_low": "float",
    "low_pool": "ints",
    "high_pool": "ints",
    "max_shift": "int",
    "ema_decay": "float",
    "mesa_weight": "float",
    "damp_sigma": "float",
    "summary_mode": "str",
    "lr": "float",
    "beta1": "float",
    "beta2": "float",
    "adam_eps": "float",
    "weight_decay": "float",
    "master_seed": "int",
    "calib_images": "int",
    "calib_resolution": "int",
}

_TEACHER_SCHEMA = {
    "channels": "int",
    "summary_dim": "int",
    "patch": "int",
    "semantic_seed": "int",
    "bias_amplitude": "float",
    "bias_pattern": "str",
    "cone_angle": "float",
    "native": "opt_int",
}

_EVAL_SCHEMA = {
    "classes": "int",
    "per_class": "int",
    "pixels": "int",
    "label_noise": "float",
    "knn_k": "int",
    "probe_l2": "float",
    "images": "int",
    "resolution": "int",
}

_BENCH_SCHEMA = {
    "resolutions": "ints",
    "warmup": "int",
    "trials": "int",
    "threads": "int",
}


def _parse_variants(raw: str, path: str) -> tuple[tuple[str, str], ...]:
    out = []
    for chunk in raw.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        label, sep, sched = chunk.partition(":")
        if not sep or not label.strip():
            raise ConfigError(
                f"{path}: key 'variants' in [bench] expects 'label:schedule' "
                f"pairs separated by ';', got {chunk!r}"
            )
        out.append((label.strip(), sched.strip()))
    if not out:
        raise ConfigError(f"{path}: key 'variants' in [bench] is empty")
    return tuple(out)


def load_config(path: str) -> Experiment:
    if not os.path.isfile(path):
        raise ConfigError(f"{path}: config file does not exist")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_string(fh.read(), source=path)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"{path}: {str(exc).strip()}".replace("\n", " ")) from None

    sections = {name: _Section(path, name, dict(cp[name])) for name in cp.sections()}
    for name in sections:
        if name not in ("student", "run", "eval", "bench") and not name.startswith("teacher:"):
            raise ConfigError(f"{path}: unknown section [{name}]")

    sec = sections.get("student", _Section(path, "student", {}))
    kwargs = sec.kwargs(_STUDENT_SCHEMA)
    schedule_text = sec.take("schedule", "str")
    sec.finish()
    student = sec.build(StudentConfig, kwargs)
    if schedule_text:
        try:
            student = student.with_schedule(schedule_text)
        except ValueError as exc:
            raise ConfigError(f"{path}: key 'schedule' in [student]: {exc}") from None

    roster = []
    for name in cp.sections():
        if not name.startswith("teacher:"):
            continue
        label = name[len("teacher:"):]
        sec = sections[name]
        spec_kwargs = sec.kwargs(_TEACHER_SCHEMA)
        weight_kwargs = sec.kwargs(
            {"w_spatial": "float", "w_summary": "float", "w_mesa": "float"}
        )
        sec.finish()
        spec = sec.build(SyntheticTeacherSpec, spec_kwargs)
        weights = sec.build(LossWeights, weight_kwargs)
        roster.append(sec.build(TeacherEntry, dict(name=label, spec=spec, weights=weights)))
    if not roster:
        raise ConfigError(f"{path}: at least one [teacher:NAME] section is required")

    sec = sections.get("run", _Section(path, "run", {}))
    run_kwargs = sec.kwargs(_RUN_SCHEMA)
    sec.finish()
    if "steps" not in run_kwargs:
        raise ConfigError(f"{path}: key 'steps' in [run] is required")
    run = sec.build(RunConfig, dict(run_kwargs, roster=tuple(roster)))

    sec = sections.get("eval", _Section(path, "eval", {}))
    eval_kwargs = sec.kwargs(_EVAL_SCHEMA)
    sec.finish()
    evals = sec.build(EvalSettings, eval_kwargs)

    sec = sections.get("bench", _Section(path, "bench", {}))
    bench_kwargs = sec.kwargs(_BENCH_SCHEMA)
    variants_raw = sec.take("variants", "str")
    sec.finish()
    if variants_raw is not None:
        bench_kwargs["variants"] = _parse_variants(variants_raw, path)
    bench = sec.build(BenchSettings, bench_kwargs)

    return Experiment(student=student, run=run, evals=evals, bench=bench)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def write_config(path: str, exp: Experiment) -> None:
    """Write every field with its resolved value; reload gives an equal Experiment."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str

    s = exp.student
    cp["student"] = {k: _fmt(getattr(s, k)) for k in _STUDENT_SCHEMA}
    cp["student"]["schedule"] = ",".join(str(sc) for sc in s.schedule)

    cp["run"] = {k: _fmt(getattr(exp.run, k)) for k in _RUN_SCHEMA}

    for entry in exp.run.roster:
        body = {k: _fmt(getattr(entry.spec, k)) for k in _TEACHER_SCHEMA}
        for f in fields(LossWeights):
            body[f.name] = _fmt(getattr(entry.weights, f.name))
        cp[f"teacher:{entry.name}"] = body

    cp["eval"] = {k: _fmt(getattr(exp.evals, k)) for k in _EVAL_SCHEMA}

    cp["bench"] = {k: _fmt(getattr(exp.bench, k)) for k in _BENCH_SCHEMA}
    cp["bench"]["variants"] = ";".join(f"{lab}:{sched}" for lab, sched in exp.bench.variants)

    with open(path, "w") as fh:
        cp.write(fh)
