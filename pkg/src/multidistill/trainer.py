"""The distillation loop.

Each step draws a resolution partition, a resolution, and an oversized canvas
batch; crops an independently shifted view per image for the student, for
every teacher, and for the EMA shadow; runs everything forward; aggregates
the dense, summary, and EMA-matching losses; applies one decoupled-weight-
decay adaptive-moment update to the clean weights; and folds the result into
the EMA. All randomness flows through named substreams of one master seed,
so toggling weight noise never perturbs the data order, and a saved state
resumes bit-identically.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .checkpoint import read_state_file, write_state_file
from .data import random_image, resize_image
from .geometry import (
    HIGH_RESOLUTIONS,
    LOW_RESOLUTIONS,
    CropMap,
    FeatureGrid,
    PatchGrid,
    ShiftSample,
    overlap_region,
    sample_shift,
)
from .losses import (
    LossReport,
    LossWeights,
    cosine_summary_loss,
    mesa_loss,
    spatial_loss,
    summary_loss,
)
from .normstats import TeacherStats, fit_feature_stats, fit_summary_stats, normalize_features
from .student import (
    StudentConfig,
    backward,
    damp_perturb,
    damp_restore,
    ema_init,
    ema_update,
    forward,
    init_params,
)
from .teachers import SyntheticTeacherSpec, fixedres_forward, resize_features, synth_forward

SUMMARY_MODES = ("angle", "cosine")

# Parameters receiving decoupled weight decay: the same matmul weights that
# weight noise targets. Biases, norms, position table, summary token exempt.
def _decayed(key: str) -> bool:
    return key.endswith((".w", ".w1", ".w2")) or ".att.w" in key


@dataclass(frozen=True)
class TeacherEntry:
    """One roster slot: a teacher plus its loss weighting."""

    name: str
    spec: SyntheticTeacherSpec
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise ValueError(f"teacher name {self.name!r} must be nonempty, no '/'")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs beyond the student architecture."""

    steps: int
    roster: tuple[TeacherEntry, ...]
    batch: int = 8
    mix_low: float = 0.5  # probability of drawing from the low partition
    low_pool: tuple[int, ...] = LOW_RESOLUTIONS
    high_pool: tuple[int, ...] = HIGH_RESOLUTIONS
    max_shift: int = 3  # patches, per view, per image
    ema_decay: float = 0.999
    mesa_weight: float = 0.1
    damp_sigma: float = 0.0  # 0 disables weight noise
    summary_mode: str = "angle"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    master_seed: int = 0
    calib_images: int = 64
    calib_resolution: int = 128

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if not 0.0 <= self.mix_low <= 1.0:
            raise ValueError("mix_low must lie in [0, 1]")
        if not self.roster:
            raise ValueError("roster must name at least one teacher")
        names = [e.name for e in self.roster]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate teacher names in roster: {names}")
        if self.mix_low > 0.0 and not self.low_pool:
            raise ValueError("mix_low > 0 needs a nonempty low resolution pool")
        if self.mix_low < 1.0 and not self.high_pool:
            raise ValueError("mix_low < 1 needs a nonempty high resolution pool")
        if self.max_shift < 0:
            raise ValueError("max_shift must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.mesa_weight < 0 or self.damp_sigma < 0:
            raise ValueError("mesa_weight and damp_sigma must be >= 0")
        if self.summary_mode not in SUMMARY_MODES:
            raise ValueError(f"summary_mode must be one of {SUMMARY_MODES}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.calib_images < 2:
            raise ValueError("calibration needs at least 2 images")


@dataclass
class TrainState:
    """Mutable run state; train_step advances it in place and returns it."""

    run: RunConfig
    student: StudentConfig
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray]
    opt_v: dict[str, np.ndarray]
    stats: dict[str, TeacherStats]
    rngs: dict[str, np.random.Generator]
    step: int = 0


def _calib_stream(master_seed: int, name: str) -> np.random.Generator:
    # keyed by teacher name so roster order cannot leak into any teacher's
    # calibration draw
    tag = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.Generator(
        np.random.PCG64(
            np.random.SeedSequence((master_seed, rngmod.STREAM_IDS["calib"], tag))
        )
    )


def calibrate(
    spec: SyntheticTeacherSpec,
    images: list[np.ndarray],
) -> TeacherStats:
    """Fit per-channel feature moments and the summary cone of one teacher.

    The images must already be at the teacher's input size. Raises on a
    directionless summary cloud (no calibratable mean direction).
    """
    if not images:
        raise ValueError("calibration set is empty")
    summaries = []
    grids = []
    for img in images:
        s, feat = synth_forward(spec, img)
        summaries.append(s)
        grids.append(feat)
    mean, scale = fit_feature_stats(grids)
    mean_dir, dispersion = fit_summary_stats(summaries)
    return TeacherStats(
        channel_mean=mean,
        channel_scale=scale,
        mean_dir=mean_dir,
        dispersion=dispersion,
        sample_count=len(images),
    )


def _calibration_px(entry: TeacherEntry, run: RunConfig) -> int:
    return entry.spec.native if entry.spec.native is not None else run.calib_resolution


def init_state(
    run: RunConfig,
    student: StudentConfig,
    stats: dict[str, TeacherStats] | None = None,
) -> TrainState:
    """Build a ready-to-train state: init weights, calibrate the roster.

    Passing precomputed ``stats`` skips calibration for those teachers.
    """
    student.validate_for_training()
    for entry in run.roster:
        if entry.spec.channels != student.dim:
            raise ValueError(
                f"teacher {entry.name!r} emits {entry.spec.channels} channels, "
                f"student outputs {student.dim}"
            )
        if entry.spec.summary_dim != student.dim:
            raise ValueError(
                f"teacher {entry.name!r} summary dim {entry.spec.summary_dim} "
                f"!= student dim {student.dim}"
            )
        if entry.spec.patch != student.patch:
            raise ValueError(
                f"teacher {entry.name!r} patch {entry.spec.patch} != student patch "
                f"{student.patch}"
            )
        if _calibration_px(entry, run) % student.patch:
            raise ValueError(
                f"calibration resolution for {entry.name!r} is not a patch multiple"
            )
    params = init_params(student, rngmod.stream(run.master_seed, "init"))
    all_stats = dict(stats) if stats else {}
    for entry in run.roster:
        if entry.name in all_stats:
            continue
        crng = _calib_stream(run.master_seed, entry.name)
        px = _calibration_px(entry, run)
        images = [random_image(crng, px) for _ in range(run.calib_images)]
        all_stats[entry.name] = calibrate(entry.spec, images)
    return TrainState(
        run=run,
        student=student,
        params=params,
        ema=ema_init(params),
        opt_m={k: np.zeros_like(v) for k, v in params.items()},
        opt_v={k: np.zeros_like(v) for k, v in params.items()},
        stats=all_stats,
        rngs=rngmod.streams(run.master_seed, ("data", "shifts", "damp")),
        step=0,
    )


def _crop_view(canvas: np.ndarray, shift: ShiftSample, margin: int, view_px: int, patch: int) -> np.ndarray:
    r0 = (margin + shift.dy) * patch
    c0 = (margin + shift.dx) * patch
    return canvas[r0 : r0 + view_px, c0 : c0 + view_px]


def _teacher_views_forward(
    spec: SyntheticTeacherSpec, views: list[np.ndarray], patch: int
) -> list[tuple[np.ndarray, FeatureGrid]]:
    """Run one teacher on every view, aligned back onto the view grid.

    Alignment policy by teacher kind and view size v vs native size N:
    variable-res teachers run natively at v. Fixed-res teachers run directly
    at v == N; when v < N and N % v == 0 several views are packed onto one
    native canvas per forward (padding the last group by repetition); any
    other size is bridged by bilinearly resizing the view to N and the
    features back to the view grid (v = 3N is the downsample-then-upsample
    regime this loss tolerates by design).
    """
    n_native = spec.native
    v = views[0].shape[0]
    if n_native is None or v == n_native:
        return [synth_forward(spec, img) for img in views]
    if v < n_native and n_native % v == 0:
        per_canvas = (n_native // v) ** 2
        out: list[tuple[np.ndarray, FeatureGrid]] = []
        for i in range(0, len(views), per_canvas):
            group = views[i : i + per_canvas]
            real = len(group)
            group = group + [group[-1]] * (per_canvas - real)
            packed = fixedres_forward(spec, group)
            out.extend((s, feat) for s, feat, _ in packed[:real])
        return out
    rows = v // patch
    out = []
    for img in views:
        s, feat = synth_forward(spec, resize_image(img, n_native))
        out.append((s, resize_features(feat, rows, rows)))
    return out


def _adamw_update(state: TrainState, grads: dict[str, np.ndarray], base: dict[str, np.ndarray]) -> None:
    run = state.run
    t = state.step + 1
    c1 = 1.0 - run.beta1**t
    c2 = 1.0 - run.beta2**t
    for k in sorted(base):
        g = grads[k]
        m = state.opt_m[k]
        v = state.opt_v[k]
        m *= run.beta1
        m += (1.0 - run.beta1) * g
        v *= run.beta2
        v += (1.0 - run.beta2) * g * g
        p = base[k]
        if _decayed(k):
            p -= run.lr * run.weight_decay * p
        p -= run.lr * (m / c1) / (np.sqrt(v / c2) + run.adam_eps)


def train_step(
    state: TrainState, batch: list[np.ndarray] | None = None
) -> tuple[TrainState, LossReport]:
    """Advance the state by one optimization step.

    ``batch`` normally comes from the state's own data stream (a canvas per
    image, oversized by the shift margin); tests may inject explicit square
    canvases instead, which skips the partition/resolution draws. A step
    whose every term lost its overlap is recorded as skipped and applies no
    update, but still advances the step counter and every stream.
    """
    run = state.run
    scfg = state.student
    p = scfg.patch
    rng_data = state.rngs["data"]
    rng_shift = state.rngs["shifts"]
    margin = run.max_shift

    if batch is None:
        part_low = rng_data.random() < run.mix_low
        pool = run.low_pool if part_low else run.high_pool
        view_px = int(pool[int(rng_data.integers(0, len(pool)))])
        canvas_px = view_px + 2 * margin * p
        batch = [random_image(rng_data, canvas_px) for _ in range(run.batch)]
    else:
        if not batch:
            raise ValueError("explicit batch must contain at least one canvas")
        canvas_px = batch[0].shape[0]
        for img in batch:
            if img.shape[0] != canvas_px or img.shape[1] != canvas_px:
                raise ValueError("all canvases in a batch must be equal squares")
        view_px = canvas_px - 2 * margin * p
        if view_px <= 0 or view_px % p:
            raise ValueError(
                f"canvas {canvas_px}px minus shift margin leaves no patch-aligned view"
            )
    n = view_px // p
    grid = PatchGrid(n, n, p)

    # one shift per view per image, in fixed order; the EMA draw happens even
    # when the EMA term is off so toggling it cannot shift later draws
    draws = []
    for _ in batch:
        s_student = sample_shift(rng_shift, margin)
        s_teacher = {e.name: sample_shift(rng_shift, margin) for e in run.roster}
        s_ema = sample_shift(rng_shift, margin)
        draws.append((s_student, s_teacher, s_ema))

    if run.damp_sigma > 0.0:
        live_params, clean = damp_perturb(state.params, run.damp_sigma, state.rngs["damp"])
    else:
        live_params, clean = state.params, state.params

    # teacher forwards, batched per teacher so mosaic packing sees the group
    teacher_out: dict[str, list[tuple[np.ndarray, FeatureGrid]]] = {}
    for entry in run.roster:
        views = [
            _crop_view(batch[i], draws[i][1][entry.name], margin, view_px, p)
            for i in range(len(batch))
        ]
        teacher_out[entry.name] = _teacher_views_forward(entry.spec, views, p)

    b = len(batch)
    sums: dict[str, float] = {}
    areas: dict[str, int] = {}
    weights: dict[str, float] = {}
    live: dict[str, int] = {}  # images that actually contributed to a term
    grads_total: dict[str, np.ndarray] | None = None

    for i, canvas in enumerate(batch):
        s_student, s_teacher, s_ema = draws[i]
        view = _crop_view(canvas, s_student, margin, view_px, p)
        summary, feats, cache = forward(scfg, live_params, view, want_grad=True)
        d_summary = np.zeros_like(summary)
        d_feats = np.zeros_like(feats.data)
        touched = False

        for entry in run.roster:
            st = state.stats[entry.name]
            t_summary, t_feats = teacher_out[entry.name][i]
            w = entry.weights
            if w.w_spatial > 0.0:
                name = f"spatial/{entry.name}"
                weights[name] = w.w_spatial
                cmap = overlap_region(grid, s_student, s_teacher[entry.name])
                if not cmap.empty:
                    t_norm = normalize_features(t_feats, st)
                    value, g = spatial_loss(feats, t_norm, cmap)
                    sums[name] = sums.get(name, 0.0) + value
                    areas[name] = areas.get(name, 0) + cmap.overlap.area
                    live[name] = live.get(name, 0) + 1
                    d_feats += w.w_spatial * g
                    touched = True
            if w.w_summary > 0.0:
                name = f"summary/{entry.name}"
                weights[name] = w.w_summary
                if run.summary_mode == "angle":
                    value, g = summary_loss(summary, t_summary, st.dispersion)
                else:
                    value, g = cosine_summary_loss(summary, t_summary)
                sums[name] = sums.get(name, 0.0) + value
                live[name] = live.get(name, 0) + 1
                d_summary += w.w_summary * g
                touched = True

        if run.mesa_weight > 0.0:
            weights["mesa"] = run.mesa_weight
            cmap = overlap_region(grid, s_student, s_ema)
            if not cmap.empty:
                ema_view = _crop_view(canvas, s_ema, margin, view_px, p)
                _, ema_feats, _ = forward(scfg, state.ema, ema_view, want_grad=False)
                value, g = mesa_loss(feats, ema_feats, cmap)
                sums["mesa"] = sums.get("mesa", 0.0) + value
                areas["mesa"] = areas.get("mesa", 0) + cmap.overlap.area
                live["mesa"] = live.get("mesa", 0) + 1
                d_feats += run.mesa_weight * g
                touched = True

        if not touched:
            continue
        g = backward(cache, d_summary, d_feats)
        if grads_total is None:
            grads_total = {k: v / b for k, v in g.items()}
        else:
            for k, v in g.items():
                grads_total[k] += v / b

    # term values are batch means; an image whose overlap came up empty
    # contributes zero, so report.total is exactly the stepped objective
    report = LossReport(resolution=view_px)
    for name, w in weights.items():
        if live.get(name, 0) > 0:
            report.add(name, sums[name] / b, w, omega=areas.get(name, 0))
        else:
            report.add_skipped(name, w)

    if grads_total is not None:
        _adamw_update(state, grads_total, clean)
        state.params = damp_restore(clean)
        ema_update(state.ema, state.params, run.ema_decay)
    state.step += 1
    return state, report


def train(
    state: TrainState,
    steps: int | None = None,
    log_path: str | None = None,
) -> tuple[TrainState, list[LossReport]]:
    """Run ``steps`` optimization steps (default: the config's total).

    When ``log_path`` is given, appends one CSV row per term per step with
    columns step,term,value,omega,resolution (plus a total row); the header
    is written only when the file starts empty, so a resumed run extends the
    same log.
    """
    n = state.run.steps if steps is None else steps
    reports = []
    writer = None
    handle = None
    try:
        if log_path is not None:
            try:
                fresh = os.path.getsize(log_path) == 0
            except OSError:
                fresh = True
            handle = open(log_path, "a", newline="")
            writer = csv.writer(handle)
            if fresh:
                writer.writerow(["step", "term", "value", "omega", "resolution"])
        for _ in range(n):
            state, report = train_step(state)
            reports.append(report)
            if writer is not None:
                for term in report.terms:
                    writer.writerow(
                        [
                            state.step,
                            term.name if not term.skipped else f"{term.name}[skipped]",
                            repr(term.value),
                            term.omega,
                            report.resolution,
                        ]
                    )
                live = [t for t in report.terms if not t.skipped]
                if live:
                    writer.writerow(
                        [state.step, "total", repr(report.total), "", report.resolution]
                    )
    finally:
        if handle is not None:
            handle.close()
    return state, reports


# ---------------------------------------------------------------------------
# checkpointing


def _spec_doc(spec: SyntheticTeacherSpec) -> dict:
    return {
        "channels": spec.channels,
        "summary_dim": spec.summary_dim,
        "patch": spec.patch,
        "semantic_seed": spec.semantic_seed,
        "bias_amplitude": spec.bias_amplitude,
        "bias_pattern": spec.bias_pattern,
        "cone_angle": spec.cone_angle,
        "native": spec.native,
    }


def _run_doc(run: RunConfig) -> dict:
    doc = {
        "steps": run.steps,
        "batch": run.batch,
        "mix_low": run.mix_low,
        "low_pool": list(run.low_pool),
        "high_pool": list(run.high_pool),
        "max_shift": run.max_shift,
        "ema_decay": run.ema_decay,
        "mesa_weight": run.mesa_weight,
        "damp_sigma": run.damp_sigma,
        "summary_mode": run.summary_mode,
        "lr": run.lr,
        "beta1": run.beta1,
        "beta2": run.beta2,
        "adam_eps": run.adam_eps,
        "weight_decay": run.weight_decay,
        "master_seed": run.master_seed,
        "calib_images": run.calib_images,
        "calib_resolution": run.calib_resolution,
        "roster": [
            {
                "name": e.name,
                "spec": _spec_doc(e.spec),
                "weights": {
                    "w_spatial": e.weights.w_spatial,
                    "w_summary": e.weights.w_summary,
                    "w_mesa": e.weights.w_mesa,
                },
            }
            for e in run.roster
        ],
    }
    return doc


def _run_from_doc(doc: dict) -> RunConfig:
    roster = tuple(
        TeacherEntry(
            name=item["name"],
            spec=SyntheticTeacherSpec(**item["spec"]),
            weights=LossWeights(**item["weights"]),
        )
        for item in doc["roster"]
    )
    return RunConfig(
        steps=doc["steps"],
        roster=roster,
        batch=doc["batch"],
        mix_low=doc["mix_low"],
        low_pool=tuple(doc["low_pool"]),
        high_pool=tuple(doc["high_pool"]),
        max_shift=doc["max_shift"],
        ema_decay=doc["ema_decay"],
        mesa_weight=doc["mesa_weight"],
        damp_sigma=doc["damp_sigma"],
        summary_mode=doc["summary_mode"],
        lr=doc["lr"],
        beta1=doc["beta1"],
        beta2=doc["beta2"],
        adam_eps=doc["adam_eps"],
        weight_decay=doc["weight_decay"],
        master_seed=doc["master_seed"],
        calib_images=doc["calib_images"],
        calib_resolution=doc["calib_resolution"],
    )


def save_checkpoint(state: TrainState, path: str) -> None:
    """Serialize the whole training state; reload resumes bit-identically."""
    student = state.student
    meta = {
        "kind": "train-state",
        "step": state.step,
        "student": {
            "dim": student.dim,
            "depth": student.depth,
            "heads": student.heads,
            "patch": student.patch,
            "mlp_ratio": student.mlp_ratio,
            "pos_base": student.pos_base,
            "schedule": ",".join(str(s) for s in student.schedule),
        },
        "run": _run_doc(state.run),
        "rng": {name: rngmod.get_state(gen) for name, gen in state.rngs.items()},
        "teacher_stats": {
            name: {"dispersion": st.dispersion, "sample_count": st.sample_count}
            for name, st in state.stats.items()
        },
    }
    arrays: dict[str, np.ndarray] = {}
    for group, table in (
        ("params", state.params),
        ("ema", state.ema),
        ("opt_m", state.opt_m),
        ("opt_v", state.opt_v),
    ):
        for k in sorted(table):
            arrays[f"{group}/{k}"] = table[k]
    for name in sorted(state.stats):
        st = state.stats[name]
        arrays[f"stats/{name}/channel_mean"] = st.channel_mean
        arrays[f"stats/{name}/channel_scale"] = st.channel_scale
        arrays[f"stats/{name}/mean_dir"] = st.mean_dir
    write_state_file(path, meta, arrays)


def load_checkpoint(path: str) -> TrainState:
    meta, arrays = read_state_file(path)
    if meta.get("kind") != "train-state":
        raise ValueError(f"{path}: not a training checkpoint")
    sdoc = meta["student"]
    student = StudentConfig(
        dim=sdoc["dim"],
        depth=sdoc["depth"],
        heads=sdoc["heads"],
        patch=sdoc["patch"],
        mlp_ratio=sdoc["mlp_ratio"],
        pos_base=sdoc["pos_base"],
    ).with_schedule(sdoc["schedule"])
    run = _run_from_doc(meta["run"])

    def group(prefix: str) -> dict[str, np.ndarray]:
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}

    stats = {}
    for name, sc in meta["teacher_stats"].items():
        stats[name] = TeacherStats(
            channel_mean=arrays[f"stats/{name}/channel_mean"],
            channel_scale=arrays[f"stats/{name}/channel_scale"],
            mean_dir=arrays[f"stats/{name}/mean_dir"],
            dispersion=sc["dispersion"],
            sample_count=sc["sample_count"],
        )
    rngs = rngmod.streams(run.master_seed, ("data", "shifts", "damp"))
    for name, gen in rngs.items():
        rngmod.set_state(gen, meta["rng"][name])
    return TrainState(
        run=run,
        student=student,
        params=group("params"),
        ema=group("ema"),
        opt_m=group("opt_m"),
        opt_v=group("opt_v"),
        stats=stats,
        rngs=rngs,
        step=meta["step"],
    )
