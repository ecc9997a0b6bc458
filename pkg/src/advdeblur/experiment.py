"""Dataset synthesis and experiment orchestration.

A grid run attacks every (image, kernel, reconstructor, mode, epsilon) cell,
writes per-cell artifacts, and assembles a CSV report whose row order and
contents depend only on the spec, never on worker scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

import numpy as np
from threadpoolctl import threadpool_limits

from . import cnn
from .attack import (
    EPSILONS,
    MODES,
    STEP_SIZE,
    STEPS_TARGETED,
    STEPS_UNTARGETED,
    AttackConfig,
    pgd_attack,
    save_result,
    transfer_eval,
)
from .blur import DEFAULT_NOISE_SIGMA, BlurModel, make_blurry
from .imaging import Kernel, as_image, evaluate, load_kernel, load_raw, save_raw, save_viewable
from .reconstructors import (
    DEFAULT_CRAFT_STEPS,
    DEFAULT_EVAL_STEPS,
    Reconstructor,
    UnrolledConfig,
    WienerConfig,
    reconstruct,
)

log = logging.getLogger(__name__)

DELTA_VIEW_GAIN = 8.0
SWEEP_EPSILON = 4 / 255
SWEEP_SIZES = (11, 17, 25)

REPORT_COLUMNS = [
    "image", "kernel", "recon", "mode", "eps", "eps_255", "status", "best_step", "delta_linf_max",
    "clean_psnr_src", "clean_ncc_src", "adv_psnr_src", "adv_ncc_src",
    "clean_psnr_tgt", "clean_ncc_tgt", "adv_psnr_tgt", "adv_ncc_tgt",
    "eval_steps", "eval_clean_psnr_src", "eval_clean_ncc_src", "eval_adv_psnr_src", "eval_adv_ncc_src",
    "eval_adv_psnr_tgt", "eval_adv_ncc_tgt",
    "artifacts",
]
SUMMARY_METRICS = [
    "clean_psnr_src", "clean_ncc_src", "adv_psnr_src", "adv_ncc_src",
    "clean_psnr_tgt", "clean_ncc_tgt", "adv_psnr_tgt", "adv_ncc_tgt",
    "eval_clean_psnr_src", "eval_adv_psnr_src",
]
SWEEP_COLUMNS = [
    "size", "kernel", "recon", "n_images", "eps", "status",
    "clean_psnr_tgt", "adv_psnr_tgt", "gain_psnr_tgt", "clean_ncc_tgt", "adv_ncc_tgt", "adv_psnr_src",
]


class SpecError(ValueError):
    """Invalid experiment spec."""


@dataclass(frozen=True)
class FixedTarget:
    path: Path


@dataclass(frozen=True)
class LocalizedTarget:
    patch: Path
    rect: tuple  # x, y, w, h


@dataclass
class ExperimentSpec:
    images: list
    kernels: list
    reconstructors: dict  # id -> WienerConfig | UnrolledConfig | Path to CNN weights
    epsilons: list = field(default_factory=lambda: list(EPSILONS))
    modes: list = field(default_factory=lambda: list(MODES))
    target_policy: Optional[Union[FixedTarget, LocalizedTarget]] = None
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    master_seed: int = 0
    output_dir: Path = Path("out")
    eval_steps: int = DEFAULT_EVAL_STEPS
    step_size: float = STEP_SIZE
    steps_untargeted: int = STEPS_UNTARGETED
    steps_targeted: int = STEPS_TARGETED
    clamp_input: bool = False

    def validate(self) -> None:
        for name in ("images", "kernels", "reconstructors", "epsilons", "modes"):
            if not getattr(self, name):
                raise SpecError(f"spec needs at least one entry in '{name}'")
        for m in self.modes:
            if m not in MODES:
                raise SpecError(f"unknown mode {m!r}")
        if "targeted" in self.modes and self.target_policy is None:
            raise SpecError("targeted mode needs 'target' or 'target_patch' + 'target_rect'")
        if any(e < 0 for e in self.epsilons):
            raise SpecError("epsilons must be >= 0")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")
        for ids in (self.image_ids, self.kernel_ids):
            if len(set(ids)) != len(ids):
                raise SpecError(f"duplicate file names in {ids}")

    @property
    def image_ids(self) -> list:
        return [Path(p).stem for p in self.images]

    @property
    def kernel_ids(self) -> list:
        return [Path(p).stem for p in self.kernels]

    def attack_config(self, mode: str, epsilon: float, seed: int) -> AttackConfig:
        steps = self.steps_targeted if mode == "targeted" else self.steps_untargeted
        return AttackConfig(
            mode=mode, epsilon=epsilon, num_steps=steps, step_size=self.step_size,
            seed=seed, clamp_input=self.clamp_input,
        )


# -- spec files ----------------------------------------------------------------

_RECON_KEYS = {
    "wiener_lambda", "unrolled_steps", "unrolled_eval_steps", "unrolled_step_size",
    "unrolled_tv_weight", "unrolled_charbonnier_eps", "cnn_weights",
}
_KNOWN_KEYS = {
    "images", "kernels", "reconstructors", "epsilons", "modes", "target", "target_patch",
    "target_rect", "noise_sigma", "master_seed", "output_dir", "step_size",
    "steps_untargeted", "steps_targeted", "clamp_input",
} | _RECON_KEYS


def parse_epsilon(text: str) -> float:
    """Accept ``0.0157`` as well as ``4/255``."""
    text = text.strip()
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise SpecError(f"bad epsilon {text!r}") from None


def format_epsilon(eps: float) -> str:
    k = eps * 255
    if abs(k - round(k)) < 1e-9:
        return f"{int(round(k))}/255"
    return repr(eps)


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise SpecError(f"bad boolean {text!r}")


def parse_spec(text: str, base_dir=".") -> ExperimentSpec:
    base = Path(base_dir)
    kv = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise SpecError(f"line {n}: unknown key {key!r}")
        if key in kv:
            raise SpecError(f"line {n}: duplicate key {key!r}")
        kv[key] = value

    def items(key):
        return [s.strip() for s in kv.get(key, "").split(",") if s.strip()]

    def path(p):
        return (base / p) if not Path(p).is_absolute() else Path(p)

    try:
        wiener = WienerConfig(float(kv.get("wiener_lambda", WienerConfig().lam)))
        unrolled = UnrolledConfig(
            steps=int(kv.get("unrolled_steps", DEFAULT_CRAFT_STEPS)),
            step_size=float(kv.get("unrolled_step_size", UnrolledConfig().step_size)),
            tv_weight=float(kv.get("unrolled_tv_weight", UnrolledConfig().tv_weight)),
            charbonnier_eps=float(kv.get("unrolled_charbonnier_eps", UnrolledConfig().charbonnier_eps)),
        )
        recons = {}
        for rid in items("reconstructors"):
            if rid == "wiener":
                recons[rid] = wiener
            elif rid == "unrolled":
                recons[rid] = unrolled
            elif rid == "cnn":
                if "cnn_weights" not in kv:
                    raise SpecError("reconstructor 'cnn' needs 'cnn_weights'")
                recons[rid] = path(kv["cnn_weights"])
            else:
                raise SpecError(f"unknown reconstructor {rid!r}")

        target = None
        if "target" in kv:
            if "target_patch" in kv:
                raise SpecError("give either 'target' or 'target_patch', not both")
            target = FixedTarget(path(kv["target"]))
        elif "target_patch" in kv:
            rect = tuple(int(v) for v in items("target_rect"))
            if len(rect) != 4:
                raise SpecError("'target_rect' must be x, y, w, h")
            target = LocalizedTarget(path(kv["target_patch"]), rect)

        spec = ExperimentSpec(
            images=[path(p) for p in items("images")],
            kernels=[path(p) for p in items("kernels")],
            reconstructors=recons,
            epsilons=[parse_epsilon(e) for e in items("epsilons")] if "epsilons" in kv else list(EPSILONS),
            modes=items("modes") if "modes" in kv else list(MODES),
            target_policy=target,
            noise_sigma=float(kv.get("noise_sigma", DEFAULT_NOISE_SIGMA)),
            master_seed=int(kv.get("master_seed", 0)),
            output_dir=path(kv.get("output_dir", "out")),
            eval_steps=int(kv.get("unrolled_eval_steps", DEFAULT_EVAL_STEPS)),
            step_size=float(kv.get("step_size", STEP_SIZE)),
            steps_untargeted=int(kv.get("steps_untargeted", STEPS_UNTARGETED)),
            steps_targeted=int(kv.get("steps_targeted", STEPS_TARGETED)),
            clamp_input=_parse_bool(kv.get("clamp_input", "false")),
        )
    except SpecError:
        raise
    except ValueError as exc:
        raise SpecError(str(exc)) from None
    spec.validate()
    return spec


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    return parse_spec(path.read_text(encoding="utf-8"), path.parent)


# -- dataset -------------------------------------------------------------------

def derive_seed(*parts) -> int:
    """64-bit seed from a master seed and cell identifiers."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True, eq=False)
class Sample:
    image_id: str
    kernel_id: str
    x: np.ndarray
    y: np.ndarray
    kernel: Kernel


def _load(loader, path, what):
    try:
        return loader(path)
    except (OSError, ValueError) as exc:
        raise SpecError(f"cannot load {what} {path}: {exc}") from None


def build_dataset(spec: ExperimentSpec) -> list:
    """One blurred observation per (image, kernel) pair, seeded per pair."""
    images = [(i, as_image(_load(load_raw, p, "image"))) for i, p in zip(spec.image_ids, spec.images)]
    kernels = [(k, _load(load_kernel, p, "kernel")) for k, p in zip(spec.kernel_ids, spec.kernels)]
    out = []
    for image_id, x in images:
        for kernel_id, k in kernels:
            seed = derive_seed(spec.master_seed, image_id, kernel_id)
            y = make_blurry(x, BlurModel(k, spec.noise_sigma, seed))
            out.append(Sample(image_id, kernel_id, x, y, k))
    return out


def compose_localized_target(clean_recon, patch, rect) -> np.ndarray:
    """Copy of ``clean_recon`` with the ``(x, y, w, h)`` region replaced by ``patch``."""
    clean = as_image(clean_recon)
    x0, y0, w, h = (int(v) for v in rect)
    if min(x0, y0, w, h) < 0 or x0 + w > clean.shape[1] or y0 + h > clean.shape[0]:
        raise ValueError(f"rect {tuple(rect)} outside {clean.shape[1]}x{clean.shape[0]} image")
    out = clean.copy()
    if w == 0 or h == 0:
        return out
    patch = as_image(patch)
    if patch.shape != (h, w, clean.shape[2]):
        raise ValueError(f"patch shape {patch.shape} != rect shape {(h, w, clean.shape[2])}")
    out[y0:y0 + h, x0:x0 + w] = patch
    return out


# -- cells ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Cell:
    index: int
    sample: Sample
    recon_id: str
    config: object
    mode: str
    epsilon: float
    attack: AttackConfig
    target: Optional[np.ndarray]  # fixed target image
    patch: Optional[np.ndarray]  # localized target insert
    rect: Optional[tuple]
    eval_steps: int
    artifact_dir: Path
    relative_dir: str


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _eps_dir(eps: float) -> str:
    k = eps * 255
    return f"eps{int(round(k))}" if abs(k - round(k)) < 1e-9 else f"eps{eps:.6g}"


def _viewable_name(stem, like):
    return f"{stem}.pgm" if like.shape[2] == 1 else f"{stem}.ppm"


def _save_image(img, directory: Path, name: str):
    save_raw(img, directory / f"{name}.dbim")
    save_viewable(img, directory / _viewable_name(name, img))


def run_cell(cell: Cell) -> tuple:
    """Attack one grid cell. Returns ``(index, row dict, wall seconds)``."""
    start = time.perf_counter()
    s = cell.sample
    row = {
        "image": s.image_id, "kernel": s.kernel_id, "recon": cell.recon_id, "mode": cell.mode,
        "eps": f"{cell.epsilon:.10g}", "eps_255": f"{cell.epsilon * 255:.6g}", "artifacts": cell.relative_dir,
    }
    try:
        with threadpool_limits(1):
            _attack_cell(cell, row)
        row["status"] = "ok"
    except Exception as exc:  # per-cell failures are recorded, the run continues
        log.warning("cell %s failed: %s", cell.relative_dir, exc)
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return cell.index, row, time.perf_counter() - start


def _attack_cell(cell: Cell, row: dict) -> None:
    s = cell.sample
    config = cell.config
    if isinstance(config, cnn.CnnConfig):
        r = Reconstructor(config)
    else:
        r = Reconstructor(config, s.kernel)
    clean = reconstruct(r, s.y)
    target = None
    if cell.mode == "targeted":
        if cell.patch is not None:
            target = compose_localized_target(clean, cell.patch, cell.rect)
        else:
            target = cell.target
    result = pgd_attack(r, s.y, cell.attack, target=target)
    clean_m = evaluate(clean, s.x, target)
    adv_m = evaluate(result.adversarial_output, s.x, target)

    d = cell.artifact_dir
    d.mkdir(parents=True, exist_ok=True)
    save_result(result, d)
    _save_image(clean, d, "clean")
    save_viewable(result.adversarial_input, d / _viewable_name("adv_input", clean))
    save_viewable(result.adversarial_output, d / _viewable_name("adv_output", clean))
    save_viewable(result.delta * DELTA_VIEW_GAIN + 0.5, d / _viewable_name("delta_x8", clean))
    if target is not None:
        _save_image(target, d, "target")

    row.update(
        best_step=result.best_step,
        delta_linf_max=f"{max(result.linf_trace):.12g}",
        clean_psnr_src=_fmt(clean_m.psnr_source), clean_ncc_src=_fmt(clean_m.ncc_source),
        adv_psnr_src=_fmt(adv_m.psnr_source), adv_ncc_src=_fmt(adv_m.ncc_source),
        clean_psnr_tgt=_fmt(clean_m.psnr_target), clean_ncc_tgt=_fmt(clean_m.ncc_target),
        adv_psnr_tgt=_fmt(adv_m.psnr_target), adv_ncc_tgt=_fmt(adv_m.ncc_target),
    )
    if r.kind == "unrolled":
        r_eval = r.with_steps(cell.eval_steps)
        clean_eval = evaluate(reconstruct(r_eval, s.y), s.x)
        moved = transfer_eval(r, r_eval, result, s.y, s.x)
        row.update(
            eval_steps=cell.eval_steps,
            eval_clean_psnr_src=_fmt(clean_eval.psnr_source), eval_clean_ncc_src=_fmt(clean_eval.ncc_source),
            eval_adv_psnr_src=_fmt(moved.psnr_source), eval_adv_ncc_src=_fmt(moved.ncc_source),
            eval_adv_psnr_tgt=_fmt(moved.psnr_target), eval_adv_ncc_tgt=_fmt(moved.ncc_target),
        )


def _resolve_configs(spec: ExperimentSpec) -> dict:
    out = {}
    for rid, cfg in spec.reconstructors.items():
        if isinstance(cfg, (str, Path)):
            cfg = _load(cnn.load_weights, cfg, "cnn weights")
        out[rid] = cfg
    return out


def _load_targets(spec: ExperimentSpec):
    policy = spec.target_policy
    if isinstance(policy, FixedTarget):
        return as_image(_load(load_raw, policy.path, "target")), None, None
    if isinstance(policy, LocalizedTarget):
        return None, as_image(_load(load_raw, policy.patch, "target patch")), policy.rect
    return None, None, None


def make_cells(spec: ExperimentSpec, samples=None, root: Optional[Path] = None) -> list:
    """Grid cells in canonical order: image, kernel, reconstructor, mode, epsilon."""
    samples = samples if samples is not None else build_dataset(spec)
    configs = _resolve_configs(spec)
    target, patch, rect = _load_targets(spec)
    root = Path(root or spec.output_dir)
    cells = []
    for s in samples:
        for rid, cfg in configs.items():
            for mode in spec.modes:
                for eps in spec.epsilons:
                    rel = f"{s.image_id}/{s.kernel_id}/{rid}/{mode}/{_eps_dir(eps)}"
                    seed = derive_seed(spec.master_seed, s.image_id, s.kernel_id, rid, mode, format_epsilon(eps))
                    cells.append(Cell(
                        index=len(cells), sample=s, recon_id=rid, config=cfg, mode=mode, epsilon=eps,
                        attack=spec.attack_config(mode, eps, seed),
                        target=target if mode == "targeted" else None,
                        patch=patch if mode == "targeted" else None,
                        rect=rect, eval_steps=spec.eval_steps,
                        artifact_dir=root / rel, relative_dir=rel,
                    ))
    return cells


def execute(cells: list, threads: int = 1) -> list:
    """Run cells on a bounded process pool; results come back in cell order."""
    if threads <= 1 or len(cells) <= 1:
        results = [run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, cells))
    return sorted(results, key=lambda r: r[0])


def report_header(spec: ExperimentSpec) -> list:
    """Protocol constants written as ``#`` comment lines above the CSV header."""
    probe = AttackConfig()
    return [
        "advdeblur grid report",
        f"step_size={spec.step_size!r}",
        f"steps_untargeted={spec.steps_untargeted}",
        f"steps_targeted={spec.steps_targeted}",
        "epsilons=" + ",".join(format_epsilon(e) for e in spec.epsilons),
        f"adam_beta1={probe.adam_beta1} adam_beta2={probe.adam_beta2} adam_eps={probe.adam_eps}",
        f"init_untargeted={AttackConfig(mode='untargeted').init} init_targeted={AttackConfig(mode='targeted').init}",
        f"clamp_input={str(spec.clamp_input).lower()}",
        f"noise_sigma={spec.noise_sigma!r} master_seed={spec.master_seed}",
        f"unrolled_eval_steps={spec.eval_steps}",
        "aggregation=per-cell rows; means in summary.csv",
    ]


def _write_csv(path: Path, header_lines: list, columns: list, rows: list) -> None:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({c: row.get(c, "") for c in columns})
    path.write_text(buf.getvalue(), encoding="utf-8")


def summarize(rows: list) -> list:
    """Mean of each metric over images and kernels per (recon, mode, eps)."""
    groups = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        groups.setdefault((row["recon"], row["mode"], row["eps"]), []).append(row)
    out = []
    for (rid, mode, eps), members in groups.items():
        entry = {"aggregate": "mean", "recon": rid, "mode": mode, "eps": eps,
                 "eps_255": members[0]["eps_255"], "n_cells": len(members)}
        for col in SUMMARY_METRICS:
            vals = [float(m[col]) for m in members if m.get(col, "") != ""]
            entry[col] = f"{np.mean(vals):.6f}" if vals else ""
        out.append(entry)
    return out


def run_grid(spec: ExperimentSpec, threads: int = 1) -> Path:
    """Run the full grid; returns the path of ``report.csv``."""
    spec.validate()
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = make_cells(spec)
    log.info("running %d cells on %d worker(s)", len(cells), threads)
    results = execute(cells, threads)
    rows = [row for _, row, _ in results]
    header = report_header(spec)
    report = out / "report.csv"
    _write_csv(report, header, REPORT_COLUMNS, rows)
    _write_csv(out / "summary.csv", header, ["aggregate", "recon", "mode", "eps", "eps_255", "n_cells"] + SUMMARY_METRICS, summarize(rows))
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["artifacts", "wall_seconds"])
        for (_, row, secs) in results:
            w.writerow([row["artifacts"], f"{secs:.3f}"])
    return report


def read_report(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def kernel_size_sweep(spec: ExperimentSpec, sizes=SWEEP_SIZES, threads: int = 1) -> Path:
    """Localized targeted attacks at 4/255 while the blur kernel size varies.

    Size 1 selects a delta kernel as a no-blur control. Every other size must
    match one of the spec's kernels. One row per (size, reconstructor) with
    metrics averaged over the spec's images.
    """
    sizes = [int(s) for s in sizes]
    if len(set(sizes)) != len(sizes):
        raise SpecError("duplicate sweep point")
    if not isinstance(spec.target_policy, LocalizedTarget):
        raise SpecError("kernel sweep needs a localized target ('target_patch' + 'target_rect')")
    by_size = {}
    for kid, p in zip(spec.kernel_ids, spec.kernels):
        k = _load(load_kernel, p, "kernel")
        by_size.setdefault(k.size, (kid, k))
    kernels = []
    for size in sizes:
        if size == 1:
            kernels.append(("delta", Kernel.delta(1)))
        elif size in by_size:
            kernels.append(by_size[size])
        else:
            raise SpecError(f"no kernel of size {size} in spec")

    images = [(i, as_image(_load(load_raw, p, "image"))) for i, p in zip(spec.image_ids, spec.images)]
    samples = []
    for image_id, x in images:
        for kid, k in kernels:
            seed = derive_seed(spec.master_seed, image_id, kid)
            samples.append(Sample(image_id, kid, x, make_blurry(x, BlurModel(k, spec.noise_sigma, seed)), k))
    sweep_spec = replace(spec, modes=["targeted"], epsilons=[SWEEP_EPSILON])
    out = Path(spec.output_dir) / "kernel_sweep"
    cells = make_cells(sweep_spec, samples, root=out)
    results = execute(cells, threads)

    rows = []
    for (kid, _), size in zip(kernels, sizes):
        for rid in spec.reconstructors:
            members = [r for _, r, _ in results if r["kernel"] == kid and r["recon"] == rid]
            ok = [m for m in members if m["status"] == "ok"]
            row = {"size": size, "kernel": kid, "recon": rid, "n_images": len(ok),
                   "eps": format_epsilon(SWEEP_EPSILON),
                   "status": "ok" if len(ok) == len(members) else f"{len(members) - len(ok)} failed"}
            if ok:
                mean = {c: float(np.mean([float(m[c]) for m in ok]))
                        for c in ("clean_psnr_tgt", "adv_psnr_tgt", "clean_ncc_tgt", "adv_ncc_tgt", "adv_psnr_src")}
                row.update({c: f"{v:.6f}" for c, v in mean.items()})
                row["gain_psnr_tgt"] = f"{mean['adv_psnr_tgt'] - mean['clean_psnr_tgt']:.6f}"
            rows.append(row)
    report = out / "sweep.csv"
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(report, report_header(sweep_spec) + ["kernel size sweep, localized target, means over images"], SWEEP_COLUMNS, rows)
    return report
