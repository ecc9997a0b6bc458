"""Acceptance criteria, one test each.

Every test records a ``CRITERION n: PASS|FAIL`` line that is printed in the
terminal summary, so the outcome of each criterion is visible at a glance.
Run standalone with ``python tests/test_acceptance.py``.
"""

import functools
import time
from collections import defaultdict

import numpy as np
import pytest
from conftest import random_kernel
from test_attack import dense_operator, projected_gradient_oracle
from test_blur import loop_convolve
from test_grad import fd_check

from advdeblur import fixtures
from advdeblur.attack import EPSILONS, STEP_SIZE, STEPS_TARGETED, STEPS_UNTARGETED, AttackConfig, pgd_attack
from advdeblur.blur import BlurModel, adjoint_convolve, convolve_circular, make_blurry
from advdeblur.experiment import ExperimentSpec, read_report, report_header
from advdeblur.grad import Targeted, Untargeted, loss_and_grad
from advdeblur.imaging import load_raw, psnr
from advdeblur.reconstructors import Reconstructor, UnrolledConfig, WienerConfig, reconstruct

RESULTS = {}


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS[number] = f"CRITERION {number}: FAIL  {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
                print(RESULTS[number])
                raise
            RESULTS[number] = f"CRITERION {number}: PASS  {title} [{detail}; {time.perf_counter() - start:.1f}s]"
            print(RESULTS[number])

        return run

    return wrap


def rows_by(report, **match):
    return [r for r in read_report(report) if all(r[k] == v for k, v in match.items())]


@criterion(1, "adjoint identity, 100 random triples at 16x16")
def test_criterion_1_adjoint():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        k = random_kernel(rng, int(rng.choice([1, 3, 5, 7, 9])))
        x, u = rng.normal(size=(2, 16, 16, 1))
        lhs = np.vdot(convolve_circular(x, k), u)
        rhs = np.vdot(x, adjoint_convolve(u, k))
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-9
    assert elapsed < 5.0
    return f"max rel err {worst:.2e}"


@criterion(2, "FFT convolution matches spatial loop oracle, 20 cases")
def test_criterion_2_loop_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        k = random_kernel(rng, int(rng.choice([3, 5, 7])))
        x = rng.uniform(size=(16, 16, int(rng.choice([1, 3]))))
        worst = max(worst, float(np.max(np.abs(convolve_circular(x, k) - loop_convolve(x, k)))))
    assert worst < 1e-5
    return f"max abs err {worst:.2e}"


@criterion(3, "loss_and_grad matches central differences, 3 kinds x 2 modes")
def test_criterion_3_gradients(trained_cnn):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    recons = [
        Reconstructor(WienerConfig(), random_kernel(rng, 3)),
        Reconstructor(UnrolledConfig(steps=10), random_kernel(rng, 3)),
        Reconstructor(trained_cnn[0]),
    ]
    for r in recons:
        for mode in ("untargeted", "targeted"):
            y = rng.uniform(size=(8, 8, 1))
            loss = Untargeted(reconstruct(r, y)) if mode == "untargeted" else Targeted(rng.uniform(size=y.shape))
            delta = rng.uniform(-8 / 255, 8 / 255, size=y.shape)
            _, g = loss_and_grad(r, y, delta, loss)
            fd_check(lambda d: loss_and_grad(r, y, d, loss)[0], g, delta, rng, r=r, offset=y, coords=20)
    elapsed = time.perf_counter() - start
    assert elapsed < 60
    return "6 cases x 20 coordinates within 1e-4 relative"


@criterion(4, "noiseless Wiener inversion at lambda=1e-8 exceeds 80 dB on fixtures")
def test_criterion_4_wiener_exact():
    worst = np.inf
    for x in fixtures.source_images().values():
        for k in fixtures.fixture_kernels().values():
            y = make_blurry(x, BlurModel(k, 0.0))
            worst = min(worst, psnr(reconstruct(Reconstructor(WienerConfig(1e-8), k), y), x))
    assert worst > 80
    return f"min psnr {worst:.1f} dB over 9 pairs"


@criterion(5, "targeted PGD on Wiener within 5% of the projected-gradient oracle")
def test_criterion_5_convex_oracle():
    rng = np.random.default_rng(5)
    eps = 8 / 255
    x = rng.uniform(size=(8, 8, 1))
    k = random_kernel(rng, 3)
    y = make_blurry(x, BlurModel(k, 0.01, 5))
    t = rng.uniform(size=y.shape)
    r = Reconstructor(WienerConfig(), k)
    W = dense_operator(r, y.shape)
    oracle = projected_gradient_oracle(W, W @ y.ravel() - t.ravel(), eps, 1e-5, 200_000)
    res = pgd_attack(r, y, AttackConfig(mode="targeted", epsilon=eps, num_steps=2000), target=t)
    rel = abs(res.best_objective - oracle) / oracle
    assert rel <= 0.05
    return f"pgd {res.best_objective:.6f} vs oracle {oracle:.6f}, rel {rel:.1e}"


@pytest.mark.slow
@criterion(6, "max |delta| <= eps + 1e-9 at every recorded step of every grid attack")
def test_criterion_6_constraint(grid_report):
    rows = read_report(grid_report)
    assert rows and all(r["status"] == "ok" for r in rows)
    root = grid_report.parent
    worst = -np.inf
    for r in rows:
        eps = float(r["eps"])
        assert float(r["delta_linf_max"]) <= eps + 1e-9
        stored = float(np.max(np.abs(load_raw(root / r["artifacts"] / "delta.dbim"))))
        assert stored <= np.float32(eps) + 1e-9
        worst = max(worst, float(r["delta_linf_max"]) - eps)
    return f"{len(rows)} attacks, max excess {worst:.1e}"


@pytest.mark.slow
@criterion(7, "protocol defaults in config and report header")
def test_criterion_7_defaults(grid_report):
    assert STEP_SIZE == 1e-3 and STEPS_UNTARGETED == 250 and STEPS_TARGETED == 500
    assert EPSILONS == (4 / 255, 8 / 255, 12 / 255)
    assert AttackConfig(mode="untargeted").num_steps == 250 and AttackConfig(mode="targeted").num_steps == 500
    assert AttackConfig().step_size == 1e-3
    expected = ["step_size=0.001", "steps_untargeted=250", "steps_targeted=500", "epsilons=4/255,8/255,12/255"]
    default_header = report_header(ExperimentSpec(images=["x"], kernels=["k"], reconstructors={"wiener": WienerConfig()}))
    header = [ln[2:] for ln in grid_report.read_text().splitlines() if ln.startswith("# ")]
    for line in expected:
        assert line in default_header
        assert line in header
    return ", ".join(expected)


@pytest.mark.slow
@criterion(8, "trend reproduction on the fixture grid")
def test_criterion_8_trends(grid_report):
    rows = read_report(grid_report)
    untargeted = [r for r in rows if r["mode"] == "untargeted"]
    # (a) attacked PSNR non-increasing in eps, every reconstructor and cell
    cells = defaultdict(dict)
    for r in untargeted:
        cells[(r["image"], r["kernel"], r["recon"])][float(r["eps"])] = float(r["adv_psnr_src"])
    for key, by_eps in cells.items():
        values = [by_eps[e] for e in sorted(by_eps)]
        assert all(b <= a for a, b in zip(values, values[1:])), (key, values)

    # (b) CNN untargeted degradation at 4/255 exceeds unrolled
    def degradation(recon):
        sel = [r for r in untargeted if r["recon"] == recon and r["eps_255"] == "4"]
        return np.array([float(r["clean_psnr_src"]) - float(r["adv_psnr_src"]) for r in sel])

    cnn_deg, unrolled_deg = degradation("cnn"), degradation("unrolled")
    assert cnn_deg.mean() > unrolled_deg.mean()
    wins_b = int(np.sum(cnn_deg > unrolled_deg))

    # (c) targeted similarity-to-target gain, CNN above unrolled at every eps
    gains = {}
    for recon in ("cnn", "unrolled"):
        for e in ("4", "8", "12"):
            sel = [r for r in rows if r["mode"] == "targeted" and r["recon"] == recon and r["eps_255"] == e]
            gains[recon, e] = np.mean([float(r["adv_psnr_tgt"]) - float(r["clean_psnr_tgt"]) for r in sel])
    for e in ("4", "8", "12"):
        assert gains["cnn", e] > gains["unrolled", e]

    # runtime: serial sum of per-cell wall times
    with open(grid_report.parent / "timings.csv") as fh:
        serial = sum(float(line.split(",")[1]) for line in list(fh)[1:])
    assert serial < 15 * 60
    return (f"(b) mean drop cnn {cnn_deg.mean():.2f} dB vs unrolled {unrolled_deg.mean():.2f} dB, cnn larger in {wins_b}/9 cells; "
            f"(c) gain at 4/255 cnn {gains['cnn', '4']:.2f} vs unrolled {gains['unrolled', '4']:.2f} dB; "
            f"serial grid time {serial / 60:.1f} min")


@pytest.mark.slow
@criterion(9, "K=10-crafted perturbations degrade K=50 reconstructions on every cell")
def test_criterion_9_transfer(grid_report):
    rows = [r for r in read_report(grid_report) if r["recon"] == "unrolled"]
    assert rows
    margins = [float(r["eval_clean_psnr_src"]) - float(r["eval_adv_psnr_src"]) for r in rows]
    assert all(r["eval_steps"] == "50" for r in rows)
    assert min(margins) > 0, min(margins)
    return f"{len(rows)} unrolled cells, min drop {min(margins):.3f} dB"


@pytest.mark.slow
@criterion(10, "byte-identical grid report across runs and worker counts 1 and 8")
def test_criterion_10_determinism(grid_report, grid_report_threads8):
    a, b = grid_report.read_bytes(), grid_report_threads8.read_bytes()
    assert a == b
    return f"{len(a)} bytes identical"


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
