"""Acceptance suite: one test per criterion, each with its own runtime budget.

The outcome of every criterion is printed in the pytest terminal summary.
Criteria 5 and 6 train networks and take tens of minutes; they carry the
``slow`` marker but run by default.
"""
import json
import math
from pathlib import Path

import numpy as np
import pytest

from _cases import (RANK1_LAM, RANK1_PATCH, float64_model, gradient_check, rank1_problem,
                    small_dataset, snr, toy_pipeline)
from _criteria import criterion
from _experiments import run_end_to_end, run_few_shot
from pmrilab.cli import main, replay_argv
from pmrilab.clear import (PatchConfig, annihilation_matrix, clear_reconstruct, extract_patches,
                           null_space_filters, patch_adjoint, patchwise_constant,
                           stacked_patch_vector)
from pmrilab.fourier import apply_adjoint, apply_forward, dc_solve, dc_solve_cg, fft2c
from pmrilab.metrics import dice, snr_db, ssim
from pmrilab.phantom import (AcquisitionConfig, PhantomSpec, make_coil_sensitivities, make_dataset,
                             make_phantom, normalize, sos)
from pmrilab.tensors_io import read_tensor

GOLDEN = Path(__file__).parent / "golden"


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_criterion_1_operator_algebra():
    with criterion(1, "operator algebra", 10) as d:
        rng = np.random.default_rng(100)
        mask = rng.uniform(size=(32, 32)) < 0.3
        g, b = crandn(rng, 4, 32, 32), crandn(rng, 4, 32, 32)

        parseval = abs(np.linalg.norm(fft2c(g)) - np.linalg.norm(g)) / np.linalg.norm(g)
        adj_a = abs(np.vdot(apply_forward(g, mask), b) - np.vdot(g, apply_adjoint(b, mask)))
        adj_a /= abs(np.vdot(apply_forward(g, mask), b))
        cfg = PatchConfig(8, 4)
        pats = extract_patches(g, cfg)
        q = crandn(rng, *pats.shape)
        adj_p = abs(np.vdot(pats, q) - np.vdot(g, patch_adjoint(q, cfg, g.shape)))
        adj_p /= abs(np.vdot(pats, q))
        z = crandn(rng, 4, 32, 32)
        bm = b * mask
        dc = rel(dc_solve(z, bm, mask, 0.7), dc_solve_cg(z, bm, mask, 0.7))

        d.update(parseval=f"{parseval:.1e}", adjoint_A=f"{adj_a:.1e}",
                 adjoint_P=f"{adj_p:.1e}", dc_vs_cg=f"{dc:.1e}")
        assert parseval < 1e-12
        assert adj_a < 1e-10
        assert adj_p < 1e-10
        assert dc < 1e-8


def test_criterion_2_clear_structure():
    with criterion(2, "CLEAR structure", 120) as d:
        img, _ = make_phantom(PhantomSpec(), 3)
        cfg = PatchConfig(8, 8)
        gamma = patchwise_constant(make_coil_sensitivities(64, 64, 4, 3), cfg) * img
        pats = extract_patches(gamma, cfg)
        sv = np.linalg.svd(pats, compute_uv=False)
        live = sv[:, 0] > 0
        ratio = float(np.max(sv[live, 1] / sv[live, 0]))

        # both annihilation relations on every live patch
        worst = 0.0
        centers = cfg.centers(64, 64)
        for p in np.flatnonzero(live):
            basis = null_space_filters(pats[p], center=centers[p])
            s1 = basis.singular_values[0]
            worst = max(worst, np.linalg.norm(pats[p] @ basis.right) / s1)
            pc = stacked_patch_vector(pats[p])
            qc = annihilation_matrix(basis, 4)
            worst = max(worst, np.linalg.norm(qc @ pc) / np.linalg.norm(pc))

        ds, _ = normalize(make_dataset(0, AcquisitionConfig(noise=0.01)))
        _, state = clear_reconstruct(ds.kspace, ds.mask, 1e-4, PatchConfig(8, 4), iters=15)
        before, after = np.array(state.objective_before), np.array(state.objective)
        increase = max(float(np.max(after / before - 1)),
                       float(np.max(before[1:] / after[:-1] - 1)))

        d.update(sigma_ratio=f"{ratio:.1e}", annihilation=f"{worst:.1e}",
                 max_rel_increase=f"{increase:.1e}")
        assert ratio < 1e-10
        assert worst < 1e-10
        assert len(after) == 15 and increase <= 1e-9


def test_criterion_3_clear_recovery():
    with criterion(3, "CLEAR recovery", 300) as d:
        ds, _ = normalize(make_dataset(1, AcquisitionConfig(accel=1.0)))
        full, _ = clear_reconstruct(ds.kspace, ds.mask, 1e-4, PatchConfig(8, 4), iters=2)
        full_snr = snr(sos(full), ds.reference)

        b, mask, truth = rank1_problem()
        gamma, _ = clear_reconstruct(b, mask, RANK1_LAM, RANK1_PATCH, iters=15)
        golden = read_tensor(GOLDEN / "clear_rank1_long.pmri")
        vs_golden = snr(gamma, golden)

        d.update(full_snr=f"{full_snr:.1f} dB", rank1_vs_golden=f"{vs_golden:.1f} dB",
                 rank1_vs_truth=f"{snr(gamma, truth):.1f} dB")
        assert full_snr > 60
        assert vs_golden > 30


def test_criterion_4_autodiff():
    with criterion(4, "autodiff finite differences", 300) as d:
        ds = small_dataset(seed=4, size=32, coils=4, accel=6.0)
        model = float64_model("joint", coils=4, width=16, unrolls=3, lam=100.0, seed=4)
        errors = gradient_check(ds, model, alpha=0.2, per_group=50, step=1e-5, seed=4)
        d.update({g: f"{e:.1e}" for g, e in sorted(errors.items())})
        assert set(errors) == {"enc", "rec", "seg"}
        assert max(errors.values()) < 1e-4


@pytest.fixture(scope="module")
def end_to_end():
    return run_end_to_end()


@pytest.mark.slow
def test_criterion_5_end_to_end_trend(end_to_end):
    with criterion(5, "end-to-end trend", 45 * 60) as d:
        res = end_to_end
        s = res.snr
        d.update({k: f"{v:.2f} dB" for k, v in s.items()})
        d["train_s"] = f"{res.seconds:.0f}"
        assert res.seconds < 45 * 60, f"experiment took {res.seconds:.0f} s"
        assert s["idslr"] >= s["zero-filled"] + 3
        assert s["clear"] >= s["zero-filled"] + 1
        assert s["joint"] >= s["idslr"] - 0.2


@pytest.mark.slow
def test_training_loss_halves(end_to_end):
    for trace in end_to_end.loss_traces.values():
        assert len(trace) == 300
        assert trace[-1] <= 0.5 * trace[0]


@pytest.mark.slow
def test_criterion_6_few_shot_trend():
    with criterion(6, "few-shot trend", 2 * 3600) as d:
        res = run_few_shot()
        shared, cascade = res.degradation("joint"), res.degradation("cascade")
        d.update(shared_degradation=f"{shared:.4f}", cascade_degradation=f"{cascade:.4f}")
        assert shared <= cascade


def test_criterion_7_determinism(tmp_path):
    with criterion(7, "determinism and golden files", 300) as d:
        outputs = toy_pipeline(tmp_path / "a")
        for name, path in outputs.items():
            assert path.read_bytes() == (GOLDEN / name).read_bytes(), name
        replayed = 0
        for sub in ("data", "run"):
            manifest = json.loads((tmp_path / "a" / sub / "manifest.json").read_text())
            assert main(replay_argv(manifest, tmp_path / "b" / sub)) == 0
            for f in sorted((tmp_path / "a" / sub).rglob("*")):
                if f.is_file():
                    twin = tmp_path / "b" / sub / f.relative_to(tmp_path / "a" / sub)
                    assert f.read_bytes() == twin.read_bytes(), f
                    replayed += 1
        d.update(golden_files=len(outputs), replayed_files=replayed)


def test_criterion_8_metric_units():
    with criterion(8, "metric units", 10):
        a = np.zeros((4, 4), int)
        b = np.zeros((4, 4), int)
        a[0, 0] = a[0, 1] = 1
        b[0, 1] = b[0, 2] = 1
        assert dice(a, b, 1) == 0.5
        assert dice(a, a, 1) == 1.0
        x = np.random.default_rng(8).uniform(size=(16, 16))
        e = np.random.default_rng(9).standard_normal((16, 16))
        e *= 0.1 * np.linalg.norm(x) / np.linalg.norm(e)
        assert snr_db(x + e, x) == pytest.approx(20.0, abs=1e-12)
        assert snr_db(np.zeros_like(x), x) == 0.0
        assert snr_db(x, x) == math.inf
        assert ssim(x, x) == 1.0
