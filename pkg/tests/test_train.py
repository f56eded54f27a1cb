import warnings

import numpy as np
import pytest

from deft.adapters import AdapterConfig, init_adapter, merge, trainables
from deft.decompose import Backend
from deft.matcore import make_rng
from deft.train import (
    DivergenceError,
    ToyTask,
    grad,
    loss_mse,
    make_teacher_noise_task,
    make_teacher_shift_task,
    report_to_csv,
    run_finetune,
    sgd_step,
    summary_line,
)


def fd_grad(state, task, name, h=1e-6):
    """Central-difference gradient of loss_mse w.r.t. one trainable."""
    arr = trainables(state)[name]
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        state.stale = True
        hi = loss_mse(state, task)
        arr[idx] = orig - h
        state.stale = True
        lo = loss_mse(state, task)
        arr[idx] = orig
        state.stale = True
        out[idx] = (hi - lo) / (2.0 * h)
    return out


def rel_dev(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / scale


def small_task(seed, m=6, n=4):
    rng = make_rng(seed)
    w0 = rng.normal(size=(m, n))
    teacher = w0 + rng.normal(size=(m, n))
    inputs = rng.normal(size=(n, 5))
    return w0, ToyTask(teacher=teacher, inputs=inputs, targets=teacher @ inputs)


class TestGradients:
    def test_deft_relax_matches_finite_differences(self):
        w0, task = small_task(0)
        state = init_adapter(
            w0, AdapterConfig("deft", 2, backend=Backend("relax", 2), init_stddev=0.5, seed=1)
        )
        state.r = make_rng(2).normal(size=(2, 4))
        state.stale = True
        g = grad(state, task)
        assert rel_dev(g["p_latent"], fd_grad(state, task, "p_latent")) < 1e-5
        assert rel_dev(g["r"], fd_grad(state, task, "r")) < 1e-5

    def test_para_relax_matches_finite_differences(self):
        w0, task = small_task(3)
        state = init_adapter(
            w0, AdapterConfig("para", 2, backend=Backend("relax", 2), init_stddev=0.5, seed=4)
        )
        g = grad(state, task)
        assert rel_dev(g["q_latent"], fd_grad(state, task, "q_latent")) < 1e-5

    def test_lora_matches_finite_differences(self):
        w0, task = small_task(5)
        state = init_adapter(w0, AdapterConfig("lora", 2, alpha=4.0, init_stddev=0.5, seed=6))
        state.b_lo = make_rng(7).normal(size=(6, 2))
        g = grad(state, task)
        assert rel_dev(g["a"], fd_grad(state, task, "a")) < 1e-5
        assert rel_dev(g["b_lo"], fd_grad(state, task, "b_lo")) < 1e-5

    def test_relax_nmf_masks_clipped_entries(self):
        w0, task = small_task(8)
        state = init_adapter(
            w0, AdapterConfig("deft", 2, backend=Backend("relax_nmf", 2), init_stddev=0.5, seed=9)
        )
        # keep every entry well away from the max(., 0) kink
        latent = state.p_latent
        latent[np.abs(latent) < 0.2] = 0.25
        state.stale = True
        g = grad(state, task)
        assert (g["p_latent"][latent <= 0.0] == 0.0).all()
        assert rel_dev(g["p_latent"], fd_grad(state, task, "p_latent")) < 1e-5

    def test_lora_zero_b_means_zero_a_gradient(self):
        w0, task = small_task(10)
        state = init_adapter(w0, AdapterConfig("lora", 3, init_stddev=0.4, seed=11))
        g = grad(state, task)
        assert not g["a"].any()
        assert g["b_lo"].any()

    def test_grad_keys_match_trainables(self):
        w0, task = small_task(12)
        for method in ("lora", "para", "deft"):
            backend = None if method == "lora" else Backend("relax", 2)
            state = init_adapter(w0, AdapterConfig(method, 2, backend=backend, init_stddev=0.3))
            assert list(grad(state, task)) == list(trainables(state)), method

    def test_descent_direction(self):
        w0, task = small_task(13)
        cfg = AdapterConfig(
            "deft", 2, backend=Backend("relax", 2), lr_p=1e-3, lr_r=1e-3, init_stddev=0.5, seed=14
        )
        state = init_adapter(w0, cfg)
        before = loss_mse(state, task)
        sgd_step(state, grad(state, task), cfg)
        assert loss_mse(state, task) < before


class TestSgdStep:
    def test_rate_mapping(self):
        w0, task = small_task(15)
        cfg = AdapterConfig(
            "deft", 2, backend=Backend("relax", 2), lr_p=0.5, lr_r=2.0, init_stddev=0.3, seed=16
        )
        state = init_adapter(w0, cfg)
        state.r = make_rng(17).normal(size=(2, 4))
        state.stale = True
        g = grad(state, task)
        p_before = state.p_latent.copy()
        r_before = state.r.copy()
        sgd_step(state, g, cfg)
        assert np.allclose(state.p_latent, p_before - 0.5 * g["p_latent"])
        assert np.allclose(state.r, r_before - 2.0 * g["r"])
        assert state.stale

    def test_lora_rates(self):
        w0, task = small_task(18)
        cfg = AdapterConfig("lora", 2, lr_p=0.1, lr_r=0.3, init_stddev=0.4, seed=19)
        state = init_adapter(w0, cfg)
        state.b_lo = make_rng(20).normal(size=(6, 2))
        g = grad(state, task)
        a_before = state.a.copy()
        b_before = state.b_lo.copy()
        sgd_step(state, g, cfg)
        assert np.allclose(state.a, a_before - 0.1 * g["a"])
        assert np.allclose(state.b_lo, b_before - 0.3 * g["b_lo"])


class TestTasks:
    def test_shift_task_geometry(self):
        w0 = make_rng(21).normal(size=(8, 6))
        task = make_teacher_shift_task(w0, seed=22, shift_scale=1.5, input_scale=4.0)
        shift = task.teacher - w0
        s = np.linalg.svd(shift, compute_uv=False)
        assert abs(s[0] - 1.5) < 1e-12  # rank-1 with the requested magnitude
        assert s[1:].max() < 1e-12
        gram = task.inputs.T @ task.inputs
        assert np.abs(gram - 16.0 * np.eye(6)).max() < 1e-10
        assert np.array_equal(task.targets, task.teacher @ task.inputs)

    def test_shift_task_batch_bounds(self):
        w0 = make_rng(23).normal(size=(5, 4))
        task = make_teacher_shift_task(w0, seed=24, batch=2)
        assert task.inputs.shape == (4, 2)
        with pytest.raises(ValueError):
            make_teacher_shift_task(w0, seed=24, batch=5)

    def test_noise_task_floor(self):
        w0 = make_rng(25).normal(size=(6, 5))
        clean = make_teacher_noise_task(w0, seed=26, noise_stddev=0.0)
        assert np.array_equal(clean.targets, w0 @ clean.inputs)
        noisy = make_teacher_noise_task(w0, seed=26, noise_stddev=0.1)
        assert not np.array_equal(noisy.targets, w0 @ noisy.inputs)
        assert noisy.teacher is not w0

    def test_determinism(self):
        w0 = make_rng(27).normal(size=(6, 5))
        t1 = make_teacher_shift_task(w0, seed=28)
        t2 = make_teacher_shift_task(w0, seed=28)
        assert np.array_equal(t1.inputs, t2.inputs)
        assert np.array_equal(t1.targets, t2.targets)


class TestRunFinetune:
    def test_loss_drops_and_w0_frozen(self):
        w0 = make_rng(29).normal(size=(8, 8))
        cfg = AdapterConfig(
            "deft", 2, backend=Backend("relax", 2),
            lr_p=1e-3, lr_r=1e-2, init_stddev=0.1, seed=30,
        )
        task = make_teacher_shift_task(w0, seed=31, input_scale=32.0)
        report, state = run_finetune(w0, cfg, task, steps=400)
        assert len(report.losses) == 401
        assert report.losses[-1] < 1e-2 * report.losses[0]
        assert report.w0_hash_before == report.w0_hash_after
        assert loss_mse(state, task) == report.losses[-1]

    def test_deterministic_runs(self):
        w0 = make_rng(32).normal(size=(6, 6))
        cfg = AdapterConfig(
            "deft", 2, backend=Backend("relax", 2),
            lr_p=1e-3, lr_r=1e-2, init_stddev=0.1, seed=33,
        )
        task = make_teacher_shift_task(w0, seed=34, input_scale=16.0)
        r1, s1 = run_finetune(w0, cfg, task, steps=50)
        r2, s2 = run_finetune(w0, cfg, task, steps=50)
        assert r1.losses == r2.losses
        assert r1.final_state_hash == r2.final_state_hash
        assert np.array_equal(merge(s1), merge(s2))

    def test_divergence_raises(self):
        w0 = make_rng(35).normal(size=(6, 6))
        cfg = AdapterConfig(
            "deft", 2, backend=Backend("relax", 2),
            lr_p=1e6, lr_r=1e6, init_stddev=0.5, seed=36,
        )
        task = make_teacher_shift_task(w0, seed=37, input_scale=64.0)
        with pytest.raises(DivergenceError) as exc, warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # overflow on the way to inf
            run_finetune(w0, cfg, task, steps=200)
        assert exc.value.step >= 1
        assert np.isfinite(exc.value.last_loss)

    def test_bad_steps(self):
        w0 = make_rng(38).normal(size=(4, 4))
        cfg = AdapterConfig("deft", 1, backend=Backend("relax", 1))
        task = make_teacher_shift_task(w0, seed=39)
        with pytest.raises(ValueError):
            run_finetune(w0, cfg, task, steps=0)

    def test_lora_trains_too(self):
        w0 = make_rng(40).normal(size=(8, 8))
        cfg = AdapterConfig("lora", 4, lr_p=3e-3, lr_r=3e-3, init_stddev=0.05, seed=41)
        task = make_teacher_shift_task(w0, seed=42, input_scale=16.0)
        report, _ = run_finetune(w0, cfg, task, steps=300)
        assert report.losses[-1] < 1e-2 * report.losses[0]


class TestReporting:
    def make_report(self):
        w0 = make_rng(43).normal(size=(5, 5))
        cfg = AdapterConfig(
            "deft", 1, backend=Backend("relax", 1),
            lr_p=1e-3, lr_r=1e-2, init_stddev=0.1, seed=44,
        )
        task = make_teacher_shift_task(w0, seed=45, input_scale=8.0)
        return run_finetune(w0, cfg, task, steps=3)[0]

    def test_csv_layout(self):
        text = report_to_csv(self.make_report())
        lines = text.split("\r\n")
        assert lines[0] == "step,loss,grad_norm_p,grad_norm_r"
        assert len(lines) == 6  # header + 4 loss rows + trailing newline
        assert lines[-1] == ""
        final = lines[4].split(",")
        assert final[0] == "3" and final[2] == "" and final[3] == ""
        assert float(final[1]) >= 0.0

    def test_summary_line(self):
        line = summary_line(self.make_report())
        assert "steps=3" in line
        assert "w0_frozen=true" in line
        assert "final_loss=" in line
