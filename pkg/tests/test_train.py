import math

import numpy as np
import pytest

from ternmm.config import toy_config
from ternmm.errors import ConfigError, DataError
from ternmm.model import init_params
from ternmm.ste import (
    bitlinear_train_step,
    cross_entropy,
    dequantized_twin,
    finite_diff_check,
    gelu_tanh_fwd,
    gelu_tanh_grad,
    linear_bwd,
    linear_fwd,
)
from ternmm.train import (
    AdamState,
    TrainConfig,
    TrainSample,
    adam_step,
    build_groups,
    cosine_warmup_lr,
    fullscale_phase1,
    fullscale_phase2,
    train_toy,
)


def tiny_train_config(**kw):
    base = dict(phase=2, peak_lr=1e-2, total_steps=4, batch_size=2, accumulation=1)
    base.update(kw)
    return TrainConfig(**base)


def make_dataset(config, count=2, caption_len=6, seed=0):
    rng = np.random.default_rng(seed)
    s = config.vision.image_size
    return [
        TrainSample(
            image=rng.normal(0, 1, (3, s, s)).astype(np.float32),
            caption=[int(b) for b in rng.integers(97, 123, caption_len)],
        )
        for _ in range(count)
    ]


class TestBitlinearTrainStep:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(0)
        w = rng.normal(0, 0.1, (4, 6)).astype(np.float32)
        x = rng.normal(0, 1, (3, 6)).astype(np.float32)
        _, dw, dx = bitlinear_train_step(w, x, np.zeros((3, 4), np.float32))
        assert not dw.any() and not dx.any()

    def test_1x1_identity_ste(self):
        y, dw, dx = bitlinear_train_step(
            np.array([[0.5]], np.float32),
            np.array([[1.0]], np.float32),
            np.array([[1.0]], np.float32),
        )
        assert dw[0, 0] == 1.0

    def test_matches_dense_twin_exactly(self):
        rng = np.random.default_rng(1)
        for shape in ((3, 5), (8, 4), (1, 7)):
            w = rng.normal(0, 0.2, shape).astype(np.float32)
            x = rng.normal(0, 1, (4, shape[1])).astype(np.float32)
            gy = rng.normal(0, 1, (4, shape[0])).astype(np.float32)
            _, dw, dx = bitlinear_train_step(w, x, gy)
            twin = dequantized_twin(w)
            dx_ref, dw_ref, _ = linear_bwd(x, twin, gy)
            assert dw.tobytes() == dw_ref.tobytes()
            assert dx.tobytes() == dx_ref.tobytes()


class TestFiniteDiff:
    def test_projector_fragment(self):
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, (3, 5))
        params = {
            "w1": rng.normal(0, 0.3, (7, 5)),
            "b1": rng.normal(0, 0.1, (7,)),
            "w2": rng.normal(0, 0.3, (4, 7)),
            "b2": rng.normal(0, 0.1, (4,)),
            "wt": dequantized_twin(rng.normal(0, 0.2, (2, 4)).astype(np.float32)).astype(np.float64),
        }

        def forward(p):
            h = gelu_tanh_fwd(linear_fwd(x, p["w1"], p["b1"]))
            y = linear_fwd(h, p["w2"], p["b2"])
            z = linear_fwd(y, p["wt"])
            return z, h, y

        def loss_fn(p):
            z, _, _ = forward(p)
            return 0.5 * float(np.sum(z * z))

        z, h, y = forward(params)
        dz = z
        dy, dwt, _ = linear_bwd(y, params["wt"], dz)
        dh, dw2, db2 = linear_bwd(h, params["w2"], dy)
        da = dh * gelu_tanh_grad(linear_fwd(x, params["w1"], params["b1"]))
        _, dw1, db1 = linear_bwd(x, params["w1"], da)
        analytic = {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "wt": dwt}
        err = finite_diff_check(loss_fn, params, analytic, eps=1e-5)
        assert err <= 1e-3

    def test_quadratic_near_exact(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0, 1, (4, 4))
        params = {"w": np.eye(4)}

        def loss_fn(p):
            y = linear_fwd(x, p["w"])
            return 0.5 * float(np.sum(y * y))

        y = linear_fwd(x, params["w"])
        _, dw, _ = linear_bwd(x, params["w"], y)
        err = finite_diff_check(loss_fn, params, {"w": dw}, eps=1e-3)
        assert err <= 1e-6

    def test_sign_flip_detected(self):
        rng = np.random.default_rng(4)
        x = rng.normal(0, 1, (4, 4))
        params = {"w": rng.normal(0, 0.5, (3, 4))}

        def loss_fn(p):
            y = linear_fwd(x, p["w"])
            return 0.5 * float(np.sum(y * y))

        y = linear_fwd(x, params["w"])
        _, dw, _ = linear_bwd(x, params["w"], y)
        err = finite_diff_check(loss_fn, params, {"w": -dw}, eps=1e-4)
        assert 1.5 < err < 2.5


class TestSchedule:
    def cfg(self, total=200, ratio=0.03, peak=1e-3):
        return TrainConfig(
            phase=1, peak_lr=peak, total_steps=total, batch_size=1, warmup_ratio=ratio
        )

    def test_peak_at_warmup_boundary(self):
        cfg = self.cfg()
        assert cfg.warmup_steps == 6
        assert cosine_warmup_lr(6, cfg) == cfg.peak_lr

    def test_zero_at_total(self):
        cfg = self.cfg()
        assert cosine_warmup_lr(200, cfg) == 0.0

    def test_half_peak_at_decay_midpoint(self):
        cfg = self.cfg()
        mid = 6 + (200 - 6) / 2
        assert cosine_warmup_lr(int(mid), cfg) == pytest.approx(cfg.peak_lr / 2, abs=1e-9)

    def test_zero_at_step_zero(self):
        assert cosine_warmup_lr(0, self.cfg()) == 0.0

    def test_continuity_at_warmup(self):
        cfg = self.cfg()
        w = cfg.warmup_steps
        before = cosine_warmup_lr(w, cfg)
        after = cfg.peak_lr * 0.5 * (1 + math.cos(0.0))
        assert before == pytest.approx(after, abs=1e-12)

    def test_no_warmup_starts_at_peak(self):
        cfg = self.cfg(ratio=0.0)
        assert cosine_warmup_lr(0, cfg) == cfg.peak_lr


class TestAdam:
    def test_first_step_magnitude(self):
        cfg = tiny_train_config()
        params = {"w": np.zeros(1, np.float32)}
        grads = {"w": np.array([0.5], np.float32)}
        adam_step(params, grads, AdamState(), lr=1e-3, cfg=cfg)
        assert params["w"][0] == pytest.approx(-1e-3, rel=1e-4)

    def test_zero_grad_from_scratch_no_change(self):
        cfg = tiny_train_config()
        params = {"w": np.array([1.0], np.float32)}
        state = AdamState()
        adam_step(params, {"w": np.zeros(1, np.float32)}, state, lr=1e-2, cfg=cfg)
        assert params["w"][0] == 1.0
        assert not state.m["w"].any()

    def test_moments_decay(self):
        cfg = tiny_train_config()
        params = {"w": np.array([0.0], np.float32)}
        state = AdamState()
        adam_step(params, {"w": np.array([1.0], np.float32)}, state, lr=1e-3, cfg=cfg)
        m1 = state.m["w"].copy()
        adam_step(params, {"w": np.zeros(1, np.float32)}, state, lr=1e-3, cfg=cfg)
        np.testing.assert_allclose(state.m["w"], cfg.beta1 * m1, rtol=1e-6)

    def test_constant_gradient_monotone(self):
        cfg = tiny_train_config()
        params = {"w": np.array([0.0], np.float32)}
        state = AdamState()
        values = [params["w"][0]]
        for _ in range(2):
            adam_step(params, {"w": np.array([0.7], np.float32)}, state, lr=1e-3, cfg=cfg)
            values.append(params["w"][0])
        assert values[2] < values[1] < values[0]


class TestGroups:
    def test_phase1_freezes_decoder(self):
        groups = {g.name: g for g in build_groups(["vision.a", "projector.b", "llm.c"], 1)}
        assert groups["vision"].frozen
        assert not groups["projector"].frozen
        assert groups["decoder"].frozen

    def test_phase2_unfreezes_decoder(self):
        groups = {g.name: g for g in build_groups(["vision.a", "projector.b", "llm.c"], 2)}
        assert groups["vision"].frozen
        assert not groups["projector"].frozen
        assert not groups["decoder"].frozen

    def test_unknown_group_rejected(self):
        with pytest.raises(ConfigError):
            build_groups(["vision.a", "bogus.weight"], 1)

    def test_bad_phase_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(phase=3, peak_lr=1e-3, total_steps=1, batch_size=1)


@pytest.fixture(scope="module")
def small_cfg():
    return toy_config(vision_layers=1, vision_d=16, decoder_layers=1, decoder_d=16)


class TestTrainToy:
    def snapshot(self, params, prefix):
        return {n: v.tobytes() for n, v in params.items() if n.startswith(prefix)}

    def test_phase1_updates_projector_only(self, small_cfg):
        params = init_params(small_cfg, seed=5)
        dataset = make_dataset(small_cfg, count=2)
        before_v = self.snapshot(params, "vision.")
        before_l = self.snapshot(params, "llm.")
        before_p = self.snapshot(params, "projector.")
        train_toy(params, small_cfg, dataset, tiny_train_config(phase=1, total_steps=3))
        assert self.snapshot(params, "vision.") == before_v
        assert self.snapshot(params, "llm.") == before_l
        assert self.snapshot(params, "projector.") != before_p

    def test_phase2_updates_projector_and_decoder(self, small_cfg):
        params = init_params(small_cfg, seed=6)
        dataset = make_dataset(small_cfg, count=2)
        before_v = self.snapshot(params, "vision.")
        before_l = self.snapshot(params, "llm.")
        before_p = self.snapshot(params, "projector.")
        train_toy(params, small_cfg, dataset, tiny_train_config(phase=2, total_steps=3))
        assert self.snapshot(params, "vision.") == before_v
        assert self.snapshot(params, "llm.") != before_l
        assert self.snapshot(params, "projector.") != before_p

    def test_accumulation_equivalence(self, small_cfg):
        dataset = make_dataset(small_cfg, count=8, caption_len=5)
        deltas = []
        for batch, accum in ((4, 2), (8, 1)):
            params = init_params(small_cfg, seed=7)
            before = {n: v.copy() for n, v in params.items()}
            cfg = tiny_train_config(
                phase=2, total_steps=1, batch_size=batch, accumulation=accum, seed=9
            )
            train_toy(params, small_cfg, dataset, cfg)
            deltas.append({n: params[n] - before[n] for n in params})
        for n in deltas[0]:
            assert np.abs(deltas[0][n] - deltas[1][n]).max() <= 1e-5

    def test_empty_dataset_rejected(self, small_cfg):
        with pytest.raises(DataError):
            train_toy(init_params(small_cfg), small_cfg, [], tiny_train_config())

    def test_history_shape_and_determinism(self, small_cfg):
        dataset = make_dataset(small_cfg, count=2)
        histories = []
        for _ in range(2):
            params = init_params(small_cfg, seed=8)
            histories.append(train_toy(params, small_cfg, dataset, tiny_train_config(total_steps=4)))
        assert histories[0] == histories[1]
        assert [h["step"] for h in histories[0]] == [0, 1, 2, 3]

    def test_loss_decreases_on_overfit(self, small_cfg):
        params = init_params(small_cfg, seed=9)
        dataset = make_dataset(small_cfg, count=2, caption_len=4)
        cfg = tiny_train_config(phase=2, total_steps=60, batch_size=2, peak_lr=1e-2)
        history = train_toy(params, small_cfg, dataset, cfg)
        assert history[-1]["loss"] < 0.5 * history[0]["loss"]


class TestLossMasking:
    def test_non_position_logits_do_not_affect_loss(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(10, 7))
        targets = np.array([1, 2, 3])
        positions = np.array([4, 5, 6])
        loss, dlogits = cross_entropy(logits, targets, positions)
        assert not dlogits[[0, 1, 2, 3, 7, 8, 9]].any()
        perturbed = logits.copy()
        perturbed[[0, 1, 2, 3, 7, 8, 9]] += rng.normal(size=(7, 7))
        loss2, _ = cross_entropy(perturbed, targets, positions)
        assert loss == loss2


def test_fullscale_presets_match_documented_recipe():
    p1 = fullscale_phase1(100)
    assert (p1.peak_lr, p1.batch_size, p1.accumulation, p1.phase) == (1e-3, 32, 4, 1)
    assert p1.warmup_ratio == 0.03
    assert (p1.beta1, p1.beta2) == (0.9, 0.98)
    p2 = fullscale_phase2(100)
    assert (p2.peak_lr, p2.batch_size, p2.accumulation, p2.phase) == (2e-5, 8, 2, 2)
