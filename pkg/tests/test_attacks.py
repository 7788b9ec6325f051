import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morelab import attacks as A
from morelab import nn
from morelab import tensor as T
from morelab.errors import InvalidParams


def linear_subject(w: np.ndarray, shape: tuple[int, int, int] | None = None) -> nn.Model:
    """Binary head-only classifier with logits (w.x, -w.x)."""
    d = w.size
    model = nn.build_classifier(nn.ArchSpec("mlp", shape or (1, 1, d), 2, hidden=()), seed=0)
    model.params["head_w"].data[:] = np.stack([w, -w], axis=1).astype(np.float32)
    model.params["head_b"].data[:] = 0
    return model


def balanced_w(rng, half_d: int) -> np.ndarray:
    v = rng.uniform(0.5, 1.0, size=half_d)
    return np.stack([v, -v], axis=1).reshape(-1)  # sums to 0 exactly


class TestProject:
    def test_linf_clamp(self):
        out = A.project(np.array([0.5, -0.5], dtype=np.float32), A.LINF, 0.3)
        assert np.allclose(out, [0.3, -0.3])

    def test_l2_rescale(self):
        out = A.project(np.array([3.0, 4.0], dtype=np.float32), A.L2, 1.0)
        assert np.allclose(out, [0.6, 0.8], atol=1e-6)

    def test_inside_ball_unchanged(self):
        d = np.array([0.1, -0.2], dtype=np.float32)
        assert np.array_equal(A.project(d, A.L2, 1.0), d)
        assert np.array_equal(A.project(d, A.LINF, 0.25), d)

    @given(
        st.lists(st.floats(-5, 5, width=32), min_size=1, max_size=16),
        st.sampled_from([A.L2, A.LINF]),
        st.floats(0.01, 2.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_idempotent_and_nonexpansive(self, vals, norm, eps):
        d = np.array(vals, dtype=np.float32)
        once = A.project(d, norm, eps)
        twice = A.project(once, norm, eps)
        assert np.array_equal(once, twice)
        if norm == A.LINF:
            assert np.abs(once).max() <= np.abs(d).max() + 1e-6
            assert np.abs(once).max() <= eps + 1e-6
        else:
            assert np.linalg.norm(once) <= np.linalg.norm(d) + 1e-6
            assert np.linalg.norm(once) <= eps + 1e-5

    def test_batched_l2_is_per_example(self):
        d = np.zeros((2, 1, 1, 2), dtype=np.float32)
        d[0, 0, 0] = [3.0, 4.0]
        d[1, 0, 0] = [0.1, 0.1]
        out = A.project(d, A.L2, 1.0)
        assert np.allclose(out[0, 0, 0], [0.6, 0.8], atol=1e-6)
        assert np.array_equal(out[1], d[1])


class TestSpec:
    def test_paper_default_step_sizes(self):
        l2 = A.AttackSpec(A.L2, epsilon=1.0)
        assert l2.steps == 20 and abs(l2.step_size - 0.2) < 1e-9
        linf = A.AttackSpec(A.LINF, epsilon=8 / 255)
        assert linf.steps == 20 and abs(linf.step_size - 0.01) < 1e-9

    def test_invalid_specs(self):
        with pytest.raises(InvalidParams):
            A.AttackSpec(A.L2, epsilon=0.0)
        with pytest.raises(InvalidParams):
            A.AttackSpec(A.L2, epsilon=1.0, steps=0)
        with pytest.raises(InvalidParams):
            A.AttackSpec("l7", epsilon=1.0)


class TestFgsm:
    def test_moves_along_gradient_sign(self):
        rng = np.random.default_rng(0)
        w = balanced_w(rng, 4)
        model = linear_subject(w)
        x = np.full((1, 1, 1, 8), 0.5, dtype=np.float32)
        adv = A.fgsm(model, x, np.array([0]), epsilon=0.1)
        # loss in label 0 rises by pushing w.x down: step is -eps*sign(w)
        assert np.allclose(adv, x - 0.1 * np.sign(w).reshape(x.shape), atol=1e-6)

    def test_zero_gradient_returns_x(self):
        model = linear_subject(np.zeros(8))
        x = np.full((2, 1, 1, 8), 0.5, dtype=np.float32)
        adv = A.fgsm(model, x, np.array([0, 1]), epsilon=0.1)
        assert np.array_equal(adv, x)

    def test_equals_single_step_pgd_bit_exact(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=8)
        model = linear_subject(w)
        x = rng.uniform(0.2, 0.8, size=(4, 1, 1, 8)).astype(np.float32)
        y = np.array([0, 1, 0, 1])
        spec = A.AttackSpec(A.LINF, epsilon=0.15, steps=1, step_size=0.15, random_start=False)
        assert np.array_equal(A.fgsm(model, x, y, 0.15), A.pgd(model, x, y, spec))


class TestPgd:
    def test_flips_linear_classifier_within_budget(self):
        # closed-form optimal linf attack moves w.x by eps*||w||_1
        rng = np.random.default_rng(2)
        w = balanced_w(rng, 4)
        eps = 0.1
        x = (0.5 + 0.4 * eps * np.sign(w)).reshape(1, 1, 1, 8).astype(np.float32)
        model = linear_subject(w)
        assert model.predict(x)[0] == 0  # margin 0.4*eps*||w||_1 > 0
        spec = A.AttackSpec(A.LINF, epsilon=eps, steps=5, step_size=eps / 2, random_start=False)
        adv = A.pgd(model, x, np.array([0]), spec)
        assert model.predict(adv)[0] == 1

    def test_ball_and_box_invariants(self):
        model = nn.build_classifier(nn.ArchSpec("cnn", (1, 8, 8), 3, conv_channels=(4,)), seed=3)
        x = np.random.default_rng(4).uniform(size=(6, 1, 8, 8)).astype(np.float32)
        y = np.array([0, 1, 2, 0, 1, 2])
        for spec in (
            A.AttackSpec(A.LINF, epsilon=0.2, steps=8, step_size=0.05, seed=9),
            A.AttackSpec(A.L2, epsilon=1.0, steps=8, seed=9),
        ):
            adv = A.pgd(model, x, y, spec)
            assert adv.min() >= 0.0 and adv.max() <= 1.0
            diff = (adv - x).reshape(6, -1)
            if spec.norm == A.LINF:
                assert np.abs(diff).max() <= spec.epsilon + 1e-5
            else:
                assert np.linalg.norm(diff, axis=1).max() <= spec.epsilon + 1e-5

    def test_fixed_seed_bit_identical(self):
        model = nn.build_classifier(nn.ArchSpec("mlp", (1, 4, 4), 2, hidden=(8,)), seed=5)
        x = np.random.default_rng(6).uniform(size=(3, 1, 4, 4)).astype(np.float32)
        y = np.array([0, 1, 0])
        spec = A.AttackSpec(A.L2, epsilon=0.8, steps=6, seed=123)
        assert np.array_equal(A.pgd(model, x, y, spec), A.pgd(model, x, y, spec))

    def test_attack_lowers_accuracy(self):
        rng = np.random.default_rng(7)
        w = balanced_w(rng, 8)
        model = linear_subject(w)
        x = np.clip(0.5 + 0.02 * rng.normal(size=(50, 1, 1, 16)), 0, 1).astype(np.float32)
        y = (x.reshape(50, -1) @ w < 0).astype(np.int64)
        clean_acc = (model.predict(x) == y).mean()
        spec = A.AttackSpec(A.LINF, epsilon=0.1, steps=10, step_size=0.02, seed=1)
        robust_acc = (model.predict(A.pgd(model, x, y, spec)) == y).mean()
        assert robust_acc < clean_acc


class TestMsd:
    def test_single_spec_matches_pgd_bit_exact(self):
        model = nn.build_classifier(nn.ArchSpec("mlp", (1, 4, 4), 3, hidden=(6,)), seed=8)
        x = np.random.default_rng(9).uniform(size=(4, 1, 4, 4)).astype(np.float32)
        y = np.array([0, 1, 2, 0])
        for spec in (
            A.AttackSpec(A.LINF, epsilon=0.2, steps=5, step_size=0.05, seed=77),
            A.AttackSpec(A.L2, epsilon=1.0, steps=5, seed=77),
        ):
            assert np.array_equal(A.pgd(model, x, y, spec), A.msd_perturb(model, x, y, [spec]))

    def test_keeps_higher_loss_candidate(self):
        # tiny linf ball vs roomy l2 ball: the l2 candidate must win each step
        rng = np.random.default_rng(10)
        w = balanced_w(rng, 8)
        model = linear_subject(w)
        x = np.full((1, 1, 1, 16), 0.5, dtype=np.float32)
        y = np.array([0])
        weak = A.AttackSpec(A.LINF, epsilon=1e-4, steps=3, step_size=1e-4, random_start=False)
        strong = A.AttackSpec(A.L2, epsilon=1.0, steps=3, step_size=0.5, random_start=False)
        adv = A.msd_perturb(model, x, y, [weak, strong])
        l2_norm = np.linalg.norm(adv - x)
        assert l2_norm > 10 * weak.epsilon  # trajectory followed the l2 ball

    def test_mismatched_steps_rejected(self):
        a = A.AttackSpec(A.LINF, epsilon=0.1, steps=3)
        b = A.AttackSpec(A.L2, epsilon=1.0, steps=4)
        with pytest.raises(InvalidParams):
            A.msd_perturb(None, np.zeros((1, 1, 1, 4)), np.array([0]), [a, b])

    def test_at_least_as_strong_as_single_attacks(self):
        # reference fixed model: msd union accuracy within 2 points of best single
        rng = np.random.default_rng(11)
        w = balanced_w(rng, 8)
        model = linear_subject(w)
        n = 100
        x = np.clip(0.5 + 0.05 * rng.normal(size=(n, 1, 1, 16)), 0, 1).astype(np.float32)
        y = (x.reshape(n, -1) @ w < 0).astype(np.int64)
        linf = A.AttackSpec(A.LINF, epsilon=0.04, steps=10, step_size=0.01, seed=3)
        l2 = A.AttackSpec(A.L2, epsilon=0.3, steps=10, seed=3)
        acc = lambda adv: float((model.predict(adv) == y).mean())
        acc_linf = acc(A.pgd(model, x, y, linf))
        acc_l2 = acc(A.pgd(model, x, y, l2))
        acc_msd = acc(A.msd_perturb(model, x, y, [linf, l2]))
        assert acc_msd <= min(acc_linf, acc_l2) + 0.02


class TestRandomSearch:
    def test_single_query_returns_x(self):
        model = linear_subject(np.ones(16), shape=(1, 4, 4))
        x = np.full((2, 1, 4, 4), 0.5, dtype=np.float32)
        out = A.random_search_attack(model, x, np.array([0, 0]), A.AttackSpec(A.LINF, 0.1), queries=1)
        assert np.array_equal(out, x)

    def test_ball_and_box(self):
        model = nn.build_classifier(nn.ArchSpec("cnn", (1, 8, 8), 2, conv_channels=(4,)), seed=12)
        x = np.random.default_rng(13).uniform(size=(4, 1, 8, 8)).astype(np.float32)
        y = np.array([0, 1, 0, 1])
        for spec in (A.AttackSpec(A.LINF, 0.15, seed=5), A.AttackSpec(A.L2, 1.2, seed=5)):
            adv = A.random_search_attack(model, x, y, spec, queries=40)
            assert adv.min() >= 0.0 and adv.max() <= 1.0
            diff = (adv - x).reshape(4, -1)
            if spec.norm == A.LINF:
                assert np.abs(diff).max() <= spec.epsilon + 1e-5
            else:
                assert np.linalg.norm(diff, axis=1).max() <= spec.epsilon + 1e-5

    def test_never_below_clean_loss(self):
        model = nn.build_classifier(nn.ArchSpec("mlp", (1, 4, 4), 3, hidden=(8,)), seed=14)
        x = np.random.default_rng(15).uniform(size=(5, 1, 4, 4)).astype(np.float32)
        y = np.array([0, 1, 2, 0, 1])
        adv = A.random_search_attack(model, x, y, A.AttackSpec(A.LINF, 0.2, seed=6), queries=30)
        clean = A.ce_per_example(model.forward(T.Tensor(x)).data, y)
        attacked = A.ce_per_example(model.forward(T.Tensor(adv)).data, y)
        assert np.all(attacked >= clean - 1e-6)

    def test_approaches_fgsm_on_linear_model(self):
        rng = np.random.default_rng(16)
        w = balanced_w(rng, 8)
        model = linear_subject(w, shape=(1, 4, 4))
        x = np.full((8, 1, 4, 4), 0.5, dtype=np.float32)
        y = np.zeros(8, dtype=np.int64)
        spec = A.AttackSpec(A.LINF, epsilon=0.2, seed=7)
        adv = A.random_search_attack(model, x, y, spec, queries=500)
        rs_loss = A.ce_per_example(model.forward(T.Tensor(adv)).data, y).mean()
        fg_loss = A.ce_per_example(
            model.forward(T.Tensor(A.fgsm(model, x, y, 0.2))).data, y
        ).mean()
        assert rs_loss >= 0.8 * fg_loss
