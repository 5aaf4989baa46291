"""Loss definitions, their graph twins, pseudo-label handling, baselines,
and the masked-prediction triangle bound."""
import numpy as np
import pytest

from s4t.model import TaskSpec, empty_plan, make_mask
from s4t.objectives import (BoundRecord, LossWeights, SourceStats,
                            bound_check, build_entropy, build_task_loss,
                            canonical_prediction, canonical_target,
                            label_bindings, l1_distance,
                            loss_actalign_baseline, loss_entropy_baseline,
                            loss_train, loss_ttt, one_hot, pseudo_bindings,
                            pseudo_targets, task_loss)
from s4t.tensor_core import GraphBuilder, forward_named

from tiny import rand_labels, tiny_model, tiny_tasks

CAT = TaskSpec("c", "categorical-map", n_classes=4, higher_better=True)
SCA = TaskSpec("s", "scalar-map")
VEC = TaskSpec("v", "unit-vector-map")


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert w.lambda_tbs_train == 1.0
        assert w.lambda_tp_train == 1.0
        assert w.lambda_tbs_test == 0.01

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_tbs_train=-0.5)
        with pytest.raises(ValueError):
            LossWeights(lambda_tbs_test=-1e-9)


class TestOneHot:
    def test_values(self):
        out = one_hot(np.array([[0, 2]]), 3)
        assert out.shape == (1, 2, 3)
        assert np.array_equal(out[0, 0], [1, 0, 0])
        assert np.array_equal(out[0, 1], [0, 0, 1])

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            one_hot(np.array([3]), 3)
        with pytest.raises(ValueError, match="out of range"):
            one_hot(np.array([-1]), 3)

    def test_float_indices_rejected(self):
        with pytest.raises(TypeError, match="indices"):
            one_hot(np.array([0.0, 1.0]), 2)


class TestTaskLoss:
    def test_cross_entropy_hand_value(self):
        # two classes, always 0.9 on the right one: loss is -ln 0.9
        spec = TaskSpec("c", "categorical-map", n_classes=2)
        p = np.log(np.array([[[[0.9, 0.1]]]]))
        t = np.array([[[0]]])
        assert abs(task_loss(spec, p, t) - 0.10536051565) < 1e-9

    def test_confident_correct_near_zero(self):
        spec = TaskSpec("c", "categorical-map", n_classes=3)
        t = np.array([[[0, 1], [2, 1]]])
        logits = 50.0 * one_hot(t, 3)
        assert task_loss(spec, logits, t) < 1e-6

    def test_l1_exact(self):
        p = np.array([[[[1.0], [2.0]]]])
        t = np.array([[[[0.5], [2.5]]]])
        assert task_loss(SCA, p, t) == 0.5
        assert task_loss(SCA, p, p) == 0.0

    def test_scalar_target_channel_optional(self):
        p = np.zeros((1, 2, 2, 1))
        t = np.ones((1, 2, 2))
        assert task_loss(SCA, p, t) == 1.0

    def test_cosine_identical_zero(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(2, 3, 3, 3))
        assert abs(task_loss(VEC, v, v)) < 1e-9

    def test_cosine_opposite_two(self):
        v = np.ones((1, 2, 2, 3))
        assert abs(task_loss(VEC, v, -v) - 2.0) < 1e-9


class TestGraphLossAgreement:
    """The in-graph loss builders and the plain array implementations are
    authored separately; they must agree on random data."""

    @pytest.mark.parametrize("spec", [CAT, SCA, VEC], ids=lambda s: s.kind)
    def test_matches_reference(self, spec):
        rng = np.random.default_rng(7)
        for trial in range(20):
            pred = rng.normal(size=(2, 3, 3, spec.out_channels))
            if spec.kind == "categorical-map":
                raw = rng.integers(0, spec.n_classes, size=(2, 3, 3))
                tgt = one_hot(raw, spec.n_classes)
            elif spec.kind == "scalar-map":
                raw = rng.normal(size=(2, 3, 3, 1))
                tgt = raw
            else:
                raw = rng.normal(size=(2, 3, 3, 3))
                tgt = raw
            b = GraphBuilder()
            p = b.input("p", pred.shape)
            t = b.input("t", np.asarray(tgt).shape)
            b.output("loss", build_task_loss(b, spec, p, t))
            got = forward_named(b.finalize(), {"p": pred, "t": tgt})["loss"]
            want = task_loss(spec, pred, raw)
            assert abs(float(got) - want) < 1e-9, (spec.kind, trial)

    def test_entropy_matches_reference(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(2, 4, 4, 5))
        b = GraphBuilder()
        p = b.input("p", logits.shape)
        b.output("h", build_entropy(b, p))
        got = float(forward_named(b.finalize(), {"p": logits})["h"])
        want = loss_entropy_baseline(
            [TaskSpec("c", "categorical-map", n_classes=5)], {"c": logits})
        assert abs(got - want) < 1e-9


class TestTrainLoss:
    def test_weights_enter_affinely(self):
        rng = np.random.default_rng(1)
        specs = [CAT, SCA, VEC]
        mk = lambda: {s.name: rng.normal(size=(1, 2, 2, s.out_channels))
                      for s in specs}
        main, tp, tbs = mk(), mk(), mk()
        targets = {"c": rng.integers(0, 4, size=(1, 2, 2)),
                   "s": rng.normal(size=(1, 2, 2, 1)),
                   "v": rng.normal(size=(1, 2, 2, 3))}
        lm = sum(task_loss(s, main[s.name], targets[s.name]) for s in specs)
        ltp = sum(task_loss(s, tp[s.name], targets[s.name]) for s in specs)
        ltbs = sum(task_loss(s, tbs[s.name], targets[s.name]) for s in specs)
        for a, c in [(1.0, 1.0), (0.0, 0.0), (2.5, 0.3)]:
            w = LossWeights(lambda_tbs_train=a, lambda_tp_train=c)
            got = loss_train(specs, main, tp, tbs, targets, w)
            assert abs(got - (lm + a * ltbs + c * ltp)) < 1e-12


class TestAdaptationLoss:
    def test_zero_when_joint_equals_main_continuous(self):
        rng = np.random.default_rng(2)
        specs = [SCA, VEC]
        preds = {s.name: rng.normal(size=(1, 2, 2, s.out_channels))
                 for s in specs}
        assert loss_ttt(specs, preds, preds, LossWeights()) < 1e-12

    def test_scales_exactly_with_lambda(self):
        rng = np.random.default_rng(3)
        specs = [CAT, SCA, VEC]
        mk = lambda: {s.name: rng.normal(size=(1, 2, 2, s.out_channels))
                      for s in specs}
        tbs, main = mk(), mk()
        base = loss_ttt(specs, tbs, main, LossWeights(lambda_tbs_test=1.0))
        small = loss_ttt(specs, tbs, main, LossWeights(lambda_tbs_test=0.01))
        assert abs(small - 0.01 * base) < 1e-12

    def test_pseudo_targets_detached_and_argmaxed(self):
        rng = np.random.default_rng(4)
        main = {"c": rng.normal(size=(1, 2, 2, 4)),
                "s": rng.normal(size=(1, 2, 2, 1))}
        t = pseudo_targets([CAT, SCA], main)
        assert t["c"].shape == (1, 2, 2)
        assert np.array_equal(t["c"], main["c"].argmax(-1))
        before = t["s"].copy()
        main["s"][:] = 99.0
        assert np.array_equal(t["s"], before)


class TestEntropyBaseline:
    def test_uniform_is_log_k(self):
        logits = np.zeros((1, 2, 2, 5))
        got = loss_entropy_baseline([TaskSpec("c", "categorical-map",
                                              n_classes=5)], {"c": logits})
        assert abs(got - np.log(5)) < 1e-12

    def test_binary_hand_value(self):
        # p = 0.9: H = -(0.9 ln 0.9 + 0.1 ln 0.1)
        spec = TaskSpec("c", "categorical-map", n_classes=2)
        logits = np.log(np.array([[[[0.9, 0.1]]]]))
        got = loss_entropy_baseline([spec], {"c": logits})
        assert abs(got - 0.32508297339) < 1e-9

    def test_confident_near_zero(self):
        spec = TaskSpec("c", "categorical-map", n_classes=3)
        logits = np.zeros((1, 1, 1, 3))
        logits[..., 0] = 60.0
        got = loss_entropy_baseline([spec], {"c": logits})
        assert got < 1e-12

    def test_requires_categorical(self):
        with pytest.raises(ValueError, match="categorical"):
            loss_entropy_baseline([SCA, VEC], {})


class TestActalignBaseline:
    def test_identical_stats_zero(self):
        st = SourceStats({"e1": (np.array([0.1, -0.2]), np.array([1.0, 2.0]))})
        assert loss_actalign_baseline(st, st) == 0.0

    def test_hand_value(self):
        src = SourceStats({"e1": (np.zeros(2), np.ones(2))})
        live = SourceStats({"e1": (np.array([0.5, -0.5]),
                                   np.array([1.5, 1.0]))})
        assert abs(loss_actalign_baseline(live, src) - 1.5) < 1e-12

    def test_layer_mismatch(self):
        a = SourceStats({"e1": (np.zeros(2), np.ones(2))})
        b = SourceStats({"e2": (np.zeros(2), np.ones(2))})
        with pytest.raises(ValueError, match="mismatch"):
            loss_actalign_baseline(a, b)

    def test_negative_sd_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            SourceStats({"e1": (np.zeros(2), np.array([1.0, -0.1]))})


class TestBindings:
    def test_label_bindings_one_hot_and_channel(self):
        labels = {"c": np.array([[[1, 0]]]), "s": np.ones((1, 1, 2))}
        out = label_bindings([CAT, SCA], labels)
        assert out["label.c"].shape == (1, 1, 2, 4)
        assert out["label.c"].dtype == np.float32
        assert np.array_equal(out["label.c"][0, 0, 0],
                              np.array([0, 1, 0, 0], dtype=np.float32))
        assert out["label.s"].shape == (1, 1, 2, 1)

    def test_pseudo_bindings_roundtrip(self):
        rng = np.random.default_rng(5)
        main = {"c": rng.normal(size=(1, 2, 2, 4))}
        out = pseudo_bindings([CAT], main)
        assert out["pseudo.c"].shape == (1, 2, 2, 4)
        assert np.array_equal(out["pseudo.c"].argmax(-1),
                              main["c"].argmax(-1))
        assert set(np.unique(out["pseudo.c"])) == {0.0, 1.0}


class TestCanonicalArrays:
    def test_categorical_becomes_probabilities(self):
        rng = np.random.default_rng(6)
        arr = canonical_prediction(CAT, rng.normal(size=(1, 2, 2, 4)))
        assert np.allclose(arr.sum(-1), 1.0)
        assert (arr > 0).all()
        tgt = canonical_target(CAT, np.array([[[0, 3]]]))
        assert np.array_equal(tgt[0, 0, 0], [1, 0, 0, 0])

    def test_vectors_normalized_scalars_raw(self):
        rng = np.random.default_rng(7)
        v = canonical_prediction(VEC, rng.normal(size=(1, 2, 2, 3)) * 5)
        assert np.allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-5)
        s = rng.normal(size=(1, 2, 2, 1))
        assert np.array_equal(canonical_prediction(SCA, s), s)

    def test_l1_distance_is_mean_abs(self):
        a = np.array([1.0, 2.0, 3.0])
        b = np.array([2.0, 2.0, 1.0])
        assert l1_distance(a, b) == 1.0


class TestBoundCheck:
    def test_empty_plan_equality(self):
        model = tiny_model()
        params = model.init_params(0, spatial=(8, 8))
        rng = np.random.default_rng(0)
        batch = {"image": rng.random((2, 8, 8, 3), dtype=np.float32),
                 "labels": rand_labels(rng, model.tasks, 2, 8, 8)}
        plan = empty_plan(model.grid_hw((8, 8)), len(model.tasks))
        rec = bound_check(model, params, batch, plan)
        assert isinstance(rec, BoundRecord)
        assert rec.holds
        assert rec.rhs_term2 == 0.0
        assert abs(rec.lhs - rec.rhs_term1) < 1e-12

    def test_holds_across_random_plans(self):
        model = tiny_model()
        params = model.init_params(1, spatial=(8, 8))
        rng = np.random.default_rng(1)
        batch = {"image": rng.random((2, 8, 8, 3), dtype=np.float32),
                 "labels": rand_labels(rng, model.tasks, 2, 8, 8)}
        for seed, ratio in enumerate([0.3, 0.5, 0.7, 0.9]):
            plan = make_mask("random", ratio, model.grid_hw((8, 8)),
                             len(model.tasks), seed=seed)
            rec = bound_check(model, params, batch, plan)
            assert rec.holds, (ratio, rec)
            assert rec.lhs >= 0 and rec.rhs_term1 >= 0 and rec.rhs_term2 >= 0
