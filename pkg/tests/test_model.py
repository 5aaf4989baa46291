"""Architecture contracts: shapes, stage composition, branch isolation,
gradients of the assembled graph, and parameter persistence."""
import numpy as np
import pytest

from s4t.model import (InfeasibleMaskError, ModelConfig, S4TModel, TaskSpec,
                       apply_mask, build_graph, default_tasks, empty_plan,
                       load_checkpoint, make_mask, mask_bindings,
                       save_checkpoint, stable_hash)
from s4t.objectives import label_bindings, pseudo_bindings
from s4t.optim import OptimConfig, Optimizer
from s4t.tensor_core import ShapeError, backward, finite_diff_check, forward_eval

from tiny import (conditioned_params, micro_model, rand_labels, tiny_model,
                  tiny_tasks)


def full_bindings(model, params, x, seed=0):
    """Everything the full graph needs: neutral inputs, then real data."""
    mg = model.graph("full", *x.shape[:3])
    rng = np.random.default_rng(seed)
    b, h, w = x.shape[:3]
    dt = x.dtype
    labels = rand_labels(rng, model.tasks, b, h, w)
    bind = {**model.zero_bindings(mg), **params, "x": x}
    bind.update(label_bindings(model.tasks, labels, dtype=dt))
    bind.update(label_bindings(model.tasks, rand_labels(rng, model.tasks, b, h, w),
                               prefix="pseudo", dtype=dt))
    if model.cfg.use_masking:
        plan = make_mask("random", 0.5, model.grid_hw((h, w)),
                         len(model.tasks), seed=seed)
        bind.update(mask_bindings(plan, [t.name for t in model.tasks], dtype=dt))
    return mg, bind


class TestShapes:
    def test_default_pipeline_shapes(self):
        model = S4TModel()
        params = model.init_params(0)
        x = np.random.default_rng(1).random((2, 32, 32, 3), dtype=np.float32)
        z = model.encode(params, x)
        assert z.shape == (2, 8, 8, 32)
        latents, tp = model.project_and_predict(params, z)
        assert set(latents) == {t.name for t in model.tasks}
        for t in model.tasks:
            assert latents[t.name].shape == (2, 8, 8, 16)
            assert tp[t.name].shape == (2, 32, 32, t.out_channels)
        main = model.decode_main(params, latents)
        for t in model.tasks:
            assert main[t.name].shape == (2, 32, 32, t.out_channels)
        plan = make_mask("random", 0.5, (8, 8), len(model.tasks), seed=3)
        joint = model.tbs_outputs(params, x, plan)
        for t in model.tasks:
            assert joint[t.name].shape == (2, 32, 32, t.out_channels)
            assert np.isfinite(joint[t.name]).all()

    def test_indivisible_spatial_extent_rejected(self):
        model = tiny_model()
        with pytest.raises(ShapeError, match="divisible"):
            model.graph("light", 1, 9, 9)

    def test_unknown_flavor_rejected(self):
        with pytest.raises(ValueError, match="flavor"):
            build_graph(ModelConfig(), default_tasks(), "half", 1, 32, 32)

    def test_empty_and_duplicate_tasks_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            S4TModel(ModelConfig(), [])
        twice = [tiny_tasks()[0], tiny_tasks()[0]]
        with pytest.raises(ValueError, match="duplicate"):
            S4TModel(ModelConfig(), twice)

    def test_tbs_flavor_requires_tbs(self):
        model = tiny_model(use_tbs=False)
        with pytest.raises(ValueError, match="disabled"):
            model.graph("tbs", 1, 8, 8)


class TestDeterminism:
    def test_init_params_reproducible(self):
        a = S4TModel().init_params(7)
        b = S4TModel().init_params(7)
        assert set(a) == set(b)
        for k in a:
            assert a[k].dtype == np.float32
            assert np.array_equal(a[k], b[k])

    def test_forward_bit_identical(self):
        model = tiny_model()
        params = model.init_params(0, spatial=(8, 8))
        x = np.random.default_rng(2).random((2, 8, 8, 3), dtype=np.float32)
        mg = model.graph("light", 2, 8, 8)
        v1 = forward_eval(mg.graph, {**model.zero_bindings(mg), **params, "x": x})
        v2 = forward_eval(mg.graph, {**model.zero_bindings(mg), **params, "x": x})
        for t in model.tasks:
            assert np.array_equal(mg.value(v1, f"main.{t.name}"),
                                  mg.value(v2, f"main.{t.name}"))


class TestProjection:
    def test_identity_projection_preserves_latent(self):
        # task channels chosen equal to encoder channels so w can be identity
        model = tiny_model(task_channels=8)
        params = model.init_params(0, spatial=(8, 8))
        for t in model.tasks:
            params[f"proj.{t.name}.w"] = np.eye(8, dtype=np.float32)
            params[f"proj.{t.name}.b"] = np.zeros(8, dtype=np.float32)
        z = model.encode(params, np.random.default_rng(0).random(
            (2, 8, 8, 3), dtype=np.float32))
        latents, _ = model.project_and_predict(params, z)
        for t in model.tasks:
            assert np.array_equal(latents[t.name], z)

    def test_projection_disabled_shares_latent(self):
        model = tiny_model(use_projection=False)
        params = model.init_params(0, spatial=(8, 8))
        z = model.encode(params, np.random.default_rng(0).random(
            (2, 8, 8, 3), dtype=np.float32))
        latents, tp = model.project_and_predict(params, z)
        assert tp is None
        for t in model.tasks:
            assert np.array_equal(latents[t.name], z)

    def test_auxiliary_prediction_unit_norm(self):
        model = tiny_model()
        params = model.init_params(3, spatial=(8, 8))
        z = model.encode(params, np.random.default_rng(1).random(
            (2, 8, 8, 3), dtype=np.float32))
        _, tp = model.project_and_predict(params, z)
        norms = np.linalg.norm(tp["nor"], axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-5)


class TestDecoder:
    def test_unit_vector_output_normalized(self):
        model = tiny_model()
        params = model.init_params(4, spatial=(8, 8))
        z = model.encode(params, np.random.default_rng(5).random(
            (2, 8, 8, 3), dtype=np.float32))
        latents, _ = model.project_and_predict(params, z)
        main = model.decode_main(params, latents)
        norms = np.linalg.norm(main["nor"], axis=-1)
        assert np.allclose(norms, 1.0, atol=1e-5)
        assert main["seg"].shape[-1] == 3
        assert main["dep"].shape[-1] == 1


class TestJointPredictor:
    def test_samples_are_independent(self):
        model = tiny_model()
        params = model.init_params(0, spatial=(8, 8))
        rng = np.random.default_rng(8)
        lat = {t.name: rng.normal(size=(2, 4, 4, 4)).astype(np.float32)
               for t in model.tasks}
        plan = make_mask("random", 0.4, (4, 4), 3, seed=1)
        masked = apply_mask(lat, plan, params["tbs.mask_token"])
        out = model.tbs_predict(params, masked)
        swapped = {k: v[::-1].copy() for k, v in masked.items()}
        out2 = model.tbs_predict(params, swapped)
        for t in model.tasks:
            assert np.array_equal(out[t.name], out2[t.name][::-1])

    def test_finite_over_many_seeds(self):
        model = tiny_model()
        gh, gw = model.grid_hw((8, 8))
        for seed in range(100):
            params = model.init_params(seed, spatial=(8, 8))
            x = np.random.default_rng(1000 + seed).random(
                (1, 8, 8, 3), dtype=np.float32)
            plan = make_mask("random", 0.5, (gh, gw), 3, seed=seed)
            out = model.tbs_outputs(params, x, plan)
            for t in model.tasks:
                assert np.isfinite(out[t.name]).all(), f"seed {seed}"

    def test_masking_changes_joint_predictions(self):
        model = tiny_model()
        params = model.init_params(2, spatial=(8, 8))
        x = np.random.default_rng(3).random((1, 8, 8, 3), dtype=np.float32)
        gh, gw = model.grid_hw((8, 8))
        clear = model.tbs_outputs(params, x, empty_plan((gh, gw), 3))
        hid = model.tbs_outputs(params, x, make_mask("same-for-all", 0.5,
                                                     (gh, gw), 3, seed=0))
        assert any(not np.allclose(clear[t.name], hid[t.name])
                   for t in model.tasks)


class TestBranchIsolation:
    def test_main_path_ignores_tbs_parameters(self):
        model = tiny_model()
        params = model.init_params(0, spatial=(8, 8))
        other = dict(params)
        rng = np.random.default_rng(99)
        for k in params:
            if k.startswith("tbs."):
                other[k] = rng.normal(size=params[k].shape).astype(np.float32)
        x = np.random.default_rng(4).random((2, 8, 8, 3), dtype=np.float32)
        mg, bind = full_bindings(model, params, x)
        _, bind2 = full_bindings(model, other, x)
        v1 = forward_eval(mg.graph, bind)
        v2 = forward_eval(mg.graph, bind2)
        for t in model.tasks:
            assert np.array_equal(mg.value(v1, f"main.{t.name}"),
                                  mg.value(v2, f"main.{t.name}"))
        assert not np.array_equal(mg.value(v1, "loss.tbs_label"),
                                  mg.value(v2, "loss.tbs_label"))

    def test_staged_pipeline_matches_joint_graph(self):
        model = tiny_model()
        params = model.init_params(6, spatial=(8, 8))
        x = np.random.default_rng(7).random((2, 8, 8, 3), dtype=np.float32)
        z = model.encode(params, x)
        latents, _ = model.project_and_predict(params, z)
        main = model.decode_main(params, latents)
        mg = model.graph("light", 2, 8, 8)
        vals = forward_eval(mg.graph, {**model.zero_bindings(mg), **params,
                                       "x": x})
        for t in model.tasks:
            assert np.array_equal(main[t.name], mg.value(vals, f"main.{t.name}"))

    def test_adaptation_loss_detached_from_decoders(self):
        model = tiny_model()
        params = model.init_params(0, spatial=(8, 8))
        x = np.random.default_rng(10).random((2, 8, 8, 3), dtype=np.float32)
        mg, bind = full_bindings(model, params, x)
        gs = backward(mg.graph, bind, "loss.ttt")
        dec = [k for k in params if k.startswith("dec.")]
        assert dec and all(k in gs.unreachable() for k in dec)
        assert all(not gs[k].any() for k in dec)
        gs_total = backward(mg.graph, bind, "loss.total")
        assert all(k not in gs_total.unreachable() for k in dec)

    def test_adaptation_loss_reaches_scoped_parameters(self):
        model = tiny_model()
        params = model.init_params(1, spatial=(8, 8))
        x = np.random.default_rng(11).random((2, 8, 8, 3), dtype=np.float32)
        mg, bind = full_bindings(model, params, x)
        gs = backward(mg.graph, bind, "loss.ttt")
        # tp.* heads only feed the train-time auxiliary loss; within the
        # adaptation scope they ride along with zero gradient
        for k in model.scope_params("encoder+proj+tbs"):
            if k.startswith("tp."):
                assert k in gs.unreachable(), k
            else:
                assert k not in gs.unreachable(), k


class TestAssembledGradients:
    def test_total_loss_gradient(self):
        model = micro_model()
        params = conditioned_params(model, 0, (4, 4))
        x = np.random.default_rng(0).random((1, 4, 4, 3))
        mg, bind = full_bindings(model, params, x)
        err = finite_diff_check(mg.graph, bind, "loss.total")
        assert err < 1e-6, err

    def test_adaptation_loss_gradient(self):
        model = micro_model()
        params = conditioned_params(model, 1, (4, 4))
        x = np.random.default_rng(1).random((1, 4, 4, 3))
        mg, bind = full_bindings(model, params, x)
        err = finite_diff_check(mg.graph, bind, "loss.ttt")
        assert err < 1e-6, err


class TestOverfitOneBatch:
    def test_total_loss_drops_on_fixed_batch(self):
        model = tiny_model()
        params = model.init_params(0, spatial=(8, 8))
        x = np.random.default_rng(0).random((2, 8, 8, 3), dtype=np.float32)
        mg, bind = full_bindings(model, params, x)
        opt = Optimizer(OptimConfig(algorithm="adam", lr=3e-3, iterations=200))
        names = [k for k in params]
        first = None
        for _ in range(200):
            bind = {**bind, **params}
            vals = forward_eval(mg.graph, bind)
            loss = float(mg.value(vals, "loss.total"))
            if first is None:
                first = loss
            gs = backward(mg.graph, vals, "loss.total")
            params = opt.step(params, gs, names)
        assert loss < 0.5 * first, (first, loss)


class TestAffinity:
    def test_identical_latents_fully_aligned(self):
        lat = np.random.default_rng(0).normal(size=(2, 4, 4, 5))
        mat, flagged = S4TModel.task_affinity({"a": lat, "b": lat.copy()})
        assert flagged == []
        assert np.allclose(mat, 1.0)

    def test_orthogonal_means(self):
        a = np.zeros((1, 2, 2, 2)); a[..., 0] = 1.0
        b = np.zeros((1, 2, 2, 2)); b[..., 1] = 1.0
        mat, flagged = S4TModel.task_affinity({"a": a, "b": b})
        assert flagged == []
        assert mat[0, 0] == 1.0 and mat[1, 1] == 1.0
        assert abs(mat[0, 1]) < 1e-12 and abs(mat[1, 0]) < 1e-12

    def test_zero_latent_flagged(self):
        a = np.ones((1, 2, 2, 3))
        z = np.zeros((1, 2, 2, 3))
        mat, flagged = S4TModel.task_affinity({"a": a, "z": z})
        assert flagged == ["z"]
        assert mat[0, 0] == 1.0
        assert not mat[1].any() and not mat[:, 1].any()


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = tiny_model()
        params = model.init_params(5, spatial=(8, 8))
        h = stable_hash({"cfg": "tiny"})
        path = tmp_path / "ck.npz"
        save_checkpoint(path, params, config_hash=h)
        loaded, stored = load_checkpoint(path, expect_hash=h)
        assert stored == h
        assert set(loaded) == set(params)
        for k in params:
            assert loaded[k].dtype == params[k].dtype
            assert np.array_equal(loaded[k], params[k])

    def test_hash_mismatch_rejected(self, tmp_path):
        params = {"w": np.zeros(2, dtype=np.float32)}
        path = tmp_path / "ck.npz"
        save_checkpoint(path, params, config_hash="aaaa")
        with pytest.raises(ValueError, match="hash"):
            load_checkpoint(path, expect_hash="bbbb")


class TestScopes:
    def test_scope_contents(self):
        model = tiny_model()
        full = set(model.scope_params("all"))
        sub = set(model.scope_params("encoder+proj+tbs"))
        enc = set(model.scope_params("encoder-only"))
        assert enc < sub < full
        assert full - sub == {k for k in full if k.startswith("dec.")}
        assert all(k.startswith("enc.") for k in enc)
        assert any(k.startswith("tp.") for k in sub)
        with pytest.raises(ValueError, match="scope"):
            model.scope_params("decoder-only")
