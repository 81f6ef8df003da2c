"""Selection-model tests: losses against closed forms, labels, training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psel import autodiff as ad
from psel import model as mdl
from psel import zoo
from psel.instances import DomainError, GeneratorConfig, generate_dataset


def make_table(objectives, instance_ids=None, solver_ids=None):
    obj = np.asarray(objectives, dtype=float)
    m, s = obj.shape
    failed = ~np.isfinite(obj)
    finite = np.where(failed, np.inf, obj)
    ref = np.min(finite, axis=1)
    ref = np.where(np.isfinite(ref), ref, 1.0)
    return zoo.PerformanceTable(
        instance_ids=instance_ids or [f"i{r}" for r in range(m)],
        solver_ids=solver_ids or [f"s{j}" for j in range(s)],
        objective=obj,
        time_ms=np.zeros((m, s)),
        reference=ref,
        failed=failed)


def direct_ranking_loss(scores, phi):
    """Plain-python listwise likelihood, no shared code with the library."""
    t = [scores[j] for j in phi]
    total = 0.0
    for i in range(len(t)):
        denom = sum(math.exp(tj - t[i]) for tj in t[i:])
        total += math.log(denom)
    return total


class TestClassificationLoss:
    def test_uniform_scores_give_log_m(self):
        scores = ad.tensor(np.zeros((1, 5)))
        loss = mdl.classification_loss(scores, 2)
        assert loss.data[0, 0] == pytest.approx(math.log(5), abs=1e-12)

    def test_loss_decreases_with_margin(self):
        losses = []
        for margin in (1.0, 10.0, 100.0):
            scores = ad.tensor([[margin, 0.0, 0.0, 0.0]])
            losses.append(mdl.classification_loss(scores, 0).data[0, 0])
        assert losses[0] > losses[1] > losses[2]
        assert losses[2] < 1e-12

    def test_gradient_is_probs_minus_onehot(self):
        s = np.array([[0.3, -1.2, 2.0]])
        scores = ad.param(s.copy())
        loss = mdl.classification_loss(scores, 1)
        ad.backward(loss)
        e = np.exp(s[0] - s[0].max())
        p = e / e.sum()
        expected = p.copy()
        expected[1] -= 1.0
        np.testing.assert_allclose(scores.grad[0], expected, rtol=0, atol=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            s = rng.normal(size=(1, 6))
            best = int(rng.integers(6))
            err = ad.grad_check(lambda x: mdl.classification_loss(x, best), s)
            assert err < 1e-6

    def test_bad_index_rejected(self):
        scores = ad.tensor(np.zeros((1, 3)))
        with pytest.raises(mdl.LabelError):
            mdl.classification_loss(scores, 3)


class TestRankingLoss:
    def test_single_solver_costs_nothing(self):
        loss = mdl.ranking_loss(ad.tensor([[1.7]]), [0])
        assert loss.data[0, 0] == 0.0

    def test_two_equal_scores_give_log_two(self):
        loss = mdl.ranking_loss(ad.tensor([[0.4, 0.4]]), [0, 1])
        assert loss.data[0, 0] == pytest.approx(math.log(2), abs=1e-12)

    def test_three_solver_example_matches_direct_formula(self):
        s = [1.0, 0.0, -1.0]
        loss = mdl.ranking_loss(ad.tensor([s]), [0, 1, 2])
        assert loss.data[0, 0] == pytest.approx(
            direct_ranking_loss(s, [0, 1, 2]), abs=1e-12)

    def test_matches_direct_formula_random(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            m = int(rng.integers(1, 7))
            s = rng.normal(size=m) * 3
            phi = rng.permutation(m)
            loss = mdl.ranking_loss(ad.tensor([s]), phi)
            assert loss.data[0, 0] == pytest.approx(
                direct_ranking_loss(s, phi), rel=1e-12, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        s = rng.normal(size=5)
        phi = rng.permutation(5)
        a = mdl.ranking_loss(ad.tensor([s]), phi).data[0, 0]
        b = mdl.ranking_loss(ad.tensor([s + 7.3]), phi).data[0, 0]
        assert a == pytest.approx(b, abs=1e-9)

    def test_pairwise_case_is_logistic(self):
        s_win, s_lose = 0.8, -0.4
        loss = mdl.ranking_loss(ad.tensor([[s_win, s_lose]]), [0, 1])
        assert loss.data[0, 0] == pytest.approx(
            math.log(1.0 + math.exp(s_lose - s_win)), abs=1e-12)

    def test_first_term_is_classification_loss(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=4)
        phi = np.array([2, 0, 3, 1])
        full = mdl.ranking_loss(ad.tensor([s]), phi).data[0, 0]
        ce = mdl.classification_loss(ad.tensor([s]), int(phi[0])).data[0, 0]
        tail = mdl.ranking_loss(
            ad.tensor([s[phi[1:]]]), np.arange(3)).data[0, 0]
        assert full == pytest.approx(ce + tail, abs=1e-10)

    def test_extreme_scores_stay_finite(self):
        loss = mdl.ranking_loss(ad.tensor([[1000.0, -1000.0, 0.0]]), [0, 2, 1])
        assert math.isfinite(loss.data[0, 0])
        scores = ad.param(np.array([[1000.0, -1000.0, 0.0]]))
        out = mdl.ranking_loss(scores, [0, 2, 1])
        ad.backward(out)
        assert np.all(np.isfinite(scores.grad))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            m = int(rng.integers(2, 7))
            s = rng.normal(size=(1, m))
            phi = rng.permutation(m)
            err = ad.grad_check(lambda x: mdl.ranking_loss(x, phi), s)
            assert err < 1e-6

    def test_not_a_permutation_rejected(self):
        with pytest.raises(mdl.LabelError):
            mdl.ranking_loss(ad.tensor([[0.0, 1.0]]), [0, 0])
        with pytest.raises(mdl.LabelError):
            mdl.ranking_loss(ad.tensor([[0.0, 1.0]]), [0, 1, 2])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_loss_nonnegative(self, s):
        s = np.asarray(s)
        phi = np.argsort(s)[::-1]
        loss = mdl.ranking_loss(ad.tensor([s]), phi).data[0, 0]
        assert loss >= -1e-12


class TestBuildLabels:
    def test_example_row(self):
        best, phi = mdl.build_labels(np.array([3.0, 1.0, 2.0]))
        assert best == 1
        assert phi.tolist() == [1, 2, 0]

    def test_ties_break_toward_lower_index(self):
        best, phi = mdl.build_labels(np.array([5.0, 3.0, 3.0]))
        assert best == 1
        assert phi.tolist() == [1, 2, 0]

    def test_all_equal_gives_identity(self):
        _, phi = mdl.build_labels(np.full(4, 2.5))
        assert phi.tolist() == [0, 1, 2, 3]

    def test_failures_rank_last(self):
        best, phi = mdl.build_labels(np.array([2.0, np.inf, 1.0]))
        assert best == 2
        assert phi.tolist() == [2, 0, 1]

    def test_all_failed_rejected(self):
        with pytest.raises(mdl.LabelError):
            mdl.build_labels(np.array([np.inf, np.inf]))


def tiny_dataset(n=10, seed=0, n_range=(12, 30)):
    cfg = GeneratorConfig(n_range=n_range, seed=seed, kind="TSP")
    return generate_dataset(cfg, n, id_prefix="mod")


def manual_model(dataset, n_solvers, seed=0, head_hidden=32):
    norm = mdl.fit_feature_norm(dataset)
    return mdl.init_selection_model(
        [f"s{j}" for j in range(n_solvers)], "TSP", encoder_mode="manual",
        head_hidden=head_hidden, seed=seed, feature_norm=norm)


def scale_split_table(dataset, pivot=None):
    """Solver 0 wins on small instances, solver 1 on large ones."""
    sizes = np.array([it.scale for it in dataset])
    pivot = pivot if pivot is not None else np.median(sizes)
    obj = np.zeros((len(dataset), 2))
    for i, n in enumerate(sizes):
        if n <= pivot:
            obj[i] = [100.0, 110.0]
        else:
            obj[i] = [110.0, 100.0]
    return make_table(obj, instance_ids=[it.id for it in dataset],
                      solver_ids=["s0", "s1"])


class TestScoring:
    def test_manual_forward_matches_numpy_replay(self):
        data = tiny_dataset(3)
        model = manual_model(data, 4, seed=2)
        from psel.features import manual_features
        for it in data:
            mean, std = model.feature_norm
            x = (manual_features(it) - mean) / np.where(std > 0, std, 1.0)
            x = np.concatenate([x, [it.scale / 500.0]]).reshape(1, -1)
            p = model.params
            h1 = np.tanh(x @ p["head.w1"].data + p["head.b1"].data)
            h2 = np.tanh(h1 @ p["head.w2"].data + p["head.b2"].data)
            expected = (h2 @ p["head.w3"].data + p["head.b3"].data)[0]
            np.testing.assert_allclose(mdl.score(model, it), expected,
                                       rtol=0, atol=1e-12)

    def test_score_shape_and_determinism(self):
        data = tiny_dataset(2)
        model = manual_model(data, 3)
        s1 = mdl.score(model, data[0])
        s2 = mdl.score(model, data[0])
        assert s1.shape == (3,)
        np.testing.assert_array_equal(s1, s2)

    def test_kind_mismatch_rejected(self):
        data = tiny_dataset(1)
        model = manual_model(data, 2)
        model.kind = "CVRP"
        with pytest.raises(DomainError):
            mdl.score(model, data[0])

    def test_encoder_modes_produce_scores(self):
        from psel.encoder import EncoderConfig
        data = tiny_dataset(1, n_range=(8, 12))
        for mode in ("flat", "hierarchical"):
            cfg = EncoderConfig(embed_dim=8, heads=2, ff_hidden=16,
                                flat_layers=1, hier_blocks=1,
                                layers_per_block=1, mode=mode)
            model = mdl.init_selection_model(
                ["a", "b"], "TSP", encoder_mode=mode, encoder_cfg=cfg,
                head_hidden=16, seed=0)
            s = mdl.score(model, data[0])
            assert s.shape == (2,) and np.all(np.isfinite(s))

    def test_head_gradients_match_finite_differences(self):
        data = tiny_dataset(1)
        model = manual_model(data, 3, seed=4, head_hidden=8)
        it = data[0]

        def build_loss():
            return mdl.ranking_loss(mdl.score_tensor(model, it), [2, 0, 1])

        err = ad.grad_check_params(build_loss, model.params, max_coords=10)
        assert err < 1e-5


class TestTraining:
    def test_step_count_is_ceil_of_batches(self, monkeypatch):
        data = tiny_dataset(10)
        table = scale_split_table(data)
        model = manual_model(data, 2)
        calls = []
        real = ad.adam_step
        monkeypatch.setattr(ad, "adam_step",
                            lambda p, g, s: calls.append(1) or real(p, g, s))
        cfg = mdl.TrainConfig(epochs=2, batch_size=4, seed=0,
                              loss="classification")
        _, history = mdl.train(model, data, table, cfg)
        assert len(calls) == 2 * math.ceil(10 / 4)
        assert len(history) == 2
        assert all(math.isnan(h["val_gap"]) for h in history)

    def test_runs_are_bit_identical(self):
        data = tiny_dataset(8)
        table = scale_split_table(data)
        cfg = mdl.TrainConfig(epochs=3, batch_size=4, seed=9, lr=1e-3)
        m1, h1 = mdl.train(manual_model(data, 2, seed=1), data, table, cfg,
                           val_set=data)
        m2, h2 = mdl.train(manual_model(data, 2, seed=1), data, table, cfg,
                           val_set=data)
        assert [r["train_loss"] for r in h1] == [r["train_loss"] for r in h2]
        assert [r["val_gap"] for r in h1] == [r["val_gap"] for r in h2]
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].data, m2.params[k].data)

    def test_input_model_left_untouched(self):
        data = tiny_dataset(6)
        table = scale_split_table(data)
        model = manual_model(data, 2)
        before = {k: v.data.copy() for k, v in model.params.items()}
        cfg = mdl.TrainConfig(epochs=1, batch_size=3, lr=1e-2)
        trained, _ = mdl.train(model, data, table, cfg)
        for k, v in before.items():
            np.testing.assert_array_equal(model.params[k].data, v)
        assert any(not np.array_equal(trained.params[k].data, before[k])
                   for k in before)

    def test_separable_task_is_learned(self):
        data = tiny_dataset(60, seed=3, n_range=(12, 60))
        table = scale_split_table(data)
        model = manual_model(data, 2, seed=0)
        cfg = mdl.TrainConfig(epochs=40, batch_size=16, lr=1e-3, seed=0,
                              loss="ranking")
        trained, history = mdl.train(model, data, table, cfg)
        assert history[-1]["train_loss"] < history[0]["train_loss"]
        assert mdl.selection_accuracy(trained, data, table) >= 95.0

    def test_returned_model_is_best_validation_epoch(self):
        data = tiny_dataset(20, seed=5, n_range=(12, 60))
        table = scale_split_table(data)
        cfg = mdl.TrainConfig(epochs=8, batch_size=8, lr=3e-3, seed=1)
        trained, history = mdl.train(manual_model(data, 2, seed=2), data,
                                     table, cfg, val_set=data)
        gaps = [h["val_gap"] for h in history]
        restored = mdl.mean_gap_of_choices(
            table, data, mdl.greedy_indices(trained, data))
        assert restored == pytest.approx(min(gaps), abs=1e-12)

    def test_failed_rows_are_excluded_with_warning(self, caplog):
        data = tiny_dataset(5)
        table = scale_split_table(data)
        table.objective[2] = np.inf
        cfg = mdl.TrainConfig(epochs=1, batch_size=2)
        with caplog.at_level("WARNING", logger="psel"):
            _, history = mdl.train(manual_model(data, 2), data, table, cfg)
        assert len(history) == 1
        assert any(data[2].id in rec.message for rec in caplog.records)

    def test_everything_failed_rejected(self):
        data = tiny_dataset(3)
        table = scale_split_table(data)
        table.objective[:] = np.inf
        with pytest.raises(ad.TrainingError):
            mdl.train(manual_model(data, 2), data, table,
                      mdl.TrainConfig(epochs=1))

    def test_nonfinite_loss_names_epoch_and_batch(self):
        data = tiny_dataset(4)
        table = scale_split_table(data)
        model = manual_model(data, 2)
        model.params["head.b3"].data[:] = np.nan
        with pytest.raises(ad.TrainingError, match="epoch 0 batch 0"):
            mdl.train(model, data, table, mdl.TrainConfig(epochs=1))

    def test_augment_multiplies_training_set(self, monkeypatch):
        data = tiny_dataset(3)
        table = scale_split_table(data)
        seen = []
        real = mdl.score_tensor

        def spy(model, it):
            seen.append(it.id)
            return real(model, it)

        monkeypatch.setattr(mdl, "score_tensor", spy)
        cfg = mdl.TrainConfig(epochs=1, batch_size=24, augment=True)
        mdl.train(manual_model(data, 2), data, table, cfg)
        assert len(seen) == 24
        assert len(set(seen)) == 24

    def test_config_validation(self):
        with pytest.raises(DomainError):
            mdl.TrainConfig(epochs=0).validate()
        with pytest.raises(DomainError):
            mdl.TrainConfig(loss="hinge").validate()


class TestSelectionAccuracy:
    def test_oracle_choices_score_100(self):
        rng = np.random.default_rng(0)
        obj = 100 + rng.normal(size=(50, 4)) ** 2
        data = tiny_dataset(50)
        table = make_table(obj, instance_ids=[it.id for it in data],
                           solver_ids=list("abcd"))
        oracle = np.argmin(obj, axis=1)
        assert mdl.accuracy_of_choices(table, data, oracle) == 100.0

    def test_random_choices_score_one_over_m(self):
        rng = np.random.default_rng(1)
        m = 4
        obj = 100 + rng.random(size=(1000, m))   # distinct minima a.s.
        ids = [f"r{i}" for i in range(1000)]
        insts = [type("I", (), {"id": i})() for i in ids]
        table = make_table(obj, instance_ids=ids,
                           solver_ids=[f"s{j}" for j in range(m)])
        choices = rng.integers(m, size=1000)
        acc = mdl.accuracy_of_choices(table, insts, choices)
        assert abs(acc - 100.0 / m) <= 5.0

    def test_ties_count_for_any_minimizer(self):
        ids = ["t0"]
        insts = [type("I", (), {"id": "t0"})()]
        table = make_table([[100.0, 100.0, 105.0]], instance_ids=ids)
        assert mdl.accuracy_of_choices(table, insts, [0]) == 100.0
        assert mdl.accuracy_of_choices(table, insts, [1]) == 100.0
        assert mdl.accuracy_of_choices(table, insts, [2]) == 0.0

    def test_mean_gap_of_choices(self):
        ids = ["g0", "g1"]
        insts = [type("I", (), {"id": i})() for i in ids]
        table = make_table([[100.0, 102.0], [100.0, 110.0]], instance_ids=ids)
        assert mdl.mean_gap_of_choices(table, insts, [1, 0]) == pytest.approx(1.0)


class TestHistoryExport:
    def test_round_trip(self, tmp_path):
        hist = [{"epoch": 0, "train_loss": 1.25, "val_gap": 0.5},
                {"epoch": 1, "train_loss": 0.75, "val_gap": float("nan")}]
        path = tmp_path / "hist.csv"
        mdl.export_history_csv(hist, str(path))
        rows = path.read_text().strip().split("\n")
        assert rows[0] == "epoch,train_loss,val_gap"
        assert rows[1].startswith("0,1.25,")
        assert "nan" in rows[2]
