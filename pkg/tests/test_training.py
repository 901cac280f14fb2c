import math

import numpy as np
import pytest

from helpers import make_params
from regnn.errors import ConfigError, ContractError, NumericError
from regnn.synthetic import generate
from regnn.tensor import Tensor
from regnn.textgraph import Document
from regnn.training import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_gradients,
    evaluate,
    headline,
    load_embeddings,
    load_trained,
    metrics,
    prepare,
    run_seeds,
    save_trained,
    split_dev,
    train,
    write_log,
)

TINY = dict(hidden=8, layers=2, epochs=2, lr0=0.01, min_count=1, batch_size=4)


@pytest.fixture(scope="module")
def tiny_data():
    docs, _ = generate(50, "single", seed=3, min_len=8, max_len=14)
    cfg = TrainConfig(**TINY)
    return cfg, prepare(cfg, docs[:40], None, docs[40:])


class TestConfig:
    def test_schedule_halves_each_epoch(self):
        cfg = TrainConfig(lr0=0.008)
        assert [cfg.lr(e) for e in range(4)] == [0.008, 0.004, 0.002, 0.001]

    @pytest.mark.parametrize("field,value", [("max_neighbors", 1), ("layers", 0), ("lr0", 0.0), ("task", "both"), ("dev_fraction", 1.0)])
    def test_rejects_bad_values(self, field, value):
        with pytest.raises(ConfigError):
            TrainConfig(**{field: value})

    def test_dict_round_trip_ignores_unknown_keys(self):
        cfg = TrainConfig(hidden=7, lstm=False)
        assert TrainConfig.from_dict({**cfg.to_dict(), "unrelated": 1}) == cfg
        assert cfg.variant.tag == "no-lstm"


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        p = make_params(np.random.default_rng(0))
        before = {n: p[n].data.copy() for n in p.names()}
        for t in p:
            t.grad = np.where(np.arange(t.data.size).reshape(t.shape) % 2, 2.0, -0.5)
        adam_step(p, AdamState(), lr=0.1)
        for n in p.names():
            g = p[n].grad
            np.testing.assert_allclose(p[n].data - before[n], -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_bias_correction_on_constant_gradient(self):
        p = make_params(np.random.default_rng(1))
        st = AdamState()
        x0 = p["u_n"].data.copy()
        for _ in range(5):
            p["u_n"].grad = np.full(p["u_n"].shape, 3.0)
            adam_step(p, st, lr=0.01)
        # constant gradients give m_hat / sqrt(v_hat) = 1 at every step
        np.testing.assert_allclose(p["u_n"].data, x0 - 0.05, atol=1e-9)

    def test_missing_gradient_counts_as_zero(self):
        p = make_params(np.random.default_rng(2))
        before = p["W_n"].data.copy()
        adam_step(p, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["W_n"].data, before)

    def test_frozen_parameter_not_moved(self):
        p = make_params(np.random.default_rng(3))
        before = p["E_word"].data.copy()
        p["E_word"].grad = np.ones(p["E_word"].shape)
        st = AdamState()
        adam_step(p, st, lr=0.1, frozen=("E_word",))
        np.testing.assert_array_equal(p["E_word"].data, before)
        assert np.all(st.m["E_word"] > 0)

    def test_non_finite_gradient_names_parameter_and_changes_nothing(self):
        p = make_params(np.random.default_rng(4))
        p["W_i"].grad = np.ones(p["W_i"].shape)
        p["b_o"].grad = np.full(p["b_o"].shape, np.inf)
        before = p["W_i"].data.copy()
        with pytest.raises(NumericError, match="b_o"):
            adam_step(p, AdamState(), lr=0.1)
        np.testing.assert_array_equal(p["W_i"].data, before)

    def test_clip(self):
        p = make_params(np.random.default_rng(5))
        p["u_n"].grad = np.full(4, 3.0)
        p["u_a"].grad = np.full(4, 4.0)
        assert clip_gradients(p, 1.0) == pytest.approx(10.0)
        total = math.sqrt(np.sum(p["u_n"].grad ** 2) + np.sum(p["u_a"].grad ** 2))
        assert total == pytest.approx(1.0)


class TestData:
    def test_split_is_seeded_and_disjoint(self):
        docs = list(range(30))
        a = split_dev(docs, 0.2, np.random.default_rng(0))
        b = split_dev(docs, 0.2, np.random.default_rng(0))
        assert a == b
        assert len(a[1]) == 6 and set(a[0]) | set(a[1]) == set(docs) and not set(a[0]) & set(a[1])

    def test_vocab_from_train_labels_from_all(self):
        train_docs = [Document(["x"], "alpha beta"), Document(["y"], "beta gamma")]
        dev = [Document(["z"], "delta alpha")]
        cfg = TrainConfig(min_count=1)
        data = prepare(cfg, train_docs, dev)
        assert "delta" not in data.vocab.tokens
        assert data.labels == ["x", "y", "z"]
        assert [ex.labels for ex in data.dev] == [[2]]

    def test_single_task_keeps_first_label(self):
        data = prepare(TrainConfig(min_count=1), [Document(["b", "a"], "p q")], [Document(["a"], "q")])
        assert data.train[0].labels == [data.labels.index("b")]

    def test_metrics(self):
        assert metrics([[0], [1]], [[0], [0]], "single") == {"accuracy": 0.5}
        m = metrics([[0, 1]], [[1]], "multi")
        assert headline(m) == m["f1"] == pytest.approx(2 / 3)


class TestTrain:
    def test_empty_dev_rejected(self, tiny_data):
        cfg, data = tiny_data
        with pytest.raises(ConfigError):
            train(cfg, data.train, [], len(data.vocab), len(data.labels))

    def test_loss_goes_down(self, tiny_data):
        cfg, data = tiny_data
        res = train(TrainConfig(**{**TINY, "epochs": 4}), data.train, data.dev, len(data.vocab), len(data.labels))
        assert res.log[-1].train_loss < res.log[0].train_loss
        assert [r.lr for r in res.log] == [0.01, 0.005, 0.0025, 0.00125]

    def test_identical_runs_and_round_trip(self, tiny_data, tmp_path):
        cfg, data = tiny_data
        runs = []
        for k in range(2):
            res = train(cfg, data.train, data.dev, len(data.vocab), len(data.labels))
            write_log(tmp_path / f"log{k}.csv", res.log)
            save_trained(tmp_path / f"m{k}.ckpt", res, data)
            runs.append(res)
        assert (tmp_path / "log0.csv").read_bytes() == (tmp_path / "log1.csv").read_bytes()
        assert (tmp_path / "m0.ckpt").read_bytes() == (tmp_path / "m1.ckpt").read_bytes()
        params, header = load_trained(tmp_path / "m0.ckpt", data)
        assert header["best_dev_metric"] == runs[0].best_metric
        assert headline(evaluate(params, data.dev)) == runs[0].best_metric

    def test_seed_changes_run(self, tiny_data):
        cfg, data = tiny_data
        a = train(cfg, data.train, data.dev, len(data.vocab), len(data.labels))
        b = train(TrainConfig(**{**TINY, "seed": 1}), data.train, data.dev, len(data.vocab), len(data.labels))
        assert not np.array_equal(a.params["W_n"].data, b.params["W_n"].data)

    def test_checkpoint_mismatch(self, tiny_data, tmp_path):
        cfg, data = tiny_data
        res = train(TrainConfig(**{**TINY, "epochs": 1}), data.train, data.dev, len(data.vocab), len(data.labels))
        save_trained(tmp_path / "m.ckpt", res, data)
        other = prepare(TrainConfig(**TINY), [Document(["x"], "a b")], [Document(["y"], "b")])
        with pytest.raises(ContractError):
            load_trained(tmp_path / "m.ckpt", other)

    def test_parallel_eval_matches_serial(self, tiny_data):
        cfg, data = tiny_data
        res = train(TrainConfig(**{**TINY, "epochs": 1}), data.train, data.dev, len(data.vocab), len(data.labels))
        assert evaluate(res.params, data.test, workers=3) == evaluate(res.params, data.test)

    def test_run_seeds_reports_mean_and_std(self, tiny_data):
        cfg, data = tiny_data
        out = run_seeds(TrainConfig(**{**TINY, "epochs": 1}), data, [0, 1])
        accs = [r["accuracy"] for r in out["runs"]]
        assert out["accuracy"]["mean"] == pytest.approx(np.mean(accs))
        assert out["accuracy"]["std"] == pytest.approx(np.std(accs, ddof=1))


class TestEmbeddings:
    def test_coverage_and_rows(self, tmp_path):
        data = prepare(TrainConfig(min_count=1), [Document(["x"], "alpha beta gamma")], [Document(["y"], "beta")])
        (tmp_path / "e.txt").write_text("2 3\nalpha 1 2 3\nzeta 0 0 0\n")
        table, cover = load_embeddings(tmp_path / "e.txt", data.vocab, 3, np.random.default_rng(0))
        assert cover == pytest.approx(1 / 3)
        np.testing.assert_array_equal(table[data.vocab.id("alpha")], [1, 2, 3])

    def test_dimension_mismatch(self, tmp_path):
        data = prepare(TrainConfig(min_count=1), [Document(["x"], "alpha")], [Document(["y"], "alpha")])
        (tmp_path / "e.txt").write_text("alpha 1 2\n")
        with pytest.raises(ConfigError):
            load_embeddings(tmp_path / "e.txt", data.vocab, 3, np.random.default_rng(0))

    def test_training_starts_from_given_table(self, tiny_data):
        cfg, data = tiny_data
        table = np.full((len(data.vocab), 8), 0.25)
        res = train(TrainConfig(**{**TINY, "epochs": 1, "freeze_embeddings": True}), data.train, data.dev, len(data.vocab), len(data.labels), embeddings=table)
        np.testing.assert_array_equal(res.params["E_word"].data, np.float32(0.25))
