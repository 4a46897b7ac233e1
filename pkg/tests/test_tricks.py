import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gcnres import autodiff as ad
from gcnres.errors import FormatError, ShapeError, ValidationError
from gcnres.graph import generate_sbm, symmetric_normalize
from gcnres.metrics import accuracy
from gcnres.model import GcnRes, GcnResConfig
from gcnres.training import BATCH_STREAM, _plain_step, build_train_loader, derive_rng, TrainConfig, train
from gcnres.tricks import (
    CorrectSmoothConfig,
    EmbeddingMatrix,
    FlagConfig,
    correct_and_smooth,
    cs_label_nodes,
    embedding_merge,
    flag_train_step,
    label_propagate,
    label_usage_eval_features,
    label_usage_prepare,
    load_embeddings,
    load_predictions,
    save_embeddings,
    save_predictions,
)

from conftest import dense_normalized, graph_from_pairs, random_graph


def dense_cs(base, dataset, alpha1, iters1, alpha2, iters2, label_set, scale="autoscale"):
    """Correct & Smooth written with dense matrices and explicit loops."""
    a = dense_normalized(dataset.graph)
    n, c = base.shape
    known = list(dataset.train) + (list(dataset.valid) if label_set == "v3" else [])
    is_known = np.zeros(n, dtype=bool)
    is_known[known] = True
    onehot = np.zeros((n, c))
    onehot[known, dataset.labels[known]] = 1.0

    def lp(y0, alpha, iters):
        y = y0.copy()
        for _ in range(iters):
            y = (1 - alpha) * y0 + alpha * (a @ y)
        return y

    e = np.where(is_known[:, None], onehot - base, 0.0)
    e_hat = lp(e, alpha1, iters1)
    if scale == "autoscale":
        denom = np.abs(e_hat[~is_known]).sum(1).mean() if (~is_known).any() else 0.0
        # no residual reaches an unlabelled node: leave the correction unscaled
        s = np.abs(e[is_known]).sum(1).mean() / denom if denom > 0 else 1.0
    else:
        s = scale
    g = base + s * e_hat
    g[is_known] = onehot[is_known]
    out = np.maximum(lp(g, alpha2, iters2), 0)
    return out / out.sum(1, keepdims=True)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_sbm([12, 12], 0.3, 0.05, 4, 0.5, 2)


def random_probs(rng, n, c):
    p = rng.random((n, c)) + 0.01
    return p / p.sum(1, keepdims=True)


class TestMerge:
    def test_concat(self):
        x, e = np.ones((4, 2)), np.full((4, 3), 2.0)
        out = embedding_merge(x, EmbeddingMatrix(e))
        assert out.shape == (4, 5)
        assert np.array_equal(out[:, :2], x) and np.array_equal(out[:, 2:], e)

    def test_sum_zero(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        assert np.array_equal(embedding_merge(x, np.zeros((3, 4)), "sum"), x)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=st.floats(-1e6, 1e6)),
           arrays(np.float64, (5, 2), elements=st.floats(-1e6, 1e6)))
    def test_concat_keeps_leading_columns(self, x, e):
        assert np.array_equal(embedding_merge(x, e)[:, :3], x)

    def test_errors(self):
        with pytest.raises(ShapeError):
            embedding_merge(np.ones((3, 2)), np.ones((4, 2)))
        with pytest.raises(ShapeError):
            embedding_merge(np.ones((3, 2)), np.ones((3, 3)), "sum")
        with pytest.raises(ValidationError):
            embedding_merge(np.ones((3, 2)), np.ones((3, 2)), "max")

    def test_non_finite_embedding(self):
        with pytest.raises(ValidationError):
            EmbeddingMatrix(np.array([[np.nan]]))


class TestLabelPropagate:
    def test_zero_iterations(self, ring20):
        y = np.random.default_rng(0).random((20, 3))
        assert np.array_equal(label_propagate(y, symmetric_normalize(ring20), 0.5, 0), y)

    def test_alpha_zero(self, ring20):
        y = np.random.default_rng(0).random((20, 3))
        assert np.array_equal(label_propagate(y, symmetric_normalize(ring20), 0.0, 7), y)

    def test_two_node_path(self):
        adj = symmetric_normalize(graph_from_pairs(2, [(0, 1)]))
        out = label_propagate(np.array([[1.0], [0.0]]), adj, 0.5, 1)
        np.testing.assert_allclose(out, [[0.75], [0.25]], rtol=0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
    def test_linear(self, a, b, seed):
        rng = np.random.default_rng(seed)
        adj = symmetric_normalize(random_graph(15, 0.3, rng))
        y1, y2 = rng.normal(size=(15, 3)), rng.normal(size=(15, 3))
        lhs = label_propagate(a * y1 + b * y2, adj, 0.8, 10)
        rhs = a * label_propagate(y1, adj, 0.8, 10) + b * label_propagate(y2, adj, 0.8, 10)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)

    def test_converges(self, ring20):
        adj = symmetric_normalize(ring20)
        y = np.random.default_rng(0).random((20, 4))
        d = np.abs(label_propagate(y, adj, 0.8, 101) - label_propagate(y, adj, 0.8, 100)).max()
        assert d < 1e-8

    def test_errors(self, ring20):
        adj = symmetric_normalize(ring20)
        with pytest.raises(ShapeError):
            label_propagate(np.zeros((19, 2)), adj, 0.5, 1)
        with pytest.raises(ValidationError):
            label_propagate(np.zeros((20, 2)), adj, 1.0, 1)


class TestCorrectSmooth:
    def test_degenerate(self, tiny_ds):
        base = random_probs(np.random.default_rng(0), tiny_ds.num_nodes, 2)
        out = correct_and_smooth(base, tiny_ds, CorrectSmoothConfig(0.5, 0, 1.0, 0.5, 0))
        expected = base.copy()
        expected[tiny_ds.train] = np.eye(2)[tiny_ds.labels[tiny_ds.train]]
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)

    def test_v3_contains_v2(self, tiny_ds):
        v2 = set(cs_label_nodes(tiny_ds, "v2").tolist())
        v3 = set(cs_label_nodes(tiny_ds, "v3").tolist())
        assert v2 <= v3 and v3 - v2 == set(tiny_ds.valid.tolist())

    @pytest.mark.parametrize("label_set", ["v2", "v3"])
    @pytest.mark.parametrize("scale", ["autoscale", 0.7])
    def test_dense_oracle(self, tiny_ds, label_set, scale):
        base = random_probs(np.random.default_rng(1), tiny_ds.num_nodes, 2)
        cfg = CorrectSmoothConfig(0.8, 20, scale, 0.6, 15, label_set)
        got = correct_and_smooth(base, tiny_ds, cfg)
        want = dense_cs(base, tiny_ds, 0.8, 20, 0.6, 15, label_set, scale)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["v2", "v3"]))
    def test_valid_distributions(self, seed, label_set):
        rng = np.random.default_rng(seed)
        ds = generate_sbm([10, 8, 6], 0.3, 0.05, 3, 0.5, int(rng.integers(100)))
        base = random_probs(rng, ds.num_nodes, 3)
        out = correct_and_smooth(base, ds, CorrectSmoothConfig(label_set=label_set, iters1=10, iters2=10))
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(1), 1.0, rtol=0, atol=1e-9)

    def test_rejects_non_stochastic(self, tiny_ds):
        with pytest.raises(ValidationError):
            correct_and_smooth(np.ones((tiny_ds.num_nodes, 2)), tiny_ds, CorrectSmoothConfig())

    @pytest.mark.parametrize("kw", [dict(alpha1=0.0), dict(alpha2=1.0), dict(iters1=-1), dict(label_set="v1")])
    def test_config_validation(self, kw):
        with pytest.raises(ValidationError):
            CorrectSmoothConfig(**kw).validate()

    def test_reference_runs_match_oracle(self, sbm_reference, plain2_runs):
        ds = sbm_reference
        cfg = CorrectSmoothConfig(0.8, 50, "autoscale", 0.8, 50, "v2")
        gains = []
        for run in plain2_runs:
            base = np.exp(run.best_log_probs)
            base /= base.sum(1, keepdims=True)
            out = correct_and_smooth(base, ds, cfg)
            want = dense_cs(base, ds, 0.8, 50, 0.8, 50, "v2")
            np.testing.assert_allclose(out, want, rtol=0, atol=1e-9)
            t = ds.test
            before = accuracy(base[t], ds.labels[t])
            after = accuracy(out[t], ds.labels[t])
            assert after == accuracy(want[t], ds.labels[t])
            gains.append(after - before)
        assert sum(g >= 0 for g in gains) >= 7


def _flag_setup(seed=0, norm="batch"):
    ds = generate_sbm([15, 15], 0.3, 0.05, 5, 0.5, 4)
    cfg = GcnResConfig(layers=2, hidden_dim=6, num_classes=2, norm=norm, dropout=0.3)
    model = GcnRes(5, cfg, derive_rng(seed, 2))
    (batch,) = build_train_loader(ds, TrainConfig(), 0, 1)
    return ds, model, batch


def _snapshot(model):
    state = model.state_dict()
    state.update({f"{n}.m": p.m.copy() for n, p in model.named_parameters()})
    state.update({f"{n}.v": p.v.copy() for n, p in model.named_parameters()})
    return state


def _assert_same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), k


class TestFlag:
    def _flag_run(self, steps, step_size, n_updates=2):
        ds, model, batch = _flag_setup()
        opt = ad.Adam(model.parameters(), lr=0.01)
        losses = []
        for e in range(n_updates):
            losses.append(flag_train_step(
                model, batch, ds.features, ds.labels, FlagConfig(steps, step_size), opt,
                lambda: derive_rng(0, BATCH_STREAM, e), derive_rng(0, 9, e)))
        return _snapshot(model), losses

    def test_zero_step_size_matches_single_step(self):
        a, la = self._flag_run(3, 0.0)
        b, lb = self._flag_run(1, 0.0)
        _assert_same(a, b)
        assert la == lb

    def test_reduces_to_plain_step(self):
        a, la = self._flag_run(1, 0.0)
        ds, model, batch = _flag_setup()
        opt = ad.Adam(model.parameters(), lr=0.01)
        lb = [_plain_step(model, batch, ds.features, ds.labels, batch.targets, opt,
                          derive_rng(0, BATCH_STREAM, e)) for e in range(2)]
        _assert_same(a, _snapshot(model))
        assert la == lb

    def test_perturbation_changes_update(self):
        a, _ = self._flag_run(3, 1e-2)
        b, _ = self._flag_run(1, 0.0)
        assert any(not np.array_equal(a[k], b[k]) for k in a)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 5), st.floats(1e-4, 0.5), st.integers(0, 1000), st.booleans())
    def test_delta_bound(self, steps, step_size, seed, raw_only):
        ds, model, batch = _flag_setup(seed % 7)
        opt = ad.Adam(model.parameters(), lr=0.01)
        seen = []
        flag_train_step(model, batch, ds.features, ds.labels, FlagConfig(steps, step_size), opt,
                        lambda: derive_rng(seed, 0), derive_rng(seed, 1),
                        raw_cols=3 if raw_only else None, on_delta=lambda d: seen.append(d.copy()))
        assert len(seen) == steps
        for d in seen:
            assert np.abs(d).max() <= (steps + 1) * step_size * (1 + 1e-12)
            if raw_only:
                assert np.all(d[:, 3:] == 0)

    def test_running_stats_updated_once(self):
        ds, model, batch = _flag_setup()
        opt = ad.Adam(model.parameters(), lr=0.01)
        flag_train_step(model, batch, ds.features, ds.labels, FlagConfig(4, 1e-3), opt,
                        lambda: derive_rng(0, 0), derive_rng(0, 1))
        # running statistics reflect one momentum update, not one per ascent step
        first = _flag_setup()[1]
        first.forward(ds.features, batch.adj, True, derive_rng(0, 0))
        assert np.allclose(model.norms[0].running_var, first.norms[0].running_var, rtol=1e-3)
        assert np.allclose(model.norms[0].running_mean, first.norms[0].running_mean, atol=1e-3)
        assert all(not n.frozen for n in model.norms)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            FlagConfig(steps=0).validate()

    def test_training_with_flag(self):
        ds, model, _ = _flag_setup()
        res = train(model, ds, TrainConfig(epochs=3), flag=FlagConfig())
        assert res.steps == 3 and np.isfinite(res.train_loss).all()


class TestLabelUsage:
    def test_round_masks(self, tiny_ds):
        r = label_usage_prepare(tiny_ds, 0, np.random.default_rng(0))
        d, c = tiny_ds.features.shape[1], tiny_ds.num_classes
        assert r.features.shape == (tiny_ds.num_nodes, d + c)
        assert np.array_equal(r.features[:, :d], tiny_ds.features)
        channel = r.features[:, d:]
        others = np.concatenate([tiny_ds.valid, tiny_ds.test, r.targets])
        assert np.all(channel[others] == 0)
        assert np.array_equal(channel[r.exposed], np.eye(c)[tiny_ds.labels[r.exposed]])
        assert set(r.exposed) | set(r.targets) == set(tiny_ds.train)
        assert not set(r.exposed) & set(r.targets)
        assert abs(len(r.exposed) - len(r.targets)) <= 1

    def test_split_varies_with_rng(self, tiny_ds):
        a = label_usage_prepare(tiny_ds, 0, np.random.default_rng(0)).exposed
        b = label_usage_prepare(tiny_ds, 0, np.random.default_rng(1)).exposed
        assert not np.array_equal(a, b)

    def test_recycling_fills_hidden_rows(self, tiny_ds):
        c = tiny_ds.num_classes
        fill = np.full((tiny_ds.num_nodes, c), 1.0 / c)
        r = label_usage_prepare(tiny_ds, 2, np.random.default_rng(0), predict=lambda f: fill)
        d = tiny_ds.features.shape[1]
        hidden = np.setdiff1d(np.arange(tiny_ds.num_nodes), r.exposed)
        assert np.all(r.features[hidden, d:] == 1.0 / c)
        with pytest.raises(ValidationError):
            label_usage_prepare(tiny_ds, 1, np.random.default_rng(0))

    def test_eval_features(self, tiny_ds):
        f = label_usage_eval_features(tiny_ds)
        d = tiny_ds.features.shape[1]
        assert np.all(f[tiny_ds.valid, d:] == 0) and np.all(f[tiny_ds.test, d:] == 0)
        assert np.all(f[tiny_ds.train, d:].sum(1) == 1)

    def test_training_with_label_usage(self, tiny_ds):
        cfg = GcnResConfig(layers=2, hidden_dim=6, num_classes=2)
        model = GcnRes(tiny_ds.features.shape[1] + 2, cfg, np.random.default_rng(0))
        res = train(model, tiny_ds, TrainConfig(epochs=2), label_usage=1)
        assert len(res.valid) == 2


class TestContainers:
    def test_embedding_round_trip(self, tmp_path):
        e = EmbeddingMatrix(np.random.default_rng(0).normal(size=(7, 3)), "node2vec seed=1")
        save_embeddings(e, tmp_path / "e.gcne")
        back = load_embeddings(tmp_path / "e.gcne")
        assert back == e and back.values.tobytes() == e.values.tobytes()
        raw = (tmp_path / "e.gcne").read_bytes()
        assert raw[:4] == b"GCNE" and raw[8:24] == (7).to_bytes(8, "little") + (3).to_bytes(8, "little")

    def test_prediction_round_trip(self, tmp_path):
        p = random_probs(np.random.default_rng(0), 5, 3)
        save_predictions(p, tmp_path / "p.gcnp", "base")
        back, prov = load_predictions(tmp_path / "p.gcnp")
        assert back.tobytes() == p.tobytes() and prov == "base"

    def test_magic_mismatch(self, tmp_path):
        save_predictions(np.ones((2, 1)), tmp_path / "p.gcnp")
        with pytest.raises(FormatError):
            load_embeddings(tmp_path / "p.gcnp")
