import csv

import numpy as np
import pytest

from dbse import evaluation as ev
from dbse.model import Model
from dbse.synthdata import SyntheticSpec, dominant_frequency_dynamic, generate, nearest_centroid_static, render, split

S, D, T, DIM = 5, 4, 20, 10


class OracleModel:
    """Codes are one-hot ground-truth labels; the decoder is the noise-free generator."""

    def codes(self, x):
        s = np.eye(S)[nearest_centroid_static(x, S)]
        d = np.repeat(np.eye(D)[dominant_frequency_dynamic(x, D)][:, None, :], T, axis=1)
        return s, d

    def decode(self, s, d):
        return render(np.argmax(s, axis=1), np.argmax(d.mean(axis=1), axis=1), T, DIM, S)

    def sample_dynamics(self, n, rng):
        return np.repeat(np.eye(D)[rng.integers(0, D, n)][:, None, :], T, axis=1)


@pytest.fixture(scope="module")
def data():
    ds = generate(SyntheticSpec(n_sequences=1000, seed=5))
    return split(ds, (0.6, 0.4), seed=0)


@pytest.fixture(scope="module")
def judges(data):
    return ev.train_judges(*data, hidden=32, max_iter=200, seed=0)


def test_judges_are_accurate(judges):
    assert judges.static.test_accuracy >= 0.98
    assert judges.dynamic.test_accuracy >= 0.98


def test_judge_is_deterministic(data, judges):
    again = ev.train_judge(*data, "static", hidden=32, max_iter=200, seed=0)
    np.testing.assert_array_equal(again.predict_proba(data[1].values), judges.static.predict_proba(data[1].values))


def test_judge_on_shuffled_labels_is_at_chance(data):
    tr, te = data
    r = np.random.default_rng(0)
    tr_s = tr.subset(np.arange(len(tr)))
    te_s = te.subset(np.arange(len(te)))
    tr_s.static_labels = r.permutation(tr_s.static_labels)
    te_s.static_labels = r.permutation(te_s.static_labels)
    j = ev.train_judge(tr_s, te_s, "static", hidden=32, max_iter=200, seed=0)
    assert abs(j.test_accuracy - 1 / S) < 0.1


def test_judge_rejects_single_class():
    ds = generate(SyntheticSpec(n_sequences=20))
    ds.static_labels[:] = 2
    with pytest.raises(ev.EvalError):
        ev.train_judge(ds, ds, "static")


def test_generation_protocol_with_oracle_codes(data, judges):
    _, te = data
    oracle = OracleModel()
    rs = ev.leakage_generation(oracle, judges, te, "resample_static", seed=1)
    rd = ev.leakage_generation(oracle, judges, te, "resample_dynamic", seed=1)
    # fresh static code picks a random class: static accuracy at chance, dynamic kept
    assert rs.metrics["dynamic_acc"] >= 0.98
    assert rs.metrics["leakage_gap"] == pytest.approx(judges.dynamic.test_accuracy - 1 / S, abs=0.07)
    assert rd.metrics["static_acc"] >= 0.98
    assert rd.metrics["leakage_gap"] == pytest.approx(judges.static.test_accuracy - 1 / D, abs=0.07)
    assert rs.metrics["chance_static"] == 1 / S and rs.metrics["chance_dynamic"] == 1 / D


def test_generation_protocol_is_deterministic(data, judges):
    _, te = data
    a = ev.leakage_generation(OracleModel(), judges, te, "resample_dynamic", seed=3)
    b = ev.leakage_generation(OracleModel(), judges, te, "resample_dynamic", seed=3)
    assert a.metrics == b.metrics
    with pytest.raises(ev.EvalError):
        ev.leakage_generation(OracleModel(), judges, te, "resample_everything")


def test_latent_protocol_with_oracle_codes(data):
    _, te = data
    rep = ev.leakage_latent(OracleModel(), te, seed=0, hidden=16, max_iter=200)
    m = rep.metrics
    assert m["static_from_s"] == 1.0 and m["dynamic_from_d"] == 1.0
    assert m["static_gap"] == pytest.approx(1 - 1 / D, abs=0.1)
    assert m["dynamic_gap"] == pytest.approx(1 - 1 / S, abs=0.1)


def test_generation_metrics_schema(data, judges):
    rep = ev.generation_metrics(OracleModel(), judges, data[1], seed=0)
    assert list(rep.metrics) == ["acc", "is", "h_y_given_x", "h_y"]
    assert rep.metrics["acc"] >= 0.98
    assert rep.metrics["is"] == pytest.approx(D, rel=0.1)
    assert rep.metrics["h_y"] == pytest.approx(np.log(D), rel=0.05)


def test_swap_fidelity_with_oracle(data, judges):
    rep, sw = ev.swap_fidelity(OracleModel(), judges, data[1], n_pairs=100, seed=0)
    assert rep.metrics["static_match"] >= 0.98 and rep.metrics["dynamic_match"] >= 0.98
    assert sw["swap1"].shape == (100, T, DIM)
    assert np.all(sw["pairs"][:, 0] != sw["pairs"][:, 1])


def test_swap_with_itself_is_reconstruction(tiny_config, tiny_params):
    m = Model(tiny_config, tiny_params)
    x = np.random.default_rng(0).normal(size=(3, 4, 3))
    a, b = ev.swap(m, x, x)
    np.testing.assert_array_equal(a, m.decode(*m.codes(x)))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ev.EvalError):
        ev.swap(m, x, x[:2])


def test_eer_protocol_with_oracle(data):
    rep = ev.eer_protocol(OracleModel(), data[1], n_pairs=400, seed=0)
    assert rep.metrics["static_eer"] == 0.0
    assert rep.metrics["dynamic_eer"] > 0.3


def test_verification_pairs_are_half_same():
    labels = np.arange(100) % 5
    p = ev.verification_pairs(labels, 200, 0)
    same = labels[p[:, 0]] == labels[p[:, 1]]
    assert same.sum() == 100 and np.all(p[:, 0] != p[:, 1])


def test_untrained_model_refused(tiny_config, tiny_params, data, judges):
    m = Model(tiny_config, tiny_params)
    m.epochs_trained = 0
    with pytest.raises(ev.EvalError, match="trained"):
        ev.leakage_latent(m, data[1])


def test_report_values_must_be_finite():
    with pytest.raises(ev.EvalError):
        ev.EvalReport("x", {"a": float("nan")})


def test_report_csv_roundtrip(tmp_path):
    reps = [ev.EvalReport("p1", {"a": 0.5, "b": 1 / 3}, 7, "abc"), ev.EvalReport("p2", {"c": 2.0}, 7, "abc")]
    ev.write_reports(reps, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "protocol,metric,value,seed,config_digest"
    back = ev.read_reports(tmp_path / "r.csv")
    assert [(r.protocol, r.metrics, r.seed, r.config_digest) for r in back] == \
        [(r.protocol, r.metrics, r.seed, r.config_digest) for r in reps]


def test_sampled_codes_are_seeded(tiny_config, tiny_params):
    m = Model(tiny_config, tiny_params)
    ds = generate(SyntheticSpec(n_sequences=10, T=4, d=3))
    a = ev.latent_codes(m, ds, "sample", seed=1)
    b = ev.latent_codes(m, ds, "sample", seed=1)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], ev.latent_codes(m, ds, "mean")[0])
    with pytest.raises(ev.EvalError):
        ev.latent_codes(m, ds, "mode")


def test_export_embeddings(tiny_config, tiny_params, tmp_path):
    m = Model(tiny_config, tiny_params)
    ds = generate(SyntheticSpec(n_sequences=12, T=4, d=3))
    assert ev.export_embeddings(m, ds, tmp_path / "e.csv") == 12
    with open(tmp_path / "e.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["id", "static_label", "dynamic_label", "s0", "s1", "s2", "d0", "d1"]
    assert len(rows) == 13
    _, d = m.codes(ds.values)
    np.testing.assert_allclose(np.array(rows[1:], dtype=float)[:, 6:], d.sum(axis=1) / 4, atol=1e-12)
    ev.export_embeddings(m, ds, tmp_path / "f.csv")
    assert (tmp_path / "e.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()
    with pytest.raises(ev.EvalError):
        ev.export_embeddings(m, ds.subset(np.zeros(0, dtype=int)), tmp_path / "g.csv")


def test_chance_row_for_six_classes():
    # six expression classes give the 16.66% random-guess row
    ds = generate(SyntheticSpec(n_sequences=60, n_static=6, seed=2))
    tr, te = split(ds, (0.5, 0.5), seed=0)
    j = ev.train_judge(tr, te, "static", hidden=8, max_iter=20, seed=0)
    chance = 1.0 / j.n_classes
    assert np.floor(chance * 1e4) / 100 == 16.66
