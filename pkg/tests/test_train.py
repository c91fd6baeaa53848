import math
import zipfile

import numpy as np
import pytest

from sptte import diff as D
from sptte import train as T
from sptte.dist import batch_nll
from sptte.encoder import encode_slot
from sptte.synthgen import Scenario, generate_scenario
from sptte.trips import TripRecord, augment_trip, compute_coverage, split_trips

TINY = dict(r_h=3, r_e=3, gru_hidden=4, eta=3, batch_size=16, k_aug=3, epochs=2)


@pytest.fixture(scope="module")
def small_data():
    ds = generate_scenario(Scenario(num_links=10, num_trips=600, days=1, min_trip_links=3, max_trip_links=8, seed=5))
    tr, va, te = split_trips(ds.trips, 0)
    return ds, tr, va, te


def model_for(ds, trips, **kw):
    cfg = T.TrainConfig(**{**TINY, **kw})
    cov = compute_coverage(trips, cfg.slot_config(), ds.network.num_links, ds.n_slots)
    transform = T.TargetTransform.fit(trips, ds.network.lengths)
    from sptte.encoder import init_params

    params = init_params(cfg.encoder_config(), ds.network.num_links, cfg.seed)
    return T.TrainedModel(params, cfg, ds.network, cov, transform), cfg


# --- regularizers ----------------------------------------------------------------------


def test_orth_theta_examples():
    w = np.zeros((4, 4))
    w[0, 0] = 1.0
    others = np.zeros((4, 4))
    others[1, 1] = 2.0
    p = {"branch.mu": w, "branch.L": others, "branch.V": others, "branch.D": others}
    assert T.orth_theta_loss(p).item() == 0.0
    p = {k: w for k in p}
    assert T.orth_theta_loss(p).item() == pytest.approx(3.0, rel=1e-15)
    rng = np.random.default_rng(0)
    p = {k: rng.standard_normal((4, 4)) for k in p}
    ref = sum((np.sum(p["branch.mu"] * p[f"branch.{s}"]) / (np.linalg.norm(p["branch.mu"])
               * np.linalg.norm(p[f"branch.{s}"]))) ** 2 for s in "LVD")
    assert T.orth_theta_loss(p).item() == pytest.approx(ref, rel=1e-12)
    p["branch.V"] = np.zeros((4, 4))
    assert math.isfinite(T.orth_theta_loss(p).item())


def test_orth_l_examples():
    q, _ = np.linalg.qr(np.random.default_rng(1).standard_normal((6, 3)))
    assert T.orth_L_loss(q).item() == pytest.approx(0.0, abs=1e-24)
    assert T.orth_L_loss(np.zeros((6, 3))).item() == 3.0
    L = np.random.default_rng(2).standard_normal((6, 3))
    ref = np.sum((L.T @ L - np.eye(3)) ** 2)
    assert T.orth_L_loss(L).item() == pytest.approx(ref, rel=1e-12)


def test_loss_decomposition(small_data):
    ds, tr, _, _ = small_data
    model, cfg = model_for(ds, tr)
    compiled = T.compile_trips(tr[:20], cfg.k_aug, cfg.slot_config(), ds.network.lengths, model.transform)
    slot = compiled[0][0]
    blocks = [cb for s, cb in compiled if s == slot]
    state = encode_slot(model.params, model.context, slot)
    zero = T.TrainConfig(**{**TINY, "alpha": 0.0, "beta": 0.0})
    loss0, nll0 = T.total_loss(state, blocks, model.params, zero)
    assert loss0.item() == nll0.item() == batch_nll(state, blocks, "mean").item()
    loss, nll = T.total_loss(state, blocks, model.params, T.TrainConfig(**{**TINY, "alpha": 0.3, "beta": 0.7}))
    extra = 0.3 * T.orth_theta_loss(model.params).item() + 0.7 * T.orth_L_loss(state.L).item()
    assert loss.item() - loss0.item() == pytest.approx(extra, rel=1e-12)
    w_loss, _ = T.warmup_loss(state, blocks, model.params, zero)
    fixed = T.StateTensors(state.mu, D.Tensor(np.zeros((10, 1))), D.Tensor(np.ones(10)), D.Tensor(np.ones(10)), {})
    assert w_loss.item() == batch_nll(fixed, blocks, "mean").item()


def test_total_loss_gradients_on_toy(small_data):
    ds, tr, _, _ = small_data
    model, cfg = model_for(ds, tr)
    compiled = T.compile_trips(tr, cfg.k_aug, cfg.slot_config(), ds.network.lengths, model.transform)
    slot = max({s for s, _ in compiled}, key=lambda s: sum(1 for x, _ in compiled if x == s))
    blocks = [cb for s, cb in compiled if s == slot][:8]

    def loss(p):
        return T.total_loss(encode_slot(p, model.context, slot), blocks, p, cfg)[0]

    rep = D.grad_check(loss, model.params, tolerance=1e-4, probe_names=("embed",))
    assert rep.passed, "\n".join(rep.lines())


# --- optimizer and transform --------------------------------------------------------------


def test_adam_first_step_and_bias_correction():
    params = {"a": np.array([1.0, -2.0]), "b": np.array([[3.0]])}
    opt = T.Adam(params, lr=0.1)
    g = {"a": np.array([0.5, -4.0]), "b": np.array([[2.0]])}
    opt.step(params, g)
    np.testing.assert_allclose(params["a"], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8)],
                               rtol=1e-14)
    # second step by hand
    m = 0.9 * 0.1 * 2.0 + 0.1 * 1.0
    v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
    before = params["b"].copy()
    opt.step(params, {"a": np.zeros(2), "b": np.array([[1.0]])})
    step = 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert params["b"][0, 0] == pytest.approx(before[0, 0] - step, rel=1e-13)


def test_target_transform():
    lengths = np.array([100.0, 200.0, 300.0])
    trips = [TripRecord(np.array([0, 1]), 0.0, 45.0), TripRecord(np.array([2]), 0.0, 15.0)]
    tf = T.TargetTransform.fit(trips, lengths)
    assert tf.rate == pytest.approx(60.0 / 600.0)
    resid = np.array([45.0 - 30.0, 15.0 - 30.0])
    assert tf.scale == pytest.approx(math.sqrt(np.mean(resid**2 / np.array([2.0, 1.0]))))
    blk = tf.block(augment_trip(TripRecord(np.array([0, 1, 2]), 0.0, 70.0, np.array([10.0, 20.0, 40.0])), 2), lengths)
    assert blk.targets[0] == pytest.approx(blk.targets[1:].sum(), rel=1e-14)
    assert T.TargetTransform.fit(trips, lengths, enabled=False) == T.TargetTransform(0.0, 1.0)


def test_minibatches_are_slot_homogeneous():
    slots = np.array([3, 1, 3, 3, 2, 1, 3, 3])
    chunks = T.minibatches(slots, 2, np.random.default_rng(0))
    assert sorted(np.concatenate(chunks).tolist()) == list(range(8))
    assert all(len(c) <= 2 and len(set(slots[c])) == 1 for c in chunks)
    again = T.minibatches(slots, 2, np.random.default_rng(0))
    assert [c.tolist() for c in again] == [c.tolist() for c in chunks]


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(alpha=-1.0)
    with pytest.raises(ValueError):
        T.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        T.TrainConfig.from_dict({"bogus": 1})
    cfg = T.TrainConfig()
    assert (cfg.batch_size, cfg.k_aug, cfg.eta, cfg.alpha, cfg.beta, cfg.epochs) == (256, 5, 6, 0.02, 0.02, 100)
    assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


# --- training loop and checkpoints ------------------------------------------------------


def test_fit_is_deterministic_and_checkpoints_round_trip(small_data, tmp_path):
    ds, tr, va, te = small_data
    runs = [T.fit(tr, va, ds.network, T.TrainConfig(**TINY, mean_warmup_epochs=1), n_slots=ds.n_slots)
            for _ in range(2)]
    for a, b in zip(runs[0].history, runs[1].history):
        assert (a.train_nll, a.val_nll, a.val_mape) == (b.train_nll, b.val_nll, b.val_mape)
    for k in runs[0].model.params:
        np.testing.assert_array_equal(runs[0].model.params[k], runs[1].model.params[k])
    paths = [tmp_path / "a.zip", tmp_path / "b.zip"]
    for r, p in zip(runs, paths):
        T.save_checkpoint(r.model, p, {"note": "x"})
    assert paths[0].read_bytes() == paths[1].read_bytes()

    back, meta = T.load_checkpoint(paths[0])
    assert meta == {"note": "x"} and list(back.params) == list(runs[0].model.params)
    p0, p1 = runs[0].model.predict(te), back.predict(te)
    np.testing.assert_array_equal(p0.mean, p1.mean)
    np.testing.assert_array_equal(p0.variance, p1.variance)
    assert back.nll_seconds(te) == runs[0].model.nll_seconds(te)


def test_checkpoint_version_check(small_data, tmp_path):
    ds, tr, _, _ = small_data
    model, _ = model_for(ds, tr)
    path = tmp_path / "m.zip"
    T.save_checkpoint(model, path)
    with zipfile.ZipFile(path) as zf:
        doc = zf.read("checkpoint.json").decode().replace('"version": 1', '"version": 99')
        names = {n: zf.read(n) for n in zf.namelist()}
    with zipfile.ZipFile(path, "w") as zf:
        for n, data in names.items():
            zf.writestr(n, doc if n == "checkpoint.json" else data)
    with pytest.raises(ValueError, match="version"):
        T.load_checkpoint(path)


def test_validation_nll_improves_on_synthetic_data():
    ds = generate_scenario(Scenario(num_trips=4000, days=1, seed=2))
    tr, va, _ = split_trips(ds.trips, 0)
    res = T.fit(tr, va, ds.network, T.TrainConfig(gru_hidden=8, r_h=8, r_e=8, epochs=5, batch_size=64),
                n_slots=ds.n_slots)
    assert min(r.val_nll for r in res.history) < res.init_val_nll
    assert res.best_epoch >= 1 and not res.diverged


def test_selection_skips_warmup_epochs(small_data):
    ds, tr, va, _ = small_data
    inside = T.fit(tr, va, ds.network, T.TrainConfig(**{**TINY, "epochs": 2, "mean_warmup_epochs": 6}))
    assert inside.best_epoch == 2
    after = T.fit(tr, va, ds.network, T.TrainConfig(**{**TINY, "epochs": 3, "mean_warmup_epochs": 2}))
    assert after.best_epoch == 3
    plain = T.fit(tr, va, ds.network, T.TrainConfig(**{**TINY, "epochs": 2, "mean_warmup_epochs": 0}))
    vals = [plain.init_val_nll] + [r.val_nll for r in plain.history]
    assert plain.best_epoch == int(np.argmin(vals))


def test_no_ss_run_completes(small_data):
    ds, tr, va, _ = small_data
    res = T.fit(tr, va, ds.network, T.TrainConfig(**{**TINY, "ablation": "no_ss", "epochs": 1}), n_slots=ds.n_slots)
    assert len(res.history) == 1 and math.isfinite(res.history[0].val_nll)


def test_export_representations(small_data):
    ds, tr, _, _ = small_data
    model, _ = model_for(ds, tr)
    reps = T.export_representations(model, [3, 4])
    assert sorted(reps) == sorted(f"slot{s}/{b}" for s in (3, 4) for b in ("mu", "L", "V", "D"))
    assert reps["slot3/mu"].shape == (10, 6)


def test_interpolated_prediction_endpoints(small_data):
    ds, tr, _, te = small_data
    model, cfg = model_for(ds, tr)
    centre = [TripRecord(t.links, (int(t.depart_ts // 1200) + 0.5) * 1200, t.total_time) for t in te[:10]]
    a = model.predict(centre, interpolate=True)
    b = model.predict(centre)
    np.testing.assert_array_equal(a.mean, b.mean)
