import json

import numpy as np
import pytest
import torch

from conftest import DATA_DIR, RUNS, random_network, synthetic_dataset, tiny_layers
from uapjr.attacks import (AttackConfig, Perturbation, epsilon_sweep, evaluate_tsr, evaluate_uer,
                           random_sign_uap, sgd_uap, sgd_uap_targeted, sgd_uap_untargeted, svd_uap,
                           targeted_tsrs)
from uapjr.experiments import TABLE1_CLAMP
from uapjr.linalg import RngStream, svd
from uapjr.net import Dense, Network, load_checkpoint
from uapjr.training import TrainConfig, evaluate_clean, train


@pytest.fixture
def net32():
    return random_network(tiny_layers(), (1, 8, 8), scale=0.3, dtype=torch.float32)


@pytest.fixture(scope="module")
def trained():
    data = synthetic_dataset(60, shape=(1, 8, 8))
    net = random_network(tiny_layers(), (1, 8, 8), scale=0.2, dtype=torch.float32)
    return train(TrainConfig(epochs=15, batch_size=20, lr=1e-2), data, net=net).network, data


def test_zero_budget_gives_clean_metrics(net32, tiny_data):
    pert = sgd_uap_untargeted(net32, tiny_data, AttackConfig(epsilon=0.0, iterations=5, batch_size=16))
    assert np.all(pert.delta == 0)
    assert evaluate_uer(net32, tiny_data, pert.delta) == 1 - evaluate_clean(net32, tiny_data)
    pred = net32.predict(tiny_data.images)
    for c in (0, 4):
        t = sgd_uap_targeted(net32, tiny_data, AttackConfig(epsilon=0.0, iterations=3, target_class=c))
        assert evaluate_tsr(net32, tiny_data, t.delta, c) == float((pred == c).double().mean())


@pytest.mark.parametrize("target", [None, 2])
@pytest.mark.parametrize("clamp", [True, False])
def test_budget_holds_after_every_step(net32, tiny_data, target, clamp):
    eps = 0.13
    seen = []

    def check(it, delta):
        seen.append(it)
        assert delta.dtype == np.float64
        assert np.abs(delta).max() <= eps

    cfg = AttackConfig(epsilon=eps, iterations=30, batch_size=16, step_size=0.05, target_class=target,
                       clamp_inputs=clamp, random_init=True)
    sgd_uap(net32, tiny_data, cfg, on_step=check)
    assert seen == list(range(30))


def test_attack_is_deterministic(net32, tiny_data):
    cfg = AttackConfig(epsilon=0.2, iterations=20, batch_size=16, seed=3)
    a, b = sgd_uap_untargeted(net32, tiny_data, cfg), sgd_uap_untargeted(net32, tiny_data, cfg)
    assert a.delta.tobytes() == b.delta.tobytes()
    c = sgd_uap_untargeted(net32, tiny_data, AttackConfig(epsilon=0.2, iterations=20, batch_size=16, seed=4))
    assert c.delta.tobytes() != a.delta.tobytes()


def test_untargeted_attack_raises_error_rate(trained):
    net32, tiny_data = trained
    eps = 0.5
    pert = sgd_uap_untargeted(net32, tiny_data, AttackConfig(epsilon=eps, iterations=50, batch_size=20,
                                                             clamp_inputs=False))
    assert evaluate_uer(net32, tiny_data, pert.delta, False) > 1 - evaluate_clean(net32, tiny_data)


def test_targeted_attack_pulls_towards_target(trained):
    net32, tiny_data = trained
    pred = net32.predict(tiny_data.images)
    c = int(torch.bincount(pred, minlength=10).argmin())
    cfg = AttackConfig(epsilon=1.0, iterations=50, batch_size=20, target_class=c, clamp_inputs=False)
    pert = sgd_uap_targeted(net32, tiny_data, cfg)
    assert evaluate_tsr(net32, tiny_data, pert.delta, c, False) > float((pred == c).double().mean())


def test_attack_argument_checks(net32, tiny_data):
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0.1, target_class=10)
    with pytest.raises(ValueError):
        sgd_uap_untargeted(net32, tiny_data, AttackConfig(epsilon=0.1, target_class=1))
    with pytest.raises(ValueError):
        sgd_uap_targeted(net32, tiny_data, AttackConfig(epsilon=0.1))
    assert AttackConfig(epsilon=0.2).step == pytest.approx(0.02)


def test_svd_uap_on_linear_model_uses_top_singular_vector(tiny_data):
    w = torch.from_numpy(RngStream(0).normal((10, 64)))
    net = Network([Dense(10)], (1, 8, 8), 10, [{"weight": w, "bias": torch.zeros(10)}], dtype=torch.float64)
    pert = svd_uap(net, tiny_data.subset(np.arange(5)), 0.2, p=2)
    _, _, v = svd(w.numpy())
    top = v[:, 0] / np.abs(v[:, 0]).max() * 0.2
    flat = pert.delta.reshape(-1)
    assert np.allclose(flat, top, atol=1e-6) or np.allclose(flat, -top, atol=1e-6)


def test_svd_uap_inf_is_a_sign_pattern(net32, tiny_data):
    pert = svd_uap(net32, tiny_data.subset(np.arange(8)), 0.2)
    np.testing.assert_array_equal(np.abs(pert.delta), 0.2)
    assert pert.provenance["attack"] == "svd"


def test_perturbation_save_load_round_trip(tmp_path):
    pert = random_sign_uap((1, 8, 8), 0.1, RngStream(0))
    pert.provenance["note"] = "x"
    path = pert.save(tmp_path / "d.bin")
    back = Perturbation.load(path)
    assert back.delta.tobytes() == pert.delta.tobytes()
    assert back.epsilon == 0.1 and back.provenance["note"] == "x"
    side = json.loads((tmp_path / "d.bin.json").read_text())
    assert side["shape"] == [1, 8, 8] and side["dtype"] == "<f8"
    pert.to_image(tmp_path / "d.png")
    from PIL import Image

    assert Image.open(tmp_path / "d.png").size == (8, 8)


def test_perturbation_rejects_budget_violation():
    with pytest.raises(ValueError):
        Perturbation(np.full((2, 2), 0.3), 0.2)


def test_epsilon_sweep_rows(net32, tiny_data):
    base = AttackConfig(epsilon=0.0, iterations=5, batch_size=16)
    rows = epsilon_sweep(net32, tiny_data, tiny_data, [0.1, 0.2], "targeted", base)
    assert [r["epsilon"] for r in rows] == [0.1, 0.2]
    for r in rows:
        assert r["metric"] == "tsr" and len(r["per_class"]) == 10
        assert r["value"] == pytest.approx(np.mean(r["per_class"]))
        assert r["sd"] == pytest.approx(np.std(r["per_class"]))
    single = targeted_tsrs(net32, tiny_data, tiny_data, AttackConfig(epsilon=0.1, iterations=5, batch_size=16),
                           classes=[3])
    assert single == [rows[0]["per_class"][3]]
    with pytest.raises(ValueError):
        epsilon_sweep(net32, tiny_data, tiny_data, [], "untargeted", base)
    with pytest.raises(ValueError):
        epsilon_sweep(net32, tiny_data, tiny_data, [0.2, 0.1], "untargeted", base)
    with pytest.raises(ValueError):
        epsilon_sweep(net32, tiny_data, tiny_data, [0.1], "bogus", base)


STANDARD = RUNS / "mnist" / "standard-s0" / "checkpoint.npz"


@pytest.mark.slow
@pytest.mark.skipif(not STANDARD.exists() or not (DATA_DIR / "mnist").exists(),
                    reason="needs the trained standard MNIST checkpoint and the dataset")
def test_svd_uap_beats_random_sign_on_standard_lenet():
    from uapjr.data import load_dataset

    net, _ = load_checkpoint(STANDARD)
    train_set, test = load_dataset("mnist", "train", DATA_DIR), load_dataset("mnist", "test", DATA_DIR)
    idx = RngStream(0).child("samples").permutation(len(train_set))[:128]
    pert = svd_uap(net, train_set.subset(idx), 0.2, clamp_inputs=TABLE1_CLAMP, rng=RngStream(0).child("power"))
    rand = random_sign_uap((1, 28, 28), 0.2, RngStream(1))
    svd_uer = evaluate_uer(net, test, pert.delta, TABLE1_CLAMP)
    rand_uer = evaluate_uer(net, test, rand.delta, TABLE1_CLAMP)
    assert svd_uer >= rand_uer + 0.10
