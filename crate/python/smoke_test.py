"""Smoke test for the `pco` extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml
--features extension-module`, then run `python python/smoke_test.py`.
"""

import math
import tempfile
import os

import pco

CONFIG = """\
seed = 5
batch_size = 16
max_iterations = 40
delta1 = 0.05
delta2 = 0.1
data = sphere
data.classes = 8
data.dim = 8
data.kappa = 40
data.samples_per_class = 12
data.seed = 5
encoder = mlp
encoder.hidden = 16
encoder.output_dim = 8
"""


def test_margin_loss():
    cos = [[0.9, 0.1, -0.2], [0.3, 0.5, 0.0]]
    loss, grad = pco.margin_loss(cos, [0, 1], 16.0, m3=0.35)
    per = pco.margin_losses(cos, [0, 1], 16.0, m3=0.35)
    assert abs(loss - sum(per) / 2) < 1e-12
    assert len(grad) == 2 and len(grad[0]) == 3
    # gradient on the positive logit pushes it up
    assert grad[0][0] < 0 and grad[1][1] < 0
    try:
        pco.margin_loss(cos, [0, 1], -1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative scale accepted")


def test_ncs():
    ids = pco.ncs_sample(100, 0.1, [3, 3, 97], 1)
    assert ids == sorted(ids) and 3 in ids and 97 in ids
    assert len(ids) == pco.sampled_count(100, 0.1) == 10
    assert ids == pco.ncs_sample(100, 0.1, [3, 3, 97], 1)


def test_prototypes():
    bank = pco.PrototypeBank(2, 2)
    assert not bank.is_initialized(0)
    assert bank.update(0, [1.0, 0.0]) == [1.0, 0.0]
    e = bank.update(0, [0.0, 1.0])
    assert abs(e[0] - e[1]) < 1e-15 and abs(math.hypot(*e) - 1) < 1e-15
    bank.batch_update([1, 1], [[0.6, 0.8], [0.6, 0.8]])
    assert bank.prototype(1) == [0.6, 0.8]


def test_scheduler_and_metrics():
    phase, css, it = pco.step_scheduler("alignment", 0.0, 0, False, 0.5, 0.2, 0.4)
    assert (phase, css, it) == ("stabilization", 0.5, 1)

    pts = pco.sample_vmf([1.0, 0.0, 0.0], 50.0, 20, 3)
    assert all(abs(math.sqrt(sum(v * v for v in p)) - 1) < 1e-12 for p in pts)
    intra, inter = pco.cluster_stats(pts + [[-p[0], -p[1], -p[2]] for p in pts], [0] * 20 + [1] * 20)
    assert intra > 0.8 and inter < -0.8

    w = [[1.0, 0.0], [0.0, 1.0]]
    assert abs(pco.css_score([[1.0, 0.0], [0.0, 1.0]], w, [0, 1]) - 1.0) < 1e-12

    tar = pco.tar_at_far([0.9, 0.8, 0.3, 0.1], [True, True, False, False], 0.5)
    assert tar == 1.0


def test_grad_check():
    rows = pco.grad_check("losses", 2)
    assert rows and all(worst <= tol for _, _, worst, tol in rows)


def test_trainer():
    t = pco.Trainer(CONFIG)
    it, phase, loss, css, lr = t.step()
    assert it == 1 and math.isfinite(loss)
    t.run()
    assert t.is_done() and t.iteration == 40
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        t.save_checkpoint(path)
        assert os.path.getsize(path) > 0


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"{name}: ok")
