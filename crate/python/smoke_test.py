"""Smoke test for the mimo_icl_py extension.

Build and run from the repository root:

    cargo build --release -p mimo-icl-py --features extension-module
    cp target/release/libmimo_icl_py.so python/mimo_icl_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mimo_icl_py as m


def close(a, b, tol=1e-9):
    return all(abs(u - v) <= tol for u, v in zip(a, b))


def main():
    cons = m.constellation(2)
    assert len(cons) == 16
    assert close([abs(z) for z in cons[0]], [math.sqrt(0.5)] * 2)

    task = m.Task([[1.0 + 0.5j, -0.2j], [0.3, 0.8 - 0.1j]], 0.1)
    assert task.sigma2 == 0.1
    sample = m.Task.sample(7)
    assert len(sample.h) == 2 and len(sample.h[0]) == 2

    # Quantized likelihood sums to one over the 2-bit output grid.
    grid = [-3.0, -1.0, 1.0, 3.0]
    total = sum(
        math.exp(task.log_likelihood(cons[5], [complex(a, b), complex(c, d)], bits=2))
        for a in grid for b in grid for c in grid for d in grid
    )
    assert abs(total - 1.0) < 1e-9, total

    pairs = task.sample_context(6, seed=3)
    assert len(pairs) == 6 and all(x in cons for x, _ in pairs)
    y = task.transmit(cons[9], seed=4)
    est = task.mmse(y)
    assert all(abs(z) < 1.0 for z in est)
    task.lmmse(y)
    m.bayes_true_exact(0.1, pairs, y)

    cfg = m.TrainConfig(n_layers=1, n_heads=2, d_e=8, d_f=16, n_max=6, n_context=6,
                        batch_size=8, n_steps=30, m_tasks=16, bits=None, seed=1)
    assert cfg.to_dict()["d_e"] == "8"
    model, losses = m.Model.pretrain(cfg)
    assert len(losses) == 30 and all(math.isfinite(l) for l in losses)

    probs = model.class_probs(pairs, y)
    assert len(probs) == 7 and abs(sum(probs[-1]) - 1.0) < 1e-9
    pred = model.predict(pairs, y)
    assert close(pred, [sum(p * c[i] for p, c in zip(probs[-1], cons)) for i in range(2)])

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        again = m.Model.load(path)
        assert close(again.predict(pairs, y), pred, 0.0)

    res = model.evaluate(n_tasks=10, n_symbols=4, sigma2=0.1)
    assert set(res) == {"icl", "mmse", "lmmse"}
    assert res["mmse"][0] <= res["lmmse"][0] + 0.05

    try:
        m.Task([[1.0], [1.0, 2.0]], 0.1)
    except ValueError:
        pass
    else:
        raise AssertionError("ragged matrix accepted")

    print("smoke test passed:", {k: round(v[0], 4) for k, v in res.items()}, model.n_parameters, "params")


if __name__ == "__main__":
    main()
