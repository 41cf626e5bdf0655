"""Smoke test for the dgp_py extension.

Run after building, e.g. `maturin develop -m crates/python/Cargo.toml`, or
with the directory holding `dgp_py.so` on PYTHONPATH.
"""

import json
import math

import dgp_py


def main():
    x, y = dgp_py.sinc_dataset(300, noise_sd=0.1, seed=0)
    xt, yt = dgp_py.sinc_dataset(100, noise_sd=0.0, seed=1)

    hyper = dgp_py.KernelHyper(1.0, [0.5])
    assert abs(hyper.cov([0.3], [0.3]) - 1.0) < 1e-12
    assert hyper.cov([0.0], [1.0]) < 1.0

    model, trace = dgp_py.train(
        x, y, m_alpha=60, m_beta=10, batch_size=32, increment=8,
        iterations=300, gamma0=0.1, seed=0,
    )
    assert len(trace) == 300
    assert model.m_alpha == 60 and model.m_beta == 10 and model.dim == 1
    assert all(math.isfinite(v) for v in trace)

    mean, var = model.predict(xt)
    assert len(mean) == len(xt) and min(var) > 0.0
    err = dgp_py.nmse(mean, yt)
    print(f"decoupled nmse={err:.4f} kl={model.kl():.3f} elbo={model.elbo(x, y):.3f}")
    assert err < 0.1
    assert model.kl() >= 0.0

    again = dgp_py.Model.from_json(model.to_json())
    assert again.predict(xt) == (mean, var)
    assert len(json.loads(model.to_json())["alpha"]) == 60

    ex_mean, _ = dgp_py.exact_gpr(x, y, model.hyper, model.noise_variance, xt)
    lml = dgp_py.log_marginal(x, y, model.hyper, model.noise_variance)
    print(f"exact nmse={dgp_py.nmse(ex_mean, yt):.4f} log_marginal={lml:.3f}")
    assert model.elbo(x, y) <= lml + 1e-6

    try:
        dgp_py.train([[0.0], [1.0, 2.0]], [0.0, 1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("ragged inputs accepted")

    print("ok")


if __name__ == "__main__":
    main()
