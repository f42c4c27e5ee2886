"""Smoke test for the `optimist` extension module.

Build and install it first, e.g. `maturin develop -m crates/py/Cargo.toml`,
or copy the cdylib from `cargo build --release -p optimist-py --features
extension-module` next to this script as `optimist.so`.
"""

import json
import math

import optimist


def main():
    mdp = optimist.TabularMdp.chain(6, 20)
    v, pi = mdp.solve()
    assert len(v) == 21 and len(pi) == 20
    assert abs(mdp.evaluate(pi)[0][mdp.initial_state] - v[0][mdp.initial_state]) < 1e-12
    clone = optimist.TabularMdp.from_json(mdp.to_json())
    assert clone.solve()[0] == v

    p_hat = [0.2, 0.3, 0.5]
    assert optimist.divergence("tv", p_hat, p_hat) == 0.0
    z = [1.0, 0.0, 0.5]
    exact = optimist.exact_conjugate("tv", z, 0.4, p_hat)
    upper = optimist.conjugate_upper("tv", z, 0.4, p_hat)
    value, argmax = optimist.conjugate_bruteforce("tv", z, 0.4, p_hat, 1e-2)
    assert value <= exact + 1e-12 <= upper + 1e-12
    assert abs(sum(argmax) - 1.0) < 1e-9

    width = optimist.confidence_width("tv", 8.0, 2, 2, 1, 1000, 0.1)
    assert abs(width - 2.3759) < 1e-3
    alpha = optimist.alpha_schedule(1, 1, 1, 1, 1.0, 1.0, 0.5, 1.0)
    assert abs(alpha - 7.2921) < 1e-3

    config = {
        "environment": {"name": "chain", "states": 4, "horizon": 6},
        "alg": "kl",
        "episodes": 50,
        "delta": 0.05,
        "seeds": [0, 1],
    }
    rows = optimist.run_experiment(json.dumps(config))
    assert len(rows) == 100
    total = sum(r["vstar"] - r["vpi"] for r in rows if r["seed"] == 0)
    last = [r for r in rows if r["seed"] == 0][-1]
    assert math.isclose(total, last["cum_regret"], abs_tol=1e-9)
    print(optimist.summary(json.dumps(config)), end="")

    try:
        optimist.divergence("hellinger", p_hat, p_hat)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown divergence accepted")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
