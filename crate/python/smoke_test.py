"""Smoke test for the hat_py extension module.

Build and install first:

    maturin develop --release -m crates/py/Cargo.toml

then run `python python/smoke_test.py [path/to/hat.hatp]`.
"""

import json
import math
import sys

import hat_py


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    assert hat_py.motion_models() == ["cv", "static", "ca", "ctrv", "ctra"]

    a = hat_py.Anchor([1.0, 2.0, 0.5], [1.8, 4.5, 1.6], 0.3, [8.0 * math.cos(0.3), 8.0 * math.sin(0.3)])
    assert len(a.to_list()) == 10
    assert abs(a.speed - 8.0) < 1e-12

    # closed forms against the RK4 reference
    for model in hat_py.motion_models():
        lat = (0.05, -0.02, 0.08, 0.07)
        exact = hat_py.predict(model, a, 0.5, lat)
        ref = hat_py.integrate(model, a, 0.5, lat)
        assert close(exact.position, ref.position, 1e-8), model

    # a warp followed by its inverse is the identity
    ego = hat_py.EgoTransform.from_yaw(0.4, [3.0, -1.0, 0.0])
    back = hat_py.warp(hat_py.warp(a, ego), ego.inverse())
    assert close(back.to_list(), a.to_list(), 1e-12)

    try:
        hat_py.predict("cv", a, 0.5, (0.0, 0.0, 0.5, 0.0))
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-bound latent accepted")

    scene = hat_py.generate_scene(seed=3, config=json.dumps({"tracks": 4, "frames": 6}))
    assert (scene.tracks, scene.frames) == (4, 6)
    obs = scene.observe(seed=1)
    assert len(obs) == 6 and len(obs[0]) == 4

    hat = hat_py.HatParameters(channels=8, seed=2)
    queries = [[0.1 * ((i + c) % 3) for c in range(8)] for i in range(4)]
    res = hat.align(obs[0], queries, scene.dt, scene.frame_transform(0, 1))
    assert len(res.anchors) == 4 and len(res.hypotheses[0]) == 5
    for row in res.weights:
        assert abs(sum(row) - 1.0) < 1e-9 and min(row) >= 0.0
    for pre, hyps in zip(res.anchors_pre_refine, res.hypotheses):
        for d in range(10):
            vals = [h.to_list()[d] for h in hyps]
            assert min(vals) - 1e-12 <= pre.to_list()[d] <= max(vals) + 1e-12

    imm = hat_py.ImmFilter(obs[0][0])
    for k in range(1, scene.frames):
        est = imm.step(obs[k][0], scene.dt)
    assert abs(sum(imm.probabilities) - 1.0) < 1e-9
    assert all(math.isfinite(x) for x in est.to_list())

    if len(sys.argv) > 1:
        info = hat_py.inspect_model(sys.argv[1])
        print("model:", info)

    print("hat_py smoke test passed")


if __name__ == "__main__":
    main()
