"""Smoke test for the conserva_py extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/conserva_py-*.whl
"""
import json
import math
import tempfile

import conserva_py as cv


def main():
    assert "kepler-aug" in cv.SYSTEMS

    ho = cv.System("iso-ho")
    assert ho.dim == 4 and ho.labels == ["x", "p_x", "y", "p_y"]
    z = ho.sample(1, seed=3)[0]
    f = ho.field(z)
    for label, _, grad in ho.conserved_quantities(z):
        assert ho.residual(z, grad) < 1e-10, label

    traj = ho.integrate(z, 1e-3, 100)
    assert len(traj) == 101

    found = cv.search(ho, max_len=5, n_points=200)
    assert [r for r, _ in found] == ["xQp_xQ+", "yQp_yQ+"], found

    damped = cv.System("damped-ho")
    pts = damped.sample(512, seed=1)
    ens = cv.train_ensemble(damped, pts, 1, epochs=3, seed=1)
    assert len(ens) == 1 and 0.0 <= ens.final_l1 <= 1.0
    assert ens.differential_rank(pts[:20]) == 1
    assert all(math.isfinite(v) for v in ens.values(pts[0]))

    with tempfile.TemporaryDirectory() as out:
        cfg = {"system": "iso-ho", "output": out, "sample": {"n_points": 300},
               "search": {"max_len": 5, "verify_points": 300}}
        man = json.loads(cv.run(json.dumps(cfg), ["sample", "search", "report"]))
        assert [s["name"] for s in man["stages"]] == ["sample", "search", "report"]
        with open(f"{out}/summary.txt") as fh:
            assert "xQp_xQ+" in fh.read()

    try:
        cv.System("hubbard")
    except ValueError as e:
        assert "hubbard" in str(e)
    else:
        raise AssertionError("unknown system accepted")

    print("smoke test passed:", f[:2], found)


if __name__ == "__main__":
    main()
