"""Smoke test for the ospd extension.

Uses an installed `ospd` if there is one, otherwise the library cargo built
under target/ (run `cargo build -p ospd-py` first).
"""

import importlib
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load():
    try:
        return importlib.import_module("ospd")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libospd.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "ospd.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("ospd")
    sys.exit("ospd not found; run `cargo build -p ospd-py` first")


def naive_attention(q, keys, values):
    scores = [sum(a * b for a, b in zip(q, k)) for k in keys]
    m = max(scores)
    w = [math.exp(s - m) for s in scores]
    z = sum(w)
    return [sum(wi * v[j] for wi, v in zip(w, values)) / z for j in range(len(q))]


def main():
    ospd = load()

    q = [0.3, -1.2, 0.5, 0.9]
    keys = [[0.1 * i, -0.2, 0.3 * (i % 3), 1.0 - 0.1 * i] for i in range(7)]
    values = [[float(i), -float(i), 0.5, i * i * 0.1] for i in range(7)]
    want = naive_attention(q, keys, values)
    for split in range(len(keys) + 1):
        got = ospd.split_attention(q, keys, values, split)
        assert max(abs(a - b) for a, b in zip(got, want)) < 1e-12, split

    model = ospd.Model(seed=3)
    prompts = [[1, 2, 3], [10, 20], [5]]
    served = model.serve(prompts, max_tokens=10)
    for p, s in zip(prompts, served):
        assert s["tokens"] == model.generate(p, 10), (p, s)
        assert s["resident_weight_matrices"] == 0

    ob = ospd.Obfuscator()
    text = "the patient name is lydia and she was seen on march d12"
    cats = [c for c, _, _ in ob.tag(text)]
    assert cats == ["name", "date"], cats
    vps, idx = ob.obfuscate(text, lambda_max=8)
    assert vps[idx] == text and len(vps) == 9
    assert len(set(vps)) == len(vps)

    lo, hi = ospd.success_bounds(2, 1, math.log(2), 0.0)
    assert abs(lo - 1 / 3) < 1e-12 and abs(hi - 2 / 3) < 1e-12

    try:
        ospd.success_bounds(5, 1, 0.1, 0.0)
    except ospd.OspdError:
        pass
    else:
        raise AssertionError("expected OspdError")

    fi = ospd.bench_mode("full_isolation", users=3)
    spd = ospd.bench_mode("spd", users=3)
    assert fi["weight_copies"] == 3 and spd["weight_copies"] == 1
    assert fi["outputs"] == spd["outputs"]
    print("smoke test ok")


if __name__ == "__main__":
    main()
