"""Smoke test for the ifsl_py extension.

Build and install first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python crates/python/python/smoke.py`.
"""

import sys
import tempfile
from pathlib import Path

import ifsl_py


def main() -> int:
    print("ifsl_py", ifsl_py.__version__)
    for plan in ([4, 6, 3], [4, 23, 3], [3, 3, 1]):
        print(f"plan {plan}: {ifsl_py.param_count(plan)} parameters")

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "data"
        ckpt = Path(tmp) / "model.ckpt"
        n = ifsl_py.generate(str(data), classes=4, images_per_class=2, seed=1)
        print(f"generated {n} images")
        losses = ifsl_py.train(str(data), str(ckpt), steps=3, batch_size=2, lr=5e-4)
        print("losses", [round(v, 4) for v in losses])
        report = ifsl_py.evaluate(str(data), str(ckpt), episodes=10)
        print("report", {k: round(v, 3) for k, v in report.items()})
        two_way = ifsl_py.evaluate(str(data), str(ckpt), n_way=2, episodes=10)
        assert two_way["episodes"] == 10

    try:
        ifsl_py.generate("/tmp/unused", classes=5)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("5 classes in 4 folds should be rejected")

    failed = [row for row in ifsl_py.verify(points=10) if not row[2]]
    for suite, name, _, detail in failed:
        print(f"FAIL [{suite}] {name}: {detail}")
    print("ok" if not failed else f"{len(failed)} failed")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
