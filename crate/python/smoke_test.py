#!/usr/bin/env python3
"""Smoke test for the chromatrack_py extension module.

Build and stage the module first:

    cargo build --release -p chromatrack-py
    cp target/release/libchromatrack_py.so python/chromatrack_py.so

Then run:  python3 python/smoke_test.py
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import chromatrack_py as ct


def approx(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    print(f"chromatrack_py {ct.__version__}")

    # Numeric primitives.
    sm = ct.softmax_rows([[0.0, 0.0], [1000.0, 1000.0, 1000.0][:2]])
    assert approx(sm[0][0], 0.5) and approx(sm[0][1], 0.5), sm
    assert approx(sum(sm[1]), 1.0, 1e-6), sm

    lab = ct.rgb_to_lab(255, 255, 255)
    assert approx(lab[0], 100.0, 1e-6) and abs(lab[1]) < 1e-6 and abs(lab[2]) < 1e-6, lab
    assert ct.lab_to_rgb(*ct.rgb_to_lab(119, 119, 119)) == (119, 119, 119)

    with tempfile.TemporaryDirectory(prefix="chromatrack-smoke-") as tmp:
        ds = os.path.join(tmp, "ds")
        palette = os.path.join(tmp, "palette.ctk")
        run = os.path.join(tmp, "run")

        # Tiny pipeline: 6 clips, 60 iterations.
        ct.synth_dataset(ds, preset="plain", n=6, seed=11)
        objective = ct.fit_palette(ds, palette, k=16, samples=4000, seed=11)
        assert objective > 0.0

        cfg = json.dumps({"train": {"total_iters": 60, "lr_drop_iter": 30,
                                    "checkpoint_every": 60, "batch_size": 4}})
        loss = ct.train(ds, palette, run, cfg)
        assert math.isfinite(loss) and loss < math.log(16.0), loss
        ckpt = os.path.join(run, "checkpoint.ctk")
        assert os.path.isfile(ckpt)

        # Track + eval through the CLI surface.
        clip = os.path.join(ds, "clip_0000")
        pred = os.path.join(tmp, "pred", "clip_0000")
        code = ct.run_cli(["track", "--mode", "seg", "--checkpoint", ckpt,
                           "--clip", clip, "--out", pred])
        assert code == 0, code
        j = ct.region_j_files(os.path.join(pred, "00000.pgm"),
                              os.path.join(clip, "masks", "000.pgm"), 1)
        assert approx(j, 1.0), j  # frame 0 repeats the given labels

        report = os.path.join(tmp, "report.json")
        code = ct.run_cli(["eval", "--data", ds, "--pred", os.path.join(tmp, "pred"),
                           "--out", report])
        assert code == 0, code
        with open(report) as fh:
            r = json.load(fh)
        assert "meanJ" in r and 0.0 <= r["meanJ"] <= 1.0, r.get("meanJ")
        print(f"meanJ after 60 iters: {r['meanJ']:.3f} "
              f"(identity {r['identityMeanJ']:.3f}), train loss {loss:.3f}")

    print("smoke test passed")


if __name__ == "__main__":
    main()
