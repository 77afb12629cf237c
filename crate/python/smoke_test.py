"""Smoke test for the nlc_py extension module.

Build and copy the module next to this script first:

    cargo build --release -p nlc-python
    cp target/release/libnlc_py.so python/nlc_py.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import nlc_py  # noqa: E402


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL {what}")
    print(f"ok   {what}")


def main():
    img = np.array(nlc_py.synth(count=1, size=48, seed=3)[0], dtype=np.float32)
    check(img.shape == (48, 48) and 0 <= img.min() and img.max() <= 255, "synth image shape and range")

    rng = np.random.default_rng(0)
    odd = rng.integers(0, 256, size=(37, 29)).astype(np.float32)
    w = nlc_py.Weights.random(wavelet="9/7", variant="adaptive", levels=3, delta_base=6.0, seed=5)
    for mode in ["baseline", "h2l_only", "hybrid"]:
        err = nlc_py.round_trip_error(odd.tolist(), 3, mode=mode, wavelet="9/7", weights=w)
        check(err < 1e-3, f"{mode} round trip on 37x29, max error {err:.2e}")

    data, bits = nlc_py.encode(img.tolist(), weights=w, step_scale=1.0)
    rec = np.array(nlc_py.decode(data, weights=w), dtype=np.float32)
    check(rec.shape == img.shape and bits > 0, f"hybrid code: {len(data)} bytes, {bits:.0f} modelled bits")
    p = nlc_py.psnr(img.tolist(), np.clip(np.round(rec), 0, 255).tolist())
    check(p > 30.0, f"hybrid PSNR {p:.2f} dB")
    low = np.array(nlc_py.decode(data, weights=w, resolution=2))
    check(low.shape == (12, 12), "resolution-2 decode is 12x12")

    base, _ = nlc_py.encode(img.tolist(), delta=4.0, levels=2)
    check(np.array(nlc_py.decode(base)).shape == img.shape, "baseline code decodes without weights")
    try:
        nlc_py.decode(data)
        check(False, "hybrid stream without weights is refused")
    except ValueError as e:
        check("weights" in str(e), "hybrid stream without weights is refused")

    check(abs(nlc_py.ssim(img.tolist(), img.tolist()) - 1.0) < 1e-12, "SSIM of identical images")
    anchor = [(0.2, 30.0), (0.4, 33.0), (0.8, 36.5), (1.6, 40.0)]
    doubled = [(2 * r, q) for r, q in anchor]
    check(abs(nlc_py.bd_rate(anchor, doubled) - 100.0) < 1e-6, "BD-rate of doubled rates is +100%")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.pgm")
        nlc_py.write_pgm(path, odd.tolist())
        check(np.array_equal(np.array(nlc_py.read_pgm(path), dtype=np.float32), odd), "PGM round trip")
        wpath = os.path.join(d, "w.nlw")
        w.save(wpath)
        again = nlc_py.Weights.load(wpath)
        check(again.digest == w.digest and again.parameter_count == w.parameter_count, repr(again))
    print("smoke test passed")


if __name__ == "__main__":
    main()
