"""Quick end-to-end check of the pyspecwatch extension module."""

import json
import math
import sys
import tempfile

import pyspecwatch as sw


def main() -> int:
    sig = sw.generate("OFDM", modulation="QPSK", seed=7)
    assert len(sig) == 16384 and sig.sample_rate_hz == 1e8

    noisy = sig.add_awgn(10.0, seed=1)
    assert len(noisy) == len(sig)

    spectrum = noisy.features("fft_mag", sw.CLASSIFIER_NFFT)
    assert len(spectrum) == 4096 and max(spectrum) <= 1.0

    clf = sw.Classifier(seed=3)
    label, probs = clf.predict(spectrum)
    assert label in {"SC", "SCFDMA", "OFDM", "LFM"} and len(probs) == 4
    assert all(0.0 < p < 1.0 for p in probs)

    # Global phase rotation leaves the magnitude spectrum unchanged.
    rotated = noisy.impair(phase_rad=math.pi / 3)
    assert clf.predict(rotated.features("fft_mag", 4096)) == (label, probs)

    watchdog = sw.Watchdog(nfft=4096, seed=1)
    psd = noisy.features("psd_db", 4096)
    rmse = watchdog.rmse(psd)
    assert rmse > 0.0

    regions = sw.RegionSet.calibrate(
        {"SC": [0.10, 0.12], "SCFDMA": [0.11, 0.13], "OFDM": [0.12, 0.14], "LFM": [0.01, 0.02]},
        "THREE",
    )
    assert regions.detect(0.05) == ("UNKNOWN", None)
    assert regions.detect(0.015) == ("KNOWN", "radar")
    assert sw.RegionSet.from_json(regions.to_json()).regions() == regions.regions()

    with tempfile.TemporaryDirectory() as tmp:
        path = f"{tmp}/clf.swnn"
        clf.save(path)
        assert sw.Classifier.load(path).predict(spectrum) == (label, probs)

    manifest = json.loads(sw.standard_manifest("desk", 0))
    assert manifest["profile"] == "desk"

    try:
        sw.generate("NOT_A_CLASS")
    except ValueError:
        pass
    else:
        raise AssertionError("bad class name accepted")

    print(f"ok: {label} p={max(probs):.3f} rmse={rmse:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
