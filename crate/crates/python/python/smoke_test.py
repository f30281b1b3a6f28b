"""Smoke test for the Python bindings. Run with pytest or as a script."""

import json
import math
import tempfile

import numpy as np

import ionspec_py as ion


def as_array(obj):
    return np.asarray(obj.values, dtype=complex).reshape(obj.shape)


def test_builtins_listed():
    names = ion.builtin_names()
    assert {"sqc", "dqc", "pe", "delta-sqc-left"} <= set(names)


def test_exciton_table():
    t = ion.exciton_table(3, 0.1)
    assert np.allclose(t["single_energies"], [0.88, 0.95, 1.0], atol=1e-9)
    c = np.asarray(t["single_coefficients"])
    assert np.allclose(c @ c.T, np.eye(3), atol=1e-12)
    assert len(t["double_energies"]) == 6


def test_single_mode_signal_and_spectrum():
    eps = 0.05
    doc = {
        "units": "nu_x",
        "model": {"kind": "phonon", "n_ions": 1, "beta0": 0.1, "local_dim": 4, "excitation_cap": 3, "baths": []},
        "initial": "ground",
        "pulses": [
            {"kind": "displacement", "site": 1, "phase": "p1", "epsilon": eps},
            {"kind": "displacement", "site": 1, "phase": "p2", "epsilon": eps},
        ],
        "delays": {"t1": {"start": 0, "step": 0.25, "points": 64}, "t2": {"start": 0, "step": 0.5, "points": 8}},
        "signature": [1, -1],
        "readout": {"kind": "motional", "site": 1},
        "method": "both",
    }
    p = ion.Protocol.from_json(json.dumps(doc))
    s = p.run()
    assert s.deviation is not None and s.deviation < 1e-10
    values = as_array(s)
    t1 = 0.25 * np.arange(64)
    expected = eps**2 * np.exp(-1j * t1)
    assert np.allclose(values, expected[:, None], atol=1e-10 * eps**2)

    spec = s.spectrum(["t1", "t2"], flip=["t1"])
    name, start, step, count = spec.axes[0]
    assert name == "w1"
    peaks = spec.peaks(0.5)
    assert peaks
    w1, w2 = peaks[0]["position"]
    assert abs(w1 - 1.0) <= step and abs(w2) <= spec.axes[1][2]

def test_overrides_and_errors():
    text = ion.Protocol.builtin("sqc").to_json()
    p = ion.Protocol.from_json(text, ["model.n_spins=2", "delays.t1.points=8", "delays.t2.points=8"])
    assert p.units == "J0"
    assert p.scanned_axes == ["t1", "t2"]
    try:
        ion.Protocol.from_json(text, ["model.n_spins=0"])
    except ion.InputError as e:
        assert "model-parameter" in str(e)
    else:
        raise AssertionError("invalid model accepted")


def test_files_round_trip():
    p = ion.Protocol.builtin("sqc").reduced(8, 3)
    p = ion.Protocol.from_json(p.to_json(), ["model.n_spins=2"])
    s = p.run()
    spec = p.spectrum(s)
    with tempfile.TemporaryDirectory() as d:
        csv, _ = s.write(d)
        back = ion.Signal.read(csv)
        assert np.array_equal(as_array(back), as_array(s))
        csv, _ = spec.write(d)
        assert np.array_equal(as_array(ion.Spectrum.read(csv)), as_array(spec))
    zero = s - s
    assert np.all(as_array(zero) == 0)
    assert spec.metadata["transform"]["axes"] == ["t1", "t2"]
    assert not math.isnan(np.abs(as_array(spec)).max())


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print("ok", name)
