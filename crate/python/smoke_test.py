"""Smoke test for the strokeseg Python bindings.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import numpy as np

import strokeseg


def main() -> None:
    case = strokeseg.synth_case(3, (2, 64, 64))
    assert case.shape == (2, 64, 64)
    labels = case.labels()
    assert labels.dtype == np.uint8 and set(np.unique(labels)) <= {0, 1, 2}
    encoded = strokeseg.encode_labels(case.penumbra_mask, case.core_mask)
    assert np.array_equal(encoded, labels)

    mask = np.zeros((5, 5), dtype=bool)
    mask[2, 2] = True
    band = strokeseg.boundary_band(mask)
    assert band.sum() == 9
    weights = strokeseg.weight_map(labels[0])
    assert weights.min() == 1.0 and weights.max() == 10.0

    assert strokeseg.dice(mask, mask) == 1.0
    assert strokeseg.dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0

    folds = strokeseg.make_folds([f"c{i}" for i in range(7)], 3, 0)
    assert sorted(sum(folds, [])) == sorted(f"c{i}" for i in range(7))

    logits = np.zeros((3, 4, 4))
    value, grad = strokeseg.cross_entropy(logits, np.zeros((4, 4), np.uint8))
    assert abs(value - math.log(3)) < 1e-12 and grad.shape == (3, 4, 4)
    value, _ = strokeseg.lovasz_softmax(np.full((3, 4, 4), 1 / 3), np.zeros((4, 4), np.uint8))
    assert 0 < value < 1
    value, _, _ = strokeseg.ragan_d_loss([0.5, 0.5], [0.5, 0.5])
    assert abs(value - 2 * math.log(2)) < 1e-12

    assert strokeseg.ablation_flags("BL6") == (True, False, True)
    table = strokeseg.render_table({"PROPOSED": (0.881, 0.877)})
    assert "0.881" in table and "Proposed" in table

    widths = [8, 16, 32, 32, 64, 64, 64, 64]
    seg = strokeseg.Segmenter(encoder_widths=widths, seed=1)
    out = seg.forward(np.zeros((1, 3, 64, 64), np.float32))
    assert out.shape == (1, 3, 64, 64)
    pred = seg.predict(case)
    assert pred.shape == case.shape

    trainer = strokeseg.Trainer("PROPOSED", lr=1e-3, encoder_widths=widths, disc_base_width=8)
    report = trainer.step([case])
    assert trainer.adversarial and all(math.isfinite(v) for v in report.values())

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "seg.safetensors"
        seg.save(str(path))
        again = strokeseg.Segmenter.load(str(path))
        assert np.array_equal(again.predict(case), pred)
        case_dir = case.save(tmp)
        assert strokeseg.Case.load(case_dir).case_id == case.case_id

    try:
        strokeseg.ablation_flags("BL9")
    except ValueError as err:
        assert "PROPOSED" in str(err)
    else:
        raise AssertionError("unknown tag accepted")

    print("strokeseg smoke test passed")


if __name__ == "__main__":
    main()
