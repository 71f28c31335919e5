import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stvae import fields, generators
from stvae.fields import Bounds, Dataset, FormatError, MaskError, Series


def test_default_mask_has_52_cells(mask):
    assert mask.shape == (12, 12)
    assert mask.sum() == 52
    # two blind-spot holes on the temporal side of the 54-point pattern
    filled = mask.copy()
    filled[5, 8] = filled[6, 8] = True
    assert filled.sum() == 54


def test_validate_mask_rejects_wrong_count(mask):
    bad = mask.copy()
    bad[0, 0] = True
    with pytest.raises(MaskError):
        fields.validate_mask(bad)


def test_normalize_hand_values(mask):
    b = Bounds(-37.0, 3.0)
    v = np.zeros(52)
    v[0], v[1] = -37.0, 3.0
    g = fields.pad_and_normalize(v, mask, b)
    assert g[mask][0] == 0.0 and g[mask][1] == 1.0
    assert np.all(g[~mask] == 0.0)


def test_normalize_rejects_out_of_bounds_with_index(mask):
    v = np.zeros(52)
    v[17] = 5.0
    with pytest.raises(ValueError, match="location index 17"):
        fields.pad_and_normalize(v, mask, Bounds(-37.0, 1.0))
    clipped = fields.pad_and_normalize(v, mask, Bounds(-37.0, 1.0), clip=True)
    assert clipped[mask][17] == 1.0


@settings(max_examples=50)
@given(arrays(np.float64, 52, elements=st.floats(-37.0, 4.0)))
def test_normalize_round_trip(vals):
    mask = fields.default_mask()
    b = Bounds(-37.0, 4.0)
    back = fields.denormalize(fields.pad_and_normalize(vals, mask, b), mask, b)
    np.testing.assert_allclose(back, vals, atol=1e-12, rtol=0)


def test_bounds_validation():
    with pytest.raises(ValueError):
        Bounds(0.0, 0.0)


def test_series_invariants():
    with pytest.raises(ValueError):
        Series("a", [0.0, 0.0], np.zeros((2, 52)))
    with pytest.raises(fields.ShapeMismatch):
        Series("a", [0.0, 1.0], np.zeros((3, 52)))
    with pytest.raises(ValueError):
        Dataset([Series("a", [0.0], np.zeros((1, 52)))] * 2)


def _dataset(n=30, seed=0):
    return generators.generate_dataset(generators.GeneratorSpec("pw", 3, n, seed=seed))


def test_split_is_a_seeded_partition():
    d = _dataset(50)
    a = fields.split_patients(d, (0.8, 0.1, 0.1), seed=5)
    b = fields.split_patients(d, (0.8, 0.1, 0.1), seed=5)
    ids = [s.series_id for part in a for s in part]
    assert sorted(ids) == sorted(s.series_id for s in d)
    assert len(set(ids)) == len(ids)
    assert [[s.series_id for s in p] for p in a] == [[s.series_id for s in p] for p in b]
    with pytest.raises(ValueError):
        fields.split_patients(d, (0.5, 0.2, 0.2))


def test_split_proportions_large():
    d = Dataset([Series(str(i), [0.0], np.zeros((1, 52))) for i in range(100_000)])
    tr, _, _ = fields.split_patients(d, seed=1)
    # binomial sd is sqrt(.8 * .2 / 1e5) ~ 0.0013; 0.005 is ~4 sd
    assert abs(len(tr) / 100_000 - 0.8) < 0.005


def test_dataset_round_trip(tmp_path):
    d = _dataset()
    d.series[0].label = "suspect"
    fields.save_dataset(d, tmp_path / "d.jsonl")
    assert fields.load_dataset(tmp_path / "d.jsonl") == d
    text = fields.dumps_dataset(d)
    assert fields.dumps_dataset(fields.loads_dataset(text)) == text


def test_dataset_errors_name_lines():
    text = fields.dumps_dataset(_dataset(2))
    lines = text.splitlines()
    with pytest.raises(FormatError, match="line 4"):
        fields.loads_dataset("\n".join(lines[:3] + [lines[3][:40]]))
    rec = json.loads(lines[2])
    rec["values"] = rec["values"][:51]
    with pytest.raises(FormatError, match="line 3: expected 52 values"):
        fields.loads_dataset("\n".join(lines[:2] + [json.dumps(rec)] + lines[3:]))
    rec = json.loads(lines[2])
    rec["time"] = -1.0
    with pytest.raises(FormatError, match="line 3.*strictly increasing"):
        fields.loads_dataset("\n".join(lines[:2] + [json.dumps(rec)] + lines[3:]))
    head = json.loads(lines[0])
    head["format_version"] = 7
    with pytest.raises(FormatError, match="format_version"):
        fields.loads_dataset("\n".join([json.dumps(head)] + lines[1:]))
    head = json.loads(lines[0])
    head["mask"][0] = "X" + head["mask"][0][1:]
    with pytest.raises(FormatError, match="mask"):
        fields.loads_dataset("\n".join([json.dumps(head)] + lines[1:]))
