import json

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_manifest_dicts(n_records=10, n_patients=5, with_masks=False, with_subtype=False):
    records = []
    for i in range(n_records):
        rec = {
            "id": f"img_{i}",
            "patient_id": f"p{i % n_patients}",
            "image_path": f"images/img_{i}.png",
            "tumor_label": i % 2,
        }
        if with_masks and rec["tumor_label"] == 1:
            rec["mask_path"] = f"masks/img_{i}.png"
        if with_subtype:
            rec["her2"] = i % 2
            rec["ki67"] = (i // 2) % 2
            rec["p53"] = None
        records.append(rec)
    return records


@pytest.fixture
def manifest_file(tmp_path):
    def write(records):
        path = tmp_path / "manifest.json"
        with open(path, "w") as f:
            json.dump(records, f)
        return path

    return write
