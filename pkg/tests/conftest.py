import json

import numpy as np
import pytest


def rle_encode_counts(mask: np.ndarray) -> list[int]:
    """Column-major run lengths starting with a run of zeros."""
    flat = mask.T.reshape(-1).astype(np.uint8)
    counts, prev, run = [], 0, 0
    for v in flat:
        if v != prev:
            counts.append(run)
            prev, run = v, 0
        run += 1
    counts.append(run)
    return counts


def rle_counts_to_string(counts: list[int]) -> str:
    """Reference port of the compressed COCO counts encoder."""
    out = []
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_mask():
    m = np.zeros((200, 100), dtype=bool)
    m[100:150, 50:80] = True
    m[120:130, 60:70] = False
    return m


@pytest.fixture
def coco_files(tmp_path):
    """Four images: two usable, one without annotations, one without a caption."""
    rle = rle_mask()
    instances = {
        "images": [
            {"id": 1, "width": 100, "height": 200, "file_name": "a.jpg"},
            {"id": 2, "width": 64, "height": 48, "file_name": "b.jpg"},
            {"id": 3, "width": 10, "height": 10, "file_name": "c.jpg"},
            {"id": 4, "width": 10, "height": 10, "file_name": "d.jpg"},
        ],
        "annotations": [
            {"id": 11, "image_id": 1, "category_id": 1, "bbox": [10, 20, 30, 40], "iscrowd": 0,
             "segmentation": [[10, 20, 40, 20, 40, 60, 10, 60]]},
            {"id": 12, "image_id": 1, "category_id": 2, "bbox": [50, 100, 30, 50], "iscrowd": 0,
             "segmentation": {"counts": rle_counts_to_string(rle_encode_counts(rle)), "size": [200, 100]}},
            {"id": 13, "image_id": 1, "category_id": 1, "bbox": [60, 10, 20, 20], "iscrowd": 0,
             "segmentation": [[60, 10, 80, 10, 80, 30, 60, 30]]},
            {"id": 21, "image_id": 2, "category_id": 2, "bbox": [0, 0, 64, 24], "iscrowd": 0,
             "segmentation": [[0, 0, 64, 0, 64, 24, 0, 24]]},
            {"id": 22, "image_id": 2, "category_id": 1, "bbox": [8, 30, 16, 12], "iscrowd": 0,
             "segmentation": [[8, 30, 24, 30, 24, 42, 8, 42]]},
            {"id": 23, "image_id": 2, "category_id": 1, "bbox": [30, 30, 10, 10], "iscrowd": 1,
             "segmentation": {"counts": [0, 100], "size": [10, 10]}},
            {"id": 24, "image_id": 2, "category_id": 2, "bbox": [40, 30, 20, 10], "iscrowd": 0,
             "segmentation": [[40, 30, 60, 30, 60, 40, 40, 40]]},
            {"id": 41, "image_id": 4, "category_id": 1, "bbox": [1, 1, 2, 2], "iscrowd": 0,
             "segmentation": [[1, 1, 3, 1, 3, 3, 1, 3]]},
        ],
        "categories": [{"id": 1, "name": "dog"}, {"id": 2, "name": "grass"}],
    }
    captions = {"annotations": [
        {"id": 7, "image_id": 1, "caption": "a dog near some grass"},
        {"id": 5, "image_id": 1, "caption": "  grass field with a dog "},
        {"id": 9, "image_id": 2, "caption": "a dog below grass"},
        {"id": 10, "image_id": 3, "caption": "nothing here"},
    ]}
    inst_path, cap_path = tmp_path / "instances.json", tmp_path / "captions.json"
    inst_path.write_text(json.dumps(instances))
    cap_path.write_text(json.dumps(captions))
    return inst_path, cap_path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
