"""Builds the COCO conformance fixture and its reference scores.

Run from the repository root:

    python3 scripts/gen_conformance.py

Requires numpy and pycocotools. Writes ground truth, detections and the
reference AP/AP50 into crates/cli/tests/fixtures/.
"""

import contextlib
import io
import json
import os

import numpy as np
from pycocotools.coco import COCO
from pycocotools.cocoeval import COCOeval

OUT = os.path.join("crates", "cli", "tests", "fixtures")
CATEGORIES = [1, 2, 5]


def jitter(rng, box, scale):
    x, y, w, h = box
    dx, dy = rng.normal(0, scale * w), rng.normal(0, scale * h)
    dw, dh = rng.normal(0, scale * w), rng.normal(0, scale * h)
    return [round(x + dx, 2), round(y + dy, 2), round(max(w + dw, 1.0), 2), round(max(h + dh, 1.0), 2)]


def build(seed=7):
    rng = np.random.default_rng(seed)
    images, annotations, detections = [], [], []
    ann_id = 1
    for image_id in range(1, 21):
        width, height = 320, 240
        images.append({"id": image_id, "width": width, "height": height, "file_name": f"img_{image_id:03d}.jpg"})
        for _ in range(rng.integers(1, 5)):
            w, h = float(rng.integers(8, 120)), float(rng.integers(8, 100))
            x, y = float(rng.integers(0, width - int(w))), float(rng.integers(0, height - int(h)))
            crowd = int(rng.random() < 0.12)
            cat = int(rng.choice(CATEGORIES))
            annotations.append(
                {"id": ann_id, "image_id": image_id, "category_id": cat, "bbox": [x, y, w, h],
                 "area": w * h, "iscrowd": crowd}
            )
            ann_id += 1
            if rng.random() < 0.8:
                score = round(float(rng.uniform(0.3, 1.0)), 2)
                detections.append({"image_id": image_id, "category_id": cat,
                                   "bbox": jitter(rng, [x, y, w, h], 0.08), "score": score})
            if rng.random() < 0.25:
                # duplicate with a worse box, often tied in score
                score = round(float(rng.uniform(0.2, 0.9)), 1)
                detections.append({"image_id": image_id, "category_id": cat,
                                   "bbox": jitter(rng, [x, y, w, h], 0.2), "score": score})
        for _ in range(rng.integers(0, 3)):
            w, h = float(rng.integers(8, 80)), float(rng.integers(8, 80))
            detections.append({"image_id": image_id, "category_id": int(rng.choice(CATEGORIES)),
                               "bbox": [float(rng.integers(0, 240)), float(rng.integers(0, 160)), w, h],
                               "score": round(float(rng.uniform(0.05, 0.8)), 1)})

    # a crowd region with several detections inside it
    annotations.append({"id": ann_id, "image_id": 3, "category_id": 2, "bbox": [100.0, 60.0, 150.0, 120.0],
                        "area": 18000.0, "iscrowd": 1})
    ann_id += 1
    for k in range(4):
        detections.append({"image_id": 3, "category_id": 2,
                           "bbox": [110.0 + 25 * k, 70.0, 30.0, 40.0], "score": 0.5})

    # more than 100 detections for one (image, category)
    annotations.append({"id": ann_id, "image_id": 7, "category_id": 1, "bbox": [20.0, 20.0, 50.0, 50.0],
                        "area": 2500.0, "iscrowd": 0})
    for k in range(110):
        detections.append({"image_id": 7, "category_id": 1,
                           "bbox": [float(200 + k % 10), float(150 + k // 10), 20.0, 20.0],
                           "score": round(0.9 - 0.005 * k, 3)})
    # the true positive ranks below the cap and is cut off
    detections.append({"image_id": 7, "category_id": 1, "bbox": [21.0, 21.0, 50.0, 50.0], "score": 0.3})

    gt = {"images": images, "annotations": annotations,
          "categories": [{"id": c, "name": f"cat_{c}"} for c in CATEGORIES]}
    return gt, detections


def evaluate(gt, detections):
    with contextlib.redirect_stdout(io.StringIO()):
        coco = COCO()
        coco.dataset = json.loads(json.dumps(gt))
        coco.createIndex()
        res = coco.loadRes(json.loads(json.dumps(detections)))
        ev = COCOeval(coco, res, "bbox")
        ev.evaluate()
        ev.accumulate()
        ev.summarize()
    return {"ap": float(ev.stats[0]), "ap50": float(ev.stats[1])}


def main():
    gt, detections = build()
    expected = evaluate(gt, detections)
    expected["num_detections"] = len(detections)
    expected["num_annotations"] = len(gt["annotations"])
    os.makedirs(OUT, exist_ok=True)
    for name, payload in [("conformance_gt.json", gt), ("conformance_dets.json", detections),
                          ("conformance_expected.json", expected)]:
        with open(os.path.join(OUT, name), "w") as f:
            json.dump(payload, f, indent=1)
            f.write("\n")
    print(json.dumps(expected, indent=1))


if __name__ == "__main__":
    main()
