import numpy as np
import pytest

from gridcycle.evaluation import (ap_family, average_precision, detect_oracle, grounding_accuracy,
                                  grounding_queries, oracle_grounder)
from gridcycle.world import Box, WorldConfig, iou, render, sample_layout


def test_detect_oracle_examples():
    assert detect_oracle(np.zeros((4, 4), dtype=np.int64)) == []
    img = np.zeros((4, 4), dtype=np.int64)
    img[0, 0] = img[0, 1] = img[1, 0] = 2
    (c, box, score), = detect_oracle(img)
    assert (c, box) == (1, Box(0, 0, 2, 2)) and score == pytest.approx(0.75)

    cfg = WorldConfig(H=8, W=8, K_max=4)
    lay = sample_layout(np.random.default_rng(0), cfg)
    dets = detect_oracle(render(lay, cfg))
    assert len(dets) == len(lay) and all(s == 1.0 for _, _, s in dets)


def test_ap_perfect_and_empty():
    truths = [[(0, Box(0, 0, 2, 2)), (1, Box(3, 3, 5, 6))]]
    perfect = [[(0, Box(0, 0, 2, 2), 1.0), (1, Box(3, 3, 5, 6), 1.0)]]
    assert ap_family(perfect, truths) == {"AP": 1.0, "AP50": 1.0, "AP75": 1.0}
    assert average_precision([[]], truths, 0.5) == 0.0


def test_ap_hand_tabulated():
    # ranked: false positive (0.95) then true positive (0.9)
    # precision [0, 1/2], recall [0, 1]; interpolated precision is 1/2 at all 101 recall points
    truths = [[(0, Box(0, 0, 2, 2))]]
    dets = [[(0, Box(0, 0, 2, 2), 0.9), (0, Box(5, 5, 7, 7), 0.95)]]
    assert average_precision(dets, truths, 0.5) == pytest.approx(0.5)


def brute_ap(dets, truths, thr):
    """Independent tabulation: greedy matching in score order, then 101-point interpolation."""
    classes = sorted({c for t in truths for c, _ in t})
    out = []
    for c in classes:
        flat = sorted([(-s, i, k, b) for i, d in enumerate(dets) for k, (cc, b, s) in enumerate(d) if cc == c])
        gts = {(i, g): b for i, t in enumerate(truths) for g, (cc, b) in enumerate(t) if cc == c}
        taken = set()
        hits = []
        for _, i, _, b in flat:
            cands = [(iou(b, gb), key) for key, gb in gts.items() if key[0] == i and key not in taken]
            cands = [x for x in cands if x[0] >= thr]
            if cands:
                best = max(cands, key=lambda x: (x[0], -x[1][1]))
                taken.add(best[1])
                hits.append(1)
            else:
                hits.append(0)
        pts = []
        for n in range(1, len(hits) + 1):
            tp = sum(hits[:n])
            pts.append((tp / len(gts), tp / n))
        total = 0.0
        for r in np.linspace(0, 1, 101):
            ps = [p for rr, p in pts if rr >= r - 1e-12]
            total += max(ps) if ps else 0.0
        out.append(total / 101)
    return float(np.mean(out))


def test_ap_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(30):
        truths, dets = [], []
        for _ in range(4):
            t = []
            for _ in range(rng.integers(1, 4)):
                x, y = rng.integers(0, 6, 2)
                t.append((int(rng.integers(0, 2)), Box(int(x), int(y), int(x) + 2, int(y) + 2)))
            truths.append(t)
            d = []
            for c, b in t:
                if rng.random() < 0.8:
                    dx, dy = rng.integers(-1, 2, 2)
                    d.append((c, Box(b.x0 + int(dx), b.y0 + int(dy), b.x1 + int(dx), b.y1 + 1), float(rng.random())))
            for _ in range(rng.integers(0, 3)):
                x, y = rng.integers(0, 6, 2)
                d.append((int(rng.integers(0, 2)), Box(int(x), int(y), int(x) + 3, int(y) + 1), float(rng.random())))
            dets.append(d)
        for thr in (0.5, 0.75):
            assert average_precision(dets, truths, thr) == pytest.approx(brute_ap(dets, truths, thr), abs=1e-12)


def test_oracle_grounder_is_perfect():
    cfg = WorldConfig(H=8, W=8, K_max=4)
    q = grounding_queries(cfg, seed=3, n=200)
    acc = grounding_accuracy(oracle_grounder, q)
    assert acc["Acc@0.50"] == acc["Acc@0.90"] == acc["mAcc"] == 1.0
    assert acc["parse_failure_rate"] == 0.0
