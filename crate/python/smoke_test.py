"""Exercise the Python bindings end to end on the smoke preset."""

import json
import math
import sys
import tempfile
from pathlib import Path

import m3dt_py as m


def main() -> int:
    assert m.compute_rtg([1.0, 2.0, 3.0]) == [6.0, 5.0, 3.0]

    w = m.topk_route([0.1, 2.0, -1.0, 1.5], 2)
    assert sum(1 for x in w if x != 0.0) == 2
    assert abs(sum(w) - 1.0) < 1e-12

    sim = m.gradient_similarity({0: [1.0, 0.0], 1: [0.0, 1.0]})
    assert abs(sim - math.sqrt(0.5)) < 1e-9, sim
    assert m.gradient_similarity({0: [1.0, 2.0], 1: [-1.0, -2.0]}) is None
    assert m.agreement_vectors({0: [2.0, 0.0], 1: [0.0, 2.0]}) == {0: [2.0, 0.0], 1: [0.0, 2.0]}

    groups = m.random_grouping(list(range(8)), 4, 0)
    assert sorted(groups) == list(range(8))
    vecs = {i: [float(i // 3), 0.0] for i in range(9)}
    labels = m.kmeans_grouping(vecs, 3, 1)
    assert m.adjusted_rand_index([labels[i] for i in range(9)], [i // 3 for i in range(9)]) == 1.0

    tasks = json.loads(m.suite_tasks("default16", 64))
    assert len(tasks) == 16
    assert m.parse_eval_mode("topk:2") == "topk:2"

    det = m.PeakDetector(1, 2)
    for step, c in enumerate([0.1, 0.5, 0.4, 0.3]):
        det.push(step, c)
    assert det.fired is not None and det.best_step == 1

    with tempfile.TemporaryDirectory() as tmp:
        report = json.loads(m.run_pipeline(tmp, preset="smoke", seed=3))
        assert report["freeze"] == {"backbone_preserved": True, "experts_preserved": True}
        assert set(report["evaluations"]) == {"backbone", "dense", "oracle"}
        ck = m.Checkpoint.load(str(Path(tmp) / "checkpoints" / "stage3.ckpt"))
        assert ck.stage == 3 and ck.n_experts == 4
        shape, data = ck.tensor(ck.names()[0])
        assert math.prod(shape) == len(data)
        copy = Path(tmp) / "copy.ckpt"
        ck.save(str(copy))
        assert copy.read_bytes() == (Path(tmp) / "checkpoints" / "stage3.ckpt").read_bytes()
        ablation = json.loads(m.ablate(tmp, "no_expert_freeze", preset="smoke"))
        assert ablation["freeze"]["experts_preserved"] is False

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
