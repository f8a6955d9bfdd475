import csv
import json

import numpy as np
import pytest

from synernet.ablation import VARIANTS, dump_embeddings, run_ablation, shots_curve, write_ablation_csv, write_shots_csv
from synernet.evaluation import evaluate
from synernet.training import TrainConfig, train_few_shot

FAST = TrainConfig(epochs=8)


@pytest.fixture(scope="module")
def rows(bench):
    return run_ablation(bench, 16, [0], base=FAST)


def test_nine_rows_in_table_order(rows):
    assert [r.variant for r in rows] == [v for v, _ in VARIANTS]
    assert len(rows) == 9
    assert rows[0].drop == 0.0
    for r in rows:
        assert r.drop == pytest.approx(rows[0].mean - r.mean)


def test_csv(tmp_path, rows):
    write_ablation_csv(rows, tmp_path / "ablation.csv")
    with open(tmp_path / "ablation.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 9 and table[3]["flags"] == "NO_NOM"


def test_unknown_flag(bench):
    with pytest.raises(ValueError):
        run_ablation(bench, 16, [0], base=FAST, variants=[("bad", ["NO_SUCH"])])


def test_no_nom_stays_at_chance(bench, split16):
    p = train_few_shot(bench, split16, TrainConfig(epochs=20, ablation_flags=["NO_NOM"])).params
    assert abs(evaluate(bench, split16, p, "OOD_ONLY").ood_top1 - 1 / 8) <= 0.05


def test_shots_curve(tmp_path, bench):
    rows = shots_curve(bench, [0], (1, 16), base=FAST)
    assert [r["K"] for r in rows] == [1, 16]
    write_shots_csv(rows, tmp_path / "shots_curve.csv")
    assert (tmp_path / "shots_curve.csv").read_text().startswith("K,ood_mean")


def test_embeddings_dump_layout(tmp_path, bench, split16):
    p = train_few_shot(bench, split16, FAST).params
    dump_embeddings(bench, split16, p, tmp_path)
    meta = json.loads((tmp_path / "embeddings_dump.json").read_text())
    flat = np.fromfile(tmp_path / "embeddings_dump.f32", dtype="<f4")
    total = sum(int(np.prod(b["shape"])) for b in meta["blocks"])
    assert flat.size == total
    assert [b["block"] for b in meta["blocks"]] == ["image", "text_untrained", "text_trained"]
    assert meta["blocks"][0]["shape"] == [len(split16.test), 16]
