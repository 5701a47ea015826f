import json
import os

from ssmvla.pipeline import ORDERINGS, VARIANTS, run_ablation, with_ablation, with_seed


def test_with_ablation_and_seed_do_not_mutate(tiny_cfg):
    c = with_seed(with_ablation(tiny_cfg, lam_frames=1, attention="causal"), 4)
    assert (c.ablation.lam_frames, c.ablation.attention, c.seed) == (1, "causal", 4)
    assert (tiny_cfg.ablation.lam_frames, tiny_cfg.seed) == (3, 0)


def test_ablation_runs_every_variant_and_keeps_lam_artifacts(tiny_cfg, tmp_path):
    report = run_ablation(tiny_cfg, str(tmp_path), seeds=(0,))
    assert report["completed"]
    assert set(report["variants"]) == set(VARIANTS)
    assert len(report["orderings"]) == len(ORDERINGS)
    assert report["all_orderings_hold"] == all(c["holds"] for c in report["orderings"])
    with open(tmp_path / "ablation_report.json") as f:
        assert json.load(f) == report
    # policy and LAM directories must not collide
    for frames in (1, 3):
        with open(os.path.join(tmp_path, "seed0", "lam_models", f"frames{frames}", "checkpoint", "manifest.json")) as f:
            assert json.load(f)["meta"]["kind"] == "lam"
    for v in VARIANTS:
        assert os.path.exists(os.path.join(tmp_path, "seed0", v, "report.json"))
