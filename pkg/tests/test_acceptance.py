"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The two training-heavy
criteria build mid-sized synthetic datasets and stay well inside their
stated wall-clock budgets on a desktop CPU.
"""

import dataclasses
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from dbrec import autodiff as ad
from dbrec.cli import main as cli_main
from dbrec.evaluation import RankResult, compute_metrics, evaluate, group_purity
from dbrec.model import DBRec, HyperParams, ModelParams, TrainBatch, VARIANTS
from dbrec.training import (
    TrainConfig,
    init_groups_from_embeddings,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
    save_checkpoint,
    train,
)

from _synth import block_affinity_pairs, planted_blocks, dataset_from_pairs, write_movielens


def announce(name):
    print(f"\nACCEPTANCE {name}: PASS")


@pytest.fixture(scope="module")
def ablation_dataset():
    pairs = block_affinity_pairs(
        num_users=900, num_items=1200, blocks=6, p_in=0.20, p_out=0.006, seed=11
    )
    return dataset_from_pairs(pairs, seed=11)


def clone_via_checkpoint(params, tmp_path, tag):
    path = Path(tmp_path) / f"clone-{tag}.ckpt"
    save_checkpoint(path, params, variant="dbrec", epoch=0)
    return model_from_checkpoint(load_checkpoint(path))


def test_gradient_correctness():
    """Toy instance, all five loss terms, every tensor at rel tol 1e-4, <60 s."""
    started = time.monotonic()
    hp = HyperParams(d=8, d_g=4, k=3, alpha=1.0, seed=0)
    params = ModelParams(7, 11, hp)
    # healthier magnitudes than the training init keep every relu, hinge and
    # argmax decision away from the probe interval
    rng = np.random.default_rng([0, 77])
    for p in params.all_parameters():
        p.values[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    model = DBRec(params)
    brng = np.random.default_rng(100)
    batch = TrainBatch(
        pos_users=np.arange(7, dtype=np.intp),
        pos_items=np.array([0, 2, 4, 6, 8, 10, 1], dtype=np.intp),
        neg_users=np.repeat(np.arange(7), 2).astype(np.intp),
        neg_items=brng.integers(0, 11, 14).astype(np.intp),
        group_neg_users=brng.integers(0, 7, 3).astype(np.intp),
        group_neg_items=brng.integers(0, 11, 3).astype(np.intp),
    )

    def loss_fn():
        return model.total_loss(batch)[0]

    _, terms = model.total_loss(batch)
    assert terms.cf > 0 and terms.hier_user > 0 and terms.hier_item > 0
    assert terms.group_user > 0 and terms.group_item > 0

    report = ad.finite_diff_check(
        loss_fn, params.all_parameters(), h=1e-4, tol=1e-4, coords_per_tensor=20, seed=0
    )
    elapsed = time.monotonic() - started
    assert report.passed, report.failures()
    assert len(report.per_tensor) == len(params.all_parameters())
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    announce(f"gradient correctness (max rel err {report.max_rel_error:.2e}, {elapsed:.1f}s)")


def test_metric_oracle_equivalence():
    """HR/NDCG over 10,000 synthetic ranks equal brute force exactly."""
    rng = np.random.default_rng(123)
    ranks = rng.integers(1, 101, size=10_000)
    results = [RankResult(user=i, test_item=0, rank=int(r)) for i, r in enumerate(ranks)]
    report = compute_metrics(results)
    for k in range(1, 11):
        hits = sum(1 for r in ranks if r <= k)
        gain = sum(1.0 / math.log2(r + 1) for r in ranks if r <= k)
        assert report.hr[k] == hits / 10_000
        assert report.ndcg[k] == gain / 10_000

    single = compute_metrics([RankResult(0, 0, 1)])
    assert all(single.hr[k] == 1.0 and single.ndcg[k] == 1.0 for k in range(1, 11))
    third = compute_metrics([RankResult(0, 0, 3)])
    assert third.ndcg[10] == 0.5
    assert third.hr[2] == 0.0
    announce("metric oracle equivalence (10,000 ranks, exact)")


def test_random_model_baseline(ablation_dataset):
    """Untrained model ranks the held-out item uniformly: HR@10 = 0.10 +/- 0.02."""
    ds = ablation_dataset
    hp = HyperParams(d=32, d_g=16, k=6, seed=202)
    model = DBRec(ModelParams(ds.num_users, ds.num_items, hp))
    report = evaluate(model, ds, "test", seed=17, count=99, max_pairs=2500)
    assert report.num_results >= 2000
    assert abs(report.hr[10] - 0.10) <= 0.02, f"HR@10 = {report.hr[10]:.4f}"
    announce(f"random-model baseline (HR@10 = {report.hr[10]:.4f} on {report.num_results} pairs)")


def test_planted_group_recovery(tmp_path):
    """2x2 planted blocks; hard-assignment purity >= 0.8 for users and items."""
    started = time.monotonic()
    pairs, user_blocks, item_blocks = planted_blocks(
        num_users=200, num_items=300, p_in=0.3, p_out=0.02, seed=7
    )
    ds = dataset_from_pairs(pairs, seed=7)
    hp = HyperParams(d=16, d_g=8, k=2, alpha=0.1, lr=3e-3, batch_size=256, seed=7)
    cfg = TrainConfig(hp=hp, epochs=40, pretrain_epochs=35, eval_every=0)

    result = pretrain(ds, cfg)
    params = result.params
    init_groups_from_embeddings(params, cfg)
    train(ds, cfg, params, variant="dbrec", epochs=40)

    model = DBRec(params)
    users = np.arange(ds.num_users, dtype=np.intp)
    items = np.arange(ds.num_items, dtype=np.intp)
    user_purity = group_purity(model.hard_labels(users, "user"), user_blocks)
    item_purity = group_purity(model.hard_labels(items, "item"), item_blocks)
    elapsed = time.monotonic() - started
    assert user_purity >= 0.8, f"user purity {user_purity:.3f}"
    assert item_purity >= 0.8, f"item purity {item_purity:.3f}"
    assert elapsed < 600.0, f"planted-group run took {elapsed:.1f}s"
    announce(
        f"planted-group recovery (user purity {user_purity:.3f}, "
        f"item purity {item_purity:.3f}, {elapsed:.0f}s)"
    )


def test_ablation_direction(ablation_dataset, tmp_path):
    """Full model beats the interaction-only variant on >=3 of 4 metrics."""
    started = time.monotonic()
    ds = ablation_dataset
    hp = HyperParams(d=32, d_g=16, k=6, alpha=0.1, lr=3e-3, batch_size=256, seed=11)
    cfg = TrainConfig(hp=hp, epochs=20, pretrain_epochs=20, eval_every=0)

    shared = pretrain(ds, cfg)
    reports = {}
    for variant in ("dbrec-o", "dbrec"):
        params = clone_via_checkpoint(shared.params, tmp_path, variant)
        if variant == "dbrec":
            init_groups_from_embeddings(params, cfg)
        train(ds, cfg, params, variant=variant, epochs=cfg.epochs)
        reports[variant] = evaluate(
            DBRec(params, VARIANTS[variant]), ds, "test", seed=11, count=99
        )

    full, base = reports["dbrec"], reports["dbrec-o"]
    metrics = [
        ("HR@5", full.hr[5], base.hr[5]),
        ("HR@10", full.hr[10], base.hr[10]),
        ("NDCG@5", full.ndcg[5], base.ndcg[5]),
        ("NDCG@10", full.ndcg[10], base.ndcg[10]),
    ]
    wins = sum(1 for _, a, b in metrics if a > b)
    worst_gap = min(a - b for _, a, b in metrics)
    elapsed = time.monotonic() - started
    detail = ", ".join(f"{name} {a:.4f} vs {b:.4f}" for name, a, b in metrics)
    assert wins >= 3, detail
    assert worst_gap >= -0.005, detail
    assert elapsed < 1800.0, f"ablation run took {elapsed:.1f}s"
    announce(f"ablation direction ({wins}/4 wins; {detail}; {elapsed:.0f}s)")


ML1M_ENV = "DBREC_ML1M_PATH"


def test_stretch_ml1m_reproduction():
    """Non-gating full-scale reproduction; runs only when the dataset is present."""
    path = os.environ.get(ML1M_ENV, "data/ml-1m/ratings.dat")
    if not Path(path).exists():
        pytest.skip(
            f"full-scale ratings file not found at {path!r} (set {ML1M_ENV}); "
            "see README 'Reproduction report' for the recorded run instructions"
        )
    from dbrec.data import prepare

    ds = prepare(path, "movielens", seed=0)
    hp = HyperParams(seed=0)  # documented defaults: d=128, lr=1e-4, batch 256, k=5
    cfg = TrainConfig(hp=hp, epochs=40, pretrain_epochs=10, eval_every=5)
    result = pretrain(ds, cfg)
    params = result.params
    init_groups_from_embeddings(params, cfg)
    outcome = train(ds, cfg, params, variant="dbrec")
    report = evaluate(DBRec(params), ds, "test", seed=0)
    print(f"\nfull-scale run: HR@10 {report.hr[10]:.5f}, NDCG@10 {report.ndcg[10]:.5f} "
          f"(reference points 0.52311 / 0.31865)")
    announce("stretch reproduction (non-gating; numbers recorded above)")


def _pipeline_once(out_dir, cfg_path):
    for command in ("prepare", "pretrain", "train", "eval"):
        code = cli_main([command, "-c", str(cfg_path), "--out", str(out_dir)])
        assert code == 0, command


def _strip_wall_column(blob: bytes) -> list[str]:
    return [row.rsplit(",", 1)[0] for row in blob.decode().splitlines()]


def test_full_pipeline_determinism(tmp_path):
    """Two identical pipeline runs produce identical artifacts.

    Checkpoints and metric files must match bitwise. Training logs must
    match except for the wall-clock column, which records real elapsed time
    and cannot be bitwise stable (see the interface's wall_seconds field).
    """
    pairs, _, _ = planted_blocks(num_users=40, num_items=120, p_in=0.35, p_out=0.04, seed=9)
    raw = tmp_path / "ratings.dat"
    write_movielens(raw, pairs)
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(
        "d = 8\nd_g = 4\nk = 2\nalpha = 0.1\nlr = 0.003\nbatch_size = 64\n"
        "hidden_uv = 16,8\nhidden_ug = 16,8\nhidden_vg = 16,8\nhidden_hier = 16,16\n"
        "epochs = 4\npretrain_epochs = 3\neval_every = 2\neval_negatives = 40\n"
        f"seed = 5\ndata_path = {raw}\n",
        encoding="utf-8",
    )
    out_a, out_b = tmp_path / "run-a", tmp_path / "run-b"
    _pipeline_once(out_a, cfg_path)
    _pipeline_once(out_b, cfg_path)

    compared = 0
    for file_a in sorted(out_a.rglob("*")):
        if not file_a.is_file() or file_a.suffix == ".cfg":
            continue  # resolved configs echo the differing out_dir by design
        file_b = out_b / file_a.relative_to(out_a)
        assert file_b.exists(), file_b
        bytes_a, bytes_b = file_a.read_bytes(), file_b.read_bytes()
        if file_a.name.endswith("_log.csv"):
            assert _strip_wall_column(bytes_a) == _strip_wall_column(bytes_b), file_a.name
        else:
            assert bytes_a == bytes_b, file_a.name
        compared += 1
    checked = {p.name for p in out_a.rglob("*") if p.is_file()}
    assert {"dataset.json", "pretrain.ckpt", "best.ckpt", "last.ckpt",
            "metrics_test.csv"} <= checked
    announce(f"pipeline determinism ({compared} artifacts compared)")


def test_reductions(tmp_path):
    """Masked runs reduce exactly to the basic model; variant masks activate
    exactly their named loss terms."""
    pairs, _, _ = planted_blocks(num_users=30, num_items=40, p_in=0.45, p_out=0.05, seed=1)
    ds = dataset_from_pairs(pairs, seed=1)
    hp = HyperParams(d=8, d_g=4, k=2, alpha=0.0, lr=3e-3, batch_size=64,
                     hidden_uv=(16, 8), hidden_ug=(16, 8), hidden_vg=(16, 8),
                     hidden_hier=(16, 16), seed=0)
    cfg = TrainConfig(hp=hp, epochs=4, pretrain_epochs=4, eval_every=0)

    basic = pretrain(ds, cfg)  # the plain interaction-network run

    hp_masked = dataclasses.replace(hp, alpha=0.0)
    cfg_masked = TrainConfig(hp=hp_masked, epochs=4, pretrain_epochs=0, eval_every=0)
    params = ModelParams(ds.num_users, ds.num_items, hp_masked)
    masked = train(ds, cfg_masked, params, variant="dbrec-o", epochs=4)

    for row_a, row_b in zip(basic.log, masked.log):
        assert abs(row_a.cf - row_b.cf) <= 1e-12
        assert row_b.hier_user == row_b.hier_item == 0.0
        assert row_b.group_user == row_b.group_item == 0.0

    # group parameters never move under the full mask-off run
    fresh = ModelParams(ds.num_users, ds.num_items, hp_masked)
    for name in ("user_group_emb", "item_group_emb", "group_proj_user_w",
                 "group_proj_item_w", "bilinear_u", "bilinear_v",
                 "fusion_ug", "fusion_vg"):
        assert np.array_equal(params.by_name()[name].values, fresh.by_name()[name].values)

    hp_on = dataclasses.replace(hp, alpha=0.1)
    term_activation = {}
    for variant in ("dbrec-u", "dbrec-i"):
        p = ModelParams(ds.num_users, ds.num_items, hp_on)
        run = train(ds, TrainConfig(hp=hp_on, epochs=1, pretrain_epochs=0, eval_every=0),
                    p, variant=variant, epochs=1)
        row = run.log[0]
        term_activation[variant] = (
            row.hier_user > 0, row.group_user > 0, row.hier_item > 0, row.group_item > 0
        )
    assert term_activation["dbrec-u"] == (True, True, False, False)
    assert term_activation["dbrec-i"] == (False, False, True, True)
    announce("reductions (masked run == basic to 1e-12; variant terms exact)")


def test_checkpoint_roundtrip_and_resume(tmp_path):
    """Byte-identical save/load/save; resume replays the uninterrupted run."""
    pairs, _, _ = planted_blocks(num_users=30, num_items=40, p_in=0.45, p_out=0.05, seed=1)
    ds = dataset_from_pairs(pairs, seed=1)
    hp = HyperParams(d=8, d_g=4, k=2, alpha=0.1, lr=3e-3, batch_size=64,
                     hidden_uv=(16, 8), hidden_ug=(16, 8), hidden_vg=(16, 8),
                     hidden_hier=(16, 16), seed=3)
    cfg = TrainConfig(hp=hp, epochs=6, pretrain_epochs=0, eval_every=0)

    params_full = ModelParams(ds.num_users, ds.num_items, hp)
    full = train(ds, cfg, params_full, variant="dbrec", epochs=6)

    params_half = ModelParams(ds.num_users, ds.num_items, hp)
    half = train(ds, cfg, params_half, variant="dbrec", epochs=3, checkpoint_dir=tmp_path)

    first = tmp_path / "last.ckpt"
    second = tmp_path / "roundtrip.ckpt"
    ckpt = load_checkpoint(first)
    save_checkpoint(second, model_from_checkpoint(ckpt), variant=ckpt.variant,
                    epoch=ckpt.epoch, meta=ckpt.meta)
    assert first.read_bytes() == second.read_bytes()

    resumed_params = model_from_checkpoint(load_checkpoint(first))
    resumed = train(ds, cfg, resumed_params, variant="dbrec", epochs=6, start_epoch=3)
    full_losses = [(r.cf, r.hier_user, r.hier_item, r.group_user, r.group_item) for r in full.log]
    stitched = [(r.cf, r.hier_user, r.hier_item, r.group_user, r.group_item)
                for r in half.log + resumed.log]
    assert full_losses == stitched
    for name, p in params_full.by_name().items():
        assert np.array_equal(p.values, resumed_params.by_name()[name].values), name
    announce("checkpoint round-trip and resume (bitwise)")
