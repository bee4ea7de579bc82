"""End-to-end acceptance criteria, one test per criterion.

Criteria 4-7 train desk-scale models (200 scenes x 8 variants, 64x64, 60
epochs).  Checkpoints are cached under ``$ILLUMNORM_CACHE`` (default
``~/.cache/illumnorm``); a cold run trains 20 models and takes roughly three
hours on one CPU core, a warm run about 50 minutes.
"""

import statistics
import time

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from conftest import ALL_SEAT_LABELS, brute_force_ssim, make_manifest, record_criterion
from illumnorm.cli import main as cli_main
from illumnorm.dataset import SEAT_POLICY, Label, TripletSampler, hamming, sample_pair
from illumnorm.evaluation import invariance_score, multi_seed_report, triplet_violation_rate
from illumnorm.experiments import DESK_ARCH, DESK_TRAIN, DeskRuns, desk_data
from illumnorm.latent_index import build_index, embed_images, knn, predict_labels
from illumnorm.model import ArchConfig, build_model
from illumnorm.ssim import DEFAULT_SSIM, recon_distance, ssim
from illumnorm.training import TrainConfig, train


@pytest.fixture(scope="module")
def desk():
    train_m, test_m = desk_data()
    return train_m, test_m, DeskRuns(train_m)


def test_criterion_1_ssim_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(50):
        a, b = rng.random((16, 16, 1)), rng.random((16, 16, 1))
        worst = max(worst, abs(ssim(a, b) - brute_force_ssim(a, b)))
    x = rng.random((16, 16, 1))
    self_err = abs(ssim(x, x) - 1.0)
    c1 = DEFAULT_SSIM.c1
    closed_err = abs(recon_distance(np.zeros((16, 16, 1)), np.ones((16, 16, 1))) - (1 - c1 / (1 + c1)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and self_err <= 1e-6 and closed_err <= 1e-6 and elapsed < 60
    record_criterion(1, "SSIM oracle", ok, f"max |lib-oracle|={worst:.2e}, |ssim(x,x)-1|={self_err:.1e}, closed form err={closed_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    a0, b0 = rng.random((16, 16, 1)), rng.random((16, 16, 1))
    a = torch.tensor(a0, requires_grad=True)
    recon_distance(a, torch.tensor(b0)).backward()
    grad = a.grad.numpy()
    h = 1e-4
    worst = 0.0
    for y, x in rng.integers(0, 16, size=(24, 2)):
        ap, am = a0.copy(), a0.copy()
        ap[y, x, 0] += h
        am[y, x, 0] -= h
        fd = (recon_distance(ap, b0) - recon_distance(am, b0)) / (2 * h)
        worst = max(worst, abs(grad[y, x, 0] - fd) / max(abs(fd), abs(grad[y, x, 0]), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and elapsed < 60
    record_criterion(2, "gradient check", ok, f"24 coordinates, max relative error={worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_3_sampler_invariants():
    t0 = time.perf_counter()
    m = make_manifest(ALL_SEAT_LABELS * 2, n=8, size=16)
    rng = np.random.default_rng(300)
    counts = np.zeros((8, 8), dtype=np.int64)
    for _ in range(10_000):
        p = sample_pair(m.scenes[5], rng)
        counts[p.a, p.b] += 1
    same = int(np.trace(counts))
    p_value = chisquare(counts[~np.eye(8, dtype=bool)]).pvalue
    sampler = TripletSampler(m, SEAT_POLICY)
    anchors = sampler.anchors
    bad = 0
    for _ in range(10_000):
        t = sampler.sample(anchors[int(rng.integers(len(anchors)))], rng)
        la, lp, ln = (m.scene(s.scene_id).label for s in t.members)
        if la.is_all_empty or t.anchor.scene_id == t.positive.scene_id or lp != la:
            bad += 1
        elif hamming(la, ln) != 1 or ln.is_all_empty:
            bad += 1
    excluded = Label(seats=(0, 0, 0)) not in {m.scene(k).label for k in anchors}
    elapsed = time.perf_counter() - t0
    ok = same == 0 and p_value > 0.01 and bad == 0 and excluded and elapsed < 60
    record_criterion(3, "sampler invariants", ok, f"a=b draws={same}, chi-square p={p_value:.3f}, bad triplets={bad}/10000, {elapsed:.1f}s")
    assert ok


def test_criterion_4_illumination_removal(desk):
    train_m, test_m, runs = desk
    recon, inputs = [], []
    for seed in (0, 1, 2):
        rs, ins = invariance_score(runs.model("tae", seed), test_m)
        recon.append(rs)
        inputs.append(ins)
    gap = statistics.median(r - i for r, i in zip(recon, inputs))
    med = statistics.median(recon)
    ok = gap >= 0.10 and med >= 0.90
    per_seed = ", ".join(f"{r:.3f}/{i:.3f}" for r, i in zip(recon, inputs))
    record_criterion(4, "illumination removal", ok, f"test recon/input per seed: {per_seed}; median recon={med:.3f}, median gap={gap:.3f}")
    assert ok


def test_criterion_5_ordering(desk, tmp_path):
    train_m, test_m, runs = desk
    report = multi_seed_report(
        DESK_ARCH, DESK_TRAIN, train_m, test_m, seeds=range(5), setups=("ae", "vae", "tae", "tae-v"), cache_dir=runs.cache_dir
    )
    report.save(tmp_path / "report.json")
    mean = {r.setup: r.mean for r in report.rows}
    checks = {
        "TAE>=AE": mean["tae"] >= mean["ae"],
        "TAE>=VAE": mean["tae"] >= mean["vae"],
        "TAE>=TAE-V": mean["tae"] >= mean["tae-v"],
    }
    ok = all(checks.values())
    means = ", ".join(f"{k.upper()}={100 * v:.1f}%" for k, v in mean.items())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(5, "accuracy ordering", ok, f"5-seed means {means}" + (f"; violated: {failed}" if failed else ""))
    assert ok


def test_criterion_6_triplet_margin(desk):
    train_m, test_m, runs = desk
    trained, initial = [], []
    for seed in (0, 1, 2):
        arch, cfg = runs.configs("tae", seed)
        trained.append(triplet_violation_rate(runs.model("tae", seed), test_m, cfg.margin, n_triplets=1000, seed=seed))
        initial.append(triplet_violation_rate(build_model(arch, seed=cfg.seed), test_m, cfg.margin, n_triplets=1000, seed=seed))
    med_t, med_i = statistics.median(trained), statistics.median(initial)
    ok = med_t < 0.25 and med_t < med_i
    record_criterion(6, "held-out triplet margin", ok, f"violation trained={trained} (median {med_t:.3f}) vs init={initial} (median {med_i:.3f})")
    assert ok


def brute_knn(emb, sids, vids, q, k):
    rows = sorted(range(len(emb)), key=lambda i: (float(np.sum((emb[i] - q) ** 2)), int(sids[i]), int(vids[i])))
    return rows[:k]


def test_criterion_7_retrieval(desk):
    train_m, test_m, runs = desk
    model = runs.model("tae", 0)
    index = build_index(model, train_m)
    rng = np.random.default_rng(700)
    test_emb = embed_images(model, np.concatenate([s.images() for s in test_m.scenes[:10]]))
    mismatches = 0
    for i in range(100):
        q = test_emb[i % len(test_emb)] if i % 2 else rng.normal(size=index.dim) * index.embeddings.std(axis=0)
        got = [(e.scene_id, e.variant_id) for e in knn(index, q, 5)]
        want = [(int(index.scene_ids[j]), int(index.variant_ids[j])) for j in brute_knn(index.embeddings, index.scene_ids, index.variant_ids, q, 5)]
        mismatches += got != want
    hits = total = 0
    for s in train_m.scenes:
        pred = predict_labels(index, model, s.images())
        hits += sum(p == s.label for p in pred)
        total += s.n
    ok = mismatches == 0 and hits == total
    record_criterion(7, "retrieval exactness", ok, f"knn mismatches={mismatches}/100, self-retrieval={hits}/{total}")
    assert ok


def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["gen-data", "--out", str(data), "--scenes", "24", "--variants", "4", "--seed", "8"]) == 0
    common = ["--data", str(data), "--variant", "tae", "--seed", "5", "--epochs", "3", "--lr", "1e-3"]
    for name in ("r1", "r2"):
        assert cli_main(["train", *common, "--out", str(tmp_path / name)]) == 0

    def history(name):
        rows = (tmp_path / name / "history.csv").read_text().splitlines()[1:]
        return np.array([[float(v) for v in r.split(",")[1:5]] for r in rows])

    loss_diff = float(np.max(np.abs(history("r1") - history("r2"))))
    ev = ["evaluate", "--data", str(data), "--setups", "tae,ae", "--seeds", "2", "--epochs", "2", "--lr", "1e-3"]
    for name in ("e1", "e2"):
        assert cli_main([*ev, "--out", str(tmp_path / name)]) == 0
    same_report = (tmp_path / "e1" / "report.json").read_bytes() == (tmp_path / "e2" / "report.json").read_bytes()
    ok = loss_diff <= 1e-6 and same_report
    record_criterion(8, "determinism", ok, f"max per-epoch loss difference={loss_diff:.1e}, reports identical={same_report}")
    assert ok


def test_criterion_9_loss_decomposition():
    m = make_manifest(ALL_SEAT_LABELS[1:17] * 2, n=4, size=32, seed=9)
    cfg = TrainConfig(epochs=3, batch_size=8, lr=1e-3)
    worst, steps = 0.0, 0
    for variant in ("tae", "vae", "ae"):
        _, hist = train(m, ArchConfig(input_shape=(32, 32, 1), widths=(8, 16, 16), variant=variant), cfg)
        for s in hist.steps:
            worst = max(worst, abs(s["total"] - (s["recon"] + s["triplet"] + s["kl_weight"] * s["kl"])))
            steps += 1
    ok = worst <= 1e-9
    record_criterion(9, "loss decomposition", ok, f"{steps} logged steps (tae, vae, ae), max |total - sum of terms|={worst:.1e}")
    assert ok

