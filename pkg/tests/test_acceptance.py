"""Acceptance criteria 1-10.

Each test prints one ``[PASS]``/``[FAIL]`` line through the ``report`` fixture;
the lines are repeated in the terminal summary.  Criteria 6-8 share one
desk-scale pre-training run (about 8 minutes on one CPU core).
"""

import filecmp
import itertools
import math
import time

import numpy as np
import pytest

from mmalign import autodiff as ad
from mmalign import encoders as E
from mmalign import losses as L
from mmalign.cli import main as cli_main
from mmalign.encoders import DosCurve, embed_all
from mmalign.evalkit import dos_mae, topk_retrieval
from mmalign.kernels import threeway_sim
from mmalign.screening import best_of_n_curve, build_index, index_from_embeddings, load_index, query_nearest, save_index
from mmalign.synthdata import SplitSpec, generate_dataset, split_dataset
from mmalign.trainer import FinetuneConfig, finetune, load_checkpoint, preset, pretrain, save_checkpoint, scratch_encoder

import oracles as O

TAUS = (0.07, 0.5, 1.0)
LAMS = (0.0, 0.005, 0.1)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


# -- criterion 1 ---------------------------------------------------------------------------


def test_c1_loss_oracle_equivalence(report):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = dict.fromkeys(["clip", "allpairs", "anchored", "tensorclip", "barlow3d"], 0.0)
    for i in range(100):
        N, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        A, B, C = rng.normal(size=(3, N, d))
        tau, lam = TAUS[i % 3], LAMS[(i // 3) % 3]
        worst["clip"] = max(worst["clip"], rel(float(L.clip_loss(A, B, tau)), O.clip_oracle(A, B, tau)))
        worst["allpairs"] = max(
            worst["allpairs"], rel(float(L.allpairs_clip_loss([A, B, C], tau)), O.allpairs_oracle([A, B, C], tau))
        )
        worst["anchored"] = max(
            worst["anchored"], rel(float(L.anchored_clip_loss(A, [B, C], tau)), O.anchored_oracle(A, [B, C], tau))
        )
        worst["tensorclip"] = max(
            worst["tensorclip"], rel(float(L.tensor_clip_loss(A, B, C, tau)), O.tensor_clip_oracle(A, B, C, tau))
        )
        worst["barlow3d"] = max(
            worst["barlow3d"], rel(float(L.barlow3d_loss(A, B, C, lam)), O.barlow_oracle(A, B, C, lam))
        )
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-9 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    report("C1 loss oracle equivalence (100 instances, rel 1e-9, <30s)", ok, detail)
    assert ok


# -- criterion 2 ---------------------------------------------------------------------------


def _loss_fns():
    return {
        "clip": lambda P: L.clip_loss(P["a"], P["b"], 0.3),
        "allpairs": lambda P: L.allpairs_clip_loss([P["a"], P["b"], P["c"]], 0.3),
        "anchored": lambda P: L.anchored_clip_loss(P["a"], [P["b"], P["c"]], 0.3),
        "tensorclip": lambda P: L.tensor_clip_loss(P["a"], P["b"], P["c"], 0.3),
        "barlow3d": lambda P: L.barlow3d_loss(P["a"], P["b"], P["c"], 0.1),
    }


def _max_grad_error(fn, params):
    graph = ad.LossGraph(fn, params)
    graph.forward()
    worst = 0.0
    for name, value in params.items():
        num = O.central_difference(lambda x: float(fn({**params, name: x})), value, h=1e-4)
        worst = max(worst, O.rel_err(graph.gradients[name], num))
    return worst


def _tiny_payloads(kind, rng):
    if kind == "crystal":
        out = []
        for _ in range(2):
            n = int(rng.integers(2, 9))
            src, dst = np.nonzero(~np.eye(n, dtype=bool))
            keep = rng.uniform(size=src.size) < 0.5
            out.append(E.CrystalGraph(rng.normal(size=(n, 4)), src[keep], dst[keep], rng.normal(size=(keep.sum(), 3))))
        return out, E.init_crystal(6, 4, hidden=6, seed=int(rng.integers(1 << 30)))
    if kind == "dos":
        out = []
        for _ in range(2):
            T = int(rng.integers(2, 9))
            out.append(DosCurve(np.sort(rng.uniform(-6, 6, T)), rng.uniform(0, 2, T)))
        return out, E.init_dos(8, seed=int(rng.integers(1 << 30)))
    grids = [E.DensityGrid(rng.uniform(size=(4, 4, 4))) for _ in range(2)]
    return grids, E.init_density(6, grid_size=4, channels=(2, 3), seed=int(rng.integers(1 << 30)))


def test_c2_gradient_correctness(report):
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    loss_worst = dict.fromkeys(_loss_fns(), 0.0)
    for _ in range(20):
        # N >= 3: with two rows every centered, normalized column is +-1/sqrt(2),
        # so the Barlow loss is locally constant and relative error is undefined
        N, d = int(rng.integers(3, 7)), int(rng.integers(2, 7))
        params = {k: rng.normal(size=(N, d)) for k in "abc"}
        for name, fn in _loss_fns().items():
            loss_worst[name] = max(loss_worst[name], _max_grad_error(fn, params))
    enc_worst = {"crystal": 0.0, "dos": 0.0, "density": 0.0}
    for _ in range(20):
        for kind in enc_worst:
            payloads, p = _tiny_payloads(kind, rng)
            probe = rng.normal(size=(len(payloads), p.embed_dim))

            def fn(W, payloads=payloads, p=p, probe=probe):
                return ad.tsum(E.FORWARD[p.kind](payloads, W, p) * probe)

            enc_worst[kind] = max(enc_worst[kind], _max_grad_error(fn, p.weights))
    elapsed = time.perf_counter() - t0
    ok = max(loss_worst.values()) < 1e-4 and max(enc_worst.values()) < 1e-3 and elapsed < 120
    detail = (
        "losses " + ", ".join(f"{k} {v:.1e}" for k, v in loss_worst.items())
        + "; encoders " + ", ".join(f"{k} {v:.1e}" for k, v in enc_worst.items())
        + f"; {elapsed:.1f}s"
    )
    report("C2 gradient correctness (20 instances each, 1e-4 losses / 1e-3 encoders, <2min)", ok, detail)
    assert ok


# -- criterion 3 ---------------------------------------------------------------------------

E2 = np.eye(2)
STATED_TENSORCLIP = 1.487338


def test_c3_closed_form_checkpoints(report):
    clip = float(L.clip_loss(E2, E2, 1.0))
    tensor = float(L.tensor_clip_loss(E2, E2, E2, 1.0))
    z = np.array([[2.0], [-1.0], [-1.0]])
    barlow = float(L.barlow3d_loss(z, z, z))
    oracle_tensor = O.tensor_clip_oracle(E2, E2, E2, 1.0)
    checks = {
        "clip": abs(clip - 0.626523) <= 1e-6,
        "tensorclip": abs(tensor - STATED_TENSORCLIP) <= 1e-6,
        "barlow3d": abs(barlow - 0.350170) <= 1e-6,
    }
    detail = (
        f"clip {clip:.7f} vs 0.626523; barlow3d {barlow:.7f} vs 0.350170; "
        f"tensorclip {tensor:.10f} vs stated {STATED_TENSORCLIP} (|diff| {abs(tensor - STATED_TENSORCLIP):.2e}); "
        f"loop oracle and 2*log(1+3/e) both give {oracle_tensor:.10f}"
    )
    report("C3 closed-form checkpoints (+-1e-6)", all(checks.values()), detail)
    # the two values that agree with their derivation must hold; the stated
    # TensorCLIP figure is checked separately below
    assert checks["clip"] and checks["barlow3d"]
    assert abs(tensor - 2 * math.log(1 + 3 / math.e)) < 1e-12
    assert abs(tensor - oracle_tensor) < 1e-12


@pytest.mark.xfail(
    strict=True,
    reason="exact value 2*log(1+3/e) = 1.4873367613 lies 1.24e-6 below the stated 1.487338",
)
def test_c3_tensorclip_matches_stated_value():
    assert abs(float(L.tensor_clip_loss(E2, E2, E2, 1.0)) - STATED_TENSORCLIP) <= 1e-6


# -- criterion 4 ---------------------------------------------------------------------------


def test_c4_structural_counts(report, monkeypatch):
    rng = np.random.default_rng(404)
    real_clip = L.clip_loss
    calls = []

    def counting(*a, **k):
        calls.append(1)
        return real_clip(*a, **k)

    monkeypatch.setattr(L, "clip_loss", counting)
    counts_ok = True
    for n in (2, 3, 4, 5):
        batches = list(rng.normal(size=(n, 4, 3)))
        calls.clear()
        L.allpairs_clip_loss(batches)
        counts_ok &= len(calls) == (n * n - n) // 2
        calls.clear()
        L.anchored_clip_loss(batches[0], batches[1:])
        counts_ok &= len(calls) == n - 1
    monkeypatch.undo()

    # instrumented oracle: size of every per-query denominator
    per_query_ok = True
    widths = []
    real_lse = ad.logsumexp

    def spy(x, axis=-1, *a, **k):
        widths.append(x.shape[axis])
        return real_lse(x, axis, *a, **k)

    for N in (2, 3, 5, 7):
        A, B, C = rng.normal(size=(3, N, 4))
        counter = []
        O.tensor_clip_oracle(A, B, C, 0.5, counter=counter)
        per_query_ok &= len(counter) == 3 * N and all(c == N * N for c in counter)
        widths.clear()
        monkeypatch.setattr(ad, "logsumexp", spy)
        L.tensor_clip_loss(A, B, C, 0.5)
        monkeypatch.undo()
        per_query_ok &= widths == [N * N] * 3
    ok = bool(counts_ok and per_query_ok)
    report("C4 structural counts (pairwise terms, N^2 TensorCLIP denominators)", ok,
           f"pair counts {'ok' if counts_ok else 'wrong'}; denominators {'N^2' if per_query_ok else 'wrong'}")
    assert ok


# -- criterion 5 ---------------------------------------------------------------------------


def test_c5_invariance_suite(report):
    rng = np.random.default_rng(505)
    worst = {"row-perm": 0.0, "arg-perm": 0.0, "row-scale": 0.0, "col-scale": 0.0, "crystal-perm": 0.0, "dos-perm": 0.0}
    for _ in range(30):
        N, d = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        A, B, C = rng.normal(size=(3, N, d))
        P = rng.permutation(N)
        pairs = [
            (L.clip_loss(A, B), L.clip_loss(A[P], B[P])),
            (L.allpairs_clip_loss([A, B, C]), L.allpairs_clip_loss([A[P], B[P], C[P]])),
            (L.anchored_clip_loss(A, [B, C]), L.anchored_clip_loss(A[P], [B[P], C[P]])),
            (L.tensor_clip_loss(A, B, C), L.tensor_clip_loss(A[P], B[P], C[P])),
            (L.barlow3d_loss(A, B, C), L.barlow3d_loss(A[P], B[P], C[P])),
        ]
        worst["row-perm"] = max([worst["row-perm"]] + [abs(float(x) - float(y)) / max(1.0, abs(float(x))) for x, y in pairs])
        base_t = float(L.tensor_clip_loss(A, B, C))
        base_s = threeway_sim(A[0], B[0], C[0])
        for p in itertools.permutations(range(3)):
            X = [(A, B, C)[i] for i in p]
            worst["arg-perm"] = max(worst["arg-perm"], abs(float(L.tensor_clip_loss(*X)) - base_t) / max(1.0, base_t))
            worst["arg-perm"] = max(worst["arg-perm"], abs(threeway_sim(X[0][0], X[1][0], X[2][0]) - base_s))
        s = rng.uniform(0.1, 10, size=(3, N, 1))
        A2, B2, C2 = A * s[0], B * s[1], C * s[2]
        worst["row-scale"] = max(
            worst["row-scale"],
            abs(float(L.clip_loss(A, B)) - float(L.clip_loss(A2, B2))),
            abs(float(L.allpairs_clip_loss([A, B, C])) - float(L.allpairs_clip_loss([A2, B2, C2]))),
            abs(float(L.anchored_clip_loss(A, [B, C])) - float(L.anchored_clip_loss(A2, [B2, C2]))),
            abs(float(L.tensor_clip_loss(A, B, C)) - float(L.tensor_clip_loss(A2, B2, C2))),
        )
        c = rng.uniform(0.1, 10, size=(3, 1, d))
        worst["col-scale"] = max(
            worst["col-scale"], abs(float(L.barlow3d_loss(A, B, C)) - float(L.barlow3d_loss(A * c[0], B * c[1], C * c[2])))
        )
    sample = generate_dataset(10, seed=55)
    for r in sample:
        g = r.crystal
        cp = E.init_crystal(16, g.node_features.shape[1], seed=int(rng.integers(1 << 30)))
        worst["crystal-perm"] = max(
            worst["crystal-perm"],
            float(np.max(np.abs(E.encode_crystal(g.permuted(rng.permutation(g.num_nodes)), cp) - E.encode_crystal(g, cp)))),
        )
        dp = E.init_dos(16, seed=int(rng.integers(1 << 30)))
        perm = rng.permutation(r.dos.energies.size)
        shuffled = DosCurve([0.0], [0.0])
        shuffled.energies, shuffled.values = r.dos.energies[perm], r.dos.values[perm]
        worst["dos-perm"] = max(
            worst["dos-perm"],
            float(np.max(np.abs(E.dos_forward([shuffled], dp.weights, dp).data[0] - E.encode_dos(r.dos, dp)))),
        )
    limits = {"row-perm": 1e-12, "arg-perm": 1e-12, "row-scale": 1e-9, "col-scale": 1e-9, "crystal-perm": 1e-6, "dos-perm": 1e-6}
    ok = all(worst[k] <= limits[k] for k in limits)
    report("C5 invariance suite", ok, ", ".join(f"{k} {worst[k]:.1e} (<= {limits[k]:.0e})" for k in limits))
    assert ok


# -- criteria 6-8: desk-scale run ---------------------------------------------------------------


@pytest.fixture(scope="module")
def desk():
    data = generate_dataset(2000, seed=0)
    train, _, test = split_dataset(data, SplitSpec(0.8, 0.1, 0.1, seed=0))
    cfg = preset("desk", loss_kind="anchored")
    t0 = time.perf_counter()
    ckpt = pretrain(cfg, train)
    return {"cfg": cfg, "train": train, "test": test, "ckpt": ckpt, "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_c6_desk_alignment_run(report, desk):
    ckpt, test = desk["ckpt"], desk["test"]
    first, last = ckpt.history[0]["loss"], ckpt.history[-1]["loss"]
    ec = embed_all(test.payloads("crystal"), ckpt.encoders["crystal"])
    ed = embed_all(test.payloads("dos"), ckpt.encoders["dos"])
    c2d, d2c = topk_retrieval(ec, ed, 5), topk_retrieval(ed, ec, 5)
    cfg = desk["cfg"]
    shape_ok = (len(test), cfg.d, cfg.batch_size, cfg.epochs, cfg.loss_kind) == (200, 32, 32, 100, "anchored")
    ok = shape_ok and last < first and c2d >= 0.25 and d2c >= 0.25 and desk["seconds"] < 900
    detail = (
        f"loss {first:.4f} -> {last:.4f}; top-5 crystal->DOS {c2d:.3f}, DOS->crystal {d2c:.3f} "
        f"(chance {5 / len(test):.3f}); {desk['seconds']:.0f}s"
    )
    report("C6 desk-scale alignment (loss falls, top-5 >= 0.25, <15min)", ok, detail)
    assert ok


@pytest.mark.slow
def test_c7_inverse_design_monotone(report, desk):
    ckpt, train, test = desk["ckpt"], desk["train"], desk["test"]
    idx = build_index(train, ckpt.encoders["crystal"])
    lookup = {r.id: r.dos for r in train}
    ns = [1, 5, 10, 50]
    violations, means = 0, np.zeros(len(ns))
    for r in test:
        res = best_of_n_curve(idx, r.dos, lookup, ckpt.encoders["dos"], ns, r.id)
        maes = [x.best_mae for x in res]
        violations += sum(b > a for a, b in zip(maes, maes[1:]))
        means += maes
    means /= len(test)
    ok = violations == 0
    detail = f"{len(test)} targets, {violations} violations; mean best MAE " + ", ".join(
        f"n={n}: {m:.4f}" for n, m in zip(ns, means)
    )
    report("C7 best-of-n nonincreasing per target over n in {1,5,10,50}", ok, detail)
    assert ok


@pytest.mark.slow
def test_c8_multimodal_advantage(report, desk):
    labeled = generate_dataset(1000, seed=5)
    t0 = time.perf_counter()
    pre, scratch = [], []
    for seed in range(3):
        cfg = FinetuneConfig(seed=seed)
        pre.append(finetune(desk["ckpt"], labeled, "gap", cfg).test_mae)
        scratch.append(finetune(scratch_encoder(desk["ckpt"]), labeled, "gap", cfg).test_mae)
    elapsed = time.perf_counter() - t0
    ok = np.mean(pre) <= np.mean(scratch) and elapsed < 1800
    detail = (
        f"pretrained {np.mean(pre):.4f} {[round(x, 4) for x in pre]} vs scratch {np.mean(scratch):.4f} "
        f"{[round(x, 4) for x in scratch]}; {elapsed:.0f}s"
    )
    report("C8 pretrained mean test MAE <= scratch (gap, 1000 labeled, 3 seeds)", ok, detail)
    assert ok


# -- criterion 9 ---------------------------------------------------------------------------


def test_c9_determinism_and_round_trips(report, tmp_path, desk):
    checks = {}
    gen = ["gen", "--n", "120", "--seed", "9"]
    checks["gen exit"] = cli_main([*gen, "--out", str(tmp_path / "g1")]) == 0 and cli_main([*gen, "--out", str(tmp_path / "g2")]) == 0
    checks["dataset bytes"] = filecmp.cmp(tmp_path / "g1" / "dataset.jsonl", tmp_path / "g2" / "dataset.jsonl", shallow=False)
    vox = sorted(p.name for p in (tmp_path / "g1" / "density").iterdir())
    checks["voxel bytes"] = all(
        filecmp.cmp(tmp_path / "g1" / "density" / v, tmp_path / "g2" / "density" / v, shallow=False) for v in vox
    )
    train = ["pretrain", "--data", str(tmp_path / "g1"), "--epochs", "3", "--warmup", "1", "--batch", "16", "--d", "8"]
    checks["pretrain exit"] = all(cli_main([*train, "--out", str(tmp_path / o)]) == 0 for o in ("p1", "p2"))
    checks["metric csv"] = filecmp.cmp(tmp_path / "p1" / "metrics.csv", tmp_path / "p2" / "metrics.csv", shallow=False)
    checks["checkpoint bytes"] = filecmp.cmp(tmp_path / "p1" / "checkpoint.mmck", tmp_path / "p2" / "checkpoint.mmck", shallow=False)

    ckpt = desk["ckpt"]
    save_checkpoint(ckpt, tmp_path / "desk.mmck")
    back = load_checkpoint(tmp_path / "desk.mmck")
    checks["checkpoint tensors"] = all(
        back.flat_params()[k].tobytes() == v.tobytes() for k, v in ckpt.flat_params().items()
    )
    probe = desk["test"].payloads("crystal")[:16]
    checks["checkpoint forward"] = (
        embed_all(probe, back.encoders["crystal"]).tobytes() == embed_all(probe, ckpt.encoders["crystal"]).tobytes()
    )
    save_checkpoint(back, tmp_path / "desk2.mmck")
    checks["checkpoint re-save"] = filecmp.cmp(tmp_path / "desk.mmck", tmp_path / "desk2.mmck", shallow=False)

    idx = build_index(desk["train"], ckpt.encoders["crystal"])
    save_index(idx, tmp_path / "lib.mmix")
    loaded = load_index(tmp_path / "lib.mmix")
    checks["index bytes"] = loaded.matrix.tobytes() == idx.matrix.tobytes() and loaded.ids == idx.ids

    rng = np.random.default_rng(909)
    exact = True
    for trial in range(5):
        M = 1000
        rand = index_from_embeddings([f"m{i}" for i in range(M)], rng.normal(size=(M, 32)))
        for _ in range(4):
            t = rng.normal(size=32)
            got = [int(i[1:]) for i, _ in query_nearest(rand, t, M)]
            exact &= got == O.topk_sort_oracle(rand.matrix.astype(np.float64), t, M)
    checks["query oracle M=1000"] = exact
    ok = all(checks.values())
    report("C9 determinism and round-trips", ok, ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


# -- criterion 10 ----------------------------------------------------------------------------


def test_c10_dos_mae_contract(report):
    flat = lambda h: DosCurve([-6.0, 6.0], [h, h])  # noqa: E731
    cases = [(dos_mae(flat(1.0), flat(1.0)).value, 0.0), (dos_mae(flat(1.0), flat(0.0)).value, 1.0),
             (dos_mae(flat(1.0), flat(0.5)).value, 0.5)]
    closed_ok = all(abs(v - e) <= 1e-9 for v, e in cases)

    rng = np.random.default_rng(1010)
    worst = 0.0
    for _ in range(100):
        # piecewise-linear curves with knots jittered around a 0.25 eV lattice
        e = np.arange(-9, 9 + 1e-9, 0.25)
        e = e + rng.uniform(-0.08, 0.08, e.size)
        e[0], e[-1] = -9, 9
        t, c = DosCurve(e, rng.uniform(0.05, 3, e.size)), DosCurve(e, rng.uniform(0, 3, e.size))
        worst = max(worst, abs(dos_mae(t, c).value - dos_mae(t, c, points=5001).value))
    synth = generate_dataset(60, seed=10)
    for a, b in zip(synth.records[:30], synth.records[30:]):
        worst = max(worst, abs(dos_mae(a.dos, b.dos).value - dos_mae(a.dos, b.dos, points=5001).value))
    ok = closed_ok and worst < 1e-3
    detail = "closed forms " + ", ".join(f"{v:.12f}" for v, _ in cases) + f"; max |501 - 5001| {worst:.2e}"
    report("C10 dos_mae contract (closed forms 1e-9, refinement 1e-3)", ok, detail)
    assert ok
