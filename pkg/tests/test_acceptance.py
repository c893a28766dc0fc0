"""Acceptance criteria, one test each; the terminal summary prints a PASS/FAIL line per criterion."""

import io
import math
import struct
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from odxu import dec, gbdt, metrics, nn, payload, pipeline, store, uq
from odxu.config import RunConfig
from odxu.dec import DecModel
from odxu.gbdt import BoostParams, TreeEnsemble
from odxu.payload import PayloadSet
from odxu.stopping import EarlyStop, halt_epoch
from odxu.synth import blob_corpus, blob_means, build_packet, corpus_packets, translate_means

from test_dec import _fd_instance, _loss, _rel
from test_metrics import pairwise_auroc
from test_stopping import GRID, scan_halt
from test_uq import _oracle_phi, _random_ensemble, _swap


# 1. numerical kernels

def _check_split_gain():
    assert abs(gbdt.split_gain(2.0, 2.0, -1.0, 1.0, lam=1.0, gamma=0.0) - 19 / 24) <= 1e-12
    rng = np.random.default_rng(0)
    for _ in range(200):
        g, h, gamma = rng.uniform(-10, 10), rng.uniform(0.1, 10), rng.uniform(0, 5)
        assert abs(gbdt.split_gain(g, h, g, h, lam=0.0, gamma=gamma) + gamma) <= 1e-12


def _check_dec_gradients():
    worst, slowest = 0.0, 0.0
    for seed in range(5):
        t0 = time.perf_counter()
        enc, U, X, y, P = _fd_instance(seed)
        n_params = enc[0].W.size + enc[0].b.size + U.size
        assert n_params <= 30
        _, grads, dU = dec.dec_loss_grads(enc, U, X, P, y)
        for arr, g in ((enc[0].W, grads[0][0]), (enc[0].b, grads[0][1]), (U, dU)):
            for i in np.ndindex(arr.shape):
                old = arr[i]
                arr[i] = old + 1e-5
                up = _loss(enc, U, X, y, P)
                arr[i] = old - 1e-5
                dn = _loss(enc, U, X, y, P)
                arr[i] = old
                worst = max(worst, _rel(g[i], (up - dn) / 2e-5))
        slowest = max(slowest, time.perf_counter() - t0)
    assert worst <= 1e-4, f"worst relative gradient error {worst:.2e}"
    assert slowest < 5
    return worst


def _check_shapley():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        d, k = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        model = _random_ensemble(rng, d, int(rng.integers(1, 4)), k)
        x = rng.integers(0, 4, d).astype(float)
        bg = rng.integers(0, 4, size=(int(rng.integers(1, 4)), d)).astype(float)
        c = int(rng.integers(k))
        row = uq.exact_shap(model, x, bg, c)
        worst = max(worst, abs(row.efficiency_gap))
        used = {int(f) for _, t in model.trees for f in t.feature[t.feature >= 0]}
        assert all(row.phi[i] == 0.0 for i in set(range(d)) - used)
        parts = [TreeEnsemble([tr], k, d, 0.0) for tr in model.trees]
        whole = uq.exact_shap(TreeEnsemble(list(model.trees), k, d, 0.0), x, bg, c, output="margin").phi
        summed = sum(uq.exact_shap(p, x, bg, c, output="margin").phi for p in parts)
        worst = max(worst, float(np.max(np.abs(whole - summed))))
        # symmetry: pair each tree with its 0<->1 swapped copy
        sym = TreeEnsemble(model.trees + [(cc, _swap(t, 0, 1)) for cc, t in model.trees], k, d, model.base_score)
        xs, bs = x.copy(), bg.copy()
        xs[1] = xs[0]
        bs[:, 1] = bs[:, 0]
        srow = uq.exact_shap(sym, xs, bs, c)
        worst = max(worst, abs(srow.phi[0] - srow.phi[1]))
    assert worst <= 1e-9, f"axiom residual {worst:.2e}"

    rng = np.random.default_rng(11)
    X = rng.normal(size=(300, 6))
    y = (X[:, 0] + X[:, 1] * X[:, 2] > 0).astype(int) + (X[:, 3] > 1)
    model = gbdt.train(X, y, BoostParams(rounds=4, max_depth=4))
    plan = uq.ShapPlan(model)
    for x in X[5:15]:
        for c in range(3):
            assert np.array_equal(uq.exact_shap(model, x, X[:5], c, plan=plan).phi, _oracle_phi(model, x, X[:5], c))
    assert time.perf_counter() - t0 < 60
    return worst


def _check_auroc():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        s = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], n) if rng.random() < 0.5 else rng.random(n)
        y = rng.random(n) < rng.uniform(0.1, 0.9)
        y[0], y[-1] = True, False
        assert metrics.auroc(s, y) == pairwise_auroc(s.tolist(), y.tolist())


def test_criterion_1_numerical_kernels(criterion):
    with criterion(1, "numerical kernels") as note:
        _check_split_gain()
        note("split gain ok")
        note(f"DEC grad rel err {_check_dec_gradients():.1e}")
        note(f"Shapley axiom residual {_check_shapley():.1e}, oracle bitwise")
        _check_auroc()
        note("AUROC = pairwise on 100 sets")


# 2. format round-trips

def test_criterion_2_format_round_trips(criterion):
    with criterion(2, "format round-trips") as note:
        a = build_packet(b"GET /", proto=payload.IPPROTO_TCP, dport=80, ts=(1_600_000_000, 5))
        b = build_packet(b"\x00\x01\x02", proto=payload.IPPROTO_UDP, dport=53, ts=(1_600_000_001, 6))
        buf = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
        for p in (a, b):
            buf += struct.pack("<IIII", p.ts_sec, p.ts_usec, len(p.link_bytes), len(p.link_bytes)) + p.link_bytes
        got = list(payload.parse_pcap(io.BytesIO(buf)))
        assert got == [a, b]
        rows = [payload.extract_payload(p) for p in got]
        assert rows[0][0] == b"GET /".ljust(1500, b"\x00") and rows[1][0][:4] == b"\x00\x01\x02\x00"
        note("pcap parses to constructed packets")

        rng = np.random.default_rng(0)
        X = rng.normal(size=(80, 6))
        y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0)
        models = {
            "autoencoder": (nn.AutoencoderSpec(6, (5,), 3, 0.1).build(rng), lambda m, Z: m.reconstruct(Z)),
            "fcnn": (nn.FcnnClassifier(nn.build_mlp([6, 8, 3], ["relu", "softmax"], rng)), lambda m, Z: m.predict_proba(Z)),
            "encoder": (nn.build_mlp([6, 4, 3], ["relu", "linear"], rng), lambda m, Z: nn.forward(m, Z)),
            "dec": (DecModel(nn.build_mlp([6, 4, 3], ["relu", "linear"], rng), rng.normal(size=(3, 3))), lambda m, Z: m.predict_proba(Z)),
            "gbdt": (gbdt.train(X, y, BoostParams(rounds=5), n_classes=3), lambda m, Z: m.predict_proba(Z)),
        }
        Z = rng.normal(size=(100, 6))
        for kind, (model, run) in models.items():
            back = store.from_bytes(store.to_bytes(model), kind)
            assert np.array_equal(run(back, Z), run(model, Z)), kind
        data = PayloadSet(rng.integers(0, 256, (100, 1500), dtype=np.uint8), rng.integers(0, 3, 100), ["Benign", "a", "b"])
        back = store.from_bytes(store.to_bytes(data), "payload")
        assert np.array_equal(back.X, data.X) and np.array_equal(back.y, data.y)
        note("all containers identical on 100 inputs")


# 3. synthetic end to end

E2E_CFG = {"ae": {"max_epochs": 15, "eta": 10}, "dec": {"max_epochs": 15, "eta": 10}, "fcnn": {"max_epochs": 5}}


@pytest.mark.slow
def test_criterion_3_end_to_end(criterion):
    with criterion(3, "synthetic end to end") as note, threadpool_limits(1):
        t0 = time.perf_counter()
        corpus = blob_corpus(3000, 3, seed=7)
        packets, rules = corpus_packets(corpus)
        fh = io.BytesIO()
        payload.write_pcap(packets, fh)
        records = payload.label_packets(payload.extract_all(payload.parse_pcap(io.BytesIO(fh.getvalue()))), payload.parse_rules(rules))
        data = PayloadSet.from_records(records)
        names = np.array(data.classes)[data.y]
        assert np.array_equal(data.X, corpus.X) and np.array_equal(names, np.array(corpus.classes)[corpus.y])
        cfg = RunConfig.from_dict(E2E_CFG)
        _, man = pipeline.run_pipeline(data, cfg)
        elapsed = time.perf_counter() - t0
        m = man.metrics
        note(f"pipeline acc {m['multiclass_accuracy']:.4f} in {elapsed:.0f} s")
        assert m["multiclass_accuracy"] >= 0.95
        assert elapsed < 180
        assert m["multiclass_errors"] == m["binary_errors"] + m["wrong_type_errors"]
        assert man.leakage() == set()
        fm = pipeline.run_fcnn_baseline(data, cfg)
        note(f"FcNN acc {fm.metrics['multiclass_accuracy']:.4f}")
        assert fm.metrics["multiclass_accuracy"] >= 0.90
        f = fm.metrics
        assert f["multiclass_errors"] == f["binary_errors"] + f["wrong_type_errors"]


# 4. transfer directionality

TRANSFER_CFG = {
    "ae": {"hidden": [128, 32], "max_epochs": 15, "eta": 5},
    "dec": {"max_epochs": 15, "eta": 5},
    "clf": {"rounds": 30},
    "transfer": {"portions": [0.10, 0.25, 0.50, 0.75]},
}


@pytest.mark.slow
def test_criterion_4_transfer(criterion):
    with criterion(4, "transfer directionality") as note, threadpool_limits(1):
        triples = pipeline.mode_triples()
        assert len(triples) == 8 and sum(not pipeline.scenario_is_valid(*t) for t in triples) == 2
        base = blob_means(3, 11)
        source = blob_corpus(1500, 3, seed=1, means=base, noise=120)
        target = blob_corpus(3000, 3, seed=2, means=translate_means(base, 60, seed=5), noise=250)
        cfg = RunConfig.from_dict(TRANSFER_CFG)
        fitted, _ = pipeline.run_pipeline(source, cfg)
        rows, _ = pipeline.run_grid(pipeline.SourceModels.from_fitted(fitted), target, cfg)
        grid = {r[0]: dict(zip(pipeline.CASES, r[1:])) for r in rows}
        note(f"Case 6 @50 {grid[50][6]:.4f} vs Case 2 @10 {grid[10][2]:.4f}")
        assert grid[50][6] >= grid[10][2]
        for case in pipeline.CASES:
            accs = [grid[p][case] for p in (10, 25, 50, 75)]
            drops = [a - b for a, b in zip(accs, accs[1:])]
            assert max(drops) <= 0.005, f"Case {case} not monotone: {accs}"
        note("all cases monotone within .005")


# 5. uncertainty directionality

UQ_SEED = 0
UQ_CFG = {
    "seed": UQ_SEED,
    "ae": {"hidden": [128, 32], "max_epochs": 15, "eta": 5},
    "dec": {"max_epochs": 15, "eta": 5},
    "meta": {"background": 8},
}


def uq_corpus(seed):
    # the unknown class sits halfway toward benign traffic; some dos rows imitate benign payloads
    return blob_corpus(
        6000, 4, seed=3 + seed, noise=150, class_names=["Benign", "dos", "scan", "slowloris"],
        weights=[4, 2, 2, 1], mimic={1: (0, 0.4, 0.0), 3: (0, 1.0, 0.5)},
    )


@pytest.mark.slow
def test_criterion_5_uncertainty(criterion):
    with criterion(5, "uncertainty directionality") as note, threadpool_limits(1):
        rng = np.random.default_rng(0)
        for n in (100, 1000, 4000):
            s = rng.random(n)
            tp = metrics.tp_at_tn(np.r_[s, s], [0] * n + [1] * n)
            assert abs(tp - 0.05) <= 0.02
        note("identical-distribution TP@TN within .05 +- .02")
        mis, osr = pipeline.run_uq_tasks(uq_corpus(UQ_SEED), RunConfig.from_dict(UQ_CFG), "slowloris")
        a_mis = {m: r["auroc"] for m, r in mis.metrics.items()}
        a_osr = {m: r["auroc"] for m, r in osr.metrics.items()}
        note("misclf " + " ".join(f"{m}={v:.3f}" for m, v in a_mis.items()))
        note("osr " + " ".join(f"{m}={v:.3f}" for m, v in a_osr.items()))
        assert all(v > 0.5 for v in a_osr.values())
        best_score = max(a_mis["confidence"], a_mis["entropy"])
        assert max(a_mis[m] for m in uq.META_VARIANTS) > best_score


# 6. early stopping

def _scripted_sequences():
    rng = np.random.default_rng(0)
    seqs = []
    for _ in range(300):
        n = int(rng.integers(1, 80))
        seqs.append(rng.random(n).tolist())
        steps = rng.choice([0.0, 4e-4, 5e-4, 6e-4, 1e-3, 5e-3, 1e-2, 2e-2], n)
        seqs.append((1.0 - np.cumsum(steps)).tolist())
    seqs.append([1.0] * 25)
    seqs.append([1.0 - 0.0005 * i for i in range(40)])
    seqs.append([1.0 - 0.01 * i for i in range(40)])
    return seqs


def test_criterion_6_early_stopping(criterion):
    with criterion(6, "early stopping") as note:
        seqs = _scripted_sequences()
        for eta, delta in GRID:
            for seq in seqs:
                assert halt_epoch(seq, EarlyStop(eta, delta)) == scan_halt(seq, eta, delta)
        note(f"{len(seqs)} sequences x {len(GRID)} (eta, delta) rules")
        assert math.isclose(halt_epoch([1.0] * 25, EarlyStop(10, 5e-4)), 10)
