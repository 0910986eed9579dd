"""Acceptance gate: ten numbered criteria, one test each, every tolerance
and time budget stated inline. Criteria 7, 8, and 10 share one scaled
synthetic cohort driven through the real CLI in subprocesses."""

import json
import os
import time

import numpy as np
import pytest

import sliceseq.backend as B
import sliceseq.clustervit as CV
import sliceseq.diffusion as D
import sliceseq.formats as formats
import sliceseq.fusion as fusion
import sliceseq.metrics as metrics
import sliceseq.pipeline as PL
import sliceseq.prototypes as P
import sliceseq.tensor as T
from sliceseq.pipeline import RunConfig

from conftest import run_cli, write_cfg
from test_clustervit import naive_mha
from test_metrics import pairwise_auc
from test_prototypes import brute_force_best

# scaled cohort settings shared by criteria 7, 8, 10: 200 patients, 48
# generator prototypes of which 2 are the lesion pattern, 2-layer model
ACCEPT = dict(
    d_repr=32, M=64, layers=2, heads=8, K=48, N=24,
    dropout=0.1, lr=1e-3, batch=4, epochs=25, seed=0,
    threshold=0.5, class_weight="none",
    T=1000, beta_start=1e-4, beta_end=0.02,
    diff_width=64, diff_t_dim=16, diff_epochs=3, diff_lr=1e-3, diff_batch=64,
    patients=200, K_true=48, n_lesion=2, class_signal=1.0, noise=0.1, n_min=8,
    kmeans_n_init=8, kmeans_max_iters=200,
)

# single-threaded math libraries for the determinism criterion
ENV_1T = {
    "OMP_NUM_THREADS": "1",
    "OPENBLAS_NUM_THREADS": "1",
    "MKL_NUM_THREADS": "1",
    "NUMEXPR_NUM_THREADS": "1",
}

TRACKED = (
    "diffusion.ckp",
    "book.pbk",
    "model.ckp",
    "train_log.csv",
    "metrics_test.json",
    os.path.join("explain", "heatmap.csv"),
    os.path.join("explain", "ranking.csv"),
    os.path.join("explain", "representatives.json"),
)


def _run_chain(cfg_path: str, explain: bool) -> None:
    steps = [
        ["gen-synthetic"], ["diffusion-train"], ["encode"], ["cluster"], ["train"],
        ["eval", "--split", "test"],
    ]
    if explain:
        steps.append(["explain", "--split", "test"])
    for step in steps:
        code, _, err = run_cli([*step, "--config", cfg_path], env_extra=ENV_1T)
        assert code == 0, (step, err)


def _test_auc(workdir: str) -> float:
    with open(os.path.join(workdir, "metrics_test.json")) as fh:
        return json.load(fh)["metrics"]["auc"]


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    work_on = str(root / "signal_on")
    work_null = str(root / "signal_null")
    cfg_on = write_cfg(root / "on.json", RunConfig.from_dict(dict(ACCEPT, workdir=work_on)))
    cfg_null = write_cfg(
        root / "null.json", RunConfig.from_dict(dict(ACCEPT, class_signal=0.0, workdir=work_null))
    )
    t0 = time.monotonic()
    _run_chain(cfg_on, explain=True)
    _run_chain(cfg_null, explain=False)
    elapsed = time.monotonic() - t0
    return {
        "work_on": work_on,
        "cfg_on": cfg_on,
        "auc_on": _test_auc(work_on),
        "auc_null": _test_auc(work_null),
        "elapsed": elapsed,
    }


def test_criterion_01_singleton_attention_matches_mha():
    # K = N singleton clusters vs a straight-line multi-head reference:
    # max abs diff < 1e-6 over >= 20 random configurations, < 1 min
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(20):
        n = int(rng.integers(2, 12))
        heads = int(rng.choice([1, 2, 4]))
        m = heads * int(rng.integers(2, 7))
        bsz = int(rng.integers(1, 4))
        q, k, v = (rng.standard_normal((bsz, n, m)) for _ in range(3))
        cid = np.tile(np.arange(n, dtype=np.int64), (bsz, 1))
        mask = np.ones((bsz, n), dtype=bool)
        got = T.cluster_attention(
            T.tensor(q, dtype=np.float64), T.tensor(k, dtype=np.float64),
            T.tensor(v, dtype=np.float64), cid, mask, n_clusters=n, heads=heads,
        ).data
        for j in range(bsz):
            worst = max(worst, float(np.abs(got[j] - naive_mha(q[j], k[j], v[j], heads)).max()))
    elapsed = time.monotonic() - t0
    assert worst < 1e-6, worst
    assert elapsed < 60.0
    print(f"PASS criterion 1: singleton attention == MHA, max|diff| {worst:.2e} over 20 configs")


def test_criterion_02_gradient_suite():
    # central finite differences on a 1-layer M=8 instance: every learnable
    # tensor in the transformer, risk head, A, and the toy diffusion pair,
    # rel. error < 1e-4, < 5 min
    t0 = time.monotonic()
    rng = np.random.default_rng(5)
    d_repr, M, heads, K, n, bsz = 6, 8, 2, 3, 5, 2
    params = CV.init_params(d_repr, M, layers=1, heads=heads, seed=0, dtype=np.float64)
    params["fusion.A"] = fusion.make_global_attention(K, dtype=np.float64)
    feats = rng.standard_normal((bsz, n, d_repr))
    cid = rng.integers(0, K, size=(bsz, n)).astype(np.int64)
    mask = np.ones((bsz, n), dtype=bool)
    labels = np.array([1, 0])
    batch = CV.SequenceBatch(feats, cid, mask, labels, ("a", "b"))

    def model_loss():
        scores = CV.encoder_forward(batch, params, n_clusters=K, heads=heads)
        logits = fusion.fuse_batch(scores.r, cid, mask, params["fusion.A"], K)
        return T.bce_with_logits(logits, labels.astype(np.float64))

    # h = 1e-5 balances the h^2 truncation term against float64 rounding
    # noise in the centered difference; 1e-3 leaves truncation visible on
    # small-magnitude gradient entries
    err_model = T.grad_check(model_loss, params, h=1e-5)
    assert err_model < 1e-4, err_model

    sched = D.NoiseSchedule.linear(50, 1e-4, 0.02)
    enc = D.MLPEncoder(4, 3, width=8, seed=1, dtype=np.float64)
    den = D.ResidualMLPDenoiser(4, 3, width=8, t_dim=4, seed=2, dtype=np.float64)
    x0 = T.tensor(rng.standard_normal((6, 4)), dtype=np.float64)
    # shifted noise keeps every |eps_hat - eps| residual far from the L1
    # kink, where finite differences would disagree with the subgradient
    eps = T.tensor(rng.standard_normal((6, 4)) + 2.5, dtype=np.float64)
    toy_params = {f"enc.{k}": v for k, v in enc.params.items()}
    toy_params.update({f"den.{k}": v for k, v in den.params.items()})

    def toy_loss():
        return D.ddim_loss(x0, 17, eps, den, enc, sched)

    resid = den(D.q_sample(x0, 17, eps, sched), 17, enc(x0)).data - eps.data
    assert np.abs(resid).min() > 0.05
    err_toy = T.grad_check(toy_loss, toy_params, h=1e-5)
    assert err_toy < 1e-4, err_toy

    elapsed = time.monotonic() - t0
    assert elapsed < 300.0
    print(
        f"PASS criterion 2: gradient suite rel err {max(err_model, err_toy):.2e} "
        f"(model {err_model:.2e}, diffusion {err_toy:.2e}) in {elapsed:.1f}s"
    )


def _run_attention(rng, n: int, K: int, M: int, heads: int) -> int:
    q, k, v = (T.tensor(rng.standard_normal((1, n, M)), dtype=np.float64) for _ in range(3))
    cid = (np.arange(n, dtype=np.int64) % K)[None, :]
    mask = np.ones((1, n), dtype=bool)
    B.attention_macs.reset()
    T.cluster_attention(q, k, v, cid, mask, n_clusters=K, heads=heads)
    return B.attention_macs.count


def test_criterion_03_mac_count_linear_in_n():
    # instrumented attention-map MACs: K=8 fixed, doubling N 64 -> 128
    # multiplies the count by 2.0 +/- 5%; K=N matches the quadratic count
    rng = np.random.default_rng(2)
    M, heads = 16, 2
    c64 = _run_attention(rng, 64, 8, M, heads)
    c128 = _run_attention(rng, 128, 8, M, heads)
    assert c64 == CV.attention_map_macs(64, 8, M, heads)
    ratio = c128 / c64
    assert 1.9 <= ratio <= 2.1, ratio
    cq = _run_attention(rng, 32, 32, M, heads)
    assert cq == CV.attention_map_macs(32, 32, M, heads) == 2 * 32 * 32 * M
    print(f"PASS criterion 3: map MACs x{ratio} at K=8 for N 64->128; K=N quadratic exact ({cq})")


def test_criterion_04_fused_score_identity():
    # reported R equals sum_k A_k rbar_k q_k within 1e-9 for every patient
    # in every run; hand example rbar=[1,-1,0.5] q=[.5,.25,.25] A=[1,2,4]
    hand = fusion.PatientDecomposition.from_parts(
        [1.0, -1.0, 0.5], [0.5, 0.25, 0.25], [1.0, 2.0, 4.0]
    )
    assert hand.R == 0.5
    worst = 0.0
    checked = 0
    for seed in (0, 1, 2):
        cfg = RunConfig.from_dict(
            dict(ACCEPT, patients=20, epochs=1, seed=seed, workdir="unused")
        )
        rng = np.random.default_rng(seed)
        params = PL.init_model(cfg)
        A = params["fusion.A"].data
        records = []
        for i in range(cfg.patients):
            n = int(rng.integers(cfg.n_min, cfg.N + 1))
            rec = PL.VolumeRecord(
                pid=f"p{i}", label=i % 2,
                reps=rng.standard_normal((n, cfg.d_repr)).astype(np.float32),
            )
            rec.cluster_ids = rng.integers(0, cfg.K, size=n).astype(np.int64)
            records.append(rec)
        report, rows = PL.evaluate_records(records, params, cfg)
        for batch in PL.pad_and_batch(records, cfg.N, cfg.batch, cfg.K):
            scores = CV.encoder_forward(batch, params, n_clusters=cfg.K, heads=cfg.heads)
            for j in range(batch.size):
                dec = fusion.decompose(
                    scores.r.data[j], batch.cluster_ids[j], batch.mask[j], A, cfg.K
                )
                # independent summation order (descending k, numpy dot)
                alt = float(np.dot(dec.contribution[::-1], np.ones(cfg.K)))
                worst = max(worst, abs(dec.R - alt))
                row = next(r for r in rows if r["id"] == batch.patient_ids[j])
                assert row["R"] == dec.R
                checked += 1
    assert worst <= 1e-9, worst
    print(f"PASS criterion 4: R identity within {worst:.1e} on {checked} patients; hand R=0.5")


def test_criterion_05_kmeans_brute_force_and_monotone():
    # 50 tiny instances (n <= 8, K=2): >= 90% reach the enumeration
    # optimum, 100% have non-decreasing objective history, < 1 min
    t0 = time.monotonic()
    rng = np.random.default_rng(9)
    hits = 0
    for trial in range(50):
        n = int(rng.integers(2, 9))
        x = rng.standard_normal((n, 3))
        xn = P.normalize_rows(x)
        book = P.fit(xn, K=2, seed=trial, n_init=6)
        assert all(b >= a - 1e-12 for a, b in zip(book.history, book.history[1:]))
        if book.objective >= brute_force_best(xn, 2) - 1e-9:
            hits += 1
    elapsed = time.monotonic() - t0
    assert hits >= 45, hits
    assert elapsed < 60.0
    print(f"PASS criterion 5: {hits}/50 instances brute-force optimal, all monotone, {elapsed:.1f}s")


def test_criterion_06_ddim_inversion_and_linear_denoiser():
    # exact-eps reverse chain recovers x0 to <= 1e-5; trained scalar linear
    # denoiser lands within 0.05 of sqrt(1 - alpha_bar_t) at 5 timesteps,
    # < 10 min
    t0 = time.monotonic()
    rng = np.random.default_rng(21)
    sched = D.NoiseSchedule.linear(100, 1e-4, 0.02)
    x0 = rng.standard_normal((8, 5))
    recon = D.reconstruct(x0, D.OracleDenoiser(x0, sched), None, sched, n_steps=100)
    inv_err = D.l1_error(x0, recon)
    assert inv_err <= 1e-5, inv_err

    sched_t = D.NoiseSchedule.linear(1000, 1e-4, 0.02)
    data = rng.standard_normal((4096, 1))
    worst = 0.0
    for t in (50, 200, 400, 700, 950):
        den = D.LinearDenoiser()
        D.train_autoencoder(
            data, None, den, sched_t, epochs=60, batch_size=256, lr=3e-3, seed=0, fixed_t=t
        )
        worst = max(worst, abs(den.weight - sched_t.sqrt_1m_ab[t]))
    elapsed = time.monotonic() - t0
    assert worst <= 0.05, worst
    assert elapsed < 600.0
    print(
        f"PASS criterion 6: inversion err {inv_err:.1e}, max |w - sqrt(1-abar_t)| "
        f"{worst:.3f} over 5 timesteps, {elapsed:.1f}s"
    )


def test_criterion_07_end_to_end_synthetic(cohort):
    # signal on: held-out AUC >= 0.9 within 100 epochs on 200 patients;
    # signal off: held-out AUC in [0.4, 0.6]; both chains < 30 min combined
    assert cohort["auc_on"] >= 0.9, cohort["auc_on"]
    assert 0.4 <= cohort["auc_null"] <= 0.6, cohort["auc_null"]
    assert cohort["elapsed"] < 1800.0, cohort["elapsed"]
    print(
        f"PASS criterion 7: AUC {cohort['auc_on']:.3f} with signal, "
        f"{cohort['auc_null']:.3f} without, {cohort['elapsed']:.0f}s combined"
    )


def test_criterion_08_lesion_cluster_ranked_top3(cohort):
    # with signal on, at least one learned cluster whose members are
    # majority-generated by a lesion prototype ranks in the top 3
    work = cohort["work_on"]
    with open(os.path.join(work, "raw", "truth.json")) as fh:
        truth = json.load(fh)
    lesion_kinds = set(truth["lesion_prototypes"])
    book = P.load_book(os.path.join(work, "book.pbk"))
    entries = formats.read_manifest(os.path.join(work, "emb", "manifest_test.json"))
    votes = np.zeros((book.K, truth["K_true"]), dtype=np.int64)
    for e in entries:
        reps = formats.read_slq(os.path.join(work, "emb", e["path"]))
        kinds = truth["slice_kinds"][e["id"]]
        assert len(kinds) == reps.shape[0]
        for c, kind in zip(P.assign_many(book, reps), kinds):
            votes[c, kind] += 1
    occupied = votes.sum(axis=1) > 0
    majority = votes.argmax(axis=1)
    lesion_clusters = {
        int(c) for c in range(book.K) if occupied[c] and int(majority[c]) in lesion_kinds
    }
    assert lesion_clusters, "no learned cluster is lesion-majority"

    lines = open(os.path.join(work, "explain", "ranking.csv")).read().splitlines()
    assert lines[0] == "cluster_id,score,rank"
    top3 = [int(line.split(",")[0]) for line in lines[1:4]]
    overlap = set(top3) & lesion_clusters
    assert overlap, (top3, sorted(lesion_clusters))
    print(f"PASS criterion 8: lesion-majority clusters {sorted(overlap)} in ranking top 3 {top3}")


def test_criterion_09_auc_matches_enumeration():
    # 50 random score/label sets (size <= 100, heavy ties): implementation
    # agrees with the all-pairs enumeration to 1e-12
    rng = np.random.default_rng(13)
    worst = 0.0
    for trial in range(50):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] ^= 1
        scores = np.round(rng.random(n) * 8) / 8  # ties on purpose
        worst = max(worst, abs(metrics.auc(scores, labels) - pairwise_auc(scores, labels)))
    assert worst <= 1e-12, worst
    print(f"PASS criterion 9: AUC matches enumeration within {worst:.1e} on 50 sets")


def test_criterion_10_rerun_byte_identical(cohort):
    # a second single-threaded run of the full CLI chain with the same
    # seed reproduces every checkpoint, log, and CSV byte for byte
    work, cfg_path = cohort["work_on"], cohort["cfg_on"]

    def read_all():
        out = {}
        for rel in TRACKED:
            with open(os.path.join(work, rel), "rb") as fh:
                out[rel] = fh.read()
        return out

    before = read_all()
    _run_chain(cfg_path, explain=True)
    after = read_all()
    for rel in TRACKED:
        assert after[rel] == before[rel], f"{rel} changed between identical runs"
    print(f"PASS criterion 10: {len(TRACKED)} artifacts byte-identical across two chain runs")
