"""One test per acceptance criterion. Each prints a single PASS/FAIL line,
which is also repeated in the terminal summary."""

import math
import time

import numpy as np
import pytest

from carl import tensor as tn
from carl.cli import main
from carl.config import build_config, with_overrides
from carl.data import generate_synthetic, make_batches, normalize_labels
from carl.encoder import (EncoderConfig, detect_perturbed, encode, init_params, sentence_embeddings,
                          target_copy)
from carl.evaluation import (alignment, auc, classification_probe, correlation_stats, geometry,
                             regression_probe, uniformity)
from carl.mccl import ema_update, embedding_similarity, label_similarity, mccl_loss, momentum_schedule, to_distribution
from carl.ptd import PTDConfig, apply_perturbation, focal_loss, pgd_attack, scorable_mask, select_salient
from carl.tensor import Tensor
from carl.trainer import (TrainConfig, attack_batch, carl_objective, detection_scores, new_state,
                          read_metrics_csv, run_training, total_loss)

from conftest import ACCEPTANCE_LINES
from test_evaluation import brute_alignment, brute_pearson, brute_ranks, brute_uniformity
from test_mccl import brute_cosine, brute_softmax, rows_entropy
from test_tensor import OPS, check_op

SMOKE = build_config("smoke")
TIME_BUDGET_S = 300.0


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# shared training runs


def train_corpus():
    return generate_synthetic(200, noise=0.1, seed=0)


def held_corpus():
    return generate_synthetic(100, noise=0.1, seed=2)


def probe_scores(params, corpus):
    emb = sentence_embeddings(params, corpus.records)
    labels = corpus.labels()
    tags = [r.emotion for r in corpus.records]
    return {
        "r_valence": regression_probe(emb, labels[:, 0], 0).pearson_r,
        "r_arousal": regression_probe(emb, labels[:, 1], 0).pearson_r,
        "accuracy": classification_probe(emb, tags, 0).accuracy,
        "geometry": geometry(emb, tags),
    }


@pytest.fixture(scope="module")
def full_run():
    start = time.perf_counter()
    res = run_training(train_corpus(), SMOKE.train, SMOKE.encoder, SMOKE.mccl, SMOKE.ptd,
                       eval_corpus=held_corpus())
    return res, time.perf_counter() - start


@pytest.fixture(scope="module")
def ablation_run():
    cfg = with_overrides(SMOKE, "train", lambda2=0.0)
    return run_training(train_corpus(), cfg.train, cfg.encoder, cfg.mccl, cfg.ptd,
                        eval_corpus=held_corpus())


@pytest.fixture(scope="module")
def untrained(full_run):
    # the exact initialization the trained runs started from
    state = new_state(SMOKE.encoder, full_run[0].state.K, SMOKE.train.seed, SMOKE.mccl)
    return probe_scores(state.online, held_corpus())


# ---------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    for _, build, shapes, positive in OPS:
        for seed in range(3):
            check_op(build, shapes, seed, positive)
    enc = EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, max_len=4, d_proj=4)
    state = new_state(enc, 1, seed=11)
    batch = make_batches(generate_synthetic(1, seed=5), 4, seed=0, max_len=4)[0]
    assert (batch.N, batch.T) == (4, 4)
    rng = np.random.default_rng(0)
    delta = rng.normal(0, 0.3, size=(4, 4, 8))
    mask = np.zeros((4, 4), dtype=np.int64)
    mask[:, 1] = 1
    mc = with_overrides(SMOKE, "mccl", temperature_sim=0.5, temperature_va=0.5).mccl
    params = list(state.online.tensors.values())
    worst = tn.grad_check(lambda: carl_objective(state.online, state.target, batch, delta, mask,
                                                 TrainConfig(), mc, SMOKE.ptd), params)
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-4 and elapsed < 60,
            f"{len(OPS)} ops within 1e-4; full step max rel err {worst:.2e}; {elapsed:.1f}s")


def test_criterion_02_closed_form_oracles():
    errs = []
    # EMA on a single tensor: 1.0 toward 0.0 at m = 0.9
    online = init_params(EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, max_len=4, d_proj=4), 0)
    target = target_copy(online)
    target["tok_emb"].data[...] = 1.0
    online["tok_emb"].data[...] = 0.0
    ema_update(target, online, 0.9)
    errs.append(np.abs(target["tok_emb"].data - 0.9).max())
    errs.append(abs(momentum_schedule(0, 10, 0.9996) - 0.9996))
    errs.append(abs(momentum_schedule(10, 10, 0.9996) - 1.0))
    errs.append(abs(momentum_schedule(5, 10, 0.9996) - 0.9998))
    valid = np.ones((1, 1))
    errs.append(abs(focal_loss(Tensor([[0.5]]), valid, valid, 0.0).item() - math.log(2)))
    errs.append(abs(focal_loss(Tensor([[0.9]]), valid, valid, 2.0).item() + 0.01 * math.log(0.9)))
    errs.append(abs(focal_loss(Tensor([[1 - 1e-15]]), valid, valid, 2.0).item()))
    errs.append(abs(total_loss(1.0, 0.5, 0.8, 0.2) - 0.9))
    errs.append(abs(total_loss(3.0, 7.0, 0.8, 0.0) - 2.4))
    errs.append(abs(total_loss(2.0, 5.0, 1.0, 1.0) - 7.0))
    for x, lo, hi, want in ((3, 1, 5, 0.0), (1, 1, 5, -1.0), (5, 1, 5, 1.0), (5, 1, 9, 0.0)):
        errs.append(abs(normalize_labels(x, lo, hi) - want))
    hand = max(errs)

    rng = np.random.default_rng(0)
    brute = 0.0
    for _ in range(10):
        q, z, va = rng.normal(size=(8, 8)), rng.normal(size=(8, 8)), rng.uniform(-1, 1, size=(8, 2))
        s = embedding_similarity(q, z).data
        brute = max(brute, np.abs(s - brute_cosine(q, z)).max())
        brute = max(brute, np.abs(label_similarity(va).data - brute_cosine(va, va)).max())
        brute = max(brute, np.abs(to_distribution(s, 0.05).data - brute_softmax(s, 0.05)).max())
    verdict(2, hand <= 1e-12 and brute <= 1e-10,
            f"hand values max err {hand:.1e}; cosine/softmax vs brute force max err {brute:.1e}")


def test_criterion_03_loss_identity():
    rng = np.random.default_rng(3)
    worst, min_kl, self_gap = 0.0, np.inf, 0.0
    for _ in range(100):
        p = tn.softmax_rows(Tensor(rng.normal(scale=2.0, size=(6, 6)))).data
        q = tn.softmax_rows(Tensor(rng.normal(scale=2.0, size=(6, 6)))).data
        loss = mccl_loss(Tensor(p), Tensor(q)).item()
        kl = ((p * np.log(p / q)).sum(axis=1) + (q * np.log(q / p)).sum(axis=1)).mean()
        gap = loss - (rows_entropy(p) + rows_entropy(q)).mean()
        worst = max(worst, abs(gap - kl))
        min_kl = min(min_kl, gap)
        same = mccl_loss(Tensor(p), Tensor(p)).item() - 2 * rows_entropy(p).mean()
        self_gap = max(self_gap, abs(same))
    ok = worst < 1e-10 and min_kl > 0 and self_gap < 1e-10
    verdict(3, ok, f"|loss - entropies - KL| max {worst:.1e}; min KL over unequal pairs {min_kl:.3f}; "
                   f"equal pairs {self_gap:.1e}")


def test_criterion_04_ema_convergence():
    online = init_params(EncoderConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, max_len=4, d_proj=4), 0)
    target = target_copy(online)
    for t in target.tensors.values():
        t.data[...] = 1.0
    for t in online.tensors.values():
        t.data[...] = 0.0
    expected, worst = 1.0, 0.0
    for n in range(1, 21):
        ema_update(target, online, 0.9)
        expected *= 0.9
        for t in target.tensors.values():
            worst = max(worst, np.abs(t.data - expected).max(), abs(expected - 0.9 ** n))
    ends = momentum_schedule(0, 37, 0.9996) == 0.9996 and momentum_schedule(37, 37, 0.9996) == 1.0
    verdict(4, worst <= 1e-15 and ends, f"max deviation from 0.9^n over 20 steps {worst:.1e}; endpoints exact {ends}")


def test_criterion_05_pgd_contracts():
    rng = np.random.default_rng(5)
    worst_tok, worst_cap = -np.inf, -np.inf
    for _ in range(100):
        cfg = PTDConfig(epsilon=float(rng.uniform(0.01, 1.0)), alpha=float(rng.uniform(0.01, 2.0)),
                        pgd_steps=int(rng.integers(1, 4)))
        sal = select_salient(rng.uniform(size=(3, 6)), 0.3, np.ones((3, 6), dtype=np.int64))
        w, e0 = Tensor(rng.normal(size=(3, 6, 4))), rng.normal(size=(3, 6, 4))
        delta = pgd_attack(e0, sal, lambda e: tn.sum(tn.mul(tn.mul(e, e), w)), cfg)
        worst_tok = max(worst_tok, np.sqrt((delta ** 2).sum(axis=-1)).max() - cfg.epsilon)
        worst_cap = max(worst_cap, np.sqrt((delta ** 2).sum()) - cfg.cap_for(sal.total))
    corpus = generate_synthetic(10, seed=0)
    wins = 0
    for trial in range(50):
        state = new_state(SMOKE.encoder, 10, seed=trial, mccl_cfg=SMOKE.mccl)
        batch = make_batches(corpus, SMOKE.train.batch_size, trial, SMOKE.encoder.max_len)[0]
        e0, delta, sal, loss_fn = attack_batch(state.online, state.target, batch, SMOKE.mccl, SMOKE.ptd)
        clean = loss_fn(Tensor(e0)).item()
        attacked = loss_fn(Tensor(apply_perturbation(e0, delta, sal.mask))).item()
        wins += attacked >= clean
    ok = worst_tok <= 1e-12 and worst_cap <= 1e-12 and wins >= 45
    verdict(5, ok, f"token-norm excess {worst_tok:.1e}, cap excess {worst_cap:.1e}; "
                   f"attack raised the loss in {wins}/50 trials")


def clean_input_auc(state, corpus):
    """AUC of the detector against the attack's labels when the attack is not applied:
    how much it gets from token identity and context alone."""
    frozen = state.online.detached()
    scores, labels = [], []
    for batch in make_batches(corpus, 16, 0, state.encoder_config.max_len):
        _, _, sal, _ = attack_batch(state.online, state.target, batch, SMOKE.mccl, SMOKE.ptd)
        hidden, _ = encode(frozen, batch)
        valid = scorable_mask(batch.attention_mask).astype(bool)
        scores.append(detect_perturbed(frozen, hidden).data[valid])
        labels.append(sal.mask[valid])
    return auc(np.concatenate(scores), np.concatenate(labels))


def test_criterion_06_detector_learnability(full_run):
    res, elapsed = full_run
    scores, labels = detection_scores(res.state, held_corpus(), SMOKE.mccl, SMOKE.ptd)
    value = auc(scores, labels)
    prior = clean_input_auc(res.state, held_corpus())
    verdict(6, value > 0.9 and elapsed <= TIME_BUDGET_S,
            f"held-out detection AUC {value:.3f} (need > 0.9; same detector on unperturbed "
            f"inputs {prior:.3f}); training took {elapsed:.0f}s (budget {TIME_BUDGET_S:.0f}s)")


def test_detector_scores_perturbed_tokens_higher(full_run):
    scores, labels = detection_scores(full_run[0].state, held_corpus(), SMOKE.mccl, SMOKE.ptd)
    assert scores[labels == 1].mean() > scores[labels == 0].mean()


def test_criterion_07_representation_learning(full_run, untrained):
    got = probe_scores(full_run[0].state.online, held_corpus())
    g0, g1 = untrained["geometry"], got["geometry"]
    ok = (got["r_valence"] >= 0.8 and got["r_arousal"] >= 0.8 and got["accuracy"] >= 0.9
          and g1.alignment < g0.alignment and g1.uniformity < g0.uniformity)
    verdict(7, ok, f"r_valence {got['r_valence']:.3f}, r_arousal {got['r_arousal']:.3f}, "
                   f"accuracy {got['accuracy']:.3f}; alignment {g0.alignment:.3f} -> {g1.alignment:.3f}, "
                   f"uniformity {g0.uniformity:.3f} -> {g1.uniformity:.3f}")


def test_criterion_08_ablation_direction(full_run, ablation_run, untrained):
    full = probe_scores(full_run[0].state.online, held_corpus())["r_valence"]
    ablated = probe_scores(ablation_run.state.online, held_corpus())["r_valence"]
    base = untrained["r_valence"]
    ok = full >= ablated - 0.05 and full >= base + 0.2 and ablated >= base + 0.2
    verdict(8, ok, f"valence r: full {full:.3f}, without detection {ablated:.3f}, untrained {base:.3f}")


def test_criterion_09_metric_oracles():
    rng = np.random.default_rng(9)
    geo = 0.0
    for n in (2, 10, 50, 200):
        x = rng.normal(size=(n, 6))
        pairs = rng.integers(0, n, size=(min(n * 2, 300), 2))
        geo = max(geo, abs(alignment(x, pairs) - brute_alignment(x, pairs)),
                  abs(uniformity(x) - brute_uniformity(x)))
    corr = 0.0
    for _ in range(50):
        a = rng.integers(0, 6, size=25).astype(float)
        b = a + rng.integers(-2, 3, size=25)
        _, r, rho = correlation_stats(a, b)
        corr = max(corr, abs(r - brute_pearson(list(a), list(b))),
                   abs(rho - brute_pearson(brute_ranks(list(a)), brute_ranks(list(b)))))
    verdict(9, geo <= 1e-12 and corr <= 1e-12,
            f"alignment/uniformity vs O(n^2) max err {geo:.1e}; Pearson/Spearman with ties max err {corr:.1e}")


def test_criterion_10_reproducibility(tmp_path):
    corpus = tmp_path / "toy.jsonl"
    main(["synth", "--n-per-quadrant", "16", "--out", str(corpus)])
    base = ["train", "--preset", "smoke", "--corpus", str(corpus), "--epochs", "2"]
    assert main(base + ["--out-dir", str(tmp_path / "a")]) == 0
    first = {name: (tmp_path / "a" / name).read_bytes() for name in ("metrics.csv", "final.ckpt")}
    assert main(base + ["--out-dir", str(tmp_path / "a")]) == 0
    identical = all((tmp_path / "a" / name).read_bytes() == raw for name, raw in first.items())

    assert main(base + ["--out-dir", str(tmp_path / "b"), "--max-steps", "5"]) == 0
    assert main(base + ["--out-dir", str(tmp_path / "b"), "--resume", str(tmp_path / "b" / "final.ckpt")]) == 0
    full_log = read_metrics_csv(tmp_path / "a" / "metrics.csv")
    resumed_log = read_metrics_csv(tmp_path / "b" / "metrics.csv")
    resumed = resumed_log == full_log
    verdict(10, identical and resumed,
            f"repeat run bit-identical {identical}; resumed log ({len(resumed_log)} steps) matches {resumed}")
