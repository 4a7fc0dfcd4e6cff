"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line that is printed
immediately and repeated in the terminal summary.
"""

import numpy as np
import pytest

from tsdg import autodiff as ad
from tsdg import metrics
from tsdg.augment import mask, mean_shift, scale
from tsdg.cli import main
from tsdg.divergence import h_divergence, make_task, select_c_and_test
from tsdg.models import build, toy_spec
from tsdg.regularizer import omega, omega_meta
from tsdg.similarity import (
    CentroidTable,
    ClusterAssignment,
    compute_centroids,
    metadata_weights,
    uniform_all_weights,
)
from tsdg.trainer import (
    ERM,
    ExperimentData,
    MethodConfig,
    TrainSchedule,
    run_bound_terms,
    run_one,
    sample_batches,
    streams,
    train,
)

from conftest import ACCEPTANCE_LINES, brute_ece, numeric_grad, rel_err

TARGET_D = 4


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# toy risk ordering and bound terms share 15 runs --------------------------------

@pytest.fixture(scope="session")
def toy_comparison(toy_dataset):
    ab_c = ClusterAssignment.from_groups([[1, 2], [3]])
    methods = {
        "erm": ERM,
        "uniform_all": MethodConfig("uniform_all", lam=1.0),
        "selective": MethodConfig("metadata", lam=1.0, clusters=ab_c),
    }
    sched = TrainSchedule(stop_source_risk=0.2)
    out = {name: [] for name in methods}
    for seed in range(5):
        for name, m in methods.items():
            o = run_one(toy_dataset, TARGET_D, seed, m, sched, method_name=name)
            out[name].append((o, run_bound_terms(o)))
    ad.current_graph().clear()
    return out


def test_criterion_01_toy_risk_ordering(toy_comparison):
    risk = {k: [1 - o.accuracy for o, _ in v] for k, v in toy_comparison.items()}
    mean = {k: float(np.mean(v)) for k, v in risk.items()}
    ok = mean["selective"] < mean["uniform_all"] and mean["selective"] <= 0.25
    detail = ", ".join(f"{k}={mean[k]:.3f}" for k in ("erm", "uniform_all", "selective"))
    report(1, ok, f"mean target risk {detail}")


def test_criterion_02_bound_term_divergence(toy_comparison):
    sel = [bt.mean_divergence for _, bt in toy_comparison["selective"]]
    uni = [bt.mean_divergence for _, bt in toy_comparison["uniform_all"]]
    wins = sum(s <= u for s, u in zip(sel, uni))
    detail = f"selective<=uniform_all in {wins}/5 seeds (selective {np.mean(sel):.3f}, uniform_all {np.mean(uni):.3f})"
    report(2, wins >= 4, detail)


# algebraic and numeric properties ------------------------------------------------

def test_criterion_03_pairwise_vs_cluster_form():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m, n_cls = int(rng.integers(1, 9)), int(rng.integers(1, 11))
        arr = {d: rng.standard_normal((n_cls, 4)) * rng.uniform(0.1, 10) for d in range(1, m + 1)}
        counts = {d: (rng.random(n_cls) > 0.2).astype(int) for d in arr}
        table = CentroidTable.from_arrays(arr, counts)
        assign = ClusterAssignment({d: int(rng.integers(1, m + 1)) for d in arr})
        a = omega(table, metadata_weights(assign)).item()
        b = omega_meta(table, assign).item()
        worst = max(worst, abs(a - b) / (1 + a))
    report(3, worst < 1e-9, f"max |diff|/(1+omega) = {worst:.2e}")


def test_criterion_04_erm_reduction(toy_dataset, monkeypatch):
    seed, iters = 0, 50
    sched = TrainSchedule(iterations=iters, lr_drop_at=40)

    # trainer under test, with a snapshot after every optimizer step
    rngs = streams(seed)
    data = ExperimentData(toy_dataset, TARGET_D, rngs["split"])
    model = build(toy_spec(), rngs["init"])
    traj_a = []
    real_step = ad.adam_step

    def recording_step(params, *args, **kwargs):
        real_step(params, *args, **kwargs)
        traj_a.append([p.data.copy() for p in params])

    monkeypatch.setattr(ad, "adam_step", recording_step)
    train(model, data, sched, MethodConfig("learned", lam=0.0, xi=0.1), rngs=rngs)
    monkeypatch.setattr(ad, "adam_step", real_step)

    # regularizer-free reference loop
    rngs = streams(seed)
    data = ExperimentData(toy_dataset, TARGET_D, rngs["split"])
    model = build(toy_spec(), rngs["init"])
    params = model.parameters()
    traj_b = []
    for it in range(iters):
        batches = sample_batches(data.source_train, sched.batch_per_domain, rngs["batching"])
        x = np.concatenate([b[0] for b in batches.values()])
        y = np.concatenate([b[1] for b in batches.values()])
        _, g = model.forward(x, train=True)
        loss = ad.softmax_cross_entropy(g, ad.one_hot(y, 2))
        ad.backward(loss)
        real_step(params, sched.lr_at(it), weight_decay=sched.weight_decay)
        traj_b.append([p.data.copy() for p in params])

    same = len(traj_a) == len(traj_b) == iters and all(
        all(p.tobytes() == q.tobytes() for p, q in zip(a, b)) for a, b in zip(traj_a, traj_b)
    )
    report(4, same, f"{len(traj_a)} steps compared bit for bit")


def test_criterion_05_full_objective_gradient():
    rng = np.random.default_rng(5)
    spec = toy_spec(hidden_dim=4, length=16)
    model = build(spec, rng)
    x = rng.standard_normal((8, 2, 16))
    y = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    doms = np.repeat([1, 2], 4)
    weights = uniform_all_weights([1, 2])
    lam = 0.1

    def objective():
        _, g = model.forward(x, train=True)
        parts = {d: (ad.take_rows(g, np.flatnonzero(doms == d)), y[doms == d]) for d in (1, 2)}
        table = compute_centroids(parts, 2, "logits")
        return ad.softmax_cross_entropy(g, ad.one_hot(y, 2)) + omega(table, weights) * lam

    params = model.parameters()
    for p in params:
        p.zero_grad()
    ad.backward(objective())
    analytic = [p.grad.copy() for p in params]

    def value():
        with ad.no_grad():
            return float(objective().data)

    numeric = numeric_grad(value, [p.data for p in params], h=1e-4)
    errs = [rel_err(a, n) for a, n in zip(analytic, numeric)]
    report(5, max(errs) < 1e-3, f"max relative error {max(errs):.2e} over {len(params)} parameter tensors")


def test_criterion_06_ece_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for L in (2, 6, 10):
        for _ in range(100):
            logits = rng.standard_normal((1000, L)) * rng.uniform(0.5, 4)
            p = np.exp(logits - logits.max(1, keepdims=True))
            p /= p.sum(1, keepdims=True)
            labels = rng.integers(0, L, 1000)
            worst = max(worst, abs(metrics.ece(p, labels) - brute_ece(p, labels)))
    hand = metrics.ece(np.array([[0.9, 0.1], [0.9, 0.1]]), [0, 1])
    ok = worst < 1e-12 and hand == 0.4
    report(6, ok, f"max |ece - brute| = {worst:.1e}, hand case = {hand!r}")


def test_criterion_07_bearings_metadata_weights():
    w = metadata_weights(ClusterAssignment.from_groups([[1, 2, 3, 4], [5, 6, 7, 8]]))
    expect = np.zeros((8, 8))
    expect[:4, :4] = 1 / 8
    expect[4:, 4:] = 1 / 8
    report(7, np.array_equal(w.values, expect), "within 1/8, across 0")


# learned structure and schedule share three default-schedule runs ---------------

def test_criterion_08_learned_structure(learned_toy_runs):
    hits = total = 0
    for run in learned_toy_runs:
        for rec in run.result.refreshes:
            if rec.iteration > 500:
                total += 1
                hits += rec.nn[1] == 2 and rec.nn[2] == 1
    frac = hits / total
    report(8, frac >= 0.7, f"A<->B mutual nearest neighbours in {hits}/{total} refreshes ({frac:.2f})")


def test_criterion_09_divergence_endpoints():
    same, far = [], []
    for seed in range(3):
        rng = np.random.default_rng(900 + seed)
        task = make_task(rng.standard_normal((400, 2)), rng.standard_normal((400, 2)), rng)
        same.append(h_divergence(select_c_and_test(task).test_error))
        task = make_task(rng.standard_normal((400, 2)), rng.standard_normal((400, 2)) + 10.0, rng)
        far.append(h_divergence(select_c_and_test(task).test_error))
    ok = max(abs(v) for v in same) <= 0.2 and min(far) >= 1.8
    report(9, ok, f"identical {np.round(same, 3).tolist()}, separated {np.round(far, 3).tolist()}")


def test_criterion_10_augmentation_statistics():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 10000)) * 3 + 2
    mu, sigma = x.mean(-1, keepdims=True), x.std(-1, keepdims=True)
    shifted = mean_shift(x, mu, 5.0)
    scaled = scale(x, mu, sigma, 0.5)
    mean_err = abs(shifted.mean() - 5.0)
    ratio_err = abs(scaled.std() / x.std() - 0.5 / sigma.item())
    masked = mask(x[None], 1e6, 0.1, rng)
    frac = float(np.mean(masked == 1e6))
    ci = 3 * np.sqrt(0.1 * 0.9 / 10000)
    ok = mean_err < 1e-9 and ratio_err < 1e-6 and abs(frac - 0.1) <= ci
    report(10, ok, f"mean err {mean_err:.1e}, std ratio err {ratio_err:.1e}, mask fraction {frac:.4f}")


def test_criterion_11_cli_determinism(tmp_path):
    identical = True
    for extra in (["--similarity", "learned"], ["--similarity", "metadata", "--clusters", "A,B;C", "--lambda", "1"]):
        args = ["train", "--target", "D", "--seed", "0,1", "--iterations", "30", *extra]
        outs = []
        for run in ("a", "b"):
            d = tmp_path / (extra[1] + run)
            assert main([*args, "--out", str(d)]) == 0
            outs.append((d / "results.tsv").read_bytes())
        identical &= outs[0] == outs[1]
    report(11, identical, "repeated train invocations give byte-identical results.tsv")


def test_criterion_12_default_schedule(learned_toy_runs):
    ok = True
    for run in learned_toy_runs:
        recs = run.result.losses
        ok &= len(recs) == 3000
        ok &= all(r.lr == 0.001 for r in recs[:2400]) and all(r.lr == 0.0001 for r in recs[2400:])
        ok &= all(r.batch_per_domain == 32 and r.weight_decay == 5e-5 for r in recs)
    first_low = next(r.iteration for r in learned_toy_runs[0].result.losses if r.lr < 0.001)
    report(12, ok, f"lr drops 0.001 -> 0.0001 at iteration {first_low}; batch 32/domain; weight decay 5e-5")
