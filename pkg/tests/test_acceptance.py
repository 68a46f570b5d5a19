"""Acceptance criteria, each at its stated tolerance.

Every test records one ``CRITERION n: PASS|FAIL`` line (printed at the end of
the session) and then asserts, so an unmet criterion shows up red.
"""
import time

import numpy as np
import pytest
from scipy.linalg import subspace_angles

import oracles
from conftest import ACCEPTANCE_LINES
from rrpcp import pcp, pipeline, scene, sparse, subspace, tracker
from rrpcp.sparse import ModCSProblem
from rrpcp.tracker import CentroidObservation, MotionState

SEEDS = (0, 1, 2, 3, 4)


def verdict(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def bundled_runs():
    """All three algorithms on the bundled scene for the five seeds."""
    cfg = scene.load_config(scene.bundled_config_path())
    out = {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        seq, training = scene.build_scene(cfg, seed)
        sub0 = subspace.estimate_initial_pc(training)
        runs = {}
        for algo in pipeline.ALGORITHMS:
            pc = pipeline.PipelineConfig.from_dict(cfg["pipeline"], algorithm=algo, seed=seed)
            runs[algo] = pipeline.run_online(seq, sub0, pc)
        runs["pcp"], _ = pcp.run_pcp(seq)
        out[seed] = {"seq": seq, "runs": runs, "seconds": time.perf_counter() - t0,
                     "rank0": sub0.rank}
    return cfg, out


@pytest.mark.slow
def test_criterion_1_ordering(bundled_runs):
    _, out = bundled_runs
    held, parts = 0, []
    for seed, d in out.items():
        med = {a: pipeline.median_rel_err(r.rows) for a, r in d["runs"].items()}
        ok = (med["suppred-modcs"] < 0.15 and med["plain-rrpcp"] >= 2 * med["suppred-modcs"]
              and med["pcp"] >= 0.3)
        held += ok
        parts.append(f"seed {seed}: {med['suppred-modcs']:.4f}/{med['plain-rrpcp']:.3f}/"
                     f"{med['pcp']:.3f} in {d['seconds']:.0f}s")
    slowest = max(d["seconds"] for d in out.values())
    verdict(1, held >= 4 and slowest <= 600,
            f"ordering held in {held}/5 seeds, slowest seed {slowest:.0f}s "
            f"(medians suppred/rrpcp/pcp; {'; '.join(parts)})")


@pytest.mark.slow
def test_criterion_2_support_correction(bundled_runs):
    _, out = bundled_runs
    ok_all, parts = True, []
    for seed, d in out.items():
        seq, rows = d["seq"], d["runs"]["suppred-modcs"].rows
        upd = np.array([r.extras_upd + r.misses_upd for r in rows])
        pred = np.array([r.extras_pred + r.misses_pred for r in rows])
        size = seq.truth.support.sum(axis=0)
        frac = float(np.mean(upd <= 0.15 * size))
        ok = np.median(upd) <= 0.5 * np.median(pred) and frac >= 0.9
        ok_all &= bool(ok)
        parts.append(f"seed {seed}: median {np.median(upd):g} vs {np.median(pred):g}, "
                     f"totals {upd.sum()} vs {pred.sum()}, {100 * frac:.0f}% frames within 15%")
    verdict(2, ok_all, "updated vs predicted support errors; " + "; ".join(parts))


def test_criterion_3_modcs_advantage():
    m, n, k, trials = 30, 40, 16, 20
    rng = np.random.default_rng(2024)
    plain_ok = mod_ok = 0
    for _ in range(trials):
        A, s, supp = oracles.sparse_instance(rng, m, n, k)
        y = A @ s
        known = rng.choice(supp, int(np.ceil(0.75 * k)), replace=False)
        plain = sparse.solve_modcs(ModCSProblem(y, A)).solution
        mod = sparse.solve_modcs(ModCSProblem(y, A, known)).solution
        plain_ok += np.linalg.norm(plain - s) < 1e-5
        mod_ok += np.linalg.norm(mod - s) < 1e-5
    verdict(3, plain_ok <= 0.2 * trials and mod_ok >= 0.9 * trials,
            f"plain CS succeeded in {plain_ok}/{trials} (need <= 4), "
            f"Modified-CS with 75% of the support known in {mod_ok}/{trials} (need >= 18)")


def _miniature(i):
    rng = np.random.default_rng([4, i])
    n = int(rng.integers(10, 16))
    k = int(rng.integers(1, 5))
    A, s, supp = oracles.sparse_instance(rng, n - 3, n, k)
    if i % 2 == 0:
        T = []
    else:
        # all but one support index plus one wrong index
        T = [int(j) for j in rng.choice(supp, k - 1, replace=False)]
        T.append(int(rng.choice(np.setdiff1d(np.arange(n), supp))))
    return rng, A, s, supp, np.array(T, dtype=int)


def test_criterion_4_oracle_equivalence():
    worst, matched, converged = 0.0, 0, 0
    for i in range(50):
        _, A, s, _, T = _miniature(i)
        y = A @ s
        rep = sparse.solve_modcs(ModCSProblem(y, A, T, 0.0))
        ref = oracles.l1_by_bases(A, y, T)
        converged += rep.converged
        if rep.converged:
            d = float(np.max(np.abs(rep.solution - ref)))
            worst = max(worst, d)
            matched += d <= 1e-6
    hits = 0
    for i in range(50):
        rng, A, s, supp, T = _miniature(i)
        clean = A @ s
        w = rng.standard_normal(clean.size)
        w *= 0.01 * np.linalg.norm(clean) / np.linalg.norm(w)
        y = clean + w
        rep = sparse.solve_modcs(ModCSProblem(y, A, T, 1.5 * np.linalg.norm(w)))
        try:
            T_fin, _, _ = sparse.add_ls_del(rep.solution, A, y, T,
                                            sparse.AddLSDelParams(0.2, 0.5))
        except sparse.IllConditionedLS:
            continue
        ref_supp, _ = oracles.best_support(A, y, len(supp), [t for t in T if t in supp])
        hits += list(T_fin) == list(ref_supp)
    verdict(4, matched == 50 and hits >= 48,
            f"noiseless: {converged}/50 converged, {matched}/50 within 1e-6 of the exhaustive "
            f"basis oracle (worst {worst:.1e}); noisy: Add-LS-Del support equals the "
            f"best-subset oracle in {hits}/50")


def test_criterion_5_kalman_oracle():
    rng = np.random.default_rng(5)
    q, R = 1e-4, 1e-3
    obs = [None if rng.random() < 0.1 else float(rng.normal(0, 5)) for _ in range(1000)]
    st = MotionState(np.array([0.3, 0.1]), np.array([[1.0, 0.2], [0.2, 0.5]]))
    ref = oracles.scalar_kf(0.3, 0.1, (1.0, 0.2, 0.5), q, R, obs)
    worst, min_eig = 0.0, np.inf
    for z, r in zip(obs, ref):
        st = tracker.kf_predict(st, q)
        if z is not None:
            st = tracker.kf_update(st, CentroidObservation(z, True, R))
        got = (st.g[0], st.g[1], st.Sigma[0, 0], st.Sigma[0, 1], st.Sigma[1, 1])
        worst = max(worst, max(abs(a - b) for a, b in zip(got, r)))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(st.Sigma).min()))
    verdict(5, worst <= 1e-12 and min_eig >= -1e-12,
            f"max deviation from the scalar oracle over 1000 steps {worst:.1e}, "
            f"min covariance eigenvalue {min_eig:.1e}")


@pytest.mark.slow
def test_criterion_6_subspace(bundled_runs):
    worst_angle = 0.0
    for seed in range(10):
        rng = np.random.default_rng([6, seed])
        n, r, k, gamma = 12, 3, 4, 0.98
        P, _ = np.linalg.qr(rng.standard_normal((n, r)))
        sigma = np.sort(rng.uniform(2, 5, r))[::-1]
        buf = rng.standard_normal((n, k))
        new = subspace.update_pc(subspace.from_basis(P, sigma), buf, add_threshold=1e-9,
                                 delete_threshold=1e-9, forgetting=gamma)
        U, s, _ = np.linalg.svd(np.hstack([gamma * P * sigma, buf]), full_matrices=False)
        keep = s > 1e-9 * s[0]
        if new.rank != keep.sum():
            worst_angle = np.inf
            continue
        worst_angle = max(worst_angle, float(np.max(subspace_angles(new.P, U[:, keep]))))
    _, out = bundled_runs
    worst_ortho, updates = 0.0, 0
    for d in out.values():
        for algo in pipeline.ALGORITHMS:
            for e in d["runs"][algo].ortho_errors:
                worst_ortho = max(worst_ortho, max(e.values()))
                updates += 1
    verdict(6, worst_angle < 1e-8 and worst_ortho <= 1e-10 and updates > 0,
            f"n=12 fixtures: max principal angle to batch SVD {worst_angle:.1e}; "
            f"worst orthogonality error over {updates} updates of full runs {worst_ortho:.1e}")


def test_criterion_7_pcp():
    rng = np.random.default_rng(7)
    n = 50
    L = rng.standard_normal((n, 2)) @ rng.standard_normal((2, n))
    S = np.zeros((n, n))
    mask = rng.random((n, n)) < 0.02
    S[mask] = 5.0 * rng.choice([-1.0, 1.0], mask.sum())
    Lh, Sh, rep = pcp.solve_pcp(pcp.PCPProblem(L + S, lam=1 / np.sqrt(n)))
    err_L = np.linalg.norm(Lh - L) / np.linalg.norm(L)
    err_S = np.linalg.norm(Sh - S) / np.linalg.norm(S)
    obj = np.asarray(rep.objective)
    rises = int(np.sum(np.diff(obj) > 0))
    ok = rep.converged and err_L <= 1e-4 and err_S <= 1e-4 and rises == 0 and rep.residual <= 1e-7
    verdict(7, ok, f"relative errors L {err_L:.1e}, S {err_S:.1e}; feasibility residual "
                   f"{rep.residual:.1e}; objective rose on {rises} of {obj.size - 1} iterations")


def _binade(x):
    with np.errstate(divide="ignore"):
        return np.floor(np.log2(np.abs(x)))


@pytest.mark.slow
def test_criterion_8_conservation_and_determinism(bundled_runs, tmp_path):
    cfg, out = bundled_runs
    total = bad = unsplittable = 0
    for d in out.values():
        M = d["seq"].M
        for res in d["runs"].values():
            miss = (res.L_hat + res.S_hat) != M
            # where both parts sit above the binade of M, each is a multiple of
            # 2 ulp(M) and no floating-point pair sums to an odd last bit of M
            both_above = (_binade(res.L_hat) > _binade(M)) & (_binade(res.S_hat) > _binade(M))
            total += M.size
            bad += int(miss.sum())
            unsplittable += int((miss & both_above).sum())
    seq = out[0]["seq"]
    pc = pipeline.PipelineConfig.from_dict(cfg["pipeline"], seed=0)
    again = pipeline.run_online(seq, subspace.estimate_initial_pc(
        scene.build_scene(cfg, 0)[1]), pc)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    scene.write_metrics_csv(a, out[0]["runs"]["suppred-modcs"].rows, pipeline.METRIC_COLUMNS)
    scene.write_metrics_csv(b, again.rows, pipeline.METRIC_COLUMNS)
    same = a.read_bytes() == b.read_bytes()
    verdict(8, bad == 0 and same,
            f"L+S != M bitwise in {bad}/{total} entries ({unsplittable} of them have both "
            f"parts above the binade of M, where no exact split exists); rerun CSV "
            f"{'byte-identical' if same else 'differs'}")
