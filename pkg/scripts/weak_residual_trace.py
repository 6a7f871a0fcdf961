"""Weak-formulation residual for the random-coefficient instance, with and
without the product-rule trace term, across three noise grids.

usage: python3 scripts/weak_residual_trace.py [n_paths]

For a random coefficient, E[R^2] settles at E[tr^2] > 0 under refinement,
while E[(R - tr)^2] keeps falling.
"""
import sys

from parametrix_spde import malliavin as ml
from parametrix_spde import mild_solution as ms
from parametrix_spde.config import ExperimentConfig
from parametrix_spde.suites import Context, MildSetup


def main(n_paths=400):
    ctx = Context(ExperimentConfig())
    st = MildSetup(ctx)
    s = st.s
    test = ms.bump(s.test_radius)
    finest = ml.simulate_paths(st.spec, n_paths, s.T / (4 * s.n_cells), seed=ctx.cfg.sub_seed("trace"),
                               T=s.T)
    ml.first_variation(finest, st.spec)
    bundles = [ms.coarsen(ms.coarsen(finest, st.spec), st.spec), ms.coarsen(finest, st.spec), finest]
    bc = ms.BankConfig()
    print(f"{'cells':>6} {'E[R^2]':>12} {'se':>10} {'E[(R-tr)^2]':>12} {'se':>10}")
    for level, b in enumerate(bundles):
        cfg = bc
        for _ in range(level):
            cfg = cfg.refined()
        bank = ms.bank_for(st.model, st.noise, s.T, st.x, cfg)
        r = ms.weak_solution_residual(bank, b, test, s.T)
        m2, se2 = r.trace_corrected()
        print(f"{len(b.times) - 1:6d} {r.mean_square:12.4e} {r.std_error:10.2e} {m2:12.4e} {se2:10.2e}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 400)
