"""Library walkthrough on the Fredholm preset.

Runs Q-GKB with empirical-Bayes λ, prints the per-step trace with the
error bounds, and checks the bounds against the dense oracle.

    python3 demos/walkthrough.py
"""

import numpy as np

from dsbayes import (
    DenseProblem,
    InferenceConfig,
    PRESET_SEEDS,
    PRESETS,
    build_problem,
    posterior_gap,
    run_inference,
    sqrt_form,
    trace_seeds,
)


def main() -> None:
    inst = build_problem(PRESETS["fredholm-small"], PRESET_SEEDS["fredholm-small"])
    seeds = trace_seeds(inst.forward, inst.prior, inst.noise_cov)
    p = DenseProblem.from_instance(inst)
    sf = sqrt_form(p)
    gaps = []

    def record(k, state, approx):
        gaps.append(posterior_gap(p, approx.lam, state.V_k(k), approx.B.matrix, approx.xi, sf))

    approx, trace, diag = run_inference(
        inst.forward, inst.prior, inst.noise_cov, inst.y, InferenceConfig(),
        seeds=tuple(seeds), x_true=inst.x_true, callback=record,
    )
    b = diag.bounds
    print(f"{'k':>3} {'lambda':>12} {'rel_err':>9} {'dF':>10} {'dF bound':>10} {'resolved':>8}")
    for i, rec in enumerate(trace.records):
        print(f"{rec.k:3d} {rec.lam:12.6g} {diag.rel_error[i]:9.4f} {gaps[i]['dF']:10.3e} "
              f"{b.dF_bound[i]:10.3e} {str(bool(b.resolved[i])):>8}")
    print(f"stopped: {diag.stop_reason} at k = {approx.k}, sigma estimate {1 / np.sqrt(approx.lam):.4f}")


if __name__ == "__main__":
    main()
