"""Variable selection: one conditional flow across four regression models.

Four nested linear models (intercept-only patterns 1000, 1100, 1011,
1111) share a single conditional flow trained once on the saturated
4-d space.  Cross-model proposals route through the flow's common
reference space; the Bartolucci bridge estimator then recovers model
probabilities from the mean acceptance probabilities of proposals
evaluated on held-out posterior draws, and is compared against the
standard saturated-space baseline with wide Gaussian auxiliaries.

Run time: roughly two minutes.

Equivalent CLI pipeline:
    transportrj train    --preset variable-selection --synthetic-data --out runs/vs
    transportrj sample   --preset variable-selection --synthetic-data --out runs/vs --checkpoints runs/vs
    transportrj diagnose --preset variable-selection --synthetic-data --out runs/vs --traces runs/vs
"""

import numpy as np

from transportrj import (CtpKernel, FlowStack, StandardSaturatedKernel,
                         TrainerConfig, bbe_estimate, build_eval_set,
                         conditional_mh_source, conditional_train, vs_family,
                         vs_simulate_data)


def main():
    X, Y = vs_simulate_data(1)
    fam = vs_family(X, Y)

    print("== training the conditional flow (joint over all 4 models) ==")
    stack = FlowStack.create(dim=4, depth=8, hidden=256, context_dim=4)
    cfg = TrainerConfig(minibatch=256, learning_rate=1e-4,
                        max_iterations=10_000, seed=0)
    stack, trace = conditional_train(stack, fam, cfg)
    print(f"  stopped after {len(trace.neg_elbo)} iterations, "
          f"final loss {np.mean(trace.neg_elbo[-200:]):.2f}")

    sources = [conditional_mh_source(stack, fam, k, thin=5)
               for k in range(4)]
    q = np.exp(np.tile(fam.log_prior, (4, 1)))
    kernels = {
        "conditional transport": CtpKernel(fam, stack, index_proposal=q),
        "standard saturated":    StandardSaturatedKernel(fam,
                                                         index_proposal=q),
    }

    print("== bridge-estimator model probabilities "
          "(20 replicates, 500 eval points per model) ==")
    labels = ["(1,0,0,0)", "(1,1,0,0)", "(1,0,1,1)", "(1,1,1,1)"]
    for name, kernel in kernels.items():
        reps = []
        for i in range(20):
            rng = np.random.default_rng(1000 + i)
            acc = build_eval_set(kernel, sources, 500, rng)
            reps.append(bbe_estimate(acc, 4, anchor=3,
                                     index_proposal=kernel.q))
        reps = np.array(reps)
        med = np.median(reps, axis=0)
        iqr = np.subtract(*np.percentile(reps[:, 3], [75, 25]))
        print(f"  {name}:")
        for lab, p in zip(labels, med):
            print(f"    P[{lab}] = {p:.6f}")
        print(f"    replicate IQR for (1,1,1,1): {iqr:.2e}")
    print("The conditional-transport replicates are orders of magnitude "
          "tighter; that spread gap is the headline result.")


if __name__ == "__main__":
    main()
