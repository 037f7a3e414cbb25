"""What the 1.5-entmax projection does to a logit vector.

Softmax keeps every coordinate positive no matter how lopsided the logits
get. This projection instead hits exact zeros once a coordinate falls far
enough behind, which is what lets a learned mask *select* features instead
of merely down-weighting them. Run it and watch the support shrink as the
same direction vector is scaled up.
"""

import numpy as np

from danet import Rng, entmax15, entmax15_backward

if __name__ == "__main__":
    np.set_printoptions(precision=4, suppress=True)
    rng = Rng(7)

    z = np.array([1.2, 0.8, 0.3, -0.1, -0.6])
    print("direction", z)
    for scale in (0.5, 1.0, 2.0, 4.0, 8.0):
        p = entmax15(scale * z).probs
        live = int(np.count_nonzero(p))
        print(f"  scale {scale:3.1f} -> {p}   support {live}/5")

    # the two-logit endpoints have closed forms worth eyeballing
    print("\n[1, 0]  ->", entmax15(np.array([1.0, 0.0])).probs)
    print("[10, 0] ->", entmax15(np.array([10.0, 0.0])).probs, "(saturated)")

    # invariances: adding a constant or permuting does the obvious thing
    u = rng.standard_normal(6)
    p = entmax15(u).probs
    print("\nshift invariance err:",
          float(np.max(np.abs(entmax15(u + 37.0).probs - p))))
    perm = rng.permutation(6)
    print("permutation equivariance err:",
          float(np.max(np.abs(entmax15(u[perm]).probs - p[perm]))))

    # the vector-Jacobian product only moves mass inside the support
    res = entmax15(np.array([2.0, 1.5, 0.2, -3.0]))
    g = np.array([1.0, 0.0, 0.0, 5.0])
    dz = entmax15_backward(res, g)
    print("\nprobs   ", res.probs)
    print("upstream", g)
    print("dz      ", dz, " (zeroed coordinate gets no gradient)")
