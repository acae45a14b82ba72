"""Checking analytic gradients against central differences.

Every differentiable op has a registered case; the suite compares the
backward pass with a finite-difference estimate on a random probe.
"""

# %%
import numpy as np

from nilmtx import gradcheck
from nilmtx import numerics as nx
from nilmtx.numerics import RngStream, Tensor

print(len(gradcheck.CASE_NAMES), "cases:", ", ".join(gradcheck.CASE_NAMES))

# %%
# A single op by hand: layer norm over the last axis.
rng = RngStream(0)
x = Tensor(rng.normal((4, 6)), requires_grad=True)
g = Tensor(rng.normal((6,)), requires_grad=True)
b = Tensor(rng.normal((6,)), requires_grad=True)
probe = rng.normal((4, 6))
err = nx.grad_check(lambda: nx.weighted_sum(nx.layer_norm(x, g, b), probe), [x, g, b])
print(f"layer_norm max relative error {err:.2e}")

# %%
for r in gradcheck.run_suite():
    flag = "ok" if r.max_rel_error <= r.tolerance else "FAIL"
    print(f"{flag:4} {r.name:22} {r.max_rel_error:.2e} (tol {r.tolerance:.0e})")

# %%
# The errors sit near the finite-difference noise floor.
errs = np.array([r.max_rel_error for r in gradcheck.run_suite(["matmul", "softmax_rows", "conv1d"])])
print(errs)
