"""Gated residual units and their stacking fashions.

A walk through the core building block: one unit maps z to
z + alpha * f(z) + beta, and a stack of such units is either a flow-shaped
chain or a U-shaped encoder/decoder with skip connections. We check the
identities that make the gates trustworthy, then watch a deep stack of
scaled-down units converge to its continuous-depth ODE limit.
"""

import numpy as np

from nrdm import (GateParams, Mapper, MapperSpec, StackModel, Tensor,
                  flow_stack_forward, mrs_forward, u_stack_forward,
                  variant_forward)

# ------------------------------------------------------------------
# One unit. With the gates at (alpha, beta) = (1, 0) this is a plain
# residual block; at (0, 0) it is the identity.

mapper = Mapper(MapperSpec("linear-scalar", 1), scalar_init=2.0)  # f(z) = 2z
print("plain residual :", mrs_forward([1.0], mapper, GateParams(Tensor([1.0]), Tensor([0.0]))).tolist())
print("identity gates :", mrs_forward([1.0], mapper, GateParams(Tensor([0.0]), Tensor([0.0]))).tolist())
print("scaled + shift :", mrs_forward([1.0], mapper, GateParams(Tensor([0.5]), Tensor([0.3]))).tolist())

# The five residual variants place the gates differently. v3 (plain) and
# v4 (scale-only) coincide with the gated form at the right gate values:
g = GateParams(Tensor([1.0]), Tensor([0.0]))
z = np.array([0.7])
assert variant_forward(z, mapper, g, "v0").tolist() == variant_forward(z, mapper, g, "v3").tolist()
print("v0 == v3 at (1, 0), bitwise")

# ------------------------------------------------------------------
# Flow-shaped stacking: z_{i+1} = z_i + alpha f(z_i) + beta. With f(z) = z
# and unit gates the state doubles at every depth.

model = StackModel.build("flow", 4, 1, "linear-scalar", scalar_init=1.0)
out, states = flow_stack_forward([1.0], model)
print("doubling chain :", [s.tolist()[0] for s in states])

# ------------------------------------------------------------------
# U-shaped stacking: a gated read-in chain, a mirror point, and a decoder
# that consumes each encoder state exactly once through a skip connection.

umodel = StackModel.build("u", 4, 1, "linear-scalar", scalar_init=1.0)
for ml, mr in umodel.mappers:
    ml.p["a"] = Tensor([2.0])
out, enc, dec = u_stack_forward([1.0], umodel)
print("encoder states :", [e.tolist()[0] for e in enc])
print("decoder states :", [d.tolist()[0] for d in dec])

# ------------------------------------------------------------------
# Continuous-depth limit: scale the gates by 1/L and the stack becomes an
# Euler discretization of dz/dt = alpha * a * z + beta. The gap to the
# closed-form solution halves as the depth doubles.

alpha, beta, a, z0 = 0.7, 0.3, 0.5, 1.3
c = beta / (alpha * a)
exact = (z0 + c) * np.exp(alpha * a) - c
print(f"\nclosed-form z(1) = {exact:.8f}")
prev = None
for L in (16, 32, 64, 128):
    m = StackModel.build("flow", L, 1, "linear-scalar", scalar_init=a,
                         alpha_init=alpha / L, beta_init=beta / L)
    got, _ = flow_stack_forward([z0], m)
    err = abs(got.item() - exact)
    note = f"  ratio vs previous depth: {prev / err:.2f}" if prev else ""
    print(f"L = {L:4d}: error {err:.2e}{note}")
    prev = err
