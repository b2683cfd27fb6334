"""A look inside the reverse-mode tape the trainer runs on.

Builds a two-layer block out of the same kernels the full model uses,
checks its gradients against central finite differences, and shows how
freezing parameters shrinks the recorded backward work.

    python3 demos/gradient_machinery.py
"""

import numpy as np

from skiff import kernels as K
from skiff.kernels import GradTape, Tensor, grad_check


def main() -> None:
    rng = np.random.default_rng(0)

    print("== a scalar chain, by hand ==")
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    with GradTape() as tape:
        y = K.reduce_sum(K.mul(x, x))  # d/dx sum(x^2) = 2x
    tape.backward(y)
    print(f"x = {x.data},  d sum(x^2)/dx = {x.grad}  (expected {2 * x.data})")

    print("\n== finite differences vs the tape ==")
    d = 4
    gain = Tensor(rng.standard_normal(d))
    bias = Tensor(rng.standard_normal(d))
    w1 = Tensor(rng.standard_normal((2 * d, d)))
    w2 = Tensor(rng.standard_normal((d, 2 * d)))

    def block(p: Tensor) -> Tensor:
        h = K.layer_norm(p, gain, bias)
        h = K.linear(K.relu(K.linear(h, w1)), w2)
        return K.reduce_sum(K.mul(h, h))

    point = Tensor(rng.standard_normal((3, d)))
    err = grad_check(block, point)
    print(f"norm -> ffn -> square block: worst relative error {err:.2e}")

    print("\n== freezing removes backward records ==")
    x = Tensor(rng.standard_normal((3, d)).astype(np.float32))
    weights = [Tensor(rng.standard_normal((d, d)).astype(np.float32),
                      requires_grad=True) for _ in range(3)]

    def forward() -> Tensor:
        h = x
        for w in weights:
            h = K.relu(K.linear(h, w))
        return K.reduce_sum(h)

    with GradTape() as tape:
        loss = forward()
    tape.backward(loss)
    full = tape.backward_ops

    weights[0].requires_grad = False
    weights[1].requires_grad = False
    with GradTape() as tape:
        loss = forward()
    tape.backward(loss)
    frozen = tape.backward_ops
    print(f"backward records: {full} with all weights live, "
          f"{frozen} with two of three frozen")
    print("Records are only emitted for outputs that can reach a live")
    print("parameter, so frozen submodels cost nothing in the backward pass.")


if __name__ == "__main__":
    main()
