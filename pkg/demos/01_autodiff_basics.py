# Walk through the tensor core: build small graphs, differentiate them, and
# cross-check the gradients with central finite differences.

import numpy as np

from ovdet.gradcheck import grad_check
from ovdet.optim import SGD, Parameter
from ovdet.tensor import Tensor, conv2d, cross_entropy, matmul, mul, relu, softmax, tsum

# A tensor that requires gradients is a leaf of the differentiation graph.
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
loss = tsum(mul(x, x))  # sum of squares
loss.backward()
print("d/dx sum(x^2) at [1,2,3]:", x.grad)  # [2, 4, 6]

# Softmax of uniform logits is uniform; rows always sum to one.
print("softmax([0,0,0]) =", softmax(Tensor(np.zeros(3)), axis=0).data)

# Convolution with an all-ones kernel sums each window.
image = Tensor(np.ones((1, 1, 4, 4)))
kernel = Tensor(np.ones((1, 1, 2, 2)))
print("conv2d 4x4 ones, 2x2 ones kernel, stride 2:\n", conv2d(image, kernel, stride=2).data[0, 0])

# Cross-entropy from logits: uniform two-way logits give the softmax-minus-onehot gradient.
logits = Tensor(np.zeros((1, 2)), requires_grad=True)
cross_entropy(logits, [0]).backward()
print("cross-entropy gradient at uniform logits:", logits.grad)  # [-0.5, 0.5]

# Finite differences agree with the tape for an arbitrary composite function.
rng = np.random.default_rng(0)
a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
report = grad_check(lambda: tsum(relu(matmul(a, b))), [a, b], tol=1e-4)
print("grad check of sum(relu(a@b)):", report)

# One momentum-SGD step with global-norm clipping.
w = Parameter("w", Tensor(np.array([0.0, 0.0], dtype=np.float32), requires_grad=True))
w.tensor.grad = np.array([3.0, 4.0], dtype=np.float32)  # norm 5
SGD([w], lr=1.0, clip_norm=1.0).step()
print("after one clipped step:", w.data)  # moved by the unit-norm direction [0.6, 0.8]
