"""Central finite-difference gradient oracle for the architecture tests.

Independent of autograd: perturbs every element of every trainable
parameter tensor by +/-eps in double precision and compares the numeric
slope of the mean BCE loss against the analytic gradient.
"""

import torch

from cardiofuse.training import bce_loss


def max_relative_gradient_error(module, forward, inputs, labels, eps=1e-5):
    """Worst elementwise relative error between analytic and numeric grads.

    Relative error uses max(|analytic|, |numeric|, 1e-6) as the denominator
    so near-zero gradients are judged on an absolute scale where the
    O(eps^2) finite-difference noise lives.
    """
    module.double().eval()
    inputs = tuple(t.double() for t in inputs)
    labels = labels.double()
    params = [p for p in module.parameters() if p.requires_grad]
    assert params, "module has no trainable parameters"

    def loss_value():
        return bce_loss(forward(module, *inputs), labels).mean()

    analytic = torch.autograd.grad(loss_value(), params)
    worst = 0.0
    with torch.no_grad():
        for param, grad in zip(params, analytic):
            flat = param.reshape(-1)
            grad_flat = grad.reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                hi = loss_value().item()
                flat[i] = original - eps
                lo = loss_value().item()
                flat[i] = original
                numeric = (hi - lo) / (2.0 * eps)
                a = grad_flat[i].item()
                denom = max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, abs(a - numeric) / denom)
    return worst
