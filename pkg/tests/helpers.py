"""Shared test utilities, chiefly the finite-difference gradient oracle."""

import torch

from latent_talker.core import seeded_generator


def directional_grad_check(fn, tensors, rel_tol=1e-3, eps=1e-5, seed=0, abs_floor=1e-9):
    """Compare autograd against a central finite difference.

    ``fn`` recomputes a scalar loss from scratch; ``tensors`` are the leaf
    tensors (parameters or inputs, requires_grad=True) to probe.  Each tensor
    is probed along one random unit direction, which exercises every
    coordinate of the gradient at once.
    """
    tensors = list(tensors)
    loss = fn()
    grads = torch.autograd.grad(loss, tensors)
    gen = seeded_generator(seed, "fd-probe")
    for p, g in zip(tensors, grads):
        v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
        v = v / v.norm().clamp_min(1e-12)
        with torch.no_grad():
            p.add_(eps * v)
        f_plus = float(fn().detach())
        with torch.no_grad():
            p.sub_(2 * eps * v)
        f_minus = float(fn().detach())
        with torch.no_grad():
            p.add_(eps * v)
        fd = (f_plus - f_minus) / (2 * eps)
        analytic = float((g * v).sum())
        err = abs(fd - analytic)
        tol = rel_tol * max(abs(fd), abs(analytic)) + abs_floor
        assert err <= tol, (
            f"gradient mismatch on tensor of shape {tuple(p.shape)}: "
            f"fd={fd:.10g} autograd={analytic:.10g} err={err:.3g}"
        )


def coordinate_grad_check(fn, tensor, indices, rel_tol=1e-3, eps=1e-5):
    """Finite-difference check of single gradient coordinates."""
    loss = fn()
    (grad,) = torch.autograd.grad(loss, [tensor])
    for idx in indices:
        with torch.no_grad():
            tensor[idx] += eps
        f_plus = float(fn().detach())
        with torch.no_grad():
            tensor[idx] -= 2 * eps
        f_minus = float(fn().detach())
        with torch.no_grad():
            tensor[idx] += eps
        fd = (f_plus - f_minus) / (2 * eps)
        analytic = float(grad[idx])
        err = abs(fd - analytic)
        assert err <= rel_tol * max(abs(fd), abs(analytic)) + 1e-9, (
            f"coordinate {idx}: fd={fd:.10g} autograd={analytic:.10g}"
        )


def params_of(module):
    return [p for p in module.parameters() if p.requires_grad]


def snapshot_tree(root):
    """Map of relative path -> file bytes for a directory tree."""
    from pathlib import Path

    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*")) if p.is_file()
    }
