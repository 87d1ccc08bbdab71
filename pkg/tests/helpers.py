import numpy as np
import torch


def fd_gradcheck(fn, tensors, n_coords=24, h=1e-6, seed=0):
    """Compare autograd against central differences at random coordinates.

    ``fn`` maps nothing to a scalar tensor and reads ``tensors`` (float64
    leaves with ``requires_grad``). Returns the relative errors.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    sizes = np.array([t.numel() for t in tensors], dtype=float)
    errors = []
    for _ in range(n_coords):
        ti = rng.choice(len(tensors), p=sizes / sizes.sum())
        flat_idx = int(rng.integers(tensors[ti].numel()))
        flat = tensors[ti].data.view(-1)
        orig = flat[flat_idx].item()
        with torch.no_grad():
            flat[flat_idx] = orig + h
            up = fn().item()
            flat[flat_idx] = orig - h
            down = fn().item()
            flat[flat_idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[ti].view(-1)[flat_idx].item()
        scale = max(abs(numeric), abs(analytic), 1e-7)
        errors.append(abs(numeric - analytic) / scale)
    return np.array(errors)


def random_masks(rng, n, size):
    """Binary masks holding one random rectangle each, never empty or full."""
    out = np.zeros((n, size, size), dtype=bool)
    for m in out:
        y0, x0 = rng.integers(0, size // 2, size=2)
        y1, x1 = y0 + rng.integers(2, size // 2 + 1), x0 + rng.integers(2, size // 2 + 1)
        m[y0:y1, x0:x1] = True
    return out


def random_pair(rng, size=16):
    """A prediction/ground-truth pair; predictions alternate between uint8 and float."""
    g = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 3)):
        y, x = rng.integers(0, size - 2, size=2)
        g[y:y + rng.integers(2, size // 2), x:x + rng.integers(2, size // 2)] = True
    if rng.random() < 0.5:
        p = rng.integers(0, 256, size=(size, size)).astype(np.uint8)
    else:
        p = np.clip(g * 0.6 + rng.normal(0.2, 0.25, size=(size, size)), 0, 1)
    return p, g
