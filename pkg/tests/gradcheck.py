"""Central finite-difference oracle, independent of the tape."""

import numpy as np


def numeric_grad(fn, arr, eps=1e-5, indices=None):
    """d fn() / d arr at ``indices`` (all elements by default); ``arr`` is perturbed in place."""
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        plus = fn()
        flat[i] = orig - eps
        minus = fn()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * eps)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for i, n in numeric.items():
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - n) / max(abs(n), floor))
    return worst


def check_op(op, *arrays, seed=0, eps=1e-5, max_probes=None):
    """Gradient of sum(op(*tensors) * R) for a fixed random R, analytic vs numeric, per input.

    Returns the worst relative error over all checked elements.
    """
    from mapchange.tensor import Tensor

    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    weights = rng.standard_normal(out.shape)

    def value():
        return float((op(*[Tensor(a) for a in arrays]).data * weights).sum())

    from mapchange import tensor as T

    T.sum_all(T.mul(out, Tensor(weights))).backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        idx = None
        if max_probes is not None and a.size > max_probes:
            idx = rng.choice(a.size, max_probes, replace=False)
        num = numeric_grad(value, a, eps, idx)
        worst = max(worst, max_rel_error(t.grad, num))
    return worst


def tiny_triplet_batch(num_classes=3, n=2, size=8, seed=0):
    """Random images, a valid historical map and labels for a small forward pass."""
    rng = np.random.default_rng(seed)
    i1 = rng.uniform(0, 1, (n, 3, size, size))
    i2 = rng.uniform(0, 1, (n, 3, size, size))
    hist = rng.integers(0, num_classes, (n, size, size))
    gt1 = rng.integers(0, num_classes, (n, size, size))
    gt2 = rng.integers(0, num_classes, (n, size, size))
    change = (gt1 != gt2).astype(float)
    onehot = np.moveaxis(np.eye(num_classes)[hist], -1, 1)
    return i1, i2, onehot, gt1, gt2, change


def composite_probes(config, n_probes=24, seed=0, eps=1e-5):
    """Finite-difference probes of the full triplet forward + combined loss.

    Probes are spread over every parameter tensor (round robin) and both input images.
    Returns a list of (name, flat index, analytic, numeric, relative error).
    """
    from mapchange.losses import combined_loss
    from mapchange.net import TripletNetwork
    from mapchange.tensor import Tensor

    model = TripletNetwork(config)
    i1, i2, onehot, gt1, gt2, change = tiny_triplet_batch(config.num_classes, seed=seed)

    def loss(track=False):
        t1, t2 = Tensor(i1, requires_grad=track), Tensor(i2, requires_grad=track)
        return combined_loss(model(t1, t2, Tensor(onehot)), gt1, gt2, change).tensor, t1, t2

    model.zero_grad()
    total, t1, t2 = loss(track=True)
    total.backward()
    targets = [(name, p.data, p.grad) for name, p in model.named_parameters().items()]
    targets += [("image_t1", i1, t1.grad), ("image_t2", i2, t2.grad)]

    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(len(targets))
    probes = []
    for j in range(n_probes):
        name, arr, grad = targets[order[j % len(targets)]]
        idx = int(rng.integers(arr.size))
        num = numeric_grad(lambda: float(loss()[0].data), arr, eps, [idx])[idx]
        ana = float(grad.reshape(-1)[idx])
        probes.append((name, idx, ana, num, abs(ana - num) / max(abs(num), 1e-6)))
    return probes
