"""Independent reference computations. None of these call into the code they check."""

import numpy as np

from fundus_dr._rng import Xoshiro256


def dense_gaussian_blur(channel, sigma, truncate=4.0):
    """Brute-force 2-D convolution with a sampled, normalized isotropic Gaussian.

    Builds the full 2-D kernel (not separable passes) and pads by mirroring
    with the edge sample repeated.
    """
    radius = int(truncate * sigma + 0.5)
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    kernel = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    kernel /= kernel.sum()
    channel = np.asarray(channel, dtype=np.float64)
    h, w = channel.shape
    padded = np.pad(channel, radius, mode="symmetric")
    acc = np.zeros_like(channel)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            acc += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return acc


def local_average_reference(channel, sigma, gain=4.0, offset=128.0):
    out = gain * (np.asarray(channel, float) - dense_gaussian_blur(channel, sigma)) + offset
    return np.rint(np.clip(out, 0, 255))


def naive_mock_features(img, seed, dim):
    """Mock backbone written out with plain loops."""
    h, w, _ = img.shape
    pooled = []
    for r in range(8):
        for q in range(8):
            r0, r1 = r * h // 8, (r + 1) * h // 8
            c0, c1 = q * w // 8, (q + 1) * w // 8
            for ch in range(3):
                cell = img[r0:r1, c0:c1, ch].astype(float)
                pooled.append(cell.sum() / 255.0 / cell.size)
    rng = Xoshiro256(seed)
    bits = []
    while len(bits) < dim * 192:
        word = rng.next_u64()
        bits.extend((word >> k) & 1 for k in range(64))
    out = []
    for d in range(dim):
        s = sum((1 if bits[d * 192 + k] else -1) * pooled[k] for k in range(192))
        out.append(max(0.0, s))
    return np.array(out, dtype=np.float32)


def head_mean_loss(W1, b1, W2, b2, F, T):
    """Mean cosine loss of the ReLU/softmax head, computed sample by sample."""
    total = 0.0
    for f, t in zip(F, T):
        h = np.maximum(W1 @ f + b1, 0.0)
        z = W2 @ h + b2
        e = np.exp(z - z.max())
        p = e / e.sum()
        total += 1.0 - p @ t / (np.linalg.norm(p) * np.linalg.norm(t))
    return total / len(F)


def finite_difference_gradient(W1, b1, W2, b2, F, T, step=1e-4):
    """Central differences of :func:`head_mean_loss` for every parameter entry."""
    params = [np.array(a, dtype=np.float64) for a in (W1, b1, W2, b2)]
    grads = []
    for a in params:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + step
            up = head_mean_loss(*params, F, T)
            a[idx] = orig - step
            down = head_mean_loss(*params, F, T)
            a[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-7):
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a), np.asarray(n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def nearest_centroid_accuracy(X_train, y_train, X_test, y_test):
    c0 = X_train[y_train == 0].mean(axis=0)
    c1 = X_train[y_train == 1].mean(axis=0)
    d0 = np.linalg.norm(X_test - c0, axis=1)
    d1 = np.linalg.norm(X_test - c1, axis=1)
    return float(np.mean((d1 < d0).astype(int) == y_test))


def ramp_image(size=300):
    i, j, c = np.meshgrid(np.arange(size), np.arange(size), np.arange(3), indexing="ij")
    return ((i * 7 + j * 3 + c * 50) % 256).astype(np.uint8)


def bright_disc(size=300, pad=0, value=(200, 120, 60)):
    """A disc touching all four edges of a ``size`` square, padded with zeros."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    inside = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2
    img = np.zeros((size, size, 3), dtype=np.uint8)
    img[inside] = value
    return np.pad(img, ((pad, pad), (pad, pad), (0, 0)))


def gradient_instance(seed, d=5, h=3, n=4, margin=1e-3):
    """Random head weights, batch and one-hot targets, as plain arrays.

    Redraws until every hidden preactivation sits at least ``margin`` away
    from the ReLU kink, where central differences are not meaningful.
    """
    rng = np.random.default_rng(seed)
    while True:
        W1, b1 = rng.normal(size=(h, d)), rng.normal(size=h)
        W2, b2 = rng.normal(size=(2, h)), rng.normal(size=2)
        F = rng.normal(size=(n, d))
        if np.min(np.abs(F @ W1.T + b1)) > margin:
            T = np.eye(2)[rng.integers(0, 2, n)]
            return (W1, b1, W2, b2), F, T
