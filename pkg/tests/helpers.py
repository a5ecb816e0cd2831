"""Shared test utilities: finite differences and tiny image fixtures."""
import numpy as np
from PIL import Image


def central_difference(f, x, eps=1e-5):
    """Numeric gradient of scalar-valued f at array x via central differences."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = f(x)
        flat[k] = orig - eps
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    """Elementwise relative error with a scale floor for near-zero gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def write_png(path, array):
    """Write a uint8 array (HxW grayscale or HxWx3) as a PNG."""
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def solid_image(side, value):
    return np.full((side, side, 3), value, dtype=np.uint8)
