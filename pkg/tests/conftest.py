import numpy as np


def densify_residuals(model, rng: np.random.Generator, scale: float = 0.1) -> None:
    """Fill the zero-initialized residual projections with random weight.

    Fresh models start as near-identity maps (w_o and fc2 are zero), which
    would make gradient paths through attention vanish; tests that probe
    those paths want a generic, trained-looking model instead.
    """
    cfg = model.config
    for l in range(1, cfg.depth + 1):
        model.params[f"blocks.{l}.w_o"].data[:] = \
            rng.standard_normal((cfg.dim, cfg.dim)) * scale
        model.params[f"blocks.{l}.fc2.weight"].data[:] = \
            rng.standard_normal((cfg.mlp_ratio * cfg.dim, cfg.dim)) * scale
