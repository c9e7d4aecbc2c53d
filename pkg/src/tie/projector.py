"""Visual-token projector: spatial pooling plus a 2-layer MLP to the
decoder width, with optional truncation of trailing tokens.

Default order pools first (channel-concatenating each DxD neighborhood,
pixel-unshuffle style) and then projects. `project_order="mlp-pool"`
flips to project-then-mean-pool for comparison; the two orders are not
parameter compatible.
"""

from dataclasses import dataclass

from . import tensor as T


@dataclass
class ProjectorConfig:
    pool_d: int = 2
    d_ie: int = 32
    d_llm: int = 64
    l_cut: int = 0
    mlp_hidden: int = 128
    project_order: str = "pool-mlp"  # | "mlp-pool"

    def __post_init__(self):
        if self.project_order not in ("pool-mlp", "mlp-pool"):
            raise ValueError("project_order must be pool-mlp or mlp-pool")
        if self.l_cut < 0:
            raise ValueError("l_cut must be >= 0")


def init_projector_params(cfg, rng):
    r = rng.stream("projector")
    d_in = cfg.d_ie * cfg.pool_d * cfg.pool_d if cfg.project_order == "pool-mlp" else cfg.d_ie
    return {
        "mlp1.w": T.parameter(r.stream("mlp1"), (d_in, cfg.mlp_hidden)),
        "mlp1.b": T.zeros((cfg.mlp_hidden,), requires_grad=True),
        "mlp2.w": T.parameter(r.stream("mlp2"), (cfg.mlp_hidden, cfg.d_llm)),
        "mlp2.b": T.zeros((cfg.d_llm,), requires_grad=True),
    }


def _mlp(x, params):
    h = T.gelu(T.add(T.matmul(x, params["mlp1.w"]), params["mlp1.b"]))
    return T.add(T.matmul(h, params["mlp2.w"]), params["mlp2.b"])


def _pool_concat(x, grid_rows, grid_cols, d, pool):
    # (..., rows*cols, d) -> (..., rows*cols/pool^2, pool*pool*d), raster order
    lead = x.shape[:-2]
    nl = len(lead)
    x = T.reshape(x, lead + (grid_rows // pool, pool, grid_cols // pool, pool, d))
    x = T.permute(x, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return T.reshape(x, lead + ((grid_rows // pool) * (grid_cols // pool), pool * pool * d))


def downsample_project(u, grid_rows, grid_cols, cfg, params):
    """Map encoder output (..., N_IE, d_ie) to visual tokens (..., N, d_llm).

    `grid_rows`/`grid_cols` are the patch-grid dims of one tile; N_IE must
    equal their product and pool_d must divide both.
    """
    if u.shape[-2] != grid_rows * grid_cols:
        raise ValueError("token count does not match the patch grid")
    if grid_rows % cfg.pool_d or grid_cols % cfg.pool_d:
        raise ValueError("pool_d must divide the patch grid sides")
    d = u.shape[-1]
    if cfg.project_order == "pool-mlp":
        return _mlp(_pool_concat(u, grid_rows, grid_cols, d, cfg.pool_d), params)
    projected = _mlp(u, params)
    pooled = _pool_concat(projected, grid_rows, grid_cols, cfg.d_llm, cfg.pool_d)
    lead = pooled.shape[:-1]
    n2 = cfg.pool_d * cfg.pool_d
    stack = T.reshape(pooled, lead + (n2, cfg.d_llm))
    return T.mul(T.tsum(stack, axis=len(lead)), 1.0 / n2)


def truncate_1d(v, l_cut):
    """Keep the first N - l_cut tokens in raster order."""
    n = v.shape[-2]
    if l_cut >= n:
        raise ValueError(f"l_cut {l_cut} must be < token count {n}")
    if l_cut == 0:
        return v
    return T.narrow(v, v.ndim - 2, 0, n - l_cut)
