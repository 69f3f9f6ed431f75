"""Decoder attention maps of one sample, with the token-block boundaries needed to read them."""

from __future__ import annotations

import numpy as np

from .decoder import TokenLayout

BLOCKS = ("pred", "meas", "side", "main")


def attention_dump(model, inputs: dict, sample: int = 0) -> dict:
    """Forward one batch and return ``{"shape", "layout", "blocks", "attention"}`` for ``sample``.

    ``attention`` is ``depth x heads x T x T`` (rows are queries).  ``blocks``
    maps each token group to its ``[start, stop)`` range.
    """
    out = model(inputs)
    att = np.asarray(out.attention[sample], dtype=np.float64)
    layout = out.layout
    return {
        "shape": list(att.shape),
        "layout": layout.to_dict(),
        "blocks": {k: [s.start, s.stop] for k, s in layout.slices().items()},
        "attention": att.tolist(),
    }


def block_view(dump: dict, query: str, key: str) -> np.ndarray:
    """Sub-matrices ``(depth, heads, |query|, |key|)`` between two token groups."""
    att = np.asarray(dump["attention"])
    q0, q1 = dump["blocks"][query]
    k0, k1 = dump["blocks"][key]
    return att[..., q0:q1, k0:k1]


def layout_from_dump(dump: dict) -> TokenLayout:
    d = dump["layout"]
    return TokenLayout(d["n_pred"], d["n_meas"], d["n_side"], d["n_main"])
