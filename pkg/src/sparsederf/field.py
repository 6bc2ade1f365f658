"""Positional encoding and the MLP radiance field."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import NumericError


@dataclass
class PositionalEncoding:
    max_freq: int
    include_input: bool = True

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (int(self.include_input) + 2 * self.max_freq)

    def __call__(self, x):
        return encode(x, self.max_freq, self.include_input)


def encode(x, m: int, include_input: bool = True):
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(m-1) pi x), cos(2^(m-1) pi x)]."""
    if m < 0:
        raise ValueError("number of frequencies must be non-negative")
    if m == 0:
        return x
    shape = np.shape(ad.value_of(x))
    lead, dim = shape[:-1], shape[-1]
    freqs = (2.0 ** np.arange(m) * np.pi)[:, None]
    scaled = ad.reshape(x, lead + (1, dim)) * freqs
    waves = ad.reshape(ad.stack([ad.sin(scaled), ad.cos(scaled)], axis=-2), lead + (2 * m * dim,))
    return ad.concatenate([x, waves], axis=-1) if include_input else waves


# -------------------- dense layers --------------------

def init_dense(
    rng: np.random.Generator,
    prefix: str,
    sizes: Sequence[int],
    zero_last: bool = False,
    last_scale: Optional[float] = None,
) -> Dict[str, np.ndarray]:
    """Kaiming-uniform fan-in initialization for a stack of dense layers.

    `zero_last` zeroes the final layer; `last_scale` instead draws it from
    U(-last_scale, last_scale).
    """
    params: Dict[str, np.ndarray] = {}
    n_layers = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == n_layers - 1
        if last and zero_last:
            w = np.zeros((fan_in, fan_out))
        elif last and last_scale is not None:
            w = rng.uniform(-last_scale, last_scale, size=(fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.{i}.w"] = w
        params[f"{prefix}.{i}.b"] = np.zeros(fan_out)
    return params


def dense(p: Dict[str, Any], prefix: str, x, n_layers: int, final_activation: bool = False):
    """ReLU MLP over `n_layers` dense layers named `{prefix}.{i}`."""
    h = x
    for i in range(n_layers):
        h = ad.linear(h, p[f"{prefix}.{i}.w"], p[f"{prefix}.{i}.b"])
        if i < n_layers - 1 or final_activation:
            h = ad.relu(h)
    return h


# -------------------- radiance field --------------------

@dataclass
class FieldConfig:
    depth: int = 4
    width: int = 64
    pos_freqs: int = 10
    dir_freqs: int = 4
    color_width: int = 32

    def to_item(self) -> Dict[str, int]:
        return asdict(self)


class RadianceField:
    """F(x, d) -> (rgb, sigma).

    Density is read off the trunk before the encoded direction is injected,
    so sigma never depends on d.
    """

    def __init__(self, name: str, config: FieldConfig, rng: np.random.Generator, zero_density_head: bool = False):
        self.name = name
        self.config = config
        self.pos_encoding = PositionalEncoding(config.pos_freqs)
        self.dir_encoding = PositionalEncoding(config.dir_freqs)
        pos_dim = self.pos_encoding.out_dim(3)
        dir_dim = self.dir_encoding.out_dim(3)
        c = config
        self.params: Dict[str, np.ndarray] = {}
        self.params.update(init_dense(rng, f"{name}.trunk", [pos_dim] + [c.width] * c.depth))
        self.params.update(init_dense(rng, f"{name}.sigma", [c.width, 1], zero_last=zero_density_head))
        self.params.update(init_dense(rng, f"{name}.feature", [c.width, c.width]))
        self.params.update(init_dense(rng, f"{name}.color", [c.width + dir_dim, c.color_width, 3]))

    def parameter_names(self) -> List[str]:
        return list(self.params)

    def forward(self, p: Dict[str, Any], x, d) -> Tuple[Any, Any]:
        """Evaluate at points x (..., 3) with unit view directions d (..., 3).

        `p` is the bound parameter map (tape values while training).
        """
        n = self.name
        h = dense(p, f"{n}.trunk", self.pos_encoding(x), self.config.depth, final_activation=True)
        sigma = ad.softplus(dense(p, f"{n}.sigma", h, 1))[..., 0]
        feature = dense(p, f"{n}.feature", h, 1)
        # the first color layer acts on [feature, encoded d]; its direction rows are
        # applied at the shape of d and broadcast over samples
        w0 = p[f"{n}.color.0.w"]
        width = self.config.width
        hc = ad.linear(feature, w0[:width], p[f"{n}.color.0.b"]) + ad.matmul(self.dir_encoding(d), w0[width:])
        hc = ad.linear(ad.relu(hc), p[f"{n}.color.1.w"], p[f"{n}.color.1.b"])
        rgb = ad.sigmoid(hc)
        if not isinstance(rgb, ad.Dual):
            if not (np.all(np.isfinite(rgb)) and np.all(np.isfinite(sigma))):
                raise NumericError(f"non-finite activation in field '{n}'")
        return rgb, sigma

    def __call__(self, x, d, tape: Optional[ad.Tape] = None) -> Tuple[Any, Any]:
        return self.forward(ad.bind(self.params, tape), x, d)
