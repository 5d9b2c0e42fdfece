"""Flat parameter vectors with named, shaped views."""

from __future__ import annotations

import math

import numpy as np


class ParamLayout:
    def __init__(self, shapes):
        self.shapes = dict(shapes)
        self.slices = {}
        off = 0
        for name, shape in self.shapes.items():
            n = math.prod(shape)
            self.slices[name] = slice(off, off + n)
            off += n
        self.size = off

    def views(self, flat: np.ndarray) -> dict:
        if flat.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {flat.shape}")
        return {k: flat[sl].reshape(self.shapes[k]) for k, sl in self.slices.items()}

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def init(self, rng: np.random.Generator, scale: float = 1.0, zero=()) -> np.ndarray:
        """Fan-in scaled normal init for matrices, zeros for vectors and `zero`."""
        flat = self.zeros()
        v = self.views(flat)
        for name, shape in self.shapes.items():
            if name in zero or len(shape) < 2:
                continue
            v[name][...] = rng.normal(0.0, scale / math.sqrt(shape[0]), size=shape)
        return flat
