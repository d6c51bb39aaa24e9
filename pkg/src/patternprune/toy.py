"""Small reference network used by the examples and the acceptance suite."""
from __future__ import annotations

import numpy as np

from .tensor import Activation, ConvLayer, ConvModel, DenseLayer

TOY_INPUT = (3, 16, 16)


def toy_model(seed: int = 0, classes: int = 2) -> ConvModel:
    """3 -> 8 -> 8 -> 16 channel ReLU conv stack on 16x16 inputs, then a linear head.

    All convs are 3x3 with padding 1; the second and third use stride 2, so
    the head sees 16 x 4 x 4 features.  He-normal weights, small positive bias.
    """
    rng = np.random.default_rng(seed)

    def conv(out_c, in_c, stride):
        w = rng.standard_normal((out_c, in_c, 3, 3)) * np.sqrt(2.0 / (in_c * 9))
        return ConvLayer(w.astype(np.float32), np.full(out_c, 0.01, np.float32), stride, 1,
                         Activation.RELU)

    layers = [conv(8, 3, 1), conv(8, 8, 2), conv(16, 8, 2)]
    features = 16 * 4 * 4
    head = DenseLayer((rng.standard_normal((classes, features)) / np.sqrt(features))
                      .astype(np.float32), np.zeros(classes, np.float32), Activation.IDENTITY)
    return ConvModel(layers, TOY_INPUT, head)
