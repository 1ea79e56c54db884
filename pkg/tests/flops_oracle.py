"""Resource counting by walking an executed network, independent of space.count_resources."""

import numpy as np

from oneshot_nas.nn import Conv2d, DepthwiseConv2d, Linear, SqueezeExcite


def walk_resources(view, resolution, in_channels=3):
    """(MACs, params) of one forward pass of ``view`` on a single image."""
    macs = 0

    def wrap(layer):
        fwd = layer.forward

        def counted(x, mode="train"):
            nonlocal macs
            out = fwd(x, mode)
            w = layer.params.get("w", layer.params.get("w1"))
            if isinstance(layer, Conv2d):
                macs += int(np.prod(out.shape[1:3])) * w.size
            elif isinstance(layer, DepthwiseConv2d):
                macs += int(np.prod(out.shape[1:3])) * w.size
            elif isinstance(layer, Linear):
                macs += w.size
            elif isinstance(layer, SqueezeExcite):
                macs += layer.params["w1"].size + layer.params["w2"].size
            return out

        layer.forward = counted

    layers = list(view.layers())
    for layer in layers:
        wrap(layer)
    try:
        view.forward(np.zeros((1, resolution, resolution, in_channels)), "eval")
    finally:
        for layer in layers:
            del layer.forward
    params = sum(p.size for layer in layers for p in layer.params.values())
    return macs, int(params)
