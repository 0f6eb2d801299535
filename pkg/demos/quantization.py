"""
INT8 extractors next to their float originals
=============================================

Weights are quantized per tensor with a symmetric scale, activations are
calibrated on a few hundred images, and the readout stays comparable to
the float net.
"""
import numpy as np

from microt import data, device, nn, quant

x, y = data.synthetic_images(data.LOCAL_CLASSES, 600, seed=3, size=16)
net = nn.seeded_init(x.shape[1:], "conv:8:3 relu conv:16:3:2 relu conv:16:3 relu gap", 0, init="he")

qnet = quant.quantize(net, x[:256])
f_float = nn.readout(device.run_extractor(net, x[256:]))
f_int8 = nn.readout(device.run_extractor(qnet, x[256:]))

cos = (f_float * f_int8).sum() / (np.linalg.norm(f_float) * np.linalg.norm(f_int8))
print("feature cosine, float vs int8:", round(float(cos), 5))
print("largest absolute feature difference:", float(np.abs(f_float - f_int8).max()))

# a quantized weight is an int8 tensor plus one float scale
q = quant.quantize_tensor(np.array([-1.0, -0.25, 0.0, 0.5, 1.0]))
print("int8 values:", q.values.tolist(), "scale:", q.scale)
