"""
One anchor, several rates
=========================

Trains a deliberately tiny anchor, then derives two quantizer pairs at
smaller lambda with the network frozen. One image is coded at each
operating point and at blends between the two derivations.

The point is the mechanics. Derivation files are a few hundred bytes while
the anchor stays untouched, and every stream decodes bitwise identically
from the registry. A model this small, trained for under half a minute on
one synthetic image, barely separates its operating points, so the printed
bpp values need not be ordered. The acceptance suite (tests/test_acceptance.py) shows the ordered
rate ladder with a desk-sized anchor trained on real pictures.
"""

import tempfile
from pathlib import Path

import numpy as np

from svrc import codec
from svrc import eval as ev
from svrc import quantizer as qz
from svrc.model_io import Registry
from svrc.train import PatchDataset, TrainConfig, refine_derivation, train_anchor

rng = np.random.default_rng(0)
yy, xx = np.mgrid[0:128, 0:128] / 127.0
image = np.clip(np.stack([xx, yy, 0.5 * (xx + yy)]) + rng.normal(0, 0.04, (3, 128, 128)), 0, 1)
data = PatchDataset([image])

tiny = dict(M=8, N=4, levels_main=16, levels_hyper=12, init_range=6.0, batch=2, patch=64)

# Train the anchor, the only model that owns network weights.
anchor = train_anchor(data, TrainConfig(lam=0.01, steps=800, learning_rate=1e-3, **tiny))
digest = anchor.weights_digest()

# Each derivation retrains only the two quantizers at a smaller lambda.
# The second one starts from the first one's quantizers.
d1 = refine_derivation(anchor, 0.002, data, TrainConfig(lam=0.002, steps=300, learning_rate=3e-3, **tiny), "D1")
d2 = refine_derivation(anchor, 0.0005, data, TrainConfig(lam=0.0005, steps=300, learning_rate=3e-3, **tiny), "D2",
                       start=(d1.stanh_main, d1.stanh_hyper))
assert anchor.weights_digest() == digest, "refinement must not touch the anchor"
print("parameters per derivation:", d1.num_parameters)

with tempfile.TemporaryDirectory() as tmp:
    registry = Registry(Path(tmp))
    registry.save_anchor(anchor)
    registry.save_derivation(d1)
    registry.save_derivation(d2)
    print("anchor file bytes    :", registry.anchor_path("A1").stat().st_size)
    print("derivation file bytes:", registry.derivation_path("A1", "D1").stat().st_size)

    def code(label, layers=None, ref=None):
        result = codec.encode_image(image, anchor, layers, ref, return_details=True)
        decoded = codec.decode_image(result.stream.to_bytes(), registry)
        assert np.array_equal(decoded, result.x_hat)
        rate = ev.bpp(result.stream, 128, 128)
        print(f"{label:>14s}: {rate:.4f} bpp, {ev.psnr(image, decoded):.2f} dB")

    code("anchor")
    for d in (d1, d2):
        code(d.derivation_id, (d.stanh_main, d.stanh_hyper), codec.LayerRef.derivation(d.derivation_id))
    for rho in (0.25, 0.5, 0.75):
        ref = codec.LayerRef.interpolation("D1", "D2", rho)
        layers = (qz.interpolate(d1.stanh_main, d2.stanh_main, ref.rho),
                  qz.interpolate(d1.stanh_hyper, d2.stanh_hyper, ref.rho))
        code(f"D1-D2@{rho}", layers, ref)
