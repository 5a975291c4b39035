"""
Counting convolution weights
============================

Builds the 32x32 generator with plain and generative convolutions and
counts the residual-block 3x3 kernels plus the output convolution.
"""
from gconv_lab.zoo import ArchSpec, build_model, count_weights, shape_audit

for kind in ("conv", "gconv"):
    report = count_weights(build_model(ArchSpec(32, "generator", kind), init="shape"))
    print(f"{kind:5s} {report.conv_weights:>9,d} conv weights "
          f"({report.gconv_extra:,d} from scaling/mixing matrices)")
    for layer in report.layers:
        print(f"    {layer['name']:14s} {str(layer['shape']):18s} {layer['count']:>8,d}")

print("\nshape trace of the 32x32 generator")
for name, shape in shape_audit(ArchSpec(32, "generator", "gconv")):
    print(f"  {name:14s} {shape}")
