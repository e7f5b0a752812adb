"""Accuracy lost to post-hoc quantization, then recovered by retraining.

Trains a small float classifier on a procedural 10-class shape corpus,
quantizes every conv layer to 1-bit masks after the fact, and shows the
top-1 drop. Quantization-aware retraining — forward through the
quantized weights, gradients into the full-precision shadow — then
closes the gap.
"""
from qnip import config_path
from qnip.codec import build_compressed_model
from qnip.datasets import make_shapes_dataset
from qnip.engine import accuracy
from qnip.network import load_network
from qnip.train import TrainConfig, retrain_quantized, train_float

net = load_network(config_path("toynet"))
data = make_shapes_dataset(30, seed=1)
print(f"corpus: {len(data)} images, 10 shape classes, 32x32")

print()
print("=== float training ===")
result = train_float(net, data, TrainConfig(epochs=12, learning_rate=0.08,
                                            batch_size=16, seed=0))
for row in result.metrics:
    print(f"  epoch {row.epoch:>2}: loss {row.loss:.4f}  top1 {row.top1:.4f}")
float_model = result.model
float_top1, _ = accuracy(net, float_model, data)

print()
print("=== post-hoc 1-bit quantization (no retraining) ===")
posthoc = build_compressed_model(net, float_model, [1, 1, 1])
posthoc_top1, _ = accuracy(net, posthoc, data, mode="dequantized")
print(f"  float    top1 {float_top1:.4f}")
print(f"  post-hoc top1 {posthoc_top1:.4f}  "
      f"(drop {float_top1 - posthoc_top1:+.4f})")

print()
print("=== quantization-aware retraining ===")
config = TrainConfig(epochs=8, learning_rate=0.005, batch_size=16, seed=0,
                     profile=[1, 1, 1])
retrained = retrain_quantized(net, float_model, data, config)
for row in retrained.metrics:
    print(f"  epoch {row.epoch:>2}: loss {row.loss:.4f}  top1 {row.top1:.4f}")
retrained_top1, _ = accuracy(net, retrained.model, data, mode="dequantized")
print()
print(f"float {float_top1:.4f} -> post-hoc {posthoc_top1:.4f} "
      f"-> retrained {retrained_top1:.4f}")
print("the retrained 1-bit model matches the float baseline "
      f"within {abs(float_top1 - retrained_top1):.4f}")
