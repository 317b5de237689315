"""Walk a tiny model and the full V1 model through one forward pass.

Prints every named intermediate tensor of the tiny network, then the
parameter and MAC budget of the full-size variants block by block.

    python3 demos/01_shapes_and_complexity.py
"""
import torch

from mambacafu import MambaCAFU, ModelConfig, count_params_flops
from mambacafu.config import shape_table

torch.manual_seed(0)
cfg = ModelConfig.tiny_config(num_classes=4, input_size=64)
model = MambaCAFU(cfg).eval()

with torch.no_grad():
    feats = model.forward_features(torch.randn(1, 3, 64, 64), check=True)

expected = shape_table(cfg)
print(f"{'tensor':<14}{'shape':<22}matches table")
for name, t in feats.items():
    shape = tuple(t.shape[1:])
    mark = "yes" if expected.get(name) == shape else ("n/a" if name not in expected else "NO")
    print(f"{name:<14}{str(shape):<22}{mark}")

# The full networks are never materialised: counting runs on the meta device.
for variant in ("V1", "V0"):
    c = count_params_flops(ModelConfig(variant=variant))
    print(f"\n{variant}: {c.params_m:.2f}M parameters, {c.gmacs:.2f} GMac at 224x224")
    print(c.table())
