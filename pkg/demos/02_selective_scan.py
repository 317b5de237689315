"""The selective scan two ways: a step-by-step loop and a blocked parallel prefix scan.

Both evaluate h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t, y_t = <C_t, h_t> + D u_t.
The demo checks that they agree, times them, and shows how SS2D reads a
feature map along its four traversal orders.

    python3 demos/02_selective_scan.py
"""
import time

import torch

from mambacafu.ssm import ScanPath, flatten_path, selective_scan, selective_scan_ref

gen = torch.Generator().manual_seed(0)
batch, length, ch, n = 2, 1024, 16, 16
u = torch.randn(batch, length, ch, generator=gen)
delta = torch.nn.functional.softplus(torch.randn(batch, length, ch, generator=gen) - 3.0)
A = -torch.arange(1.0, n + 1).repeat(ch, 1)
B, C = torch.randn(batch, length, n, generator=gen), torch.randn(batch, length, n, generator=gen)
D = torch.ones(ch)

t0 = time.perf_counter()
y_loop = selective_scan_ref(u, delta, A, B, C, D)
t1 = time.perf_counter()
y_fast = selective_scan(u, delta, A, B, C, D)
t2 = time.perf_counter()
print(f"L={length}: loop {1e3 * (t1 - t0):.1f} ms, parallel {1e3 * (t2 - t1):.1f} ms, "
      f"max |diff| {(y_loop - y_fast).abs().max():.2e}")

# Four traversal orders of a 3x4 grid labelled by raster index.
grid = torch.arange(12.0).reshape(1, 1, 3, 4)
for path in ScanPath:
    order = flatten_path(grid, path)[0, :, 0].int().tolist()
    print(f"{path.value:<7}{order}")
