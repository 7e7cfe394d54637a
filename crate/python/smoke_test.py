"""Smoke test for the rectseg Python extension.

Build the extension and put it on the path, e.g.

    cargo build --release -p rectseg-py
    cp target/release/librectseg.so /tmp/rs/rectseg.so
    PYTHONPATH=/tmp/rs python3 python/smoke_test.py
"""

import math
import tempfile

import rectseg

kl = rectseg.kl_divergence(1, 1, 2, [0.8, 0.2], [0.5, 0.5])[0]
assert abs(kl - (0.8 * math.log(1.6) + 0.2 * math.log(0.4))) < 1e-9, kl

ce = rectseg.cross_entropy(1, 1, 2, [0.25, 0.75], [1])
assert abs(ce + math.log(0.75)) < 1e-9, ce

r = rectseg.rectified_loss(1, 1, 2, [0.8, 0.2], [0.5, 0.5], [0])
assert abs(r - (math.exp(-kl) * -math.log(0.8) + kl)) < 1e-9, r
tied = rectseg.rectified_loss(1, 2, 2, [0.3, 0.7, 0.9, 0.1], [0.3, 0.7, 0.9, 0.1], [1, 0])
assert abs(tied - rectseg.cross_entropy(1, 2, 2, [0.3, 0.7, 0.9, 0.1], [1, 0])) < 1e-12

assert abs(rectseg.poly_lr(50, 100, 1e-4, 0.9) - 1e-4 * 0.5**0.9) < 1e-15

try:
    rectseg.kl_divergence(1, 1, 2, [0.8, 0.2], [1.0])
except ValueError as e:
    assert str(e).startswith("shape"), e
else:
    raise AssertionError("shape mismatch accepted")

cfg = rectseg.Config("n_source=8\nn_source_test=4\nn_target=8\nn_target_test=4\nsource_iters=5\nadapt_iters=4\nheatmaps=1\n")
cfg.seed = 7
assert "seed=7" in cfg.to_text()

net = rectseg.Net.init(1, cfg)
p, pa = net.predict(4, 4, [0.5] * 48)
assert len(p) == 16 * net.classes and abs(sum(p[: net.classes]) - 1.0) < 1e-9

with tempfile.TemporaryDirectory() as d:
    before, after = rectseg.run_pipeline(cfg, d)
    assert 0.0 <= before <= 1.0 and 0.0 <= after <= 1.0
    rectseg.generate_data(cfg, f"{d}/data")
    net = rectseg.Net.load(f"{d}/adapted.ckpt")
    miou, per_class = net.evaluate(f"{d}/data/target_test")
    assert miou == after, (miou, after)
    assert len(per_class) == net.classes

print("python smoke test ok")
