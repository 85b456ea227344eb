#!/usr/bin/env python3
"""Smoke test for the pcdarts_py extension module.

Builds nothing itself: expects `cargo build -p pcdarts-py` (debug or release)
to have produced libpcdarts_py.so, copies it under an importable name, and
exercises every exported function once.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

TINY_CONFIG = """
[search]
k = 2
nodes = 4
layers = 3
c0 = 4
epochs = 2
warm_up_epochs = 1
batch_size = 8
seed = 5

[data]
kind = "synthetic"
classes = 2
resolution = 8
count = 32
noise = 0.2
"""


def find_cdylib() -> Path:
    candidates = [
        ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libpcdarts_py.so", "libpcdarts_py.dylib", "pcdarts_py.dll")
    ]
    for c in candidates:
        if c.exists():
            return c
    sys.exit("error: build the extension first: cargo build -p pcdarts-py")


def main() -> None:
    lib = find_cdylib()
    workdir = Path(tempfile.mkdtemp(prefix="pcdarts-smoke-"))
    shutil.copy2(lib, workdir / "pcdarts_py.so")
    sys.path.insert(0, str(workdir))
    import pcdarts_py as m

    # schedule: starts at lr0, ends near zero, never increases
    assert m.cosine_lr(0, 100, 0.1) == 0.1
    lrs = [m.cosine_lr(t, 100, 0.1) for t in range(100)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] < 1e-4
    print(f"cosine_lr: 0.1 -> {lrs[-1]:.2e} over 100 steps")

    # shuffle order is a permutation that interleaves the sampled block
    order = m.channel_shuffle_order(8, 4)
    assert sorted(order) == list(range(8))
    assert order[:2] == [0, 2], order
    print(f"channel_shuffle_order(8, 4) = {order}")

    edges = m.cell_edges(6)
    assert len(edges) == 14
    assert edges[0] == (0, 2) and edges[-1] == (4, 5)
    print(f"cell_edges(6): {len(edges)} edges, first {edges[0]}, last {edges[-1]}")

    # a real (tiny) search, checkpoint included
    arch_path = workdir / "arch.pcnt"
    result = m.search_toml(TINY_CONFIG, str(arch_path))
    assert result["aborted"] is None
    assert result["epochs"] == 2
    assert result["sgd_steps"] == 4 and result["adam_steps"] == 2
    geno = result["genotype_json"]
    parsed = json.loads(geno)
    assert len(parsed["normal"]) == 4 and parsed["concat"] == [2, 3]
    print(
        f"search_toml: {result['epochs']} epochs, "
        f"train acc {result['final_train_acc']:.3f}, "
        f"held-out acc {result['final_held_out_acc']:.3f}"
    )

    # derivation from the saved checkpoint matches the in-run derivation
    rederived = m.derive_checkpoint(str(arch_path), 4)
    assert json.loads(rederived) == parsed
    print("derive_checkpoint: matches the search's own genotype")

    assert m.validate_genotype(geno, 4) == []
    bad = geno.replace("sep_conv", "warp_conv", 1)
    violations = m.validate_genotype(bad, 4)
    assert violations, "corrupted genotype must report violations"
    print(f"validate_genotype: ok on real output, {len(violations)} violation(s) on corrupted")

    dot = m.genotype_to_dot(geno)
    assert dot.startswith("digraph") and dot.count("->") >= 8
    print(f"genotype_to_dot: {len(dot)} bytes of DOT")

    report = m.cost(geno, 36, 20, 10, 32)
    assert report["params"] > 0 and report["multiply_adds"] > report["params"]
    print(
        f"cost at C0=36, L=20: {report['params'] / 1e6:.2f}M params, "
        f"{report['multiply_adds'] / 1e6:.0f}M multiply-adds"
    )

    print("smoke test passed")


if __name__ == "__main__":
    main()
