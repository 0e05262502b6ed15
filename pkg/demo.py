"""
Chunkwise Demo Script

Run this to see the planner in action on the bundled scenarios.
Usage: python demo.py
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from src.core.config import load_scenario
from src.core.verification import KernelSize
from src.pipeline import ChunkwiseWorkforce

SCENARIOS = Path(__file__).parent / "scenarios"


def main():
    print("=" * 50)
    print("Chunkwise - MoE Memory Planning Demo")
    print("=" * 50)

    print("\nStarting stages...")
    workforce = ChunkwiseWorkforce()
    workforce.initialize()
    print(f"Ready. {len(workforce.coordinator.stages)} stages loaded.\n")

    model_i = load_scenario(SCENARIOS / "model_i.yaml")

    print("-" * 50)
    print("[1] Memory per method, worst-case routing")
    print("-" * 50)
    memory = workforce.estimate(scenario=model_i)
    print(memory.data.format_table() + "\n")

    print("-" * 50)
    print("[2] Routing imbalance -> chunk plan -> throughput")
    print("-" * 50)
    sim = workforce.simulate(scenario=model_i, dist="depth_skew", seed=0, iterations=10)
    plan = sim.data["plans"]["tuned"]
    print(f"Mean chunks per layer: {[round(c, 2) for c in plan.layer_means()]}")
    for row in sim.data["throughput"].rows:
        print(f"{row.method:<10} T={row.mean_seconds:.4f} s  TGS={row.tgs:.1f}")
    print()

    print("-" * 50)
    print("[3] Kernel checks (small instances)")
    print("-" * 50)
    check = workforce.verify(size=KernelSize(tokens=16, hidden=8, intermediate=8, experts=4, topk=2), seeds=3)
    for name, (ok, total) in check.data.summary().items():
        print(f"{name:<22} {ok}/{total}")

    print("-" * 50)
    print("Demo complete!")
    print("-" * 50)


if __name__ == "__main__":
    main()
