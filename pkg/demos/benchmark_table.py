"""Run one ablation suite on the synthetic benchmark and print the table.

    python demos/benchmark_table.py noise [--scenes 10]
"""
import argparse

from tco.benchmark import BENCH_TCO, BenchmarkConfig, ablation, format_table, load_base_model, summarize


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("suite", choices=("radius_scale", "lora_rank", "finetune_heads", "noise"))
    ap.add_argument("--scenes", type=int, default=10)
    args = ap.parse_args()
    rows = summarize(ablation(args.suite, load_base_model(), BenchmarkConfig(n_scenes=args.scenes), BENCH_TCO))
    print(format_table(rows))


if __name__ == "__main__":
    main()
