"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --repeats 200
"""
import argparse
import json
import timeit

import numpy as np

from ssmvla import env
from ssmvla.kernels import get_backend


def bench(name, repeats):
    k = get_backend(name)
    state = env.reset(0, "push_red")
    rng = np.random.default_rng(0)
    x, codes = rng.standard_normal((64, 64)), rng.standard_normal((32, 64))
    render = min(timeit.repeat(lambda: env.render(state, name), number=repeats, repeat=3)) / repeats
    nearest = min(timeit.repeat(lambda: k.nearest_codes(x, codes), number=repeats, repeat=3)) / repeats
    return {"render_scene_us": render * 1e6, "nearest_codes_us": nearest * 1e6}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=200)
    args = p.parse_args(argv)
    results = {"python": bench("python", args.repeats)}
    try:
        results["compiled"] = bench("compiled", args.repeats)
    except ImportError as e:
        print(f"compiled kernels unavailable: {e}")
    if "compiled" in results:
        results["speedup"] = {k: results["python"][k] / results["compiled"][k] for k in results["python"]}
    print(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
