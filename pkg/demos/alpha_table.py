"""Revenue coefficients of every pricing strategy for one destination.

    python3 demos/alpha_table.py --capacity 30 --epsilon 4.04 --lam 2.62
"""

import argparse

from revman.alpha import (
    FullDynamic,
    IntermediateK,
    StoppingTime,
    StoppingTimeM,
    Uniform,
    alpha_coefficient,
    expected_load,
)

STRATEGIES = [Uniform(), StoppingTimeM(2, True), StoppingTimeM(2), StoppingTimeM(12, True), StoppingTimeM(12),
              IntermediateK(50), StoppingTime(), FullDynamic()]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--capacity", type=int, default=30)
    ap.add_argument("--epsilon", type=float, default=4.04)
    ap.add_argument("--lam", type=float, default=2.62)
    a = ap.parse_args()
    print(f"C = {a.capacity}, eps = {a.epsilon}, lambda = {a.lam}")
    print(f"{'strategy':24} {'complete':>10} {'incomplete':>11} {'load (inc.)':>12}")
    for s in STRATEGIES:
        c = alpha_coefficient(s, "complete", a.capacity, a.epsilon, a.lam)
        i = alpha_coefficient(s, "incomplete", a.capacity, a.epsilon, a.lam)
        try:
            load = f"{expected_load(s, 'incomplete', a.capacity, a.epsilon, a.lam, formula='argmax'):.3f}"
        except ValueError:
            load = "-"
        print(f"{s.label:24} {c:10.4f} {i:11.4f} {load:>12}")


if __name__ == "__main__":
    main()
