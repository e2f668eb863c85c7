import numpy as np


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.normal(0.0, scale, size=p.shape)
    return module


# (criterion, passed, detail) lines collected by the acceptance tests and printed in the terminal summary
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((criterion, bool(passed), detail))
    return bool(passed)
