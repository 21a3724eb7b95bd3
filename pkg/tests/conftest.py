import json
from pathlib import Path

import numpy as np
import pytest

from semrf import autodiff as ad


def param_grad_error(params: dict, loss_fn, per_param: int = 12, seed: int = 0, h: float = 1e-5) -> float:
    """Worst finite-difference mismatch of d loss_fn / d params.

    ``loss_fn`` takes a dict whose values are tensors or plain arrays and
    returns a scalar tensor.  A random subset of ``per_param`` entries of each
    array is compared.
    """
    tape = ad.Tape()
    taped = {k: tape.param(v, k) for k, v in params.items()}
    grads = ad.backprop(tape, loss_fn(taped))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(params):
        base = params[name]
        idx = rng.choice(base.size, size=min(per_param, base.size), replace=False)

        def f(v, name=name):
            return float(loss_fn({**params, name: v}).value)

        err = ad.finite_diff_check(f, base, h=h, grad=grads[taped[name].node], indices=idx)
        worst = max(worst, err)
    return worst


OVERFIT_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "overfit.json"


def overfit_dataset_config(width=16, height=12) -> dict:
    cfg = json.loads(OVERFIT_CONFIG.read_text())["dataset"]
    return {**cfg, "width": width, "height": height}


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    """The overfit scene (one target, four sources) at 16x12 pixels."""
    from semrf.synthscene import generate_dataset

    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(overfit_dataset_config(), root, seed=0)
    return root


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
